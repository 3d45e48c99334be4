//! Device-graph generators and neighbourhood queries.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GraphModel {
    #[default]
    PreferentialAttachment,
    RandomRegular,
}

/// Undirected simple graph stored as sorted adjacency lists.
pub type Adjacency = Vec<Vec<usize>>;

/// Barabási-Albert growth: a seed clique of `m + 1` nodes, then each new node
/// attaches to `m` distinct existing nodes chosen proportionally to degree.
pub fn preferential_attachment<R: Rng>(n: usize, m: usize, rng: &mut R) -> Adjacency {
    let mut adj = vec![Vec::new(); n];
    if n <= 1 {
        return adj;
    }
    let m = m.max(1);
    let core = (m + 1).min(n);
    // Every endpoint of every edge, so uniform draws are degree-proportional.
    let mut endpoints = Vec::new();
    for u in 0..core {
        for v in (u + 1)..core {
            adj[u].push(v);
            adj[v].push(u);
            endpoints.push(u);
            endpoints.push(v);
        }
    }
    for v in core..n {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m.min(v) {
            let t = endpoints[rng.random_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for t in targets {
            adj[v].push(t);
            adj[t].push(v);
            endpoints.push(v);
            endpoints.push(t);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

/// Random `d`-regular graph by the pairing model with restarts. Falls back to a
/// circulant graph when pairing keeps producing loops or multi-edges.
pub fn random_regular<R: Rng>(n: usize, d: usize, rng: &mut R) -> Adjacency {
    if n <= 1 {
        return vec![Vec::new(); n];
    }
    let mut d = d.min(n - 1);
    if (n * d) % 2 == 1 {
        d -= 1;
    }
    'attempt: for _ in 0..200 {
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, d)).collect();
        stubs.shuffle(rng);
        let mut adj = vec![Vec::new(); n];
        for pair in stubs.chunks_exact(2) {
            let (u, v) = (pair[0], pair[1]);
            if u == v || adj[u].contains(&v) {
                continue 'attempt;
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        return adj;
    }
    circulant(n, d)
}

fn circulant(n: usize, d: usize) -> Adjacency {
    let mut adj = vec![Vec::new(); n];
    for u in 0..n {
        for off in 1..=d / 2 {
            let v = (u + off) % n;
            if !adj[u].contains(&v) && u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        if d % 2 == 1 && n % 2 == 0 {
            let v = (u + n / 2) % n;
            if !adj[u].contains(&v) {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

/// All nodes within `radius` hops of any source, sources included.
pub fn khop_ball(adj: &Adjacency, sources: impl IntoIterator<Item = usize>, radius: usize) -> Vec<bool> {
    let mut dist = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::new();
    for s in sources {
        if s < adj.len() && dist[s] != 0 {
            dist[s] = 0;
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        if dist[u] == radius {
            continue;
        }
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist.into_iter().map(|d| d != usize::MAX).collect()
}

/// Longest finite shortest-path length over all pairs (0 for edgeless graphs).
pub fn diameter(adj: &Adjacency) -> usize {
    let n = adj.len();
    let mut best = 0;
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            best = best.max(dist[u]);
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    best
}
