//! Exact tabular MDP tools for checking the value loss caused by pruning.
//!
//! If a rule keeps a non-empty subset `S(s)` of the legal actions and the
//! policy is greedy in `Q*` within `S(s)`, then
//! `|V* - V^pi|_inf <= max_s (max_A Q*(s,.) - max_S Q*(s,.)) / (1 - gamma)`.
//! More generally any policy whose one-step gap `V*(s) - Q*(s, pi(s))` is at
//! most `eps` everywhere loses at most `eps / (1 - gamma)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("state {0} has an empty or illegal action set")]
    BadRule(usize),
    #[error("policy picks illegal action {action} in state {state}")]
    IllegalPolicy { state: usize, action: usize },
    #[error("linear system is singular")]
    Singular,
}

/// Fully observed finite MDP with per-state action masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    mask: Vec<bool>,
    /// `transitions[(s * A + a) * S + s']`.
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        mask: Vec<bool>,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
    ) -> Result<Self, TheoryError> {
        let bad = |m: String| Err(TheoryError::InvalidMdp(m));
        if n_states == 0 || n_actions == 0 {
            return bad("needs at least one state and one action".into());
        }
        let sa = n_states * n_actions;
        if mask.len() != sa || rewards.len() != sa || transitions.len() != sa * n_states {
            return bad("array shapes do not match the state and action counts".into());
        }
        if !(gamma > 0.0 && gamma < 1.0) && gamma != 0.0 {
            return bad(format!("gamma {gamma} outside [0, 1)"));
        }
        for s in 0..n_states {
            if !(0..n_actions).any(|a| mask[s * n_actions + a]) {
                return bad(format!("state {s} has no legal action"));
            }
            for a in 0..n_actions {
                let row = &transitions[(s * n_actions + a) * n_states..(s * n_actions + a + 1) * n_states];
                let total: f64 = row.iter().sum();
                if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                    return bad(format!("transition row ({s}, {a}) is not a distribution"));
                }
                if !rewards[s * n_actions + a].is_finite() {
                    return bad(format!("reward ({s}, {a}) is not finite"));
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            mask,
            transitions,
            rewards,
            gamma,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn legal(&self, s: usize, a: usize) -> bool {
        self.mask[s * self.n_actions + a]
    }

    pub fn actions(&self, s: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_actions).filter(move |&a| self.legal(s, a))
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn next(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.transitions[i..i + self.n_states]
    }

    pub fn r_max(&self) -> f64 {
        self.rewards.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// `Q(s, a) = r(s, a) + gamma E[V(s')]`; illegal pairs are `-inf`.
    pub fn q_from(&self, v: &[f64]) -> Vec<f64> {
        let mut q = vec![f64::NEG_INFINITY; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            for a in self.actions(s) {
                let ev: f64 = self.next(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
                q[s * self.n_actions + a] = self.reward(s, a) + self.gamma * ev;
            }
        }
        q
    }

    fn bellman(&self, v: &[f64]) -> Vec<f64> {
        let q = self.q_from(v);
        (0..self.n_states)
            .map(|s| {
                q[s * self.n_actions..(s + 1) * self.n_actions]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }
}

/// Per-state allowed subsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRule {
    pub allowed: Vec<Vec<usize>>,
}

impl PruneRule {
    pub fn unpruned(mdp: &TabularMdp) -> Self {
        Self {
            allowed: (0..mdp.n_states).map(|s| mdp.actions(s).collect()).collect(),
        }
    }

    pub fn validate(&self, mdp: &TabularMdp) -> Result<(), TheoryError> {
        if self.allowed.len() != mdp.n_states {
            return Err(TheoryError::BadRule(self.allowed.len().min(mdp.n_states)));
        }
        for (s, set) in self.allowed.iter().enumerate() {
            if set.is_empty() || set.iter().any(|&a| a >= mdp.n_actions || !mdp.legal(s, a)) {
                return Err(TheoryError::BadRule(s));
            }
        }
        Ok(())
    }
}

fn sup_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueIteration {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub iterations: usize,
    /// `|T V_k - V_k|_inf` for every iterate.
    pub residuals: Vec<f64>,
}

/// Iterates the Bellman optimality operator until `|T V - V|_inf <= tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> ValueIteration {
    let mut v = vec![0.0; mdp.n_states];
    let mut residuals = Vec::new();
    loop {
        let tv = mdp.bellman(&v);
        let res = sup_norm_diff(&tv, &v);
        residuals.push(res);
        if res <= tol || residuals.len() > 1_000_000 {
            let q = mdp.q_from(&v);
            return ValueIteration {
                v,
                q,
                iterations: residuals.len() - 1,
                residuals,
            };
        }
        v = tv;
    }
}

/// Exact `V^pi` from `(I - gamma P^pi) V = r^pi`.
pub fn policy_eval(mdp: &TabularMdp, policy: &[usize]) -> Result<Vec<f64>, TheoryError> {
    let n = mdp.n_states;
    for (s, &a) in policy.iter().enumerate() {
        if a >= mdp.n_actions || !mdp.legal(s, a) {
            return Err(TheoryError::IllegalPolicy { state: s, action: a });
        }
    }
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        let a = policy[s];
        r[s] = mdp.reward(s, a);
        for (t, p) in mdp.next(s, a).iter().enumerate() {
            m[(s, t)] -= mdp.gamma * p;
        }
    }
    let v = m.lu().solve(&r).ok_or(TheoryError::Singular)?;
    Ok(v.iter().copied().collect())
}

/// Greedy in `q` within the rule's subsets, ties to the lower action.
pub fn pruned_greedy(mdp: &TabularMdp, q: &[f64], rule: &PruneRule) -> Result<Vec<usize>, TheoryError> {
    rule.validate(mdp)?;
    let na = mdp.n_actions;
    Ok(rule
        .allowed
        .iter()
        .enumerate()
        .map(|(s, set)| {
            let mut sorted = set.clone();
            sorted.sort_unstable();
            let mut best = sorted[0];
            for &a in &sorted[1..] {
                if q[s * na + a] > q[s * na + best] {
                    best = a;
                }
            }
            best
        })
        .collect())
}

/// Optimal values and action values, polished by policy iteration so they are
/// exact up to the linear solve.
pub fn solve_optimal(mdp: &TabularMdp, tol: f64) -> Result<(Vec<f64>, Vec<f64>), TheoryError> {
    let vi = value_iteration(mdp, tol);
    let unpruned = PruneRule::unpruned(mdp);
    let mut policy = pruned_greedy(mdp, &vi.q, &unpruned)?;
    for _ in 0..100 {
        let v = policy_eval(mdp, &policy)?;
        let q = mdp.q_from(&v);
        let next = pruned_greedy(mdp, &q, &unpruned)?;
        // Keep the incumbent unless another action is strictly better, so
        // floating-point ties cannot cycle.
        let improved: Vec<usize> = (0..mdp.n_states)
            .map(|s| {
                let na = mdp.n_actions;
                if q[s * na + next[s]] > q[s * na + policy[s]] + 1e-12 {
                    next[s]
                } else {
                    policy[s]
                }
            })
            .collect();
        if improved == policy {
            return Ok((v, q));
        }
        policy = improved;
    }
    let v = policy_eval(mdp, &policy)?;
    let q = mdp.q_from(&v);
    Ok((v, q))
}

/// `max_s (max_{A(s)} Q - max_{S(s)} Q)` and the state attaining it.
pub fn delta_max(mdp: &TabularMdp, q: &[f64], rule: &PruneRule) -> Result<(f64, usize), TheoryError> {
    rule.validate(mdp)?;
    let na = mdp.n_actions;
    let mut worst = (0.0, 0);
    for (s, set) in rule.allowed.iter().enumerate() {
        let full = mdp.actions(s).map(|a| q[s * na + a]).fold(f64::NEG_INFINITY, f64::max);
        let kept = set.iter().map(|&a| q[s * na + a]).fold(f64::NEG_INFINITY, f64::max);
        let gap = (full - kept).max(0.0);
        if gap > worst.0 {
            worst = (gap, s);
        }
    }
    Ok(worst)
}

/// Both sides of a value-loss bound on one instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    /// `Delta_max` for the pruning bound, the one-step gap for the general one.
    pub gap: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    /// State where `|V* - V^pi|` is largest.
    pub witness: usize,
}

fn report(gap: f64, v_star: &[f64], v_pi: &[f64], gamma: f64, tol: f64) -> BoundReport {
    let (mut lhs, mut witness) = (0.0, 0);
    for (s, (a, b)) in v_star.iter().zip(v_pi).enumerate() {
        if (a - b).abs() > lhs {
            lhs = (a - b).abs();
            witness = s;
        }
    }
    let rhs = gap / (1.0 - gamma);
    BoundReport {
        gap,
        lhs,
        rhs,
        slack: rhs - lhs,
        holds: lhs <= rhs + tol,
        witness,
    }
}

/// Pruned-greedy value loss against `Delta_max / (1 - gamma)`.
pub fn check_theorem(mdp: &TabularMdp, rule: &PruneRule, tol: f64) -> Result<BoundReport, TheoryError> {
    let (v_star, q_star) = solve_optimal(mdp, tol * 1e-3)?;
    let (gap, _) = delta_max(mdp, &q_star, rule)?;
    let pi = pruned_greedy(mdp, &q_star, rule)?;
    let v_pi = policy_eval(mdp, &pi)?;
    Ok(report(gap, &v_star, &v_pi, mdp.gamma, tol))
}

/// Value loss of an arbitrary policy against its one-step gap `/ (1 - gamma)`.
pub fn check_lemma(mdp: &TabularMdp, policy: &[usize], tol: f64) -> Result<BoundReport, TheoryError> {
    let (v_star, q_star) = solve_optimal(mdp, tol * 1e-3)?;
    let v_pi = policy_eval(mdp, policy)?;
    let na = mdp.n_actions;
    let gap = policy
        .iter()
        .enumerate()
        .map(|(s, &a)| (v_star[s] - q_star[s * na + a]).max(0.0))
        .fold(0.0, f64::max);
    Ok(report(gap, &v_star, &v_pi, mdp.gamma, tol))
}

/// Dirichlet(1) transition rows, rewards uniform in `[-1, 1]`, and a random
/// non-empty action mask per state.
pub fn random_mdp<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> TabularMdp {
    let mut mask = vec![false; n_states * n_actions];
    for s in 0..n_states {
        let k = rng.random_range(1..=n_actions);
        for a in sample(rng, n_actions, k) {
            mask[s * n_actions + a] = true;
        }
    }
    let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let row: Vec<f64> = (0..n_states).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = row.iter().sum();
        let mut row: Vec<f64> = row.iter().map(|x: &f64| x / total).collect();
        // Push the rounding residue into the largest entry.
        let residue = 1.0 - row.iter().sum::<f64>();
        let big = (0..n_states).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        row[big] += residue;
        transitions.extend(row);
    }
    let rewards = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect();
    TabularMdp::new(n_states, n_actions, mask, transitions, rewards, gamma).expect("generator builds valid MDPs")
}

/// A random non-empty subset of each state's legal actions.
pub fn random_rule<R: Rng>(rng: &mut R, mdp: &TabularMdp) -> PruneRule {
    PruneRule {
        allowed: (0..mdp.n_states)
            .map(|s| {
                let legal: Vec<usize> = mdp.actions(s).collect();
                let k = rng.random_range(1..=legal.len());
                let mut set: Vec<usize> = sample(rng, legal.len(), k).into_iter().map(|i| legal[i]).collect();
                set.sort_unstable();
                set
            })
            .collect(),
    }
}

pub fn random_policy<R: Rng>(rng: &mut R, mdp: &TabularMdp) -> Vec<usize> {
    (0..mdp.n_states)
        .map(|s| {
            let legal: Vec<usize> = mdp.actions(s).collect();
            legal[rng.random_range(0..legal.len())]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub gammas: Vec<f64>,
    pub tol: f64,
    /// Keep every legal action, so the pruning gap is zero everywhere.
    pub unpruned: bool,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            max_states: 20,
            max_actions: 6,
            gammas: vec![0.9, 0.99],
            tol: 1e-8,
            unpruned: false,
        }
    }
}

/// One campaign instance: the pruning bound and the general bound for a
/// random policy on the same MDP.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceReport {
    pub instance: usize,
    pub gamma: f64,
    pub states: usize,
    pub actions: usize,
    pub delta_max: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    pub witness_state: usize,
    pub policy_gap: f64,
    pub policy_lhs: f64,
    pub policy_rhs: f64,
    pub policy_holds: bool,
}

pub fn run_instance(cfg: &TheoryConfig, seed: u64, instance: usize) -> Result<InstanceReport, TheoryError> {
    let mut rng = seed::rng(seed::derive(seed, &[instance as u64]));
    let gamma = cfg.gammas[instance % cfg.gammas.len()];
    let n_states = rng.random_range(1..=cfg.max_states.max(1));
    let n_actions = rng.random_range(1..=cfg.max_actions.max(1));
    let mdp = random_mdp(&mut rng, n_states, n_actions, gamma);
    let rule = if cfg.unpruned {
        PruneRule::unpruned(&mdp)
    } else {
        random_rule(&mut rng, &mdp)
    };
    let thm = check_theorem(&mdp, &rule, cfg.tol)?;
    let policy = random_policy(&mut rng, &mdp);
    let lem = check_lemma(&mdp, &policy, cfg.tol)?;
    Ok(InstanceReport {
        instance,
        gamma,
        states: n_states,
        actions: n_actions,
        delta_max: thm.gap,
        lhs: thm.lhs,
        rhs: thm.rhs,
        slack: thm.slack,
        holds: thm.holds,
        witness_state: thm.witness,
        policy_gap: lem.gap,
        policy_lhs: lem.lhs,
        policy_rhs: lem.rhs,
        policy_holds: lem.holds,
    })
}

/// Runs every instance of the campaign, in parallel, in instance order.
pub fn run_campaign(cfg: &TheoryConfig, seed: u64) -> Result<Vec<InstanceReport>, TheoryError> {
    (0..cfg.instances).into_par_iter().map(|i| run_instance(cfg, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![true], vec![1.0], vec![reward], gamma).unwrap()
    }

    /// Two states, two actions. In state 0, action 0 stays for 0.1 and
    /// action 1 moves to state 1 for nothing. State 1 pays 1 for staying.
    fn two_state(gamma: f64) -> TabularMdp {
        TabularMdp::new(
            2,
            2,
            vec![true; 4],
            vec![
                1.0, 0.0, // (0, 0)
                0.0, 1.0, // (0, 1)
                0.0, 1.0, // (1, 0)
                1.0, 0.0, // (1, 1)
            ],
            vec![0.1, 0.0, 1.0, 0.0],
            gamma,
        )
        .unwrap()
    }

    /// Iterative evaluation, independent of the linear solve.
    fn iterate_eval(mdp: &TabularMdp, pi: &[usize], steps: usize) -> Vec<f64> {
        let mut v = vec![0.0; mdp.n_states()];
        for _ in 0..steps {
            v = (0..mdp.n_states())
                .map(|s| {
                    let a = pi[s];
                    mdp.reward(s, a) + mdp.gamma() * mdp.next(s, a).iter().zip(&v).map(|(p, x)| p * x).sum::<f64>()
                })
                .collect();
        }
        v
    }

    #[test]
    fn rejects_malformed_mdps() {
        assert!(TabularMdp::new(1, 1, vec![true], vec![0.9], vec![0.0], 0.5).is_err());
        assert!(TabularMdp::new(1, 1, vec![false], vec![1.0], vec![0.0], 0.5).is_err());
        assert!(TabularMdp::new(1, 1, vec![true], vec![1.0], vec![0.0], 1.0).is_err());
    }

    #[test]
    fn single_state_geometric_value() {
        let vi = value_iteration(&single(2.0, 0.9), 1e-12);
        assert!((vi.v[0] - 20.0).abs() < 1e-10);
        assert!((policy_eval(&single(2.0, 0.9), &[0]).unwrap()[0] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn zero_discount_is_myopic() {
        let mut rng = seed::rng(1);
        let mdp = random_mdp(&mut rng, 6, 4, 0.0);
        let vi = value_iteration(&mdp, 1e-12);
        for s in 0..6 {
            let best = mdp.actions(s).map(|a| mdp.reward(s, a)).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(vi.v[s], best);
        }
        let pi = random_policy(&mut rng, &mdp);
        let v = policy_eval(&mdp, &pi).unwrap();
        for s in 0..6 {
            assert!((v[s] - mdp.reward(s, pi[s])).abs() < 1e-15);
        }
    }

    #[test]
    fn value_iteration_matches_linear_solve() {
        let mut rng = seed::rng(2);
        for _ in 0..10 {
            let mdp = random_mdp(&mut rng, 10, 4, 0.9);
            let vi = value_iteration(&mdp, 1e-12);
            let greedy = pruned_greedy(&mdp, &vi.q, &PruneRule::unpruned(&mdp)).unwrap();
            let exact = policy_eval(&mdp, &greedy).unwrap();
            assert!(sup_norm_diff(&vi.v, &exact) <= 1e-8);
            let tv = mdp.bellman(&vi.v);
            assert!(sup_norm_diff(&tv, &vi.v) <= 1e-12);
        }
    }

    #[test]
    fn residuals_contract() {
        let mut rng = seed::rng(3);
        for gamma in [0.5, 0.9, 0.99] {
            let mdp = random_mdp(&mut rng, 12, 5, gamma);
            let vi = value_iteration(&mdp, 1e-10);
            for w in vi.residuals.windows(2) {
                if w[0] > 1e-9 {
                    assert!(w[1] <= gamma * w[0] + 1e-12, "{} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn linear_solve_matches_iteration() {
        let mut rng = seed::rng(4);
        for _ in 0..10 {
            let mdp = random_mdp(&mut rng, 8, 3, 0.9);
            let pi = random_policy(&mut rng, &mdp);
            let exact = policy_eval(&mdp, &pi).unwrap();
            assert!(sup_norm_diff(&exact, &iterate_eval(&mdp, &pi, 10_000)) <= 1e-6);
        }
    }

    #[test]
    fn optimal_policy_evaluates_to_optimal_value() {
        let mut rng = seed::rng(5);
        let mdp = random_mdp(&mut rng, 15, 4, 0.99);
        let (v, q) = solve_optimal(&mdp, 1e-10).unwrap();
        let pi = pruned_greedy(&mdp, &q, &PruneRule::unpruned(&mdp)).unwrap();
        assert!(sup_norm_diff(&policy_eval(&mdp, &pi).unwrap(), &v) <= 1e-8);
    }

    #[test]
    fn pruned_greedy_rules() {
        let mut rng = seed::rng(6);
        let mdp = random_mdp(&mut rng, 7, 5, 0.9);
        let (_, q) = solve_optimal(&mdp, 1e-10).unwrap();
        let singleton = PruneRule {
            allowed: (0..7).map(|s| vec![mdp.actions(s).last().unwrap()]).collect(),
        };
        let pi = pruned_greedy(&mdp, &q, &singleton).unwrap();
        assert!((0..7).all(|s| pi[s] == singleton.allowed[s][0]));
        for _ in 0..20 {
            let rule = random_rule(&mut rng, &mdp);
            let pi = pruned_greedy(&mdp, &q, &rule).unwrap();
            for s in 0..7 {
                let brute = *rule.allowed[s]
                    .iter()
                    .max_by(|&&a, &&b| q[s * 5 + a].total_cmp(&q[s * 5 + b]).then(b.cmp(&a)))
                    .unwrap();
                assert_eq!(pi[s], brute);
            }
        }
        let empty = PruneRule { allowed: vec![vec![]; 7] };
        assert_eq!(pruned_greedy(&mdp, &q, &empty), Err(TheoryError::BadRule(0)));
    }

    #[test]
    fn ties_break_to_lower_action() {
        let mdp = TabularMdp::new(1, 3, vec![true; 3], vec![1.0; 3], vec![1.0; 3], 0.5).unwrap();
        let q = mdp.q_from(&[2.0]);
        assert_eq!(pruned_greedy(&mdp, &q, &PruneRule { allowed: vec![vec![2, 1]] }).unwrap(), vec![1]);
    }

    #[test]
    fn delta_max_examples() {
        let mdp = TabularMdp::new(1, 2, vec![true; 2], vec![1.0; 2], vec![0.0; 2], 0.5).unwrap();
        let q = vec![3.0, 7.0];
        assert_eq!(delta_max(&mdp, &q, &PruneRule { allowed: vec![vec![0]] }).unwrap().0, 4.0);
        assert_eq!(delta_max(&mdp, &q, &PruneRule { allowed: vec![vec![1]] }).unwrap().0, 0.0);

        let mut rng = seed::rng(7);
        for _ in 0..20 {
            let mdp = random_mdp(&mut rng, 9, 4, 0.9);
            let rule = random_rule(&mut rng, &mdp);
            let (_, q) = solve_optimal(&mdp, 1e-10).unwrap();
            let mut brute: f64 = 0.0;
            for s in 0..9 {
                let mut full = f64::NEG_INFINITY;
                for a in 0..4 {
                    if mdp.legal(s, a) {
                        full = full.max(q[s * 4 + a]);
                    }
                }
                let mut kept = f64::NEG_INFINITY;
                for &a in &rule.allowed[s] {
                    kept = kept.max(q[s * 4 + a]);
                }
                brute = brute.max(full - kept);
            }
            assert_eq!(delta_max(&mdp, &q, &rule).unwrap().0, brute);
        }
    }

    #[test]
    fn unpruned_rule_has_no_loss() {
        let mut rng = seed::rng(8);
        let mdp = random_mdp(&mut rng, 10, 4, 0.99);
        let r = check_theorem(&mdp, &PruneRule::unpruned(&mdp), 1e-8).unwrap();
        assert_eq!(r.gap, 0.0);
        assert!(r.lhs <= 1e-8, "{}", r.lhs);
        assert!(r.holds);
    }

    #[test]
    fn adversarial_two_state_rule() {
        for gamma in [0.9, 0.99] {
            let mdp = two_state(gamma);
            let (v, q) = solve_optimal(&mdp, 1e-12).unwrap();
            let stay = 1.0 / (1.0 - gamma);
            assert!((v[1] - stay).abs() < 1e-9);
            assert!((v[0] - gamma * stay).abs() < 1e-9);
            assert!(q[1] > q[0]);
            let rule = PruneRule {
                allowed: vec![vec![0], vec![0, 1]],
            };
            let r = check_theorem(&mdp, &rule, 1e-8).unwrap();
            // Forced to stay in state 0 for 0.1 per step.
            assert!((r.lhs - (gamma - 0.1) * stay).abs() < 1e-9);
            assert!((r.gap - (q[1] - q[0])).abs() < 1e-12);
            assert!(r.holds && r.slack > 0.0);
        }
    }

    #[test]
    fn campaign_has_no_violations() {
        let reports = run_campaign(&TheoryConfig::default(), 11).unwrap();
        assert_eq!(reports.len(), 200);
        assert!(reports.iter().all(|r| r.holds && r.policy_holds));
        assert!(reports.iter().any(|r| r.delta_max > 0.0));
    }

    #[test]
    fn unpruned_campaign_rhs_is_zero() {
        let cfg = TheoryConfig {
            instances: 20,
            unpruned: true,
            ..TheoryConfig::default()
        };
        for r in run_campaign(&cfg, 3).unwrap() {
            assert_eq!(r.delta_max, 0.0);
            assert_eq!(r.rhs, 0.0);
        }
    }

    proptest! {
        #[test]
        fn bounds_hold_on_random_instances(seed in any::<u64>(), s in 1usize..12, a in 1usize..5, g in prop_oneof![Just(0.9), Just(0.99)]) {
            let mut rng = crate::seed::rng(seed);
            let mdp = random_mdp(&mut rng, s, a, g);
            let rule = random_rule(&mut rng, &mdp);
            prop_assert!(check_theorem(&mdp, &rule, 1e-8).unwrap().holds);
            let pi = random_policy(&mut rng, &mdp);
            prop_assert!(check_lemma(&mdp, &pi, 1e-8).unwrap().holds);
        }

        #[test]
        fn zero_gap_means_no_loss(seed in any::<u64>(), s in 1usize..10) {
            let mut rng = crate::seed::rng(seed);
            let mdp = random_mdp(&mut rng, s, 3, 0.9);
            let (_, q) = solve_optimal(&mdp, 1e-12).unwrap();
            let rule = PruneRule { allowed: pruned_greedy(&mdp, &q, &PruneRule::unpruned(&mdp)).unwrap().into_iter().map(|a| vec![a]).collect() };
            let r = check_theorem(&mdp, &rule, 1e-8).unwrap();
            prop_assert_eq!(r.gap, 0.0);
            prop_assert!(r.lhs <= 1e-8);
        }
    }
}
