//! LRU cache of critic values keyed by a quantized state embedding and the
//! local action identifiers.
//!
//! Entries expire `ttl` cache steps after insertion, the whole cache is
//! flushed every `flush_interval` steps, a fraction of hits is deliberately
//! reported as misses so that stale values get re-evaluated, and entries on
//! devices near a change are invalidated by BFS over the current adjacency.
//! One cache step is one decode call.

use crate::env::graph::{khop_ball, Adjacency};
use crate::env::{ActionAtom, ActionKind};
use crate::seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("state embedding has a non-finite coordinate at index {0}")]
    NonFinite(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    /// Disables the cache entirely: every lookup misses and nothing is stored.
    pub enabled: bool,
    pub capacity: usize,
    /// Lifetime in cache steps; 0 disables expiry.
    pub ttl: u64,
    /// Flush period in cache steps; 0 disables flushing.
    pub flush_interval: u64,
    pub reeval_prob: f64,
    pub khop_radius: usize,
    pub quantization_decimals: u32,
    /// Hash the exact bit patterns of the embedding instead of rounding.
    pub full_precision_keys: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            capacity: 50_000,
            ttl: 50,
            flush_interval: 200,
            reeval_prob: 0.01,
            khop_radius: 1,
            quantization_decimals: 3,
            full_precision_keys: false,
        }
    }
}

impl CacheConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Exact-reuse settings: no rounding, no expiry, no flush, no random
    /// re-evaluation, and invalidation reaching the whole connected component.
    pub fn strict(device_count: usize) -> Self {
        Self {
            enabled: true,
            capacity: 50_000,
            ttl: 0,
            flush_interval: 0,
            reeval_prob: 0.0,
            khop_radius: device_count,
            quantization_decimals: 0,
            full_precision_keys: true,
        }
    }

    pub fn decimals(&self) -> Option<u32> {
        (!self.full_precision_keys).then_some(self.quantization_decimals)
    }
}

/// Ordered by node first so all entries of a device form one contiguous range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub node: usize,
    pub state_key: u64,
    pub action_type: ActionKind,
    pub exploit: Option<usize>,
    pub app: Option<usize>,
}

impl CacheKey {
    pub fn new(state_key: u64, atom: &ActionAtom) -> Self {
        Self {
            node: atom.node,
            state_key,
            action_type: atom.kind,
            exploit: atom.exploit,
            app: atom.app,
        }
    }

    fn first_of(node: usize) -> Self {
        Self {
            node,
            state_key: 0,
            action_type: ActionKind::Scan,
            exploit: None,
            app: None,
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash of the rounded state embedding.
///
/// Each coordinate is rounded to `decimals` places as `round(x * 10^d)` and
/// fed as a little-endian `i64` into 64-bit FNV-1a, after a tag byte and the
/// vector length. With `decimals = None` the raw IEEE-754 bits are hashed
/// instead (with `-0.0` folded into `0.0`).
pub fn state_key(h: &[f64], decimals: Option<u32>) -> Result<u64, CacheError> {
    if let Some(i) = h.iter().position(|x| !x.is_finite()) {
        return Err(CacheError::NonFinite(i));
    }
    let mut acc = fnv1a(FNV_OFFSET, &[u8::from(decimals.is_some())]);
    acc = fnv1a(acc, &(h.len() as u64).to_le_bytes());
    match decimals {
        Some(d) => {
            let scale = 10f64.powi(d as i32);
            for &x in h {
                let q = (x * scale).round() as i64;
                acc = fnv1a(acc, &q.to_le_bytes());
            }
        }
        None => {
            for &x in h {
                let x = if x == 0.0 { 0.0 } else { x };
                acc = fnv1a(acc, &x.to_bits().to_le_bytes());
            }
        }
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub q: f64,
    pub inserted_at: u64,
    pub uses: u64,
    touched: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub forced_reevals: u64,
    pub invalidations: u64,
    pub flushes: u64,
    pub evictions: u64,
    pub expirations: u64,
}

impl CacheStats {
    pub fn merge(&mut self, other: &CacheStats) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.forced_reevals += other.forced_reevals;
        self.invalidations += other.invalidations;
        self.flushes += other.flushes;
        self.evictions += other.evictions;
        self.expirations += other.expirations;
    }

    /// Counts accumulated since `earlier` was taken from the same cache.
    pub fn since(&self, earlier: &CacheStats) -> CacheStats {
        CacheStats {
            hits: self.hits - earlier.hits,
            misses: self.misses - earlier.misses,
            forced_reevals: self.forced_reevals - earlier.forced_reevals,
            invalidations: self.invalidations - earlier.invalidations,
            flushes: self.flushes - earlier.flushes,
            evictions: self.evictions - earlier.evictions,
            expirations: self.expirations - earlier.expirations,
        }
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct QCache {
    config: CacheConfig,
    entries: BTreeMap<CacheKey, Entry>,
    recency: BTreeMap<u64, CacheKey>,
    clock: u64,
    cache_step: u64,
    rng: ChaCha8Rng,
    stats: CacheStats,
}

impl QCache {
    pub fn new(config: CacheConfig, seed: u64) -> Self {
        Self {
            config,
            entries: BTreeMap::new(),
            recency: BTreeMap::new(),
            clock: 0,
            cache_step: 0,
            rng: seed::rng(seed),
            stats: CacheStats::default(),
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn is_enabled(&self) -> bool {
        self.config.enabled
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn cache_step(&self) -> u64 {
        self.cache_step
    }

    pub fn state_key(&self, h: &[f64]) -> Result<u64, CacheError> {
        state_key(h, self.config.decimals())
    }

    /// Entry without touching recency, counters or the re-evaluation coin.
    pub fn peek(&self, key: &CacheKey) -> Option<&Entry> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.entries.keys()
    }

    /// Least recently touched key, the next eviction victim.
    pub fn lru_key(&self) -> Option<CacheKey> {
        self.recency.values().next().copied()
    }

    fn expired(&self, e: &Entry) -> bool {
        self.config.ttl > 0 && self.cache_step > e.inserted_at + self.config.ttl
    }

    fn touch(&mut self, key: &CacheKey) {
        self.clock += 1;
        if let Some(e) = self.entries.get_mut(key) {
            self.recency.remove(&e.touched);
            e.touched = self.clock;
            self.recency.insert(self.clock, *key);
        }
    }

    fn remove(&mut self, key: &CacheKey) -> Option<Entry> {
        let e = self.entries.remove(key)?;
        self.recency.remove(&e.touched);
        Some(e)
    }

    pub fn lookup(&mut self, key: &CacheKey) -> Option<f64> {
        if !self.config.enabled {
            self.stats.misses += 1;
            return None;
        }
        let Some(entry) = self.entries.get(key).copied() else {
            self.stats.misses += 1;
            return None;
        };
        if self.expired(&entry) {
            self.remove(key);
            self.stats.expirations += 1;
            self.stats.misses += 1;
            return None;
        }
        if self.config.reeval_prob > 0.0 && self.rng.random_bool(self.config.reeval_prob.min(1.0)) {
            self.stats.forced_reevals += 1;
            self.stats.misses += 1;
            return None;
        }
        self.touch(key);
        if let Some(e) = self.entries.get_mut(key) {
            e.uses += 1;
        }
        self.stats.hits += 1;
        Some(entry.q)
    }

    /// Stores `q`, overwriting and refreshing an existing entry. Non-finite
    /// values are not stored. Returns the evicted key, if any.
    pub fn insert(&mut self, key: CacheKey, q: f64) -> Option<CacheKey> {
        if !self.config.enabled || !q.is_finite() {
            return None;
        }
        let now = self.cache_step;
        match self.entries.get_mut(&key) {
            Some(e) => {
                e.q = q;
                e.inserted_at = now;
                e.uses = 0;
            }
            None => {
                self.entries.insert(
                    key,
                    Entry {
                        q,
                        inserted_at: now,
                        uses: 0,
                        touched: 0,
                    },
                );
                self.recency.insert(0, key);
            }
        }
        // New entries were parked at recency 0; touch moves them to the front.
        self.recency.remove(&0);
        self.clock += 1;
        let e = self.entries.get_mut(&key).expect("just inserted");
        if e.touched != 0 {
            self.recency.remove(&e.touched);
        }
        e.touched = self.clock;
        self.recency.insert(self.clock, key);

        if self.entries.len() > self.config.capacity.max(1) {
            let victim = self.lru_key().expect("non-empty");
            self.remove(&victim);
            self.stats.evictions += 1;
            return Some(victim);
        }
        None
    }

    /// Removes every entry whose node lies within `radius` hops of a changed
    /// node on `adjacency`. Returns the number removed.
    pub fn invalidate_khop(&mut self, changed: impl IntoIterator<Item = usize>, adjacency: &Adjacency, radius: usize) -> usize {
        if self.entries.is_empty() {
            return 0;
        }
        let ball = khop_ball(adjacency, changed, radius);
        let mut removed = 0;
        for (node, inside) in ball.into_iter().enumerate() {
            if !inside {
                continue;
            }
            let doomed: Vec<CacheKey> = self
                .entries
                .range(CacheKey::first_of(node)..CacheKey::first_of(node + 1))
                .map(|(k, _)| *k)
                .collect();
            for k in doomed {
                self.remove(&k);
                removed += 1;
            }
        }
        self.stats.invalidations += removed as u64;
        removed
    }

    /// Advances the cache clock, flushing on multiples of `flush_interval`.
    pub fn tick(&mut self) {
        self.cache_step += 1;
        let every = self.config.flush_interval;
        if every > 0 && self.cache_step % every == 0 {
            self.clear();
            self.stats.flushes += 1;
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.recency.clear();
    }
}
