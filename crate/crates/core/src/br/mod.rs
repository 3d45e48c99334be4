//! Actor-critic approximate best responses.
//!
//! A deterministic actor maps the observation to a continuous vector in the
//! action-encoding space. Decoding restricts attention to the allowed devices,
//! takes the `greedy_k` legal atoms per device whose encodings lie nearest to
//! that vector, scores them with the critic (through the Q-value cache when
//! one is supplied) and keeps one atom per device.

mod train;

pub use train::{
    actor_gradient, actor_step, critic_loss, td_target, train_best_response, BrSetup, BrStats, EpisodeMetric, Trainer, Transition,
};

use crate::env::{ActionAtom, EnvConfig, NetworkState, Observation, Role, ACTION_TYPES_PER_ROLE};
use crate::meta::MetaController;
use crate::nn::{self, Activation, Mlp, NnError};
use crate::qcache::{CacheConfig, CacheKey, QCache};
use crate::seed;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::Arc;
use thiserror::Error;

pub use crate::replay::ReplayBuffer;

#[derive(Debug, Error)]
pub enum BrError {
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Meta(#[from] crate::meta::MetaError),
    #[error(transparent)]
    Cache(#[from] crate::qcache::CacheError),
    #[error("invalid mixture: {0}")]
    Mixture(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<std::io::Error> for BrError {
    fn from(e: std::io::Error) -> Self {
        BrError::Nn(NnError::Io(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub max_grad_norm: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Transitions collected before the first gradient step.
    pub warmup: usize,
    pub greedy_k: usize,
    pub greedy_tau: f64,
    pub noise_std: f64,
    pub reward_scale: f64,
    /// Environment steps per best-response run.
    pub budget: usize,
    /// Hidden width override; by default scaled with the critic input.
    pub hidden: Option<usize>,
}

impl Default for BrConfig {
    fn default() -> Self {
        Self {
            actor_lr: 1e-3,
            critic_lr: 1e-2,
            tau: 0.01,
            max_grad_norm: 0.5,
            replay_capacity: 100_000,
            batch_size: 32,
            warmup: 500,
            greedy_k: 5,
            greedy_tau: 0.5,
            noise_std: 0.1,
            reward_scale: 1.0,
            budget: 1000,
            hidden: None,
        }
    }
}

/// Critic input widths at which the reference architecture uses 128 units.
const DEFENDER_REFERENCE_INPUT: usize = 1229;
const ATTACKER_REFERENCE_INPUT: usize = 1004;

/// `clamp(round(128 * input / reference), 32, 128)`.
pub fn hidden_width(role: Role, critic_input: usize) -> usize {
    let reference = match role {
        Role::Defender => DEFENDER_REFERENCE_INPUT,
        Role::Attacker => ATTACKER_REFERENCE_INPUT,
    };
    ((128.0 * critic_input as f64 / reference as f64).round() as usize).clamp(32, 128)
}

/// One-hot blocks for node, action slot, exploit and app.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCodec {
    pub devices: usize,
    pub exploits: usize,
    pub apps: usize,
}

impl ActionCodec {
    pub fn new(env: &EnvConfig) -> Self {
        Self {
            devices: env.device_count,
            exploits: env.exploit_catalog_size,
            apps: env.app_catalog_size,
        }
    }

    pub fn width(&self) -> usize {
        self.devices + ACTION_TYPES_PER_ROLE + self.exploits + self.apps
    }

    /// Positions set to one in the encoding of `atom`.
    pub fn hot(&self, atom: &ActionAtom) -> impl Iterator<Item = usize> {
        let base = self.devices + ACTION_TYPES_PER_ROLE;
        [
            Some(atom.node),
            Some(self.devices + atom.kind.slot()),
            atom.exploit.map(|e| base + e),
            atom.app.map(|a| base + self.exploits + a),
        ]
        .into_iter()
        .flatten()
    }

    pub fn encode(&self, atom: &ActionAtom) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        for i in self.hot(atom) {
            v[i] = 1.0;
        }
        v
    }

    /// Squared distance between `target` and the encoding of `atom`, given
    /// `norm2 = |target|^2`.
    pub fn distance2(&self, target: &[f64], norm2: f64, atom: &ActionAtom) -> f64 {
        let mut d = norm2;
        for i in self.hot(atom) {
            d += 1.0 - 2.0 * target[i];
        }
        d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub role: Role,
    pub codec: ActionCodec,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    /// The critic network predicts `Q / value_scale`.
    pub value_scale: f64,
    pub gamma: f64,
    pub noise_std: f64,
    pub greedy_k: usize,
    pub greedy_tau: f64,
}

/// Atoms chosen by one decode, plus how many critic evaluations it cost.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decision {
    pub atoms: Vec<ActionAtom>,
    pub critic_evals: usize,
    pub cache_hits: usize,
}

/// Cache plus the key of the current state, for one decode.
pub struct CacheCtx<'a> {
    pub cache: &'a mut QCache,
    pub state_key: u64,
}

impl Policy {
    pub fn new(role: Role, env: &EnvConfig, cfg: &BrConfig, seed: u64) -> Self {
        let codec = ActionCodec::new(env);
        let obs = env.observation_len() - 1;
        let h = cfg.hidden.unwrap_or_else(|| hidden_width(role, obs + codec.width()));
        let mut rng = seed::rng(seed);
        let actor = Mlp::new(&[obs, h, h, codec.width()], Activation::Relu, Activation::Tanh, &mut rng);
        let critic = Mlp::new(&[obs + codec.width(), h, h, 1], Activation::Relu, Activation::Identity, &mut rng);
        Self {
            role,
            codec,
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            value_scale: cfg.reward_scale * env.reward_bound() / (1.0 - env.gamma),
            gamma: env.gamma,
            noise_std: cfg.noise_std,
            greedy_k: cfg.greedy_k.max(1),
            greedy_tau: cfg.greedy_tau,
        }
    }

    /// The policy networks ignore the trailing clock entry of the observation.
    pub fn input<'o>(&self, obs: &'o Observation) -> &'o [f64] {
        obs.device_features()
    }

    pub fn q_value(&self, input: &[f64], atom: &ActionAtom) -> Result<f64, NnError> {
        let mut x = input.to_vec();
        x.extend(self.codec.encode(atom));
        Ok(self.value_scale * self.critic.forward(&x)?[0])
    }

    /// Up to `greedy_k` legal atoms on `node`, nearest to `target` first.
    pub fn candidates(&self, state: &NetworkState, node: usize, target: &[f64]) -> Vec<ActionAtom> {
        let legal = state.legal_atoms_on(self.role, node);
        let norm2: f64 = target.iter().map(|v| v * v).sum();
        let mut ranked: Vec<(f64, usize)> = legal
            .iter()
            .enumerate()
            .map(|(i, a)| (self.codec.distance2(target, norm2, a), i))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.iter().take(self.greedy_k).map(|&(_, i)| legal[i]).collect()
    }

    /// Decodes one joint action restricted to `allowed`. One cache tick per call.
    pub fn act<R: Rng>(
        &self,
        state: &NetworkState,
        obs: &Observation,
        allowed: &[usize],
        mut cache: Option<CacheCtx<'_>>,
        explore: bool,
        rng: &mut R,
    ) -> Result<Decision, BrError> {
        let input = self.input(obs);
        let mut decision = Decision::default();
        if !allowed.is_empty() {
            let mut target = self.actor.forward(input)?;
            if explore && self.noise_std > 0.0 {
                for v in &mut target {
                    *v += self.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let partial = self.critic.partial_first_layer(input)?;
            for &node in allowed {
                let cands = self.candidates(state, node, &target);
                if cands.is_empty() {
                    continue;
                }
                let mut scores = Vec::with_capacity(cands.len());
                for atom in &cands {
                    let key = cache.as_ref().map(|c| CacheKey::new(c.state_key, atom));
                    let hit = match (&mut cache, &key) {
                        (Some(c), Some(k)) => c.cache.lookup(k),
                        _ => None,
                    };
                    let q = match hit {
                        Some(q) => {
                            decision.cache_hits += 1;
                            q
                        }
                        None => {
                            let q = self.value_scale * self.critic.forward_from_partial(&partial, &self.codec.encode(atom))?[0];
                            decision.critic_evals += 1;
                            if let (Some(c), Some(k)) = (&mut cache, key) {
                                c.cache.insert(k, q);
                            }
                            q
                        }
                    };
                    scores.push(q);
                }
                let pick = if explore {
                    softmax_pick(&scores, self.greedy_tau, rng)
                } else {
                    argmax(&scores)
                };
                decision.atoms.push(cands[pick]);
            }
        }
        if let Some(c) = cache {
            c.cache.tick();
        }
        if decision.atoms.is_empty() {
            decision.atoms.push(ActionAtom::noop(0));
        }
        Ok(decision)
    }

    /// Binary checkpoint: magic "MDPO", u32 version 1, u8 role, u64 device
    /// count, u64 exploits, u64 apps, f64 value scale, gamma, noise std,
    /// greedy tau, u64 greedy k, then actor, critic and both targets in the
    /// network format.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), BrError> {
        w.write_all(b"MDPO")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&[u8::from(self.role == Role::Defender)])?;
        for v in [self.codec.devices, self.codec.exploits, self.codec.apps] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in [self.value_scale, self.gamma, self.noise_std, self.greedy_tau] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.greedy_k as u64).to_le_bytes())?;
        for net in [&self.actor, &self.critic, &self.actor_target, &self.critic_target] {
            nn::write_mlp(net, w)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, BrError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MDPO" {
            return Err(BrError::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(BrError::Checkpoint("unsupported version".into()));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let mut word = || -> Result<[u8; 8], BrError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(b)
        };
        let mut ints = [0usize; 3];
        for v in &mut ints {
            *v = u64::from_le_bytes(word()?) as usize;
        }
        let mut reals = [0f64; 4];
        for v in &mut reals {
            *v = f64::from_le_bytes(word()?);
        }
        let greedy_k = u64::from_le_bytes(word()?) as usize;
        let actor = nn::read_mlp(r)?;
        let critic = nn::read_mlp(r)?;
        let actor_target = nn::read_mlp(r)?;
        let critic_target = nn::read_mlp(r)?;
        Ok(Self {
            role: if b1[0] == 1 { Role::Defender } else { Role::Attacker },
            codec: ActionCodec {
                devices: ints[0],
                exploits: ints[1],
                apps: ints[2],
            },
            actor,
            critic,
            actor_target,
            critic_target,
            value_scale: reals[0],
            gamma: reals[1],
            noise_std: reals[2],
            greedy_tau: reals[3],
            greedy_k,
        })
    }
}

/// First index of the largest score.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Samples from a softmax over scores shifted by their maximum and divided by
/// `tau` times their spread, so the temperature is independent of the value
/// scale.
pub fn softmax_pick<R: Rng>(scores: &[f64], tau: f64, rng: &mut R) -> usize {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = best - worst;
    if scores.len() == 1 || !(spread > 0.0) || !(tau > 0.0) {
        return argmax(scores);
    }
    let weights: Vec<f64> = scores.iter().map(|s| ((s - best) / (tau * spread)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    scores.len() - 1
}

/// A pure strategy in the restricted game.
#[derive(Clone, Debug)]
pub enum Strategy {
    /// Never acts.
    Noop,
    /// A trained policy together with the selector it was trained with.
    Learned { policy: Policy, meta: MetaController },
}

/// A probability distribution over pure strategies.
#[derive(Clone, Debug)]
pub struct Mixture {
    strategies: Vec<Arc<Strategy>>,
    probabilities: Vec<f64>,
}

impl Mixture {
    pub fn new(strategies: Vec<Arc<Strategy>>, probabilities: Vec<f64>) -> Result<Self, BrError> {
        if strategies.is_empty() || strategies.len() != probabilities.len() {
            return Err(BrError::Mixture("need one probability per strategy".into()));
        }
        if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(BrError::Mixture("probabilities must be non-negative".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(BrError::Mixture(format!("probabilities sum to {total}")));
        }
        Ok(Self { strategies, probabilities })
    }

    pub fn pure(strategy: Arc<Strategy>) -> Self {
        Self {
            strategies: vec![strategy],
            probabilities: vec![1.0],
        }
    }

    pub fn strategies(&self) -> &[Arc<Strategy>] {
        &self.strategies
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn sample_index<R: Rng>(&self, rng: &mut R) -> usize {
        let mut u = rng.random::<f64>();
        for (i, p) in self.probabilities.iter().enumerate() {
            if u < *p {
                return i;
            }
            u -= p;
        }
        // Rounding residue: fall back to the last strategy with positive mass.
        self.probabilities.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> &Arc<Strategy> {
        &self.strategies[self.sample_index(rng)]
    }
}

/// A strategy being played in one episode: its own selector state and cache.
pub struct Player<'s> {
    role: Role,
    strategy: &'s Strategy,
    meta: Option<MetaController>,
    cache: QCache,
}

impl<'s> Player<'s> {
    pub fn new(role: Role, strategy: &'s Strategy, cache: &CacheConfig, seed: u64) -> Self {
        let meta = match strategy {
            Strategy::Learned { meta, .. } => Some(meta.snapshot()),
            Strategy::Noop => None,
        };
        Self {
            role,
            strategy,
            meta,
            cache: QCache::new(cache.clone(), seed),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn cache(&self) -> &QCache {
        &self.cache
    }

    pub fn act<R: Rng>(&mut self, state: &NetworkState, explore: bool, rng: &mut R) -> Result<Decision, BrError> {
        let (Strategy::Learned { policy, .. }, Some(meta)) = (self.strategy, self.meta.as_mut()) else {
            return Ok(Decision::default());
        };
        let obs = state.observe(self.role);
        let allowed = meta.select(state, &obs)?;
        let ctx = if self.cache.is_enabled() {
            let state_key = self.cache.state_key(&meta.key_embedding(&obs)?)?;
            Some(CacheCtx {
                cache: &mut self.cache,
                state_key,
            })
        } else {
            None
        };
        policy.act(state, &obs, &allowed, ctx, explore, rng)
    }

    /// Propagates a step's change set to the selector and the cache.
    pub fn observe_changes(&mut self, state: &NetworkState, changed: &std::collections::BTreeSet<usize>) -> Result<(), BrError> {
        if let Some(meta) = self.meta.as_mut() {
            meta.mark_dirty(changed.iter().copied())?;
        }
        if !changed.is_empty() {
            let radius = self.cache.config().khop_radius;
            self.cache.invalidate_khop(changed.iter().copied(), &state.adjacency, radius);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
