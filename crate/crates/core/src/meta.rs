//! Top-k device selection.
//!
//! Every device gets a structural feature vector `x_i` (a fixed random id
//! embedding, normalized degree, visibility and ownership) which a node
//! projector maps to `z_i`. A state projector maps the observation to `h`.
//! Device `i` scores `z_i . h + b`, and a best response may only act on the
//! `k` best-scoring visible devices. The projectors are regressed so that the
//! mean score over the selected devices predicts the step reward.
//!
//! The state projector sees a fixed-width pooled summary of the per-device
//! observation blocks (mean, max, and a fixed random weighting), so its size
//! does not depend on the number of devices.

use crate::env::{EnvConfig, NetworkState, Observation, Role};
use crate::nn::{self, dot, soft_update, Activation, Mlp, NnError, OptimizerState};
use crate::replay::ReplayBuffer;
use crate::seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("device id {id} out of range for {count} devices")]
    OutOfRange { id: usize, count: usize },
    #[error("empty device selection")]
    EmptySelection,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<std::io::Error> for MetaError {
    fn from(e: std::io::Error) -> Self {
        MetaError::Nn(NnError::Io(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// When false every visible device is allowed and nothing is learned.
    pub enabled: bool,
    pub alpha: usize,
    pub embed_dim: usize,
    pub id_dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub train_every: usize,
    pub target_tau: f64,
    pub max_grad_norm: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 1,
            embed_dim: 32,
            id_dim: 16,
            hidden: 64,
            learning_rate: 1e-3,
            replay_capacity: 10_000,
            batch_size: 64,
            train_every: 16,
            target_tau: 0.01,
            max_grad_norm: 0.5,
        }
    }
}

/// `max(1, alpha * ceil(log10(max(10, m))))`, in integer arithmetic.
pub fn compute_k(m: usize, alpha: usize) -> usize {
    let m = m.max(10);
    // ceil(log10 m) equals the digit count of m - 1 for m >= 2.
    let mut digits = 0;
    let mut v = m - 1;
    while v > 0 {
        digits += 1;
        v /= 10;
    }
    (alpha * digits).max(1)
}

/// Indices of the `k` largest scores, best first, ties to the lower id.
pub fn top_k(scored: &mut [(usize, f64)], k: usize) -> Vec<usize> {
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
    }
    let head = &mut scored[..k];
    head.sort_by(order);
    head.iter().map(|(i, _)| *i).collect()
}

/// One replayed regression example: the pooled observation, the structural
/// features of the selected devices, and the step reward that followed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTransition {
    pub pooled: Vec<f64>,
    pub selected: Vec<usize>,
    pub node_inputs: Vec<Vec<f64>>,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct MetaController {
    role: Role,
    config: MetaConfig,
    device_count: usize,
    block: usize,
    id_seed: u64,
    id_embeddings: Vec<f64>,
    pool_weights: Vec<f64>,
    node_projector: Mlp,
    state_projector: Mlp,
    target_state_projector: Mlp,
    bias: f64,
    e_cache: Vec<f64>,
    dirty: BTreeSet<usize>,
    degree_scale: Option<usize>,
    optimizer: OptimizerState,
    replay: ReplayBuffer<MetaTransition>,
    rng: ChaCha8Rng,
}

fn id_tables(id_seed: u64, m: usize, d_id: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seed::rng(id_seed);
    let ids = (0..m * d_id).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut rng = seed::rng(seed::derive(id_seed, &[1]));
    let pool = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    (ids, pool)
}

impl MetaController {
    pub fn new(role: Role, env: &EnvConfig, config: &MetaConfig, seed: u64) -> Self {
        let id_seed = seed::derive(seed, &[0x1d]);
        let mut rng = seed::rng(seed::derive(seed, &[0x9a]));
        let d = config.embed_dim;
        let node_projector = Mlp::new(
            &[config.id_dim + 3, config.hidden, d],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        let state_projector = Mlp::new(
            &[3 * env.feature_width(), config.hidden, d],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        Self::assemble(
            role,
            env,
            config,
            id_seed,
            node_projector,
            state_projector.clone(),
            state_projector,
            0.0,
            seed,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        role: Role,
        env: &EnvConfig,
        config: &MetaConfig,
        id_seed: u64,
        node_projector: Mlp,
        state_projector: Mlp,
        target_state_projector: Mlp,
        bias: f64,
        seed: u64,
    ) -> Self {
        let m = env.device_count;
        let (id_embeddings, pool_weights) = id_tables(id_seed, m, config.id_dim);
        let params = node_projector.param_count() + state_projector.param_count() + 1;
        Self {
            role,
            config: config.clone(),
            device_count: m,
            block: env.feature_width(),
            id_seed,
            id_embeddings,
            pool_weights,
            node_projector,
            state_projector,
            target_state_projector,
            bias,
            e_cache: vec![0.0; m * config.embed_dim],
            dirty: (0..m).collect(),
            degree_scale: None,
            optimizer: OptimizerState::new(config.learning_rate, params),
            replay: ReplayBuffer::new(config.replay_capacity.max(1)),
            rng: seed::rng(seed::derive(seed, &[0x7e])),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &MetaConfig {
        &self.config
    }

    pub fn is_enabled(&self) -> bool {
        self.config.enabled
    }

    pub fn k(&self) -> usize {
        compute_k(self.device_count, self.config.alpha)
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn node_projector(&self) -> &Mlp {
        &self.node_projector
    }

    pub fn state_projector(&self) -> &Mlp {
        &self.state_projector
    }

    pub fn dirty(&self) -> &BTreeSet<usize> {
        &self.dirty
    }

    pub fn replay(&self) -> &ReplayBuffer<MetaTransition> {
        &self.replay
    }

    pub fn id_embedding(&self, i: usize) -> &[f64] {
        let d = self.config.id_dim;
        &self.id_embeddings[i * d..(i + 1) * d]
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        let d = self.config.embed_dim;
        &self.e_cache[i * d..(i + 1) * d]
    }

    /// Trainable parameters: both projectors and the bias.
    pub fn param_count(&self) -> usize {
        self.node_projector.param_count() + self.state_projector.param_count() + 1
    }

    /// Copy suitable for acting only: same parameters, empty replay.
    pub fn snapshot(&self) -> Self {
        let mut s = self.clone();
        s.replay = ReplayBuffer::new(1);
        s
    }

    /// `x_i = [e_i; deg(i)/maxdeg; visible(i); owned(i)]`.
    pub fn node_features(&self, state: &NetworkState, i: usize) -> Result<Vec<f64>, MetaError> {
        self.check_id(i)?;
        let max_deg = state.max_degree().max(1) as f64;
        let d = &state.devices[i];
        let mut x = Vec::with_capacity(self.config.id_dim + 3);
        x.extend_from_slice(self.id_embedding(i));
        x.push(state.degree(i) as f64 / max_deg);
        x.push(f64::from(u8::from(d.visible_to(self.role))));
        x.push(f64::from(u8::from(d.attacker_owned)));
        Ok(x)
    }

    fn check_id(&self, id: usize) -> Result<(), MetaError> {
        if id >= self.device_count {
            Err(MetaError::OutOfRange {
                id,
                count: self.device_count,
            })
        } else {
            Ok(())
        }
    }

    pub fn mark_dirty(&mut self, nodes: impl IntoIterator<Item = usize>) -> Result<(), MetaError> {
        let nodes: Vec<usize> = nodes.into_iter().collect();
        for &n in &nodes {
            self.check_id(n)?;
        }
        self.dirty.extend(nodes);
        Ok(())
    }

    pub fn mark_all_dirty(&mut self) {
        self.dirty = (0..self.device_count).collect();
    }

    /// Re-embeds dirty rows. A change in the maximum degree alters every
    /// row's degree feature, so it dirties all rows first.
    pub fn refresh_embeddings(&mut self, state: &NetworkState) -> Result<(), MetaError> {
        let max_deg = state.max_degree();
        if self.degree_scale != Some(max_deg) {
            self.degree_scale = Some(max_deg);
            self.mark_all_dirty();
        }
        let d = self.config.embed_dim;
        for i in std::mem::take(&mut self.dirty) {
            let z = self.node_projector.forward(&self.node_features(state, i)?)?;
            self.e_cache[i * d..(i + 1) * d].copy_from_slice(&z);
        }
        Ok(())
    }

    /// Fixed-width summary of the device blocks: mean, max, and a fixed
    /// random per-device weighting, each over all devices.
    pub fn pooled(&self, obs: &Observation) -> Vec<f64> {
        let f = self.block;
        let m = obs.device_count();
        let mut out = vec![0.0; 3 * f];
        out[f..2 * f].fill(f64::NEG_INFINITY);
        for i in 0..m {
            let b = obs.device_block(i);
            let w = self.pool_weights[i];
            for j in 0..f {
                out[j] += b[j];
                out[f + j] = out[f + j].max(b[j]);
                out[2 * f + j] += w * b[j];
            }
        }
        let inv = 1.0 / m.max(1) as f64;
        for j in 0..f {
            out[j] *= inv;
            out[2 * f + j] *= inv;
            if m == 0 {
                out[f + j] = 0.0;
            }
        }
        out
    }

    /// Online state embedding `h(o)`.
    pub fn embed_state(&self, obs: &Observation) -> Result<Vec<f64>, MetaError> {
        Ok(self.state_projector.forward(&self.pooled(obs))?)
    }

    /// Target-network state embedding, used for cache keys.
    pub fn key_embedding(&self, obs: &Observation) -> Result<Vec<f64>, MetaError> {
        Ok(self.target_state_projector.forward(&self.pooled(obs))?)
    }

    /// `z_i . h + b`; row `i` must be fresh.
    pub fn score(&self, h: &[f64], i: usize) -> f64 {
        dot(self.embedding(i), h) + self.bias
    }

    /// Top-k visible devices by score. With the controller disabled, every
    /// visible device in id order.
    pub fn select(&mut self, state: &NetworkState, obs: &Observation) -> Result<Vec<usize>, MetaError> {
        let visible = state.visible_devices(self.role);
        if !self.config.enabled {
            return Ok(visible);
        }
        self.refresh_embeddings(state)?;
        let h = self.embed_state(obs)?;
        let mut scored: Vec<(usize, f64)> = visible.into_iter().map(|i| (i, self.score(&h, i))).collect();
        Ok(top_k(&mut scored, self.k()))
    }

    /// Mean score over the selection.
    pub fn predict_reward(&self, h: &[f64], selected: &[usize]) -> Result<f64, MetaError> {
        if selected.is_empty() {
            return Err(MetaError::EmptySelection);
        }
        let mut sum = 0.0;
        for &i in selected {
            self.check_id(i)?;
            sum += self.score(h, i);
        }
        Ok(sum / selected.len() as f64)
    }

    /// Regression example for the current state and selection; the reward
    /// is filled in once the step has been taken.
    pub fn capture(&self, state: &NetworkState, obs: &Observation, selected: &[usize]) -> Result<MetaTransition, MetaError> {
        Ok(MetaTransition {
            pooled: self.pooled(obs),
            selected: selected.to_vec(),
            node_inputs: selected.iter().map(|&i| self.node_features(state, i)).collect::<Result<_, _>>()?,
            reward: 0.0,
        })
    }

    pub fn remember(&mut self, t: MetaTransition) {
        if !t.selected.is_empty() {
            self.replay.push(t);
        }
    }

    /// Node projector, state projector, then the bias, as one flat vector.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(self.node_projector.params());
        p.extend_from_slice(self.state_projector.params());
        p.push(self.bias);
        p
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        let n = self.node_projector.param_count();
        let s = self.state_projector.param_count();
        assert_eq!(p.len(), n + s + 1);
        self.node_projector.params_mut().copy_from_slice(&p[..n]);
        self.state_projector.params_mut().copy_from_slice(&p[n..n + s]);
        self.bias = p[n + s];
        self.mark_all_dirty();
    }

    /// Mean squared error of the predicted reward, recomputing every
    /// embedding from the stored inputs.
    pub fn loss(&self, batch: &[&MetaTransition]) -> Result<f64, MetaError> {
        let mut total = 0.0;
        for t in batch {
            let h = self.state_projector.forward(&t.pooled)?;
            let mut sum = 0.0;
            for x in &t.node_inputs {
                sum += dot(&self.node_projector.forward(x)?, &h) + self.bias;
            }
            let err = sum / t.node_inputs.len() as f64 - t.reward;
            total += err * err;
        }
        Ok(total / batch.len() as f64)
    }

    /// Loss and its gradient in [`MetaController::params_flat`] order.
    pub fn loss_and_grad(&self, batch: &[&MetaTransition]) -> Result<(f64, Vec<f64>), MetaError> {
        if batch.is_empty() || batch.iter().any(|t| t.node_inputs.is_empty()) {
            return Err(MetaError::EmptySelection);
        }
        let n = self.node_projector.param_count();
        let s = self.state_projector.param_count();
        let mut grads = vec![0.0; n + s + 1];
        let (gn, rest) = grads.split_at_mut(n);
        let (gs, gb) = rest.split_at_mut(s);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for t in batch {
            let h_trace = self.state_projector.forward_trace(&t.pooled)?;
            let h = h_trace.output();
            let traces = t
                .node_inputs
                .iter()
                .map(|x| self.node_projector.forward_trace(x))
                .collect::<Result<Vec<_>, _>>()?;
            let inv_k = 1.0 / traces.len() as f64;
            let mut z_sum = vec![0.0; h.len()];
            for tr in &traces {
                for (a, z) in z_sum.iter_mut().zip(tr.output()) {
                    *a += z;
                }
            }
            let r_hat = dot(&z_sum, h) * inv_k + self.bias;
            let err = r_hat - t.reward;
            loss += err * err * scale;
            let g = 2.0 * err * scale;
            gb[0] += g;
            let up_h: Vec<f64> = z_sum.iter().map(|z| g * inv_k * z).collect();
            self.state_projector.backward_into(&h_trace, &up_h, gs)?;
            let up_z: Vec<f64> = h.iter().map(|v| g * inv_k * v).collect();
            for tr in &traces {
                self.node_projector.backward_into(tr, &up_z, gn)?;
            }
        }
        Ok((loss, grads))
    }

    /// One clipped optimizer step on the batch, then a soft update of the key
    /// projector. Returns the loss before the step.
    pub fn train_meta(&mut self, batch: &[&MetaTransition]) -> Result<f64, MetaError> {
        let (loss, grads) = self.loss_and_grad(batch)?;
        let mut p = self.params_flat();
        self.optimizer.step(&mut p, &grads, self.config.max_grad_norm)?;
        self.set_params_flat(&p);
        soft_update(&mut self.target_state_projector, &self.state_projector, self.config.target_tau)?;
        Ok(loss)
    }

    /// Trains on a minibatch drawn from the replay, if it holds a full batch.
    pub fn train_from_replay(&mut self) -> Result<Option<f64>, MetaError> {
        if !self.config.enabled || self.replay.len() < self.config.batch_size {
            return Ok(None);
        }
        let replay = std::mem::replace(&mut self.replay, ReplayBuffer::new(1));
        let batch = replay.sample(self.config.batch_size, &mut self.rng);
        let out = self.train_meta(&batch);
        drop(batch);
        self.replay = replay;
        out.map(Some)
    }

    /// Binary checkpoint. The id embeddings are rebuilt from their seed on load.
    ///
    /// ```text
    /// magic "MDMC", u32 version 1, u8 role (0 attacker, 1 defender),
    /// u64 device count, u64 feature width, u64 alpha, u64 id seed, f64 bias,
    /// then node, state and target-state projectors in the network format
    /// ```
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), MetaError> {
        w.write_all(b"MDMC")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&[u8::from(self.role == Role::Defender)])?;
        for v in [self.device_count as u64, self.block as u64, self.config.alpha as u64, self.id_seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.bias.to_le_bytes())?;
        nn::write_mlp(&self.node_projector, w)?;
        nn::write_mlp(&self.state_projector, w)?;
        nn::write_mlp(&self.target_state_projector, w)?;
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R, env: &EnvConfig, config: &MetaConfig) -> Result<Self, MetaError> {
        let bad = |m: &str| MetaError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MDMC" {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(bad("unsupported version"));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let role = if b1[0] == 1 { Role::Defender } else { Role::Attacker };
        let mut u = [0u64; 4];
        for v in &mut u {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            *v = u64::from_le_bytes(b8);
        }
        let [m, block, alpha, id_seed] = u;
        if m as usize != env.device_count || block as usize != env.feature_width() {
            return Err(bad("checkpoint was written for a different environment shape"));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let bias = f64::from_le_bytes(b8);
        let node = nn::read_mlp(r)?;
        let state = nn::read_mlp(r)?;
        let target = nn::read_mlp(r)?;
        let config = MetaConfig {
            alpha: alpha as usize,
            id_dim: node.input_size() - 3,
            embed_dim: node.output_size(),
            hidden: node.sizes()[1],
            ..config.clone()
        };
        Ok(Self::assemble(role, env, &config, id_seed, node, state, target, bias, id_seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ActionAtom;
    use crate::nn::tests::rel_err;
    use proptest::prelude::*;
    use rand::Rng;

    fn setup(m: usize, seed: u64) -> (NetworkState, MetaController) {
        let env = EnvConfig {
            seed,
            ..EnvConfig::with_devices(m)
        };
        let state = NetworkState::reset(&env).unwrap();
        let mc = MetaController::new(Role::Defender, &env, &MetaConfig::default(), seed);
        (state, mc)
    }

    fn random_batch(mc: &MetaController, n: usize, seed: u64) -> Vec<MetaTransition> {
        let mut rng = seed::rng(seed);
        let mut state = NetworkState::reset(&EnvConfig {
            seed,
            ..EnvConfig::with_devices(mc.device_count)
        })
        .unwrap();
        let mut out = Vec::new();
        while out.len() < n {
            if state.is_done() {
                state = NetworkState::reset(&state.config.clone()).unwrap();
            }
            let obs = state.observe(mc.role);
            let k = rng.random_range(1..=3.min(mc.device_count));
            let sel: Vec<usize> = rand::seq::index::sample(&mut rng, mc.device_count, k).into_vec();
            let mut t = mc.capture(&state, &obs, &sel).unwrap();
            t.reward = state.step(&[], &[]).unwrap().reward;
            out.push(t);
        }
        out
    }

    #[test]
    fn k_examples() {
        assert_eq!(compute_k(10, 1), 1);
        assert_eq!(compute_k(100, 1), 2);
        assert_eq!(compute_k(1000, 1), 3);
        assert_eq!(compute_k(10_000, 1), 4);
        assert_eq!(compute_k(10_000, 5), 20);
        assert_eq!(compute_k(1, 1), 1);
        assert_eq!(compute_k(11, 1), 2);
        assert_eq!(compute_k(1001, 1), 4);
    }

    #[test]
    fn k_matches_float_formula() {
        for m in 1..20_000usize {
            let f = (m.max(10) as f64).log10().ceil() as usize;
            assert_eq!(compute_k(m, 3), (3 * f).max(1), "m = {m}");
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&mut [(0, 5.0), (1, 3.0), (2, 9.0)], 2), vec![2, 0]);
        assert_eq!(top_k(&mut [(0, 1.0), (1, 1.0), (2, 1.0)], 2), vec![0, 1]);
        assert_eq!(top_k(&mut [(4, 1.0), (7, 2.0)], 5), vec![7, 4]);
        assert!(top_k(&mut [], 3).is_empty());
    }

    #[test]
    fn degree_feature_normalization() {
        let (mut state, mc) = setup(12, 2);
        let hub = (0..12).max_by_key(|&i| (state.degree(i), std::cmp::Reverse(i))).unwrap();
        assert_eq!(mc.node_features(&state, hub).unwrap()[16], 1.0);
        let victim = 5;
        for j in state.adjacency[victim].clone() {
            state.adjacency[j].retain(|&x| x != victim);
        }
        state.adjacency[victim].clear();
        assert_eq!(mc.node_features(&state, victim).unwrap()[16], 0.0);
        assert!(mc.node_features(&state, 12).is_err());
    }

    #[test]
    fn features_depend_only_on_structure() {
        let (state, mc) = setup(10, 3);
        let mut other = state.clone();
        other.devices[4].workload_value += 0.3;
        other.devices[4].vulnerabilities = Default::default();
        assert_eq!(mc.node_features(&state, 4).unwrap(), mc.node_features(&other, 4).unwrap());
    }

    #[test]
    fn refresh_only_touches_dirty_rows() {
        let (mut state, mut mc) = setup(10, 4);
        mc.refresh_embeddings(&state).unwrap();
        let before = mc.e_cache.clone();
        mc.refresh_embeddings(&state).unwrap();
        assert_eq!(mc.e_cache, before);

        let flip = (0..10).find(|&i| !state.devices[i].attacker_owned).unwrap();
        state.devices[flip].compromised = true;
        state.devices[flip].attacker_owned = true;
        mc.mark_dirty([flip]).unwrap();
        mc.refresh_embeddings(&state).unwrap();
        for i in 0..10 {
            let same = mc.embedding(i) == &before[i * 32..(i + 1) * 32];
            assert_eq!(same, i != flip, "row {i}");
        }
        let full = mc.node_projector.forward(&mc.node_features(&state, flip).unwrap()).unwrap();
        assert_eq!(mc.embedding(flip), &full[..]);
    }

    #[test]
    fn score_matches_naive_dot() {
        let (state, mut mc) = setup(8, 5);
        mc.bias = 0.37;
        mc.refresh_embeddings(&state).unwrap();
        let h = mc.embed_state(&state.observe(Role::Defender)).unwrap();
        for i in 0..8 {
            let mut naive = mc.bias;
            for j in 0..32 {
                naive += mc.e_cache[i * 32 + j] * h[j];
            }
            assert!((mc.score(&h, i) - naive).abs() <= 1e-12);
        }
        assert_eq!(mc.score(&[0.0; 32], 3), 0.37);
        mc.node_projector = Mlp::zeros(mc.node_projector.sizes(), Activation::Relu, Activation::Identity);
        mc.mark_all_dirty();
        mc.refresh_embeddings(&state).unwrap();
        assert_eq!(mc.score(&h, 2), 0.37);
    }

    #[test]
    fn predict_reward_is_mean_score() {
        let (state, mut mc) = setup(6, 6);
        mc.refresh_embeddings(&state).unwrap();
        let h = mc.embed_state(&state.observe(Role::Defender)).unwrap();
        assert_eq!(mc.predict_reward(&h, &[4]).unwrap(), mc.score(&h, 4));
        let sel = [1, 3, 5];
        let oracle: f64 = sel.iter().map(|&i| mc.score(&h, i) / 3.0).sum();
        assert!((mc.predict_reward(&h, &sel).unwrap() - oracle).abs() <= 1e-12);
        assert!(matches!(mc.predict_reward(&h, &[]), Err(MetaError::EmptySelection)));
        mc.bias = 0.0;
        mc.e_cache[..64].fill(0.0);
        mc.e_cache[0] = 2.0;
        mc.e_cache[32] = 4.0;
        let mut h1 = vec![0.0; 32];
        h1[0] = 1.0;
        assert_eq!(mc.predict_reward(&h1, &[0, 1]).unwrap(), 3.0);
    }

    #[test]
    fn selection_respects_visibility_and_k() {
        for seed in 0..20 {
            let env = EnvConfig {
                seed,
                ..EnvConfig::with_devices(150)
            };
            let state = NetworkState::reset(&env).unwrap();
            let mut mc = MetaController::new(Role::Attacker, &env, &MetaConfig::default(), seed);
            let obs = state.observe(Role::Attacker);
            let sel = mc.select(&state, &obs).unwrap();
            let visible = state.visible_devices(Role::Attacker);
            assert!(sel.iter().all(|i| visible.contains(i)));
            assert_eq!(sel.len(), compute_k(150, 1).min(visible.len()));
            assert_eq!(mc.clone().select(&state, &obs).unwrap(), sel);
        }
    }

    #[test]
    fn disabled_controller_allows_all_visible() {
        let env = EnvConfig::with_devices(10);
        let state = NetworkState::reset(&env).unwrap();
        let cfg = MetaConfig {
            enabled: false,
            ..MetaConfig::default()
        };
        let mut mc = MetaController::new(Role::Defender, &env, &cfg, 0);
        assert_eq!(
            mc.select(&state, &state.observe(Role::Defender)).unwrap(),
            (0..10).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mark_dirty_rules() {
        let (state, mut mc) = setup(10, 7);
        mc.refresh_embeddings(&state).unwrap();
        mc.mark_dirty([1]).unwrap();
        mc.mark_dirty([1]).unwrap();
        assert_eq!(mc.dirty().iter().copied().collect::<Vec<_>>(), vec![1]);
        mc.mark_dirty([]).unwrap();
        assert_eq!(mc.dirty().len(), 1);
        assert!(matches!(mc.mark_dirty([3, 10]), Err(MetaError::OutOfRange { id: 10, .. })));
        assert_eq!(mc.dirty().len(), 1);
    }

    #[test]
    fn change_set_reaches_dirty_set() {
        let (mut state, mut mc) = setup(10, 8);
        mc.refresh_embeddings(&state).unwrap();
        let targets: Vec<usize> = (0..10).filter(|&i| state.devices[i].compromised).take(2).collect();
        let def: Vec<ActionAtom> = targets
            .iter()
            .map(|&i| ActionAtom::simple(i, crate::env::ActionKind::Restore))
            .collect();
        let out = state.step(&[], &def).unwrap();
        mc.mark_dirty(out.changed.iter().copied()).unwrap();
        assert!(targets.iter().all(|t| mc.dirty().contains(t)));
    }

    #[test]
    fn lazy_embeddings_match_full_recompute() {
        let (mut state, mut mc) = setup(20, 9);
        let mut rng = seed::rng(9);
        mc.refresh_embeddings(&state).unwrap();
        while !state.is_done() {
            let pick = |s: &NetworkState, role, rng: &mut ChaCha8Rng| -> Vec<ActionAtom> {
                let mut seen = BTreeSet::new();
                s.legal_actions(role)
                    .into_iter()
                    .filter(|_| rng.random_bool(0.3))
                    .filter(|a| seen.insert(a.node))
                    .collect()
            };
            let att = pick(&state, Role::Attacker, &mut rng);
            let def = pick(&state, Role::Defender, &mut rng);
            let out = state.step(&att, &def).unwrap();
            mc.mark_dirty(out.changed).unwrap();
            mc.refresh_embeddings(&state).unwrap();
            for i in 0..20 {
                let full = mc.node_projector.forward(&mc.node_features(&state, i).unwrap()).unwrap();
                for (a, b) in mc.embedding(i).iter().zip(&full) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn param_count_is_independent_of_device_count() {
        let counts: Vec<usize> = [5, 10, 100, 1000].iter().map(|&m| setup(m, 0).1.param_count()).collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }

    #[test]
    fn exact_prediction_gives_zero_gradient() {
        let (_, mut mc) = setup(5, 10);
        let mut batch = random_batch(&mc, 8, 10);
        for t in &mut batch {
            let h = mc.state_projector.forward(&t.pooled).unwrap();
            let s: f64 = t
                .node_inputs
                .iter()
                .map(|x| dot(&mc.node_projector.forward(x).unwrap(), &h) + mc.bias)
                .sum();
            t.reward = s / t.node_inputs.len() as f64;
        }
        let refs: Vec<&MetaTransition> = batch.iter().collect();
        let (loss, g) = mc.loss_and_grad(&refs).unwrap();
        assert!(loss < 1e-24);
        assert!(g.iter().all(|v| v.abs() < 1e-10));
        let before = mc.params_flat();
        mc.train_meta(&refs).unwrap();
        let after = mc.params_flat();
        assert!(before.iter().zip(&after).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for trial in 0..4u64 {
            let (_, mut mc) = setup(5, 20 + trial);
            mc.bias = 0.5;
            let batch = random_batch(&mc, 6, trial);
            let refs: Vec<&MetaTransition> = batch.iter().collect();
            let (_, g) = mc.loss_and_grad(&refs).unwrap();
            let base = mc.params_flat();
            let h = 1e-5;
            let mut rng = seed::rng(trial);
            let mut worst: f64 = 0.0;
            for _ in 0..150 {
                let k = rng.random_range(0..base.len());
                let mut p = base.clone();
                p[k] += h;
                mc.set_params_flat(&p);
                let plus = mc.loss(&refs).unwrap();
                p[k] -= 2.0 * h;
                mc.set_params_flat(&p);
                let minus = mc.loss(&refs).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                if fd.abs() > 1e-6 || g[k].abs() > 1e-6 {
                    worst = worst.max(rel_err(g[k], fd));
                }
            }
            mc.set_params_flat(&base);
            assert!(worst <= 1e-4, "trial {trial}: {worst}");
        }
    }

    #[test]
    fn training_reduces_loss_on_fixed_batch() {
        let (_, mut mc) = setup(10, 11);
        let batch = random_batch(&mc, 64, 11);
        let refs: Vec<&MetaTransition> = batch.iter().collect();
        let initial = mc.loss(&refs).unwrap();
        for _ in 0..2000 {
            mc.train_meta(&refs).unwrap();
        }
        let last = mc.loss(&refs).unwrap();
        assert!(last < 0.1 * initial, "{initial} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let env = EnvConfig::with_devices(12);
        let state = NetworkState::reset(&env).unwrap();
        let mut mc = MetaController::new(Role::Attacker, &env, &MetaConfig::default(), 42);
        mc.bias = -1.25;
        let mut buf = Vec::new();
        mc.save(&mut buf).unwrap();
        let mut back = MetaController::load(&mut buf.as_slice(), &env, &MetaConfig::default()).unwrap();
        assert_eq!(back.role(), Role::Attacker);
        assert_eq!(back.id_embeddings, mc.id_embeddings);
        assert_eq!(back.params_flat(), mc.params_flat());
        let obs = state.observe(Role::Attacker);
        assert_eq!(back.select(&state, &obs).unwrap(), mc.select(&state, &obs).unwrap());
        assert!(MetaController::load(&mut buf.as_slice(), &EnvConfig::with_devices(13), &MetaConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn selection_is_deterministic(seed in 0u64..500, m in 1usize..40) {
            let (state, mut mc) = setup(m, seed);
            let obs = state.observe(Role::Defender);
            let a = mc.select(&state, &obs).unwrap();
            let b = mc.select(&state, &obs).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.len() <= compute_k(m, 1));
        }
    }
}
