use super::{BrConfig, BrError, CacheCtx, Mixture, Player, Policy};
use crate::env::{ActionAtom, EnvConfig, NetworkState, Role};
use crate::meta::MetaController;
use crate::nn::{soft_update, OptimizerState};
use crate::qcache::{CacheConfig, CacheStats, QCache};
use crate::replay::ReplayBuffer;
use crate::seed;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::sync::Arc;

/// One executed atom. Observations exclude the clock and are shared between
/// the atoms of a step.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Arc<[f64]>,
    pub atom: ActionAtom,
    pub reward: f64,
    pub next_obs: Arc<[f64]>,
    pub done: bool,
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(a.len() + b.len());
    x.extend_from_slice(a);
    x.extend_from_slice(b);
    x
}

/// TD target `r + gamma * Q'(s', mu'(s'))`, dropping the bootstrap on `done`.
pub fn td_target(policy: &Policy, t: &Transition) -> Result<f64, BrError> {
    if t.done {
        return Ok(t.reward);
    }
    let next_action = policy.actor_target.forward(&t.next_obs)?;
    let q_next = policy.value_scale * policy.critic_target.forward(&concat(&t.next_obs, &next_action))?[0];
    Ok(t.reward + policy.gamma * q_next)
}

/// Mean squared TD error and its gradient with respect to the critic.
pub fn critic_loss(policy: &Policy, batch: &[&Transition]) -> Result<(f64, Vec<f64>), BrError> {
    if batch.is_empty() {
        return Err(BrError::EmptyBatch);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grads = vec![0.0; policy.critic.param_count()];
    let mut loss = 0.0;
    for t in batch {
        let y = td_target(policy, t)?;
        let trace = policy.critic.forward_trace(&concat(&t.obs, &policy.codec.encode(&t.atom)))?;
        let err = policy.value_scale * trace.output()[0] - y;
        loss += err * err * inv;
        policy
            .critic
            .backward_into(&trace, &[2.0 * err * policy.value_scale * inv], &mut grads)?;
    }
    Ok((loss, grads))
}

/// Mean `Q(s, mu(s))` over the batch and its gradient with respect to the actor.
pub fn actor_gradient(policy: &Policy, batch: &[&Transition]) -> Result<(f64, Vec<f64>), BrError> {
    if batch.is_empty() {
        return Err(BrError::EmptyBatch);
    }
    let inv = 1.0 / batch.len() as f64;
    let obs_len = policy.actor.input_size();
    let mut grads = vec![0.0; policy.actor.param_count()];
    let mut objective = 0.0;
    for t in batch {
        let trace = policy.actor.forward_trace(&t.obs)?;
        let x = concat(&t.obs, trace.output());
        let ctrace = policy.critic.forward_trace(&x)?;
        objective += policy.value_scale * ctrace.output()[0] * inv;
        let mut scratch = vec![0.0; policy.critic.param_count()];
        let dx = policy.critic.backward_into(&ctrace, &[policy.value_scale * inv], &mut scratch)?;
        policy.actor.backward_into(&trace, &dx[obs_len..], &mut grads)?;
    }
    Ok((objective, grads))
}

/// One ascent step on the actor objective. The critic is not modified.
pub fn actor_step(policy: &mut Policy, opt: &mut OptimizerState, batch: &[&Transition], max_grad_norm: f64) -> Result<f64, BrError> {
    let (objective, grads) = actor_gradient(policy, batch)?;
    let descent: Vec<f64> = grads.iter().map(|g| -g).collect();
    opt.step(policy.actor.params_mut(), &descent, max_grad_norm)?;
    Ok(objective)
}

/// Optimizers and replay for one best-response run.
pub struct Trainer {
    pub policy: Policy,
    pub actor_opt: OptimizerState,
    pub critic_opt: OptimizerState,
    pub replay: ReplayBuffer<Transition>,
    config: BrConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(policy: Policy, config: &BrConfig, seed: u64) -> Self {
        Self {
            actor_opt: OptimizerState::new(config.actor_lr, policy.actor.param_count()),
            critic_opt: OptimizerState::new(config.critic_lr, policy.critic.param_count()),
            policy,
            replay: ReplayBuffer::new(config.replay_capacity.max(1)),
            config: config.clone(),
            rng: seed::rng(seed),
        }
    }

    /// Critic step, actor step and soft target updates on one minibatch.
    /// Returns the critic loss before the step.
    pub fn update(&mut self) -> Result<f64, BrError> {
        let batch = self.replay.sample(self.config.batch_size, &mut self.rng);
        let (loss, grads) = critic_loss(&self.policy, &batch)?;
        self.critic_opt
            .step(self.policy.critic.params_mut(), &grads, self.config.max_grad_norm)?;
        actor_step(&mut self.policy, &mut self.actor_opt, &batch, self.config.max_grad_norm)?;
        soft_update(&mut self.policy.critic_target, &self.policy.critic, self.config.tau)?;
        soft_update(&mut self.policy.actor_target, &self.policy.actor, self.config.tau)?;
        Ok(loss)
    }
}

/// Per-episode training record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeMetric {
    pub episode: usize,
    pub step: usize,
    pub critic_loss: f64,
    pub episode_return: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BrStats {
    pub steps: usize,
    pub episodes: usize,
    pub updates: usize,
    pub meta_updates: usize,
    pub critic_evals: u64,
    pub cache: CacheStats,
    pub last_return: f64,
}

/// Everything a best-response run needs besides the opponent.
pub struct BrSetup<'a> {
    pub env: &'a EnvConfig,
    pub role: Role,
    pub br: &'a BrConfig,
    /// Cache settings for the opponent's per-episode caches.
    pub opponent_cache: &'a CacheConfig,
    pub seed: u64,
}

/// Trains a policy for `setup.role` against `opponent`, which is resampled at
/// the start of every episode. The learner's selector is trained alongside
/// and its cache is shared across the whole run.
pub fn train_best_response(
    setup: &BrSetup<'_>,
    opponent: &Mixture,
    meta: &mut MetaController,
    cache: &mut QCache,
    mut on_episode: impl FnMut(&EpisodeMetric),
) -> Result<(Policy, BrStats), BrError> {
    let (env, role, cfg) = (setup.env, setup.role, setup.br);
    let policy = Policy::new(role, env, cfg, seed::derive(setup.seed, &[1]));
    let mut stats = BrStats::default();
    if cfg.budget == 0 {
        return Ok((policy, stats));
    }
    let mut trainer = Trainer::new(policy, cfg, seed::derive(setup.seed, &[2]));
    let mut rng = seed::rng(seed::derive(setup.seed, &[3]));
    let cache_before = cache.stats();
    let mut losses = Vec::new();

    while stats.steps < cfg.budget {
        let episode = stats.episodes;
        let mut state = NetworkState::reset_episode(env, seed::derive(setup.seed, &[4, episode as u64]))?;
        let strategy = opponent.sample(&mut rng).clone();
        let mut opp = Player::new(
            role.opponent(),
            &strategy,
            setup.opponent_cache,
            seed::derive(setup.seed, &[5, episode as u64]),
        );
        meta.mark_all_dirty();
        let mut ret = 0.0;
        let mut discount = 1.0;
        losses.clear();

        while !state.is_done() && stats.steps < cfg.budget {
            let obs = state.observe(role);
            let allowed = meta.select(&state, &obs)?;
            let ctx = if cache.is_enabled() {
                let state_key = cache.state_key(&meta.key_embedding(&obs)?)?;
                Some(CacheCtx {
                    cache: &mut *cache,
                    state_key,
                })
            } else {
                None
            };
            let mine = trainer.policy.act(&state, &obs, &allowed, ctx, true, &mut rng)?;
            stats.critic_evals += mine.critic_evals as u64;
            let theirs = opp.act(&state, false, &mut rng)?;
            let mut meta_t = if meta.is_enabled() && !allowed.is_empty() {
                Some(meta.capture(&state, &obs, &allowed)?)
            } else {
                None
            };

            let outcome = match role {
                Role::Attacker => state.step(&mine.atoms, &theirs.atoms)?,
                Role::Defender => state.step(&theirs.atoms, &mine.atoms)?,
            };
            let reward = role.utility_sign() * outcome.reward * cfg.reward_scale;
            ret += discount * role.utility_sign() * outcome.reward;
            discount *= env.gamma;

            let before: Arc<[f64]> = trainer.policy.input(&obs).into();
            let after: Arc<[f64]> = trainer.policy.input(&state.observe(role)).into();
            for atom in &mine.atoms {
                trainer.replay.push(Transition {
                    obs: before.clone(),
                    atom: *atom,
                    reward,
                    next_obs: after.clone(),
                    done: outcome.done,
                });
            }
            if !outcome.changed.is_empty() {
                let radius = cache.config().khop_radius;
                cache.invalidate_khop(outcome.changed.iter().copied(), &state.adjacency, radius);
            }
            opp.observe_changes(&state, &outcome.changed)?;
            meta.mark_dirty(outcome.changed.iter().copied())?;
            if let Some(mut t) = meta_t.take() {
                t.reward = reward;
                meta.remember(t);
            }

            stats.steps += 1;
            if trainer.replay.len() >= cfg.warmup.max(cfg.batch_size).max(1) {
                losses.push(trainer.update()?);
                stats.updates += 1;
            }
            let every = meta.config().train_every;
            if every > 0 && stats.steps % every == 0 && meta.train_from_replay()?.is_some() {
                stats.meta_updates += 1;
            }
        }
        stats.episodes += 1;
        stats.last_return = ret;
        on_episode(&EpisodeMetric {
            episode,
            step: stats.steps,
            critic_loss: if losses.is_empty() {
                f64::NAN
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            },
            episode_return: ret,
        });
    }
    stats.cache = cache.stats().since(&cache_before);
    Ok((trainer.policy, stats))
}
