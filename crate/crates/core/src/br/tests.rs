use super::Strategy;
use super::*;
use crate::env::ActionKind;
use crate::meta::MetaConfig;
use crate::nn::tests::rel_err;
use crate::nn::OptimizerState;
use crate::theory::{value_iteration, TabularMdp};
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeSet;

fn small_env(m: usize) -> EnvConfig {
    EnvConfig {
        seed: 7,
        ..EnvConfig::with_devices(m)
    }
}

fn small_br() -> BrConfig {
    BrConfig {
        hidden: Some(8),
        batch_size: 8,
        warmup: 8,
        budget: 40,
        ..BrConfig::default()
    }
}

fn transitions(policy: &Policy, env: &EnvConfig, n: usize, seed: u64) -> Vec<Transition> {
    let mut rng = seed::rng(seed);
    let state = NetworkState::reset(env).unwrap();
    let obs: Arc<[f64]> = policy.input(&state.observe(policy.role)).into();
    let legal = state.legal_actions(policy.role);
    (0..n)
        .map(|i| {
            let next: Vec<f64> = obs.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            Transition {
                obs: obs.clone(),
                atom: legal[rng.random_range(0..legal.len())],
                reward: rng.random_range(-5.0..5.0),
                next_obs: next.into(),
                done: i % 3 == 0,
            }
        })
        .collect()
}

#[test]
fn codec_layout() {
    let env = small_env(5);
    let codec = ActionCodec::new(&env);
    assert_eq!(codec.width(), 5 + 4 + 4 + 3);
    let atom = ActionAtom::with_exploit(2, ActionKind::Exploit, 1, &env);
    let hot: Vec<usize> = codec.hot(&atom).collect();
    assert_eq!(hot, vec![2, 5 + ActionKind::Exploit.slot(), 9 + 1, 13 + env.exploit_app(1)]);
    let enc = codec.encode(&ActionAtom::noop(4));
    assert_eq!(enc.iter().filter(|v| **v == 1.0).count(), 2);
    assert_eq!(enc[4], 1.0);
}

#[test]
fn distance_matches_direct_computation() {
    let env = small_env(4);
    let codec = ActionCodec::new(&env);
    let state = NetworkState::reset(&env).unwrap();
    let mut rng = seed::rng(3);
    let target: Vec<f64> = (0..codec.width()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm2: f64 = target.iter().map(|v| v * v).sum();
    for role in [Role::Attacker, Role::Defender] {
        for atom in state.legal_actions(role) {
            let direct: f64 = codec.encode(&atom).iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((codec.distance2(&target, norm2, &atom) - direct).abs() < 1e-12);
        }
    }
}

#[test]
fn hidden_width_scales_with_input() {
    assert_eq!(hidden_width(Role::Defender, 1229), 128);
    assert_eq!(hidden_width(Role::Attacker, 1004), 128);
    assert_eq!(hidden_width(Role::Defender, 5000), 128);
    assert_eq!(hidden_width(Role::Defender, 100), 32);
    assert_eq!(hidden_width(Role::Defender, 614), 64);
}

#[test]
fn empty_selection_plays_noop() {
    let env = small_env(6);
    let policy = Policy::new(Role::Defender, &env, &small_br(), 1);
    let state = NetworkState::reset(&env).unwrap();
    let obs = state.observe(Role::Defender);
    let d = policy.act(&state, &obs, &[], None, true, &mut seed::rng(1)).unwrap();
    assert_eq!(d.atoms, vec![ActionAtom::noop(0)]);
    assert_eq!(d.critic_evals, 0);
}

#[test]
fn greedy_decode_matches_brute_force() {
    let env = small_env(3);
    let cfg = BrConfig { greedy_k: 4, ..small_br() };
    for seed in 0..5 {
        let policy = Policy::new(Role::Defender, &env, &cfg, seed);
        let state = NetworkState::reset(&env).unwrap();
        let obs = state.observe(Role::Defender);
        let input = policy.input(&obs);
        let target = policy.actor.forward(input).unwrap();
        let allowed = [0, 1, 2];
        let d = policy.act(&state, &obs, &allowed, None, false, &mut seed::rng(0)).unwrap();
        assert!(d.critic_evals <= allowed.len() * cfg.greedy_k);
        for (&node, got) in allowed.iter().zip(&d.atoms) {
            let mut legal = state.legal_atoms_on(Role::Defender, node);
            let dist = |a: &ActionAtom| -> f64 { policy.codec.encode(a).iter().zip(&target).map(|(x, t)| (x - t).powi(2)).sum() };
            let order: Vec<(f64, usize)> = legal.iter().enumerate().map(|(i, a)| (dist(a), i)).collect();
            let mut order = order;
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            legal = order.iter().take(4).map(|&(_, i)| legal[i]).collect();
            let mut best = legal[0];
            for a in &legal[1..] {
                if policy.q_value(input, a).unwrap() > policy.q_value(input, &best).unwrap() {
                    best = *a;
                }
            }
            assert_eq!(*got, best);
        }
    }
}

#[test]
fn decode_respects_allowed_set() {
    let env = small_env(12);
    let policy = Policy::new(Role::Attacker, &env, &small_br(), 4);
    let state = NetworkState::reset(&env).unwrap();
    let obs = state.observe(Role::Attacker);
    let visible = state.visible_devices(Role::Attacker);
    let allowed = &visible[..1];
    let mut rng = seed::rng(5);
    for _ in 0..20 {
        let d = policy.act(&state, &obs, allowed, None, true, &mut rng).unwrap();
        assert!(d.atoms.iter().all(|a| allowed.contains(&a.node)));
        for a in &d.atoms {
            state.check_atom(Role::Attacker, a).unwrap();
        }
    }
}

#[test]
fn strict_cache_does_not_change_decisions() {
    let env = small_env(8);
    let policy = Policy::new(Role::Defender, &env, &small_br(), 9);
    let mut meta = MetaController::new(Role::Defender, &env, &MetaConfig::default(), 9);
    let mut cache = QCache::new(CacheConfig::strict(8), 0);
    let mut state = NetworkState::reset(&env).unwrap();
    let mut hits = 0;
    while !state.is_done() {
        let obs = state.observe(Role::Defender);
        let allowed = meta.select(&state, &obs).unwrap();
        let key = cache.state_key(&meta.key_embedding(&obs).unwrap()).unwrap();
        let plain = policy.act(&state, &obs, &allowed, None, false, &mut seed::rng(0)).unwrap();
        for _ in 0..2 {
            let ctx = CacheCtx {
                cache: &mut cache,
                state_key: key,
            };
            let cached = policy.act(&state, &obs, &allowed, Some(ctx), false, &mut seed::rng(0)).unwrap();
            assert_eq!(cached.atoms, plain.atoms);
            hits += cached.cache_hits;
        }
        let out = state.step(&[], &plain.atoms).unwrap();
        cache.invalidate_khop(out.changed.iter().copied(), &state.adjacency, 8);
        meta.mark_dirty(out.changed.iter().copied()).unwrap();
    }
    assert!(hits > 0);
}

#[test]
fn terminal_and_myopic_targets_are_the_reward() {
    let env = EnvConfig {
        gamma: 0.5,
        ..small_env(3)
    };
    let policy = Policy::new(Role::Attacker, &env, &small_br(), 2);
    for t in transitions(&policy, &env, 9, 1) {
        let y = td_target(&policy, &t).unwrap();
        if t.done {
            assert_eq!(y, t.reward);
        } else {
            let a = policy.actor_target.forward(&t.next_obs).unwrap();
            let mut x = t.next_obs.to_vec();
            x.extend(a);
            let q = policy.value_scale * policy.critic_target.forward(&x).unwrap()[0];
            assert!((y - (t.reward + 0.5 * q)).abs() < 1e-9);
        }
    }
    let mut myopic = policy.clone();
    myopic.gamma = 0.0;
    for t in transitions(&myopic, &env, 6, 2) {
        assert_eq!(td_target(&myopic, &t).unwrap(), t.reward);
    }
}

#[test]
fn critic_gradient_matches_finite_differences() {
    let env = small_env(3);
    let mut policy = Policy::new(Role::Defender, &env, &small_br(), 3);
    let data = transitions(&policy, &env, 6, 3);
    let batch: Vec<&Transition> = data.iter().collect();
    let (_, grads) = critic_loss(&policy, &batch).unwrap();
    let mut rng = seed::rng(4);
    let n = policy.critic.param_count();
    for _ in 0..40 {
        let i = rng.random_range(0..n);
        let h = 1e-6;
        let base = policy.critic.params()[i];
        policy.critic.params_mut()[i] = base + h;
        let up = critic_loss(&policy, &batch).unwrap().0;
        policy.critic.params_mut()[i] = base - h;
        let down = critic_loss(&policy, &batch).unwrap().0;
        policy.critic.params_mut()[i] = base;
        let fd = (up - down) / (2.0 * h);
        assert!(
            rel_err(fd, grads[i]) < 1e-4 || (fd - grads[i]).abs() < 1e-3,
            "param {i}: {fd} vs {}",
            grads[i]
        );
    }
}

#[test]
fn actor_gradient_matches_finite_differences() {
    let env = small_env(3);
    let mut policy = Policy::new(Role::Attacker, &env, &small_br(), 5);
    let data = transitions(&policy, &env, 5, 5);
    let batch: Vec<&Transition> = data.iter().collect();
    let (_, grads) = actor_gradient(&policy, &batch).unwrap();
    let mut rng = seed::rng(6);
    let n = policy.actor.param_count();
    for _ in 0..40 {
        let i = rng.random_range(0..n);
        let h = 1e-6;
        let base = policy.actor.params()[i];
        policy.actor.params_mut()[i] = base + h;
        let up = actor_gradient(&policy, &batch).unwrap().0;
        policy.actor.params_mut()[i] = base - h;
        let down = actor_gradient(&policy, &batch).unwrap().0;
        policy.actor.params_mut()[i] = base;
        let fd = (up - down) / (2.0 * h);
        assert!(
            rel_err(fd, grads[i]) < 1e-4 || (fd - grads[i]).abs() < 1e-4,
            "param {i}: {fd} vs {}",
            grads[i]
        );
    }
}

#[test]
fn constant_critic_gives_zero_actor_gradient() {
    let env = small_env(3);
    let mut policy = Policy::new(Role::Attacker, &env, &small_br(), 5);
    let sizes = policy.critic.sizes().to_vec();
    policy.critic = Mlp::zeros(&sizes, Activation::Relu, Activation::Identity);
    let last = policy.critic.param_count() - 1;
    policy.critic.params_mut()[last] = 0.7;
    let data = transitions(&policy, &env, 4, 1);
    let batch: Vec<&Transition> = data.iter().collect();
    let mut opt = OptimizerState::new(1e-3, policy.actor.param_count());
    let before = policy.actor.clone();
    let (j, grads) = actor_gradient(&policy, &batch).unwrap();
    assert!((j - 0.7 * policy.value_scale).abs() < 1e-9);
    assert!(grads.iter().all(|g| *g == 0.0));
    actor_step(&mut policy, &mut opt, &batch, 0.5).unwrap();
    assert_eq!(policy.actor, before);
}

#[test]
fn empty_batches_are_rejected() {
    let env = small_env(3);
    let policy = Policy::new(Role::Attacker, &env, &small_br(), 5);
    assert!(matches!(critic_loss(&policy, &[]), Err(BrError::EmptyBatch)));
    assert!(matches!(actor_gradient(&policy, &[]), Err(BrError::EmptyBatch)));
}

#[test]
fn critic_fits_fixed_targets() {
    let env = small_env(3);
    let policy = Policy::new(Role::Defender, &env, &small_br(), 8);
    let data = transitions(&policy, &env, 16, 8)
        .into_iter()
        .map(|t| Transition { done: true, ..t })
        .collect::<Vec<_>>();
    let batch: Vec<&Transition> = data.iter().collect();
    let mut trainer = Trainer::new(policy, &small_br(), 0);
    let first = critic_loss(&trainer.policy, &batch).unwrap().0;
    for _ in 0..500 {
        let (_, g) = critic_loss(&trainer.policy, &batch).unwrap();
        trainer.critic_opt.step(trainer.policy.critic.params_mut(), &g, 0.5).unwrap();
    }
    let last = critic_loss(&trainer.policy, &batch).unwrap().0;
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn mixture_validation() {
    let s = Arc::new(Strategy::Noop);
    assert!(Mixture::new(vec![], vec![]).is_err());
    assert!(Mixture::new(vec![s.clone()], vec![0.5]).is_err());
    assert!(Mixture::new(vec![s.clone(), s.clone()], vec![1.5, -0.5]).is_err());
    assert!(Mixture::new(vec![s.clone(), s.clone()], vec![0.25, 0.75]).is_ok());
}

#[test]
fn mixture_sampling_matches_probabilities() {
    let probs = vec![0.1, 0.0, 0.3, 0.6];
    let mix = Mixture::new(vec![Arc::new(Strategy::Noop); 4], probs.clone()).unwrap();
    let mut rng = seed::rng(42);
    let mut counts = [0usize; 4];
    let n = 10_000;
    for _ in 0..n {
        counts[mix.sample_index(&mut rng)] += 1;
    }
    assert_eq!(counts[1], 0);
    let chi2: f64 = probs
        .iter()
        .zip(&counts)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, c)| {
            let e = p * n as f64;
            (*c as f64 - e).powi(2) / e
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    assert!(p_value > 0.01, "chi2 {chi2}, p {p_value}");
}

#[test]
fn softmax_pick_edge_cases() {
    let mut rng = seed::rng(1);
    assert_eq!(softmax_pick(&[3.0], 0.5, &mut rng), 0);
    assert_eq!(softmax_pick(&[1.0, 1.0, 1.0], 0.5, &mut rng), 0);
    assert_eq!(softmax_pick(&[1.0, 5.0], 0.0, &mut rng), 1);
    let mut wins = 0;
    for _ in 0..2000 {
        wins += usize::from(softmax_pick(&[0.0, 1.0], 1e-3, &mut rng) == 1);
    }
    assert_eq!(wins, 2000);
    // tau = 1 over a unit spread: odds e : 1.
    let mut ones = 0;
    for _ in 0..20_000 {
        ones += usize::from(softmax_pick(&[0.0, 10.0], 1.0, &mut rng) == 1);
    }
    let expect = std::f64::consts::E / (1.0 + std::f64::consts::E);
    assert!((ones as f64 / 20_000.0 - expect).abs() < 0.015);
}

#[test]
fn argmax_takes_first_maximum() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[-1.0]), 0);
}

#[test]
fn noop_player_never_acts() {
    let env = small_env(4);
    let state = NetworkState::reset(&env).unwrap();
    let s = Strategy::Noop;
    let mut p = Player::new(Role::Attacker, &s, &CacheConfig::default(), 0);
    let d = p.act(&state, true, &mut seed::rng(0)).unwrap();
    assert!(d.atoms.is_empty());
    p.observe_changes(&state, &BTreeSet::from([1])).unwrap();
}

fn setup<'a>(env: &'a EnvConfig, br: &'a BrConfig, cache: &'a CacheConfig, seed: u64) -> BrSetup<'a> {
    BrSetup {
        env,
        role: Role::Defender,
        br,
        opponent_cache: cache,
        seed,
    }
}

#[test]
fn zero_budget_returns_initial_policy() {
    let env = small_env(4);
    let br = BrConfig { budget: 0, ..small_br() };
    let cc = CacheConfig::default();
    let mut meta = MetaController::new(Role::Defender, &env, &MetaConfig::default(), 0);
    let mut cache = QCache::new(cc.clone(), 0);
    let opp = Mixture::pure(Arc::new(Strategy::Noop));
    let (policy, stats) = train_best_response(&setup(&env, &br, &cc, 11), &opp, &mut meta, &mut cache, |_| {}).unwrap();
    assert_eq!(policy, Policy::new(Role::Defender, &env, &br, seed::derive(11, &[1])));
    assert_eq!(stats.steps, 0);
}

#[test]
fn training_is_deterministic() {
    let env = EnvConfig {
        steps_per_episode: 15,
        ..small_env(5)
    };
    let br = small_br();
    let cc = CacheConfig::default();
    let run = || {
        let mut meta = MetaController::new(Role::Defender, &env, &MetaConfig::default(), 3);
        let mut cache = QCache::new(cc.clone(), 3);
        let opp_policy = Policy::new(Role::Attacker, &env, &br, 77);
        let opp_meta = MetaController::new(Role::Attacker, &env, &MetaConfig::default(), 77);
        let opp = Mixture::new(
            vec![
                Arc::new(Strategy::Noop),
                Arc::new(Strategy::Learned {
                    policy: opp_policy,
                    meta: opp_meta,
                }),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let mut episodes = Vec::new();
        let (p, stats) = train_best_response(&setup(&env, &br, &cc, 5), &opp, &mut meta, &mut cache, |m| episodes.push(m.clone())).unwrap();
        (p, stats, episodes)
    };
    let (a, sa, ea) = run();
    let (b, sb, eb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(format!("{ea:?}"), format!("{eb:?}"));
    assert_eq!(sa.steps, 40);
    assert_eq!(sa.episodes, 3);
    assert!(sa.updates > 0);
}

/// One device, compromised at reset, never owned. The defender can restore it
/// once for `0.5 + w` or leave it and pay `comp_scale` every step.
#[test]
fn single_device_best_response_is_near_optimal() {
    let env = EnvConfig {
        device_count: 1,
        steps_per_episode: 10,
        initial_compromised_ratio: 1.0,
        num_attacker_owned: Some(0),
        vulnerability_prob: 0.0,
        lambda_events: 0.0,
        gamma: 0.9,
        seed: 3,
        ..EnvConfig::default()
    };
    let br = BrConfig {
        budget: 600,
        warmup: 32,
        batch_size: 32,
        hidden: Some(16),
        ..BrConfig::default()
    };
    let cc = CacheConfig::disabled();
    let mut meta = MetaController::new(Role::Defender, &env, &MetaConfig::default(), 1);
    let mut cache = QCache::new(cc.clone(), 0);
    let opp = Mixture::pure(Arc::new(Strategy::Noop));
    let (policy, _) = train_best_response(&setup(&env, &br, &cc, 21), &opp, &mut meta, &mut cache, |_| {}).unwrap();

    let state = NetworkState::reset(&env).unwrap();
    let w = state.devices[0].workload_value;
    let restore_cost = env.work_scale * env.def_scale * (0.5 + w);

    // Time-indexed MDP over (t, compromised) plus an absorbing end state;
    // rewards are defender utilities. Action 1 (restore) is legal only while
    // compromised.
    let t_max = env.steps_per_episode;
    let n = 2 * t_max + 1;
    let end = 2 * t_max;
    let idx = |t: usize, c: usize| if t >= t_max { end } else { 2 * t + c };
    let mut mask = vec![false; n * 2];
    let mut trans = vec![0.0; n * 2 * n];
    let mut rewards = vec![0.0; n * 2];
    for s in 0..n {
        mask[s * 2] = true;
        trans[(s * 2 + 1) * n + s] = 1.0;
        if s == end {
            trans[(s * 2) * n + end] = 1.0;
            continue;
        }
        let (t, c) = (s / 2, s % 2);
        trans[(s * 2) * n + idx(t + 1, c)] = 1.0;
        rewards[s * 2] = -env.comp_scale * c as f64;
        if c == 1 {
            mask[s * 2 + 1] = true;
            trans[(s * 2 + 1) * n + s] = 0.0;
            trans[(s * 2 + 1) * n + idx(t + 1, 0)] = 1.0;
            rewards[s * 2 + 1] = -restore_cost;
        }
    }
    let mdp = TabularMdp::new(n, 2, mask, trans, rewards, env.gamma).unwrap();
    let optimum = value_iteration(&mdp, 1e-12).v[idx(0, 1)];
    assert!((optimum + restore_cost).abs() < 1e-9);

    let mut state = state;
    let mut ret = 0.0;
    let mut discount = 1.0;
    let mut meta = meta.snapshot();
    while !state.is_done() {
        let obs = state.observe(Role::Defender);
        let allowed = meta.select(&state, &obs).unwrap();
        let d = policy.act(&state, &obs, &allowed, None, false, &mut seed::rng(0)).unwrap();
        let out = state.step(&[], &d.atoms).unwrap();
        meta.mark_dirty(out.changed.iter().copied()).unwrap();
        ret -= discount * out.reward;
        discount *= env.gamma;
    }
    assert!((ret - optimum).abs() <= 0.05 * optimum.abs(), "return {ret}, optimum {optimum}");
}

#[test]
fn policy_checkpoint_round_trip() {
    let env = small_env(4);
    let policy = Policy::new(Role::Attacker, &env, &small_br(), 13);
    let mut buf = Vec::new();
    policy.save(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"MDPO");
    assert_eq!(Policy::load(&mut buf.as_slice()).unwrap(), policy);
    buf[0] = b'X';
    assert!(Policy::load(&mut buf.as_slice()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decisions_are_legal_and_within_budget(seed in any::<u64>(), m in 1usize..10, explore in any::<bool>(), attacker in any::<bool>()) {
        let role = if attacker { Role::Attacker } else { Role::Defender };
        let env = EnvConfig { seed, ..EnvConfig::with_devices(m) };
        let br = small_br();
        let policy = Policy::new(role, &env, &br, seed);
        let mut meta = MetaController::new(role, &env, &MetaConfig::default(), seed);
        let state = NetworkState::reset(&env).unwrap();
        let obs = state.observe(role);
        let allowed = meta.select(&state, &obs).unwrap();
        let d = policy.act(&state, &obs, &allowed, None, explore, &mut seed::rng(seed)).unwrap();
        prop_assert!(d.critic_evals <= allowed.len() * br.greedy_k);
        prop_assert!(!d.atoms.is_empty());
        let mut nodes = BTreeSet::new();
        for a in &d.atoms {
            prop_assert!(state.check_atom(role, a).is_ok());
            prop_assert!(nodes.insert(a.node));
            prop_assert!(allowed.contains(&a.node) || (a.is_noop() && a.node == 0));
        }
    }
}
