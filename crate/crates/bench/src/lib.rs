//! Fixtures shared by the benchmarks under `benches/`.

use metadoar_core::br::BrConfig;
use metadoar_core::meta::MetaConfig;
use metadoar_core::{seed, EnvConfig, MetaController, NetworkState, Observation, Policy, Role};
use rand::Rng;

/// Random zero-sum game with entries in [-1, 1).
pub fn random_game(n: usize, s: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(s);
    (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// A freshly reset defender decode problem on `m` devices.
pub struct DecodeFixture {
    pub env: EnvConfig,
    pub state: NetworkState,
    pub obs: Observation,
    pub policy: Policy,
    pub meta: MetaController,
}

impl DecodeFixture {
    pub fn new(m: usize) -> Self {
        let env = EnvConfig::with_devices(m);
        let state = NetworkState::reset(&env).expect("valid config");
        let obs = state.observe(Role::Defender);
        Self {
            policy: Policy::new(Role::Defender, &env, &BrConfig::default(), 1),
            meta: MetaController::new(Role::Defender, &env, &MetaConfig::default(), 2),
            env,
            state,
            obs,
        }
    }
}
