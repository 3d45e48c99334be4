//! Double Oracle equilibrium solving for attacker-defender games on device networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`env`]: a seeded attacker/defender stochastic game on a device graph.
//! - [`nn`]: small dense networks with analytic gradients, Adam and checkpoints.
//! - [`qcache`]: an LRU cache of critic values keyed by a quantized state embedding.
//! - [`meta`]: the top-k device selector that restricts where a best response may act.
//! - [`br`]: actor-critic approximate best responses with critic-scored decoding.
//! - [`game`]: restricted-game Nash solving and the Double Oracle outer loop.
//! - [`theory`]: exact tabular MDP tools used to check the pruning value-loss bound.
//! - [`config`]: the run configuration file and its defaults.

pub mod br;
pub mod config;
pub mod env;
pub mod game;
pub mod meta;
pub mod nn;
pub mod qcache;
pub mod replay;
pub mod seed;
pub mod theory;

pub use br::{Mixture, Policy, ReplayBuffer, Strategy};
pub use config::RunConfig;
pub use env::{ActionAtom, ActionKind, EnvConfig, NetworkState, Observation, Role};
pub use game::{PayoffMatrix, RestrictedGame};
pub use meta::MetaController;
pub use nn::{Mlp, OptimizerState};
pub use qcache::{CacheKey, QCache};
