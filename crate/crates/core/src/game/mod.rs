//! Restricted-game solving and the Double Oracle outer loop.
//!
//! Payoffs are defender utilities: row `i` is a defender policy, column `j`
//! an attacker policy, and the attacker receives `-u[i][j]`.

mod lp;

pub use lp::{expected, exploitability, solve_matrix, MatrixSolution};

use crate::br::{train_best_response, BrError, BrSetup, Mixture, Player, Policy, Strategy};
use crate::config::RunConfig;
use crate::env::{EnvConfig, NetworkState, Role};
use crate::meta::MetaController;
use crate::qcache::{CacheConfig, CacheStats, QCache};
use crate::seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

/// Exploitability allowed for a restricted-game solution.
pub const NASH_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("payoff matrix shape: {0}")]
    Shape(String),
    #[error("payoff matrix has a non-finite entry")]
    NonFinite,
    #[error("linear program: {0}")]
    Lp(String),
    #[error("restricted solution is exploitable by {0:e}")]
    Exploitable(f64),
    #[error("best response: {0}")]
    Br(String),
}

impl From<BrError> for GameError {
    fn from(e: BrError) -> Self {
        GameError::Br(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoConfig {
    pub min_iterations: usize,
    pub max_iterations: usize,
    pub episodes_per_cell: usize,
    /// `eps_stop = eps_stop_rel * |value| + eps_stop_abs`.
    pub eps_stop_rel: f64,
    pub eps_stop_abs: f64,
    /// Stopping also needs this many trailing iterations with
    /// `|delta_value| < eps_stop`.
    pub stable_window: usize,
}

impl Default for DoConfig {
    fn default() -> Self {
        Self {
            min_iterations: 10,
            max_iterations: 15,
            episodes_per_cell: 8,
            eps_stop_rel: 0.01,
            eps_stop_abs: 1e-3,
            stable_window: 3,
        }
    }
}

impl DoConfig {
    pub fn eps_stop(&self, value: f64) -> f64 {
        self.eps_stop_rel * value.abs() + self.eps_stop_abs
    }
}

/// Monte Carlo estimate of one payoff cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub stderr: f64,
    pub episodes: usize,
    pub seed: u64,
}

impl Cell {
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            stderr: 0.0,
            episodes: 0,
            seed: 0,
        }
    }
}

/// Append-only matrix of defender utilities.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PayoffMatrix {
    cells: Vec<Vec<Cell>>,
    cols: usize,
}

impl PayoffMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell(&self, defender: usize, attacker: usize) -> &Cell {
        &self.cells[defender][attacker]
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|r| r.iter().map(|c| c.mean).collect()).collect()
    }

    /// Adds a defender row; needs one cell per existing column. The first
    /// row of an empty matrix also fixes the column count.
    pub fn push_row(&mut self, row: Vec<Cell>) -> Result<(), GameError> {
        if self.cells.is_empty() && self.cols == 0 {
            self.cols = row.len();
        } else if row.len() != self.cols {
            return Err(GameError::Shape(format!("row of {} cells for {} columns", row.len(), self.cols)));
        }
        self.cells.push(row);
        Ok(())
    }

    /// Adds an attacker column; needs one cell per existing row.
    pub fn push_col(&mut self, col: Vec<Cell>) -> Result<(), GameError> {
        if col.len() != self.cells.len() {
            return Err(GameError::Shape(format!(
                "column of {} cells for {} rows",
                col.len(),
                self.cells.len()
            )));
        }
        for (row, c) in self.cells.iter_mut().zip(col) {
            row.push(c);
        }
        self.cols += 1;
        Ok(())
    }
}

/// Nash equilibrium of a payoff matrix, checked for exploitability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub defender: Vec<f64>,
    pub attacker: Vec<f64>,
    pub value: f64,
    pub exploitability: f64,
}

pub fn solve_restricted(payoff: &PayoffMatrix) -> Result<Equilibrium, GameError> {
    let u = payoff.means();
    let s = solve_matrix(&u)?;
    let gap = exploitability(&u, &s.row, &s.col);
    if gap > NASH_TOLERANCE {
        return Err(GameError::Exploitable(gap));
    }
    Ok(Equilibrium {
        defender: s.row,
        attacker: s.col,
        value: s.value,
        exploitability: gap,
    })
}

/// Strategy sets, payoffs and their equilibrium.
#[derive(Clone, Debug)]
pub struct RestrictedGame {
    pub defender_policies: Vec<Arc<Strategy>>,
    pub attacker_policies: Vec<Arc<Strategy>>,
    pub payoff: PayoffMatrix,
    pub equilibrium: Equilibrium,
}

impl RestrictedGame {
    pub fn defender_mixture(&self) -> Result<Mixture, BrError> {
        Mixture::new(self.defender_policies.clone(), self.equilibrium.defender.clone())
    }

    pub fn attacker_mixture(&self) -> Result<Mixture, BrError> {
        Mixture::new(self.attacker_policies.clone(), self.equilibrium.attacker.clone())
    }
}

/// Mean discounted defender utility of `defender` against `attacker`, both
/// playing greedily with fresh per-episode caches.
pub fn estimate_payoff(
    defender: &Strategy,
    attacker: &Strategy,
    env: &EnvConfig,
    cache: &CacheConfig,
    episodes: usize,
    seed: u64,
) -> Result<Cell, BrError> {
    let episodes = episodes.max(1);
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes as u64 {
        let mut state = NetworkState::reset_episode(env, seed::derive(seed, &[ep]))?;
        let mut def = Player::new(Role::Defender, defender, cache, seed::derive(seed, &[ep, 1]));
        let mut att = Player::new(Role::Attacker, attacker, cache, seed::derive(seed, &[ep, 2]));
        let mut rng = seed::rng(seed::derive(seed, &[ep, 3]));
        let (mut ret, mut discount) = (0.0, 1.0);
        while !state.is_done() {
            let d = def.act(&state, false, &mut rng)?;
            let a = att.act(&state, false, &mut rng)?;
            let out = state.step(&a.atoms, &d.atoms)?;
            ret -= discount * out.reward;
            discount *= env.gamma;
            def.observe_changes(&state, &out.changed)?;
            att.observe_changes(&state, &out.changed)?;
        }
        returns.push(ret);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let stderr = if returns.len() < 2 {
        0.0
    } else {
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    Ok(Cell {
        mean,
        stderr,
        episodes: returns.len(),
        seed,
    })
}

/// Work done by one best-response call.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OracleStats {
    pub steps: usize,
    pub critic_evals: u64,
    pub cache: CacheStats,
}

/// The strategy source and payoff evaluator behind a Double Oracle run.
pub trait Oracle {
    /// Creates one initial strategy per side.
    fn initialize(&mut self) -> Result<(), GameError>;
    /// Payoff cells `(defender, attacker)` for existing strategies.
    fn evaluate(&mut self, cells: &[(usize, usize)]) -> Result<Vec<Cell>, GameError>;
    /// Appends a best response for `role` against a mixture over the first
    /// `opponent.len()` opponent strategies.
    fn best_response(&mut self, role: Role, opponent: &[f64], iteration: usize) -> Result<OracleStats, GameError>;
}

/// One Double Oracle iteration, recorded after expansion and re-solving.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub value_per_device: f64,
    pub delta_value: f64,
    pub defender_policies: usize,
    pub attacker_policies: usize,
    /// Payoff of the new defender response against the previous attacker
    /// mixture, minus the previous value.
    pub defender_gain: f64,
    /// Previous value minus the payoff of the new attacker response against
    /// the previous defender mixture.
    pub attacker_gain: f64,
    pub eps_stop: f64,
    pub exploitability: f64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_forced_reevals: u64,
    pub cache_invalidations: u64,
    pub cache_flushes: u64,
    #[serde(skip)]
    pub wall_ms: f64,
    /// Time spent estimating the new payoff cells.
    #[serde(skip)]
    pub payoff_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoOutcome {
    pub payoff: PayoffMatrix,
    pub equilibrium: Equilibrium,
    pub initial_value: f64,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

/// Runs Double Oracle over `oracle`. `devices` only scales the per-device
/// value in the log. `on_iteration` sees each record as soon as it exists.
///
/// Stops at `max_iterations`, or once `min_iterations` have run, neither new
/// best response beats the previous restricted value by more than
/// `eps_stop`, and the value has been stable for `stable_window` iterations.
pub fn double_oracle<O: Oracle>(
    oracle: &mut O,
    cfg: &DoConfig,
    devices: usize,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<DoOutcome, GameError> {
    oracle.initialize()?;
    let mut payoff = PayoffMatrix::new();
    payoff.push_row(oracle.evaluate(&[(0, 0)])?)?;
    let mut eq = solve_restricted(&payoff)?;
    let initial_value = eq.value;
    let mut log = Vec::new();
    let mut converged = false;

    for iteration in 1..=cfg.max_iterations {
        let start = Instant::now();
        let (rows, cols) = (payoff.rows(), payoff.cols());
        let d_stats = oracle.best_response(Role::Defender, &eq.attacker, iteration)?;
        let a_stats = oracle.best_response(Role::Attacker, &eq.defender, iteration)?;

        let fill = Instant::now();
        let row_cells: Vec<(usize, usize)> = (0..cols).map(|j| (rows, j)).collect();
        payoff.push_row(oracle.evaluate(&row_cells)?)?;
        let col_cells: Vec<(usize, usize)> = (0..=rows).map(|i| (i, cols)).collect();
        payoff.push_col(oracle.evaluate(&col_cells)?)?;
        let payoff_ms = fill.elapsed().as_secs_f64() * 1e3;

        let defender_gain = (0..cols).map(|j| eq.attacker[j] * payoff.cell(rows, j).mean).sum::<f64>() - eq.value;
        let attacker_gain = eq.value - (0..rows).map(|i| eq.defender[i] * payoff.cell(i, cols).mean).sum::<f64>();
        let eps_stop = cfg.eps_stop(eq.value);
        let previous = eq.value;
        eq = solve_restricted(&payoff)?;

        let cache = {
            let mut c = d_stats.cache;
            c.merge(&a_stats.cache);
            c
        };
        let record = IterationRecord {
            iteration,
            value: eq.value,
            value_per_device: eq.value / devices.max(1) as f64,
            delta_value: eq.value - previous,
            defender_policies: payoff.rows(),
            attacker_policies: payoff.cols(),
            defender_gain,
            attacker_gain,
            eps_stop,
            exploitability: eq.exploitability,
            cache_hits: cache.hits,
            cache_misses: cache.misses,
            cache_forced_reevals: cache.forced_reevals,
            cache_invalidations: cache.invalidations,
            cache_flushes: cache.flushes,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            payoff_ms,
        };
        on_iteration(&record);
        log.push(record);
        let stable = log.len() >= cfg.stable_window
            && log[log.len() - cfg.stable_window..]
                .iter()
                .all(|r: &IterationRecord| r.delta_value.abs() < r.eps_stop);
        if iteration >= cfg.min_iterations && stable && defender_gain <= eps_stop && attacker_gain <= eps_stop {
            converged = true;
            break;
        }
    }
    Ok(DoOutcome {
        payoff,
        equilibrium: eq,
        initial_value,
        log,
        converged,
    })
}

/// Oracle backed by the simulator and learned best responses. Each role keeps
/// one selector for the whole run; every best response gets a fresh cache.
pub struct SimulationOracle<'c> {
    config: &'c RunConfig,
    seed: u64,
    pub defenders: Vec<Arc<Strategy>>,
    pub attackers: Vec<Arc<Strategy>>,
    defender_meta: MetaController,
    attacker_meta: MetaController,
}

impl<'c> SimulationOracle<'c> {
    pub fn new(config: &'c RunConfig, seed: u64) -> Self {
        let env = &config.env;
        Self {
            config,
            seed,
            defenders: Vec::new(),
            attackers: Vec::new(),
            defender_meta: MetaController::new(Role::Defender, env, &config.meta, seed::derive(seed, &[0x3d, 0])),
            attacker_meta: MetaController::new(Role::Attacker, env, &config.meta, seed::derive(seed, &[0x3d, 1])),
        }
    }

    /// Seed of cell `(defender, attacker)`; stable for the whole run.
    pub fn cell_seed(&self, defender: usize, attacker: usize) -> u64 {
        seed::derive(self.seed, &[0xce, defender as u64, attacker as u64])
    }

    fn strategies(&self, role: Role) -> &[Arc<Strategy>] {
        match role {
            Role::Defender => &self.defenders,
            Role::Attacker => &self.attackers,
        }
    }
}

impl Oracle for SimulationOracle<'_> {
    fn initialize(&mut self) -> Result<(), GameError> {
        let cfg = self.config;
        for role in [Role::Defender, Role::Attacker] {
            let tag = role as u64;
            let policy = Policy::new(role, &cfg.env, &cfg.br, seed::derive(self.seed, &[0x1a, tag]));
            let meta = match role {
                Role::Defender => self.defender_meta.snapshot(),
                Role::Attacker => self.attacker_meta.snapshot(),
            };
            let s = Arc::new(Strategy::Learned { policy, meta });
            match role {
                Role::Defender => self.defenders = vec![s],
                Role::Attacker => self.attackers = vec![s],
            }
        }
        Ok(())
    }

    fn evaluate(&mut self, cells: &[(usize, usize)]) -> Result<Vec<Cell>, GameError> {
        let cfg = self.config;
        cells
            .par_iter()
            .map(|&(i, j)| {
                let (d, a) = (self.defenders.get(i), self.attackers.get(j));
                let (Some(d), Some(a)) = (d, a) else {
                    return Err(GameError::Shape(format!("no strategy pair ({i}, {j})")));
                };
                Ok(estimate_payoff(
                    d,
                    a,
                    &cfg.env,
                    &cfg.cache,
                    cfg.r#do.episodes_per_cell,
                    self.cell_seed(i, j),
                )?)
            })
            .collect()
    }

    fn best_response(&mut self, role: Role, opponent: &[f64], iteration: usize) -> Result<OracleStats, GameError> {
        let cfg = self.config;
        // The opponent mixture covers the strategies that existed when it was
        // solved; a response appended earlier in this iteration is excluded.
        let pool = self.strategies(role.opponent());
        let pool = &pool[..opponent.len().min(pool.len())];
        let mixture = Mixture::new(pool.to_vec(), opponent.to_vec())?;
        let br_seed = seed::derive(self.seed, &[0xb7, iteration as u64, role as u64]);
        let setup = BrSetup {
            env: &cfg.env,
            role,
            br: &cfg.br,
            opponent_cache: &cfg.cache,
            seed: br_seed,
        };
        let mut cache = QCache::new(cfg.cache.clone(), seed::derive(br_seed, &[0xcc]));
        let meta = match role {
            Role::Defender => &mut self.defender_meta,
            Role::Attacker => &mut self.attacker_meta,
        };
        let (policy, stats) = train_best_response(&setup, &mixture, meta, &mut cache, |_| {})?;
        let strategy = Arc::new(Strategy::Learned {
            policy,
            meta: meta.snapshot(),
        });
        match role {
            Role::Defender => self.defenders.push(strategy),
            Role::Attacker => self.attackers.push(strategy),
        }
        Ok(OracleStats {
            steps: stats.steps,
            critic_evals: stats.critic_evals,
            cache: stats.cache,
        })
    }
}

/// Double Oracle with learned best responses on the configured environment.
pub fn run_double_oracle(
    config: &RunConfig,
    seed: u64,
    on_iteration: impl FnMut(&IterationRecord),
) -> Result<(RestrictedGame, DoOutcome), GameError> {
    let mut oracle = SimulationOracle::new(config, seed);
    let outcome = double_oracle(&mut oracle, &config.r#do, config.env.device_count, on_iteration)?;
    let game = RestrictedGame {
        defender_policies: oracle.defenders,
        attacker_policies: oracle.attackers,
        payoff: outcome.payoff.clone(),
        equilibrium: outcome.equilibrium.clone(),
    };
    Ok((game, outcome))
}
