//! Experiment commands behind the `metadoar` binary. Each command writes CSV
//! files under its output directory along with the resolved `config.toml`.
//!
//! Every CSV except `timing.csv` and the timing columns of the sweep files is
//! a pure function of the config and seed.

use anyhow::{bail, Context, Result};
use metadoar_core::br::{BrConfig, Policy, Strategy};
use metadoar_core::game::{run_double_oracle, DoOutcome, IterationRecord, RestrictedGame};
use metadoar_core::meta::{compute_k, MetaController};
use metadoar_core::qcache::QCache;
use metadoar_core::theory::{run_campaign, InstanceReport};
use metadoar_core::{seed, EnvConfig, NetworkState, Role, RunConfig};
use serde::Serialize;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Row-at-a-time CSV writer that flushes after every record, so an
/// interrupted run leaves a parseable prefix.
pub struct CsvLog {
    inner: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        let inner = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { inner })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn prepare_dir(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(())
}

/// Peak resident set size in KiB (`VmHWM`), or 0 where `/proc` is missing.
/// A process-wide proxy, not a per-run measurement.
pub fn peak_memory_kib() -> u64 {
    fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("VmHWM:"))
                .and_then(|l| l.split_whitespace().nth(1)?.parse().ok())
        })
        .unwrap_or(0)
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn pool(parallel: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build()?)
}

/// Seed of repetition `rep`.
pub fn rep_seed(base: u64, rep: usize) -> u64 {
    seed::derive(base, &[0x5eed, rep as u64])
}

#[derive(Clone, Debug, Serialize)]
struct TimingRow {
    iteration: usize,
    wall_ms: f64,
    payoff_ms: f64,
    peak_memory_kib: u64,
}

/// Outcome of one Double Oracle run.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub rep: usize,
    pub seed: u64,
    pub value: f64,
    pub value_per_device: f64,
    pub iterations: usize,
    pub converged: bool,
    pub defender_policies: usize,
    pub attacker_policies: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_forced_reevals: u64,
    pub cache_invalidations: u64,
    pub cache_flushes: u64,
    #[serde(skip)]
    pub wall_ms: f64,
    #[serde(skip)]
    pub payoff_ms: f64,
    #[serde(skip)]
    pub log: Vec<IterationRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub devices: usize,
    pub runs: Vec<RunSummary>,
    pub value_mean: f64,
    pub value_stderr: f64,
    pub value_per_device_mean: f64,
    pub value_per_device_stderr: f64,
    pub wall_ms: f64,
    pub peak_memory_kib: u64,
}

fn write_checkpoints(dir: &Path, game: &RestrictedGame) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (role, list) in [("defender", &game.defender_policies), ("attacker", &game.attacker_policies)] {
        for (i, s) in list.iter().enumerate() {
            if let Strategy::Learned { policy, meta } = s.as_ref() {
                policy.save(&mut BufWriter::new(File::create(dir.join(format!("{role}_{i}.policy")))?))?;
                meta.save(&mut BufWriter::new(File::create(dir.join(format!("{role}_{i}.meta")))?))?;
            }
        }
    }
    Ok(())
}

fn solve_once(config: &RunConfig, rep: usize, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    let seed = rep_seed(config.seed, rep);
    let start = Instant::now();
    let mut iterations = CsvLog::create(&dir.join("iterations.csv"))?;
    let mut timing = CsvLog::create(&dir.join("timing.csv"))?;
    let mut write_err = None;
    let result = run_double_oracle(config, seed, |r| {
        let rows = iterations.write(r).and_then(|_| {
            timing.write(&TimingRow {
                iteration: r.iteration,
                wall_ms: r.wall_ms,
                payoff_ms: r.payoff_ms,
                peak_memory_kib: peak_memory_kib(),
            })
        });
        if let Err(e) = rows {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let (game, outcome): (RestrictedGame, DoOutcome) = result.with_context(|| format!("double oracle, repetition {rep}"))?;
    fs::write(
        dir.join("game.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "payoff": outcome.payoff,
            "equilibrium": outcome.equilibrium,
            "initial_value": outcome.initial_value,
        }))?,
    )?;
    write_checkpoints(&dir.join("policies"), &game)?;

    let total = |f: fn(&IterationRecord) -> u64| outcome.log.iter().map(f).sum::<u64>();
    Ok(RunSummary {
        rep,
        seed,
        value: outcome.equilibrium.value,
        value_per_device: outcome.equilibrium.value / config.env.device_count as f64,
        iterations: outcome.log.len(),
        converged: outcome.converged,
        defender_policies: game.defender_policies.len(),
        attacker_policies: game.attacker_policies.len(),
        cache_hits: total(|r| r.cache_hits),
        cache_misses: total(|r| r.cache_misses),
        cache_forced_reevals: total(|r| r.cache_forced_reevals),
        cache_invalidations: total(|r| r.cache_invalidations),
        cache_flushes: total(|r| r.cache_flushes),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        payoff_ms: outcome.log.iter().map(|r| r.payoff_ms).sum(),
        log: outcome.log,
    })
}

/// Double Oracle over `config.seeds` repetitions. Writes `runs.csv`,
/// `report.json` and one `rep_<i>/` directory per repetition.
pub fn cmd_solve(config: &RunConfig, out: &Path, parallel: usize) -> Result<SolveReport> {
    config.validate()?;
    prepare_dir(out, config)?;
    let start = Instant::now();
    let reps: Vec<usize> = (0..config.seeds).collect();
    let runs: Vec<Result<RunSummary>> = if parallel > 1 {
        use rayon::prelude::*;
        pool(parallel)?.install(|| {
            reps.par_iter()
                .map(|&r| solve_once(config, r, &out.join(format!("rep_{r}"))))
                .collect()
        })
    } else {
        reps.iter().map(|&r| solve_once(config, r, &out.join(format!("rep_{r}")))).collect()
    };
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut csv = CsvLog::create(&out.join("runs.csv"))?;
    for r in &runs {
        csv.write(r)?;
    }
    let values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    let (value_mean, value_stderr) = mean_stderr(&values);
    let m = config.env.device_count as f64;
    let report = SolveReport {
        devices: config.env.device_count,
        value_mean,
        value_stderr,
        value_per_device_mean: value_mean / m,
        value_per_device_stderr: value_stderr / m,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        peak_memory_kib: peak_memory_kib(),
        runs,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AblateParam {
    Alpha,
    Khop,
}

impl AblateParam {
    pub fn apply(self, config: &RunConfig, value: usize) -> RunConfig {
        let mut c = config.clone();
        match self {
            AblateParam::Alpha => c.meta.alpha = value,
            AblateParam::Khop => c.cache.khop_radius = value,
        }
        c
    }

    fn name(self) -> &'static str {
        match self {
            AblateParam::Alpha => "alpha",
            AblateParam::Khop => "khop",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: usize,
    pub utility_mean: f64,
    pub utility_stderr: f64,
    pub payoff_matrix_wall_ms: f64,
    pub peak_memory_proxy: u64,
    pub error: String,
}

/// One solve per value with a shared seed; failures become rows with an
/// error message and the sweep moves on. Utility is value per device.
pub fn cmd_ablate(config: &RunConfig, param: AblateParam, values: &[usize], out: &Path, parallel: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("ablate needs at least one value");
    }
    prepare_dir(out, config)?;
    let run = |v: usize| -> SweepRow {
        let cfg = param.apply(config, v);
        match cmd_solve(&cfg, &out.join(format!("{}_{v}", param.name())), 1) {
            Ok(r) => SweepRow {
                value: v,
                utility_mean: r.value_per_device_mean,
                utility_stderr: r.value_per_device_stderr,
                payoff_matrix_wall_ms: r.runs.iter().map(|x| x.payoff_ms).sum::<f64>() / r.runs.len() as f64,
                peak_memory_proxy: r.peak_memory_kib,
                error: String::new(),
            },
            Err(e) => SweepRow {
                value: v,
                utility_mean: f64::NAN,
                utility_stderr: f64::NAN,
                payoff_matrix_wall_ms: f64::NAN,
                peak_memory_proxy: peak_memory_kib(),
                error: format!("{e:#}"),
            },
        }
    };
    let mut csv = CsvLog::create(&out.join(format!("sweep_{}.csv", param.name())))?;
    let rows = if parallel > 1 {
        use rayon::prelude::*;
        let rows: Vec<SweepRow> = pool(parallel)?.install(|| values.par_iter().map(|&v| run(v)).collect());
        for r in &rows {
            csv.write(r)?;
        }
        rows
    } else {
        let mut rows = Vec::new();
        for &v in values {
            let r = run(v);
            csv.write(&r)?;
            rows.push(r);
        }
        rows
    };
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleRow {
    pub devices: usize,
    pub k: usize,
    pub greedy_k: usize,
    pub eval_bound: usize,
    pub decodes: usize,
    pub max_critic_evals: usize,
    pub mean_critic_evals: f64,
    pub decode_us_mean: f64,
    pub peak_memory_kib: u64,
    pub error: String,
}

/// Calls decoded per device count.
pub const SCALE_DECODES: usize = 200;

fn scale_one(config: &RunConfig, m: usize) -> Result<ScaleRow> {
    let env = EnvConfig {
        device_count: m,
        ..config.env.clone()
    };
    env.validate()?;
    let role = Role::Defender;
    let s = rep_seed(config.seed, 0);
    let br = BrConfig { ..config.br.clone() };
    let policy = Policy::new(role, &env, &br, seed::derive(s, &[m as u64, 1]));
    let mut meta = MetaController::new(role, &env, &config.meta, seed::derive(s, &[m as u64, 2]));
    let mut cache = QCache::new(config.cache.clone(), seed::derive(s, &[m as u64, 3]));
    let mut rng = seed::rng(seed::derive(s, &[m as u64, 4]));
    let k = if config.meta.enabled { compute_k(m, config.meta.alpha) } else { m };
    let bound = k * br.greedy_k.max(1);

    let mut state = NetworkState::reset_episode(&env, 0)?;
    let mut episode = 0;
    let (mut total_evals, mut max_evals, mut elapsed) = (0usize, 0usize, 0.0);
    for call in 0..SCALE_DECODES {
        if state.is_done() {
            episode += 1;
            state = NetworkState::reset_episode(&env, episode)?;
            meta.mark_all_dirty();
        }
        let t = Instant::now();
        let obs = state.observe(role);
        let allowed = meta.select(&state, &obs)?;
        let ctx = if cache.is_enabled() {
            let key = cache.state_key(&meta.key_embedding(&obs)?)?;
            Some(metadoar_core::br::CacheCtx {
                cache: &mut cache,
                state_key: key,
            })
        } else {
            None
        };
        let d = policy.act(&state, &obs, &allowed, ctx, false, &mut rng)?;
        elapsed += t.elapsed().as_secs_f64();
        if d.critic_evals > bound {
            bail!("decode {call} at M={m} used {} critic evaluations, bound {bound}", d.critic_evals);
        }
        total_evals += d.critic_evals;
        max_evals = max_evals.max(d.critic_evals);
        let out = state.step(&[], &d.atoms)?;
        let radius = cache.config().khop_radius;
        cache.invalidate_khop(out.changed.iter().copied(), &state.adjacency, radius);
        meta.mark_dirty(out.changed.iter().copied())?;
    }
    Ok(ScaleRow {
        devices: m,
        k,
        greedy_k: br.greedy_k,
        eval_bound: bound,
        decodes: SCALE_DECODES,
        max_critic_evals: max_evals,
        mean_critic_evals: total_evals as f64 / SCALE_DECODES as f64,
        decode_us_mean: elapsed * 1e6 / SCALE_DECODES as f64,
        peak_memory_kib: peak_memory_kib(),
        error: String::new(),
    })
}

/// Decode cost per device count. Fails if any decode exceeds `k * greedy_k`
/// critic evaluations; other per-M failures are recorded and skipped.
pub fn cmd_scale(config: &RunConfig, devices: &[usize], out: &Path) -> Result<Vec<ScaleRow>> {
    if devices.is_empty() {
        bail!("scale needs at least one device count");
    }
    prepare_dir(out, config)?;
    let mut csv = CsvLog::create(&out.join("scale.csv"))?;
    let mut rows = Vec::new();
    let mut violation = None;
    for &m in devices {
        let row = scale_one(config, m).unwrap_or_else(|e| {
            let msg = format!("{e:#}");
            if msg.contains("critic evaluations") {
                violation.get_or_insert(msg.clone());
            }
            ScaleRow {
                devices: m,
                k: compute_k(m.max(1), config.meta.alpha.max(1)),
                greedy_k: config.br.greedy_k,
                eval_bound: 0,
                decodes: 0,
                max_critic_evals: 0,
                mean_critic_evals: f64::NAN,
                decode_us_mean: f64::NAN,
                peak_memory_kib: peak_memory_kib(),
                error: msg,
            }
        });
        csv.write(&row)?;
        rows.push(row);
    }
    if let Some(v) = violation {
        bail!(v);
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct TheoryReport {
    pub instances: usize,
    pub theorem_violations: usize,
    pub lemma_violations: usize,
    pub min_slack: f64,
    pub wall_ms: f64,
    pub csv: PathBuf,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.theorem_violations == 0 && self.lemma_violations == 0
    }
}

/// Runs the bound-checking campaign. Violating instances are also dumped to
/// `witnesses.json`.
pub fn cmd_verify_theory(config: &RunConfig, out: &Path) -> Result<TheoryReport> {
    config.validate()?;
    prepare_dir(out, config)?;
    let start = Instant::now();
    let reports = run_campaign(&config.theory, config.seed)?;
    let path = out.join("theory.csv");
    let mut csv = CsvLog::create(&path)?;
    for r in &reports {
        csv.write(r)?;
    }
    let bad: Vec<&InstanceReport> = reports.iter().filter(|r| !r.holds || !r.policy_holds).collect();
    if !bad.is_empty() {
        fs::write(out.join("witnesses.json"), serde_json::to_string_pretty(&bad)?)?;
    }
    Ok(TheoryReport {
        instances: reports.len(),
        theorem_violations: reports.iter().filter(|r| !r.holds).count(),
        lemma_violations: reports.iter().filter(|r| !r.policy_holds).count(),
        min_slack: reports.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        csv: path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_standard_error() {
        assert_eq!(mean_stderr(&[3.0]), (3.0, 0.0));
        // Sample sd of {1, 3} is sqrt(2); se = sqrt(2)/sqrt(2) = 1.
        let (m, se) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }

    #[test]
    fn repetition_seeds_differ() {
        assert_ne!(rep_seed(0, 0), rep_seed(0, 1));
        assert_eq!(rep_seed(4, 2), rep_seed(4, 2));
    }

    #[test]
    fn peak_memory_is_reported_on_linux() {
        if Path::new("/proc/self/status").exists() {
            assert!(peak_memory_kib() > 0);
        }
    }

    #[test]
    fn csv_log_flushes_each_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let mut log = CsvLog::create(&path).unwrap();
        log.write(&SweepRow {
            value: 1,
            utility_mean: 0.5,
            utility_stderr: 0.0,
            payoff_matrix_wall_ms: 1.0,
            peak_memory_proxy: 2,
            error: String::new(),
        })
        .unwrap();
        // Still open, yet readable.
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        drop(log);
    }
}
