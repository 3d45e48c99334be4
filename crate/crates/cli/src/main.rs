use anyhow::Result;
use clap::{Parser, Subcommand};
use metadoar_cli::{cmd_ablate, cmd_scale, cmd_solve, cmd_verify_theory, AblateParam};
use metadoar_core::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "metadoar", version, about = "Double Oracle solving for network security games")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Independent runs to execute concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Double Oracle and report the equilibrium value.
    Solve,
    /// Sweep one hyperparameter, one solve per value.
    Ablate {
        #[arg(long, value_enum)]
        param: AblateParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Measure decode cost as the network grows.
    Scale {
        #[arg(long, value_delimiter = ',', default_values_t = [10, 100, 1000])]
        devices: Vec<usize>,
    },
    /// Check the pruning value-loss bounds on random tabular MDPs.
    VerifyTheory {
        /// Keep every action, so every bound is zero.
        #[arg(long)]
        unpruned: bool,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = cli.out {
        config.output_dir = o;
    }
    let out = config.output_dir.clone();
    match cli.command {
        Command::Solve => {
            let r = cmd_solve(&config, &out, cli.parallel)?;
            for run in &r.runs {
                println!(
                    "rep {}: value {:.4} ({:.4} per device), {} iterations, converged {}",
                    run.rep, run.value, run.value_per_device, run.iterations, run.converged
                );
            }
            println!(
                "value per device {:.4} +- {:.4} over {} runs, {:.1} s",
                r.value_per_device_mean,
                r.value_per_device_stderr,
                r.runs.len(),
                r.wall_ms / 1e3
            );
        }
        Command::Ablate { param, values } => {
            for row in cmd_ablate(&config, param, &values, &out, cli.parallel)? {
                if row.error.is_empty() {
                    println!("{}: {:.4} +- {:.4}", row.value, row.utility_mean, row.utility_stderr);
                } else {
                    println!("{}: failed: {}", row.value, row.error);
                }
            }
        }
        Command::Scale { devices } => {
            for row in cmd_scale(&config, &devices, &out)? {
                println!(
                    "M={}: k={} evals max {} (bound {}), {:.1} us per decode",
                    row.devices, row.k, row.max_critic_evals, row.eval_bound, row.decode_us_mean
                );
            }
        }
        Command::VerifyTheory { unpruned } => {
            config.theory.unpruned |= unpruned;
            let r = cmd_verify_theory(&config, &out)?;
            println!(
                "{} instances, {} theorem and {} lemma violations, min slack {:.3e}",
                r.instances, r.theorem_violations, r.lemma_violations, r.min_slack
            );
            return Ok(r.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
