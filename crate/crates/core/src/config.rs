//! Run configuration: one TOML document with a section per subsystem. Every
//! omitted key takes its default.

use crate::br::BrConfig;
use crate::env::{EnvConfig, EnvError};
use crate::game::DoConfig;
use crate::meta::MetaConfig;
use crate::qcache::CacheConfig;
use crate::theory::TheoryConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl From<EnvError> for ConfigError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::InvalidConfig { field, reason } => ConfigError::Invalid {
                field: format!("env.{field}"),
                reason,
            },
            other => ConfigError::Parse(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Independent repetitions for error bars.
    pub seeds: usize,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub br: BrConfig,
    pub meta: MetaConfig,
    pub cache: CacheConfig,
    #[serde(rename = "do")]
    pub r#do: DoConfig,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 2,
            output_dir: PathBuf::from("out"),
            env: EnvConfig::default(),
            br: BrConfig::default(),
            meta: MetaConfig::default(),
            cache: CacheConfig::default(),
            r#do: DoConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

fn invalid(field: &str, reason: &str) -> Result<(), ConfigError> {
    Err(ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.to_string(),
    })
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        invalid(field, "must be a positive finite number")
    }
}

fn unit(field: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        invalid(field, "must lie in [0, 1]")
    }
}

fn nonzero(field: &str, v: usize) -> Result<(), ConfigError> {
    if v > 0 {
        Ok(())
    } else {
        invalid(field, "must be a positive integer")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate()?;
        nonzero("seeds", self.seeds)?;

        let br = &self.br;
        positive("br.actor_lr", br.actor_lr)?;
        positive("br.critic_lr", br.critic_lr)?;
        unit("br.tau", br.tau)?;
        positive("br.max_grad_norm", br.max_grad_norm)?;
        nonzero("br.replay_capacity", br.replay_capacity)?;
        nonzero("br.batch_size", br.batch_size)?;
        nonzero("br.greedy_k", br.greedy_k)?;
        if !(br.greedy_tau >= 0.0) {
            invalid("br.greedy_tau", "must be non-negative")?;
        }
        if !(br.noise_std >= 0.0) {
            invalid("br.noise_std", "must be non-negative")?;
        }
        positive("br.reward_scale", br.reward_scale)?;
        if br.hidden == Some(0) {
            invalid("br.hidden", "must be a positive integer")?;
        }

        let meta = &self.meta;
        nonzero("meta.alpha", meta.alpha)?;
        nonzero("meta.embed_dim", meta.embed_dim)?;
        nonzero("meta.id_dim", meta.id_dim)?;
        nonzero("meta.hidden", meta.hidden)?;
        positive("meta.learning_rate", meta.learning_rate)?;
        nonzero("meta.replay_capacity", meta.replay_capacity)?;
        nonzero("meta.batch_size", meta.batch_size)?;
        unit("meta.target_tau", meta.target_tau)?;
        positive("meta.max_grad_norm", meta.max_grad_norm)?;

        let cache = &self.cache;
        nonzero("cache.capacity", cache.capacity)?;
        unit("cache.reeval_prob", cache.reeval_prob)?;
        if cache.quantization_decimals > 15 {
            invalid("cache.quantization_decimals", "must be at most 15")?;
        }

        let d = &self.r#do;
        nonzero("do.max_iterations", d.max_iterations)?;
        nonzero("do.episodes_per_cell", d.episodes_per_cell)?;
        if d.min_iterations > d.max_iterations {
            invalid("do.min_iterations", "must not exceed do.max_iterations")?;
        }
        if !(d.eps_stop_rel >= 0.0 && d.eps_stop_abs >= 0.0) {
            invalid("do.eps_stop_rel", "stopping tolerances must be non-negative")?;
        }

        let t = &self.theory;
        nonzero("theory.max_states", t.max_states)?;
        nonzero("theory.max_actions", t.max_actions)?;
        positive("theory.tol", t.tol)?;
        if t.gammas.is_empty() || t.gammas.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            invalid("theory.gammas", "must be a non-empty list of values in (0, 1)")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.br.actor_lr, 1e-3);
        assert_eq!(cfg.br.critic_lr, 1e-2);
        assert_eq!(cfg.env.gamma, 0.99);
        assert_eq!((cfg.r#do.min_iterations, cfg.r#do.max_iterations), (10, 15));
        assert_eq!(cfg.meta.alpha, 1);
        assert_eq!(cfg.cache.khop_radius, 1);
        assert_eq!(cfg.cache.capacity, 50_000);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[env]\ndevice_count = 20\n[do]\nmax_iterations = 3\nmin_iterations = 1\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.env.device_count, 20);
        assert_eq!(cfg.r#do.max_iterations, 3);
        assert_eq!(cfg.br, BrConfig::default());
    }

    #[test]
    fn rejects_gamma_outside_unit_interval() {
        let err = RunConfig::from_toml("[env]\ngamma = 1.5\n").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { field, .. } if field == "env.gamma"), "{err}");
    }

    #[test]
    fn rejects_zero_alpha() {
        let err = RunConfig::from_toml("[meta]\nalpha = 0\n").unwrap_err();
        assert!(err.to_string().contains("meta.alpha"), "{err}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[br]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = RunConfig::from_toml("seed = 1\n\n[env\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.env.device_count = 17;
        cfg.br.hidden = Some(24);
        cfg.theory.gammas = vec![0.5];
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn load_reports_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunConfig::load(&dir.path().join("nope.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n").unwrap();
        assert_eq!(RunConfig::load(&path).unwrap().seed, 4);
    }
}
