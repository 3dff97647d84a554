//! Sweep configuration: a TOML file with documented keys, resolved to
//! explicit values (defaults filled in) before a sweep starts. Every
//! output directory receives a frozen copy of the resolved config.

use ipm_core::model::BuiltinOptions;
use ipm_core::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Problem-family options mirrored from the model layer.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProblemOptions {
    /// Coupling strength of the double-well circulation drift.
    pub a: Option<f64>,
    /// Seed for the sampled orthogonal conjugation matrix (16-D family).
    pub q_seed: Option<u64>,
    pub cutoff_inner: Option<f64>,
    pub cutoff_outer: Option<f64>,
}

impl ProblemOptions {
    pub fn to_builtin(&self) -> BuiltinOptions {
        BuiltinOptions {
            a: self.a,
            q: None,
            q_seed: self.q_seed,
            cutoff_inner: self.cutoff_inner,
            cutoff_outer: self.cutoff_outer,
        }
    }
}

/// Uniform tilt grid: `count` points from `min` to `max` inclusive.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AlphaGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self {
            min: -0.1,
            max: 1.1,
            count: 32,
        }
    }
}

impl AlphaGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        let h = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count).map(|j| self.min + j as f64 * h).collect()
    }
}

fn default_epsilon_list() -> Vec<f64> {
    vec![0.1, 0.01, 0.001]
}

fn default_replicates() -> usize {
    1
}

fn default_workers() -> usize {
    1
}

fn default_bins() -> (usize, usize) {
    (100, 100)
}

/// Full description of an (epsilon, alpha) sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub problem: String,
    #[serde(default)]
    pub options: ProblemOptions,
    /// Noise levels, run in listed order.
    #[serde(default = "default_epsilon_list")]
    pub epsilon_list: Vec<f64>,
    #[serde(default)]
    pub alpha_grid: AlphaGrid,
    pub n_particles: usize,
    pub dt: f64,
    pub horizon: f64,
    /// Burn-in for fresh starts; defaults to half the horizon.
    pub burn_in: Option<f64>,
    /// Chain each noise level's initial ensembles from the previous
    /// level's final ensembles (same alpha, same replicate).
    #[serde(default)]
    pub warm_start: bool,
    /// Independent seeds per (epsilon, alpha) cell.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Threads per epsilon stage; results are seed-keyed, so the worker
    /// count never changes the numbers.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Alpha values whose final ensembles get a 2-D marginal histogram.
    #[serde(default)]
    pub histogram_alphas: Vec<f64>,
    #[serde(default = "default_bins")]
    pub histogram_bins: (usize, usize),
}

impl SweepConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SweepConfig = toml::from_str(&text).map_err(|e| CoreError::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon_list.is_empty() {
            return Err(CoreError::InvalidConfig("epsilon_list is empty".into()));
        }
        if self.epsilon_list.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(CoreError::InvalidConfig(
                "epsilon_list entries must be positive reals".into(),
            ));
        }
        if self.warm_start && !self.epsilon_list.windows(2).all(|w| w[0] > w[1]) {
            return Err(CoreError::InvalidConfig(
                "warm_start requires a strictly descending epsilon_list".into(),
            ));
        }
        if self.alpha_grid.count == 0 {
            return Err(CoreError::InvalidConfig("alpha grid is empty".into()));
        }
        if self.alpha_grid.count > 1 && !(self.alpha_grid.max > self.alpha_grid.min) {
            return Err(CoreError::InvalidConfig(
                "alpha grid needs max > min".into(),
            ));
        }
        if self.replicates == 0 {
            return Err(CoreError::InvalidConfig("replicates must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(CoreError::InvalidConfig("workers must be >= 1".into()));
        }
        if self.histogram_bins.0 == 0 || self.histogram_bins.1 == 0 {
            return Err(CoreError::InvalidConfig(
                "histogram_bins must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Burn-in used when a run starts from the standard Gaussian.
    pub fn fresh_burn_in(&self) -> f64 {
        self.burn_in.unwrap_or(self.horizon / 2.0)
    }

    /// Reduced burn-in used when a run is warm-started from a previous
    /// noise level's final ensemble.
    pub fn warm_burn_in(&self) -> f64 {
        self.horizon / 8.0
    }

    pub fn write_frozen(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| {
            CoreError::InvalidConfig(format!("cannot serialize resolved config: {e}"))
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_grid() {
        let g = AlphaGrid::default();
        let v = g.values();
        assert_eq!(v.len(), 32);
        assert!((v[0] + 0.1).abs() < 1e-12);
        assert!((v[31] - 1.1).abs() < 1e-12);
        // alpha_j = -1/10 + (j/31)(12/10)
        assert!((v[10] - (-0.1 + 10.0 / 31.0 * 1.2)).abs() < 1e-12);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let text = r#"
            problem = "le1"
            n_particles = 100
            dt = 0.0078125
            horizon = 1.0
            output_dir = "out"
            epsilon_list = [0.1, 0.01]
            warm_start = true
        "#;
        let cfg: SweepConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.alpha_grid, AlphaGrid::default());
        assert_eq!(cfg.replicates, 1);
        assert!((cfg.fresh_burn_in() - 0.5).abs() < 1e-12);
        assert!((cfg.warm_burn_in() - 0.125).abs() < 1e-12);

        let mut bad = cfg.clone();
        bad.epsilon_list = vec![0.01, 0.1];
        assert!(bad.validate().is_err()); // ascending with warm start

        let mut bad = cfg.clone();
        bad.epsilon_list.clear();
        assert!(bad.validate().is_err());

        let round = toml::to_string_pretty(&cfg).unwrap();
        let back: SweepConfig = toml::from_str(&round).unwrap();
        assert_eq!(back.epsilon_list, cfg.epsilon_list);
        assert_eq!(back.alpha_grid, cfg.alpha_grid);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
            problem = "le1"
            n_particles = 100
            dt = 0.125
            horizon = 1.0
            output_dir = "out"
            typo_key = 3
        "#;
        assert!(toml::from_str::<SweepConfig>(text).is_err());
    }
}
