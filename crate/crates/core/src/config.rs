//! Run configuration file: a TOML document whose tables mirror the library
//! configs. Unknown keys are rejected.
//!
//! ```toml
//! [data]
//! input_dim = 16
//! separation = 4.0
//!
//! [split]
//! base_classes = 12
//!
//! [train]
//! gamma = 0.01
//! strategy = "spl"
//!
//! [experiment]
//! seeds = [0, 1, 2]
//! strategies = ["prototype", "finetune_ce", "spl"]
//!
//! [output]
//! dir = "results"
//! format = "text"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::TableFormat;
use crate::protocol::{Strategy, TrainConfig};

/// The γ and α values swept by default.
pub const DEFAULT_GRID: [f64; 5] = [0.0, 1e-4, 1e-3, 0.01, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Each seed drives data generation, the session split and training.
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    /// Also run the cross-entropy + prototype baseline and report
    /// final-session improvements against it.
    pub baseline: bool,
    pub gamma_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            strategies: Strategy::ALL.to_vec(),
            baseline: true,
            gamma_grid: DEFAULT_GRID.to_vec(),
            alpha_grid: DEFAULT_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: TableFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("results"),
            format: TableFormat::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub output: OutputConfig,
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub out: Option<PathBuf>,
    pub format: Option<TableFormat>,
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config(format!(
            "experiment.{name} must not be empty"
        )));
    }
    if let Some(v) = grid.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Config(format!(
            "experiment.{name} entries must be finite and >= 0, got {v}"
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.split.validate()?;
        self.train.validate()?;
        let needed = self.split.total_classes();
        if needed > self.data.n_classes {
            return Err(Error::Config(format!(
                "split needs {needed} classes but data.n_classes is {}",
                self.data.n_classes
            )));
        }
        if self.split.n_sessions > 0 && self.split.k_shot > self.data.train_per_class {
            return Err(Error::Config(format!(
                "split.k_shot = {} exceeds data.train_per_class = {}",
                self.split.k_shot, self.data.train_per_class
            )));
        }
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        if e.strategies.is_empty() {
            return Err(Error::Config(
                "experiment.strategies must not be empty".into(),
            ));
        }
        check_grid("gamma_grid", &e.gamma_grid)?;
        check_grid("alpha_grid", &e.alpha_grid)
    }

    /// Applies overrides and re-validates.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.experiment.seeds = vec![seed];
        }
        if let Some(s) = o.strategy {
            self.train.strategy = s;
            self.experiment.strategies = vec![s];
        }
        if let Some(g) = o.gamma {
            self.train.gamma = g;
        }
        if let Some(a) = o.alpha {
            self.train.alpha = a;
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
        if let Some(f) = o.format {
            self.output.format = f;
        }
        self.validate()
    }

    pub fn synthetic_for(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig { seed, ..self.data }
    }

    pub fn split_for(&self, seed: u64) -> SplitConfig {
        SplitConfig { seed, ..self.split }
    }

    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = RunConfig::from_toml("[data]\nseed = 3\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn field_level_validation() {
        for (text, needle) in [
            ("[train]\nlearning_rate = 0.0\n", "learning_rate"),
            ("[data]\nn_classes = 10\n", "n_classes"),
            ("[experiment]\nseeds = []\n", "seeds"),
            ("[experiment]\nalpha_grid = [-1.0]\n", "alpha_grid"),
            ("[train]\nstrategy = \"bogus\"\n", "bogus"),
        ] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}");
            assert!(err.to_string().contains(needle), "{text}: {err}");
        }
    }

    #[test]
    fn overrides_replace_values() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(7),
            strategy: Some(Strategy::Prototype),
            gamma: Some(0.0),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.experiment.seeds, vec![7]);
        assert_eq!(cfg.experiment.strategies, vec![Strategy::Prototype]);
        assert_eq!(cfg.train_for(7).seed, 7);
        assert!(cfg
            .apply(&Overrides {
                alpha: Some(f64::NAN),
                ..Overrides::default()
            })
            .is_err());
    }
}
