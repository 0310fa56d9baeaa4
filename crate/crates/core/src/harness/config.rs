use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::{FactOptions, ValueOptions};
use crate::solvers::Method;
use crate::toymodel::ModelConfig;

/// A single edit layer (`"3"`) or an inclusive contiguous range (`"1-3"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub first: usize,
    pub last: usize,
}

impl LayerSpec {
    pub fn single(layer: usize) -> Self {
        Self {
            first: layer,
            last: layer,
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        (self.first..=self.last).collect()
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.first == self.last {
            write!(f, "{}", self.first)
        } else {
            write!(f, "{}-{}", self.first, self.last)
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer spec {s:?}")))
        };
        let spec = match s.split_once('-') {
            Some((a, b)) => Self {
                first: parse(a)?,
                last: parse(b)?,
            },
            None => Self::single(parse(s)?),
        };
        if spec.first > spec.last {
            return Err(Error::Config(format!("layer range {s:?} is descending")));
        }
        Ok(spec)
    }
}

impl Serialize for LayerSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub model: ModelConfig,
    /// Optional weight file replacing the model's initial layers.
    pub weights: Option<PathBuf>,
    pub batch_sizes: Vec<usize>,
    /// Per-size batch counts; sizes not listed use `default_num_batches`.
    pub num_batches: BTreeMap<usize, usize>,
    pub default_num_batches: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub lambda_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    /// Batch size used by the hyperparameter sweep.
    pub hparam_batch_size: usize,
    pub layers: LayerSpec,
    pub rome_residual_fraction: bool,
    pub condition_warn_threshold: f64,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub facts: FactOptions,
    pub values: ValueOptions,
    /// Size of the preserved key set `K0` at every edit layer.
    pub preserved_keys: usize,
    /// How many of the preserved contexts double as neighborhood facts.
    pub neighborhood: usize,
    /// Held-out contexts for the drift measurement.
    pub holdout: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Emmet, Method::Memit],
            model: ModelConfig::default(),
            weights: None,
            batch_sizes: vec![4, 16, 64, 256],
            num_batches: BTreeMap::new(),
            default_num_batches: 3,
            lambda: 0.1,
            alpha: 0.1,
            lambda_grid: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            alpha_grid: vec![0.0, 0.01, 0.1, 1.0, 10.0],
            hparam_batch_size: 16,
            layers: LayerSpec::single(2),
            rome_residual_fraction: false,
            condition_warn_threshold: 1e8,
            out: None,
            seed: 0,
            facts: FactOptions::default(),
            values: ValueOptions::default(),
            preserved_keys: 256,
            neighborhood: 64,
            holdout: 64,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn batches_for(&self, size: usize) -> usize {
        self.num_batches.get(&size).copied().unwrap_or(self.default_num_batches)
    }

    /// Largest batch EMMET can take at the given alpha; `None` when unbounded.
    pub fn emmet_cap(&self, alpha: f64) -> Option<usize> {
        (alpha == 0.0).then_some(self.model.d_k)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "batch sizes must be >= 1, got {:?}",
                self.batch_sizes
            )));
        }
        if self.hparam_batch_size == 0 {
            return Err(Error::Config("hparam_batch_size must be >= 1".into()));
        }
        if self.default_num_batches == 0 || self.num_batches.values().any(|&n| n == 0) {
            return Err(Error::Config("num_batches must be >= 1 per size".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite())
            || self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite()))
        {
            return Err(Error::Config("lambda values must be finite and > 0".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite())
            || self.alpha_grid.iter().any(|&a| !(a >= 0.0 && a.is_finite()))
        {
            return Err(Error::Config("alpha values must be finite and >= 0".into()));
        }
        if self.layers.last >= self.model.layers {
            return Err(Error::Config(format!(
                "edit layers {} outside a {}-layer model",
                self.layers, self.model.layers
            )));
        }
        if self.preserved_keys == 0 || self.holdout == 0 {
            return Err(Error::Config("preserved_keys and holdout must be >= 1".into()));
        }
        if self.neighborhood == 0 || self.neighborhood > self.preserved_keys {
            return Err(Error::Config(format!(
                "neighborhood must be in 1..={}, got {}",
                self.preserved_keys, self.neighborhood
            )));
        }
        if self.facts.paraphrases == 0 {
            return Err(Error::Config("at least one paraphrase per fact is required".into()));
        }
        if self.facts.keys.prefix_count == 0 {
            return Err(Error::Config("prefix_count must be >= 1".into()));
        }
        if self.values.steps == 0 || !(self.values.step_size > 0.0) {
            return Err(Error::Config(
                "value optimization needs steps >= 1 and step_size > 0".into(),
            ));
        }
        Ok(())
    }

    /// Validation for a single `edit` run of `method` at `batch_size`.
    pub fn validate_edit(&self, method: Method, batch_size: usize) -> Result<()> {
        self.validate()?;
        if let Some(cap) = self.emmet_cap(self.alpha).filter(|_| method == Method::Emmet) {
            if batch_size > cap {
                return Err(Error::Config(format!(
                    "EMMET with alpha = 0 needs batch size <= d_k = {cap}, got {batch_size}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_spec_parsing() {
        assert_eq!("3".parse::<LayerSpec>().unwrap(), LayerSpec::single(3));
        assert_eq!("1-3".parse::<LayerSpec>().unwrap().layers(), vec![1, 2, 3]);
        assert!("3-1".parse::<LayerSpec>().is_err());
        assert!("x".parse::<LayerSpec>().is_err());
        assert_eq!(LayerSpec { first: 1, last: 4 }.to_string(), "1-4");
    }

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert!(c.alpha_grid.contains(&0.1));
        let span = c.lambda_grid.iter().cloned().fold(f64::MIN, f64::max)
            / c.lambda_grid.iter().cloned().fold(f64::MAX, f64::min);
        assert!(span >= 1e3);
        assert!(c.preserved_keys >= 4 * c.model.d_k);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seed": 9, "layers": "1-2", "methods": ["rome"]}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.layers.layers(), vec![1, 2]);
        assert_eq!(c.model, ModelConfig::default());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 9}"#).is_err());
    }

    #[test]
    fn validation_failures() {
        let bad = [
            ExperimentConfig {
                batch_sizes: vec![0],
                ..Default::default()
            },
            ExperimentConfig {
                default_num_batches: 0,
                ..Default::default()
            },
            ExperimentConfig {
                lambda: 0.0,
                ..Default::default()
            },
            ExperimentConfig {
                layers: LayerSpec::single(6),
                ..Default::default()
            },
            ExperimentConfig {
                neighborhood: 1000,
                ..Default::default()
            },
            ExperimentConfig {
                methods: vec![],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let c = ExperimentConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(c.validate_edit(Method::Emmet, 65).is_err());
        assert!(c.validate_edit(Method::Emmet, 64).is_ok());
        assert!(c.validate_edit(Method::Memit, 65).is_ok());
        assert!(ExperimentConfig::default().validate_edit(Method::Emmet, 1000).is_ok());
    }
}
