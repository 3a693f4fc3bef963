//! Experiment configuration files.
//!
//! TOML with one table per concern. Every table is optional and falls back to
//! the defaults below; unknown keys are rejected.
//!
//! ```toml
//! version = 1
//!
//! [data]
//! train_subset = 10000
//! test_subset = 2000
//!
//! [precision]
//! prop = "dynamic:10"
//! update = "dynamic:12"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{FormatSpec, Schedule, TrainConfig};
use crate::scaling::ScalingPolicy;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable naming the directory that holds the MNIST files.
pub const DATA_DIR_ENV: &str = "LPMUL_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Pixels divided by 255.
    Scale,
    /// Scaled pixels, then global contrast normalization.
    Gcn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory with the four MNIST IDX files. When unset, the
    /// `LPMUL_DATA_DIR` environment variable, then `data/mnist`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Examples drawn from the training split; 0 keeps all of them.
    pub train_subset: usize,
    pub test_subset: usize,
    pub subset_seed: u64,
    pub normalization: Normalization,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            train_subset: 10000,
            test_subset: 2000,
            subset_seed: 1,
            normalization: Normalization::Scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden_units: Vec<usize>,
    pub pieces: Vec<usize>,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    /// Column-norm limit; omit to disable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_epochs: f64,
    pub momentum_start: f64,
    pub momentum_max: f64,
    pub momentum_saturate_epoch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecisionSection {
    pub prop: FormatSpec,
    pub update: FormatSpec,
    /// Starting exponent of every dynamic group when calibration is off.
    pub initial_exponent: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSection {
    pub overflow_rate_max: f64,
    pub update_period: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// Exact-arithmetic epochs used to pick initial exponents; 0 disables
    /// calibration. Only used with dynamic formats.
    pub epochs: usize,
    /// Restart from freshly initialized parameters after calibrating. When
    /// off, training continues from the calibration pass's parameters.
    pub reinitialize: bool,
    /// Exponent file to load instead of calibrating.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            epochs: 1,
            reinitialize: true,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub precision: PrecisionSection,
    #[serde(default)]
    pub scaling: ScalingSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        NetworkSection {
            hidden_units: t.hidden_units,
            pieces: t.pieces,
            input_dropout: t.input_dropout,
            hidden_dropout: t.hidden_dropout,
            max_norm: t.max_norm,
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = TrainConfig::default().schedule;
        ScheduleSection {
            lr_start: s.lr_start,
            lr_end: s.lr_end,
            lr_epochs: s.lr_epochs,
            momentum_start: s.momentum_start,
            momentum_max: s.momentum_max,
            momentum_saturate_epoch: s.momentum_saturate_epoch,
        }
    }
}

impl Default for PrecisionSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        PrecisionSection {
            prop: t.prop_format,
            update: t.update_format,
            initial_exponent: t.initial_exponent,
        }
    }
}

impl Default for ScalingSection {
    fn default() -> Self {
        let p = ScalingPolicy::default();
        ScalingSection {
            overflow_rate_max: p.r_max,
            update_period: p.update_period,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            data: DataSection::default(),
            network: NetworkSection::default(),
            schedule: ScheduleSection::default(),
            precision: PrecisionSection::default(),
            scaling: ScalingSection::default(),
            calibration: CalibrationSection::default(),
            train: TrainSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a configuration. Errors carry the line and
    /// column of the offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let n = &self.network;
        let s = &self.schedule;
        TrainConfig {
            hidden_units: n.hidden_units.clone(),
            pieces: n.pieces.clone(),
            input_dropout: n.input_dropout,
            hidden_dropout: n.hidden_dropout,
            schedule: Schedule {
                lr_start: s.lr_start,
                lr_end: s.lr_end,
                lr_epochs: s.lr_epochs,
                momentum_start: s.momentum_start,
                momentum_max: s.momentum_max,
                momentum_saturate_epoch: s.momentum_saturate_epoch,
            },
            max_norm: n.max_norm,
            prop_format: self.precision.prop,
            update_format: self.precision.update,
            policy: ScalingPolicy {
                r_max: self.scaling.overflow_rate_max,
                update_period: self.scaling.update_period,
            },
            initial_exponent: self.precision.initial_exponent,
            seed: self.train.seed,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
        }
    }

    /// Dataset directory: the configured root, else `LPMUL_DATA_DIR`, else
    /// `data/mnist`.
    pub fn data_root(&self) -> PathBuf {
        if let Some(root) = &self.data.root {
            return root.clone();
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from("data/mnist"),
        }
    }

    /// Same experiment with exact arithmetic in both stages.
    pub fn exact_baseline(&self) -> ExperimentConfig {
        let mut out = self.clone();
        out.precision.prop = FormatSpec::Static(crate::formats::QuantFormat::ExactHost);
        out.precision.update = out.precision.prop;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = ExperimentConfig::parse("version = 1\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train_config(), TrainConfig::default());
    }

    #[test]
    fn roundtrip_is_fixed_point() {
        let text = r#"
version = 1
[data]
root = "/tmp/mnist"
train_subset = 100
normalization = "gcn"
[network]
hidden_units = [10, 10]
pieces = [2, 3]
[precision]
prop = "dynamic:10"
update = "dynamic:12"
[calibration]
epochs = 2
"#;
        let a = ExperimentConfig::parse(text).unwrap();
        let b = ExperimentConfig::parse(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_toml(), b.to_toml());
        assert_eq!(b.network.pieces, vec![2, 3]);
        assert_eq!(b.data.normalization, Normalization::Gcn);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ExperimentConfig::parse("version = 1\n[train]\nepochs = 2\nepoch = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch"), "{msg}");
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn version_is_required_and_checked() {
        assert!(ExperimentConfig::parse("[train]\nepochs = 2\n").is_err());
        assert!(ExperimentConfig::parse("version = 2\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::parse("version = 1\n[network]\nhidden_dropout = 1.0\n").is_err());
        assert!(ExperimentConfig::parse("version = 1\n[precision]\nprop = \"fixed:1@0\"\n").is_err());
        assert!(ExperimentConfig::parse("version = 1\n[precision]\nprop = \"dynamic:10\"\n").is_err());
        assert!(ExperimentConfig::parse("version = 1\n[scaling]\nupdate_period = 0\n").is_err());
    }
}
