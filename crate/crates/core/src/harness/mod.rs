//! Experiment plumbing: config files, single runs, bit-width sweeps and the
//! multiplier cost model.

mod config;
mod cost;

pub use config::{
    CalibrationSection, DataSection, ExperimentConfig, NetworkSection, Normalization, OutputSection,
    PrecisionSection, ScalingSection, ScheduleSection, TrainSection, CONFIG_VERSION, DATA_DIR_ENV,
};
pub use cost::{cost_coefficients, mac_cost, CostQuery, MacCost, MAC_TABLE};

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::info;

use crate::data::{global_contrast_normalize, load_mnist, subset, Dataset};
use crate::error::{Error, Result};
use crate::formats::QuantFormat;
use crate::network::{
    calibrate, calibrate_network, save_checkpoint, train, Checkpoint, FormatSpec, Network, Split, TrainingLog,
};
use crate::scaling::{load_calibration, save_calibration, GroupId};
use crate::tensor::Matrix;

const GCN_EPS: f64 = 1e-8;

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub format: String,
    pub prop_bits: Option<u32>,
    pub update_bits: Option<u32>,
    pub test_error: f64,
}

impl SummaryRow {
    pub const HEADER: &'static str = "format,prop_bits,update_bits,test_error";

    /// Bit widths are left empty for exact arithmetic.
    pub fn to_csv(&self) -> String {
        let bits = |b: Option<u32>| b.map(|b| b.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{}",
            self.format,
            bits(self.prop_bits),
            bits(self.update_bits),
            self.test_error
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: TrainingLog,
    pub summary: SummaryRow,
    /// Exponents the run started from, when dynamic.
    pub calibration: Option<BTreeMap<GroupId, i32>>,
    pub checkpoint: Checkpoint,
}

/// Starting point for dynamic runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub exponents: BTreeMap<GroupId, i32>,
    /// Parameters at the end of the calibration pass, when it ran here
    /// rather than being loaded from a file.
    pub masters: Option<Vec<Matrix>>,
}

/// Loads MNIST from the configured root and draws the configured subsets.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let root = cfg.data_root();
    let (train_full, test_full) = load_mnist(&root)?;
    let d = &cfg.data;
    let pick = |ds: Dataset, n: usize, seed: u64| -> Result<Dataset> {
        if n == 0 || n >= ds.len() {
            Ok(ds)
        } else {
            subset(&ds, n, seed)
        }
    };
    let mut train_set = pick(train_full, d.train_subset, d.subset_seed)?;
    let mut test_set = pick(test_full, d.test_subset, d.subset_seed.wrapping_add(1))?;
    if d.normalization == Normalization::Gcn {
        for ds in [&mut train_set, &mut test_set] {
            ds.x = global_contrast_normalize(&ds.x, GCN_EPS)?;
            ds.meta.normalization = "gcn".into();
        }
    }
    info!(
        "loaded {} train / {} test examples from {}",
        train_set.len(),
        test_set.len(),
        root.display()
    );
    Ok((train_set, test_set))
}

/// Starting exponents for a dynamic run: the configured file if any, else
/// an exact calibration pass. `None` for static formats or when disabled.
pub fn calibration_for(cfg: &ExperimentConfig, train_set: &Dataset) -> Result<Option<Calibration>> {
    if !cfg.precision.prop.is_dynamic() {
        return Ok(None);
    }
    if let Some(path) = &cfg.calibration.file {
        return Ok(Some(Calibration {
            exponents: load_calibration(path)?,
            masters: None,
        }));
    }
    if cfg.calibration.epochs == 0 {
        return Ok(None);
    }
    info!("calibrating over {} exact epoch(s)", cfg.calibration.epochs);
    let (exponents, net) = calibrate_network(&cfg.train_config(), train_set, cfg.calibration.epochs)?;
    Ok(Some(Calibration {
        exponents,
        masters: Some(net.parameters().into_iter().map(|(_, p)| p.master().clone()).collect()),
    }))
}

/// Trains one configuration on already loaded data.
pub fn run_with_data(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    calibration: Option<&Calibration>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let tc = cfg.train_config();
    let mut net = Network::new(train_set.features(), train_set.classes, &tc)?;
    let calibration = calibration.filter(|_| tc.prop_format.is_dynamic());
    if let Some(c) = calibration {
        net.precision_mut().bank_mut().load_exponents(&c.exponents)?;
        match (&c.masters, cfg.calibration.reinitialize) {
            (Some(masters), false) => Checkpoint {
                rng_state: 0,
                masters: masters.clone(),
                exponents: c.exponents.clone(),
            }
            .restore(&mut net)?,
            _ => net.reinitialize()?,
        }
    }
    let log = train(&mut net, train_set, test_set)?;
    let summary = SummaryRow {
        format: tc.prop_format.family().to_string(),
        prop_bits: tc.prop_format.bits(),
        update_bits: tc.update_format.bits(),
        test_error: log.final_error(Split::Test).unwrap_or(f64::NAN),
    };
    let checkpoint = Checkpoint::capture(&net, log.rng_state);
    Ok(RunOutput {
        log,
        summary,
        calibration: calibration.map(|c| c.exponents.clone()),
        checkpoint,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Writes `train_log.csv`, `scales.csv`, `summary.csv`, `checkpoint.bin` and,
/// for calibrated runs, `calibration.tsv`.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("train_log.csv"), |w| out.log.write_csv(w))?;
    write_file(&dir.join("scales.csv"), |w| out.log.write_scale_csv(w))?;
    write_file(&dir.join("summary.csv"), |w| {
        writeln!(w, "{}", SummaryRow::HEADER)?;
        writeln!(w, "{}", out.summary.to_csv())
    })?;
    save_checkpoint(&dir.join("checkpoint.bin"), &out.checkpoint)?;
    if let Some(exps) = &out.calibration {
        save_calibration(&dir.join("calibration.tsv"), exps)?;
    }
    Ok(())
}

/// Loads data, calibrates if needed, trains and writes the outputs.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train_set, test_set) = load_data(cfg)?;
    let calibration = calibration_for(cfg, &train_set)?;
    let out = run_with_data(cfg, &train_set, &test_set, calibration.as_ref())?;
    write_run(&cfg.output.dir, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVar {
    PropWidth,
    UpdateWidth,
    /// Integer exponent of static fixed point, in both stages.
    RadixExponent,
    OverflowRateMax,
}

impl fmt::Display for SweepVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepVar::PropWidth => "prop_width",
            SweepVar::UpdateWidth => "update_width",
            SweepVar::RadixExponent => "radix_exponent",
            SweepVar::OverflowRateMax => "overflow_rate_max",
        })
    }
}

impl FromStr for SweepVar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "prop_width" => SweepVar::PropWidth,
            "update_width" => SweepVar::UpdateWidth,
            "radix_exponent" => SweepVar::RadixExponent,
            "overflow_rate_max" => SweepVar::OverflowRateMax,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown sweep variable `{s}` (prop_width, update_width, radix_exponent, overflow_rate_max)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub var: SweepVar,
    /// Values as written; each is checked to parse for `var`.
    pub values: Vec<String>,
}

impl SweepSpec {
    pub fn new(var: SweepVar, values: Vec<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one value".into()));
        }
        let spec = SweepSpec { var, values };
        for v in &spec.values {
            spec.parse_value(v)?;
        }
        Ok(spec)
    }

    /// Parses a comma-separated value list such as `8,10,12`.
    pub fn parse(var: &str, values: &str) -> Result<Self> {
        let values = values
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        Self::new(var.parse()?, values)
    }

    fn parse_value(&self, v: &str) -> Result<f64> {
        let bad = || Error::InvalidArgument(format!("bad {} value `{v}`", self.var));
        match self.var {
            SweepVar::PropWidth | SweepVar::UpdateWidth => v.parse::<u32>().map(f64::from).map_err(|_| bad()),
            SweepVar::RadixExponent => v.parse::<i32>().map(f64::from).map_err(|_| bad()),
            SweepVar::OverflowRateMax => v.parse::<f64>().map_err(|_| bad()),
        }
    }
}

/// The configuration for one sweep point.
pub fn apply_sweep_value(cfg: &ExperimentConfig, var: SweepVar, value: &str) -> Result<ExperimentConfig> {
    let spec = SweepSpec::new(var, vec![value.to_string()])?;
    let x = spec.parse_value(value)?;
    let mut out = cfg.clone();
    match var {
        SweepVar::PropWidth => out.precision.prop = out.precision.prop.with_width(x as u32)?,
        SweepVar::UpdateWidth => out.precision.update = out.precision.update.with_width(x as u32)?,
        SweepVar::RadixExponent => {
            for f in [&mut out.precision.prop, &mut out.precision.update] {
                match *f {
                    FormatSpec::Static(QuantFormat::FixedPoint { width, .. }) => {
                        *f = FormatSpec::Static(QuantFormat::fixed(width, x as i32));
                    }
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "radix_exponent needs fixed point formats, got `{other}`"
                        )))
                    }
                }
            }
        }
        SweepVar::OverflowRateMax => out.scaling.overflow_rate_max = x,
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub final_test_error: f64,
    pub normalized_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub var: SweepVar,
    pub baseline_error: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "value,final_test_error,normalized_error")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.value, r.final_test_error, r.normalized_error)?;
        }
        Ok(())
    }
}

/// `error / baseline`. A zero baseline maps a zero error to 1 and anything
/// else to infinity.
pub fn normalize_error(error: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        if error == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        error / baseline
    }
}

/// Runs the exact baseline and every sweep point on already loaded data.
/// Dynamic points share one calibration.
pub fn sweep_with_data(
    cfg: &ExperimentConfig,
    spec: &SweepSpec,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<SweepResult> {
    let points: Vec<ExperimentConfig> = spec
        .values
        .iter()
        .map(|v| apply_sweep_value(cfg, spec.var, v))
        .collect::<Result<_>>()?;
    let baseline_cfg = cfg.exact_baseline();
    info!("sweep baseline: exact arithmetic");
    let baseline = run_with_data(&baseline_cfg, train_set, test_set, None)?.summary.test_error;
    let calibration = if points.iter().any(|p| p.precision.prop.is_dynamic()) {
        calibration_for(cfg, train_set)?
    } else {
        None
    };
    let mut rows = Vec::with_capacity(points.len());
    for (value, point) in spec.values.iter().zip(&points) {
        info!("sweep {} = {value}", spec.var);
        let err = if *point == baseline_cfg {
            baseline
        } else {
            run_with_data(point, train_set, test_set, calibration.as_ref())?
                .summary
                .test_error
        };
        rows.push(SweepRow {
            value: value.clone(),
            final_test_error: err,
            normalized_error: normalize_error(err, baseline),
        });
    }
    Ok(SweepResult {
        var: spec.var,
        baseline_error: baseline,
        rows,
    })
}

/// Loads data, runs the sweep and writes `sweep_<var>.csv` to the output
/// directory.
pub fn sweep(cfg: &ExperimentConfig, spec: &SweepSpec) -> Result<SweepResult> {
    cfg.validate()?;
    let (train_set, test_set) = load_data(cfg)?;
    let result = sweep_with_data(cfg, spec, &train_set, &test_set)?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(format!("sweep_{}.csv", spec.var)), |w| result.write_csv(w))?;
    Ok(result)
}

/// Runs calibration alone and writes `calibration.tsv` to the output
/// directory. Works for any format; the pass itself is always exact.
pub fn calibrate_only(cfg: &ExperimentConfig) -> Result<BTreeMap<GroupId, i32>> {
    cfg.validate()?;
    let (train_set, _) = load_data(cfg)?;
    let epochs = cfg.calibration.epochs.max(1);
    let exps = calibrate(&cfg.train_config(), &train_set, epochs)?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_calibration(&dir.join("calibration.tsv"), &exps)?;
    Ok(exps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_values_are_checked() {
        assert!(SweepSpec::parse("prop_width", "8,10, 12").is_ok());
        assert!(SweepSpec::parse("prop_width", "8,x").is_err());
        assert!(SweepSpec::parse("prop_width", "").is_err());
        assert!(SweepSpec::parse("bits", "8").is_err());
        assert!(SweepSpec::parse("overflow_rate_max", "1e-4,0.01").is_ok());
    }

    #[test]
    fn sweep_points() {
        let mut cfg = ExperimentConfig::default();
        cfg.precision.prop = "dynamic:10".parse().unwrap();
        cfg.precision.update = "dynamic:12".parse().unwrap();
        let p = apply_sweep_value(&cfg, SweepVar::PropWidth, "8").unwrap();
        assert_eq!(p.precision.prop, FormatSpec::Dynamic { width: 8 });
        assert_eq!(p.precision.update, FormatSpec::Dynamic { width: 12 });
        assert!(apply_sweep_value(&cfg, SweepVar::RadixExponent, "5").is_err());

        cfg.precision.prop = "fixed:31@5".parse().unwrap();
        cfg.precision.update = "fixed:31@5".parse().unwrap();
        let p = apply_sweep_value(&cfg, SweepVar::RadixExponent, "3").unwrap();
        assert_eq!(p.precision.prop.to_string(), "fixed:31@3");
        assert_eq!(p.precision.update.to_string(), "fixed:31@3");
        let p = apply_sweep_value(&cfg, SweepVar::OverflowRateMax, "0.01").unwrap();
        assert_eq!(p.scaling.overflow_rate_max, 0.01);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_error(0.02, 0.02), 1.0);
        assert_eq!(normalize_error(0.04, 0.02), 2.0);
        assert_eq!(normalize_error(0.0, 0.0), 1.0);
        assert!(normalize_error(0.1, 0.0).is_infinite());
    }

    #[test]
    fn summary_row_format() {
        let r = SummaryRow {
            format: "dynamic".into(),
            prop_bits: Some(10),
            update_bits: Some(12),
            test_error: 0.0125,
        };
        assert_eq!(r.to_csv(), "dynamic,10,12,0.0125");
        let e = SummaryRow {
            format: "exact".into(),
            prop_bits: None,
            update_bits: None,
            test_error: 0.5,
        };
        assert_eq!(e.to_csv(), "exact,,,0.5");
    }
}
