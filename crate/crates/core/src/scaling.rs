//! Dynamic fixed point: one power-of-two scaling exponent per tensor group.
//!
//! A group with exponent `e` quantizes to `QuantFormat::FixedPoint { width, int_exp: e }`,
//! so its range is about `[-2^e, 2^e)`. Overflow statistics accumulate between
//! policy applications; the policy then moves `e` by at most one.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::formats::QuantResult;
use crate::tensor::Matrix;

/// Exponents are clamped to `[-EXPONENT_BOUND, EXPONENT_BOUND]`.
pub const EXPONENT_BOUND: i32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TensorRole {
    Weights,
    Bias,
    WeightedSum,
    Output,
    GradWeights,
    GradBias,
    GradWeightedSum,
    GradOutput,
}

impl TensorRole {
    pub const ALL: [TensorRole; 8] = [
        TensorRole::Weights,
        TensorRole::Bias,
        TensorRole::WeightedSum,
        TensorRole::Output,
        TensorRole::GradWeights,
        TensorRole::GradBias,
        TensorRole::GradWeightedSum,
        TensorRole::GradOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TensorRole::Weights => "weights",
            TensorRole::Bias => "bias",
            TensorRole::WeightedSum => "weighted_sum",
            TensorRole::Output => "output",
            TensorRole::GradWeights => "grad_weights",
            TensorRole::GradBias => "grad_bias",
            TensorRole::GradWeightedSum => "grad_weighted_sum",
            TensorRole::GradOutput => "grad_output",
        }
    }
}

/// Layer index plus tensor role. Layer 0 holds the network input (role `Output`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId {
    pub layer: usize,
    pub role: TensorRole,
}

impl GroupId {
    pub fn new(layer: usize, role: TensorRole) -> Self {
        GroupId { layer, role }
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.role.name())
    }
}

impl FromStr for GroupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad group id `{s}`"));
        let (layer, role) = s
            .strip_prefix("layer")
            .and_then(|r| r.split_once('.'))
            .ok_or_else(bad)?;
        let layer = layer.parse().map_err(|_| bad())?;
        let role = TensorRole::ALL
            .into_iter()
            .find(|r| r.name() == role)
            .ok_or_else(bad)?;
        Ok(GroupId { layer, role })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPolicy {
    /// Maximum tolerated overflow rate.
    pub r_max: f64,
    /// Examples between policy applications.
    pub update_period: u64,
}

impl Default for ScalingPolicy {
    fn default() -> Self {
        ScalingPolicy {
            r_max: 1e-4,
            update_period: 10_000,
        }
    }
}

impl ScalingPolicy {
    pub fn new(r_max: f64, update_period: u64) -> Result<Self> {
        let p = ScalingPolicy {
            r_max,
            update_period,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.r_max) {
            return Err(Error::InvalidArgument(format!(
                "maximum overflow rate {} outside [0, 1)",
                self.r_max
            )));
        }
        if self.update_period == 0 {
            return Err(Error::InvalidArgument("update period must be >= 1".into()));
        }
        Ok(())
    }
}

/// Exponent step chosen from one window of statistics: `+1` when too many
/// values overflow, `-1` when even doubled values would rarely overflow,
/// otherwise `0`.
pub fn policy_step(overflow_rate: f64, double_overflow_rate: f64, r_max: f64) -> i32 {
    if overflow_rate > r_max {
        1
    } else if double_overflow_rate <= r_max {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGroup {
    id: GroupId,
    exponent: i32,
    element_count: u64,
    overflow_count: u64,
    double_overflow_count: u64,
}

impl ScaleGroup {
    pub fn new(id: GroupId, exponent: i32) -> Self {
        ScaleGroup {
            id,
            exponent: exponent.clamp(-EXPONENT_BOUND, EXPONENT_BOUND),
            element_count: 0,
            overflow_count: 0,
            double_overflow_count: 0,
        }
    }

    pub fn id(&self) -> GroupId {
        self.id
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn set_exponent(&mut self, e: i32) {
        self.exponent = e.clamp(-EXPONENT_BOUND, EXPONENT_BOUND);
    }

    pub fn element_count(&self) -> u64 {
        self.element_count
    }

    pub fn overflow_count(&self) -> u64 {
        self.overflow_count
    }

    pub fn double_overflow_count(&self) -> u64 {
        self.double_overflow_count
    }

    pub fn record(&mut self, q: &QuantResult) {
        self.element_count += q.element_count();
        self.overflow_count += q.overflow_count;
        self.double_overflow_count += q.double_overflow_count;
    }

    pub fn reset_counters(&mut self) {
        self.element_count = 0;
        self.overflow_count = 0;
        self.double_overflow_count = 0;
    }

    /// Applies the update policy to the accumulated window and resets it.
    /// Returns the exponent change actually applied.
    pub fn apply_policy(&mut self, policy: &ScalingPolicy) -> Result<i32> {
        if self.element_count == 0 {
            return Err(Error::NoStatistics(self.id.to_string()));
        }
        let n = self.element_count as f64;
        let step = policy_step(
            self.overflow_count as f64 / n,
            self.double_overflow_count as f64 / n,
            policy.r_max,
        );
        let old = self.exponent;
        let wanted = old + step;
        self.exponent = wanted.clamp(-EXPONENT_BOUND, EXPONENT_BOUND);
        if self.exponent != wanted {
            log::warn!("{}: exponent pinned at guard bound {}", self.id, self.exponent);
        }
        self.reset_counters();
        Ok(self.exponent - old)
    }
}

/// All scale groups of a network, iterated in `GroupId` order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScaleBank {
    groups: BTreeMap<GroupId, ScaleGroup>,
}

impl ScaleBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: GroupId, exponent: i32) {
        self.groups.insert(id, ScaleGroup::new(id, exponent));
    }

    pub fn get(&self, id: GroupId) -> Option<&ScaleGroup> {
        self.groups.get(&id)
    }

    pub fn get_mut(&mut self, id: GroupId) -> Option<&mut ScaleGroup> {
        self.groups.get_mut(&id)
    }

    pub fn exponent(&self, id: GroupId) -> Option<i32> {
        self.groups.get(&id).map(|g| g.exponent)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ScaleGroup> {
        self.groups.values()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn exponents(&self) -> BTreeMap<GroupId, i32> {
        self.groups.iter().map(|(&id, g)| (id, g.exponent)).collect()
    }

    /// Sets every listed exponent; ids absent from the bank are an error.
    pub fn load_exponents(&mut self, exponents: &BTreeMap<GroupId, i32>) -> Result<()> {
        for (id, &e) in exponents {
            self.groups
                .get_mut(id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown scale group {id}")))?
                .set_exponent(e);
        }
        Ok(())
    }

    /// Applies the policy to every group holding statistics. Groups that saw
    /// no values in the window keep their exponent.
    pub fn apply_policy(&mut self, policy: &ScalingPolicy) -> Vec<(GroupId, i32)> {
        let mut changes = Vec::new();
        for g in self.groups.values_mut() {
            if g.element_count == 0 {
                continue;
            }
            let step = g.apply_policy(policy).expect("non-empty window");
            changes.push((g.id, step));
        }
        changes
    }

    pub fn reset_counters(&mut self) {
        self.groups.values_mut().for_each(ScaleGroup::reset_counters);
    }
}

/// `ceil(log2(max_abs)) + 1`, or 0 for an all-zero trace.
pub fn exponent_for_max(max_abs: f64) -> i32 {
    if max_abs == 0.0 || !max_abs.is_finite() {
        return 0;
    }
    let (mant, exp) = frexp(max_abs);
    // max_abs = mant * 2^exp with mant in [0.5, 1)
    let ceil_log2 = if mant == 0.5 { exp - 1 } else { exp };
    (ceil_log2 + 1).clamp(-EXPONENT_BOUND, EXPONENT_BOUND)
}

fn frexp(x: f64) -> (f64, i32) {
    let bits = x.abs().to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        let (m, e) = frexp(x * crate::formats::pow2(64));
        return (m, e - 64);
    }
    let mant = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
    (mant, biased - 1022)
}

/// Calibrated exponent for one group from the matrices it saw.
pub fn calibrate_exponent<'a>(trace: impl IntoIterator<Item = &'a Matrix>) -> Result<i32> {
    let mut seen = false;
    let mut max = 0.0f64;
    for m in trace {
        seen = true;
        max = max.max(m.max_abs());
    }
    if !seen {
        return Err(Error::NoCalibrationData);
    }
    Ok(exponent_for_max(max))
}

/// Streaming max-abs tracker used during a high-precision calibration pass.
#[derive(Debug, Clone, Default)]
pub struct CalibrationTrace {
    max_abs: BTreeMap<GroupId, f64>,
}

impl CalibrationTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, id: GroupId, m: &Matrix) {
        let slot = self.max_abs.entry(id).or_insert(0.0);
        *slot = slot.max(m.max_abs());
    }

    pub fn is_empty(&self) -> bool {
        self.max_abs.is_empty()
    }

    pub fn max_abs(&self, id: GroupId) -> Option<f64> {
        self.max_abs.get(&id).copied()
    }

    pub fn calibrate(&self) -> Result<BTreeMap<GroupId, i32>> {
        if self.max_abs.is_empty() {
            return Err(Error::NoCalibrationData);
        }
        Ok(self
            .max_abs
            .iter()
            .map(|(&id, &m)| (id, exponent_for_max(m)))
            .collect())
    }
}

/// Writes `group_id<TAB>exponent` lines.
pub fn write_calibration(mut w: impl Write, exponents: &BTreeMap<GroupId, i32>) -> std::io::Result<()> {
    for (id, e) in exponents {
        writeln!(w, "{id}\t{e}")?;
    }
    Ok(())
}

pub fn read_calibration(r: impl BufRead) -> Result<BTreeMap<GroupId, i32>> {
    let mut out = BTreeMap::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::CalibrationFile {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::CalibrationFile { line: line_no, msg };
        let (id, e) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `group_id<TAB>exponent`".into()))?;
        let id: GroupId = id.parse().map_err(|e: Error| err(e.to_string()))?;
        let e: i32 = e
            .trim()
            .parse()
            .map_err(|_| err(format!("bad exponent `{e}`")))?;
        if out.insert(id, e).is_some() {
            return Err(err(format!("duplicate group {id}")));
        }
    }
    Ok(out)
}

pub fn save_calibration(path: &Path, exponents: &BTreeMap<GroupId, i32>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_calibration(std::io::BufWriter::new(f), exponents).map_err(|e| Error::io(path, e))
}

pub fn load_calibration(path: &Path) -> Result<BTreeMap<GroupId, i32>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_calibration(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::QuantFormat;

    fn gid() -> GroupId {
        GroupId::new(2, TensorRole::GradWeights)
    }

    fn stats(n: usize, ovf: u64, dbl: u64) -> QuantResult {
        QuantResult {
            values: Matrix::zeros(1, n),
            overflow_count: ovf,
            double_overflow_count: dbl,
        }
    }

    #[test]
    fn record_accumulates() {
        let mut g = ScaleGroup::new(gid(), 0);
        g.record(&stats(100, 2, 5));
        assert_eq!((g.element_count(), g.overflow_count(), g.double_overflow_count()), (100, 2, 5));
        g.record(&stats(100, 2, 5));
        assert_eq!((g.element_count(), g.overflow_count(), g.double_overflow_count()), (200, 4, 10));
        g.record(&stats(0, 0, 0));
        assert_eq!(g.element_count(), 200);
    }

    fn apply(r: f64, r2: f64, r_max: f64) -> i32 {
        let n = 10_000u64;
        let mut g = ScaleGroup::new(gid(), 3);
        g.element_count = n;
        g.overflow_count = (r * n as f64).round() as u64;
        g.double_overflow_count = (r2 * n as f64).round() as u64;
        let step = g.apply_policy(&ScalingPolicy::new(r_max, 10_000).unwrap()).unwrap();
        assert_eq!(g.element_count(), 0);
        assert_eq!(g.exponent(), 3 + step);
        step
    }

    #[test]
    fn policy_branches() {
        assert_eq!(apply(0.02, 0.5, 1e-4), 1);
        assert_eq!(apply(0.0, 0.0, 1e-4), -1);
        assert_eq!(apply(0.0, 0.05, 1e-4), 0);
    }

    #[test]
    fn policy_needs_statistics() {
        let mut g = ScaleGroup::new(gid(), 0);
        assert!(matches!(
            g.apply_policy(&ScalingPolicy::default()),
            Err(Error::NoStatistics(_))
        ));
    }

    #[test]
    fn policy_clamps_at_guard() {
        let mut g = ScaleGroup::new(gid(), EXPONENT_BOUND);
        g.record(&stats(10, 10, 10));
        assert_eq!(g.apply_policy(&ScalingPolicy::default()).unwrap(), 0);
        assert_eq!(g.exponent(), EXPONENT_BOUND);
    }

    #[test]
    fn policy_validation() {
        assert!(ScalingPolicy::new(1.0, 10).is_err());
        assert!(ScalingPolicy::new(-0.1, 10).is_err());
        assert!(ScalingPolicy::new(0.0, 0).is_err());
        assert!(ScalingPolicy::new(0.0, 1).is_ok());
    }

    #[test]
    fn calibration_exponents() {
        assert_eq!(exponent_for_max(20.0), 6);
        assert_eq!(exponent_for_max(0.0), 0);
        assert_eq!(exponent_for_max(1.0), 1);
        assert_eq!(exponent_for_max(1.5), 2);
        assert_eq!(exponent_for_max(0.25), -1);
        assert_eq!(exponent_for_max(0.3), 0);
        assert_eq!(exponent_for_max(1e-300), -EXPONENT_BOUND);
        assert!(matches!(
            calibrate_exponent(std::iter::empty()),
            Err(Error::NoCalibrationData)
        ));
        let a = Matrix::from_rows(&[&[1.0, -20.0]]).unwrap();
        let b = Matrix::from_rows(&[&[3.0]]).unwrap();
        assert_eq!(calibrate_exponent([&a, &b]).unwrap(), 6);
        assert_eq!(calibrate_exponent([&Matrix::zeros(2, 2)]).unwrap(), 0);
    }

    #[test]
    fn calibrated_exponent_never_overflows_its_data() {
        let mut rng = crate::tensor::Rng::new(8);
        for scale in [1e-3, 0.7, 1.0, 5.0, 20.0, 1000.0] {
            let m = Matrix::random_uniform(&mut rng, 20, 20, -scale, scale).unwrap();
            let e = calibrate_exponent([&m]).unwrap();
            let q = QuantFormat::fixed(10, e).quantize_tensor(&m).unwrap();
            assert_eq!(q.overflow_count, 0);
        }
    }

    #[test]
    fn trace_and_file_roundtrip() {
        let mut t = CalibrationTrace::new();
        assert!(matches!(t.calibrate(), Err(Error::NoCalibrationData)));
        t.observe(gid(), &Matrix::from_rows(&[&[0.1, -0.4]]).unwrap());
        t.observe(GroupId::new(0, TensorRole::Output), &Matrix::from_rows(&[&[1.0]]).unwrap());
        t.observe(gid(), &Matrix::from_rows(&[&[0.2]]).unwrap());
        let ex = t.calibrate().unwrap();
        assert_eq!(ex[&gid()], exponent_for_max(0.4));
        let mut buf = Vec::new();
        write_calibration(&mut buf, &ex).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("layer2.grad_weights\t0\n"), "{text}");
        assert_eq!(read_calibration(&buf[..]).unwrap(), ex);
    }

    #[test]
    fn calibration_file_errors_carry_line() {
        let text = "layer1.weights\t3\nlayer1.nonsense\t2\n";
        match read_calibration(text.as_bytes()) {
            Err(Error::CalibrationFile { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = "layer1.weights 3\n";
        assert!(read_calibration(text.as_bytes()).is_err());
    }

    #[test]
    fn group_id_text() {
        for role in TensorRole::ALL {
            let id = GroupId::new(3, role);
            assert_eq!(id.to_string().parse::<GroupId>().unwrap(), id);
        }
        assert!("layerx.weights".parse::<GroupId>().is_err());
    }

    #[test]
    fn bank_applies_only_groups_with_data() {
        let mut bank = ScaleBank::new();
        bank.insert(GroupId::new(1, TensorRole::Weights), 0);
        bank.insert(GroupId::new(1, TensorRole::Bias), 0);
        bank.get_mut(GroupId::new(1, TensorRole::Weights))
            .unwrap()
            .record(&stats(10, 0, 0));
        let changes = bank.apply_policy(&ScalingPolicy::default());
        assert_eq!(changes, vec![(GroupId::new(1, TensorRole::Weights), -1)]);
        assert_eq!(bank.exponent(GroupId::new(1, TensorRole::Bias)), Some(0));
    }
}
