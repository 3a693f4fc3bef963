use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::QuantFormat;
use crate::scaling::{CalibrationTrace, GroupId, ScaleBank, ScalingPolicy, TensorRole};
use crate::tensor::{qmatmul, Matrix, Operand};

/// Format of one precision stage (propagation or update).
///
/// `Dynamic` is fixed point whose exponent comes from each tensor's scale
/// group. Descriptor syntax extends [`QuantFormat`]'s with `dynamic:W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FormatSpec {
    Static(QuantFormat),
    Dynamic { width: u32 },
}

impl FormatSpec {
    pub fn is_dynamic(&self) -> bool {
        matches!(self, FormatSpec::Dynamic { .. })
    }

    /// Bit width including sign, `None` for exact arithmetic.
    pub fn bits(&self) -> Option<u32> {
        match self {
            FormatSpec::Static(f) => f.total_bits(),
            FormatSpec::Dynamic { width } => Some(*width),
        }
    }

    /// Short family name used in summaries.
    pub fn family(&self) -> &'static str {
        match self {
            FormatSpec::Static(QuantFormat::ExactHost) => "exact",
            FormatSpec::Static(QuantFormat::FloatEmu { .. }) => "float",
            FormatSpec::Static(QuantFormat::FixedPoint { .. }) => "fixed",
            FormatSpec::Dynamic { .. } => "dynamic",
        }
    }

    pub fn resolve(&self, exponent: i32) -> QuantFormat {
        match *self {
            FormatSpec::Static(f) => f,
            FormatSpec::Dynamic { width } => QuantFormat::fixed(width, exponent),
        }
    }

    /// Same family with a different total width.
    pub fn with_width(&self, width: u32) -> Result<FormatSpec> {
        let out = match *self {
            FormatSpec::Dynamic { .. } => FormatSpec::Dynamic { width },
            FormatSpec::Static(QuantFormat::FixedPoint { int_exp, .. }) => {
                FormatSpec::Static(QuantFormat::fixed(width, int_exp))
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "cannot set the width of `{other}`"
                )))
            }
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve(0).validate()
    }
}

impl fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatSpec::Static(q) => q.fmt(f),
            FormatSpec::Dynamic { width } => write!(f, "dynamic:{width}"),
        }
    }
}

impl FromStr for FormatSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let spec = match s.strip_prefix("dynamic:") {
            Some(w) => FormatSpec::Dynamic {
                width: w.parse().map_err(|_| Error::FormatSyntax(s.to_string()))?,
            },
            None => FormatSpec::Static(s.parse()?),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for FormatSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FormatSpec> for String {
    fn from(f: FormatSpec) -> String {
        f.to_string()
    }
}

/// Per-network arithmetic state: the two precision stages, the scale groups,
/// and an optional calibration trace.
#[derive(Debug, Clone)]
pub struct Precision {
    prop: FormatSpec,
    update: FormatSpec,
    policy: ScalingPolicy,
    bank: ScaleBank,
    trace: Option<CalibrationTrace>,
    recording: bool,
}

impl Precision {
    pub fn new(prop: FormatSpec, update: FormatSpec, policy: ScalingPolicy) -> Result<Self> {
        prop.validate()?;
        update.validate()?;
        policy.validate()?;
        if prop.is_dynamic() != update.is_dynamic() {
            return Err(Error::Config(format!(
                "propagation `{prop}` and update `{update}` must both be dynamic or both static"
            )));
        }
        Ok(Precision {
            prop,
            update,
            policy,
            bank: ScaleBank::new(),
            trace: None,
            recording: true,
        })
    }

    pub fn prop(&self) -> FormatSpec {
        self.prop
    }

    pub fn update(&self) -> FormatSpec {
        self.update
    }

    pub fn policy(&self) -> &ScalingPolicy {
        &self.policy
    }

    pub fn is_dynamic(&self) -> bool {
        self.prop.is_dynamic()
    }

    pub fn bank(&self) -> &ScaleBank {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut ScaleBank {
        &mut self.bank
    }

    pub(crate) fn register(&mut self, id: GroupId, exponent: i32) {
        self.bank.insert(id, exponent);
    }

    fn exponent(&self, id: GroupId) -> i32 {
        self.bank
            .exponent(id)
            .unwrap_or_else(|| panic!("scale group {id} was never registered"))
    }

    pub fn prop_format(&self, id: GroupId) -> QuantFormat {
        self.prop.resolve(self.exponent(id))
    }

    pub fn update_format(&self, id: GroupId) -> QuantFormat {
        self.update.resolve(self.exponent(id))
    }

    /// Starts collecting max-abs statistics for calibration.
    pub fn start_trace(&mut self) {
        self.trace = Some(CalibrationTrace::new());
    }

    pub fn take_trace(&mut self) -> Option<CalibrationTrace> {
        self.trace.take()
    }

    /// Turns overflow bookkeeping on or off (evaluation passes run with it off).
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub(crate) fn observe(&mut self, id: GroupId, m: &Matrix) {
        if let Some(t) = self.trace.as_mut() {
            t.observe(id, m);
        }
    }

    /// Quantizes to the group's propagation format, recording statistics.
    pub fn quantize(&mut self, id: GroupId, m: &Matrix) -> Result<Matrix> {
        let q = self.prop_format(id).quantize_tensor(m)?;
        if self.recording {
            if let Some(g) = self.bank.get_mut(id) {
                g.record(&q);
            }
        }
        self.observe(id, &q.values);
        Ok(q.values)
    }

    pub fn quantize_update(&self, id: GroupId, m: &Matrix) -> Result<Matrix> {
        Ok(self.update_format(id).quantize_tensor(m)?.values)
    }

    /// `quantize(a * b + bias)` with operands checked against their groups'
    /// grids and the output quantized into group `out`.
    pub fn qmatmul(
        &mut self,
        a: (&Matrix, GroupId),
        b: (&Matrix, GroupId),
        bias: Option<(&Matrix, GroupId)>,
        out: GroupId,
    ) -> Result<Matrix> {
        let fa = self.prop_format(a.1);
        let fb = self.prop_format(b.1);
        let fbias = bias.map(|(m, id)| Operand::new(m, self.prop_format(id)));
        let fout = self.prop_format(out);
        let group = if self.recording {
            self.bank.get_mut(out)
        } else {
            None
        };
        let q = qmatmul(Operand::new(a.0, fa), Operand::new(b.0, fb), fbias, &fout, group)?;
        self.observe(out, &q.values);
        Ok(q.values)
    }

    /// Sum of several products, accumulated exactly, then quantized once into
    /// group `out`.
    pub fn qmatmul_sum(&mut self, terms: &[(&Matrix, GroupId, &Matrix, GroupId)], out: GroupId) -> Result<Matrix> {
        let mut acc: Option<Matrix> = None;
        for &(a, ga, b, gb) in terms {
            let p = qmatmul(
                Operand::new(a, self.prop_format(ga)),
                Operand::new(b, self.prop_format(gb)),
                None,
                &QuantFormat::ExactHost,
                None,
            )?
            .values;
            acc = Some(match acc {
                None => p,
                Some(s) => s.add(&p)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::InvalidArgument("empty product sum".into()))?;
        self.quantize(out, &acc)
    }

    /// Applies the scaling policy to every group with statistics.
    pub fn apply_policy(&mut self) -> Vec<(GroupId, i32)> {
        let policy = self.policy;
        self.bank.apply_policy(&policy)
    }

    pub fn set_policy(&mut self, policy: ScalingPolicy) -> Result<()> {
        policy.validate()?;
        self.policy = policy;
        Ok(())
    }

    pub(crate) fn all_roles_for(layer: usize, hidden: bool) -> Vec<GroupId> {
        TensorRole::ALL
            .into_iter()
            .filter(|r| hidden || !matches!(r, TensorRole::Output | TensorRole::GradOutput))
            .map(|r| GroupId::new(layer, r))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_syntax() {
        assert_eq!(
            "dynamic:10".parse::<FormatSpec>().unwrap(),
            FormatSpec::Dynamic { width: 10 }
        );
        assert_eq!(
            "fixed:20@5".parse::<FormatSpec>().unwrap(),
            FormatSpec::Static(QuantFormat::fixed(20, 5))
        );
        for s in ["dynamic:12", "float:5.10", "exact", "fixed:31@6"] {
            assert_eq!(s.parse::<FormatSpec>().unwrap().to_string(), s);
        }
        assert!("dynamic:1".parse::<FormatSpec>().is_err());
        assert!("dynamic:".parse::<FormatSpec>().is_err());
    }

    #[test]
    fn width_changes() {
        let d = FormatSpec::Dynamic { width: 10 };
        assert_eq!(d.with_width(12).unwrap(), FormatSpec::Dynamic { width: 12 });
        let f = FormatSpec::Static(QuantFormat::fixed(20, 5));
        assert_eq!(
            f.with_width(10).unwrap(),
            FormatSpec::Static(QuantFormat::fixed(10, 5))
        );
        assert!(FormatSpec::Static(QuantFormat::HALF).with_width(10).is_err());
    }

    #[test]
    fn mixed_families_rejected() {
        let d = FormatSpec::Dynamic { width: 10 };
        let s = FormatSpec::Static(QuantFormat::ExactHost);
        assert!(Precision::new(d, s, ScalingPolicy::default()).is_err());
        assert!(Precision::new(d, d, ScalingPolicy::default()).is_ok());
    }

    #[test]
    fn dynamic_resolves_per_group() {
        let d = FormatSpec::Dynamic { width: 10 };
        let mut p = Precision::new(d, FormatSpec::Dynamic { width: 12 }, ScalingPolicy::default()).unwrap();
        let a = GroupId::new(1, TensorRole::Weights);
        let b = GroupId::new(1, TensorRole::Output);
        p.register(a, -2);
        p.register(b, 3);
        assert_eq!(p.prop_format(a), QuantFormat::fixed(10, -2));
        assert_eq!(p.update_format(a), QuantFormat::fixed(12, -2));
        assert_eq!(p.prop_format(b), QuantFormat::fixed(10, 3));
        let m = Matrix::from_rows(&[&[0.1, 100.0]]).unwrap();
        let q = p.quantize(b, &m).unwrap();
        assert_eq!(q.get(0, 1), QuantFormat::fixed(10, 3).max_magnitude());
        assert_eq!(p.bank().get(b).unwrap().overflow_count(), 1);
        p.set_recording(false);
        p.quantize(b, &m).unwrap();
        assert_eq!(p.bank().get(b).unwrap().element_count(), 2);
    }
}
