//! FPGA cost of a fixed-point multiplier-accumulator, in ALMs.
//!
//! Three measured configurations are known exactly. Everything else comes
//! from `alpha * mult^2 + beta * acc`, least-squares fitted to those rows:
//! multiplier cost grows with the square of its width, the accumulator's
//! linearly.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// `(multiplier bits, accumulator bits, ALMs)`.
pub const MAC_TABLE: [(u32, u32, u32); 3] = [(32, 32, 504), (16, 32, 138), (16, 16, 128)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostQuery {
    pub mult_bits: u32,
    pub acc_bits: u32,
}

impl CostQuery {
    pub fn new(mult_bits: u32, acc_bits: u32) -> Result<Self> {
        if !(1 <= mult_bits && mult_bits <= acc_bits && acc_bits <= 64) {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= mult <= acc <= 64, got mult {mult_bits}, acc {acc_bits}"
            )));
        }
        Ok(CostQuery { mult_bits, acc_bits })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacCost {
    /// Measured value when the query is one of the table rows.
    pub alms_exact: Option<u32>,
    pub alms_model: f64,
}

/// Fitted `(alpha, beta)`.
pub fn cost_coefficients() -> (f64, f64) {
    static FIT: OnceLock<(f64, f64)> = OnceLock::new();
    *FIT.get_or_init(|| {
        // normal equations of the two-column design [m^2, a]
        let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(m, a, y) in &MAC_TABLE {
            let (x1, x2, y) = ((m * m) as f64, a as f64, y as f64);
            s11 += x1 * x1;
            s12 += x1 * x2;
            s22 += x2 * x2;
            t1 += x1 * y;
            t2 += x2 * y;
        }
        let det = s11 * s22 - s12 * s12;
        ((t1 * s22 - t2 * s12) / det, (s11 * t2 - s12 * t1) / det)
    })
}

pub fn mac_cost(q: CostQuery) -> MacCost {
    let (alpha, beta) = cost_coefficients();
    let alms_exact = MAC_TABLE
        .iter()
        .find(|&&(m, a, _)| m == q.mult_bits && a == q.acc_bits)
        .map(|&(_, _, y)| y);
    let m = q.mult_bits as f64;
    MacCost {
        alms_exact,
        alms_model: alpha * m * m + beta * q.acc_bits as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        for (m, a, y) in MAC_TABLE {
            let c = mac_cost(CostQuery::new(m, a).unwrap());
            assert_eq!(c.alms_exact, Some(y));
            assert!((c.alms_model - y as f64).abs() <= 0.15 * y as f64);
        }
        assert_eq!(mac_cost(CostQuery::new(8, 16).unwrap()).alms_exact, None);
    }

    #[test]
    fn coefficients_positive() {
        let (a, b) = cost_coefficients();
        assert!(a > 0.0 && b > 0.0);
    }

    #[test]
    fn query_bounds() {
        assert!(CostQuery::new(0, 8).is_err());
        assert!(CostQuery::new(16, 8).is_err());
        assert!(CostQuery::new(16, 65).is_err());
        assert!(CostQuery::new(64, 64).is_ok());
    }
}
