mod common;

use common::{enumerate_grid, nearest_scan};
use lpmul_core::scaling::{calibrate_exponent, policy_step};
use lpmul_core::{Matrix, QuantFormat};
use proptest::prelude::*;

fn fixed_format() -> impl Strategy<Value = QuantFormat> {
    (2u32..=32, -20i32..=20).prop_map(|(w, e)| QuantFormat::fixed(w, e))
}

fn float_format() -> impl Strategy<Value = QuantFormat> {
    (2u32..=8, 1u32..=23).prop_map(|(e, m)| QuantFormat::float(e, m))
}

fn any_format() -> impl Strategy<Value = QuantFormat> {
    prop_oneof![fixed_format(), float_format()]
}

fn small_format() -> impl Strategy<Value = QuantFormat> {
    prop_oneof![
        (2u32..=6, -6i32..=6).prop_map(|(w, e)| QuantFormat::fixed(w, e)),
        (2u32..=4, 1u32..=3)
            .prop_filter("at most 6 bits", |(e, m)| 1 + e + m <= 6)
            .prop_map(|(e, m)| QuantFormat::float(e, m)),
    ]
}

/// Values scaled to the format so that both the interior and the saturated
/// region get hit.
fn scaled(fmt: &QuantFormat, u: f64) -> f64 {
    u * fmt.max_magnitude() * 1.5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn idempotent(fmt in any_format(), u in -1.0f64..1.0) {
        let q = fmt.quantize_value(scaled(&fmt, u)).unwrap();
        prop_assert_eq!(fmt.quantize_value(q).unwrap().to_bits(), q.to_bits());
        prop_assert!(fmt.is_on_grid(q));
    }

    #[test]
    fn monotone(fmt in any_format(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let (x, y) = (scaled(&fmt, a.min(b)), scaled(&fmt, a.max(b)));
        prop_assert!(fmt.quantize_value(x).unwrap() <= fmt.quantize_value(y).unwrap());
    }

    #[test]
    fn fixed_error_within_half_step(fmt in fixed_format(), u in -1.0f64..1.0) {
        let (min, max, step) = fmt.representable_bounds().unwrap();
        let x = u * max;
        prop_assume!(x >= min);
        prop_assert!((fmt.quantize_value(x).unwrap() - x).abs() <= step / 2.0);
    }

    #[test]
    fn float_relative_error(fmt in float_format(), u in 0.01f64..1.0) {
        // normal range: relative error at most 2^-(man+1)
        let (_, max, _) = fmt.representable_bounds().unwrap();
        let x = u * max;
        let QuantFormat::FloatEmu { man_bits, bias, .. } = fmt else { unreachable!() };
        prop_assume!(x >= 2f64.powi(1 - bias));
        let q = fmt.quantize_value(x).unwrap();
        prop_assert!((q - x).abs() <= x * 2f64.powi(-(man_bits as i32) - 1));
    }

    #[test]
    fn saturates(fmt in any_format(), k in 1.0f64..1e6) {
        let (min, max, _) = fmt.representable_bounds().unwrap();
        prop_assert_eq!(fmt.quantize_value(max * (1.0 + k)).unwrap(), max);
        prop_assert_eq!(fmt.quantize_value(min * (1.0 + k)).unwrap(), min);
    }

    #[test]
    fn symmetric_away_from_the_extreme_cell(fmt in any_format(), u in 0.0f64..1.0) {
        // two's complement has one more negative value; below -max the
        // two sides differ by design
        let x = u * fmt.max_magnitude();
        let pos = fmt.quantize_value(x).unwrap();
        let neg = fmt.quantize_value(-x).unwrap();
        prop_assert_eq!(pos, -neg);
    }

    #[test]
    fn matches_exhaustive_grid(fmt in small_format(), u in -1.0f64..1.0) {
        let grid = enumerate_grid(&fmt);
        let x = scaled(&fmt, u);
        prop_assert_eq!(fmt.quantize_value(x).unwrap(), nearest_scan(&grid, x));
    }

    #[test]
    fn grid_midpoints_round_to_even(fmt in small_format(), j in 0usize..1000) {
        let grid = enumerate_grid(&fmt);
        let j = j % (grid.len() - 1);
        let mid = (grid[j].value + grid[j + 1].value) / 2.0;
        let want = if grid[j].even { grid[j].value } else { grid[j + 1].value };
        prop_assert_eq!(fmt.quantize_value(mid).unwrap(), want);
    }

    #[test]
    fn overflow_counts(fmt in fixed_format(), us in prop::collection::vec(-1.0f64..1.0, 1..64)) {
        let max = fmt.max_magnitude();
        let data: Vec<f64> = us.iter().map(|u| u * max * 2.5).collect();
        let m = Matrix::from_vec(1, data.len(), data.clone()).unwrap();
        let q = fmt.quantize_tensor(&m).unwrap();
        let ovf = data.iter().filter(|x| x.abs() > max).count() as u64;
        let dbl = data.iter().filter(|x| (2.0 * x.abs()) > max).count() as u64;
        prop_assert_eq!(q.overflow_count, ovf);
        prop_assert_eq!(q.double_overflow_count, dbl);
        prop_assert!(q.overflow_count <= q.double_overflow_count);
    }

    #[test]
    fn policy_step_is_unit(r in 0.0f64..1.0, extra in 0.0f64..1.0, r_max in 0.0f64..0.5) {
        let r2 = r + (1.0 - r) * extra;
        let s = policy_step(r, r2, r_max);
        prop_assert!((-1..=1).contains(&s));
        // between the thresholds the exponent stays put
        if r <= r_max && r2 > r_max {
            prop_assert_eq!(s, 0);
        }
    }

    #[test]
    fn calibrated_exponent_never_overflows(
        width in 4u32..=32,
        data in prop::collection::vec(-1e3f64..1e3, 1..50),
    ) {
        let m = Matrix::from_vec(1, data.len(), data).unwrap();
        let e = calibrate_exponent([&m]).unwrap();
        let q = QuantFormat::fixed(width, e).quantize_tensor(&m).unwrap();
        prop_assert_eq!(q.overflow_count, 0);
    }
}
