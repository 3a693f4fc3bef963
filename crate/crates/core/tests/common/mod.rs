//! Oracles shared by the integration suites. Nothing here calls into the
//! quantizer under test.

#![allow(dead_code)]

use std::path::PathBuf;

use lpmul_core::QuantFormat;

/// One representable value and whether its encoding ends in a zero bit.
#[derive(Debug, Clone, Copy)]
pub struct GridPoint {
    pub value: f64,
    pub even: bool,
}

fn two_pow(k: i32) -> f64 {
    2f64.powi(k)
}

/// Every finite value of a small format, ascending, built from its bit
/// fields.
pub fn enumerate_grid(fmt: &QuantFormat) -> Vec<GridPoint> {
    let mut out = Vec::new();
    match *fmt {
        QuantFormat::FixedPoint { width, int_exp } => {
            let step = two_pow(int_exp - (width as i32 - 1));
            let half = 1i64 << (width - 1);
            for m in -half..half {
                out.push(GridPoint {
                    value: m as f64 * step,
                    even: m % 2 == 0,
                });
            }
        }
        QuantFormat::FloatEmu {
            exp_bits,
            man_bits,
            bias,
        } => {
            let m_count = 1u64 << man_bits;
            for e_field in 0..(1u64 << exp_bits) - 1 {
                for mant in 0..m_count {
                    let mag = if e_field == 0 {
                        mant as f64 * two_pow(1 - bias - man_bits as i32)
                    } else {
                        (m_count + mant) as f64 * two_pow(e_field as i32 - bias - man_bits as i32)
                    };
                    let even = mant % 2 == 0;
                    out.push(GridPoint { value: mag, even });
                    if mag != 0.0 {
                        out.push(GridPoint { value: -mag, even });
                    }
                }
            }
            out.sort_by(|a, b| a.value.total_cmp(&b.value));
        }
        QuantFormat::ExactHost => panic!("exact arithmetic has no finite grid"),
    }
    out
}

/// Nearest grid value by exhaustive scan, ties to the even encoding.
pub fn nearest_scan(grid: &[GridPoint], x: f64) -> f64 {
    let mut best = grid[0];
    let mut best_d = (x - best.value).abs();
    for &g in &grid[1..] {
        let d = (x - g.value).abs();
        if d < best_d || (d == best_d && g.even && !best.even) {
            best = g;
            best_d = d;
        }
    }
    best.value
}

/// Same as [`nearest_scan`] via bisection, for grids too large to scan.
pub fn nearest_bisect(grid: &[GridPoint], x: f64) -> f64 {
    let i = grid.partition_point(|g| g.value < x);
    if i == 0 {
        return grid[0].value;
    }
    if i == grid.len() {
        return grid[i - 1].value;
    }
    let (lo, hi) = (grid[i - 1], grid[i]);
    let (dl, dh) = (x - lo.value, hi.value - x);
    if dl < dh || (dl == dh && lo.even) {
        lo.value
    } else {
        hi.value
    }
}

/// Directory holding the MNIST IDX files.
pub fn data_dir() -> PathBuf {
    match std::env::var_os("LPMUL_DATA_DIR") {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")),
    }
}

use lpmul_core::network::{Mode, Network, TrainConfig};
use lpmul_core::{Matrix, Rng};

/// Outcome of comparing backprop with central differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries skipped because a perturbation flipped some maxout argmax.
    pub kinks: usize,
}

/// Exact-arithmetic 2-hidden-layer maxout net (k = 2, 10 units) without
/// dropout or max-norm.
pub fn grad_check_net(inputs: usize, classes: usize, seed: u64) -> Network {
    let cfg = TrainConfig {
        hidden_units: vec![10, 10],
        pieces: vec![2, 2],
        input_dropout: 0.0,
        hidden_dropout: 0.0,
        max_norm: None,
        seed,
        ..TrainConfig::default()
    };
    let mut net = Network::new(inputs, classes, &cfg).unwrap();
    // non-zero biases so every path is exercised
    let mut rng = Rng::new(seed ^ 0x5eed);
    for (_, p) in net.parameters_mut() {
        let (r, c) = p.shape();
        if r == 1 {
            p.set_master(Matrix::random_uniform(&mut rng, r, c, -0.3, 0.3).unwrap()).unwrap();
        }
    }
    net.sync_all().unwrap();
    net
}

fn argmax_pattern(net: &mut Network, x: &Matrix) -> Vec<Vec<u8>> {
    net.forward(x, Mode::Eval, &mut Rng::new(0)).unwrap().argmax
}

/// Central differences with step `1e-4 * max(1, |w|)` on every parameter
/// entry. Entries whose perturbation changes a maxout winner are counted as
/// kinks and skipped; the loss is not differentiable there.
pub fn gradient_check(seed: u64) -> GradCheck {
    let (inputs, classes, batch) = (6, 4, 8);
    let mut net = grad_check_net(inputs, classes, seed);
    let mut rng = Rng::new(seed.wrapping_mul(31).wrapping_add(7));
    let x = Matrix::random_uniform(&mut rng, batch, inputs, -1.0, 1.0).unwrap();
    let y: Vec<u8> = (0..batch).map(|_| rng.below(classes as u64) as u8).collect();

    let trace = net.forward(&x, Mode::Train, &mut Rng::new(1)).unwrap();
    let grads = net.backward(&trace, &y).unwrap();
    let flat: Vec<Matrix> = grads.flatten().into_iter().cloned().collect();
    let base_pattern = argmax_pattern(&mut net, &x);

    let mut out = GradCheck::default();
    let count = net.parameters().len();
    for pi in 0..count {
        let len = flat[pi].len();
        for k in 0..len {
            let original = net.parameters()[pi].1.master().clone();
            let w = original.as_slice()[k];
            let h = 1e-4 * w.abs().max(1.0);
            let eval = |delta: f64, net: &mut Network| -> (f64, Vec<Vec<u8>>) {
                let mut m = original.clone();
                m.as_mut_slice()[k] = w + delta;
                net.parameters_mut()[pi].1.set_master(m).unwrap();
                net.sync_all().unwrap();
                (net.loss(&x, &y).unwrap(), argmax_pattern(net, &x))
            };
            let (lp, pp) = eval(h, &mut net);
            let (lm, pm) = eval(-h, &mut net);
            net.parameters_mut()[pi].1.set_master(original).unwrap();
            net.sync_all().unwrap();
            if pp != base_pattern || pm != base_pattern {
                out.kinks += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let g = flat[pi].as_slice()[k];
            let scale = g.abs().max(fd.abs());
            // both essentially zero: fall back to an absolute test
            let err = if scale < 1e-8 {
                if (g - fd).abs() <= 1e-10 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (g - fd).abs() / scale
            };
            out.max_rel_err = out.max_rel_err.max(err);
            out.checked += 1;
        }
    }
    out
}
