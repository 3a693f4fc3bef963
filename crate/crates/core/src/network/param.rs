use crate::error::{Error, Result};
use crate::formats::QuantFormat;
use crate::scaling::ScaleGroup;
use crate::tensor::Matrix;

/// A parameter tensor kept in two precisions.
///
/// `master` is what SGD updates, stored on the update grid. `prop` is the copy
/// the forward and backward passes read, `quantize(master, prop_format)`.
/// Any change to `master` marks the pair stale until [`DualParam::sync`].
#[derive(Debug, Clone, PartialEq)]
pub struct DualParam {
    master: Matrix,
    prop: Matrix,
    velocity: Matrix,
    synced: Option<QuantFormat>,
}

impl DualParam {
    pub fn new(master: Matrix) -> Self {
        let (r, c) = master.shape();
        DualParam {
            prop: master.clone(),
            velocity: Matrix::zeros(r, c),
            master,
            synced: None,
        }
    }

    pub fn master(&self) -> &Matrix {
        &self.master
    }

    pub fn velocity(&self) -> &Matrix {
        &self.velocity
    }

    pub fn shape(&self) -> (usize, usize) {
        self.master.shape()
    }

    pub fn set_master(&mut self, m: Matrix) -> Result<()> {
        if m.shape() != self.master.shape() {
            return Err(Error::Shape(format!(
                "new master {:?} for parameter {:?}",
                m.shape(),
                self.master.shape()
            )));
        }
        self.master = m;
        self.synced = None;
        Ok(())
    }

    pub(crate) fn reset_velocity(&mut self) {
        self.velocity = Matrix::zeros(self.master.rows(), self.master.cols());
    }

    /// Re-derives the propagation copy, recording its overflow statistics.
    pub fn sync(&mut self, prop_format: QuantFormat, group: Option<&mut ScaleGroup>) -> Result<()> {
        let q = prop_format.quantize_tensor(&self.master)?;
        if let Some(g) = group {
            g.record(&q);
        }
        self.prop = q.values;
        self.synced = Some(prop_format);
        Ok(())
    }

    /// The propagation copy, provided it was synced under `prop_format`.
    pub fn prop(&self, prop_format: QuantFormat) -> Result<&Matrix> {
        match self.synced {
            Some(f) if f == prop_format => Ok(&self.prop),
            _ => Err(Error::StalePropagation),
        }
    }

    /// Full check that `prop == quantize(master, prop_format)` bit for bit.
    pub fn verify_sync(&self, prop_format: QuantFormat) -> bool {
        match prop_format.quantize_tensor(&self.master) {
            Ok(q) => q
                .values
                .as_slice()
                .iter()
                .zip(self.prop.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            Err(_) => false,
        }
    }

    /// Momentum step: `v <- m v - lr g`, then `master <- quantize(P(master + v))`
    /// where `P` is the optional max-norm projection. Leaves the pair stale.
    pub fn sgd_update(
        &mut self,
        grad: &Matrix,
        lr: f64,
        momentum: f64,
        update_format: QuantFormat,
        max_norm: Option<f64>,
        name: &str,
    ) -> Result<()> {
        if grad.shape() != self.master.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {:?}",
                grad.shape(),
                self.master.shape()
            )));
        }
        let mut next = self.master.clone();
        for ((v, w), &g) in self
            .velocity
            .as_mut_slice()
            .iter_mut()
            .zip(next.as_mut_slice())
            .zip(grad.as_slice())
        {
            *v = momentum * *v - lr * g;
            *w += *v;
        }
        if let Some(limit) = max_norm {
            next = apply_max_norm(&next, limit);
        }
        let q = update_format
            .quantize_tensor(&next)
            .map_err(|_| Error::NonFiniteUpdate(name.to_string()))?;
        self.master = q.values;
        self.synced = None;
        Ok(())
    }
}

/// Rescales every column whose L2 norm exceeds `limit` down to `limit`.
/// Columns hold the incoming weights of one unit.
pub fn apply_max_norm(w: &Matrix, limit: f64) -> Matrix {
    let (rows, cols) = w.shape();
    let mut norms = vec![0.0f64; cols];
    for r in 0..rows {
        for (n, &x) in norms.iter_mut().zip(w.row(r)) {
            *n += x * x;
        }
    }
    let factors: Vec<f64> = norms
        .iter()
        .map(|&sq| {
            let n = sq.sqrt();
            if n > limit {
                limit / n
            } else {
                1.0
            }
        })
        .collect();
    let mut out = w.clone();
    if factors.iter().all(|&f| f == 1.0) {
        return out;
    }
    for r in 0..rows {
        for (x, &f) in out.row_mut(r).iter_mut().zip(&factors) {
            *x *= f;
        }
    }
    out
}
