//! Dense row-major matrices and the low-precision multiply-accumulate.

mod rng;

pub use rng::Rng;

use crate::error::{Error, Result};
use crate::formats::{QuantFormat, QuantResult};
use crate::scaling::ScaleGroup;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => a.max(b),
        }
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Checked constructor: length must match and every entry be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec_unchecked(indices.len(), self.cols, data)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for (c, &v) in self.row(r).iter().enumerate() {
                out[c * self.rows + r] = v;
            }
        }
        Matrix::from_vec_unchecked(self.cols, self.rows, out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Column sums accumulated in ascending row order, as a `1 x cols` row.
    pub fn column_sums(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, &v) in out.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        Matrix::from_vec_unchecked(1, self.cols, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Elementwise `self op other`; `other` may also be a `1 x cols` row,
    /// which is broadcast down the rows.
    pub fn zip_with(&self, other: &Matrix, op: BinaryOp) -> Result<Matrix> {
        if other.shape() == self.shape() {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op.apply(a, b))
                .collect();
            Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
        } else if other.rows == 1 && other.cols == self.cols {
            let mut out = self.clone();
            for r in 0..self.rows {
                for (a, &b) in out.row_mut(r).iter_mut().zip(&other.data) {
                    *a = op.apply(*a, b);
                }
            }
            Ok(out)
        } else {
            Err(Error::Shape(format!(
                "{:?} {op:?} {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, BinaryOp::Mul)
    }

    pub fn max(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, BinaryOp::Max)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| x * c)
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn random_uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Result<Matrix> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("uniform bounds [{lo}, {hi})")));
        }
        let data = (0..rows * cols)
            .map(|_| lo + (hi - lo) * rng.next_f64())
            .collect();
        Ok(Matrix::from_vec_unchecked(rows, cols, data))
    }

    /// Entries are 1 with probability `p`, else 0.
    pub fn random_bernoulli(rng: &mut Rng, rows: usize, cols: usize, p: f64) -> Result<Matrix> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("bernoulli p = {p}")));
        }
        let data = (0..rows * cols)
            .map(|_| if rng.next_f64() < p { 1.0 } else { 0.0 })
            .collect();
        Ok(Matrix::from_vec_unchecked(rows, cols, data))
    }
}

/// Exact-host product `a * b`. Every output entry is summed in ascending inner
/// index order, the same order as the textbook triple loop. Zero terms are
/// skipped, which cannot change an accumulator that starts at `+0.0`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = b.cols;
    let mut out = vec![0.0; a.rows * n];
    for (i, acc) in out.chunks_exact_mut(n.max(1)).enumerate().take(a.rows) {
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (c, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *c += aik * bkj;
            }
        }
    }
    Ok(Matrix::from_vec_unchecked(a.rows, n, out))
}

/// A matrix tagged with the grid its entries are claimed to lie on.
#[derive(Debug, Clone, Copy)]
pub struct Operand<'a> {
    pub values: &'a Matrix,
    pub format: QuantFormat,
}

impl<'a> Operand<'a> {
    pub fn new(values: &'a Matrix, format: QuantFormat) -> Self {
        Operand { values, format }
    }

    pub fn exact(values: &'a Matrix) -> Self {
        Operand {
            values,
            format: QuantFormat::ExactHost,
        }
    }

    fn check_on_grid(&self) -> Result<()> {
        if self.format.is_exact() {
            return Ok(());
        }
        match self.values.data.iter().find(|&&x| !self.format.is_on_grid(x)) {
            Some(&value) => Err(Error::OffGrid {
                value,
                format: self.format.to_string(),
            }),
            None => Ok(()),
        }
    }
}

/// Low-precision multiply, high-precision accumulate: `quantize(a * b + bias)`.
///
/// Operands must already lie on their grids (checked). The accumulation runs
/// in the host carrier, the optional `1 x cols` bias is added to the finished
/// sum, and only then is the result quantized to `fmt_out`. Overflow statistics
/// of that final quantization go to `group` when one is given.
pub fn qmatmul(
    a: Operand<'_>,
    b: Operand<'_>,
    bias: Option<Operand<'_>>,
    fmt_out: &QuantFormat,
    group: Option<&mut ScaleGroup>,
) -> Result<QuantResult> {
    a.check_on_grid()?;
    b.check_on_grid()?;
    let mut acc = matmul(a.values, b.values)?;
    if let Some(bias) = bias {
        bias.check_on_grid()?;
        if bias.values.shape() != (1, acc.cols) {
            return Err(Error::Shape(format!(
                "bias {:?} for output {:?}",
                bias.values.shape(),
                acc.shape()
            )));
        }
        for r in 0..acc.rows {
            for (x, &b) in acc.row_mut(r).iter_mut().zip(&bias.values.data) {
                *x += b;
            }
        }
    }
    if let Some(pos) = acc.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::AccumulatorOverflow {
            row: pos / acc.cols.max(1),
            col: pos % acc.cols.max(1),
        });
    }
    let q = fmt_out.quantize_tensor(&acc)?;
    if let Some(g) = group {
        g.record(&q);
    }
    Ok(q)
}
