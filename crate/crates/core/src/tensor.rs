//! Dense row-major matrices and the forward/VJP primitives the networks and
//! losses are built from.
//!
//! Every forward op has a matching `*_vjp` that maps an upstream gradient
//! (same shape as the forward output) to gradients of its inputs. All loops
//! run in a fixed order so identical inputs give bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix of doubles. Rows are examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data. Rejects wrong lengths and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, col {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (i, r.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so handle the zero-column case explicitly
        let cols = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data.chunks_exact(cols).take(n)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        self.check_same("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Mat) -> Result<()> {
        self.check_same("axpy", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Mat) -> Result<f64> {
        self.check_same("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.iter_rows().map(l2_norm).collect()
    }

    fn check_same(&self, op: &'static str, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Plain matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

// ---------------------------------------------------------------------------
// affine

/// `Y = X·W + b`, with `b` broadcast over rows.
pub fn affine(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Result<Mat> {
    if x.cols != w.rows {
        return Err(Error::Shape {
            op: "affine",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        if b.len() != w.cols {
            return Err(Error::Shape {
                op: "affine(bias)",
                left: w.shape(),
                right: (1, b.len()),
            });
        }
        for r in 0..y.rows {
            for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
                *v += bias;
            }
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Mat,
    pub dw: Mat,
    pub db: Vec<f64>,
}

/// Gradients of `affine` w.r.t. `X`, `W` and `b` given upstream `dY`.
pub fn affine_vjp(x: &Mat, w: &Mat, dy: &Mat) -> Result<AffineGrads> {
    if x.cols != w.rows || dy.rows != x.rows || dy.cols != w.cols {
        return Err(Error::Shape {
            op: "affine_vjp",
            left: x.shape(),
            right: dy.shape(),
        });
    }
    // dX = dY · Wᵀ
    let mut dx = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let dy_row = dy.row(i);
        for k in 0..x.cols {
            dx.data[i * x.cols + k] = dot(dy_row, w.row(k));
        }
    }
    // dW = Xᵀ · dY
    let mut dw = Mat::zeros(w.rows, w.cols);
    for i in 0..x.rows {
        let dy_row = dy.row(i);
        for (k, &xv) in x.row(i).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (g, &d) in dw.row_mut(k).iter_mut().zip(dy_row) {
                *g += xv * d;
            }
        }
    }
    let mut db = vec![0.0; w.cols];
    for row in dy.iter_rows() {
        for (g, &d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    Ok(AffineGrads { dx, dw, db })
}

// ---------------------------------------------------------------------------
// relu

pub fn relu(x: &Mat) -> Mat {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `dy` where `x > 0`; the subgradient at `x == 0` is 0.
pub fn relu_vjp(x: &Mat, dy: &Mat) -> Result<Mat> {
    x.check_same("relu_vjp", dy)?;
    Ok(Mat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// batchnorm

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-column running mean/variance. Updated as
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
        }
    }

    fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Saved forward state needed by [`batchnorm_vjp`].
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    xhat: Mat,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub dx: Mat,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

/// Batch normalization over rows.
///
/// Train mode normalizes with the batch mean and biased batch variance and
/// folds them into `stats`; eval mode normalizes with `stats` and leaves it
/// untouched.
pub fn batchnorm(
    x: &Mat,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    mode: Mode,
    stats: &mut RunningStats,
) -> Result<(Mat, BatchNormCache)> {
    let d = x.cols;
    if gamma.len() != d || beta.len() != d || stats.mean.len() != d || stats.var.len() != d {
        return Err(Error::Shape {
            op: "batchnorm",
            left: x.shape(),
            right: (1, gamma.len()),
        });
    }
    if eps <= 0.0 {
        return Err(Error::Param(format!("batchnorm eps must be > 0, got {eps}")));
    }
    let n = x.rows;
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::DegenerateBatch { rows: n });
            }
            let mut mean = vec![0.0; d];
            for row in x.iter_rows() {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            let mut var = vec![0.0; d];
            for row in x.iter_rows() {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            for s in &mut var {
                *s /= n as f64;
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Mat::zeros(n, d);
    let mut y = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let h = (x.get(i, j) - mean[j]) * inv_std[j];
            xhat.set(i, j, h);
            y.set(i, j, gamma[j] * h + beta[j]);
        }
    }
    if mode == Mode::Train {
        stats.update(&mean, &var);
    }
    Ok((
        y,
        BatchNormCache {
            mode,
            xhat,
            inv_std,
            gamma: gamma.to_vec(),
        },
    ))
}

pub fn batchnorm_vjp(cache: &BatchNormCache, dy: &Mat) -> Result<BatchNormGrads> {
    cache.xhat.check_same("batchnorm_vjp", dy)?;
    let (n, d) = dy.shape();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let g = dy.get(i, j);
            dbeta[j] += g;
            dgamma[j] += g * cache.xhat.get(i, j);
        }
    }
    let mut dx = Mat::zeros(n, d);
    match cache.mode {
        Mode::Eval => {
            for i in 0..n {
                for j in 0..d {
                    dx.set(i, j, dy.get(i, j) * cache.gamma[j] * cache.inv_std[j]);
                }
            }
        }
        Mode::Train => {
            // dx = γ·σ⁻¹/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
            let nf = n as f64;
            for i in 0..n {
                for j in 0..d {
                    let v = nf * dy.get(i, j) - dbeta[j] - cache.xhat.get(i, j) * dgamma[j];
                    dx.set(i, j, cache.gamma[j] * cache.inv_std[j] / nf * v);
                }
            }
        }
    }
    Ok(BatchNormGrads { dx, dgamma, dbeta })
}

// ---------------------------------------------------------------------------
// softmax

/// Row-wise `softmax(Z / tau)` with per-row max subtraction.
pub fn softmax(z: &Mat, tau: f64) -> Result<Mat> {
    check_tau(tau)?;
    let mut out = Mat::zeros(z.rows, z.cols);
    for i in 0..z.rows {
        softmax_row(z.row(i), tau, out.row_mut(i));
    }
    Ok(out)
}

/// Row-wise `log softmax(Z / tau)`.
pub fn log_softmax(z: &Mat, tau: f64) -> Result<Mat> {
    check_tau(tau)?;
    let mut out = Mat::zeros(z.rows, z.cols);
    for i in 0..z.rows {
        log_softmax_row(z.row(i), tau, out.row_mut(i));
    }
    Ok(out)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Param(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

pub(crate) fn softmax_row(z: &[f64], tau: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_row(z: &[f64], tau: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&v| ((v - max) / tau).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max) / tau - lse;
    }
}
