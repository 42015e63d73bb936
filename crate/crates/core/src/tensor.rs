//! Dense math kernels with paired forward/backward passes.
//!
//! Everything here runs in `f64`. Datasets are stored as `f32`; conversion
//! happens once at the I/O boundary.

use thiserror::Error;

/// Norm below which a vector is treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("degenerate vector: norm {0:e} is below {NORM_EPS:e}")]
    Degenerate(f64),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("target {target} out of range for {classes} logits")]
    Target { target: usize, classes: usize },
    #[error("attention over an empty set")]
    EmptySet,
}

fn shape_err(expected: impl ToString, actual: impl ToString) -> TensorError {
    TensorError::Shape {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(shape_err(rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|row| dot(row, x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &yr) in self.row_iter().zip(y) {
            axpy(&mut out, yr, row);
        }
        out
    }

    /// `self += scale · a ⊗ b`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s != 0.0 {
                axpy(self.row_mut(r), s, b);
            }
        }
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(&mut self.data, alpha, &other.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Raw entries as little-endian `f64` bytes, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`.
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn add_assign(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn normalized(a: &[f64]) -> Result<Vec<f64>, TensorError> {
    let n = norm(a);
    if n <= NORM_EPS {
        return Err(TensorError::Degenerate(n));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, TensorError> {
    if u.len() != v.len() {
        return Err(shape_err(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu <= NORM_EPS {
        return Err(TensorError::Degenerate(nu));
    }
    if nv <= NORM_EPS {
        return Err(TensorError::Degenerate(nv));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradient of `upstream · cos(u, v)` with respect to `u` and `v`.
pub fn cosine_bwd(u: &[f64], v: &[f64], upstream: f64) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    let (nu, nv) = (norm(u), norm(v));
    if nu <= NORM_EPS {
        return Err(TensorError::Degenerate(nu));
    }
    if nv <= NORM_EPS {
        return Err(TensorError::Degenerate(nv));
    }
    let c = dot(u, v) / (nu * nv);
    let inv = 1.0 / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| upstream * (vi * inv - c * ui / (nu * nu)))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| upstream * (ui * inv - c * vi / (nv * nv)))
        .collect();
    Ok((du, dv))
}

pub fn linear_fwd(w: &Mat, x: &[f64]) -> Result<Vec<f64>, TensorError> {
    if w.cols() != x.len() {
        return Err(shape_err(w.cols(), x.len()));
    }
    Ok(w.matvec(x))
}

/// Returns `(dW, dx)` for `y = W x` given `dL/dy`.
pub fn linear_bwd(w: &Mat, x: &[f64], upstream: &[f64]) -> Result<(Mat, Vec<f64>), TensorError> {
    if w.cols() != x.len() {
        return Err(shape_err(w.cols(), x.len()));
    }
    if w.rows() != upstream.len() {
        return Err(shape_err(w.rows(), upstream.len()));
    }
    let mut dw = Mat::zeros(w.rows(), w.cols());
    dw.add_outer(1.0, upstream, x);
    Ok((dw, w.matvec_t(upstream)))
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cross-entropy of `softmax(logits)` against `target`, with its gradient.
pub fn softmax_ce(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>), TensorError> {
    if target >= logits.len() {
        return Err(TensorError::Target {
            target,
            classes: logits.len(),
        });
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    let loss = (log_z - logits[target]).max(0.0);
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Query/key/value maps of a single attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

impl AttentionWeights {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    fn check(&self, d: usize) -> Result<(), TensorError> {
        for m in [&self.wq, &self.wk, &self.wv] {
            if m.shape() != (d, d) {
                return Err(shape_err(format!("{d}x{d}"), format!("{}x{}", m.rows(), m.cols())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub dwq: Mat,
    pub dwk: Mat,
    pub dwv: Mat,
    pub dset: Vec<Vec<f64>>,
}

struct AttentionPass {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

fn attention_pass(set: &[Vec<f64>], w: &AttentionWeights) -> Result<AttentionPass, TensorError> {
    let first = set.first().ok_or(TensorError::EmptySet)?;
    let d = first.len();
    w.check(d)?;
    if let Some(bad) = set.iter().find(|e| e.len() != d) {
        return Err(shape_err(d, bad.len()));
    }
    let q: Vec<Vec<f64>> = set.iter().map(|e| w.wq.matvec(e)).collect();
    let k: Vec<Vec<f64>> = set.iter().map(|e| w.wk.matvec(e)).collect();
    let v: Vec<Vec<f64>> = set.iter().map(|e| w.wv.matvec(e)).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let mut alpha = Vec::with_capacity(set.len());
    let mut out = Vec::with_capacity(set.len());
    for (e, qe) in set.iter().zip(&q) {
        let scores: Vec<f64> = k.iter().map(|kk| dot(qe, kk) * scale).collect();
        let a = softmax(&scores);
        let mut o = e.clone();
        for (ak, vk) in a.iter().zip(&v) {
            axpy(&mut o, *ak, vk);
        }
        alpha.push(a);
        out.push(o);
    }
    Ok(AttentionPass { q, k, v, alpha, out })
}

/// Single-head self-attention with a residual connection, where every set
/// element acts as query, key and value:
/// `out_e = e + Σ_k softmax_k(q_e·k_k / √d) v_k` with `q = Wq e`,
/// `k = Wk e`, `v = Wv e`.
pub fn attention_fwd(set: &[Vec<f64>], w: &AttentionWeights) -> Result<Vec<Vec<f64>>, TensorError> {
    Ok(attention_pass(set, w)?.out)
}

pub fn attention_bwd(
    set: &[Vec<f64>],
    w: &AttentionWeights,
    upstream: &[Vec<f64>],
) -> Result<AttentionGrads, TensorError> {
    let pass = attention_pass(set, w)?;
    let n = set.len();
    let d = set[0].len();
    if upstream.len() != n {
        return Err(shape_err(n, upstream.len()));
    }
    if let Some(bad) = upstream.iter().find(|g| g.len() != d) {
        return Err(shape_err(d, bad.len()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![vec![0.0; d]; n];
    let mut dk = vec![vec![0.0; d]; n];
    let mut dv = vec![vec![0.0; d]; n];
    let mut dset: Vec<Vec<f64>> = upstream.to_vec();

    for e in 0..n {
        let g = &upstream[e];
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let a = &pass.alpha[e];
        let dalpha: Vec<f64> = pass.v.iter().map(|vk| dot(g, vk)).collect();
        let mean = dot(a, &dalpha);
        for k in 0..n {
            axpy(&mut dv[k], a[k], g);
            let ds = a[k] * (dalpha[k] - mean) * scale;
            if ds != 0.0 {
                axpy(&mut dq[e], ds, &pass.k[k]);
                axpy(&mut dk[k], ds, &pass.q[e]);
            }
        }
    }

    let mut grads = AttentionGrads {
        dwq: Mat::zeros(d, d),
        dwk: Mat::zeros(d, d),
        dwv: Mat::zeros(d, d),
        dset: Vec::new(),
    };
    for (i, x) in set.iter().enumerate() {
        grads.dwq.add_outer(1.0, &dq[i], x);
        grads.dwk.add_outer(1.0, &dk[i], x);
        grads.dwv.add_outer(1.0, &dv[i], x);
        add_assign(&mut dset[i], &w.wq.matvec_t(&dq[i]));
        add_assign(&mut dset[i], &w.wk.matvec_t(&dk[i]));
        add_assign(&mut dset[i], &w.wv.matvec_t(&dv[i]));
    }
    grads.dset = dset;
    Ok(grads)
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `x` and
/// returns the worst relative error over all coordinates.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}
