//! Dense row-major tensors and the differentiable kernels the training
//! losses are built from: affine maps, ReLU, temperature softmax, weighted
//! cross-entropy, KL divergence and row normalization.
//!
//! Every kernel has a paired backward producing analytic gradients. The
//! contract for those gradients is agreement with central finite
//! differences (see [`crate::gradcheck`]), not any particular autodiff
//! mechanism: backwards here are hand-derived composites.

use crate::error::{Result, SentinelError};

/// Epsilon used when dividing by row norms.
pub const NORM_EPS: f64 = 1e-8;

/// Floor applied to the second argument of `log` inside KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

/// Dense row-major array of `f64` values with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the shape accounts for every value.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(SentinelError::dim("shape product", expected, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 2-D tensor from rows; all rows must share a width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(SentinelError::dim(format!("row {i} width"), width, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), width],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.cols();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.cols();
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise in-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// A trainable value with an accumulated gradient of the same shape.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub value: Tensor,
    pub grad: Tensor,
}

impl ParamTensor {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        ParamTensor { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

fn check_2d(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(SentinelError::dim(
            format!("{what} rank"),
            2,
            t.shape().len(),
        ));
    }
    Ok(())
}

/// `y = x W + b` for `x: [B, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_2d(x, "x")?;
    check_2d(w, "W")?;
    if x.cols() != w.rows() {
        return Err(SentinelError::dim("x.cols vs W.rows", w.rows(), x.cols()));
    }
    if b.len() != w.cols() {
        return Err(SentinelError::dim("b.len vs W.cols", w.cols(), b.len()));
    }
    let (batch, d_in, d_out) = (x.rows(), x.cols(), w.cols());
    let mut y = Tensor::zeros(vec![batch, d_out]);
    for i in 0..batch {
        let xi = x.row(i);
        let yi = y.row_mut(i);
        yi.copy_from_slice(b.data());
        for (k, &xv) in xi.iter().enumerate().take(d_in) {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data()[k * d_out..(k + 1) * d_out];
            for (j, &wv) in wrow.iter().enumerate() {
                yi[j] += xv * wv;
            }
        }
    }
    Ok(y)
}

/// Backward of [`affine_forward`]: returns `(dx, dW, db)` for upstream `dy`.
pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, d_in, d_out) = (x.rows(), x.cols(), w.cols());
    debug_assert_eq!(dy.rows(), batch);
    debug_assert_eq!(dy.cols(), d_out);
    let mut dx = Tensor::zeros(vec![batch, d_in]);
    let mut dw = Tensor::zeros(vec![d_in, d_out]);
    let mut db = Tensor::zeros(vec![d_out]);
    for i in 0..batch {
        let xi = x.row(i);
        let dyi = dy.row(i);
        for (j, &g) in dyi.iter().enumerate() {
            db.data_mut()[j] += g;
        }
        let dxi = dx.row_mut(i);
        for k in 0..d_in {
            let wrow = &w.data()[k * d_out..(k + 1) * d_out];
            let mut acc = 0.0;
            for (j, &g) in dyi.iter().enumerate() {
                acc += g * wrow[j];
            }
            dxi[k] = acc;
        }
        for (k, &xv) in xi.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let dwrow = &mut dw.data_mut()[k * d_out..(k + 1) * d_out];
            for (j, &g) in dyi.iter().enumerate() {
                dwrow[j] += xv * g;
            }
        }
    }
    (dx, dw, db)
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Backward of [`relu`]; the subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape(), dy.shape());
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Row-wise `softmax(z / t)` with max-subtraction for stability.
pub fn softmax_with_temperature(z: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0) {
        return Err(SentinelError::InvalidArgument(format!(
            "softmax temperature must be positive, got {t}"
        )));
    }
    check_2d(z, "z")?;
    let mut p = z.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v / t - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(p)
}

/// Class-weighted cross-entropy over logits.
///
/// Returns the scalar loss `(1/B) Σ_i w[y_i] · (−log softmax(z_i)[y_i])` and
/// its gradient with respect to `z`.
pub fn weighted_cross_entropy(z: &Tensor, labels: &[usize], w: &[f64]) -> Result<(f64, Tensor)> {
    check_2d(z, "z")?;
    let (batch, classes) = (z.rows(), z.cols());
    if labels.len() != batch {
        return Err(SentinelError::dim("labels.len vs z.rows", batch, labels.len()));
    }
    if w.len() != classes {
        return Err(SentinelError::dim("weights.len vs z.cols", classes, w.len()));
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(SentinelError::Index(format!(
                "label {y} at row {i} out of range for {classes} classes"
            )));
        }
    }
    let p = softmax_with_temperature(z, 1.0)?;
    let inv_b = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut dz = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        let wy = w[y];
        let py = p.at(i, y).max(KL_FLOOR);
        loss += wy * (-py.ln());
        let row = dz.row_mut(i);
        for v in row.iter_mut() {
            *v *= wy * inv_b;
        }
        row[y] -= wy * inv_b;
    }
    Ok((loss * inv_b, dz))
}

/// Batch-mean KL divergence `(1/B) Σ_i Σ_c p[i,c] · log(p[i,c]/q[i,c])`.
///
/// Entries of `q` are floored at [`KL_FLOOR`] inside the log and
/// `0 · log(0/·)` is taken as zero.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    check_2d(p, "p")?;
    if p.shape() != q.shape() {
        return Err(SentinelError::dim("q.len vs p.len", p.len(), q.len()));
    }
    for (name, t) in [("p", p), ("q", q)] {
        if t.data().iter().any(|&v| v < 0.0) {
            return Err(SentinelError::InvalidArgument(format!(
                "{name} contains negative entries"
            )));
        }
    }
    let mut total = 0.0;
    for (&pv, &qv) in p.data().iter().zip(q.data()) {
        if pv > 0.0 {
            total += pv * (pv / qv.max(KL_FLOOR)).ln();
        }
    }
    Ok(total / p.rows() as f64)
}

/// Each row divided by `(‖row‖₂ + 1e-8)`; zero rows map near zero.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / (norm + NORM_EPS);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    y
}

/// Backward of [`l2_normalize_rows`] for upstream gradient `dy`.
pub fn l2_normalize_rows_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape(), dy.shape());
    let mut dx = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let gi = dy.row(i);
        let norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm + NORM_EPS;
        let out = dx.row_mut(i);
        if norm > 1e-12 {
            let dot: f64 = xi.iter().zip(gi).map(|(a, b)| a * b).sum();
            let coeff = dot / (norm * denom * denom);
            for ((o, &xv), &gv) in out.iter_mut().zip(xi).zip(gi) {
                *o = gv / denom - xv * coeff;
            }
        } else {
            for (o, &gv) in out.iter_mut().zip(gi) {
                *o = gv / denom;
            }
        }
    }
    dx
}
