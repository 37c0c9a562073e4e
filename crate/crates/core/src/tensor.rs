//! Dense kernels: row-major matrices, third-order tensors, softmax, layer
//! normalization and multi-head cross-attention.
//!
//! Everything is double precision. The backward helpers at the bottom of the
//! file are used by the training module; they live here so that each forward
//! kernel and its derivative sit side by side.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Variance guard used by [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err(
                    "from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Empty matrix with a fixed width, e.g. an empty tracklet set.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
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
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self × other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self × otherᵀ`; both operands are read row-wise.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err(
                "matmul_t",
                format!(
                    "{}x{} times ({}x{})ᵀ",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ × other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_err(
                "t_matmul",
                format!(
                    "({}x{})ᵀ times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(shape_err(
                "add_row_vector",
                format!("bias of {} for width {}", bias.len(), self.cols),
            ));
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            if src >= self.rows {
                return Err(Error::IndexOutOfRange {
                    what: "matrix rows",
                    index: src,
                    len: self.rows,
                });
            }
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        Ok(out)
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Column sums.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)`, stabilized.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row normalization to zero mean and unit variance followed by an
/// affine `gain`/`bias`.
pub fn layer_norm(m: &Matrix, gain: &[f64], bias: &[f64]) -> Result<Matrix> {
    Ok(layer_norm_cached(m, gain, bias)?.0)
}

/// Normalized rows before the affine map and the per-row inverse std.
pub(crate) struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_cached(
    m: &Matrix,
    gain: &[f64],
    bias: &[f64],
) -> Result<(Matrix, LayerNormCache)> {
    let d = m.cols();
    if gain.len() != d || bias.len() != d {
        return Err(shape_err(
            "layer_norm",
            format!("gain {} / bias {} for width {d}", gain.len(), bias.len()),
        ));
    }
    let mut normalized = Matrix::zeros(m.rows(), d);
    let mut out = Matrix::zeros(m.rows(), d);
    let mut inv_std = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = m.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(istd);
        let nrow = normalized.row_mut(r);
        for (n, v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * istd;
        }
        let orow = out.row_mut(r);
        for c in 0..d {
            orow[c] = normalized.get(r, c) * gain[c] + bias[c];
        }
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Backward pass of [`layer_norm`]; returns the input gradient and
/// accumulates gain/bias gradients.
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    grad_out: &Matrix,
    grad_gain: &mut [f64],
    grad_bias: &mut [f64],
) -> Matrix {
    let (rows, d) = grad_out.shape();
    let mut grad_in = Matrix::zeros(rows, d);
    let mut g_hat = vec![0.0; d];
    for r in 0..rows {
        let go = grad_out.row(r);
        let xhat = cache.normalized.row(r);
        for c in 0..d {
            grad_gain[c] += go[c] * xhat[c];
            grad_bias[c] += go[c];
            g_hat[c] = go[c] * gain[c];
        }
        let mean_g = g_hat.iter().sum::<f64>() / d as f64;
        let mean_gx = dot(&g_hat, xhat) / d as f64;
        let istd = cache.inv_std[r];
        let gi = grad_in.row_mut(r);
        for c in 0..d {
            gi[c] = istd * (g_hat[c] - mean_g - xhat[c] * mean_gx);
        }
    }
    grad_in
}

/// Backward pass of a row softmax given its output `p`.
pub(crate) fn softmax_rows_backward(p: &Matrix, grad_p: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let gr = grad_p.row(r);
        let s = dot(pr, gr);
        for (o, (pv, gv)) in out.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
            *o = pv * (gv - s);
        }
    }
    out
}

/// Query/key projections of one correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
}

impl AttentionParams {
    pub fn new(heads: usize, w_q: Matrix, w_k: Matrix) -> Result<Self> {
        let d = w_q.rows();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if w_q.shape() != (d, d) || w_k.shape() != (d, d) {
            return Err(shape_err(
                "AttentionParams",
                format!("projections {:?} / {:?}", w_q.shape(), w_k.shape()),
            ));
        }
        Ok(Self { heads, w_q, w_k })
    }

    /// Identity projections, handy for fixtures.
    pub fn identity(d: usize, heads: usize) -> Result<Self> {
        Self::new(heads, Matrix::identity(d), Matrix::identity(d))
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }
}

pub(crate) struct AttentionCache {
    pub queries: Matrix,
    pub keys: Matrix,
    /// Per-head softmax outputs.
    pub heads: Vec<Matrix>,
}

/// `A_{X|Y}`: per-head `softmax((X W_Q)(Y W_K)ᵀ / √D)` averaged over heads.
/// The result has `|x|` rows and `|y|` columns and is row-stochastic.
pub fn cross_attention(x: &Matrix, y: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    Ok(cross_attention_cached(x, y, p)?.0)
}

pub(crate) fn cross_attention_cached(
    x: &Matrix,
    y: &Matrix,
    p: &AttentionParams,
) -> Result<(Matrix, AttentionCache)> {
    let d = p.width();
    if x.cols() != d || y.cols() != d {
        return Err(shape_err(
            "cross_attention",
            format!("token widths {} / {} for D = {d}", x.cols(), y.cols()),
        ));
    }
    let queries = x.matmul(&p.w_q)?;
    let keys = y.matmul(&p.w_k)?;
    let (attn, heads) = attention_from_projections(&queries, &keys, p.heads);
    Ok((
        attn,
        AttentionCache {
            queries,
            keys,
            heads,
        },
    ))
}

/// Head-averaged attention from already projected queries and keys.
pub(crate) fn attention_from_projections(
    queries: &Matrix,
    keys: &Matrix,
    heads: usize,
) -> (Matrix, Vec<Matrix>) {
    let d = queries.cols();
    let hd = d / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut avg = Matrix::zeros(queries.rows(), keys.rows());
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut logits = Matrix::zeros(queries.rows(), keys.rows());
        for i in 0..queries.rows() {
            let q = &queries.row(i)[h * hd..(h + 1) * hd];
            for j in 0..keys.rows() {
                let k = &keys.row(j)[h * hd..(h + 1) * hd];
                logits.set(i, j, dot(q, k) * scale);
            }
        }
        let probs = softmax_rows(&logits);
        for (a, v) in avg.data_mut().iter_mut().zip(probs.data()) {
            *a += v / heads as f64;
        }
        per_head.push(probs);
    }
    (avg, per_head)
}

/// Gradients of one cross-attention with respect to its inputs and params.
pub(crate) struct AttentionGrads {
    pub x: Matrix,
    pub y: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
}

pub(crate) fn cross_attention_backward(
    x: &Matrix,
    y: &Matrix,
    p: &AttentionParams,
    cache: &AttentionCache,
    grad_attn: &Matrix,
) -> AttentionGrads {
    let d = p.width();
    let heads = p.heads;
    let hd = d / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut grad_q = Matrix::zeros(cache.queries.rows(), d);
    let mut grad_k = Matrix::zeros(cache.keys.rows(), d);
    let grad_head = grad_attn.scale(1.0 / heads as f64);
    for (h, probs) in cache.heads.iter().enumerate() {
        let grad_logits = softmax_rows_backward(probs, &grad_head);
        for i in 0..grad_logits.rows() {
            for j in 0..grad_logits.cols() {
                let g = grad_logits.get(i, j) * scale;
                if g == 0.0 {
                    continue;
                }
                for c in h * hd..(h + 1) * hd {
                    let gq = grad_q.get(i, c) + g * cache.keys.get(j, c);
                    grad_q.set(i, c, gq);
                    let gk = grad_k.get(j, c) + g * cache.queries.get(i, c);
                    grad_k.set(j, c, gk);
                }
            }
        }
    }
    AttentionGrads {
        x: grad_q.matmul_t(&p.w_q).expect("attention grad shape"),
        y: grad_k.matmul_t(&p.w_k).expect("attention grad shape"),
        w_q: x.t_matmul(&grad_q).expect("attention grad shape"),
        w_k: y.t_matmul(&grad_k).expect("attention grad shape"),
    }
}

/// Axis of a region × tracklet × prompt tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Region,
    Tracklet,
    Prompt,
}

/// Core tensor contracted against the three token families.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoreKind {
    /// Identity core: `T[i,j,k] = Σ_d e[i,d] x[j,d] p[k,d]`.
    #[default]
    Superdiagonal,
    /// All-ones core: `T[i,j,k] = (Σ_d e[i,d])(Σ_d x[j,d])(Σ_d p[k,d])`, always rank one.
    AllOnes,
}

impl std::str::FromStr for CoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "superdiagonal" => Ok(Self::Superdiagonal),
            "all-ones" => Ok(Self::AllOnes),
            other => Err(Error::Config(format!("unknown core kind `{other}`"))),
        }
    }
}

/// Dense M × N × K tensor in (region, tracklet, prompt) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(m: usize, n: usize, k: usize) -> Self {
        Self {
            dims: (m, n, k),
            data: vec![0.0; m * n * k],
        }
    }

    pub fn from_vec(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(shape_err(
                "Tensor3::from_vec",
                format!("{} values for dims {dims:?}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn dim(&self, axis: Axis) -> usize {
        match axis {
            Axis::Region => self.dims.0,
            Axis::Tracklet => self.dims.1,
            Axis::Prompt => self.dims.2,
        }
    }

    /// Sum over the prompt axis, giving an M × N matrix.
    pub fn sum_prompt_axis(&self) -> Matrix {
        let (m, n, k) = self.dims;
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let o = self.offset(i, j, 0);
                out.set(i, j, self.data[o..o + k].iter().sum());
            }
        }
        out
    }

    /// Sum over the region axis, giving an N × K matrix.
    pub fn sum_region_axis(&self) -> Matrix {
        let (m, n, k) = self.dims;
        let mut out = Matrix::zeros(n, k);
        for i in 0..m {
            for j in 0..n {
                let o = self.offset(i, j, 0);
                for (c, v) in self.data[o..o + k].iter().enumerate() {
                    let cur = out.get(j, c);
                    out.set(j, c, cur + v);
                }
            }
        }
        out
    }
}

/// Contracts the core tensor with the three token matrices along modes 1-3.
pub fn triple_correlation(e: &Matrix, x: &Matrix, p: &Matrix, core: CoreKind) -> Result<Tensor3> {
    let d = e.cols();
    if x.cols() != d || p.cols() != d {
        return Err(shape_err(
            "triple_correlation",
            format!("widths {} / {} / {}", e.cols(), x.cols(), p.cols()),
        ));
    }
    let (m, n, k) = (e.rows(), x.rows(), p.rows());
    let mut t = Tensor3::zeros(m, n, k);
    match core {
        CoreKind::Superdiagonal => {
            let mut ex = vec![0.0; d];
            for i in 0..m {
                let er = e.row(i);
                for j in 0..n {
                    for ((dst, a), b) in ex.iter_mut().zip(er).zip(x.row(j)) {
                        *dst = a * b;
                    }
                    let o = t.offset(i, j, 0);
                    for c in 0..k {
                        t.data[o + c] = dot(&ex, p.row(c));
                    }
                }
            }
        }
        CoreKind::AllOnes => {
            let se: Vec<f64> = e.row_iter().map(|r| r.iter().sum()).collect();
            let sx: Vec<f64> = x.row_iter().map(|r| r.iter().sum()).collect();
            let sp: Vec<f64> = p.row_iter().map(|r| r.iter().sum()).collect();
            for i in 0..m {
                for j in 0..n {
                    for c in 0..k {
                        t.set(i, j, c, se[i] * sx[j] * sp[c]);
                    }
                }
            }
        }
    }
    Ok(t)
}

/// Horizontal (`T_{i::}`), lateral (`T_{:j:}`) or frontal (`T_{::k}`) slice.
///
/// Region slices are N × K, tracklet slices M × K and prompt slices M × N.
pub fn tensor_slice(t: &Tensor3, axis: Axis, index: usize) -> Result<Matrix> {
    let len = t.dim(axis);
    if index >= len {
        return Err(Error::IndexOutOfRange {
            what: "tensor axis",
            index,
            len,
        });
    }
    let (m, n, k) = t.dims();
    let out = match axis {
        Axis::Region => {
            let o = t.offset(index, 0, 0);
            Matrix::from_vec(n, k, t.data[o..o + n * k].to_vec())?
        }
        Axis::Tracklet => {
            let mut s = Matrix::zeros(m, k);
            for i in 0..m {
                let o = t.offset(i, index, 0);
                s.row_mut(i).copy_from_slice(&t.data[o..o + k]);
            }
            s
        }
        Axis::Prompt => {
            let mut s = Matrix::zeros(m, n);
            for i in 0..m {
                for j in 0..n {
                    s.set(i, j, t.get(i, j, index));
                }
            }
            s
        }
    };
    Ok(out)
}

/// Inverse of slicing every index along `axis`.
pub fn stack_slices(slices: &[Matrix], axis: Axis) -> Result<Tensor3> {
    let Some(first) = slices.first() else {
        return Err(shape_err("stack_slices", "no slices"));
    };
    let (a, b) = first.shape();
    if slices.iter().any(|s| s.shape() != (a, b)) {
        return Err(shape_err("stack_slices", "slices differ in shape"));
    }
    let count = slices.len();
    let dims = match axis {
        Axis::Region => (count, a, b),
        Axis::Tracklet => (a, count, b),
        Axis::Prompt => (a, b, count),
    };
    let mut t = Tensor3::zeros(dims.0, dims.1, dims.2);
    for (idx, s) in slices.iter().enumerate() {
        for r in 0..a {
            for c in 0..b {
                let v = s.get(r, c);
                match axis {
                    Axis::Region => t.set(idx, r, c, v),
                    Axis::Tracklet => t.set(r, idx, c, v),
                    Axis::Prompt => t.set(r, c, idx, v),
                }
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&b).unwrap(), b);

        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let z = Matrix::zeros(2, 1);
        assert_eq!(a.matmul(&z).unwrap(), Matrix::zeros(1, 1));

        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let v = Matrix::from_rows(&[[5.0], [6.0]]).unwrap();
        let out = a.matmul(&v).unwrap();
        assert_eq!(out.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(4, 5, &mut rng);
        let b = random(6, 5, &mut rng);
        let c = random(4, 3, &mut rng);
        assert!(a.matmul_t(&b).unwrap().max_abs_diff(&a.matmul(&b.transpose()).unwrap()) < 1e-14);
        assert!(a.t_matmul(&c).unwrap().max_abs_diff(&a.transpose().matmul(&c).unwrap()) < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[[0.0, 0.0], [2f64.ln(), 0.0], [1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&m);
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!(s.is_finite());
        assert!((s.get(2, 0) - 1.0).abs() < 1e-15);
        assert!(s.get(2, 1) < 1e-300);
    }

    #[test]
    fn layer_norm_examples() {
        let g = [1.0; 2];
        let b = [0.0; 2];
        let c = layer_norm(&Matrix::from_rows(&[[3.0, 3.0]]).unwrap(), &g, &b).unwrap();
        assert_eq!(c.row(0), &[0.0, 0.0]);
        let u = layer_norm(&Matrix::from_rows(&[[1.0, -1.0]]).unwrap(), &g, &b).unwrap();
        assert!((u.get(0, 0) - 1.0).abs() < 1e-5 && (u.get(0, 1) + 1.0).abs() < 1e-5);

        // A constant row collapses to the bias vector.
        let bias = [0.25, -0.5];
        let c = layer_norm(&Matrix::from_rows(&[[7.0, 7.0]]).unwrap(), &[2.0, 3.0], &bias).unwrap();
        assert_eq!(c.row(0), &bias);
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(5, 64, &mut rng).scale(7.0);
        let gain = vec![1.5; 64];
        let bias: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = layer_norm(&x, &gain, &bias).unwrap();
        let bias_mean = bias.iter().sum::<f64>() / 64.0;
        for r in y.row_iter() {
            // Recover the normalized row and check its moments.
            let z: Vec<f64> = r.iter().zip(&bias).map(|(v, b)| (v - b) / 1.5).collect();
            let mean = z.iter().sum::<f64>() / 64.0;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
            let out_mean = r.iter().sum::<f64>() / 64.0;
            assert!((out_mean - bias_mean).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_single_key_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(5, 8, &mut rng);
        let y = random(1, 8, &mut rng);
        let p = AttentionParams::identity(8, 2).unwrap();
        let a = cross_attention(&x, &y, &p).unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn cross_attention_orthonormal_is_diagonal_dominant() {
        // Hand-evaluated: logits are δ_ij / √3, so the diagonal is
        // e^{1/√3} / (e^{1/√3} + 2).
        let x = Matrix::identity(3);
        let p = AttentionParams::identity(3, 1).unwrap();
        let a = cross_attention(&x, &x, &p).unwrap();
        let e = (1.0 / 3f64.sqrt()).exp();
        for i in 0..3 {
            let s: f64 = a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..3 {
                let want = if i == j { e / (e + 2.0) } else { 1.0 / (e + 2.0) };
                assert!((a.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(4, 8, &mut rng);
        let y = random(3, 8, &mut rng);
        let p = AttentionParams::new(2, random(8, 8, &mut rng), random(8, 8, &mut rng)).unwrap();
        let a = cross_attention(&x, &y, &p).unwrap();
        let perm = [2, 0, 1];
        let yp = y.gather_rows(&perm).unwrap();
        let ap = cross_attention(&x, &yp, &p).unwrap();
        for i in 0..4 {
            for (c, &src) in perm.iter().enumerate() {
                assert!((ap.get(i, c) - a.get(i, src)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_attention_rejects_width_mismatch() {
        let p = AttentionParams::identity(4, 1).unwrap();
        assert!(cross_attention(&Matrix::zeros(2, 4), &Matrix::zeros(2, 3), &p).is_err());
        assert!(AttentionParams::identity(6, 4).is_err());
    }

    #[test]
    fn triple_correlation_examples() {
        let e = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let p = Matrix::from_rows(&[[5.0, 6.0]]).unwrap();
        let t = triple_correlation(&e, &x, &p, CoreKind::Superdiagonal).unwrap();
        assert_eq!(t.get(0, 0, 0), 63.0);
        let t = triple_correlation(&e, &x, &p, CoreKind::AllOnes).unwrap();
        assert_eq!(t.get(0, 0, 0), 231.0);
        assert!("diagonal".parse::<CoreKind>().is_err());
    }

    #[test]
    fn zero_region_row_gives_zero_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut e = random(3, 4, &mut rng);
        e.row_mut(1).fill(0.0);
        let t = triple_correlation(&e, &random(2, 4, &mut rng), &random(3, 4, &mut rng), CoreKind::Superdiagonal)
            .unwrap();
        let s = tensor_slice(&t, Axis::Region, 1).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lateral_slice_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (e, x, p) = (random(3, 5, &mut rng), random(3, 5, &mut rng), random(3, 5, &mut rng));
        let t = triple_correlation(&e, &x, &p, CoreKind::Superdiagonal).unwrap();
        for j in 0..3 {
            let s = tensor_slice(&t, Axis::Tracklet, j).unwrap();
            for i in 0..3 {
                for k in 0..3 {
                    let mut want = 0.0;
                    for d in 0..5 {
                        want += e.get(i, d) * x.get(j, d) * p.get(k, d);
                    }
                    assert!((s.get(i, k) - want).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn slicing_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = triple_correlation(
            &random(3, 4, &mut rng),
            &random(2, 4, &mut rng),
            &random(4, 4, &mut rng),
            CoreKind::Superdiagonal,
        )
        .unwrap();
        for axis in [Axis::Region, Axis::Tracklet, Axis::Prompt] {
            let slices: Vec<Matrix> =
                (0..t.dim(axis)).map(|i| tensor_slice(&t, axis, i).unwrap()).collect();
            assert_eq!(stack_slices(&slices, axis).unwrap(), t);
        }
        assert!(matches!(
            tensor_slice(&t, Axis::Region, 3),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(2, 6, &mut rng);
        let gain: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
        let bias = vec![0.1; 6];
        let w = random(2, 6, &mut rng);
        let loss = |x: &Matrix| -> f64 {
            let y = layer_norm(x, &gain, &bias).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer_norm_cached(&x, &gain, &bias).unwrap();
        let mut gg = vec![0.0; 6];
        let mut gb = vec![0.0; 6];
        let gx = layer_norm_backward(&cache, &gain, &w, &mut gg, &mut gb);
        let eps = 1e-6;
        for idx in 0..12 {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((num - gx.data()[idx]).abs() < 1e-7, "{num} vs {}", gx.data()[idx]);
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(3, 4, &mut rng);
        let y = random(2, 4, &mut rng);
        let p = AttentionParams::new(2, random(4, 4, &mut rng), random(4, 4, &mut rng)).unwrap();
        let w = random(3, 2, &mut rng);
        let loss = |x: &Matrix, y: &Matrix, p: &AttentionParams| -> f64 {
            let a = cross_attention(x, y, p).unwrap();
            a.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = cross_attention_cached(&x, &y, &p).unwrap();
        let g = cross_attention_backward(&x, &y, &p, &cache, &w);
        let eps = 1e-6;
        for idx in 0..16 {
            let mut pp = p.clone();
            pp.w_q.data_mut()[idx] += eps;
            let mut pm = p.clone();
            pm.w_q.data_mut()[idx] -= eps;
            let num = (loss(&x, &y, &pp) - loss(&x, &y, &pm)) / (2.0 * eps);
            assert!((num - g.w_q.data()[idx]).abs() < 1e-8);
            let mut pp = p.clone();
            pp.w_k.data_mut()[idx] += eps;
            let mut pm = p.clone();
            pm.w_k.data_mut()[idx] -= eps;
            let num = (loss(&x, &y, &pp) - loss(&x, &y, &pm)) / (2.0 * eps);
            assert!((num - g.w_k.data()[idx]).abs() < 1e-8);
        }
        for idx in 0..8 {
            let mut yp = y.clone();
            yp.data_mut()[idx] += eps;
            let mut ym = y.clone();
            ym.data_mut()[idx] -= eps;
            let num = (loss(&x, &yp, &p) - loss(&x, &ym, &p)) / (2.0 * eps);
            assert!((num - g.y.data()[idx]).abs() < 1e-8);
        }
        for idx in 0..12 {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let num = (loss(&xp, &y, &p) - loss(&xm, &y, &p)) / (2.0 * eps);
            assert!((num - g.x.data()[idx]).abs() < 1e-8);
        }
    }
}
