//! Dense row-major f64 tensors and the primitives the model is built from.
//!
//! Every primitive has a hand-written backward. Matrix products accumulate in
//! ascending inner index so an independent triple loop reproduces them
//! bit-for-bit.

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| std * rng.normal())
    }

    pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| rng.truncated_normal(std))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        if self.cols() == 0 {
            0
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape(self, other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        same_shape(self, other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start > end || end > c {
            return Err(dim_err!("column range {start}..{end} outside {c}"));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::new(&[r, w], out)
    }

    /// Rows `[start, end)` along the leading axis of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start > end || end > r {
            return Err(dim_err!("row range {start}..{end} outside {r}"));
        }
        Tensor::new(&[end - start, c], self.data[start * c..end * c].to_vec())
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err!("expected a 2-D tensor, got shape {s:?}")),
        }
    }

    /// Sum over the leading axis of a 2-D tensor.
    pub fn sum_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for i in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Tensor { shape: vec![c], data: out }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape, b.shape));
    }
    Ok(())
}

/// Horizontal concatenation of 2-D tensors with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map(|p| p.rows()).unwrap_or(0);
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != rows {
            return Err(dim_err!("concat_cols: row counts {rows} and {r} differ"));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(&[rows, total], out)
}

/// Vertical concatenation of 2-D tensors with equal column counts.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts.first().map(|p| p.cols()).unwrap_or(0);
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (r, c) = p.dims2()?;
        if c != cols {
            return Err(dim_err!("concat_rows: column counts {cols} and {c} differ"));
        }
        rows += r;
        out.extend_from_slice(p.data());
    }
    Tensor::new(&[rows, cols], out)
}

/// `c[i,j] = sum_l a[i,l] * b[l,j]`, accumulated in ascending `l`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.dims2()?;
    let (p2, n) = b.dims2()?;
    if p != p2 {
        return Err(dim_err!("matmul inner extents {p} and {p2} differ"));
    }
    let mut c = vec![0.0; m * n];
    // i-l-j loop order keeps the per-element accumulation ascending in l.
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..p {
            let av = a.data[i * p + l];
            let brow = &b.data[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], c)
}

/// `aᵀ·b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, m) = a.dims2()?;
    let (p2, n) = b.dims2()?;
    if p != p2 {
        return Err(dim_err!("matmul_tn leading extents {p} and {p2} differ"));
    }
    let mut c = vec![0.0; m * n];
    for l in 0..p {
        let arow = &a.data[l * m..(l + 1) * m];
        let brow = &b.data[l * n..(l + 1) * n];
        for (i, av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], c)
}

/// `a·bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.dims2()?;
    let (n, p2) = b.dims2()?;
    if p != p2 {
        return Err(dim_err!("matmul_nt inner extents {p} and {p2} differ"));
    }
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = 0.0;
            for l in 0..p {
                acc += arow[l] * brow[l];
            }
            c[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], c)
}

/// Gradients of `c = a·b`: `(dc·bᵀ, aᵀ·dc)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, _) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if dc.shape() != [m, n] {
        return Err(dim_err!("matmul upstream {:?}, expected [{m}, {n}]", dc.shape()));
    }
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

pub fn transpose_backward(dy: &Tensor) -> Result<Tensor> {
    transpose(dy)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn add_backward(dy: &Tensor) -> (Tensor, Tensor) {
    (dy.clone(), dy.clone())
}

/// Adds a `[cols]` vector to every row.
pub fn add_row_vector(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    if v.len() != a.cols() {
        return Err(dim_err!("row vector of {} against {} columns", v.len(), a.cols()));
    }
    let mut out = a.clone();
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(v.data()) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

pub fn scale_backward(dy: &Tensor, c: f64) -> Tensor {
    scale(dy, c)
}

/// Rows of `a` (viewed as `rows × cols`) picked by `index`.
pub fn gather_rows(a: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(index.len() * c);
    for &i in index {
        if i >= r {
            return Err(dim_err!("gather index {i} outside {r} rows"));
        }
        out.extend_from_slice(a.row(i));
    }
    Tensor::new(&[index.len(), c], out)
}

/// Scatter-add of `dy` rows back to a `rows × cols` gradient.
pub fn gather_rows_backward(dy: &Tensor, index: &[usize], rows: usize) -> Result<Tensor> {
    let c = dy.cols();
    if dy.rows() != index.len() {
        return Err(dim_err!("gather upstream has {} rows for {} indices", dy.rows(), index.len()));
    }
    let mut out = Tensor::zeros(&[rows, c]);
    for (k, &i) in index.iter().enumerate() {
        if i >= rows {
            return Err(dim_err!("gather index {i} outside {rows} rows"));
        }
        for (o, v) in out.row_mut(i).iter_mut().zip(dy.row(k)) {
            *o += v;
        }
    }
    Ok(out)
}

/// Root-mean-square of a row.
pub fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt()
}

/// `gain ⊙ x / rms(x)` over the last axis. No epsilon: an all-zero row is an
/// error. Returns the output and the per-row rms values for the backward.
pub fn rms_norm_with_stats(x: &Tensor, gain: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let d = x.cols();
    if d == 0 {
        return Err(dim_err!("rms_norm over an empty axis"));
    }
    if gain.len() != d {
        return Err(dim_err!("rms_norm gain has {} entries for width {d}", gain.len()));
    }
    let mut out = x.clone();
    let mut stats = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = rms(x.row(i));
        if r == 0.0 {
            return Err(Error::Degenerate(format!("rms_norm row {i} is all zeros")));
        }
        for (o, g) in out.row_mut(i).iter_mut().zip(gain.data()) {
            *o = g * (*o / r);
        }
        stats.push(r);
    }
    Ok((out, stats))
}

pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    rms_norm_with_stats(x, gain).map(|(y, _)| y)
}

/// Gradients of `rms_norm` given the forward input and its row rms values.
pub fn rms_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    row_rms: &[f64],
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    same_shape(x, dy, "rms_norm_backward")?;
    let d = x.cols();
    if row_rms.len() != x.rows() {
        return Err(Error::State(format!(
            "rms_norm_backward has {} retained rows, input has {}",
            row_rms.len(),
            x.rows()
        )));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = vec![0.0; d];
    for i in 0..x.rows() {
        let r = row_rms[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let mut dot = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] / r;
            dot += gain.data[j] * dyr[j] * xr[j];
        }
        let coeff = dot / (d as f64 * r * r * r);
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = gain.data[j] * dyr[j] / r - xr[j] * coeff;
        }
    }
    Ok((dx, Tensor::new(&[d], dgain)?))
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Gradient of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    same_shape(y, dy, "softmax_backward")?;
    let mut dx = dy.clone();
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dot: f64 = yr.iter().zip(dy.row(i)).map(|(a, b)| a * b).sum();
        for (o, yv) in dx.row_mut(i).iter_mut().zip(yr) {
            *o = yv * (*o - dot);
        }
    }
    Ok(dx)
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * std_normal_cdf(v))
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    same_shape(x, dy, "gelu_backward")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, g)| g * (std_normal_cdf(v) + v * std_normal_pdf(v)))
        .collect();
    Tensor::new(x.shape(), data)
}

/// A forward activation retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Saved<T>(Option<T>);

impl<T> Default for Saved<T> {
    fn default() -> Self {
        Saved(None)
    }
}

impl<T> Saved<T> {
    pub fn keep(value: T, retain: bool) -> Self {
        Saved(if retain { Some(value) } else { None })
    }

    pub fn get(&self, what: &str) -> Result<&T> {
        self.0
            .as_ref()
            .ok_or_else(|| Error::State(format!("activation `{what}` was not retained")))
    }
}
