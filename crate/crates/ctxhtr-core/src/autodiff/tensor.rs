//! Dense row-major tensors and the raw numeric kernels shared by the graph
//! ops and the cache-friendly inference path.

use std::fmt;

/// Element type of the engine: f32 for training, f64 for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + Send
    + Sync
    + Default
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense tensor: a shape and a row-major buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ..]", self.data[0], self.data[1])
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match buffer length {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn convert<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| T::from_f64(v.as_f64())).collect())
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }
}

// ── Matrix kernels ──────────────────────────────────────────────────────────
//
// All kernels use a fixed serial reduction order so that identical inputs
// produce bitwise-identical outputs.

/// `a [n,k] · b [k,m] -> [n,m]`
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, k) = dims2(a);
    let (k2, m) = dims2(b);
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![S::zero(); n * m];
    let ad = a.data();
    let bd = b.data();
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == S::zero() {
                continue;
            }
            let brow = &bd[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `a [n,k] · bᵀ, b [m,k] -> [n,m]` (row-by-row dot products)
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, k) = dims2(a);
    let (m, k2) = dims2(b);
    assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
    let mut out = vec![S::zero(); n * m];
    let ad = a.data();
    let bd = b.data();
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for j in 0..m {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] = acc;
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `aᵀ · b, a [k,n], b [k,m] -> [n,m]`
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (k, n) = dims2(a);
    let (k2, m) = dims2(b);
    assert_eq!(k, k2, "matmul_tn inner dims {k} vs {k2}");
    let mut out = vec![S::zero(); n * m];
    let ad = a.data();
    let bd = b.data();
    for kk in 0..k {
        let arow = &ad[kk * n..(kk + 1) * n];
        let brow = &bd[kk * m..(kk + 1) * m];
        for i in 0..n {
            let aki = arow[i];
            if aki == S::zero() {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += aki * brow[j];
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

fn dims2<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    assert_eq!(t.shape().len(), 2, "expected rank-2 tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1])
}

/// Row-wise numerically stable softmax of a `[n,m]` tensor.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, m) = dims2(x);
    let mut out = x.data().to_vec();
    for i in 0..n {
        softmax_row(&mut out[i * m..(i + 1) * m]);
    }
    Tensor::new(vec![n, m], out)
}

/// In-place stable softmax of one row.
pub fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mut max = S::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization with per-feature affine parameters.
pub fn layer_norm_rows<S: Scalar>(x: &Tensor<S>, gamma: &[S], beta: &[S]) -> Tensor<S> {
    let (n, d) = dims2(x);
    assert_eq!(gamma.len(), d);
    assert_eq!(beta.len(), d);
    let eps = S::from_f64(LN_EPS);
    let mut out = vec![S::zero(); n * d];
    let xd = x.data();
    for i in 0..n {
        let row = &xd[i * d..(i + 1) * d];
        let orow = &mut out[i * d..(i + 1) * d];
        let (mean, var) = row_mean_var(row);
        let inv_std = (var + eps).sqrt().recip();
        for j in 0..d {
            orow[j] = (row[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
    Tensor::new(vec![n, d], out)
}

pub fn row_mean_var<S: Scalar>(row: &[S]) -> (S, S) {
    let n = S::from_f64(row.len() as f64);
    let mut mean = S::zero();
    for &v in row {
        mean += v;
    }
    mean /= n;
    let mut var = S::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    (mean, var)
}

// ── Convolution kernels ──────────────────────────────────────────────────────

/// Unrolls `x [C,H,W]` into patch columns `[C*kh*kw, Ho*Wo]`.
pub fn im2col<S: Scalar>(
    x: &Tensor<S>,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor<S> {
    let (c, h, w) = dims3(x);
    let (ho, wo) = conv_out_dims(h, w, kh, kw, stride, pad);
    let rows = c * kh * kw;
    let cols = ho * wo;
    let mut out = vec![S::zero(); rows * cols];
    let xd = x.data();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let orow = &mut out[r * cols..(r + 1) * cols];
                for oi in 0..ho {
                    let yi = (oi * stride.0 + ki) as isize - pad.0 as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let xrow = &xd[(ci * h + yi as usize) * w..(ci * h + yi as usize + 1) * w];
                    for oj in 0..wo {
                        let xj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        orow[oi * wo + oj] = xrow[xj as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Scatter-adds patch columns back into image space; adjoint of [`im2col`].
pub fn col2im<S: Scalar>(
    col: &Tensor<S>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor<S> {
    let (ho, wo) = conv_out_dims(h, w, kh, kw, stride, pad);
    let cols = ho * wo;
    assert_eq!(col.shape(), &[c * kh * kw, cols]);
    let mut out = vec![S::zero(); c * h * w];
    let cd = col.data();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let crow = &cd[r * cols..(r + 1) * cols];
                for oi in 0..ho {
                    let yi = (oi * stride.0 + ki) as isize - pad.0 as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let base = (ci * h + yi as usize) * w;
                    for oj in 0..wo {
                        let xj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        out[base + xj as usize] += crow[oi * wo + oj];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (usize, usize) {
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (w + 2 * pad.1 - kw) / stride.1 + 1;
    (ho, wo)
}

pub fn dims3<S: Scalar>(t: &Tensor<S>) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected rank-3 tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}
