//! Dense row-major `f64` tensors and the plain (non-recording) kernels that
//! the tape reuses for its forward and backward passes.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return dim_err(format!("shape {shape:?} has an empty dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(&[n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(&[rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(shape, data).expect("randn: invalid shape")
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Returns `(rows, cols)` for a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => dim_err(format!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return dim_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self
            .zip_map(other, |a, b| (a - b).abs())?
            .data
            .into_iter()
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers the listed rows of a matrix, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index(format!("row {i} of {r}")));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new(&[rows.len(), c], out)
    }

    /// Gathers the listed columns of a matrix, in order.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Index(format!("column {bad} of {c}")));
        }
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = self.row(i);
            out.extend(cols.iter().map(|&j| row[j]));
        }
        Tensor::new(&[r, cols.len()], out)
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let api = a[p * k + i];
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// Matrix product of `a[m×k]` and `b[k×n]`.
pub fn gemm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!("gemm inner dimensions {k} vs {k2}"));
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

pub(crate) fn conv_out_len(t: usize, k: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    if t < k {
        return Err(Error::InputTooShort { len: t, kernel: k });
    }
    Ok((t - k) / stride + 1)
}

/// Valid-padding strided cross-correlation over a batch:
/// `input[b, c_in, t]`, `kernel[c_out, c_in, k]` → `out[b, c_out, t_out]`.
pub(crate) fn conv1d_batch_raw(
    input: &[f64],
    kernel: &[f64],
    (batch, c_in, t): (usize, usize, usize),
    (c_out, k): (usize, usize),
    stride: usize,
    t_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * c_out * t_out];
    let cols = im2col_len(c_in, k, t_out);
    let mut col = vec![0.0; cols];
    for b in 0..batch {
        im2col(&input[b * c_in * t..(b + 1) * c_in * t], c_in, t, k, stride, t_out, &mut col);
        matmul_acc(
            kernel,
            &col,
            &mut out[b * c_out * t_out..(b + 1) * c_out * t_out],
            c_out,
            c_in * k,
            t_out,
        );
    }
    out
}

pub(crate) fn im2col_len(c_in: usize, k: usize, t_out: usize) -> usize {
    c_in * k * t_out
}

/// Unrolls one sample `x[c_in, t]` into `col[(c_in·k), t_out]`.
pub(crate) fn im2col(
    x: &[f64],
    c_in: usize,
    t: usize,
    k: usize,
    stride: usize,
    t_out: usize,
    col: &mut [f64],
) {
    for c in 0..c_in {
        for j in 0..k {
            let dst = &mut col[(c * k + j) * t_out..(c * k + j + 1) * t_out];
            for (o, d) in dst.iter_mut().enumerate() {
                *d = x[c * t + o * stride + j];
            }
        }
    }
}

/// Scatters `col[(c_in·k), t_out]` back into `dx[c_in, t]` (accumulating).
pub(crate) fn col2im_acc(
    col: &[f64],
    c_in: usize,
    t: usize,
    k: usize,
    stride: usize,
    t_out: usize,
    dx: &mut [f64],
) {
    for c in 0..c_in {
        for j in 0..k {
            let src = &col[(c * k + j) * t_out..(c * k + j + 1) * t_out];
            for (o, &v) in src.iter().enumerate() {
                dx[c * t + o * stride + j] += v;
            }
        }
    }
}

/// Single-sample convolution: `input[c_in × t]`, `kernel[c_out × c_in × k]`.
pub fn conv1d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let (c_in, t) = input.dims2()?;
    let (c_out, kc_in, k) = match kernel.shape()[..] {
        [a, b, c] => (a, b, c),
        _ => return dim_err(format!("kernel must be 3-D, got {:?}", kernel.shape())),
    };
    if kc_in != c_in {
        return dim_err(format!("kernel expects {kc_in} input channels, got {c_in}"));
    }
    let t_out = conv_out_len(t, k, stride)?;
    let out = conv1d_batch_raw(&input.data, &kernel.data, (1, c_in, t), (c_out, k), stride, t_out);
    Tensor::new(&[c_out, t_out], out)
}

/// `(x − mean) / sqrt(popvar + eps) · gain + bias` over a single vector.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.numel();
    if gain.numel() != d || bias.numel() != d {
        return dim_err("layer_norm affine length");
    }
    let mut out = vec![0.0; d];
    layer_norm_row(x.data(), gain.data(), bias.data(), eps, &mut out);
    Tensor::new(x.shape(), out)
}

/// Normalises one row in place into `out`; returns `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
    inv
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Scaled dot-product attention `softmax(q·kᵀ/√d)·v`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (tq, d) = q.dims2()?;
    let (tk, dk) = k.dims2()?;
    let (tv, dv) = v.dims2()?;
    if d != dk || tk != tv {
        return dim_err("attention shapes");
    }
    let mut scores = vec![0.0; tq * tk];
    matmul_bt_acc(q.data(), k.data(), &mut scores, tq, d, tk);
    let scale = 1.0 / (d as f64).sqrt();
    for row in scores.chunks_mut(tk) {
        row.iter_mut().for_each(|s| *s *= scale);
        softmax_row(row);
    }
    let mut out = vec![0.0; tq * dv];
    matmul_acc(&scores, v.data(), &mut out, tq, tk, dv);
    Tensor::new(&[tq, dv], out)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Error function to near machine precision (Chebyshev fit of erfc,
/// Numerical Recipes `erfccheb`).
pub fn erf(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 - erfc_cheb(x)
    } else {
        erfc_cheb(-x) - 1.0
    }
}

fn erfc_cheb(z: f64) -> f64 {
    const COF: [f64; 28] = [
        -1.3026537197817094,
        6.4196979235649026e-1,
        1.9476473204185836e-2,
        -9.561514786808631e-3,
        -9.46595344482036e-4,
        3.66839497852761e-4,
        4.2523324806907e-5,
        -2.0278578112534e-5,
        -1.624290004647e-6,
        1.303655835580e-6,
        1.5626441722e-8,
        -8.5238095915e-8,
        6.529054439e-9,
        5.059343495e-9,
        -9.91364156e-10,
        -2.27365122e-10,
        9.6467911e-11,
        2.394038e-12,
        -6.886027e-12,
        8.94487e-13,
        3.13092e-13,
        -1.12708e-13,
        3.81e-16,
        7.106e-15,
        -1.523e-15,
        -9.4e-17,
        1.21e-16,
        -2.8e-17,
    ];
    let t = 2.0 / (2.0 + z);
    let ty = 4.0 * t - 2.0;
    let mut d = 0.0;
    let mut dd = 0.0;
    for &c in COF[1..].iter().rev() {
        let tmp = d;
        d = ty * d - dd + c;
        dd = tmp;
    }
    t * (-z * z + 0.5 * (COF[0] + ty * d) - dd).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_gemm(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn gemm_identity_and_dot() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(gemm(&Tensor::identity(2), &x).unwrap(), x);
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(gemm(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
            let b = Tensor::randn(&[3, 3], 1.0, &mut rng);
            let diff = gemm(&a, &b).unwrap().max_abs_diff(&naive_gemm(&a, &b)).unwrap();
            assert!(diff <= 1e-12);
        }
    }

    #[test]
    fn gemm_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(gemm(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1d_worked_examples() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(conv1d(&x, &k, 1).unwrap().data(), &[3.0, 5.0]);

        let x = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(conv1d(&x, &k, 2).unwrap().data(), &[1.0, 3.0]);
    }

    #[test]
    fn conv1d_too_short() {
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let k = Tensor::new(&[1, 1, 3], vec![1.0; 3]).unwrap();
        assert!(matches!(conv1d(&x, &k, 1), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn conv1d_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for stride in 1..=3 {
            let x = Tensor::randn(&[3, 17], 1.0, &mut rng);
            let k = Tensor::randn(&[4, 3, 5], 1.0, &mut rng);
            let got = conv1d(&x, &k, stride).unwrap();
            let t_out = (17 - 5) / stride + 1;
            for co in 0..4 {
                for o in 0..t_out {
                    let mut s = 0.0;
                    for ci in 0..3 {
                        for j in 0..5 {
                            s += k.data()[(co * 3 + ci) * 5 + j] * x.data()[ci * 17 + o * stride + j];
                        }
                    }
                    assert!((got.data()[co * t_out + o] - s).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let x = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 1e-15).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);

        let c = Tensor::full(&[3], 4.2);
        let g = Tensor::vector(vec![2.0, -1.0, 0.5]).unwrap();
        let b = Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(layer_norm(&c, &g, &b, 1e-5).unwrap(), b);

        let x = Tensor::vector(vec![0.0, 2.0, 4.0]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 0.0).unwrap();
        let want = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_examples() {
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        // identical keys: uniform weights
        let k = Tensor::from_rows(&[vec![0.3, 0.1], vec![0.3, 0.1]]).unwrap();
        let q = Tensor::from_rows(&[vec![5.0, -2.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-12 && (out.data()[1] - 4.0).abs() < 1e-12);

        // single key
        let out = attention(&q, &Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap(), &Tensor::from_rows(&[vec![7.0, 8.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[7.0, 8.0]);

        // scores (0, ln 3) → weights (1/4, 3/4); d = 1 so no extra scaling
        let q = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.0], vec![3f64.ln()]]).unwrap();
        let v = Tensor::from_rows(&[vec![4.0], vec![8.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        assert!((out.data()[0] - (0.25 * 4.0 + 0.75 * 8.0)).abs() < 1e-12);
    }

    #[test]
    fn erf_reference_values() {
        // erf(0.5), erf(1), erf(2) from tables
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-14);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-14);
        assert!((erf(-2.0) + 0.995_322_265_018_952_7).abs() < 1e-14);
        assert_eq!(gelu(0.0), 0.0);
    }
}
