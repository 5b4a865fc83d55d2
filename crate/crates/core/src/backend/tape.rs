//! Reverse-mode gradient tape.
//!
//! Every operation on a [`Tape`] evaluates eagerly, stores its output, and
//! records enough context to push gradients back to its inputs. Nodes are
//! appended in evaluation order, so the backward pass is a single reverse
//! sweep and is deterministic for identical inputs.

use std::cell::RefCell;

use super::tensor::{
    col2im_acc, conv_out_len, gelu, gelu_grad, im2col, layer_norm_row, matmul_at_acc, matmul_bt_acc, softmax_row, Tensor,
};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalisation uses batch statistics (training) or the
/// supplied running statistics (evaluation).
///
/// `Frozen` normalises with the running statistics like `Eval` but still
/// measures and returns the batch statistics, so training sees exactly the
/// function used at inference while the running estimates keep tracking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
    Frozen,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    RepeatRows(Var, usize),
    Scale(Var, f64),
    Transpose(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: NormMode,
    },
    MeanLastAxis(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Mse(Var, Var),
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm, per channel.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zero if `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn with2<T>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> T) -> T {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<T>(&self, a: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, super::tensor::gemm)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| x.add(y))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| x.sub(y))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| x.zip_map(y, |p, q| p * q))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds vector `row` to every row of matrix `a` (bias broadcast).
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (cols, n) = (*self.shape(a).last().unwrap(), self.with1(row, Tensor::numel));
        if n != cols {
            return dim_err(format!("row broadcast {n} onto {cols} columns"));
        }
        self.add_tiled(a, row)
    }

    /// Adds `b` to each consecutive block of `a` with `b`'s size, e.g. a
    /// `[K, h]` positional table to a `[B·K, h]` stack.
    pub fn add_tiled(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, t| {
            if t.numel() == 0 || x.numel() % t.numel() != 0 {
                return dim_err(format!("cannot tile {:?} over {:?}", t.shape(), x.shape()));
            }
            let mut data = x.data().to_vec();
            for chunk in data.chunks_mut(t.numel()) {
                chunk.iter_mut().zip(t.data()).for_each(|(d, v)| *d += v);
            }
            Tensor::new(x.shape(), data)
        })?;
        Ok(self.push(out, Op::AddTiled(a, b)))
    }

    /// Repeats each leading-axis row `times` times consecutively.
    pub fn repeat_rows(&self, a: Var, times: usize) -> Result<Var> {
        let out = self.with1(a, |x| {
            if times == 0 {
                return dim_err("repeat_rows by zero");
            }
            let lead = x.shape()[0];
            let inner = x.numel() / lead;
            let mut data = Vec::with_capacity(x.numel() * times);
            for r in x.data().chunks(inner) {
                for _ in 0..times {
                    data.extend_from_slice(r);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[0] = lead * times;
            Tensor::new(&shape, data)
        })?;
        Ok(self.push(out, Op::RepeatRows(a, times)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.with1(a, |x| x.scale(c));
        self.push(out, Op::Scale(a, c))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.with1(a, Tensor::transpose)?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let out = self.with1(a, |x| x.map(gelu));
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = self.with1(a, |x| {
            let (_, cols) = x.dims2()?;
            let mut data = x.data().to_vec();
            data.chunks_mut(cols).for_each(softmax_row);
            Tensor::new(x.shape(), data)
        })?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// Row-wise layer normalisation of a matrix with population variance.
    pub fn layer_norm_rows(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (g, b) = (&nodes[gain.0].value, &nodes[bias.0].value);
            let cols = *xv.shape().last().unwrap();
            if cols < 2 || g.numel() != cols || b.numel() != cols {
                return dim_err("layer_norm width");
            }
            let ones = vec![1.0; cols];
            let zeros = vec![0.0; cols];
            let mut out = vec![0.0; xv.numel()];
            let mut xhat = vec![0.0; xv.numel()];
            let mut inv_std = Vec::with_capacity(xv.numel() / cols);
            for (i, row) in xv.data().chunks(cols).enumerate() {
                let span = i * cols..(i + 1) * cols;
                let inv = layer_norm_row(row, &ones, &zeros, eps, &mut xhat[span.clone()]);
                inv_std.push(inv);
                for j in span {
                    out[j] = xhat[j] * g.data()[j % cols] + b.data()[j % cols];
                }
            }
            (Tensor::new(xv.shape(), out)?, xhat, inv_std)
        };
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// `input[b, c_in, t]` ⊛ `kernel[c_out, c_in, k]` with valid padding.
    pub fn conv1d(&self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let out = self.with2(input, kernel, |x, k| {
            let (b, c_in, t) = dims3(x)?;
            let (c_out, kc, kw) = dims3(k)?;
            if kc != c_in {
                return dim_err(format!("conv kernel expects {kc} channels, input has {c_in}"));
            }
            let t_out = conv_out_len(t, kw, stride)?;
            let data = super::tensor::conv1d_batch_raw(
                x.data(),
                k.data(),
                (b, c_in, t),
                (c_out, kw),
                stride,
                t_out,
            );
            Tensor::new(&[b, c_out, t_out], data)
        })?;
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                kernel,
                stride,
            },
        ))
    }

    /// Per-channel batch normalisation of `x[b, c, t]`.
    ///
    /// In [`NormMode::Train`] statistics come from the batch (over `b` and
    /// `t`) and are returned so the caller can update running estimates. In
    /// [`NormMode::Eval`] the given running statistics are used.
    pub fn batch_norm(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
        mode: NormMode,
    ) -> Result<(Var, BatchStats)> {
        let (out, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (g, b) = (&nodes[gain.0].value, &nodes[bias.0].value);
            let (nb, c, t) = dims3(xv)?;
            if g.numel() != c || b.numel() != c {
                return dim_err("batch_norm affine width");
            }
            let m = (nb * t) as f64;
            let batch_stats = || {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..nb {
                    for ci in 0..c {
                        let s = &xv.data()[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                        mean[ci] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for bi in 0..nb {
                    for ci in 0..c {
                        let s = &xv.data()[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                        var[ci] += s.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            };
            let running_stats = || -> Result<(Vec<f64>, Vec<f64>)> {
                let (rm, rv) = running.ok_or_else(|| Error::Config("eval batch norm needs running stats".into()))?;
                if rm.len() != c || rv.len() != c {
                    return dim_err("running statistics width");
                }
                Ok((rm.to_vec(), rv.to_vec()))
            };
            let (measured, (mean, var)) = match mode {
                NormMode::Train => {
                    let b = batch_stats();
                    (b.clone(), b)
                }
                NormMode::Eval => {
                    let r = running_stats()?;
                    (r.clone(), r)
                }
                NormMode::Frozen => (batch_stats(), running_stats()?),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; xv.numel()];
            let mut out = vec![0.0; xv.numel()];
            for bi in 0..nb {
                for ci in 0..c {
                    for ti in 0..t {
                        let idx = (bi * c + ci) * t + ti;
                        xhat[idx] = (xv.data()[idx] - mean[ci]) * inv_std[ci];
                        out[idx] = xhat[idx] * g.data()[ci] + b.data()[ci];
                    }
                }
            }
            (
                Tensor::new(xv.shape(), out)?,
                xhat,
                inv_std,
                BatchStats {
                    mean: measured.0,
                    var: measured.1,
                },
            )
        };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                mode,
            },
        );
        Ok((v, stats))
    }

    /// Averages over the last axis: `[.., t]` → `[..]` (for 3-D input,
    /// `[b, c, t]` → `[b, c]`).
    pub fn mean_last_axis(&self, a: Var) -> Result<Var> {
        let out = self.with1(a, |x| {
            if x.ndim() < 2 {
                return dim_err("mean_last_axis needs at least 2 dims");
            }
            let t = *x.shape().last().unwrap();
            let data = x.data().chunks(t).map(|c| c.iter().sum::<f64>() / t as f64).collect();
            Tensor::new(&x.shape()[..x.ndim() - 1], data)
        })?;
        Ok(self.push(out, Op::MeanLastAxis(a)))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.with1(a, |x| {
            let (r, c) = x.dims2()?;
            if start + len > c || len == 0 {
                return Err(Error::Index(format!("columns {start}..{} of {c}", start + len)));
            }
            let data = (0..r).flat_map(|i| x.row(i)[start..start + len].to_vec()).collect();
            Tensor::new(&[r, len], data)
        })?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let mats: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
            let rows = mats.first().ok_or_else(|| Error::Dimension("empty concat".into()))?.dims2()?.0;
            let mut widths = Vec::new();
            for m in &mats {
                let (r, c) = m.dims2()?;
                if r != rows {
                    return dim_err("concat_cols row counts differ");
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for m in &mats {
                    data.extend_from_slice(m.row(i));
                }
            }
            Tensor::new(&[rows, total], data)?
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..start+len` along the leading axis (any rank).
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.with1(a, |x| {
            let lead = x.shape()[0];
            if start + len > lead || len == 0 {
                return Err(Error::Index(format!("rows {start}..{} of {lead}", start + len)));
            }
            let inner = x.numel() / lead;
            let mut shape = x.shape().to_vec();
            shape[0] = len;
            Tensor::new(&shape, x.data()[start * inner..(start + len) * inner].to_vec())
        })?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or_else(|| Error::Dimension("empty concat".into()))?.0].value;
            let inner_shape = first.shape()[1..].to_vec();
            let mut lead = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape()[1..] != inner_shape[..] {
                    return dim_err("concat_rows inner shapes differ");
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![lead];
            shape.extend(inner_shape);
            Tensor::new(&shape, data)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.with1(a, |x| x.reshape(shape))?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Mean of squared differences over all elements, as a `[1]` scalar.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| {
            let d = x.sub(y)?;
            Ok::<_, Error>(Tensor::scalar(
                d.data().iter().map(|v| v * v).sum::<f64>() / d.numel() as f64,
            ))
        })?;
        Ok(self.push(out, Op::Mse(a, b)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = self.with1(a, |x| Tensor::scalar(x.data().iter().sum()));
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.with1(a, Tensor::numel) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Multi-head scaled dot-product attention on already-projected
    /// `q[t_q, h]`, `k[t_k, h]`, `v[t_k, h]`; heads split the columns.
    pub fn multi_head_attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.grouped_attention(q, k, v, heads, 1)
    }

    /// Attention applied independently to `groups` consecutive row blocks:
    /// queries `[groups·t_q, h]` attend only to keys/values in the matching
    /// block of `[groups·t_k, h]`.
    pub fn grouped_attention(&self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Result<Var> {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (rq, width) = qv.dims2()?;
            let (rk, wk) = kv.dims2()?;
            if vv.shape() != kv.shape() || wk != width {
                return dim_err(format!("attention shapes {:?} {:?} {:?}", qv.shape(), kv.shape(), vv.shape()));
            }
            if heads == 0 || width % heads != 0 {
                return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
            }
            if groups == 0 || rq % groups != 0 || rk % groups != 0 {
                return dim_err(format!("{groups} groups do not divide rows {rq}/{rk}"));
            }
            let (nq, nk, hd) = (rq / groups, rk / groups, width / heads);
            let scale = 1.0 / (hd as f64).sqrt();
            let mut probs = vec![0.0; groups * heads * nq * nk];
            let mut out = vec![0.0; rq * width];
            for g in 0..groups {
                for h in 0..heads {
                    let p = &mut probs[(g * heads + h) * nq * nk..(g * heads + h + 1) * nq * nk];
                    for i in 0..nq {
                        let qi = &qv.data()[(g * nq + i) * width + h * hd..][..hd];
                        let row = &mut p[i * nk..(i + 1) * nk];
                        for (j, s) in row.iter_mut().enumerate() {
                            let kj = &kv.data()[(g * nk + j) * width + h * hd..][..hd];
                            *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        }
                        softmax_row(row);
                        let o = &mut out[(g * nq + i) * width + h * hd..][..hd];
                        for (j, w) in row.iter().enumerate() {
                            let vj = &vv.data()[(g * nk + j) * width + h * hd..][..hd];
                            o.iter_mut().zip(vj).for_each(|(d, x)| *d += w * x);
                        }
                    }
                }
            }
            (Tensor::new(&[rq, width], out)?, probs)
        };
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.numel() != 1 {
            return dim_err("backward needs a scalar output");
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let n = val(*b).dims2()?.1;
                    let bd = val(*b).data().to_vec();
                    let ad = val(*a).data().to_vec();
                    matmul_bt_acc(&g, &bd, acc(&mut grads, *a, m * k), m, n, k);
                    matmul_at_acc(&ad, &g, acc(&mut grads, *b, k * n), m, k, n);
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        acc(&mut grads, *v, g.len()).iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                    }
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                    acc(&mut grads, *b, g.len()).iter_mut().zip(&g).for_each(|(d, s)| *d -= s);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (val(*a).data(), val(*b).data());
                    let ga: Vec<f64> = g.iter().zip(bd).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, g.len()).iter_mut().zip(ga).for_each(|(d, s)| *d += s);
                    acc(&mut grads, *b, g.len()).iter_mut().zip(gb).for_each(|(d, s)| *d += s);
                }
                Op::AddTiled(a, b) => {
                    let n = val(*b).numel();
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                    let gb = acc(&mut grads, *b, n);
                    for chunk in g.chunks(n) {
                        gb.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                }
                Op::RepeatRows(a, times) => {
                    let n = val(*a).numel();
                    let inner = n / val(*a).shape()[0];
                    let ga = acc(&mut grads, *a, n);
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        let r = i / times;
                        ga[r * inner..(r + 1) * inner].iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(d, s)| *d += c * s);
                }
                Op::Transpose(a) => {
                    let (r, c) = val(*a).dims2()?;
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Gelu(a) => {
                    let ad = val(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(ad[i]);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let cols = node.value.dims2()?.1;
                    let ga = acc(&mut grads, *a, g.len());
                    for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNormRows {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let cols = val(*gain).numel();
                    let gd = val(*gain).data().to_vec();
                    let n = cols as f64;
                    {
                        let gg = acc(&mut grads, *gain, cols);
                        for (i, v) in g.iter().enumerate() {
                            gg[i % cols] += v * xhat[i];
                        }
                    }
                    {
                        let gb = acc(&mut grads, *bias, cols);
                        for (i, v) in g.iter().enumerate() {
                            gb[i % cols] += v;
                        }
                    }
                    let gx = acc(&mut grads, *x, g.len());
                    for (r, inv) in inv_std.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let dxhat: Vec<f64> = span.clone().map(|i| g[i] * gd[i % cols]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum();
                        for (j, i) in span.enumerate() {
                            gx[i] += inv / n * (n * dxhat[j] - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
                Op::Conv1d {
                    input,
                    kernel,
                    stride,
                } => {
                    let (b, c_in, t) = dims3(val(*input))?;
                    let (c_out, _, k) = dims3(val(*kernel))?;
                    let t_out = node.value.shape()[2];
                    let xd = val(*input).data().to_vec();
                    let kd = val(*kernel).data().to_vec();
                    let ck = c_in * k;
                    let mut col = vec![0.0; ck * t_out];
                    let mut dcol = vec![0.0; ck * t_out];
                    let mut dk = vec![0.0; c_out * ck];
                    let mut dx = vec![0.0; b * c_in * t];
                    for bi in 0..b {
                        let gy = &g[bi * c_out * t_out..(bi + 1) * c_out * t_out];
                        im2col(&xd[bi * c_in * t..(bi + 1) * c_in * t], c_in, t, k, *stride, t_out, &mut col);
                        matmul_bt_acc(gy, &col, &mut dk, c_out, t_out, ck);
                        dcol.iter_mut().for_each(|v| *v = 0.0);
                        matmul_at_acc(&kd, gy, &mut dcol, c_out, ck, t_out);
                        col2im_acc(&dcol, c_in, t, k, *stride, t_out, &mut dx[bi * c_in * t..(bi + 1) * c_in * t]);
                    }
                    acc(&mut grads, *kernel, dk.len()).iter_mut().zip(dk).for_each(|(d, s)| *d += s);
                    acc(&mut grads, *input, dx.len()).iter_mut().zip(dx).for_each(|(d, s)| *d += s);
                }
                Op::BatchNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let (nb, c, t) = dims3(&node.value)?;
                    let gd = val(*gain).data().to_vec();
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for bi in 0..nb {
                        for ci in 0..c {
                            for ti in 0..t {
                                let idx = (bi * c + ci) * t + ti;
                                sum_g[ci] += g[idx];
                                sum_gx[ci] += g[idx] * xhat[idx];
                            }
                        }
                    }
                    acc(&mut grads, *gain, c).iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                    acc(&mut grads, *bias, c).iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                    let m = (nb * t) as f64;
                    let gx = acc(&mut grads, *x, g.len());
                    for bi in 0..nb {
                        for ci in 0..c {
                            let k = gd[ci] * inv_std[ci];
                            for ti in 0..t {
                                let idx = (bi * c + ci) * t + ti;
                                gx[idx] += match mode {
                                    NormMode::Eval | NormMode::Frozen => k * g[idx],
                                    NormMode::Train => {
                                        k / m * (m * g[idx] - sum_g[ci] - xhat[idx] * sum_gx[ci])
                                    }
                                };
                            }
                        }
                    }
                }
                Op::MeanLastAxis(a) => {
                    let t = *val(*a).shape().last().unwrap();
                    let ga = acc(&mut grads, *a, g.len() * t);
                    for (i, gv) in g.iter().enumerate() {
                        ga[i * t..(i + 1) * t].iter_mut().for_each(|d| *d += gv / t as f64);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).dims2()?;
                    let len = node.value.shape()[1];
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..len {
                            ga[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.shape()[1];
                    let rows = node.value.shape()[0];
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).shape()[1];
                        let gp = acc(&mut grads, *p, rows * w);
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let inner = node.value.numel() / node.value.shape()[0];
                    let n = val(*a).numel();
                    let ga = acc(&mut grads, *a, n);
                    ga[start * inner..start * inner + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, s)| *d += s);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = val(*p).numel();
                        acc(&mut grads, *p, n)
                            .iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(d, s)| *d += s);
                        off += n;
                    }
                }
                Op::Reshape(a) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                }
                Op::Mse(a, b) => {
                    let (ad, bd) = (val(*a).data(), val(*b).data());
                    let n = ad.len() as f64;
                    let diff: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| 2.0 * g[0] * (x - y) / n).collect();
                    acc(&mut grads, *a, diff.len()).iter_mut().zip(&diff).for_each(|(d, s)| *d += s);
                    acc(&mut grads, *b, diff.len()).iter_mut().zip(&diff).for_each(|(d, s)| *d -= s);
                }
                Op::Sum(a) => {
                    let n = val(*a).numel();
                    acc(&mut grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    groups,
                    probs,
                } => {
                    let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
                    let (rq, width) = val(*q).dims2()?;
                    let rk = val(*k).shape()[0];
                    let (nq, nk, hd) = (rq / groups, rk / groups, width / heads);
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut dq = vec![0.0; qv.len()];
                    let mut dk = vec![0.0; kv.len()];
                    let mut dv = vec![0.0; vv.len()];
                    let mut ds = vec![0.0; nk];
                    for gi in 0..*groups {
                        for h in 0..*heads {
                            let p = &probs[(gi * heads + h) * nq * nk..(gi * heads + h + 1) * nq * nk];
                            for i in 0..nq {
                                let go = &g[(gi * nq + i) * width + h * hd..][..hd];
                                let row = &p[i * nk..(i + 1) * nk];
                                for j in 0..nk {
                                    let off = (gi * nk + j) * width + h * hd;
                                    ds[j] = go.iter().zip(&vv[off..off + hd]).map(|(a, b)| a * b).sum();
                                    dv[off..off + hd].iter_mut().zip(go).for_each(|(d, x)| *d += row[j] * x);
                                }
                                let dot: f64 = ds.iter().zip(row).map(|(a, b)| a * b).sum();
                                let qoff = (gi * nq + i) * width + h * hd;
                                for j in 0..nk {
                                    let s = row[j] * (ds[j] - dot) * scale;
                                    if s == 0.0 {
                                        continue;
                                    }
                                    let off = (gi * nk + j) * width + h * hd;
                                    for c in 0..hd {
                                        dq[qoff + c] += s * kv[off + c];
                                        dk[off + c] += s * qv[qoff + c];
                                    }
                                }
                            }
                        }
                    }
                    for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                        acc(&mut grads, var, d.len()).iter_mut().zip(d).for_each(|(x, y)| *x += y);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        let mut shapes: Vec<Vec<usize>> = nodes[..=output.0].iter().map(|n| n.value.shape().to_vec()).collect();
        shapes.shrink_to_fit();
        Ok(Gradients { grads, shapes })
    }
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => dim_err(format!("expected 3-D tensor, got {:?}", t.shape())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradient_by_hand() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).data(), &[3.0, 4.0]);
        assert_eq!(g.get(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::scalar(5.0));
        let y = tape.scale(a, 3.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).data(), &[3.0]);
        assert_eq!(g.get(b).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn reused_node_accumulates() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(a, a).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(a).data(), &[6.0]);
    }
}
