//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates vector-Jacobian products.
//! Leaves created with [`Graph::param`] are reported by name in the
//! resulting [`Gradients`], everything else is addressable by [`Var`].

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Unfold {
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ColSlice {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MaskRows {
        x: Var,
        emb: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    /// Scalar loss whose input gradient was computed during the forward pass.
    Fused {
        input: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    by_var: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.by_var[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape"))
    }

    /// Gradients of every named parameter reached by the loss.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.wrt(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.data().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("{:?}", op_name(&op))));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that takes part in differentiation (input or constant).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    /// A named trainable leaf. Registering the same name twice returns the
    /// existing node so gradients accumulate in one place.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.push(t.clone(), Op::Param)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix("matmul", ta)?;
        let (k2, n) = as_matrix("matmul", tb)?;
        if k != k2 || tb.shape().len() != 2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = as_matrix("transpose", t)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Mul(a, b))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = as_matrix("add_row", ta)?;
        if tr.len() != n {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        }
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    /// Adds a constant tensor (no gradient flows into `c`).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        same_shape("add_const", self.value(a), c)?;
        let data = zip_map(self.value(a), c, |x, y| x + y);
        let shape = c.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddConst(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(gelu_scalar);
        self.push(t, Op::Gelu(a))
    }

    /// Per-row normalization to zero mean and unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = as_matrix("layer_norm", tx)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", tx.shape(), self.value(gamma).shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(idx, &h)| h * g[idx % n] + b[idx % n])
            .collect();
        let shape = tx.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = as_matrix("softmax", t)?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n).take(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(x))
    }

    /// Row-wise log-softmax (the last axis).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, n) = as_matrix("log_softmax", t)?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = crate::tensor::log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x))
    }

    /// im2col over time: `[T×C]` → `[T'×(kernel·C)]` with zero padding.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let t = self.value(x);
        let (len, c) = as_matrix("unfold", t)?;
        let out_len = conv_out_len(len, kernel, stride, padding).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "sequence of {len} frames too short for kernel {kernel} with padding {padding}"
            ))
        })?;
        let mut out = vec![0.0; out_len * kernel * c];
        for o in 0..out_len {
            for k in 0..kernel {
                let src = (o * stride + k) as isize - padding as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let s = src as usize;
                out[(o * kernel + k) * c..(o * kernel + k + 1) * c]
                    .copy_from_slice(&t.data()[s * c..(s + 1) * c]);
            }
        }
        self.push(
            Tensor::new(vec![out_len, kernel * c], out)?,
            Op::Unfold {
                x,
                kernel,
                stride,
                padding,
            },
        )
    }

    pub fn col_slice(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = as_matrix("col_slice", t)?;
        if start + width > n {
            return Err(Error::shape("col_slice", t.shape(), &[m, start + width]));
        }
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&t.data()[i * n + start..i * n + start + width]);
        }
        self.push(Tensor::new(vec![m, width], out)?, Op::ColSlice { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m || t.shape().len() != 2 {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), t.shape()));
            }
            widths.push(t.cols());
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument(format!(
                "row {bad} out of range for {:?}",
                t.shape()
            )));
        }
        let out = t.select_rows(idx);
        self.push(out, Op::GatherRows(x, idx.to_vec()))
    }

    /// Replaces rows where `mask` is true by the vector `emb`.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool], emb: Var) -> Result<Var> {
        let (t, e) = (self.value(x), self.value(emb));
        let (m, n) = as_matrix("mask_rows", t)?;
        if mask.len() != m || e.len() != n {
            return Err(Error::shape("mask_rows", t.shape(), &[mask.len(), e.len()]));
        }
        let mut out = t.clone();
        for (i, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
            out.row_mut(i).copy_from_slice(e.data());
        }
        self.push(
            out,
            Op::MaskRows {
                x,
                emb,
                mask: mask.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Records a scalar whose gradient with respect to `input` is already known.
    pub fn fused_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::shape("fused_scalar", self.value(input).shape(), &[grad.len()]));
        }
        self.push(Tensor::scalar(value), Op::Fused { input, grad })
    }

    /// Accumulates gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, delta: &dyn Fn(&mut [f64])| {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                delta(slot);
            };
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = as_matrix("matmul", ta)?;
                    let n = tb.cols();
                    acc(*a, &|s| gemm_bt_acc(&g, tb.data(), s, m, n, k));
                    acc(*b, &|s| gemm_at_acc(ta.data(), &g, s, m, k, n));
                }
                Op::Transpose(a) => {
                    let (m, n) = as_matrix("transpose", self.value(*a))?;
                    acc(*a, &|s| {
                        for i in 0..m {
                            for j in 0..n {
                                s[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &|s| axpy(s, &g, 1.0));
                    acc(*b, &|s| axpy(s, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|s| axpy(s, &g, 1.0));
                    acc(*b, &|s| axpy(s, &g, -1.0));
                }
                Op::AddRow(a, r) => {
                    let n = self.value(*r).len();
                    acc(*a, &|s| axpy(s, &g, 1.0));
                    acc(*r, &|s| {
                        for row in g.chunks(n) {
                            axpy(s, row, 1.0);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * tb[i];
                        }
                    });
                    acc(*b, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * ta[i];
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &|s| axpy(s, &g, *c)),
                Op::AddConst(a) => acc(*a, &|s| axpy(s, &g, 1.0)),
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * gelu_grad(x[i]);
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).data();
                    let n = gam.len();
                    acc(*gamma, &|s| {
                        for (i, gv) in g.iter().enumerate() {
                            s[i % n] += gv * xhat[i];
                        }
                    });
                    acc(*beta, &|s| {
                        for row in g.chunks(n) {
                            axpy(s, row, 1.0);
                        }
                    });
                    acc(*x, &|s| {
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &g[r * n..(r + 1) * n];
                            let hr = &xhat[r * n..(r + 1) * n];
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for j in 0..n {
                                let d = gr[j] * gam[j];
                                mean_d += d;
                                mean_dh += d * hr[j];
                            }
                            mean_d /= n as f64;
                            mean_dh /= n as f64;
                            for j in 0..n {
                                let d = gr[j] * gam[j];
                                s[r * n + j] += is * (d - mean_d - hr[j] * mean_dh);
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    acc(*a, &|s| {
                        for (r, yr) in y.data().chunks(n).enumerate() {
                            let gr = &g[r * n..(r + 1) * n];
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                s[r * n + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    acc(*a, &|s| {
                        for (r, yr) in y.data().chunks(n).enumerate() {
                            let gr = &g[r * n..(r + 1) * n];
                            let total: f64 = gr.iter().sum();
                            for j in 0..n {
                                s[r * n + j] += gr[j] - yr[j].exp() * total;
                            }
                        }
                    });
                }
                Op::Unfold {
                    x,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (len, c) = as_matrix("unfold", self.value(*x))?;
                    let out_len = node.value.rows();
                    acc(*x, &|s| {
                        for o in 0..out_len {
                            for k in 0..*kernel {
                                let src = (o * stride + k) as isize - *padding as isize;
                                if src < 0 || src as usize >= len {
                                    continue;
                                }
                                let src = src as usize;
                                let gs = &g[(o * kernel + k) * c..(o * kernel + k + 1) * c];
                                axpy(&mut s[src * c..(src + 1) * c], gs, 1.0);
                            }
                        }
                    });
                }
                Op::ColSlice { x, start } => {
                    let n = self.value(*x).cols();
                    let w = node.value.cols();
                    acc(*x, &|s| {
                        for (r, gr) in g.chunks(w).enumerate() {
                            axpy(&mut s[r * n + start..r * n + start + w], gr, 1.0);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(*p, &|s| {
                            for (r, sr) in s.chunks_mut(w).enumerate() {
                                axpy(sr, &g[r * n + offset..r * n + offset + w], 1.0);
                            }
                        });
                        offset += w;
                    }
                }
                Op::GatherRows(x, idx) => {
                    let c = self.value(*x).cols();
                    acc(*x, &|s| {
                        for (r, &i) in idx.iter().enumerate() {
                            axpy(&mut s[i * c..(i + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                        }
                    });
                }
                Op::MaskRows { x, emb, mask } => {
                    let c = self.value(*x).cols();
                    acc(*x, &|s| {
                        for (r, &m) in mask.iter().enumerate() {
                            if !m {
                                axpy(&mut s[r * c..(r + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                            }
                        }
                    });
                    acc(*emb, &|s| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                axpy(s, &g[r * c..(r + 1) * c], 1.0);
                            }
                        }
                    });
                }
                Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|v| *v += g[0])),
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    acc(*a, &|s| s.iter_mut().for_each(|v| *v += g[0] / n));
                }
                Op::Fused { input, grad } => acc(*input, &|s| axpy(s, grad, g[0])),
            }
            // Keep leaf gradients; interior ones are no longer needed.
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[idx] = Some(g);
            }
        }

        Ok(Gradients {
            by_var: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "input",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddConst(_) => "add_const",
        Op::Gelu(_) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(_) => "softmax",
        Op::LogSoftmax(_) => "log_softmax",
        Op::Unfold { .. } => "unfold",
        Op::ColSlice { .. } => "col_slice",
        Op::ConcatCols(_) => "concat_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::MaskRows { .. } => "mask_rows",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Fused { .. } => "fused loss",
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Output length of a 1-D convolution, `None` when no window fits.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_with_identity() {
        let mut g = Graph::new();
        let m = Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        let i = g.input(Tensor::eye(3)).unwrap();
        let mv = g.input(m.clone()).unwrap();
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out), &m);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn log_softmax_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 4])).unwrap();
        let y = g.log_softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1e300])).unwrap();
        let err = g.scale(x, 1e300).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn shared_param_accumulates() {
        let mut g = Graph::new();
        let w = Tensor::vector(vec![2.0]);
        let a = g.param("w", &w).unwrap();
        let b = g.param("w", &w).unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap().params();
        assert!((grads["w"].item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn conv_length_arithmetic() {
        assert_eq!(conv_out_len(16, 3, 2, 1), Some(8));
        assert_eq!(conv_out_len(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_len(1, 3, 2, 0), None);
    }
}
