//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Graphs are built by calling op methods on a [`Tape`]; each call runs the
//! forward computation immediately and records enough to replay the chain
//! rule in reverse. Node ids index the tape in topological (creation) order,
//! so the backward pass is a single reverse scan.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::substrate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Recip,
    Relu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Acos,
    Clamp { lo: f64, hi: f64 },
    Psi { m: u32 },
    Matmul,
    Transpose,
    AddRow,
    MulRow,
    ScaleBy,
    SoftmaxRows,
    LogSoftmaxRows,
    SumAll,
    MeanAll,
    SumRows,
    MeanRows,
    StdRows,
    L2Norm,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape,
    Conv1d { k: usize, dilation: usize },
    Conv2d { kh: usize, kw: usize, sh: usize, sw: usize },
    BatchNorm,
}

struct Node<E> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<E>,
    /// Op-specific saved activations needed by the backward pass.
    saved: Vec<Tensor<E>>,
}

/// Ordered record of primitive operations; single-owner, not shared.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    input_ids: Vec<NodeId>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<E: Scalar>(op: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), input_ids: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<E>, saved: Vec<Tensor<E>>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value, saved });
        id
    }

    /// Record a leaf (input or parameter) node.
    pub fn input(&mut self, t: Tensor<E>) -> NodeId {
        let id = self.push(Op::Input, vec![], t, vec![]);
        self.input_ids.push(id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| x + y)
                .collect(),
        };
        Ok(self.push(Op::Add, vec![a, b], v, vec![]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| x - y)
                .collect(),
        };
        Ok(self.push(Op::Sub, vec![a, b], v, vec![]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| x * y)
                .collect(),
        };
        Ok(self.push(Op::Mul, vec![a, b], v, vec![]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = E::from_f64(c);
        let v = self.value(a).map(|x| x * k);
        self.push(Op::Scale(c), vec![a], v, vec![])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = E::from_f64(c);
        let v = self.value(a).map(|x| x + k);
        self.push(Op::AddScalar, vec![a], v, vec![])
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| E::ONE / x);
        self.push(Op::Recip, vec![a], v, vec![])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > E::ZERO { x } else { E::ZERO });
        self.push(Op::Relu, vec![a], v, vec![])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh, vec![a], v, vec![])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp, vec![a], v, vec![])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        self.push(Op::Log, vec![a], v, vec![])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(Op::Sqrt, vec![a], v, vec![])
    }

    pub fn acos(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.acos());
        self.push(Op::Acos, vec![a], v, vec![])
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        let v = self.value(a).map(|x| if x < l { l } else if x > h { h } else { x });
        self.push(Op::Clamp { lo, hi }, vec![a], v, vec![])
    }

    /// Elementwise angular margin warp: psi(theta) = (-1)^k cos(m theta) - 2k
    /// for theta in [k pi / m, (k+1) pi / m]. Input must lie in [0, pi].
    pub fn psi(&mut self, a: NodeId, m: u32) -> Result<NodeId> {
        if m < 1 {
            return Err(Error::argument("psi: margin m must be >= 1"));
        }
        let pi = std::f64::consts::PI;
        let mut data = Vec::with_capacity(self.value(a).len());
        for &x in &self.value(a).data {
            let theta = x.to_f64();
            if !(0.0..=pi + 1e-12).contains(&theta) {
                return Err(Error::argument(format!("psi: theta {theta} outside [0, pi]")));
            }
            let k = ((theta * m as f64 / pi).floor() as i64).clamp(0, m as i64 - 1);
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            data.push(E::from_f64(sign * (m as f64 * theta).cos() - 2.0 * k as f64));
        }
        let v = Tensor { shape: self.value(a).shape.clone(), data };
        Ok(self.push(Op::Psi { m }, vec![a], v, vec![]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|e| Error::shape(format!("matmul: {e}")))?;
        Ok(self.push(Op::Matmul, vec![a, b], v, vec![]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).rank() != 2 {
            return Err(Error::shape("transpose: rank-2 tensor required".to_string()));
        }
        let v = self.value(a).transpose2();
        Ok(self.push(Op::Transpose, vec![a], v, vec![]))
    }

    fn row_like(&self, op: &str, x: NodeId, r: NodeId) -> Result<usize> {
        let xv = self.value(x);
        let rv = self.value(r);
        if xv.rank() != 2 || rv.len() != xv.shape[1] {
            return Err(Error::shape(format!(
                "{op}: x {:?} vs row {:?}",
                xv.shape, rv.shape
            )));
        }
        Ok(xv.shape[1])
    }

    /// x[t, :] + r for every row t.
    pub fn add_row(&mut self, x: NodeId, r: NodeId) -> Result<NodeId> {
        let f = self.row_like("add_row", x, r)?;
        let xv = self.value(x);
        let rv = &self.value(r).data;
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv[i % f])
            .collect();
        let v = Tensor { shape: xv.shape.clone(), data };
        Ok(self.push(Op::AddRow, vec![x, r], v, vec![]))
    }

    /// x[t, :] - r for every row t.
    pub fn sub_row(&mut self, x: NodeId, r: NodeId) -> Result<NodeId> {
        let neg = self.scale(r, -1.0);
        self.add_row(x, neg)
    }

    /// x[t, :] * r elementwise for every row t.
    pub fn mul_row(&mut self, x: NodeId, r: NodeId) -> Result<NodeId> {
        let f = self.row_like("mul_row", x, r)?;
        let xv = self.value(x);
        let rv = &self.value(r).data;
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * rv[i % f])
            .collect();
        let v = Tensor { shape: xv.shape.clone(), data };
        Ok(self.push(Op::MulRow, vec![x, r], v, vec![]))
    }

    /// Multiply every element of x by the scalar node s.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(format!(
                "scale_by: scalar node has shape {:?}",
                self.value(s).shape
            )));
        }
        let k = self.value(s).data[0];
        let v = self.value(x).map(|v| v * k);
        Ok(self.push(Op::ScaleBy, vec![x, s], v, vec![]))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("softmax: rank-2 tensor required".to_string()));
        }
        let (r, c) = (x.shape[0], x.shape[1]);
        let mut data = vec![E::ZERO; r * c];
        for i in 0..r {
            let row = x.row(i);
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut sum = E::ZERO;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] = data[i * c + j] / sum;
            }
        }
        let v = Tensor { shape: x.shape.clone(), data };
        Ok(self.push(Op::SoftmaxRows, vec![a], v, vec![]))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("log_softmax: rank-2 tensor required".to_string()));
        }
        let (r, c) = (x.shape[0], x.shape[1]);
        let mut data = vec![E::ZERO; r * c];
        for i in 0..r {
            let row = x.row(i);
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut sum = E::ZERO;
            for &v in row {
                sum += (v - mx).exp();
            }
            let lse = mx + sum.ln();
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let v = Tensor { shape: x.shape.clone(), data };
        Ok(self.push(Op::LogSoftmaxRows, vec![a], v, vec![]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut s = E::ZERO;
        for &v in &self.value(a).data {
            s += v;
        }
        self.push(Op::SumAll, vec![a], Tensor::scalar(s), vec![])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let mut s = E::ZERO;
        for &v in &self.value(a).data {
            s += v;
        }
        let v = Tensor::scalar(s / E::from_f64(n as f64));
        self.push(Op::MeanAll, vec![a], v, vec![])
    }

    fn rows_cols(&self, op: &str, a: NodeId) -> Result<(usize, usize)> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape(format!("{op}: rank-2 tensor required, got {:?}", x.shape)));
        }
        Ok((x.shape[0], x.shape[1]))
    }

    /// Column sums: [T, F] -> [1, F].
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols("sum_rows", a)?;
        let x = self.value(a);
        let mut data = vec![E::ZERO; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += x.data[i * c + j];
            }
        }
        let v = Tensor { shape: vec![1, c], data };
        Ok(self.push(Op::SumRows, vec![a], v, vec![]))
    }

    /// Column means: [T, F] -> [1, F].
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols("mean_rows", a)?;
        let x = self.value(a);
        let inv = E::from_f64(1.0 / r as f64);
        let mut data = vec![E::ZERO; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += x.data[i * c + j];
            }
        }
        for d in &mut data {
            *d = *d * inv;
        }
        let v = Tensor { shape: vec![1, c], data };
        Ok(self.push(Op::MeanRows, vec![a], v, vec![]))
    }

    /// Population standard deviation per column with epsilon inside the root:
    /// [T, F] -> [1, F].
    pub fn std_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.rows_cols("std_rows", a)?;
        let x = self.value(a);
        let inv = 1.0 / r as f64;
        let mut mean = vec![0.0f64; c];
        for i in 0..r {
            for j in 0..c {
                mean[j] += x.data[i * c + j].to_f64() * inv;
            }
        }
        let mut var = vec![0.0f64; c];
        for i in 0..r {
            for j in 0..c {
                let d = x.data[i * c + j].to_f64() - mean[j];
                var[j] += d * d * inv;
            }
        }
        let std: Vec<E> = var.iter().map(|&v| E::from_f64((v + eps).sqrt())).collect();
        let mean_t = Tensor { shape: vec![1, c], data: mean.iter().map(|&m| E::from_f64(m)).collect() };
        let v = Tensor { shape: vec![1, c], data: std };
        let saved_std = v.clone();
        Ok(self.push(Op::StdRows, vec![a], v, vec![mean_t, saved_std]))
    }

    /// Euclidean norm over all elements -> scalar.
    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let mut s = E::ZERO;
        for &v in &self.value(a).data {
            s += v * v;
        }
        self.push(Op::L2Norm, vec![a], Tensor::scalar(s.sqrt()), vec![])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::argument("concat: no inputs"));
        }
        let rank = self.value(parts[0]).rank();
        if axis >= rank {
            return Err(Error::shape(format!("concat: axis {axis} out of range for rank {rank}")));
        }
        if rank == 1 {
            let mut data = Vec::new();
            for &p in parts {
                if self.value(p).rank() != 1 {
                    return Err(Error::shape("concat: mixed ranks".to_string()));
                }
                data.extend_from_slice(&self.value(p).data);
            }
            let n = data.len();
            return Ok(self.push(Op::Concat { axis }, parts.to_vec(), Tensor { shape: vec![n], data }, vec![]));
        }
        if rank != 2 {
            return Err(Error::shape("concat: rank-1 or rank-2 tensors required".to_string()));
        }
        if axis == 0 {
            let c = self.value(parts[0]).shape[1];
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let v = self.value(p);
                if v.rank() != 2 || v.shape[1] != c {
                    return Err(Error::shape(format!("concat axis 0: column mismatch {:?}", v.shape)));
                }
                rows += v.shape[0];
                data.extend_from_slice(&v.data);
            }
            Ok(self.push(Op::Concat { axis }, parts.to_vec(), Tensor { shape: vec![rows, c], data }, vec![]))
        } else {
            let r = self.value(parts[0]).shape[0];
            let widths: Vec<usize> = parts
                .iter()
                .map(|&p| self.value(p).shape.get(1).copied().unwrap_or(0))
                .collect();
            for &p in parts {
                let v = self.value(p);
                if v.rank() != 2 || v.shape[0] != r {
                    return Err(Error::shape(format!("concat axis 1: row mismatch {:?}", v.shape)));
                }
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for (&p, &w) in parts.iter().zip(&widths) {
                    let v = self.value(p);
                    data.extend_from_slice(&v.data[i * w..(i + 1) * w]);
                }
            }
            Ok(self.push(Op::Concat { axis }, parts.to_vec(), Tensor { shape: vec![r, total], data }, vec![]))
        }
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        let rank = x.rank();
        if axis >= rank || rank > 2 {
            return Err(Error::shape(format!("slice: axis {axis} of rank {rank}")));
        }
        let extent = x.shape[axis];
        if start + len > extent || len == 0 {
            return Err(Error::shape(format!(
                "slice: [{start}, {start}+{len}) out of extent {extent}"
            )));
        }
        let v = if rank == 1 {
            Tensor { shape: vec![len], data: x.data[start..start + len].to_vec() }
        } else if axis == 0 {
            let c = x.shape[1];
            Tensor { shape: vec![len, c], data: x.data[start * c..(start + len) * c].to_vec() }
        } else {
            let (r, c) = (x.shape[0], x.shape[1]);
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
            }
            Tensor { shape: vec![r, len], data }
        };
        Ok(self.push(Op::Slice { axis, start, len }, vec![a], v, vec![]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {shape:?}",
                self.value(a).shape
            )));
        }
        let v = Tensor { shape, data: self.value(a).data.clone() };
        Ok(self.push(Op::Reshape, vec![a], v, vec![]))
    }

    /// Dilated same-length 1-D convolution over time.
    ///
    /// x: [T, F_in]; wt: [k * F_in, F_out] (tap-major rows); b: [F_out].
    /// Output frame t gathers taps at t + (i - (k-1)/2) * dilation with zero
    /// padding outside the sequence.
    pub fn conv1d(&mut self, x: NodeId, wt: NodeId, b: NodeId, k: usize, dilation: usize) -> Result<NodeId> {
        if k % 2 == 0 {
            return Err(Error::argument("conv1d: kernel width must be odd"));
        }
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("conv1d: input must be [T, F]".to_string()));
        }
        let (t, f_in) = (xv.shape[0], xv.shape[1]);
        let wv = self.value(wt);
        if wv.rank() != 2 || wv.shape[0] != k * f_in {
            return Err(Error::shape(format!(
                "conv1d: weight {:?} incompatible with k={k}, F_in={f_in}",
                wv.shape
            )));
        }
        let f_out = wv.shape[1];
        if self.value(b).len() != f_out {
            return Err(Error::shape(format!(
                "conv1d: bias {:?} vs F_out {f_out}",
                self.value(b).shape
            )));
        }
        let col = im2col1d(xv, k, dilation);
        let mut out = Tensor::zeros(vec![t, f_out]);
        E::gemm_acc(t, k * f_in, f_out, &col.data, &wv.data, &mut out.data);
        let bv = &self.value(b).data;
        for i in 0..t {
            for j in 0..f_out {
                out.data[i * f_out + j] += bv[j];
            }
        }
        Ok(self.push(Op::Conv1d { k, dilation }, vec![x, wt, b], out, vec![col]))
    }

    /// Strided same-padding 2-D convolution, channels-last.
    ///
    /// x: [H, W, C_in]; wt: [kh * kw * C_in, C_out]; b: [C_out].
    /// Output is [ceil(H / sh), ceil(W / sw), C_out].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        wt: NodeId,
        b: NodeId,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::shape("conv2d: input must be [H, W, C]".to_string()));
        }
        let (h, w, c_in) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let wv = self.value(wt);
        if wv.rank() != 2 || wv.shape[0] != kh * kw * c_in {
            return Err(Error::shape(format!(
                "conv2d: weight {:?} incompatible with kernel {kh}x{kw}, C_in={c_in}",
                wv.shape
            )));
        }
        let c_out = wv.shape[1];
        if self.value(b).len() != c_out {
            return Err(Error::shape(format!("conv2d: bias {:?} vs C_out {c_out}", self.value(b).shape)));
        }
        let (h_out, w_out) = (h.div_ceil(sh), w.div_ceil(sw));
        let col = im2col2d(xv, kh, kw, sh, sw);
        let mut out_mat = Tensor::zeros(vec![h_out * w_out, c_out]);
        E::gemm_acc(h_out * w_out, kh * kw * c_in, c_out, &col.data, &wv.data, &mut out_mat.data);
        let bv = &self.value(b).data;
        for i in 0..h_out * w_out {
            for j in 0..c_out {
                out_mat.data[i * c_out + j] += bv[j];
            }
        }
        let out = Tensor { shape: vec![h_out, w_out, c_out], data: out_mat.data };
        Ok(self.push(Op::Conv2d { kh, kw, sh, sw }, vec![x, wt, b], out, vec![col]))
    }

    /// Batch-statistic normalization over all leading axes, per last-axis
    /// channel: y = gamma * (x - mean) / sqrt(var + eps) + beta.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::shape("batch_norm: rank >= 2 required".to_string()));
        }
        let c = *xv.shape.last().unwrap();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(format!(
                "batch_norm: gamma/beta length must be {c}"
            )));
        }
        let n = xv.len() / c;
        let mut mean = vec![0.0f64; c];
        for i in 0..n {
            for j in 0..c {
                mean[j] += xv.data[i * c + j].to_f64();
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; c];
        for i in 0..n {
            for j in 0..c {
                let d = xv.data[i * c + j].to_f64() - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(xv.shape.clone());
        for i in 0..n {
            for j in 0..c {
                xhat.data[i * c + j] =
                    E::from_f64((xv.data[i * c + j].to_f64() - mean[j]) * invstd[j]);
            }
        }
        let g = &self.value(gamma).data;
        let be = &self.value(beta).data;
        let mut out = Tensor::zeros(xv.shape.clone());
        for i in 0..n {
            for j in 0..c {
                out.data[i * c + j] = g[j] * xhat.data[i * c + j] + be[j];
            }
        }
        let invstd_t = Tensor {
            shape: vec![c],
            data: invstd.iter().map(|&v| E::from_f64(v)).collect(),
        };
        Ok(self.push(Op::BatchNorm, vec![x, gamma, beta], out, vec![xhat, invstd_t]))
    }

    /// Batch statistics of the values at a node, per last-axis channel.
    /// Used to maintain running averages for inference-time normalization.
    pub fn channel_stats(&self, x: NodeId) -> (Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let c = *xv.shape.last().unwrap();
        let n = xv.len() / c;
        let mut mean = vec![0.0f64; c];
        for i in 0..n {
            for j in 0..c {
                mean[j] += xv.data[i * c + j].to_f64();
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; c];
        for i in 0..n {
            for j in 0..c {
                let d = xv.data[i * c + j].to_f64() - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        (mean, var)
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// recorded input/parameter node.
    pub fn forward_backward(&self, loss: NodeId) -> Result<HashMap<NodeId, Tensor<E>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "forward_backward: loss node has shape {:?}, expected scalar",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(E::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_one(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = HashMap::new();
        for &id in &self.input_ids {
            if id.0 <= loss.0 {
                if let Some(g) = grads[id.0].take() {
                    out.insert(id, g);
                }
            }
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Tensor<E>>], id: NodeId, delta: Tensor<E>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backward_one(&self, node: &Node<E>, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        let ins = &node.inputs;
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Input => {}
            Op::Add => {
                Self::accumulate(grads, ins[0], g.clone());
                Self::accumulate(grads, ins[1], g.clone());
            }
            Op::Sub => {
                Self::accumulate(grads, ins[0], g.clone());
                Self::accumulate(grads, ins[1], g.map(|v| -v));
            }
            Op::Mul => {
                let a = val(ins[0]);
                let b = val(ins[1]);
                let da = Tensor {
                    shape: a.shape.clone(),
                    data: g.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
                };
                let db = Tensor {
                    shape: b.shape.clone(),
                    data: g.data.iter().zip(&a.data).map(|(&x, &y)| x * y).collect(),
                };
                Self::accumulate(grads, ins[0], da);
                Self::accumulate(grads, ins[1], db);
            }
            Op::Scale(c) => {
                let k = E::from_f64(*c);
                Self::accumulate(grads, ins[0], g.map(|v| v * k));
            }
            Op::AddScalar => Self::accumulate(grads, ins[0], g.clone()),
            Op::Recip => {
                let y = &node.value;
                let d = Tensor {
                    shape: y.shape.clone(),
                    data: g.data.iter().zip(&y.data).map(|(&gv, &yv)| -gv * yv * yv).collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::Relu => {
                let x = val(ins[0]);
                let d = Tensor {
                    shape: x.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&gv, &xv)| if xv > E::ZERO { gv } else { E::ZERO })
                        .collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::Tanh => {
                let y = &node.value;
                let d = Tensor {
                    shape: y.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(&gv, &yv)| gv * (E::ONE - yv * yv))
                        .collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::Exp => {
                let y = &node.value;
                let d = Tensor {
                    shape: y.shape.clone(),
                    data: g.data.iter().zip(&y.data).map(|(&gv, &yv)| gv * yv).collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::Log => {
                let x = val(ins[0]);
                let d = Tensor {
                    shape: x.shape.clone(),
                    data: g.data.iter().zip(&x.data).map(|(&gv, &xv)| gv / xv).collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::Sqrt => {
                let y = &node.value;
                let half = E::from_f64(0.5);
                let d = Tensor {
                    shape: y.shape.clone(),
                    data: g.data.iter().zip(&y.data).map(|(&gv, &yv)| gv * half / yv).collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::Acos => {
                let x = val(ins[0]);
                let d = Tensor {
                    shape: x.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&gv, &xv)| -gv / (E::ONE - xv * xv).sqrt())
                        .collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::Clamp { lo, hi } => {
                let (l, h) = (E::from_f64(*lo), E::from_f64(*hi));
                let x = val(ins[0]);
                let d = Tensor {
                    shape: x.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&gv, &xv)| if xv > l && xv < h { gv } else { E::ZERO })
                        .collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::Psi { m } => {
                // d psi / d theta = (-1)^k * (-m sin(m theta)); left-limit at
                // interval boundaries (where sin(m theta) = 0 anyway).
                let pi = std::f64::consts::PI;
                let x = val(ins[0]);
                let mf = *m as f64;
                let d = Tensor {
                    shape: x.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&gv, &xv)| {
                            let theta = xv.to_f64();
                            let k = ((theta * mf / pi).floor() as i64).clamp(0, *m as i64 - 1);
                            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                            gv * E::from_f64(sign * (-mf) * (mf * theta).sin())
                        })
                        .collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::Matmul => {
                let a = val(ins[0]);
                let b = val(ins[1]);
                let da = g.matmul(&b.transpose2())?;
                let db = a.transpose2().matmul(g)?;
                Self::accumulate(grads, ins[0], da);
                Self::accumulate(grads, ins[1], db);
            }
            Op::Transpose => Self::accumulate(grads, ins[0], g.transpose2()),
            Op::AddRow => {
                Self::accumulate(grads, ins[0], g.clone());
                let f = val(ins[1]).len();
                let mut dr = Tensor::zeros(val(ins[1]).shape.clone());
                for (i, &gv) in g.data.iter().enumerate() {
                    dr.data[i % f] += gv;
                }
                Self::accumulate(grads, ins[1], dr);
            }
            Op::MulRow => {
                let x = val(ins[0]);
                let r = val(ins[1]);
                let f = r.len();
                let dx = Tensor {
                    shape: x.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * r.data[i % f])
                        .collect(),
                };
                let mut dr = Tensor::zeros(r.shape.clone());
                for (i, &gv) in g.data.iter().enumerate() {
                    dr.data[i % f] += gv * x.data[i];
                }
                Self::accumulate(grads, ins[0], dx);
                Self::accumulate(grads, ins[1], dr);
            }
            Op::ScaleBy => {
                let x = val(ins[0]);
                let s = val(ins[1]).data[0];
                let dx = g.map(|v| v * s);
                let mut ds = E::ZERO;
                for (gv, xv) in g.data.iter().zip(&x.data) {
                    ds += *gv * *xv;
                }
                Self::accumulate(grads, ins[0], dx);
                Self::accumulate(grads, ins[1], Tensor { shape: val(ins[1]).shape.clone(), data: vec![ds] });
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let (r, c) = (y.shape[0], y.shape[1]);
                let mut d = Tensor::zeros(y.shape.clone());
                for i in 0..r {
                    let mut dot = E::ZERO;
                    for j in 0..c {
                        dot += g.data[i * c + j] * y.data[i * c + j];
                    }
                    for j in 0..c {
                        d.data[i * c + j] = y.data[i * c + j] * (g.data[i * c + j] - dot);
                    }
                }
                Self::accumulate(grads, ins[0], d);
            }
            Op::LogSoftmaxRows => {
                let y = &node.value;
                let (r, c) = (y.shape[0], y.shape[1]);
                let mut d = Tensor::zeros(y.shape.clone());
                for i in 0..r {
                    let mut gsum = E::ZERO;
                    for j in 0..c {
                        gsum += g.data[i * c + j];
                    }
                    for j in 0..c {
                        d.data[i * c + j] = g.data[i * c + j] - y.data[i * c + j].exp() * gsum;
                    }
                }
                Self::accumulate(grads, ins[0], d);
            }
            Op::SumAll => {
                let x = val(ins[0]);
                let gv = g.data[0];
                Self::accumulate(grads, ins[0], Tensor { shape: x.shape.clone(), data: vec![gv; x.len()] });
            }
            Op::MeanAll => {
                let x = val(ins[0]);
                let gv = g.data[0] / E::from_f64(x.len() as f64);
                Self::accumulate(grads, ins[0], Tensor { shape: x.shape.clone(), data: vec![gv; x.len()] });
            }
            Op::SumRows => {
                let x = val(ins[0]);
                let c = x.shape[1];
                let d = Tensor {
                    shape: x.shape.clone(),
                    data: (0..x.len()).map(|i| g.data[i % c]).collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::MeanRows => {
                let x = val(ins[0]);
                let (r, c) = (x.shape[0], x.shape[1]);
                let inv = E::from_f64(1.0 / r as f64);
                let d = Tensor {
                    shape: x.shape.clone(),
                    data: (0..x.len()).map(|i| g.data[i % c] * inv).collect(),
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::StdRows => {
                let x = val(ins[0]);
                let (r, c) = (x.shape[0], x.shape[1]);
                let mean = &node.saved[0];
                let std = &node.saved[1];
                let invr = E::from_f64(1.0 / r as f64);
                let mut d = Tensor::zeros(x.shape.clone());
                for i in 0..r {
                    for j in 0..c {
                        let centered = x.data[i * c + j] - mean.data[j];
                        d.data[i * c + j] = g.data[j] * centered * invr / std.data[j];
                    }
                }
                Self::accumulate(grads, ins[0], d);
            }
            Op::L2Norm => {
                let x = val(ins[0]);
                let norm = node.value.data[0];
                let d = if norm.to_f64() < 1e-300 {
                    Tensor::zeros(x.shape.clone())
                } else {
                    let k = g.data[0] / norm;
                    x.map(|v| v * k)
                };
                Self::accumulate(grads, ins[0], d);
            }
            Op::Concat { axis } => {
                if node.value.rank() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &p in ins {
                        let n = val(p).len();
                        let d = Tensor {
                            shape: val(p).shape.clone(),
                            data: g.data[offset..offset + n].to_vec(),
                        };
                        offset += n;
                        Self::accumulate(grads, p, d);
                    }
                } else {
                    let r = node.value.shape[0];
                    let total = node.value.shape[1];
                    let mut offset = 0;
                    for &p in ins {
                        let w = val(p).shape[1];
                        let mut d = Tensor::zeros(val(p).shape.clone());
                        for i in 0..r {
                            d.data[i * w..(i + 1) * w]
                                .copy_from_slice(&g.data[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        Self::accumulate(grads, p, d);
                    }
                }
            }
            Op::Slice { axis, start, len } => {
                let x = val(ins[0]);
                let mut d = Tensor::zeros(x.shape.clone());
                if x.rank() == 1 {
                    d.data[*start..start + len].copy_from_slice(&g.data);
                } else if *axis == 0 {
                    let c = x.shape[1];
                    d.data[start * c..(start + len) * c].copy_from_slice(&g.data);
                } else {
                    let (r, c) = (x.shape[0], x.shape[1]);
                    for i in 0..r {
                        d.data[i * c + start..i * c + start + len]
                            .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                    }
                }
                Self::accumulate(grads, ins[0], d);
            }
            Op::Reshape => {
                let x = val(ins[0]);
                Self::accumulate(grads, ins[0], Tensor { shape: x.shape.clone(), data: g.data.clone() });
            }
            Op::Conv1d { k, dilation } => {
                let x = val(ins[0]);
                let wt = val(ins[1]);
                let (t, f_in) = (x.shape[0], x.shape[1]);
                let f_out = wt.shape[1];
                let col = &node.saved[0];
                // dwt = col^T g
                let dwt = col.transpose2().matmul(g)?;
                // db = column sums of g
                let mut db = Tensor::zeros(val(ins[2]).shape.clone());
                for i in 0..t {
                    for j in 0..f_out {
                        db.data[j] += g.data[i * f_out + j];
                    }
                }
                // dcol = g wt^T, scattered back through the tap gather
                let dcol = g.matmul(&wt.transpose2())?;
                let dx = col2im1d(&dcol, t, f_in, *k, *dilation);
                Self::accumulate(grads, ins[0], dx);
                Self::accumulate(grads, ins[1], dwt);
                Self::accumulate(grads, ins[2], db);
            }
            Op::Conv2d { kh, kw, sh, sw } => {
                let x = val(ins[0]);
                let wt = val(ins[1]);
                let (h, w, c_in) = (x.shape[0], x.shape[1], x.shape[2]);
                let (h_out, w_out, c_out) = (node.value.shape[0], node.value.shape[1], node.value.shape[2]);
                let col = &node.saved[0];
                let g_mat = Tensor { shape: vec![h_out * w_out, c_out], data: g.data.clone() };
                let dwt = col.transpose2().matmul(&g_mat)?;
                let mut db = Tensor::zeros(val(ins[2]).shape.clone());
                for i in 0..h_out * w_out {
                    for j in 0..c_out {
                        db.data[j] += g_mat.data[i * c_out + j];
                    }
                }
                let dcol = g_mat.matmul(&wt.transpose2())?;
                let dx = col2im2d(&dcol, h, w, c_in, *kh, *kw, *sh, *sw);
                Self::accumulate(grads, ins[0], dx);
                Self::accumulate(grads, ins[1], dwt);
                Self::accumulate(grads, ins[2], db);
            }
            Op::BatchNorm => {
                let x = val(ins[0]);
                let gamma = val(ins[1]);
                let c = *x.shape.last().unwrap();
                let n = x.len() / c;
                let xhat = &node.saved[0];
                let invstd = &node.saved[1];
                let mut dgamma = Tensor::zeros(gamma.shape.clone());
                let mut dbeta = Tensor::zeros(val(ins[2]).shape.clone());
                for i in 0..n {
                    for j in 0..c {
                        dgamma.data[j] += g.data[i * c + j] * xhat.data[i * c + j];
                        dbeta.data[j] += g.data[i * c + j];
                    }
                }
                // dx = invstd/N * (N dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                let mut sum_dxhat = vec![E::ZERO; c];
                let mut sum_dxhat_xhat = vec![E::ZERO; c];
                for i in 0..n {
                    for j in 0..c {
                        let dxh = g.data[i * c + j] * gamma.data[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xhat.data[i * c + j];
                    }
                }
                let nf = E::from_f64(n as f64);
                let mut dx = Tensor::zeros(x.shape.clone());
                for i in 0..n {
                    for j in 0..c {
                        let dxh = g.data[i * c + j] * gamma.data[j];
                        dx.data[i * c + j] = invstd.data[j] / nf
                            * (nf * dxh - sum_dxhat[j] - xhat.data[i * c + j] * sum_dxhat_xhat[j]);
                    }
                }
                Self::accumulate(grads, ins[0], dx);
                Self::accumulate(grads, ins[1], dgamma);
                Self::accumulate(grads, ins[2], dbeta);
            }
        }
        Ok(())
    }
}

fn im2col1d<E: Scalar>(x: &Tensor<E>, k: usize, dilation: usize) -> Tensor<E> {
    let (t, f) = (x.shape[0], x.shape[1]);
    let center = (k - 1) / 2;
    let mut col = Tensor::zeros(vec![t, k * f]);
    for ti in 0..t {
        for ki in 0..k {
            let src = ti as isize + (ki as isize - center as isize) * dilation as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            col.data[ti * k * f + ki * f..ti * k * f + (ki + 1) * f]
                .copy_from_slice(&x.data[src * f..(src + 1) * f]);
        }
    }
    col
}

fn col2im1d<E: Scalar>(dcol: &Tensor<E>, t: usize, f: usize, k: usize, dilation: usize) -> Tensor<E> {
    let center = (k - 1) / 2;
    let mut dx = Tensor::zeros(vec![t, f]);
    for ti in 0..t {
        for ki in 0..k {
            let src = ti as isize + (ki as isize - center as isize) * dilation as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            for fi in 0..f {
                dx.data[src * f + fi] += dcol.data[ti * k * f + ki * f + fi];
            }
        }
    }
    dx
}

fn pad_before(extent: usize, out: usize, stride: usize, k: usize) -> usize {
    let total = ((out - 1) * stride + k).saturating_sub(extent);
    total / 2
}

fn im2col2d<E: Scalar>(x: &Tensor<E>, kh: usize, kw: usize, sh: usize, sw: usize) -> Tensor<E> {
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let (h_out, w_out) = (h.div_ceil(sh), w.div_ceil(sw));
    let (ph, pw) = (pad_before(h, h_out, sh, kh), pad_before(w, w_out, sw, kw));
    let mut col = Tensor::zeros(vec![h_out * w_out, kh * kw * c]);
    for oh in 0..h_out {
        for ow in 0..w_out {
            let row = oh * w_out + ow;
            for khi in 0..kh {
                let ih = (oh * sh + khi) as isize - ph as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kwi in 0..kw {
                    let iw = (ow * sw + kwi) as isize - pw as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let dst = row * kh * kw * c + (khi * kw + kwi) * c;
                    let src = (ih as usize * w + iw as usize) * c;
                    col.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im2d<E: Scalar>(
    dcol: &Tensor<E>,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
) -> Tensor<E> {
    let (h_out, w_out) = (h.div_ceil(sh), w.div_ceil(sw));
    let (ph, pw) = (pad_before(h, h_out, sh, kh), pad_before(w, w_out, sw, kw));
    let mut dx = Tensor::zeros(vec![h, w, c]);
    for oh in 0..h_out {
        for ow in 0..w_out {
            let row = oh * w_out + ow;
            for khi in 0..kh {
                let ih = (oh * sh + khi) as isize - ph as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kwi in 0..kw {
                    let iw = (ow * sw + kwi) as isize - pw as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let src = row * kh * kw * c + (khi * kw + kwi) * c;
                    let dst = (ih as usize * w + iw as usize) * c;
                    for ci in 0..c {
                        dx.data[dst + ci] += dcol.data[src + ci];
                    }
                }
            }
        }
    }
    dx
}
