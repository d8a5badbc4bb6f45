//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive executed during one forward pass, in
//! execution order. [`Graph::backward`] replays the tape in reverse and adds
//! the resulting parameter gradients into a [`ParamStore`].

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, gemm, Mat};
use crate::numerics::{Gradients, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    WeightedGather {
        x: Var,
        idx: Vec<usize>,
        weights: Vec<f64>,
        fan: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    BroadcastRows(Var),
    Reshape(Var),
    StdNormalize {
        x: Var,
        groups: usize,
        mean: Vec<f64>,
        sigma: Vec<f64>,
        eps: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        order: Vec<usize>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::MaxPool { .. } => "max_pool",
            Op::Gather { .. } => "gather",
            Op::WeightedGather { .. } => "weighted_gather",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Reshape(_) => "reshape",
            Op::StdNormalize { .. } => "std_normalize",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    scope: String,
    macs: BTreeMap<String, u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Label under which subsequent multiply-accumulates are counted.
    pub fn set_scope(&mut self, scope: &str) {
        self.scope.clear();
        self.scope.push_str(scope);
    }

    pub fn macs_by_scope(&self) -> &BTreeMap<String, u64> {
        &self.macs
    }

    pub fn macs_total(&self) -> u64 {
        self.macs.values().sum()
    }

    fn count_macs(&mut self, n: usize) {
        if n == 0 {
            return;
        }
        match self.macs.get_mut(self.scope.as_str()) {
            Some(c) => *c += n as u64,
            None => {
                self.macs.insert(self.scope.clone(), n as u64);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            other => inputs_of(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Records the current value of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// `x · W (+ b)` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().unwrap_or(&1);
        if ws.len() != 2 || ws[0] != cin || xs.is_empty() {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let cout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("linear bias", self.shape(b), &[cout]));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in out.chunks_exact_mut(cout.max(1)) {
                r.copy_from_slice(bias);
            }
        }
        gemm(
            Mat::new(self.value(x).data(), rows, cin),
            Mat::new(self.value(w).data(), cin, cout),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        self.count_macs(rows * cin * cout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Relu(x))
    }

    /// `x * scale + shift`, broadcasting `[c]`-shaped factors over the trailing axis.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        for p in [scale, shift] {
            if self.shape(p) != [c] {
                return Err(Error::shape("channel_affine", self.shape(x), self.shape(p)));
            }
        }
        let s = self.value(scale).data();
        let b = self.value(shift).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)) {
            for ((v, s), b) in row.iter_mut().zip(s).zip(b) {
                *v = *v * s + b;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::ChannelAffine { x, scale, shift }))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if c == 0 || self.value(x).rank() == 0 {
            return Err(Error::shape("layer_norm", self.shape(x), &[c]));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let rows = self.value(x).rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xin = self.value(x).data();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &xin[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.last_dim();
        if m == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut out = vec![0.0; t.numel()];
        for (o, row) in out.chunks_exact_mut(m).zip(t.data().chunks_exact(m)) {
            kernels::softmax_into(row, o);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x)))
    }

    /// Max over the middle axis of an `[n, k, c]` tensor. Ties go to the lowest index.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("max_pool", &s, &[0, 0, 0]));
        }
        let (n, k, c) = (s[0], s[1], s[2]);
        if k == 0 {
            return Err(Error::EmptyGroup(format!("max_pool over k=0 for shape {s:?}")));
        }
        let xin = self.value(x).data();
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            let base = i * k * c;
            out[i * c..(i + 1) * c].copy_from_slice(&xin[base..base + c]);
            for j in 1..k {
                let row = &xin[base + j * c..base + (j + 1) * c];
                for ch in 0..c {
                    if row[ch] > out[i * c + ch] {
                        out[i * c + ch] = row[ch];
                        argmax[i * c + ch] = j;
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::MaxPool { x, argmax }))
    }

    /// Index of the winning slot for each `(n, c)` output of a max-pool node.
    pub fn argmax(&self, pooled: Var) -> Option<&[usize]> {
        match &self.nodes[pooled.0].op {
            Op::MaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Selects rows of a 2-D tensor; the result is reshaped to `out_shape`
    /// (whose trailing axis must equal the row width).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", t.shape(), &[0, 0]));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if out_shape.iter().product::<usize>() != idx.len() * c || out_shape.last() != Some(&c) {
            return Err(Error::shape("gather_rows", out_shape, &[idx.len(), c]));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= n {
                return Err(Error::Index(format!("gather index {i} >= {n}")));
            }
            out.extend_from_slice(t.row(i));
        }
        Ok(self.push(Tensor::new(out_shape.to_vec(), out)?, Op::Gather { x, idx }))
    }

    /// `out[i] = Σ_f weights[i*fan+f] · x[idx[i*fan+f]]` over rows of a 2-D tensor.
    pub fn weighted_rows(
        &mut self,
        x: Var,
        idx: Vec<usize>,
        weights: Vec<f64>,
        fan: usize,
    ) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || fan == 0 || idx.len() % fan != 0 || weights.len() != idx.len() {
            return Err(Error::shape("weighted_rows", t.shape(), &[idx.len(), fan]));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let m = idx.len() / fan;
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let o = &mut out[i * c..(i + 1) * c];
            for f in 0..fan {
                let src = idx[i * fan + f];
                if src >= n {
                    return Err(Error::Index(format!("weighted_rows index {src} >= {n}")));
                }
                let w = weights[i * fan + f];
                for (ov, xv) in o.iter_mut().zip(t.row(src)) {
                    *ov += w * xv;
                }
            }
        }
        self.count_macs(m * fan * c);
        Ok(self.push(
            Tensor::new(vec![m, c], out)?,
            Op::WeightedGather {
                x,
                idx,
                weights,
                fan,
            },
        ))
    }

    /// Stacks 2-D tensors with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.two_d_width("concat_rows", parts, |s| s[1])?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.shape(p)[0];
        }
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.two_d_width("concat_cols", parts, |s| s[0])?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.shape()[0] {
            return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
        }
        let c = t.shape()[1];
        let out = t.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows { x, start }))
    }

    /// Repeats a `[1, c]` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != 1 {
            return Err(Error::shape("broadcast_rows", t.shape(), &[1, t.last_dim()]));
        }
        let c = t.shape()[1];
        let out = t.data().repeat(n);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::BroadcastRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Divides each of `groups` equal contiguous blocks of `x` by
    /// (population std of that block + eps). Returns the per-block std.
    pub fn std_normalize(&mut self, x: Var, groups: usize, eps: f64) -> Result<(Var, Vec<f64>)> {
        let t = self.value(x);
        if groups == 0 || t.numel() % groups != 0 || t.numel() == 0 {
            return Err(Error::shape("std_normalize", t.shape(), &[groups]));
        }
        let m = t.numel() / groups;
        let mut mean = vec![0.0; groups];
        let mut sigma = vec![0.0; groups];
        let mut out = vec![0.0; t.numel()];
        for (gi, block) in t.data().chunks_exact(m).enumerate() {
            let mu = block.iter().sum::<f64>() / m as f64;
            let var = block.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let s = var.sqrt();
            if !s.is_finite() {
                return Err(Error::Numeric(format!("non-finite group std {s}")));
            }
            mean[gi] = mu;
            sigma[gi] = s;
            let inv = 1.0 / (s + eps);
            for (o, v) in out[gi * m..(gi + 1) * m].iter_mut().zip(block) {
                *o = v * inv;
            }
        }
        let shape = t.shape().to_vec();
        let var = self.push(
            Tensor::new(shape, out)?,
            Op::StdNormalize {
                x,
                groups,
                mean,
                sigma: sigma.clone(),
                eps,
            },
        );
        Ok((var, sigma))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[nq, D]`, `k` and `v` are `[s, D]` with `D = heads · d_k`.
    /// Key/value rows are visited in a canonical order (lexicographic over
    /// the concatenated key and value row), so the result is bit-identical
    /// under any permutation of the key/value rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 2 || ks.len() != 2 || vs != ks || qs[1] != ks[1] {
            return Err(Error::shape("attention", &qs, &ks));
        }
        let (nq, d, s) = (qs[0], qs[1], ks[0]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        if s == 0 {
            return Err(Error::Contract("attention over an empty key set".into()));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let order = canonical_row_order(kd, vd, s, d);
        let mut probs = vec![0.0; heads * nq * s];
        let mut out = vec![0.0; nq * d];
        let mut scores = vec![0.0; s];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..nq {
                let qi = &qd[i * d..(i + 1) * d][cols.clone()];
                for (jj, &j) in order.iter().enumerate() {
                    scores[jj] = scale * kernels::dot(qi, &kd[j * d..(j + 1) * d][cols.clone()]);
                }
                let p = &mut probs[(h * nq + i) * s..(h * nq + i + 1) * s];
                kernels::softmax_into(&scores, p);
                let o = &mut out[i * d..(i + 1) * d][cols.clone()];
                for (jj, &j) in order.iter().enumerate() {
                    let vj = &vd[j * d..(j + 1) * d][cols.clone()];
                    for (ov, vv) in o.iter_mut().zip(vj) {
                        *ov += p[jj] * vv;
                    }
                }
            }
        }
        self.count_macs(2 * nq * s * d);
        Ok(self.push(
            Tensor::new(vec![nq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                order,
                probs,
            },
        ))
    }

    /// Attention weights of an attention node as `[heads][query][key]`,
    /// with keys in their original row order.
    pub fn attention_weights(&self, node: Var) -> Option<Vec<Vec<Vec<f64>>>> {
        let Op::Attention {
            heads,
            order,
            probs,
            q,
            ..
        } = &self.nodes[node.0].op
        else {
            return None;
        };
        let nq = self.shape(*q)[0];
        let s = order.len();
        let mut out = vec![vec![vec![0.0; s]; nq]; *heads];
        for (h, per_head) in out.iter_mut().enumerate() {
            for (i, row) in per_head.iter_mut().enumerate() {
                let p = &probs[(h * nq + i) * s..(h * nq + i + 1) * s];
                for (jj, &j) in order.iter().enumerate() {
                    row[j] = p[jj];
                }
            }
        }
        Some(out)
    }

    /// Mean cross-entropy of `[n, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        let c = t.shape()[1];
        let mut probs = vec![0.0; t.numel()];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index(format!("label {y} out of range for {c} classes")));
            }
            let row = t.row(i);
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[y];
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// First node holding a non-finite value, as (position, op name).
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Computes parameter gradients of a scalar node without touching the store.
    pub fn gradients(&self, loss: Var, n_params: usize) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            per_param: vec![None; n_params],
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    if id.0 >= n_params {
                        return Err(Error::Contract(format!(
                            "parameter {} outside store of {n_params}",
                            id.0
                        )));
                    }
                    match &mut out.per_param[id.0] {
                        Some(acc) => kernels::add_assign(acc, &g),
                        slot @ None => *slot = Some(g),
                    }
                }
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    /// Backpropagates a scalar loss and adds the gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss, store.len())?;
        store.accumulate(&grads, 1.0);
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, op: &Op, y: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (cin, cout) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.rows();
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(Mat::new(g, rows, cout), Mat::new(wt.data(), cin, cout).t(), dx, 1.0);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(Mat::new(xt.data(), rows, cin).t(), Mat::new(g, rows, cout), dw, 1.0);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks_exact(cout.max(1)) {
                            kernels::add_assign(db, row);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        kernels::add_assign(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    kernels::add_assign(d, g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.slot(grads, *x) {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += s * gv;
                    }
                }
            }
            Op::Relu(x) => {
                let xin = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xin) {
                        if *xv > 0.0 {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xin = self.value(*x);
                let c = xin.last_dim().max(1);
                let s = self.value(*scale).data();
                if let Some(d) = self.slot(grads, *x) {
                    for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((dv, gv), sv) in drow.iter_mut().zip(grow).zip(s) {
                            *dv += gv * sv;
                        }
                    }
                }
                if let Some(ds) = self.slot(grads, *scale) {
                    for (xrow, grow) in xin.data().chunks_exact(c).zip(g.chunks_exact(c)) {
                        for ((dv, gv), xv) in ds.iter_mut().zip(grow).zip(xrow) {
                            *dv += gv * xv;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *shift) {
                    for grow in g.chunks_exact(c) {
                        kernels::add_assign(db, grow);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = y.last_dim();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (hrow, grow) in xhat.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for ((dv, gv), hv) in dg.iter_mut().zip(grow).zip(hrow) {
                            *dv += gv * hv;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in g.chunks_exact(c) {
                        kernels::add_assign(db, grow);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for (r, (hrow, grow)) in xhat.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = grow[j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hrow[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += rstd[r] * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let m = y.last_dim();
                if let Some(d) = self.slot(grads, *x) {
                    for ((drow, grow), prow) in d
                        .chunks_exact_mut(m)
                        .zip(g.chunks_exact(m))
                        .zip(y.data().chunks_exact(m))
                    {
                        let inner = kernels::dot(grow, prow);
                        for ((dv, gv), pv) in drow.iter_mut().zip(grow).zip(prow) {
                            *dv += pv * (gv - inner);
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let s = self.shape(*x);
                let (k, c) = (s[1], s[2]);
                if let Some(d) = self.slot(grads, *x) {
                    for (slot, (&gv, &j)) in g.iter().zip(argmax).enumerate() {
                        let (i, ch) = (slot / c, slot % c);
                        d[(i * k + j) * c + ch] += gv;
                    }
                }
            }
            Op::Gather { x, idx } => {
                let c = self.value(*x).last_dim();
                if let Some(d) = self.slot(grads, *x) {
                    for (grow, &i) in g.chunks_exact(c.max(1)).zip(idx) {
                        kernels::add_assign(&mut d[i * c..(i + 1) * c], grow);
                    }
                }
            }
            Op::WeightedGather {
                x,
                idx,
                weights,
                fan,
            } => {
                let c = self.value(*x).last_dim();
                if let Some(d) = self.slot(grads, *x) {
                    for (r, grow) in g.chunks_exact(c.max(1)).enumerate() {
                        for f in 0..*fan {
                            let src = idx[r * fan + f];
                            let w = weights[r * fan + f];
                            for (dv, gv) in d[src * c..(src + 1) * c].iter_mut().zip(grow) {
                                *dv += w * gv;
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(d) = self.slot(grads, *p) {
                        kernels::add_assign(d, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.last_dim();
                let rows = y.rows();
                let mut col = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if let Some(d) = self.slot(grads, *p) {
                        for r in 0..rows {
                            kernels::add_assign(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + col..r * total + col + w],
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = y.last_dim();
                if let Some(d) = self.slot(grads, *x) {
                    kernels::add_assign(&mut d[start * c..start * c + g.len()], g);
                }
            }
            Op::BroadcastRows(x) => {
                let c = y.last_dim();
                if let Some(d) = self.slot(grads, *x) {
                    for grow in g.chunks_exact(c.max(1)) {
                        kernels::add_assign(d, grow);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    kernels::add_assign(d, g);
                }
            }
            Op::StdNormalize {
                x,
                groups,
                mean,
                sigma,
                eps,
            } => {
                let xin = self.value(*x).data();
                let m = xin.len() / groups;
                if let Some(d) = self.slot(grads, *x) {
                    for gi in 0..*groups {
                        let block = gi * m..(gi + 1) * m;
                        let denom = sigma[gi] + eps;
                        let xb = &xin[block.clone()];
                        let gb = &g[block.clone()];
                        let db = &mut d[block];
                        let gx = kernels::dot(gb, xb);
                        // d sigma / d x_i = (x_i - mean) / (m sigma); undefined at sigma = 0
                        let coupling = if sigma[gi] > 0.0 {
                            gx / (denom * denom) / (m as f64 * sigma[gi])
                        } else {
                            0.0
                        };
                        for ((dv, gv), xv) in db.iter_mut().zip(gb).zip(xb) {
                            *dv += gv / denom - coupling * (xv - mean[gi]);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                order,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, order, probs, g, grads),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                if let Some(d) = self.slot(grads, *logits) {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == lab { 1.0 } else { 0.0 };
                            d[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        order: &[usize],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (nq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let s = order.len();
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; nq * d];
        let mut dkey = vec![0.0; s * d];
        let mut dval = vec![0.0; s * d];
        let mut dp = vec![0.0; s];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..nq {
                let p = &probs[(h * nq + i) * s..(h * nq + i + 1) * s];
                let gi = &g[i * d..(i + 1) * d][cols.clone()];
                let mut inner = 0.0;
                for (jj, &j) in order.iter().enumerate() {
                    let vj = &vd[j * d..(j + 1) * d][cols.clone()];
                    dp[jj] = kernels::dot(gi, vj);
                    inner += p[jj] * dp[jj];
                    for (dv, gv) in dval[j * d..(j + 1) * d][cols.clone()].iter_mut().zip(gi) {
                        *dv += p[jj] * gv;
                    }
                }
                let qi = &qd[i * d..(i + 1) * d][cols.clone()];
                for (jj, &j) in order.iter().enumerate() {
                    let ds = scale * p[jj] * (dp[jj] - inner);
                    let kj = &kd[j * d..(j + 1) * d][cols.clone()];
                    for (dv, kv) in dq[i * d..(i + 1) * d][cols.clone()].iter_mut().zip(kj) {
                        *dv += ds * kv;
                    }
                    for (dv, qv) in dkey[j * d..(j + 1) * d][cols.clone()].iter_mut().zip(qi) {
                        *dv += ds * qv;
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dkey), (v, dval)] {
            if let Some(slot) = self.slot(grads, var) {
                kernels::add_assign(slot, &buf);
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn two_d_width(
        &self,
        op: &'static str,
        parts: &[Var],
        axis: impl Fn(&[usize]) -> usize,
    ) -> Result<usize> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract(format!("{op} of zero tensors")))?;
        let s0 = self.shape(*first);
        if s0.len() != 2 {
            return Err(Error::shape(op, s0, &[0, 0]));
        }
        let want = axis(s0);
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || axis(s) != want {
                return Err(Error::shape(op, s0, s));
            }
        }
        Ok(want)
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::Add(a, b) | Op::Sub(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Relu(x)
        | Op::Softmax(x)
        | Op::BroadcastRows(x)
        | Op::Reshape(x)
        | Op::Sum(x) => vec![*x],
        Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::MaxPool { x, .. }
        | Op::Gather { x, .. }
        | Op::WeightedGather { x, .. }
        | Op::SliceRows { x, .. }
        | Op::StdNormalize { x, .. } => vec![*x],
        Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Row order sorting `(key row, value row)` lexicographically, index as last resort.
fn canonical_row_order(k: &[f64], v: &[f64], s: usize, d: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s).collect();
    let cmp_rows = |a: &[f64], b: &[f64]| -> Ordering {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    };
    order.sort_by(|&a, &b| {
        cmp_rows(&k[a * d..(a + 1) * d], &k[b * d..(b + 1) * d])
            .then_with(|| cmp_rows(&v[a * d..(a + 1) * d], &v[b * d..(b + 1) * d]))
            .then(a.cmp(&b))
    });
    order
}
