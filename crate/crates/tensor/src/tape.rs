//! Reverse-mode computation tape.
//!
//! A [`Tape`] lives for one forward/backward scope (typically one training
//! step for one sample). Every primitive appends a node whose inputs are
//! earlier nodes, so node order is already a topological order and the
//! backward sweep is a single reverse pass.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, View};
use crate::params::Gradients;
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    SparseMatMul(SparseMatrix, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Gelu(Var),
    Sigmoid(Var),
    Softmax { input: Var, axis: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, cols: Vec<f64> },
    Bce { probs: Var, labels: Vec<f64>, clamp: f64 },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Step(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::SparseMatMul(..) => "sparse_matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Bce { .. } => "bce",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Step(..) => "step",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param_name: Option<String>,
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one optional gradient per node.
#[derive(Clone, Debug)]
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, usize)>,
}

impl Backward {
    /// Gradient of the loss with respect to `v`; zeros when `v` is disconnected.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Gradients for every registered parameter, keyed by name.
    pub fn named(&self) -> Gradients {
        let mut out = Gradients::new();
        for (name, id) in &self.params {
            out.insert(name.clone(), self.grad(Var(*id)));
        }
        out
    }
}

impl Tape {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Unnamed leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named gradient-tracking leaf; reported by [`Backward::named`].
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param_name = Some(name.to_string());
        v
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = kernels::broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| shape_err(name, ta.shape(), tb.shape()))?;
        let data = kernels::broadcast_binary(ta.data(), ta.shape(), tb.data(), tb.shape(), &out_shape, f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b)).map_err(|e| match e {
            TensorError::Shape { .. } => shape_err("matmul", self.shape(a), self.shape(b)),
            other => other,
        })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Product of a constant sparse matrix with `b`.
    pub fn sparse_matmul(&mut self, a: &SparseMatrix, b: Var) -> Result<Var> {
        let t = a.matmul(self.value(b))?;
        let rg = self.rg(&[b]);
        Ok(self.push(t, Op::SparseMatMul(a.clone(), b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).t()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(a)
            .reshape(shape.to_vec())
            .map_err(|_| shape_err("reshape", self.shape(a), shape))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenates equally ranked tensors along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for v in inputs {
            let t = self.value(*v);
            let len = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                let dst = o * total * inner + offset * inner;
                data[dst..dst + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Contract(format!(
                "slice [{start}, {}) along axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = o * full * inner + start * inner;
            data.extend_from_slice(&src[b..b + len * inner]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Slice { input: a, axis, start }, rg))
    }

    /// Sum of all entries as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SumAxis { input: a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| TensorError::Contract(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[Tq, D]`, `k` and `v` are `[Tk, D]`; head `h` uses columns
    /// `h·D/heads ..` of each. Returns the per-head outputs side by side, `[Tq, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, d) = self.value(q).dims2()?;
        let (tk, dk) = self.value(k).dims2()?;
        if dk != d {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if self.shape(v) != [tk, d] {
            return Err(shape_err("attention", self.shape(k), self.shape(v)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!("{heads} heads do not divide width {d}")));
        }
        if [q, k, v].iter().any(|&x| self.value(x).has_nan()) {
            return Err(TensorError::NanInput { op: "attention" });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        for (h, p) in probs.chunks_exact_mut(tq * tk).enumerate() {
            let cols = View::rows(h * dh, d);
            kernels::gemm_view(tq, dh, tk, qd, cols, kd, cols.t(), p, View::rows(0, tk), false);
            for row in p.chunks_exact_mut(tk) {
                row.iter_mut().for_each(|x| *x *= scale);
                kernels::softmax_in_place(row);
            }
            kernels::gemm_view(tq, tk, dh, p, View::rows(0, tk), vd, cols, &mut out, cols, false);
        }
        let t = Tensor::new([tq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(TensorError::Contract(format!("softmax axis {axis} out of range for {:?}", x.shape())));
        }
        if x.has_nan() {
            return Err(TensorError::NanInput { op: "softmax" });
        }
        let data = kernels::softmax(x.data(), x.shape(), axis);
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax { input: a, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xs = self.value(x);
        let d = *xs.shape().last().unwrap_or(&1);
        if xs.rank() == 0 || d < 2 {
            return Err(TensorError::Config(format!(
                "layer_norm needs a normalization extent >= 2, got {:?}",
                xs.shape()
            )));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(shape_err("layer_norm", xs.shape(), self.shape(p)));
            }
        }
        let rows = xs.numel() / d;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; xs.numel()];
        let mut xhat = vec![0.0; xs.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Valid (unpadded) 2-D convolution of a `[c, h, w]` input with
    /// `[o, c, k, k]` kernels and `[o]` biases.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (c, h, w) = match xs.as_slice() {
            &[c, h, w] => (c, h, w),
            _ => return Err(shape_err("conv2d", &xs, &ws)),
        };
        let (o, k) = match ws.as_slice() {
            &[o, wc, k1, k2] if wc == c && k1 == k2 => (o, k1),
            _ => return Err(shape_err("conv2d", &xs, &ws)),
        };
        if self.shape(bias) != [o] {
            return Err(shape_err("conv2d", &ws, self.shape(bias)));
        }
        if stride == 0 || k > h || k > w {
            return Err(TensorError::Config(format!(
                "conv2d kernel {k} stride {stride} invalid for input {xs:?}"
            )));
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let cols = kernels::im2col(self.value(input).data(), c, h, w, k, stride);
        let npos = ho * wo;
        let mut out = vec![0.0; o * npos];
        let bias_v = self.value(bias).data();
        for oc in 0..o {
            out[oc * npos..(oc + 1) * npos].fill(bias_v[oc]);
        }
        kernels::gemm(o, c * k * k, npos, self.value(weight).data(), false, &cols, false, &mut out, true);
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new([o, ho, wo], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                cols,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities against `{0,1}` labels,
    /// with probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn bce_mean(&mut self, probs: Var, labels: &Tensor, clamp: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != labels.shape() {
            return Err(shape_err("bce_mean", p.shape(), labels.shape()));
        }
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&pi, &yi)| {
                let pc = pi.clamp(clamp, 1.0 - clamp);
                -(yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                labels: labels.data().to_vec(),
                clamp,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over rows of `[n, classes]` logits.
    /// Rows whose target is `None` are ignored; all-ignored yields zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let x = self.value(logits);
        let (n, c) = x.dims2()?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", x.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(TensorError::Contract(format!("class id {bad} out of range for {c} classes")));
        }
        let probs = kernels::softmax(x.data(), x.shape(), 1);
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                // log-sum-exp form keeps very confident rows finite
                let row = x.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[*t];
            }
        }
        if count > 0 {
            loss /= count as f64;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Hard threshold `x >= threshold ? 1 : 0`. Not differentiable.
    pub fn step(&mut self, a: Var, threshold: f64) -> Var {
        let t = self.value(a).map(|x| if x >= threshold { 1.0 } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(t, Op::Step(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param_name.clone().map(|name| (name, i)))
            .collect();
        Ok(Backward { grads, shapes, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn reduced(&self, v: Var, out_shape: &[usize], g: &[f64]) -> Result<Tensor> {
        let target = self.shape(v).to_vec();
        let data = kernels::reduce_to_shape(g, out_shape, &target);
        Tensor::new(target, data)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    let ga = self.reduced(*a, out_shape, g.data())?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = self.reduced(*b, out_shape, g.data())?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    let ga = self.reduced(*a, out_shape, g.data())?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                    let gb = self.reduced(*b, out_shape, &neg)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let prod = kernels::broadcast_binary(g.data(), out_shape, tb.data(), tb.shape(), out_shape, |x, y| x * y);
                    let ga = self.reduced(*a, out_shape, &prod)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let prod = kernels::broadcast_binary(g.data(), out_shape, ta.data(), ta.shape(), out_shape, |x, y| x * y);
                    let gb = self.reduced(*b, out_shape, &prod)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.map(|x| x * c))?;
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let n = tb.shape()[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    self.accumulate(grads, *a, Tensor::new([m, k], ga)?)?;
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    self.accumulate(grads, *b, Tensor::new([k, n], gb)?)?;
                }
            }
            Op::SparseMatMul(a, b) => {
                self.accumulate(grads, *b, a.matmul_transposed(g)?)?;
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.t()?)?;
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshape(shape)?)?;
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::axis_split(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let shape = self.shape(*v).to_vec();
                    let len = shape[*axis];
                    if self.requires_grad(*v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let b = o * total * inner + offset * inner;
                            data.extend_from_slice(&g.data()[b..b + len * inner]);
                        }
                        self.accumulate(grads, *v, Tensor::new(shape, data)?)?;
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input).to_vec();
                let (outer, full, inner) = kernels::axis_split(&shape, *axis);
                let len = out_shape[*axis];
                let mut data = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let b = o * full * inner + start * inner;
                    data[b..b + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, Tensor::new(shape, data)?)?;
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.item()))?;
            }
            Op::SumAxis { input, axis } => {
                let shape = self.shape(*input).to_vec();
                let (outer, len, inner) = kernels::axis_split(&shape, *axis);
                let mut data = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            data[(o * len + k) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(shape, data)?)?;
            }
            Op::Gelu(a) => {
                let ga = self.value(*a).zip_map(g, |x, gy| gy * kernels::gelu_grad(x))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sigmoid(a) => {
                let ga = node.value.zip_map(g, |y, gy| gy * y * (1.0 - y))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_split(out_shape, *axis);
                let mut data = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|k| y[base + k * inner] * g.data()[base + k * inner]).sum();
                        for k in 0..len {
                            let idx = base + k * inner;
                            data[idx] = y[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(out_shape.to_vec(), data)?)?;
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, d) = (out_shape[0], out_shape[1]);
                let tk = self.shape(*k)[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let gd = g.data();
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                let mut ds = vec![0.0; tq * tk];
                let score_view = View::rows(0, tk);
                for (h, p) in probs.chunks_exact(tq * tk).enumerate() {
                    let cols = View::rows(h * dh, d);
                    if self.requires_grad(*v) {
                        kernels::gemm_view(tk, tq, dh, p, score_view.t(), gd, cols, &mut dv, cols, false);
                    }
                    if self.requires_grad(*q) || self.requires_grad(*k) {
                        kernels::gemm_view(tq, dh, tk, gd, cols, vd, cols.t(), &mut ds, score_view, false);
                        for (dr, pr) in ds.chunks_exact_mut(tk).zip(p.chunks_exact(tk)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, &pi) in dr.iter_mut().zip(pr) {
                                *x = scale * pi * (*x - dot);
                            }
                        }
                        kernels::gemm_view(tq, tk, dh, &ds, score_view, kd, cols, &mut dq, cols, false);
                        kernels::gemm_view(tk, tq, dh, &ds, score_view.t(), qd, cols, &mut dk, cols, false);
                    }
                }
                self.accumulate(grads, *q, Tensor::new([tq, d], dq)?)?;
                self.accumulate(grads, *k, Tensor::new([tk, d], dk)?)?;
                self.accumulate(grads, *v, Tensor::new([tk, d], dv)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *out_shape.last().unwrap_or(&1);
                let rows = xhat.len() / d;
                let gam = self.value(*gamma).data();
                let gy = g.data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gy[r * d + j] * xhat[r * d + j];
                            db[j] += gy[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new([d], dg)?)?;
                    self.accumulate(grads, *beta, Tensor::new([d], db)?)?;
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gy[r * d + j] * gam[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dh = gy[r * d + j] * gam[j];
                            dx[r * d + j] = scale * (d as f64 * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(out_shape.to_vec(), dx)?)?;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                cols,
            } => {
                let xs = self.shape(*input).to_vec();
                let ws = self.shape(*weight).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (o, k) = (ws[0], ws[2]);
                let npos = out_shape[1] * out_shape[2];
                let ckk = c * k * k;
                if self.requires_grad(*bias) {
                    let db: Vec<f64> = (0..o).map(|oc| g.data()[oc * npos..(oc + 1) * npos].iter().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::new([o], db)?)?;
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![0.0; o * ckk];
                    kernels::gemm(o, npos, ckk, g.data(), false, cols, true, &mut dw, false);
                    self.accumulate(grads, *weight, Tensor::new(ws.clone(), dw)?)?;
                }
                if self.requires_grad(*input) {
                    let mut dcols = vec![0.0; ckk * npos];
                    kernels::gemm(ckk, o, npos, self.value(*weight).data(), true, g.data(), false, &mut dcols, false);
                    let dx = kernels::col2im(&dcols, c, h, w, k, *stride);
                    self.accumulate(grads, *input, Tensor::new(xs, dx)?)?;
                }
            }
            Op::Bce { probs, labels, clamp } => {
                let p = self.value(*probs);
                let n = p.numel() as f64;
                let gy = g.item();
                // Evaluated at the clamped probability so saturated predictions
                // still receive a corrective signal.
                let data = p
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&pi, &yi)| {
                        let pc = pi.clamp(*clamp, 1.0 - clamp);
                        gy * (pc - yi) / (pc * (1.0 - pc)) / n
                    })
                    .collect();
                self.accumulate(grads, *probs, Tensor::new(p.shape().to_vec(), data)?)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let shape = self.shape(*logits).to_vec();
                let c = shape[1];
                let mut data = vec![0.0; probs.len()];
                if *count > 0 {
                    let s = g.item() / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for j in 0..c {
                                data[r * c + j] = s * probs[r * c + j];
                            }
                            data[r * c + t] -= s;
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(shape, data)?)?;
            }
            Op::Step(a) => {
                if self.requires_grad(*a) {
                    return Err(TensorError::NonDifferentiable { op: node.op.name() });
                }
            }
        }
        Ok(())
    }
}
