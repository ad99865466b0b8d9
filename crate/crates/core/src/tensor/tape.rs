//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends a node holding its output value, handles to its
//! inputs and whatever it saved for the backward rule. Inputs always precede
//! the node that consumes them, so walking the record backwards visits every
//! operation once, after all of its consumers.

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running statistics.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct NormSettings {
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, g: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, g: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleChannels { u: Var, s: Var },
    Dense { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Concat { parts: Vec<Var> },
    Sum { x: Var },
    /// Scalar function of `x` whose gradient was computed alongside its value.
    Scalar { x: Var, grad: Tensor },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::ConvT { x, w, b, .. } | Op::Dense { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MaxPool { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Sum { x }
            | Op::Scalar { x, .. } => vec![*x],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ScaleChannels { u, s } => vec![*u, *s],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts } => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Computation record. Confined to one thread; operator kernels parallelize internally.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, [usize; 3])> {
    match *t.shape() {
        [n, c, d, h, w] => Ok((n, c, [d, h, w])),
        ref s => Err(Error::shape(format!("{what} expects [N, C, D, H, W], got {s:?}"))),
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

    /// Records an input tensor. Leaves with `requires_grad` accumulate gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            grad: requires_grad.then(|| Tensor::zeros(value.shape())),
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        ensure_finite(value.data(), name)?;
        let idx = self.nodes.len();
        let inputs = op.inputs();
        assert!(inputs.iter().all(|v| v.0 < idx), "operation input recorded after its consumer");
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, requires_grad: false, needs_grad, grad: None });
        Ok(Var(idx))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, dims) = dims3(self.value(x), "conv3d input")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 5 || ws[1] != cin {
            return Err(Error::shape(format!("conv3d weight {ws:?} vs input channels {cin}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(Error::shape("conv3d bias length must equal output channels"));
            }
        }
        let g = ConvGeom::new(cin, ws[0], dims, [ws[2], ws[3], ws[4]], stride, pad)?;
        let y = kernels::conv3d(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &g,
            n,
        );
        let [d, h, wd] = g.out_dims;
        let t = Tensor::new(&[n, g.cout, d, h, wd], y)?;
        self.push(t, Op::Conv { x, w, b, g }, "conv3d")
    }

    /// Transposed convolution. The weight is `[C_in, C_out, kd, kh, kw]`, the
    /// same layout as the [`Tape::conv3d`] weight of the adjoint convolution.
    pub fn conv3d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, dims) = dims3(self.value(x), "conv3d_transpose input")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 5 || ws[0] != cin {
            return Err(Error::shape(format!("conv3d_transpose weight {ws:?} vs input channels {cin}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[1]] {
                return Err(Error::shape("conv3d_transpose bias length must equal output channels"));
            }
        }
        let g = ConvGeom::transposed(cin, ws[1], dims, [ws[2], ws[3], ws[4]], stride, pad)?;
        let y = kernels::conv3d_transpose(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &g,
            n,
        );
        let [d, h, wd] = g.in_dims;
        let t = Tensor::new(&[n, g.cin, d, h, wd], y)?;
        self.push(t, Op::ConvT { x, w, b, g }, "conv3d_transpose")
    }

    pub fn max_pool3d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, dims) = dims3(self.value(x), "max_pool3d input")?;
        let (y, argmax) = kernels::max_pool3d(self.value(x).data(), n * c, dims, k, stride)?;
        let od = kernels::pool_dims(dims, k, stride)?;
        let t = Tensor::new(&[n, c, od[0], od[1], od[2]], y)?;
        self.push(t, Op::MaxPool { x, argmax }, "max_pool3d")
    }

    /// Per-channel mean over all spatial positions: `[N, C, ...] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() < 3 {
            return Err(Error::shape(format!("global_avg_pool expects spatial axes, got {s:?}")));
        }
        let vol: usize = s[2..].iter().product();
        if vol == 0 {
            return Err(Error::shape("global_avg_pool over an empty volume"));
        }
        let y: Vec<f64> = self.value(x).data().chunks(vol).map(|c| c.iter().sum::<f64>() / vol as f64).collect();
        let t = Tensor::new(&[s[0], s[1]], y)?;
        self.push(t, Op::GlobalAvgPool { x }, "global_avg_pool")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu { x }, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid { x }, "sigmoid")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        self.push(t, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        self.push(t, Op::Mul { a, b }, "mul")
    }

    /// `out[n, c, ...] = u[n, c, ...] · s[n, c]`.
    pub fn scale_channels(&mut self, u: Var, s: Var) -> Result<Var> {
        let us = self.value(u).shape().to_vec();
        if us.len() < 2 || self.value(s).shape() != &us[..2] {
            return Err(Error::shape(format!(
                "scale_channels: {:?} cannot scale {us:?}",
                self.value(s).shape()
            )));
        }
        let vol: usize = us[2..].iter().product();
        let sv = self.value(s).data();
        let data = self
            .value(u)
            .data()
            .chunks(vol.max(1))
            .zip(sv)
            .flat_map(|(c, &k)| c.iter().map(move |v| v * k))
            .collect();
        let t = Tensor::new(&us, data)?;
        self.push(t, Op::ScaleChannels { u, s }, "scale_channels")
    }

    /// `y = x·wᵀ + b` for `x: [N, Cin]`, `w: [Cout, Cin]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("dense: input {xs:?} vs weight {ws:?}")));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("dense bias length must equal output width"));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut y = vec![0.0; n * cout];
        for i in 0..n {
            for o in 0..cout {
                let mut acc = b.map_or(0.0, |b| self.value(b).data()[o]);
                for k in 0..cin {
                    acc += xd[i * cin + k] * wd[o * cin + k];
                }
                y[i * cout + o] = acc;
            }
        }
        let t = Tensor::new(&[n, cout], y)?;
        self.push(t, Op::Dense { x, w, b }, "dense")
    }

    /// Batch normalization over all axes except the channel axis.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: NormMode,
        settings: NormSettings,
    ) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(Error::shape("batch_norm expects [N, C, ...]"));
        }
        let (n, c) = (s[0], s[1]);
        let vol: usize = s[2..].iter().product();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] || stats.mean.len() != c {
            return Err(Error::shape(format!("batch_norm parameters do not match {c} channels")));
        }
        let m = n * vol;
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            NormMode::Train => {
                if m < 2 {
                    return Err(Error::shape("batch_norm in train mode needs at least two values per channel"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, chunk) in xd.chunks(vol).enumerate() {
                    mean[i % c] += chunk.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for (i, chunk) in xd.chunks(vol).enumerate() {
                    let mu = mean[i % c];
                    var[i % c] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                (mean, var)
            }
            NormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + settings.eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        for (i, (src, dst)) in xd.chunks(vol).zip(xhat.chunks_mut(vol)).enumerate() {
            let (mu, is) = (mean[i % c], inv_std[i % c]);
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (v - mu) * is;
            }
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = vec![0.0; xd.len()];
        for (i, (src, dst)) in xhat.chunks(vol).zip(y.chunks_mut(vol)).enumerate() {
            let (g, b) = (gd[i % c], bd[i % c]);
            for (d, v) in dst.iter_mut().zip(src) {
                *d = g * v + b;
            }
        }
        if mode == NormMode::Train {
            let unbias = m as f64 / (m as f64 - 1.0);
            for ch in 0..c {
                stats.mean[ch] = (1.0 - settings.momentum) * stats.mean[ch] + settings.momentum * mean[ch];
                stats.var[ch] = (1.0 - settings.momentum) * stats.var[ch] + settings.momentum * var[ch] * unbias;
            }
        }
        let t = Tensor::new(&s, y)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: mode == NormMode::Train };
        self.push(t, op, "batch_norm")
    }

    /// Concatenates `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?).shape().to_vec();
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape(format!("concat_channels: {s:?} vs {first:?}")));
            }
            channels += s[1];
        }
        let n = first[0];
        let vol: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * vol);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * vol;
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Concat { parts: parts.to_vec() }, "concat_channels")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum { x }, "sum")
    }

    /// Records a scalar `value = f(x)` together with `∂f/∂x`, computed by the caller.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::shape("scalar_fn gradient must match its input shape"));
        }
        ensure_finite(grad.data(), "scalar_fn gradient")?;
        self.push(Tensor::scalar(value), Op::Scalar { x, grad }, "scalar_fn")
    }

    /// `Σ x ⊙ weights`, a convenient scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(Error::shape("weighted_sum weights must match input"));
        }
        let v = self.value(x).dot(weights);
        self.scalar_fn(x, v, weights.clone())
    }

    /// Accumulates `∂loss/∂leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if node.requires_grad {
                let acc = self.nodes[idx].grad.as_mut().expect("requires_grad leaf has a gradient buffer");
                acc.data_mut().iter_mut().zip(&gy).for_each(|(a, g)| *a += g);
                continue;
            }
            for (input, g) in self.backward_op(idx, &gy) {
                assert!(input.0 < idx, "computation record is not topologically ordered");
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match adj[input.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => adj[input.0] = Some(g),
                }
            }
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                ensure_finite(g.data(), "backward")?;
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradients of node `idx`'s inputs given the gradient `gy` of its output.
    fn backward_op(&self, idx: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, g } => {
                let n = self.value(*x).shape()[0];
                let (gx, gw) = kernels::conv3d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    g,
                    n,
                    self.needs(*x),
                    self.needs(*w),
                );
                out.extend(gx.map(|v| (*x, v)));
                out.extend(gw.map(|v| (*w, v)));
                if let Some(b) = b {
                    out.push((*b, kernels::channel_sums(gy, g.cout, g.out_volume())));
                }
            }
            Op::ConvT { x, w, b, g } => {
                let n = self.value(*x).shape()[0];
                if self.needs(*x) {
                    out.push((*x, kernels::conv3d(gy, self.value(*w).data(), None, g, n)));
                }
                if self.needs(*w) {
                    let (_, gw) = kernels::conv3d_backward(gy, self.value(*w).data(), self.value(*x).data(), g, n, false, true);
                    out.push((*w, gw.unwrap()));
                }
                if let Some(b) = b {
                    out.push((*b, kernels::channel_sums(gy, g.cin, g.in_volume())));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (&i, g) in argmax.iter().zip(gy) {
                    gx[i] += g;
                }
                out.push((*x, gx));
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x);
                let vol: usize = xs.shape()[2..].iter().product();
                let inv = 1.0 / vol as f64;
                let gx = gy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, vol)).collect();
                out.push((*x, gx));
            }
            Op::Relu { x } => {
                let gx = self.value(*x).data().iter().zip(gy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                out.push((*x, gx));
            }
            Op::Sigmoid { x } => {
                let gx = node.value.data().iter().zip(gy).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                out.push((*x, gx));
            }
            Op::Add { a, b } => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, gy.iter().zip(bd).map(|(g, v)| g * v).collect()));
                out.push((*b, gy.iter().zip(ad).map(|(g, v)| g * v).collect()));
            }
            Op::ScaleChannels { u, s } => {
                let (ud, sd) = (self.value(*u).data(), self.value(*s).data());
                let vol = ud.len() / sd.len();
                let gu = gy.chunks(vol).zip(sd).flat_map(|(c, &k)| c.iter().map(move |g| g * k)).collect();
                let gs = gy.chunks(vol).zip(ud.chunks(vol)).map(|(g, u)| g.iter().zip(u).map(|(a, b)| a * b).sum()).collect();
                out.push((*u, gu));
                out.push((*s, gs));
            }
            Op::Dense { x, w, b } => {
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let (n, cin) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let cout = self.value(*w).shape()[0];
                let mut gx = vec![0.0; n * cin];
                let mut gw = vec![0.0; cout * cin];
                let mut gb = vec![0.0; cout];
                for i in 0..n {
                    for o in 0..cout {
                        let g = gy[i * cout + o];
                        gb[o] += g;
                        for k in 0..cin {
                            gx[i * cin + k] += g * wd[o * cin + k];
                            gw[o * cin + k] += g * xd[i * cin + k];
                        }
                    }
                }
                out.push((*x, gx));
                out.push((*w, gw));
                out.extend(b.map(|b| (b, gb)));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = self.value(*x).shape();
                let c = s[1];
                let vol: usize = s[2..].iter().product();
                let m = (s[0] * vol) as f64;
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (g, xh)) in gy.chunks(vol).zip(xhat.chunks(vol)).enumerate() {
                    sum_g[i % c] += g.iter().sum::<f64>();
                    sum_gx[i % c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; gy.len()];
                    for (i, ((dst, g), xh)) in gx.chunks_mut(vol).zip(gy.chunks(vol)).zip(xhat.chunks(vol)).enumerate() {
                        let ch = i % c;
                        let k = gd[ch] * inv_std[ch];
                        for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xh) {
                            *d = if *train {
                                k * (gv - sum_g[ch] / m - xv * sum_gx[ch] / m)
                            } else {
                                k * gv
                            };
                        }
                    }
                    out.push((*x, gx));
                }
                out.push((*gamma, sum_gx));
                out.push((*beta, sum_g));
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let n = s[0];
                let vol: usize = s[2..].iter().product();
                let total = s[1] * vol;
                let mut offset = 0;
                for &p in parts {
                    let per = self.value(p).shape()[1] * vol;
                    let mut g = Vec::with_capacity(n * per);
                    for i in 0..n {
                        g.extend_from_slice(&gy[i * total + offset..i * total + offset + per]);
                    }
                    offset += per;
                    out.push((p, g));
                }
            }
            Op::Sum { x } => out.push((*x, vec![gy[0]; self.value(*x).len()])),
            Op::Scalar { x, grad } => out.push((*x, grad.data().iter().map(|g| g * gy[0]).collect())),
        }
        out
    }
}

/// Logistic function; exactly 0.5 at zero.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
