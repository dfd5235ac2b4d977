//! A Wengert tape over whole tensors.
//!
//! Every primitive's vector-Jacobian product is itself written in terms of
//! taped primitives, so gradients produced by [`Tape::grad`] are ordinary
//! tape variables. They can be fed into further operations (for example a
//! parameter update `p - lr * g`) and differentiated again, which is what an
//! exact meta-gradient through an inner SGD step requires.

use std::collections::BTreeMap;

use super::kernels;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    Powf(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    /// `[N,C,H,W] -> [1,C,1,1]`
    ChannelSum(Var),
    /// `[1,C,1,1] -> shape`
    ChannelExpand(Var, Shape),
    /// `[N,C,H,W] -> [N,1,H,W]`
    SumChannels(Var),
    /// `[N,1,H,W] -> [N,C,H,W]`
    ExpandChannels(Var, usize),
    SumAll(Var),
    ExpandAll(Var, Shape),
    Conv2d { input: Var, kernel: Var, padding: usize },
    FlipTranspose(Var),
    ConvKernelGrad { input: Var, grad_output: Var, kernel_size: usize, padding: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Mapping from a key (tape variable or model parameter id) to a gradient
/// tensor of the same shape as the thing it differentiates.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap<K: Ord> {
    entries: BTreeMap<K, Tensor>,
}

impl<K: Ord + Copy> GradientMap<K> {
    pub fn new() -> Self {
        GradientMap { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: K, grad: Tensor) {
        self.entries.insert(key, grad);
    }

    pub fn get(&self, key: &K) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, &Tensor)> {
        self.entries.iter()
    }

    /// All gradient entries concatenated in key order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl<K: Ord + Copy> Default for GradientMap<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Ord + Copy> FromIterator<(K, Tensor)> for GradientMap<K> {
    fn from_iter<I: IntoIterator<Item = (K, Tensor)>>(iter: I) -> Self {
        GradientMap { entries: iter.into_iter().collect() }
    }
}

#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    /// When false, newly recorded nodes never require gradients.
    grad_enabled: bool,
}

fn evaluate<'a>(op: &Op, value: impl Fn(Var) -> Result<&'a Tensor>) -> Result<Tensor> {
    Ok(match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => value(a)?.zip_map(value(b)?, |x, y| x + y)?,
        Op::Sub(a, b) => value(a)?.zip_map(value(b)?, |x, y| x - y)?,
        Op::Mul(a, b) => value(a)?.zip_map(value(b)?, |x, y| x * y)?,
        Op::Scale(a, s) => value(a)?.map(|x| x * s),
        Op::Shift(a, s) => value(a)?.map(|x| x + s),
        Op::Powf(a, p) => value(a)?.map(|x| x.powf(p)),
        Op::Exp(a) => value(a)?.map(f64::exp),
        Op::Log(a) => value(a)?.map(f64::ln),
        Op::Relu(a) => kernels::relu(value(a)?),
        Op::ChannelSum(a) => kernels::channel_sum(value(a)?),
        Op::ChannelExpand(a, shape) => kernels::channel_expand(value(a)?, shape)?,
        Op::SumChannels(a) => kernels::sum_channels(value(a)?),
        Op::ExpandChannels(a, c) => kernels::expand_channels(value(a)?, c)?,
        Op::SumAll(a) => Tensor::scalar(value(a)?.sum()),
        Op::ExpandAll(a, shape) => {
            let v = value(a)?;
            if v.numel() != 1 {
                return shape_err(format!("expand_all needs a scalar, got {:?}", v.shape()));
            }
            Tensor::full(shape, v.item())
        }
        Op::Conv2d { input, kernel, padding } => {
            kernels::conv2d_same(value(input)?, value(kernel)?, padding)?
        }
        Op::FlipTranspose(a) => kernels::flip_transpose(value(a)?),
        Op::ConvKernelGrad { input, grad_output, kernel_size, padding } => {
            kernels::conv2d_kernel_grad(value(input)?, value(grad_output)?, kernel_size, padding)?
        }
    })
}

fn parents(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::Shift(a, _)
        | Op::Powf(a, _)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Relu(a)
        | Op::ChannelSum(a)
        | Op::ChannelExpand(a, _)
        | Op::SumChannels(a)
        | Op::ExpandChannels(a, _)
        | Op::SumAll(a)
        | Op::ExpandAll(a, _)
        | Op::FlipTranspose(a) => vec![a],
        Op::Conv2d { input, kernel, .. } => vec![input, kernel],
        Op::ConvKernelGrad { input, grad_output, .. } => vec![input, grad_output],
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only; nothing on it is differentiable.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::MissingParameter(v.0))
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_leaf(value, requires_grad)
    }

    /// Record a value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A constant copy of `v`'s current value; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let ps = parents(&op);
        for &p in &ps {
            self.check(p)?;
        }
        let value = evaluate(&op, |v| Ok(&self.nodes[v.0].value))?;
        let requires_grad = self.grad_enabled && ps.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn shift(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Shift(a, s))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.record(Op::Powf(a, p))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Log(a))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::ChannelSum(a))
    }

    pub fn channel_expand(&mut self, a: Var, shape: Shape) -> Result<Var> {
        self.record(Op::ChannelExpand(a, shape))
    }

    pub fn sum_channels(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumChannels(a))
    }

    pub fn expand_channels(&mut self, a: Var, channels: usize) -> Result<Var> {
        self.record(Op::ExpandChannels(a, channels))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumAll(a))
    }

    pub fn expand_all(&mut self, a: Var, shape: Shape) -> Result<Var> {
        self.record(Op::ExpandAll(a, shape))
    }

    /// Same-padded stride-1 convolution; `padding` must equal `(k - 1) / 2`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        self.record(Op::Conv2d { input, kernel, padding })
    }

    pub fn flip_transpose(&mut self, kernel: Var) -> Result<Var> {
        self.record(Op::FlipTranspose(kernel))
    }

    pub fn conv_kernel_grad(
        &mut self,
        input: Var,
        grad_output: Var,
        kernel_size: usize,
        padding: usize,
    ) -> Result<Var> {
        self.record(Op::ConvKernelGrad { input, grad_output, kernel_size, padding })
    }

    /// Per-channel mean over batch and spatial positions, `[1,C,1,1]`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let [n, _, h, w] = self.value(a).shape();
        let s = self.channel_sum(a)?;
        self.scale(s, 1.0 / (n * h * w) as f64)
    }

    /// Add a `[1,C,1,1]` vector to every position of `a`.
    pub fn add_channel(&mut self, a: Var, v: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let e = self.channel_expand(v, shape)?;
        self.add(a, e)
    }

    pub fn sub_channel(&mut self, a: Var, v: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let e = self.channel_expand(v, shape)?;
        self.sub(a, e)
    }

    pub fn mul_channel(&mut self, a: Var, v: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let e = self.channel_expand(v, shape)?;
        self.mul(a, e)
    }

    /// Vector-Jacobian product of node `id` for upstream gradient `g`.
    /// Returns one `(parent, contribution)` pair per parent that needs one.
    fn vjp(&mut self, id: usize, g: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[id].op.clone();
        let needs = |tape: &Tape, v: Var| tape.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(self, a) {
                    out.push((a, g));
                }
                if needs(self, b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if needs(self, a) {
                    out.push((a, g));
                }
                if needs(self, b) {
                    out.push((b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if needs(self, a) {
                    out.push((a, self.mul(g, b)?));
                }
                if needs(self, b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, s) => out.push((a, self.scale(g, s)?)),
            Op::Shift(a, _) => out.push((a, g)),
            Op::Powf(a, p) => {
                let d = if p == 1.0 {
                    g
                } else {
                    let pm1 = self.powf(a, p - 1.0)?;
                    let dp = self.scale(pm1, p)?;
                    self.mul(g, dp)?
                };
                out.push((a, d));
            }
            Op::Exp(a) => out.push((a, self.mul(g, Var(id))?)),
            Op::Log(a) => {
                let inv = self.powf(a, -1.0)?;
                out.push((a, self.mul(g, inv)?));
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                out.push((a, self.mul(g, mask)?));
            }
            Op::ChannelSum(a) => {
                let shape = self.nodes[a.0].value.shape();
                out.push((a, self.channel_expand(g, shape)?));
            }
            Op::ChannelExpand(a, _) => out.push((a, self.channel_sum(g)?)),
            Op::SumChannels(a) => {
                let c = self.nodes[a.0].value.channels();
                out.push((a, self.expand_channels(g, c)?));
            }
            Op::ExpandChannels(a, _) => out.push((a, self.sum_channels(g)?)),
            Op::SumAll(a) => {
                let shape = self.nodes[a.0].value.shape();
                out.push((a, self.expand_all(g, shape)?));
            }
            Op::ExpandAll(a, _) => out.push((a, self.sum_all(g)?)),
            Op::Conv2d { input, kernel, padding } => {
                if needs(self, input) {
                    let ft = self.flip_transpose(kernel)?;
                    out.push((input, self.conv2d(g, ft, padding)?));
                }
                if needs(self, kernel) {
                    let k = self.nodes[kernel.0].value.shape()[2];
                    out.push((kernel, self.conv_kernel_grad(input, g, k, padding)?));
                }
            }
            Op::FlipTranspose(a) => out.push((a, self.flip_transpose(g)?)),
            Op::ConvKernelGrad { input, grad_output, padding, .. } => {
                if needs(self, input) {
                    let ft = self.flip_transpose(g)?;
                    out.push((input, self.conv2d(grad_output, ft, padding)?));
                }
                if needs(self, grad_output) {
                    out.push((grad_output, self.conv2d(input, g, padding)?));
                }
            }
        }
        Ok(out)
    }

    /// Reverse-mode gradients of scalar `loss` with respect to `wrt`,
    /// recorded on the tape.
    ///
    /// With `create_graph` the returned variables are differentiable
    /// functions of the inputs; otherwise they are constants. Variables that
    /// `loss` does not depend on receive an all-zero gradient.
    pub fn grad(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        self.check(loss)?;
        for &w in wrt {
            self.check(w)?;
        }
        if self.value(loss).numel() != 1 {
            return shape_err(format!("loss must be scalar, got {:?}", self.value(loss).shape()));
        }
        let saved = self.grad_enabled;
        self.grad_enabled = saved && create_graph;
        let result = self.accumulate_adjoints(loss, wrt);
        self.grad_enabled = saved;
        result
    }

    fn accumulate_adjoints(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let mut adjoint: Vec<Option<Var>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            adjoint[loss.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = adjoint[id] else { continue };
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            for (parent, contribution) in self.vjp(id, g)? {
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }
        wrt.iter()
            .map(|&w| match adjoint[..].get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.value(w).shape());
                    Ok(self.constant(zeros))
                }
            })
            .collect()
    }

    /// Gradient tensors of `loss` with respect to `wrt`. Intermediate nodes
    /// created by the backward sweep are discarded afterwards.
    pub fn gradients(&mut self, loss: Var, wrt: &[Var]) -> Result<GradientMap<Var>> {
        let mark = self.nodes.len();
        let grads = self.grad(loss, wrt, false)?;
        let out = wrt
            .iter()
            .zip(grads)
            .map(|(&w, g)| (w, self.nodes[g.0].value.clone()))
            .collect();
        self.nodes.truncate(mark);
        Ok(out)
    }

    /// Recompute every recorded node from the leaves, returning all values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => evaluate(op, |v| {
                    values.get(v.0).ok_or(Error::MissingParameter(v.0))
                })?,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// True when replaying the tape reproduces every stored value bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(replayed.iter().zip(&self.nodes).all(|(r, n)| {
            r.data().iter().zip(n.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        }))
    }
}
