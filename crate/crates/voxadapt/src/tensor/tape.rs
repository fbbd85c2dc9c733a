//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its output value and enough
//! context to run its adjoint. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is always a valid reverse topological
//! order, and accumulates cotangents additively so fan-out just works.
//! Nodes created with [`Tape::constant`] (and everything depending only
//! on them) are skipped entirely during the sweep.

use super::conv::{self, ConvSpec};
use super::{Tensor, TensorError};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Output of a batch-norm op: the node plus the updated running moments,
/// which the caller decides whether to store.
pub struct BatchNormOut {
    pub node: NodeId,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

struct BnContext {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Reshape(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Conv {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        spec: ConvSpec,
    },
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        ctx: BnContext,
    },
    SliceBatch {
        input: NodeId,
        start: usize,
    },
    L1(NodeId, NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A differentiable input; its gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A fixed input; backward never propagates into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Constant, false)
    }

    /// Copies a node's value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId, TensorError> {
        value.check_finite(name)?;
        let needs_grad = self.op_inputs(&op).iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::L1(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::SliceBatch { input: a, .. } => vec![*a],
            Op::Dense {
                input,
                weights,
                bias,
            } => vec![*input, *weights, *bias],
            Op::Conv {
                input,
                kernels,
                bias,
                ..
            } => vec![*input, *kernels, *bias],
            Op::BatchNorm {
                input,
                scale,
                shift,
                ..
            } => vec![*input, *scale, *shift],
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "add",
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        if !factor.is_finite() {
            return Err(TensorError::NonFinite { op: "scale factor" });
        }
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), "scale")
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), "sum")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let value = self.value(a).reshaped(shape)?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    /// Rows `start..start + count` along the leading (batch) dimension.
    pub fn slice_batch(
        &mut self,
        a: NodeId,
        start: usize,
        count: usize,
    ) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if v.rank() == 0 {
            return Err(TensorError::invalid("slice_batch needs a batched tensor"));
        }
        let batch = v.shape()[0];
        if count == 0 || start + count > batch {
            return Err(TensorError::invalid(format!(
                "slice_batch rows {start}..{} out of range for batch {batch}",
                start + count
            )));
        }
        let row = v.numel() / batch;
        let mut shape = v.shape().to_vec();
        shape[0] = count;
        let data = v.data()[start * row..(start + count) * row].to_vec();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::SliceBatch { input: a, start }, "slice_batch")
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, TensorError> {
        let value = self
            .value(a)
            .map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a), "sigmoid")
    }

    /// Fully connected layer: input (b, n_in) x weights (n_in, n_out) + bias.
    pub fn dense(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                context: "dense input x weights",
                expected: vec![x.shape().first().copied().unwrap_or(0), w.shape()[0]],
                got: x.shape().to_vec(),
            });
        }
        let (bsz, n_in) = (x.shape()[0], x.shape()[1]);
        let n_out = w.shape()[1];
        if b.shape() != [n_out] {
            return Err(TensorError::ShapeMismatch {
                context: "dense bias",
                expected: vec![n_out],
                got: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; bsz * n_out];
        for bi in 0..bsz {
            let row = &mut out[bi * n_out..][..n_out];
            row.copy_from_slice(b.data());
            let xrow = &x.data()[bi * n_in..][..n_in];
            for (i, &v) in xrow.iter().enumerate() {
                let wrow = &w.data()[i * n_out..][..n_out];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += v * wv;
                }
            }
        }
        let value = Tensor::new(vec![bsz, n_out], out)?;
        self.push(
            value,
            Op::Dense {
                input,
                weights,
                bias,
            },
            "dense",
        )
    }

    /// Strided convolution (`transposed = false`) or its exact adjoint
    /// (`transposed = true`), with "same" padding and per-channel bias.
    pub fn conv(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        transposed: bool,
    ) -> Result<NodeId, TensorError> {
        let spec = ConvSpec::for_layer(
            self.value(input).shape(),
            self.value(kernels).shape(),
            stride,
            transposed,
        )?;
        let value = conv::layer_forward(
            &spec,
            self.value(input),
            self.value(kernels),
            Some(self.value(bias)),
        )?;
        self.push(
            value,
            Op::Conv {
                input,
                kernels,
                bias,
                spec,
            },
            "conv",
        )
    }

    /// Normalizes over every axis except the last. With `batch_stats` the
    /// batch moments are used (training; batch must be >= 2) and fresh
    /// running moments are returned; otherwise the supplied running moments
    /// normalize and are returned unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        momentum: f64,
        eps: f64,
        batch_stats: bool,
    ) -> Result<BatchNormOut, TensorError> {
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(TensorError::invalid(format!(
                "batch norm input must have a batch and a channel axis, got {:?}",
                x.shape()
            )));
        }
        let c = *x.shape().last().unwrap();
        let m = x.numel() / c;
        for (name, t) in [
            ("scale", self.value(scale)),
            ("shift", self.value(shift)),
            ("running mean", running_mean),
            ("running var", running_var),
        ] {
            if t.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    context: "batch norm parameter",
                    expected: vec![c],
                    got: t.shape().to_vec(),
                });
            }
            let _ = name;
        }
        if batch_stats && x.shape()[0] < 2 {
            return Err(TensorError::invalid(
                "batch norm with batch statistics needs batch size >= 2",
            ));
        }
        let (mean, var): (Vec<f64>, Vec<f64>) = if batch_stats {
            let mut mean = vec![0.0; c];
            for chunk in x.data().chunks_exact(c) {
                for (s, v) in mean.iter_mut().zip(chunk) {
                    *s += v;
                }
            }
            for s in &mut mean {
                *s /= m as f64;
            }
            let mut var = vec![0.0; c];
            for chunk in x.data().chunks_exact(c) {
                for ((s, v), mu) in var.iter_mut().zip(chunk).zip(&mean) {
                    let d = v - mu;
                    *s += d * d;
                }
            }
            for s in &mut var {
                *s /= m as f64;
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = Vec::with_capacity(x.numel());
        for chunk in x.data().chunks_exact(c) {
            for ((v, mu), inv) in chunk.iter().zip(&mean).zip(&inv_std) {
                normalized.push((v - mu) * inv);
            }
        }
        let gamma = self.value(scale).data().to_vec();
        let beta = self.value(shift).data().to_vec();
        let mut out = Vec::with_capacity(x.numel());
        for chunk in normalized.chunks_exact(c) {
            for ((n, g), b) in chunk.iter().zip(&gamma).zip(&beta) {
                out.push(n * g + b);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let (new_mean, new_var) = if batch_stats {
            let bessel = m as f64 / (m as f64 - 1.0);
            let nm: Vec<f64> = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, b)| momentum * r + (1.0 - momentum) * b)
                .collect();
            let nv: Vec<f64> = running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(r, b)| momentum * r + (1.0 - momentum) * b * bessel)
                .collect();
            (Tensor::from_vec(nm), Tensor::from_vec(nv))
        } else {
            (running_mean.clone(), running_var.clone())
        };
        let node = self.push(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                ctx: BnContext {
                    normalized,
                    inv_std,
                    batch_stats,
                },
            },
            "batch_norm",
        )?;
        Ok(BatchNormOut {
            node,
            running_mean: new_mean,
            running_var: new_var,
        })
    }

    /// Mean absolute difference between two same-shape nodes, as a scalar.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).mean_abs_diff(self.value(b))?;
        self.push(Tensor::scalar(v), Op::L1(a, b), "l1")
    }

    /// Reverse sweep from a scalar loss node. Returns one cotangent slot per
    /// node; nodes without a path to the loss (and constants) stay `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Scale(a, factor) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.map(|v| v * factor));
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let gv = g.item()?;
                    accumulate(
                        &mut grads[a.0],
                        Tensor::filled(self.value(*a).shape(), gv),
                    );
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.reshaped(self.value(*a).shape())?);
                }
            }
            Op::SliceBatch { input, start } => {
                if self.needs(*input) {
                    let full = self.value(*input);
                    let row = full.numel() / full.shape()[0];
                    let mut data = vec![0.0; full.numel()];
                    data[start * row..start * row + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut grads[input.0], Tensor::new(full.shape().to_vec(), data)?);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v >= 0.0 { gv } else { slope * gv })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(x.shape().to_vec(), data)?);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].value;
                    let data = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(y.shape().to_vec(), data)?);
                }
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                let (bsz, n_in) = (x.shape()[0], x.shape()[1]);
                let n_out = w.shape()[1];
                if self.needs(*input) {
                    let mut dx = vec![0.0; bsz * n_in];
                    for bi in 0..bsz {
                        let grow = &g.data()[bi * n_out..][..n_out];
                        let xrow = &mut dx[bi * n_in..][..n_in];
                        for (i, o) in xrow.iter_mut().enumerate() {
                            let wrow = &w.data()[i * n_out..][..n_out];
                            let mut acc = 0.0;
                            for (&gv, &wv) in grow.iter().zip(wrow) {
                                acc += gv * wv;
                            }
                            *o = acc;
                        }
                    }
                    accumulate(&mut grads[input.0], Tensor::new(vec![bsz, n_in], dx)?);
                }
                if self.needs(*weights) {
                    let mut dw = vec![0.0; n_in * n_out];
                    for bi in 0..bsz {
                        let grow = &g.data()[bi * n_out..][..n_out];
                        let xrow = &x.data()[bi * n_in..][..n_in];
                        for (i, &xv) in xrow.iter().enumerate() {
                            let wrow = &mut dw[i * n_out..][..n_out];
                            for (o, &gv) in wrow.iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                    accumulate(&mut grads[weights.0], Tensor::new(vec![n_in, n_out], dw)?);
                }
                if self.needs(*bias) {
                    let db = conv::channel_sums(g.data(), n_out);
                    accumulate(&mut grads[bias.0], Tensor::from_vec(db));
                }
            }
            Op::Conv {
                input,
                kernels,
                bias,
                spec,
            } => {
                if self.needs(*input) {
                    let d = if spec.transposed {
                        spec.apply_forward(g.data(), self.value(*kernels).data())
                    } else {
                        spec.apply_adjoint(g.data(), self.value(*kernels).data())
                    };
                    accumulate(&mut grads[input.0], Tensor::new(spec.input_shape(), d)?);
                }
                if self.needs(*kernels) {
                    let d = if spec.transposed {
                        spec.kernel_cotangent(g.data(), self.value(*input).data())
                    } else {
                        spec.kernel_cotangent(self.value(*input).data(), g.data())
                    };
                    accumulate(&mut grads[kernels.0], Tensor::new(spec.kernel_shape(), d)?);
                }
                if self.needs(*bias) {
                    let db = conv::channel_sums(g.data(), spec.out_channels());
                    accumulate(&mut grads[bias.0], Tensor::from_vec(db));
                }
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                ctx,
            } => {
                let c = ctx.inv_std.len();
                let m = ctx.normalized.len() / c;
                let gamma = self.value(*scale).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gc, nc) in g.data().chunks_exact(c).zip(ctx.normalized.chunks_exact(c)) {
                    for i in 0..c {
                        sum_g[i] += gc[i];
                        sum_gx[i] += gc[i] * nc[i];
                    }
                }
                if self.needs(*shift) {
                    accumulate(&mut grads[shift.0], Tensor::from_vec(sum_g.clone()));
                }
                if self.needs(*scale) {
                    accumulate(&mut grads[scale.0], Tensor::from_vec(sum_gx.clone()));
                }
                if self.needs(*input) {
                    let x = self.value(*input);
                    let mut dx = Vec::with_capacity(x.numel());
                    if ctx.batch_stats {
                        let mf = m as f64;
                        for (gc, nc) in
                            g.data().chunks_exact(c).zip(ctx.normalized.chunks_exact(c))
                        {
                            for i in 0..c {
                                dx.push(
                                    gamma[i]
                                        * ctx.inv_std[i]
                                        * (gc[i] - sum_g[i] / mf - nc[i] * sum_gx[i] / mf),
                                );
                            }
                        }
                    } else {
                        for gc in g.data().chunks_exact(c) {
                            for i in 0..c {
                                dx.push(gc[i] * gamma[i] * ctx.inv_std[i]);
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], Tensor::new(x.shape().to_vec(), dx)?);
                }
            }
            Op::L1(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let gv = g.item()? / va.numel() as f64;
                if self.needs(*a) {
                    let data = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| sign(x - y) * gv)
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(va.shape().to_vec(), data)?);
                }
                if self.needs(*b) {
                    let data = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| -sign(x - y) * gv)
                        .collect();
                    accumulate(&mut grads[b.0], Tensor::new(vb.shape().to_vec(), data)?);
                }
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
    }
}

/// Cotangents produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The cotangent of `id`, or `None` when the loss never reaches it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(tape: &Tape, loss: NodeId, id: NodeId) -> Tensor {
        tape.backward(loss).unwrap().get(id).unwrap().clone()
    }

    #[test]
    fn add_scale_sum_chain() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.scale(y, 0.5).unwrap();
        let loss = tape.sum(z).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 2.0);
        let g = grad_of(&tape, loss, x);
        assert_eq!(g.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn slice_batch_forward_and_gradient_routing() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mid = tape.slice_batch(x, 1, 1).unwrap();
        assert_eq!(tape.value(mid).shape(), &[1, 2]);
        assert_eq!(tape.value(mid).data(), &[3.0, 4.0]);
        let scaled = tape.scale(mid, 2.0).unwrap();
        let loss = tape.sum(scaled).unwrap();
        let g = grad_of(&tape, loss, x);
        assert_eq!(g.data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn slice_batch_halves_accumulate_like_the_whole() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4, 3], (0..12).map(f64::from).collect()).unwrap());
        let top = tape.slice_batch(x, 0, 2).unwrap();
        let bottom = tape.slice_batch(x, 2, 2).unwrap();
        let a = tape.sum(top).unwrap();
        let b = tape.sum(bottom).unwrap();
        let loss = tape.add(a, b).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 66.0);
        let g = grad_of(&tape, loss, x);
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn slice_batch_rejects_out_of_range_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        assert!(tape.slice_batch(x, 1, 2).is_err());
        assert!(tape.slice_batch(x, 0, 0).is_err());
        let s = tape.leaf(Tensor::scalar(1.0));
        assert!(tape.slice_batch(s, 0, 1).is_err());
    }

    #[test]
    fn detach_cuts_the_gradient_path() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0, 4.0]));
        let d = tape.detach(x);
        let loss = tape.sum(d).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 6.0);
        assert!(tape.backward(loss).unwrap().get(x).is_none());
    }

    #[test]
    fn leaky_relu_values_and_slopes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-2.0, 3.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.4, 3.0]);
        let loss = tape.sum(y).unwrap();
        assert_eq!(grad_of(&tape, loss, x).data(), &[0.2, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_matches_finite_difference() {
        let f = |v: f64| 1.0 / (1.0 + (-v).exp());
        let h = 1e-6;
        for &v in &[-1.5, 0.3, 2.0] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(vec![v]));
            let y = tape.sigmoid(x).unwrap();
            let loss = tape.sum(y).unwrap();
            let g = grad_of(&tape, loss, x).data()[0];
            let fd = (f(v + h) - f(v - h)) / (2.0 * h);
            assert!((g - fd).abs() < 1e-8, "{v}: {g} vs {fd}");
        }
    }

    #[test]
    fn dense_identity_and_bias_broadcast() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero_b = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.dense(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let zeros_w = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::from_vec(vec![5.0, 6.0, 7.0]));
        let y = tape.dense(x, zeros_w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 7.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn dense_matches_hand_matrix_multiply() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.leaf(
            Tensor::new(vec![3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap(),
        );
        let b = tape.leaf(Tensor::from_vec(vec![0.5, -0.5]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[14.5, 31.5]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(
            grads.get(w).unwrap().data(),
            &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]
        );
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &transposed in &[false, true] {
            let in_ch = 2;
            let out_ch = 3;
            let kshape = if transposed {
                vec![3, 3, out_ch, in_ch]
            } else {
                vec![3, 3, in_ch, out_ch]
            };
            let xshape = vec![1, 4, 4, in_ch];
            let xv: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kv: Vec<f64> = (0..kshape.iter().product())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let bv: Vec<f64> = (0..out_ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let run = |xd: &[f64], kd: &[f64], bd: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::new(xshape.clone(), xd.to_vec()).unwrap());
                let k = tape.leaf(Tensor::new(kshape.clone(), kd.to_vec()).unwrap());
                let b = tape.leaf(Tensor::new(vec![out_ch], bd.to_vec()).unwrap());
                let y = tape.conv(x, k, b, 2, transposed).unwrap();
                let loss = tape.sum(y).unwrap();
                tape.value(loss).item().unwrap()
            };
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(xshape.clone(), xv.clone()).unwrap());
            let k = tape.leaf(Tensor::new(kshape.clone(), kv.clone()).unwrap());
            let b = tape.leaf(Tensor::new(vec![out_ch], bv.clone()).unwrap());
            let y = tape.conv(x, k, b, 2, transposed).unwrap();
            let loss = tape.sum(y).unwrap();
            let grads = tape.backward(loss).unwrap();
            let h = 1e-6;
            let check = |analytic: &Tensor, data: &[f64], which: usize| {
                for i in 0..data.len() {
                    let mut up = data.to_vec();
                    up[i] += h;
                    let mut dn = data.to_vec();
                    dn[i] -= h;
                    let (fu, fd) = match which {
                        0 => (run(&up, &kv, &bv), run(&dn, &kv, &bv)),
                        1 => (run(&xv, &up, &bv), run(&xv, &dn, &bv)),
                        _ => (run(&xv, &kv, &up), run(&xv, &kv, &dn)),
                    };
                    let fd_grad = (fu - fd) / (2.0 * h);
                    let a = analytic.data()[i];
                    assert!(
                        (fd_grad - a).abs() <= 1e-6 * a.abs().max(1.0),
                        "transposed={transposed} which={which} i={i}: {fd_grad} vs {a}"
                    );
                }
            };
            check(grads.get(x).unwrap(), &xv, 0);
            check(grads.get(k).unwrap(), &kv, 1);
            check(grads.get(b).unwrap(), &bv, 2);
        }
    }

    #[test]
    fn batch_norm_normalizes_batch_statistics() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap(),
        );
        let scale = tape.leaf(Tensor::from_vec(vec![1.0, 1.0]));
        let shift = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let rm = Tensor::from_vec(vec![0.0, 0.0]);
        let rv = Tensor::from_vec(vec![1.0, 1.0]);
        let out = tape
            .batch_norm(x, scale, shift, &rm, &rv, 0.9, 1e-5, true)
            .unwrap();
        let y = tape.value(out.node);
        for c in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / 4.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!((out.running_mean.data()[0] - (0.9 * 0.0 + 0.1 * 2.5)).abs() < 1e-12);
        let batch_var = 1.25;
        let unbiased = batch_var * 4.0 / 3.0;
        assert!((out.running_var.data()[0] - (0.9 * 1.0 + 0.1 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_constant_channel_and_affine_params() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 1], vec![7.0, 7.0, 7.0]).unwrap());
        let one = tape.leaf(Tensor::from_vec(vec![1.0]));
        let zero = tape.leaf(Tensor::from_vec(vec![0.0]));
        let rm = Tensor::from_vec(vec![0.0]);
        let rv = Tensor::from_vec(vec![1.0]);
        let out = tape
            .batch_norm(x, one, zero, &rm, &rv, 0.9, 1e-5, true)
            .unwrap();
        for v in tape.value(out.node).data() {
            assert!(v.abs() < 1e-9);
        }
        let zero_scale = tape.leaf(Tensor::from_vec(vec![0.0]));
        let three = tape.leaf(Tensor::from_vec(vec![3.0]));
        let out = tape
            .batch_norm(x, zero_scale, three, &rm, &rv, 0.9, 1e-5, true)
            .unwrap();
        for v in tape.value(out.node).data() {
            assert_eq!(*v, 3.0);
        }
    }

    #[test]
    fn batch_norm_train_mode_rejects_batch_of_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let s = tape.leaf(Tensor::from_vec(vec![1.0, 1.0]));
        let b = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let rm = Tensor::from_vec(vec![0.0, 0.0]);
        let rv = Tensor::from_vec(vec![1.0, 1.0]);
        assert!(tape.batch_norm(x, s, b, &rm, &rv, 0.9, 1e-5, true).is_err());
        assert!(tape.batch_norm(x, s, b, &rm, &rv, 0.9, 1e-5, false).is_ok());
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let xv: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sv = vec![1.3, 0.7, -0.4];
        let bv = vec![0.1, -0.2, 0.3];
        let target: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rm = Tensor::from_vec(vec![0.1, -0.3, 0.2]);
        let rv = Tensor::from_vec(vec![0.9, 1.4, 0.6]);
        for &train in &[true, false] {
            let run = |xd: &[f64], sd: &[f64], bd: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::new(vec![4, 3], xd.to_vec()).unwrap());
                let s = tape.leaf(Tensor::from_vec(sd.to_vec()));
                let b = tape.leaf(Tensor::from_vec(bd.to_vec()));
                let out = tape
                    .batch_norm(x, s, b, &rm, &rv, 0.9, 1e-5, train)
                    .unwrap();
                let t = tape.constant(Tensor::new(vec![4, 3], target.clone()).unwrap());
                let loss = tape.l1(out.node, t).unwrap();
                tape.value(loss).item().unwrap()
            };
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![4, 3], xv.clone()).unwrap());
            let s = tape.leaf(Tensor::from_vec(sv.clone()));
            let b = tape.leaf(Tensor::from_vec(bv.clone()));
            let out = tape
                .batch_norm(x, s, b, &rm, &rv, 0.9, 1e-5, train)
                .unwrap();
            let t = tape.constant(Tensor::new(vec![4, 3], target.clone()).unwrap());
            let loss = tape.l1(out.node, t).unwrap();
            let grads = tape.backward(loss).unwrap();
            let h = 1e-6;
            for i in 0..xv.len() {
                let mut up = xv.clone();
                up[i] += h;
                let mut dn = xv.clone();
                dn[i] -= h;
                let fd = (run(&up, &sv, &bv) - run(&dn, &sv, &bv)) / (2.0 * h);
                let a = grads.get(x).unwrap().data()[i];
                assert!((fd - a).abs() < 1e-6, "train={train} x[{i}]: {fd} vs {a}");
            }
            for i in 0..sv.len() {
                let mut up = sv.clone();
                up[i] += h;
                let mut dn = sv.clone();
                dn[i] -= h;
                let fd = (run(&xv, &up, &bv) - run(&xv, &dn, &bv)) / (2.0 * h);
                let a = grads.get(s).unwrap().data()[i];
                assert!((fd - a).abs() < 1e-6, "train={train} s[{i}]: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn l1_value_and_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 5.0, 2.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![0.0, 7.0, 2.0, 1.0]));
        let loss = tape.l1(a, b).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 1.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.25, -0.25, 0.0, 0.25]);
        assert_eq!(grads.get(b).unwrap().data(), &[-0.25, 0.25, 0.0, -0.25]);
    }

    #[test]
    fn unreached_leaves_have_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        let y = tape.leaf(Tensor::from_vec(vec![2.0]));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_some());
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn fanout_accumulates_additively() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0]));
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.scale(x, 5.0).unwrap();
        let y = tape.add(a, b).unwrap();
        let loss = tape.sum(y).unwrap();
        assert_eq!(grad_of(&tape, loss, x).data(), &[7.0]);
    }
}
