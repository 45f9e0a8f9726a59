//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Operations
//! whose inputs require gradients append an entry to the tape; [`Graph::backward`]
//! walks the tape once in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, PoolGeometry};
use crate::nn::{self, BatchStats, BnSaved, BnStats};
use crate::ops;
use crate::tensor::{fmt_shape, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalizer statistics for a batch-norm node.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize by the statistics of the current batch.
    Batch { eps: T },
    /// Normalize by frozen running estimates.
    Running { mean: &'a [T], var: &'a [T], eps: T },
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
    },
    MaxPool {
        input: NodeId,
        geom: PoolGeometry,
        argmax: Vec<u32>,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        dims: (usize, usize, usize),
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved<T>,
    },
    Relu {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        mask: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
    ConcatChannels {
        inputs: Vec<NodeId>,
    },
    Reshape {
        input: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Dense { .. } => "dense",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mul { .. } => "mul",
        }
    }
}

/// Deliberate corruption of one backward rule, so verification harnesses can
/// prove they notice. Never enabled outside such tests.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    /// Op kinds whose backward rule can be corrupted.
    pub const KINDS: [&str; 11] = ["conv2d", "maxpool2d", "dense", "batch_norm", "relu", "dropout", "softmax_cross_entropy", "concat_channels", "reshape", "sum", "mul"];

    thread_local! {
        static CORRUPTED: Cell<Option<&'static str>> = const { Cell::new(None) };
    }

    /// Runs `f` with the upstream gradient of every `kind` entry doubled on
    /// this thread.
    pub fn with_corrupted_backward<R>(kind: &'static str, f: impl FnOnce() -> R) -> R {
        let previous = CORRUPTED.replace(Some(kind));
        let out = f();
        CORRUPTED.set(previous);
        out
    }

    pub(super) fn corrupted() -> Option<&'static str> {
        CORRUPTED.get()
    }
}

#[derive(Debug)]
struct Entry<T: Scalar> {
    op: Op<T>,
    output: NodeId,
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
}

/// The gradient tape and value arena of one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    tape: Vec<Entry<T>>,
}

/// Result of [`Graph::backward`]: `dLoss/dNode` for every node the loss depends on.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            tape: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients (data, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded differentiable operations.
    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    /// Which side of every kink the recorded pass took: the sign of each ReLU
    /// input and the winning tap of each max-pool window. Two points with equal
    /// patterns lie in the same smooth piece of the function.
    pub fn kink_pattern(&self) -> Vec<u32> {
        let mut pattern = Vec::new();
        for entry in &self.tape {
            match &entry.op {
                Op::Relu { input } => {
                    pattern.extend(self.nodes[input.0].value.data().iter().map(|&v| u32::from(v > T::zero())));
                }
                Op::MaxPool { argmax, .. } => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        pattern
    }

    fn record(&mut self, value: Tensor<T>, inputs: &[NodeId], op: Op<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let output = self.push(value, requires_grad);
        if requires_grad {
            self.tape.push(Entry { op, output });
        }
        output
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = ops::conv_geometry(x, w, b, stride, padding)?;
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
        let value = Tensor::new(
            vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()],
            out,
        )?;
        Ok(self.record(value, &[input, weight, bias], Op::Conv2d { input, weight, bias, geom }))
    }

    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize, padding: usize) -> Result<NodeId> {
        let x = self.value(input);
        let geom = ops::pool_geometry(x, kernel, stride, padding)?;
        let (out, argmax) = kernels::maxpool2d_forward(&geom, x.data());
        let s = x.shape();
        let value = Tensor::new(vec![s[0], s[1], geom.out_height(), geom.out_width()], out)?;
        Ok(self.record(value, &[input], Op::MaxPool { input, geom, argmax }))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let dims = ops::check_dense(x, w, b)?;
        let (n, d, m) = dims;
        let value = Tensor::new(vec![n, m], ops::dense_forward(n, d, m, x.data(), w.data(), b.data()))?;
        Ok(self.record(value, &[input, weight, bias], Op::Dense { input, weight, bias, dims }))
    }

    /// Batch normalization over `[N,C]` or `[N,C,H,W]`. In [`BnMode::Batch`] the
    /// batch statistics are returned so the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<'_, T>,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let (x, g, b) = (self.value(input), self.value(gamma), self.value(beta));
        let (stats, eps) = match mode {
            BnMode::Batch { eps } => (BnStats::Batch, eps),
            BnMode::Running { mean, var, eps } => (BnStats::Running { mean, var }, eps),
        };
        let (value, saved, batch) = nn::bn_forward(x, g.data(), b.data(), stats, eps)?;
        let id = self.record(value, &[input, gamma, beta], Op::BatchNorm { input, gamma, beta, saved });
        Ok((id, batch))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = nn::relu(self.value(input));
        self.record(value, &[input], Op::Relu { input })
    }

    /// Inverted dropout with a fresh mask drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        nn::check_dropout_rate(rate)?;
        let mask = nn::dropout_mask(self.value(input).numel(), rate, rng);
        self.dropout_with_mask(input, mask)
    }

    /// Dropout with a caller-supplied mask (already scaled by `1/(1−rate)`).
    pub fn dropout_with_mask(&mut self, input: NodeId, mask: Vec<T>) -> Result<NodeId> {
        let x = self.value(input);
        if mask.len() != x.numel() {
            return Err(Error::shape("dropout", format!("{} mask entries", x.numel()), mask.len().to_string()));
        }
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(value, &[input], Op::Dropout { input, mask }))
    }

    /// Mean softmax cross-entropy. Returns the scalar loss node and the probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<(NodeId, Tensor<T>)> {
        let (loss, probs) = nn::softmax_cross_entropy(self.value(logits), labels)?;
        let id = self.record(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs: probs.clone(),
                labels: labels.to_vec(),
            },
        );
        Ok((id, probs))
    }

    /// Concatenates `[N,Ci,...]` tensors along axis 1.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = self
            .value(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat", "rank >= 2", fmt_shape(&first)));
        }
        let n = first[0];
        let mut channels = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::shape("concat", fmt_shape(&first), fmt_shape(s)));
            }
            channels += s[1];
        }
        let inner: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &id in inputs {
                data.extend_from_slice(self.value(id).outer(b));
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, inputs, Op::ConcatChannels { inputs: inputs.to_vec() }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.record(value, &[input], Op::Reshape { input }))
    }

    /// Flattens `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).sum());
        self.record(value, &[input], Op::Sum { input })
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", fmt_shape(a.shape()), fmt_shape(b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.record(value, &[lhs, rhs], Op::Mul { lhs, rhs }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::shape("backward", "scalar loss", fmt_shape(loss_value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        let corrupted = fault::corrupted();
        for entry in self.tape.iter().rev() {
            let Some(upstream) = grads[entry.output.0].take() else { continue };
            if corrupted == Some(entry.op.kind()) {
                self.backward_entry(&entry.op, &upstream.map(|v| v + v), &mut grads)?;
                grads[entry.output.0] = Some(upstream);
                continue;
            }
            self.backward_entry(&entry.op, &upstream, &mut grads)?;
            grads[entry.output.0] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, grad: Tensor<T>) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => {
                *slot = Some(grad);
                Ok(())
            }
        }
    }

    fn like(&self, id: NodeId, data: Vec<T>) -> Result<Tensor<T>> {
        Tensor::new(self.value(id).shape().to_vec(), data)
    }

    fn backward_entry(&self, op: &Op<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Conv2d { input, weight, bias, geom } => {
                let want = [self.requires_grad(*input), self.requires_grad(*weight), self.requires_grad(*bias)];
                let g = kernels::conv2d_backward(geom, self.value(*input).data(), self.value(*weight).data(), dy.data(), want);
                for (id, d) in [(*input, g.input), (*weight, g.weight), (*bias, g.bias)] {
                    if let Some(d) = d {
                        let t = self.like(id, d)?;
                        self.accumulate(grads, id, t)?;
                    }
                }
            }
            Op::MaxPool { input, geom, argmax } => {
                let dx = kernels::maxpool2d_backward(geom, argmax, dy.data());
                let t = self.like(*input, dx)?;
                self.accumulate(grads, *input, t)?;
            }
            Op::Dense { input, weight, bias, dims } => {
                let (n, d, m) = *dims;
                if self.requires_grad(*input) {
                    let w_t = kernels::transpose(d, m, self.value(*weight).data());
                    let mut dx = vec![T::zero(); n * d];
                    kernels::gemm_acc(n, d, m, dy.data(), &w_t, &mut dx);
                    let t = self.like(*input, dx)?;
                    self.accumulate(grads, *input, t)?;
                }
                if self.requires_grad(*weight) {
                    let x_t = kernels::transpose(n, d, self.value(*input).data());
                    let mut dw = vec![T::zero(); d * m];
                    kernels::gemm_acc(d, m, n, &x_t, dy.data(), &mut dw);
                    let t = self.like(*weight, dw)?;
                    self.accumulate(grads, *weight, t)?;
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); m];
                    for row in dy.data().chunks(m) {
                        for (a, &b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    let t = self.like(*bias, db)?;
                    self.accumulate(grads, *bias, t)?;
                }
            }
            Op::BatchNorm { input, gamma, beta, saved } => {
                let (dx, dgamma, dbeta) = nn::bn_backward(saved, self.value(*gamma).data(), dy.data());
                for (id, d) in [(*input, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    let t = self.like(id, d)?;
                    self.accumulate(grads, id, t)?;
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                let t = self.like(*input, dx)?;
                self.accumulate(grads, *input, t)?;
            }
            Op::Dropout { input, mask } => {
                let dx = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                let t = self.like(*input, dx)?;
                self.accumulate(grads, *input, t)?;
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let k = probs.shape()[1];
                let scale = dy.data()[0] / T::from_f64(labels.len() as f64);
                let mut d = probs.data().to_vec();
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                let t = self.like(*logits, d)?;
                self.accumulate(grads, *logits, t)?;
            }
            Op::ConcatChannels { inputs } => {
                let n = dy.shape()[0];
                let mut offset = 0;
                let per_item: Vec<usize> = inputs.iter().map(|&id| self.value(id).numel() / n).collect();
                let total: usize = per_item.iter().sum();
                for (&id, &len) in inputs.iter().zip(&per_item) {
                    if self.requires_grad(id) {
                        let mut d = Vec::with_capacity(len * n);
                        for b in 0..n {
                            let start = b * total + offset;
                            d.extend_from_slice(&dy.data()[start..start + len]);
                        }
                        let t = self.like(id, d)?;
                        self.accumulate(grads, id, t)?;
                    }
                    offset += len;
                }
            }
            Op::Reshape { input } => {
                let t = self.like(*input, dy.data().to_vec())?;
                self.accumulate(grads, *input, t)?;
            }
            Op::Sum { input } => {
                let t = Tensor::full(self.value(*input).shape(), dy.data()[0]);
                self.accumulate(grads, *input, t)?;
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(*lhs).data(), self.value(*rhs).data());
                let da = dy.data().iter().zip(b).map(|(&g, &v)| g * v).collect();
                let db = dy.data().iter().zip(a).map(|(&g, &v)| g * v).collect();
                let (ta, tb) = (self.like(*lhs, da)?, self.like(*rhs, db)?);
                self.accumulate(grads, *lhs, ta)?;
                self.accumulate(grads, *rhs, tb)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        for shape in [&[3][..], &[2, 3], &[2, 1, 3, 2]] {
            let mut g = Graph::<f64>::new();
            let x = g.variable(Tensor::from_fn(shape, |i| i as f64 - 1.5));
            let loss = g.sum(x);
            let grads = g.backward(loss).unwrap();
            assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
            assert_eq!(grads.get(loss).unwrap().data(), &[1.0]);
        }
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn relu_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let loss = g.sum(r);
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_routes_to_first_max() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap());
        let p = g.maxpool2d(x, 2, 2, 0).unwrap();
        let loss = g.sum(p);
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::ones(&[2]));
        let r = g.relu(x);
        assert!(g.backward(r).is_err());
    }

    #[test]
    fn constants_are_not_taped() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[2]));
        let y = g.relu(x);
        let _ = g.sum(y);
        assert_eq!(g.tape_len(), 0);
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(relu(x)) + sum(x) → d/dx = 1[x>0] + 1
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap());
        let r = g.relu(x);
        let c = g.concat_channels(&[r, x]).unwrap();
        let loss = g.sum(c);
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[1.0, 2.0]);
    }
}
