//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Each operation pushes one
//! node whose inputs are earlier nodes, so insertion order is already a
//! topological order and `backward` simply walks the list in reverse.
//! A graph belongs to a single forward/backward pass; build a fresh one
//! per training step.

use super::kernels::{self, Conv2dParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        params: Conv2dParams,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample {
        input: NodeId,
        factor: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        split: usize,
    },
    Relu {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        /// 0 for dropped elements, `1 / (1 - rate)` for survivors.
        mask: Vec<f32>,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
    SumSquares {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    /// Full-precision value for scalar reductions.
    exact: Option<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.push_exact(value, None, op, requires_grad)
    }

    fn push_exact(
        &mut self,
        value: Tensor,
        exact: Option<f64>,
        op: Op,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            exact,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant leaf; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of `id` in `f64`. Reductions (`mse`, `sum_squares`)
    /// and sums/scalings of them keep their `f64` accumulator; everything
    /// else widens the stored `f32`.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id.0];
        node.exact.unwrap_or_else(|| f64::from(node.value.item()))
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }

    /// Consumes the graph, returning the value stored at `id`.
    pub fn into_value(mut self, id: NodeId) -> Tensor {
        self.nodes.swap_remove(id.0).value
    }

    /// Hash of every piecewise branch taken so far: the sign pattern at
    /// each ReLU input and the argmax of each pooling window. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.value(*input).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        params: Conv2dParams,
    ) -> Result<NodeId> {
        let value = kernels::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            params,
        )?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let pooled = kernels::maxpool2d(self.value(input), size, stride)?;
        let rg = self.needs(input);
        Ok(self.push(
            pooled.output,
            Op::MaxPool {
                input,
                argmax: pooled.argmax,
            },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let value = kernels::upsample_nearest(self.value(input), factor)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Upsample { input, factor }, rg))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = kernels::concat_channels(self.value(a), self.value(b))?;
        let split = self.value(a).shape()[1];
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat { a, b, split }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = kernels::relu(self.value(input));
        let rg = self.needs(input);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Inverted dropout. Outside training, or at rate 0, this is the
    /// identity and returns `input` itself without drawing from `rng`.
    pub fn dropout(
        &mut self,
        input: NodeId,
        rate: f32,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "dropout rate",
                format!("{rate} is outside [0, 1)"),
            ));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(input).len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let loss = kernels::mse(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push_exact(
            Tensor::scalar(loss as f32),
            Some(loss),
            Op::Mse { a, b },
            rg,
        ))
    }

    pub fn sum_squares(&mut self, input: NodeId) -> NodeId {
        let total = self.value(input).sum_squares();
        let rg = self.needs(input);
        self.push_exact(
            Tensor::scalar(total as f32),
            Some(total),
            Op::SumSquares { input },
            rg,
        )
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let exact = match (self.nodes[a.0].exact, self.nodes[b.0].exact) {
            (Some(p), Some(q)) => Some(p + q),
            _ => None,
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push_exact(value, exact, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let value = self.value(input).map(|v| v * factor);
        let exact = self.nodes[input.0].exact.map(|e| e * f64::from(factor));
        let rg = self.needs(input);
        self.push_exact(value, exact, Op::Scale { input, factor }, rg)
    }

    fn accumulate(&mut self, id: NodeId, grad: Tensor) {
        if !self.needs(id) {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(e, &g)| *e += g),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Gradients from multiple consumers of the same node are summed.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.needs(loss) {
            return Ok(());
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream)?;
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, upstream: &Tensor) -> Result<()> {
        match self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    upstream,
                    params,
                    self.needs(input),
                )?;
                if let Some(gi) = grads.input {
                    self.accumulate(input, gi);
                }
                self.accumulate(weight, grads.weight);
                self.accumulate(bias, grads.bias);
            }
            Op::MaxPool { input, ref argmax } => {
                let g = kernels::maxpool2d_backward(self.value(input).shape(), argmax, upstream)?;
                self.accumulate(input, g);
            }
            Op::Upsample { input, factor } => {
                let g = kernels::upsample_nearest_backward(upstream, factor)?;
                self.accumulate(input, g);
            }
            Op::Concat { a, b, split } => {
                let (ga, gb) = kernels::concat_channels_backward(upstream, split)?;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Relu { input } => {
                let g = kernels::relu_backward(self.value(input), upstream);
                self.accumulate(input, g);
            }
            Op::Dropout { input, ref mask } => {
                let data = upstream
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| g * m)
                    .collect();
                let g = Tensor::new(upstream.shape().to_vec(), data)?;
                self.accumulate(input, g);
            }
            Op::Mse { a, b } => {
                let (x, y) = (self.value(a), self.value(b));
                let coef = 2.0 * f64::from(upstream.item()) / x.len() as f64;
                let ga: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| (coef * (f64::from(p) - f64::from(q))) as f32)
                    .collect();
                let shape = x.shape().to_vec();
                if self.needs(b) {
                    let gb = ga.iter().map(|v| -v).collect();
                    self.accumulate(b, Tensor::new(shape.clone(), gb)?);
                }
                self.accumulate(a, Tensor::new(shape, ga)?);
            }
            Op::SumSquares { input } => {
                let coef = 2.0 * upstream.item();
                let g = self.value(input).map(|v| coef * v);
                self.accumulate(input, g);
            }
            Op::Add { a, b } => {
                self.accumulate(a, upstream.clone());
                self.accumulate(b, upstream.clone());
            }
            Op::Scale { input, factor } => {
                self.accumulate(input, upstream.map(|g| g * factor));
            }
        }
        Ok(())
    }
}
