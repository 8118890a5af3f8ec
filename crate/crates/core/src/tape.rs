//! Reverse-mode automatic differentiation over recorded tensor operations.
//!
//! Every value produced through a [`Tape`] gets a [`Var`] handle. Operations
//! are appended in execution order, so the node list is topologically sorted
//! by construction and [`Tape::backward`] simply replays it in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvSpec};
use crate::kernels::linear;
use crate::kernels::norm::{self, BnSaved};
use crate::kernels::pointwise::{self, Activation};
use crate::kernels::pool::{self, PoolSpec};
use crate::kernels::softmax::{self, AxisSet};
use crate::kernels::structural::{self, BinaryOp};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Where batch norm takes its statistics from.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

pub struct BnOutput<T> {
    pub out: Var,
    /// Statistics that were used; biased variance in batch mode.
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Conv(ConvSpec),
    BatchNorm(BnSaved<T>),
    Act(Activation),
    Softmax(AxisSet),
    Concat,
    Slice(usize, usize),
    Binary(BinaryOp),
    MaxPool(Vec<usize>),
    GlobalAvg,
    AttentionPool,
    Fc,
    Sum,
    CrossEntropy { labels: Vec<usize>, probs: Tensor<T> },
    Dropout(Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    outputs: Vec<Var>,
}

#[derive(Debug)]
pub struct Tape<T> {
    values: Vec<Option<Tensor<T>>>,
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records operations for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; values may be released once consumed.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.values.push(Some(value));
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.values
            .get(v.0)
            .and_then(Option::as_ref)
            .ok_or(Error::UnknownTensor(v.0))
    }

    pub fn shape(&self, v: Var) -> Result<Shape> {
        self.value(v).map(Tensor::shape)
    }

    /// Drops a value that is no longer needed. Ignored while recording.
    pub fn release(&mut self, v: Var) {
        if !self.recording {
            if let Some(slot) = self.values.get_mut(v.0) {
                *slot = None;
            }
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, outs: Vec<Tensor<T>>) -> Vec<Var> {
        let outputs: Vec<Var> = outs.into_iter().map(|t| self.leaf(t)).collect();
        if self.recording {
            self.nodes.push(Node {
                op,
                inputs,
                outputs: outputs.clone(),
            });
        }
        outputs
    }

    fn push1(&mut self, op: Op<T>, inputs: Vec<Var>, out: Tensor<T>) -> Var {
        self.push(op, inputs, vec![out])[0]
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = {
            let b = bias.map(|b| self.value(b)).transpose()?;
            conv::conv2d(self.value(x)?, self.value(weight)?, b.map(Tensor::data), &spec)?
        };
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push1(Op::Conv(spec), inputs, out))
    }

    /// `gamma` and `beta` are `(1, C, 1, 1)` descriptors.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
        eps: f64,
    ) -> Result<BnOutput<T>> {
        let xv = self.value(x)?;
        let (g, b) = (self.value(gamma)?.data(), self.value(beta)?.data());
        let fwd = match stats {
            BnStats::Batch => norm::batch_norm_train(xv, g, b, eps)?,
            BnStats::Running { mean, var } => norm::batch_norm_inference(xv, g, b, mean, var, eps)?,
        };
        let count = xv.shape().numel() / xv.shape().c;
        let out = self.push1(Op::BatchNorm(fwd.saved), vec![x, gamma, beta], fwd.output);
        Ok(BnOutput {
            out,
            mean: fwd.batch_mean,
            var: fwd.batch_var,
            count,
        })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = pointwise::activation(self.value(x)?, kind);
        Ok(self.push1(Op::Act(kind), vec![x], out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax over `axes`; with the branch axis the inputs are normalized jointly.
    pub fn softmax(&mut self, inputs: &[Var], axes: AxisSet) -> Result<Vec<Var>> {
        let outs = {
            let vals = inputs.iter().map(|&v| self.value(v)).collect::<Result<Vec<_>>>()?;
            softmax::softmax_over(&vals, axes)?
        };
        Ok(self.push(Op::Softmax(axes), inputs.to_vec(), outs))
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let out = {
            let vals = inputs.iter().map(|&v| self.value(v)).collect::<Result<Vec<_>>>()?;
            structural::concat_channels(&vals)?
        };
        Ok(self.push1(Op::Concat, inputs.to_vec(), out))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x)?.slice_channels(start, end)?;
        Ok(self.push1(Op::Slice(start, end), vec![x], out))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let out = structural::binary(op, self.value(a)?, self.value(b)?)?;
        Ok(self.push1(Op::Binary(op), vec![a, b], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn max_pool(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (out, argmax) = pool::max_pool(self.value(x)?, spec)?;
        Ok(self.push1(Op::MaxPool(argmax), vec![x], out))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = pool::global_avg_pool(self.value(x)?);
        Ok(self.push1(Op::GlobalAvg, vec![x], out))
    }

    /// Weighted spatial sum of `x` under a one-channel map `weights`.
    pub fn attention_pool(&mut self, x: Var, weights: Var) -> Result<Var> {
        let out = pool::attention_pool(self.value(x)?, self.value(weights)?)?;
        Ok(self.push1(Op::AttentionPool, vec![x, weights], out))
    }

    /// `weight` is `(C_out, C_in, 1, 1)`, `bias` a `(1, C_out, 1, 1)` descriptor.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = {
            let b = bias.map(|b| self.value(b)).transpose()?;
            linear::fully_connected(self.value(x)?, self.value(weight)?, b.map(Tensor::data))?
        };
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push1(Op::Fc, inputs, out))
    }

    /// Sum of all elements, as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x)?.sum());
        Ok(self.push1(Op::Sum, vec![x], out))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = linear::cross_entropy(self.value(logits)?, labels)?;
        Ok(self.push1(
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    /// Inverted dropout with keep probability `1 - rate`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let xv = self.value(x)?;
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push1(Op::Dropout(mask), vec![x], out))
    }

    /// Gradients of the scalar `loss` with respect to every value that reaches it.
    ///
    /// The tape is left untouched, so calling this twice yields identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed_shape = self.shape(loss)?;
        if seed_shape != Shape::scalar() {
            return Err(Error::NonScalarSeed(seed_shape));
        }
        if !self.recording {
            return Err(Error::InvalidArgument(
                "backward on a tape that does not record operations".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for node in self.nodes.iter().rev() {
            if node.outputs.iter().all(|o| grads[o.0].is_none()) {
                continue;
            }
            let out_grads: Vec<Tensor<T>> = node
                .outputs
                .iter()
                .map(|o| {
                    grads[o.0]
                        .clone()
                        .map_or_else(|| self.value(*o).map(|v| Tensor::zeros(v.shape())), Ok)
                })
                .collect::<Result<_>>()?;
            let in_grads = self.node_backward(node, &out_grads)?;
            for (v, g) in node.inputs.iter().zip(in_grads) {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, g: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let input = |i: usize| self.value(node.inputs[i]);
        let descriptor = |v: Vec<T>| {
            let c = v.len();
            Tensor::from_vec(Shape::descriptor(1, c)?, v)
        };
        Ok(match &node.op {
            Op::Conv(spec) => {
                let grads = conv::conv2d_backward(input(0)?, input(1)?, spec, &g[0])?;
                let mut out = vec![grads.input, grads.weight];
                if let Some(b) = grads.bias {
                    out.push(descriptor(b)?);
                }
                out
            }
            Op::BatchNorm(saved) => {
                let grads = norm::batch_norm_backward(saved, input(1)?.data(), &g[0]);
                vec![grads.input, descriptor(grads.gamma)?, descriptor(grads.beta)?]
            }
            Op::Act(kind) => {
                let y = self.value(node.outputs[0])?;
                vec![pointwise::activation_backward(input(0)?, y, &g[0], *kind)]
            }
            Op::Softmax(axes) => {
                let ys = node
                    .outputs
                    .iter()
                    .map(|&o| self.value(o))
                    .collect::<Result<Vec<_>>>()?;
                let gs: Vec<&Tensor<T>> = g.iter().collect();
                softmax::softmax_backward(&ys, &gs, *axes)?
            }
            Op::Concat => {
                let channels = node
                    .inputs
                    .iter()
                    .map(|&v| self.shape(v).map(|s| s.c))
                    .collect::<Result<Vec<_>>>()?;
                structural::split_channels(&g[0], &channels)?
            }
            Op::Slice(start, end) => {
                let s = input(0)?.shape();
                let mut dx = Tensor::zeros(s);
                let p = s.plane();
                for n in 0..s.n {
                    let dst = (n * s.c + start) * p;
                    let src = n * (end - start) * p;
                    dx.data_mut()[dst..dst + (end - start) * p]
                        .copy_from_slice(&g[0].data()[src..src + (end - start) * p]);
                }
                vec![dx]
            }
            Op::Binary(op) => {
                let (da, db) = structural::binary_backward(*op, input(0)?, input(1)?, &g[0])?;
                vec![da, db]
            }
            Op::MaxPool(argmax) => vec![pool::max_pool_backward(input(0)?.shape(), argmax, &g[0])],
            Op::GlobalAvg => vec![pool::global_avg_pool_backward(input(0)?.shape(), &g[0])],
            Op::AttentionPool => {
                let (dx, dw) = pool::attention_pool_backward(input(0)?, input(1)?, &g[0]);
                vec![dx, dw]
            }
            Op::Fc => {
                let grads = linear::fully_connected_backward(input(0)?, input(1)?, &g[0]);
                let mut out = vec![grads.input, grads.weight];
                if node.inputs.len() == 3 {
                    out.push(descriptor(grads.bias)?);
                }
                out
            }
            Op::Sum => vec![Tensor::full(input(0)?.shape(), g[0].data()[0])],
            Op::CrossEntropy { labels, probs } => {
                vec![linear::cross_entropy_backward(probs, labels, g[0].data()[0])]
            }
            Op::Dropout(mask) => {
                let mut dx = g[0].clone();
                dx.data_mut().iter_mut().zip(mask).for_each(|(d, &m)| *d *= m);
                vec![dx]
            }
        })
    }
}

/// Result of [`Tape::backward`]: one optional gradient per recorded value.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` does not reach the loss.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
