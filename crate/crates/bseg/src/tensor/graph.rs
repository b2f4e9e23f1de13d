//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! A [`Graph`] is an append-only record of executed primitives: node inputs
//! always precede the node, so the backward pass is a single reverse sweep
//! that visits each op exactly once. A graph is confined to one logical
//! thread; independent graphs may run concurrently.

use super::ops::{self, BatchNormMode, BnSaved, BnState, Padding};
use super::{Scalar, Tensor};
use crate::rng::RngKey;
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        padding: Padding,
        stride: usize,
    },
    TransposedConv2d {
        input: NodeId,
        kernels: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved<S>,
    },
    Relu {
        input: NodeId,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        p: f64,
        key: RngKey,
    },
    ConcatChannels {
        inputs: Vec<NodeId>,
    },
    WeightedCrossEntropy {
        softmax: NodeId,
        labels: Vec<u8>,
        class_weights: Vec<S>,
        weight_total: S,
    },
    SumSquares {
        input: NodeId,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

pub use super::ops::CROSS_ENTROPY_EPS;

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call, if this node required one.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor<S> {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::scalar(S::ZERO))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        padding: Padding,
        stride: usize,
    ) -> Result<NodeId> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            padding,
            stride,
        )?;
        let req = self.any_requires(&[input, kernels, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                padding,
                stride,
            },
            req,
        ))
    }

    pub fn transposed_conv2d(&mut self, input: NodeId, kernels: NodeId) -> Result<NodeId> {
        let out = ops::transposed_conv2d(self.value(input), self.value(kernels))?;
        let req = self.any_requires(&[input, kernels]);
        Ok(self.push(out, Op::TransposedConv2d { input, kernels }, req))
    }

    pub fn max_pool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = ops::max_pool2d(self.value(input))?;
        let req = self.any_requires(&[input]);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, req))
    }

    /// Returns the output node and, in train mode, the EMA-updated running
    /// statistics for the caller to apply.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode,
        state: &BnState<S>,
        epsilon: f64,
    ) -> Result<(NodeId, Option<BnState<S>>)> {
        let result = ops::batch_norm(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            mode,
            state,
            epsilon,
        )?;
        let req = self.any_requires(&[input, gamma, beta]);
        let id = self.push(
            result.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved: result.saved,
            },
            req,
        );
        Ok((id, result.new_state))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu(self.value(input));
        let req = self.any_requires(&[input]);
        self.push(out, Op::Relu { input }, req)
    }

    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::softmax_channels(self.value(input))?;
        let req = self.any_requires(&[input]);
        Ok(self.push(out, Op::SoftmaxChannels { input }, req))
    }

    pub fn dropout(&mut self, input: NodeId, p: f64, key: RngKey) -> Result<NodeId> {
        let out = ops::dropout(self.value(input), p, key)?;
        let req = self.any_requires(&[input]);
        Ok(self.push(out, Op::Dropout { input, p, key }, req))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<S>> = inputs.iter().map(|id| self.value(*id)).collect();
        let out = ops::concat_channels(&tensors)?;
        let req = self.any_requires(inputs);
        Ok(self.push(
            out,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            req,
        ))
    }

    /// Weighted cross-entropy of a softmax map against integer labels:
    /// `-(sum_px w[y_px] * ln(max(S[y_px], eps))) / sum_px w[y_px]`.
    pub fn weighted_cross_entropy(
        &mut self,
        softmax: NodeId,
        labels: &[u8],
        class_weights: &[S],
    ) -> Result<NodeId> {
        let (loss, weight_total) =
            ops::weighted_cross_entropy_value(self.value(softmax), labels, class_weights)?;
        let req = self.any_requires(&[softmax]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy {
                softmax,
                labels: labels.to_vec(),
                class_weights: class_weights.to_vec(),
                weight_total,
            },
            req,
        ))
    }

    /// Scalar `sum(x^2)`; handy as a test loss.
    pub fn sum_squares(&mut self, input: NodeId) -> NodeId {
        let mut acc = S::ZERO;
        for &v in self.value(input).data() {
            acc += v * v;
        }
        let req = self.any_requires(&[input]);
        self.push(Tensor::scalar(acc), Op::SumSquares { input }, req)
    }

    fn accumulate_grad(&mut self, id: NodeId, grad: Tensor<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(existing) => existing.accumulate(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Reverse accumulation from a scalar loss. Leaves flagged
    /// `requires_grad` end up with a gradient; those not reached by the
    /// loss keep an all-zero one.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::filled(
            self.nodes[loss.0].value.shape().to_vec(),
            S::ONE,
        ));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad_out) = self.nodes[i].grad.clone() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    padding,
                    stride,
                } => {
                    let (input, kernels, bias, padding, stride) =
                        (*input, *kernels, *bias, *padding, *stride);
                    let (gi, gk, gb) = ops::conv2d_backward(
                        self.value(input),
                        self.value(kernels),
                        &grad_out,
                        padding,
                        stride,
                    )?;
                    self.accumulate_grad(input, gi);
                    self.accumulate_grad(kernels, gk);
                    self.accumulate_grad(bias, gb);
                }
                Op::TransposedConv2d { input, kernels } => {
                    let (input, kernels) = (*input, *kernels);
                    let (gi, gk) = ops::transposed_conv2d_backward(
                        self.value(input),
                        self.value(kernels),
                        &grad_out,
                    )?;
                    self.accumulate_grad(input, gi);
                    self.accumulate_grad(kernels, gk);
                }
                Op::MaxPool2d { input, argmax } => {
                    let input = *input;
                    let gi = ops::max_pool2d_backward(self.value(input).shape(), argmax, &grad_out);
                    self.accumulate_grad(input, gi);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    let (gi, gg, gb) =
                        ops::batch_norm_backward(saved, self.value(gamma), &grad_out);
                    self.accumulate_grad(input, gi);
                    self.accumulate_grad(gamma, gg);
                    self.accumulate_grad(beta, gb);
                }
                Op::Relu { input } => {
                    let input = *input;
                    let gi = ops::relu_backward(self.value(input), &grad_out);
                    self.accumulate_grad(input, gi);
                }
                Op::SoftmaxChannels { input } => {
                    let input = *input;
                    let gi = ops::softmax_channels_backward(&self.nodes[i].value, &grad_out);
                    self.accumulate_grad(input, gi);
                }
                Op::Dropout { input, p, key } => {
                    let (input, p, key) = (*input, *p, *key);
                    let gi = ops::dropout_backward(&grad_out, p, key);
                    self.accumulate_grad(input, gi);
                }
                Op::ConcatChannels { inputs } => {
                    let inputs = inputs.clone();
                    let mut offset = 0usize;
                    for id in inputs {
                        let c = *self.value(id).shape().last().unwrap();
                        let gi = ops::slice_channels(&grad_out, offset, c)
                            .expect("concat grad slicing is in range");
                        offset += c;
                        self.accumulate_grad(id, gi);
                    }
                }
                Op::WeightedCrossEntropy {
                    softmax,
                    labels,
                    class_weights,
                    weight_total,
                } => {
                    let softmax = *softmax;
                    let weight_total = *weight_total;
                    let labels = labels.clone();
                    let class_weights = class_weights.clone();
                    let upstream = grad_out.data()[0];
                    let s_val = self.value(softmax);
                    let classes = *s_val.shape().last().unwrap();
                    let eps = S::from_f64(CROSS_ENTROPY_EPS);
                    let mut gi = Tensor::zeros(s_val.shape().to_vec());
                    if weight_total > S::ZERO {
                        let data = s_val.data();
                        let gdata = gi.data_mut();
                        for (px, &label) in labels.iter().enumerate() {
                            let class = label as usize;
                            let s = data[px * classes + class];
                            if s > eps {
                                gdata[px * classes + class] =
                                    -upstream * class_weights[class] / (weight_total * s);
                            }
                        }
                    }
                    self.accumulate_grad(softmax, gi);
                }
                Op::SumSquares { input } => {
                    let input = *input;
                    let upstream = grad_out.data()[0];
                    let two = S::from_f64(2.0);
                    let gi = self.value(input).map(|v| two * upstream * v);
                    self.accumulate_grad(input, gi);
                }
            }
        }

        // Unreached parameters report zero gradients.
        for node in self.nodes.iter_mut() {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }
}
