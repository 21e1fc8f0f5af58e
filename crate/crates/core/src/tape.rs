//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node whose inputs precede it, so
//! the recording order is already a topological order and backward is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Resize {
        input: Var,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Relu {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Concat {
        inputs: Vec<Var>,
        channels: Vec<usize>,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to the tape's variables.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when `var` is a constant or does not influence the root.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient backward reports.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(input), out_h, out_w)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::Resize { input }, needs))
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let r = ops::group_norm(self.value(input), groups, self.value(gamma), self.value(beta), eps)?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            r.output,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean: r.mean,
                rstd: r.rstd,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let needs = self.needs(input);
        self.push(out, Op::Relu { input }, needs)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::GlobalAvgPool { input }, needs))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Linear { input, weight, bias }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&parts)?;
        let channels = parts.iter().map(|p| p.dims()[1]).collect();
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                channels,
            },
            needs,
        ))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let needs = self.needs(input);
        self.push(out, Op::Sum { input }, needs)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Sign pattern of every ReLU input, in recording order. Two forward
    /// passes with equal patterns lie in the same linear region.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { input } => Some(input),
                _ => None,
            })
            .flat_map(|input| self.value(input).data().iter().map(|&x| x > T::zero()))
            .collect()
    }

    /// Reverse sweep from a scalar `root`. The tape is left untouched, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Argument(format!("node {} is not on this tape", root.0)));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Argument(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).dims().to_vec(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            // leaves keep their gradient; interior gradients are released once used
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(&node.op, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let r = ops::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    padding,
                    self.needs(input),
                    self.needs(weight),
                    bias.is_some_and(|b| self.needs(b)),
                )?;
                if let Some(dx) = r.input {
                    self.accumulate(grads, input, dx)?;
                }
                if let Some(dw) = r.weight {
                    self.accumulate(grads, weight, dw)?;
                }
                if let (Some(b), Some(db)) = (bias, r.bias) {
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Resize { input } => {
                let dx = ops::bilinear_resize_backward(self.value(input).dims(), g)?;
                self.accumulate(grads, input, dx)?;
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let r = ops::group_norm_backward(
                    self.value(*input),
                    *groups,
                    self.value(*gamma),
                    self.value(*beta),
                    mean,
                    rstd,
                    g,
                )?;
                self.accumulate(grads, *input, r.input)?;
                self.accumulate(grads, *gamma, r.gamma)?;
                self.accumulate(grads, *beta, r.beta)?;
            }
            &Op::Relu { input } => {
                let dx = ops::relu_backward(self.value(input), g)?;
                self.accumulate(grads, input, dx)?;
            }
            &Op::GlobalAvgPool { input } => {
                let dx = ops::global_avg_pool_backward(self.value(input).dims(), g)?;
                self.accumulate(grads, input, dx)?;
            }
            &Op::Linear { input, weight, bias } => {
                let r = ops::linear_backward(self.value(input), self.value(weight), g)?;
                self.accumulate(grads, input, r.input)?;
                self.accumulate(grads, weight, r.weight)?;
                if let Some(b) = bias {
                    self.accumulate(grads, b, r.bias)?;
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Mul { a, b } => {
                let da = g.zip_map(self.value(b), |x, y| x * y)?;
                let db = g.zip_map(self.value(a), |x, y| x * y)?;
                self.accumulate(grads, a, da)?;
                self.accumulate(grads, b, db)?;
            }
            Op::Concat { inputs, channels } => {
                for (&v, part) in inputs.iter().zip(ops::split_channels(g, channels)?) {
                    self.accumulate(grads, v, part)?;
                }
            }
            &Op::Sum { input } => {
                let dims = self.value(input).dims().to_vec();
                self.accumulate(grads, input, Tensor::full(dims, g.data()[0]))?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let dx = ops::softmax_cross_entropy_backward(probs, labels, g.data()[0])?;
                self.accumulate(grads, *logits, dx)?;
            }
        }
        Ok(())
    }
}
