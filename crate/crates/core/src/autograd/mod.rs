//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value plus whatever it needs
//! to produce input gradients. Nodes whose inputs do not require gradients are
//! skipped entirely during [`Tape::backward`], so frozen sub-networks cost
//! only their forward pass.

mod conv;
mod elementwise;
mod loss;
mod norm;

pub use conv::conv_out_extent;
pub use norm::{BatchStats, BnMode, RunningStats};

use crate::tensor::{Element, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T: Element> {
    Leaf,
    Conv2d(conv::Conv2dSaved<T>),
    BatchNorm(norm::BatchNormSaved<T>),
    Relu { input: Var },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    GlobalAvgPool { input: Var },
    Add { a: Var, b: Var },
    Reshape { input: Var },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Sum { input: Var },
    WeightedSum { input: Var, coeffs: Vec<T> },
    SoftmaxCrossEntropy(loss::CrossEntropySaved<T>),
    NtXent(loss::NtXentSaved<T>),
}

pub(crate) struct Node<T: Element> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`]; `None` when the
    /// node was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Populates gradients for every node that requires them and is reachable
    /// from `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let contributions = self.op_backward(&op, idx, &grad);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn op_backward(&self, op: &Op<T>, idx: usize, grad: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let out = &self.nodes[idx].value;
        match op {
            Op::Leaf => Vec::new(),
            Op::Conv2d(saved) => conv::conv2d_backward(self, saved, grad),
            Op::BatchNorm(saved) => norm::batch_norm_backward(self, saved, grad),
            Op::Relu { input } => vec![(*input, elementwise::relu_backward(out, grad))],
            Op::MaxPool2 { input, argmax } => {
                vec![(*input, elementwise::maxpool_backward(self.value(*input), argmax, grad))]
            }
            Op::GlobalAvgPool { input } => {
                vec![(*input, elementwise::gap_backward(self.value(*input).shape(), grad))]
            }
            Op::Add { a, b } => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Reshape { input } => {
                let g = grad.clone().reshape(self.value(*input).shape()).expect("reshape grad");
                vec![(*input, g)]
            }
            Op::Linear { input, weight, bias } => {
                elementwise::linear_backward(self, *input, *weight, *bias, grad)
            }
            Op::Sum { input } => {
                let g = grad.data()[0];
                vec![(*input, Tensor::full(self.value(*input).shape(), g))]
            }
            Op::WeightedSum { input, coeffs } => {
                let g = grad.data()[0];
                let shape = self.value(*input).shape();
                vec![(*input, Tensor::from_fn(shape, |i| coeffs[i] * g))]
            }
            Op::SoftmaxCrossEntropy(saved) => loss::cross_entropy_backward(saved, grad),
            Op::NtXent(saved) => loss::nt_xent_backward(saved, grad),
        }
    }
}
