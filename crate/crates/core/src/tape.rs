//! Reverse-mode differentiation by operation recording.
//!
//! Operations executed through a [`GradientTape`] are appended in execution
//! order together with whatever they need for their backward rule. Calling
//! [`GradientTape::backward`] replays those rules in reverse and yields the
//! gradient of a scalar root with respect to every parameter leaf.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::losses::kernels;
use crate::ops;
use crate::tensor::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("value does not belong to this tape (or the tape was reset since)")]
    ForeignValue,
    #[error("tape was already consumed by a backward pass; reset it before reuse")]
    Consumed,
    #[error("backward root must be a single-element value, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        filters: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Affine {
        input: Var,
        weights: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    ClassMatrix {
        activations: Var,
        labels: Vec<usize>,
        scale: f64,
    },
    RoutingLoss(Var),
    BalancingCost(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Single-owner operation record. Not `Sync`-shared; move it between threads if needed.
#[derive(Debug)]
pub struct GradientTape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for GradientTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Clears all records. Handles issued before the reset are rejected afterwards.
    pub fn reset(&mut self) {
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor, TapeError> {
        self.check(var)?;
        Ok(&self.nodes[var.index].value)
    }

    fn push_leaf(&mut self, value: Tensor, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: is_param,
            is_param,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<(), TapeError> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TapeError::ForeignValue);
        }
        Ok(())
    }

    fn check_open(&self, inputs: &[Var]) -> Result<(), TapeError> {
        if self.consumed {
            return Err(TapeError::Consumed);
        }
        inputs.iter().try_for_each(|&v| self.check(v))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn val(&self, var: Var) -> &Tensor {
        &self.nodes[var.index].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        filters: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TapeError> {
        let mut inputs = vec![input, filters];
        inputs.extend(bias);
        self.check_open(&inputs)?;
        let out = ops::conv2d(
            self.val(input),
            self.val(filters),
            bias.map(|b| self.val(b)),
            stride,
            padding,
        )?;
        let op = Op::Conv2d {
            input,
            filters,
            bias,
            stride,
            padding,
        };
        Ok(self.push(out, op, &inputs))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TapeError> {
        self.check_open(&[input])?;
        let out = ops::relu(self.val(input));
        Ok(self.push(out, Op::Relu(input), &[input]))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var, TapeError> {
        self.check_open(&[input])?;
        let (out, argmax) = ops::max_pool2d_with_argmax(self.val(input), window, stride)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TapeError> {
        self.check_open(&[input])?;
        let out = ops::global_avg_pool(self.val(input))?;
        Ok(self.push(out, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TapeError> {
        self.check_open(&[input])?;
        let out = self.val(input).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(input), &[input]))
    }

    pub fn affine(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var, TapeError> {
        let mut inputs = vec![input, weights];
        inputs.extend(bias);
        self.check_open(&inputs)?;
        let out = ops::affine(self.val(input), self.val(weights), bias.map(|b| self.val(b)))?;
        Ok(self.push(out, Op::Affine { input, weights, bias }, &inputs))
    }

    /// Mean softmax cross-entropy; labels are 0-based.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TapeError> {
        self.check_open(&[logits])?;
        let (loss, probs) = ops::softmax_cross_entropy_with_probs(self.val(logits), labels)?;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// `scale · Σ_i a[i, j]·[labels_i = h]` as a `num_classes × R` matrix from `a: N×R`.
    pub fn class_matrix(
        &mut self,
        activations: Var,
        labels: &[usize],
        num_classes: usize,
        scale: f64,
    ) -> Result<Var, TapeError> {
        self.check_open(&[activations])?;
        let out = kernels::class_matrix(self.val(activations), labels, num_classes, scale)?;
        let op = Op::ClassMatrix {
            activations,
            labels: labels.to_vec(),
            scale,
        };
        Ok(self.push(out, op, &[activations]))
    }

    /// Negative mean squared deviation of each column from its class mean.
    pub fn routing_loss(&mut self, matrix: Var) -> Result<Var, TapeError> {
        self.check_open(&[matrix])?;
        let m = self.val(matrix);
        let (c, r) = kernels::matrix_dims("routing_loss", m)?;
        let out = kernels::routing_value(m.data(), c, r);
        Ok(self.push(Tensor::scalar(out), Op::RoutingLoss(matrix), &[matrix]))
    }

    /// Variance of per-class row sums.
    pub fn balancing_cost(&mut self, matrix: Var) -> Result<Var, TapeError> {
        self.check_open(&[matrix])?;
        let m = self.val(matrix);
        let (c, r) = kernels::matrix_dims("balancing_cost", m)?;
        let out = kernels::balancing_value(m.data(), c, r);
        Ok(self.push(Tensor::scalar(out), Op::BalancingCost(matrix), &[matrix]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check_open(&[a, b])?;
        let out = self.val(a).zip_map(self.val(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check_open(&[a, b])?;
        let out = self.val(a).zip_map(self.val(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var, TapeError> {
        self.check_open(&[input])?;
        let out = self.val(input).map(|x| x * factor);
        Ok(self.push(out, Op::Scale(input, factor), &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, TapeError> {
        self.check_open(&[input])?;
        let out = Tensor::scalar(self.val(input).sum());
        Ok(self.push(out, Op::Sum(input), &[input]))
    }

    /// Gradients of `root` with respect to every parameter on the tape.
    ///
    /// Marks the tape consumed; a second call fails until [`reset`](Self::reset).
    pub fn backward(&mut self, root: Var) -> Result<Gradients, TapeError> {
        self.check(root)?;
        if self.consumed {
            return Err(TapeError::Consumed);
        }
        let root_shape = self.val(root).shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TapeError::NonScalarRoot(root_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.index] = Some(Tensor::full(&root_shape, 1.0));

        for idx in (0..=root.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_gradients(&node.op, &g)?;
            if node.is_param {
                grads[idx] = Some(g);
            }
            for (var, contrib) in contributions {
                if !self.nodes[var.index].requires_grad {
                    continue;
                }
                match &mut grads[var.index] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        // Parameters the root does not depend on get explicit zeros.
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_param)
            .map(|(i, n)| {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (i, g)
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            params,
        })
    }

    fn local_gradients(&self, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>, TapeError> {
        let grads = match op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                filters,
                bias,
                stride,
                padding,
            } => {
                let (gx, gf, gb) =
                    ops::conv2d_backward(self.val(*input), self.val(*filters), g, *stride, *padding)?;
                let mut v = vec![(*input, gx), (*filters, gf)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::Relu(input) => vec![(*input, ops::relu_backward(self.val(*input), g)?)],
            Op::MaxPool { input, argmax } => vec![(
                *input,
                ops::max_pool2d_backward(self.val(*input).shape(), argmax, g),
            )],
            Op::GlobalAvgPool(input) => vec![(
                *input,
                ops::global_avg_pool_backward(self.val(*input).shape(), g),
            )],
            Op::Reshape(input) => vec![(*input, g.reshape(self.val(*input).shape())?)],
            Op::Affine { input, weights, bias } => {
                let (gx, gw, gb) = ops::affine_backward(self.val(*input), self.val(*weights), g);
                let mut v = vec![(*input, gx), (*weights, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => vec![(
                *logits,
                ops::softmax_cross_entropy_backward(probs, labels, g.data()[0]),
            )],
            Op::ClassMatrix {
                activations,
                labels,
                scale,
            } => vec![(
                *activations,
                kernels::class_matrix_backward(self.val(*activations).shape(), labels, *scale, g),
            )],
            Op::RoutingLoss(m) => {
                let mv = self.val(*m);
                let (c, r) = (mv.shape()[0], mv.shape()[1]);
                let gm = kernels::routing_gradient(mv.data(), c, r);
                vec![(*m, scaled(mv.shape(), gm, g.data()[0]))]
            }
            Op::BalancingCost(m) => {
                let mv = self.val(*m);
                let (c, r) = (mv.shape()[0], mv.shape()[1]);
                let gm = kernels::balancing_gradient(mv.data(), c, r);
                vec![(*m, scaled(mv.shape(), gm, g.data()[0]))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(self.val(*b), |x, y| x * y)?),
                (*b, g.zip_map(self.val(*a), |x, y| x * y)?),
            ],
            Op::Scale(input, factor) => vec![(*input, g.map(|x| x * factor))],
            Op::Sum(input) => {
                let s = g.data()[0];
                vec![(*input, Tensor::full(self.val(*input).shape(), s))]
            }
        };
        Ok(grads)
    }
}

fn scaled(shape: &[usize], mut data: Vec<f64>, factor: f64) -> Tensor {
    data.iter_mut().for_each(|v| *v *= factor);
    Tensor::from_parts(shape.to_vec(), data)
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    params: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn get(&self, param: Var) -> Option<&Tensor> {
        if param.tape != self.tape {
            return None;
        }
        self.params
            .binary_search_by_key(&param.index, |(i, _)| *i)
            .ok()
            .map(|pos| &self.params[pos].1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}
