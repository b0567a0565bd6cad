//! Tape-based reverse-mode automatic differentiation over the tensor
//! kernels in [`crate::ops`].
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes;
//! construction order is a topological order, so [`Tape::backward`]
//! walks the list once in reverse, accumulating gradients by summation
//! at fan-out points.

pub mod gradcheck;
pub mod params;

pub use gradcheck::grad_check;
pub use params::{adam_step, he_uniform, AdamConfig, ParamStore};

use crate::error::{shape_err, usage_err, Result};
use crate::ops;
use crate::ops::conv::{conv2d_backward, ConvSpec};
use crate::ops::linalg::{self, inverse_permutation, ReduceKind};
use crate::ops::norm;
use crate::ops::pool::{self, PoolKind};
use crate::ops::resize;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Maps an upstream gradient to per-parent gradients.
/// Arguments: gradient of the node output, the node's own value, parent values.
type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[&Tensor<T>]) -> Result<Vec<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Gradients for every node reached by a backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; all-zero if no path reached the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    checked: bool,
    train: bool,
    buffer_updates: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
            train: false,
            buffer_updates: Vec::new(),
        }
    }

    /// NaN/Inf guards at every op boundary; on in tests, off in timed runs.
    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    /// Train mode switches batchnorm to batch statistics and records
    /// running-stat updates for the caller to apply.
    pub fn with_train(mut self, train: bool) -> Self {
        self.train = train;
        self
    }

    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Running-statistic updates accumulated during this forward pass,
    /// keyed by buffer name.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn record_buffer_update(&mut self, name: String, value: Tensor<T>) {
        self.buffer_updates.push((name, value));
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn<T>>,
    ) -> Result<NodeId> {
        if self.checked {
            value.ensure_finite("op output")?;
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Ok(id)
    }

    /// Insert a differentiable leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        id
    }

    /// Insert a constant (no gradient is ever produced for it).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Test-only hook: register a node with a hand-written backward rule.
    #[cfg(test)]
    pub(crate) fn push_custom(
        &mut self,
        value: Tensor<T>,
        parents: Vec<NodeId>,
        backward: BackwardFn<T>,
    ) -> Result<NodeId> {
        self.push(value, parents, Some(backward))
    }

    // ---- elementwise and linear ----------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = linalg::add(self.value(a), self.value(b))?;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| Ok(vec![g.clone(), g.clone()]))),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = linalg::sub(self.value(a), self.value(b))?;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| {
                Ok(vec![g.clone(), linalg::scale(g, -1.0)])
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = linalg::mul(self.value(a), self.value(b))?;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, p| {
                Ok(vec![linalg::mul(g, p[1])?, linalg::mul(g, p[0])?])
            })),
        )
    }

    /// Add a scalar constant elementwise; gradient passes through.
    pub fn offset(&mut self, x: NodeId, shift: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| v + T::from_f64(shift));
        self.push(value, vec![x], Some(Box::new(|g, _, _| Ok(vec![g.clone()]))))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = linalg::scale(self.value(x), factor);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _, _| Ok(vec![linalg::scale(g, factor)]))),
        )
    }

    /// Multiply by a gate that broadcasts over size-1 axes (channel gates,
    /// spatial gates, learned scalar scales).
    pub fn mul_bcast(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let value = ops::mul_bcast(self.value(x), self.value(gate))?;
        self.push(
            value,
            vec![x, gate],
            Some(Box::new(|g, _, p| {
                let (gx, ggate) = ops::mul_bcast_backward(g, p[0], p[1])?;
                Ok(vec![gx, ggate])
            })),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = linalg::matmul(self.value(a), self.value(b))?;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, p| {
                let bt = linalg::permute(p[1], &[1, 0])?;
                let at = linalg::permute(p[0], &[1, 0])?;
                Ok(vec![linalg::matmul(g, &bt)?, linalg::matmul(&at, g)?])
            })),
        )
    }

    /// Batched matmul `[B,m,k]·[B,k,n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = linalg::bmm(self.value(a), self.value(b))?;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, p| {
                Ok(vec![linalg::bmm_nt(g, p[1])?, linalg::bmm_tn(p[0], g)?])
            })),
        )
    }

    /// Batched `A·Bᵀ`: `[B,m,k]·[B,n,k] -> [B,m,n]`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = linalg::bmm_nt(self.value(a), self.value(b))?;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, p| {
                // out = A·Bᵀ: dA = g·B, dB = gᵀ·A
                Ok(vec![linalg::bmm(g, p[1])?, linalg::bmm_tn(g, p[0])?])
            })),
        )
    }

    pub fn permute(&mut self, x: NodeId, order: &[usize]) -> Result<NodeId> {
        let value = linalg::permute(self.value(x), order)?;
        let order = order.to_vec();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _, _| {
                Ok(vec![linalg::permute(g, &inverse_permutation(&order))?])
            })),
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, _, p| Ok(vec![g.reshape(p[0].shape())?]))),
        )
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&id| self.value(id)).collect();
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let value = linalg::concat(&tensors, axis)?;
        self.push(
            value,
            inputs.to_vec(),
            Some(Box::new(move |g, _, _| linalg::split(g, axis, &sizes))),
        )
    }

    /// Reduce one axis to size 1.
    pub fn reduce(&mut self, x: NodeId, axis: usize, kind: ReduceKind) -> Result<NodeId> {
        let (value, argmax) = linalg::reduce(self.value(x), axis, kind)?;
        let len_axis = self.value(x).shape()[axis];
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _, p| {
                let in_shape = p[0].shape();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let mut grad = Tensor::<T>::zeros(in_shape);
                match (&argmax, kind) {
                    (Some(winners), ReduceKind::Max) => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let slot = o * inner + i;
                                let k = winners[slot];
                                grad.data_mut()[(o * len_axis + k) * inner + i] +=
                                    g.data()[slot];
                            }
                        }
                    }
                    (_, ReduceKind::Mean) => {
                        let share = T::from_f64(1.0 / len_axis as f64);
                        for o in 0..outer {
                            for i in 0..inner {
                                let gv = g.data()[o * inner + i] * share;
                                for k in 0..len_axis {
                                    grad.data_mut()[(o * len_axis + k) * inner + i] += gv;
                                }
                            }
                        }
                    }
                    _ => unreachable!("argmax recorded iff kind is Max"),
                }
                Ok(vec![grad])
            })),
        )
    }

    /// Sum every element into a scalar node of shape `[1]`.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(
            Tensor::scalar(acc),
            vec![x],
            Some(Box::new(|g, _, p| {
                let gv = g.data()[0];
                Ok(vec![Tensor::full(p[0].shape(), gv)])
            })),
        )
    }

    // ---- activations -----------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = ops::relu(self.value(x));
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, _, p| {
                Ok(vec![ops::activation::relu_backward(g, p[0])?])
            })),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = ops::sigmoid(self.value(x));
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, out, _| {
                Ok(vec![ops::activation::sigmoid_backward(g, out)?])
            })),
        )
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = ops::softmax(self.value(x), axis)?;
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, out, _| {
                Ok(vec![ops::activation::softmax_backward(g, out, axis)?])
            })),
        )
    }

    // ---- structured kernels ----------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let value = ops::conv2d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let has_bias = bias.is_some();
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push(
            value,
            parents,
            Some(Box::new(move |g, _, p| {
                let (gx, gw, gb) = conv2d_backward(g, p[0], p[1], has_bias, spec)?;
                let mut grads = vec![gx, gw];
                if let Some(gb) = gb {
                    grads.push(gb);
                }
                Ok(grads)
            })),
        )
    }

    pub fn pool2d(&mut self, x: NodeId, kind: PoolKind, k: usize, stride: usize) -> Result<NodeId> {
        let (value, winners) = pool::pool2d(self.value(x), kind, k, stride)?;
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _, p| {
                Ok(vec![pool::pool2d_backward(
                    g,
                    p[0].shape(),
                    kind,
                    k,
                    stride,
                    winners.as_deref(),
                )?])
            })),
        )
    }

    pub fn avg_pool_to_bins(&mut self, x: NodeId, bins: usize) -> Result<NodeId> {
        let value = pool::avg_pool_to_bins(self.value(x), bins)?;
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _, p| {
                Ok(vec![pool::avg_pool_to_bins_backward(g, p[0].shape(), bins)?])
            })),
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let value = pool::global_avg_pool(self.value(x))?;
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, _, p| {
                Ok(vec![pool::global_avg_pool_backward(g, p[0].shape())?])
            })),
        )
    }

    pub fn bilinear_upsample(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let value = resize::bilinear_upsample(self.value(x), out_h, out_w)?;
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _, p| {
                Ok(vec![resize::bilinear_upsample_backward(g, p[0].shape())?])
            })),
        )
    }

    /// Batch normalization. Mode follows the tape's train flag; running
    /// statistics are buffers, not graph nodes, and any train-mode update
    /// is surfaced through [`Tape::take_buffer_updates`] by the layer.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
        momentum: f64,
    ) -> Result<(NodeId, Option<(Tensor<T>, Tensor<T>)>)> {
        let train = self.train;
        let fwd = if train {
            norm::batchnorm2d_train(
                self.value(x),
                self.value(gamma),
                self.value(beta),
                running_mean,
                running_var,
                momentum,
                eps,
            )?
        } else {
            norm::batchnorm2d_eval(
                self.value(x),
                self.value(gamma),
                self.value(beta),
                running_mean,
                running_var,
                eps,
            )?
        };
        let mean = fwd.mean;
        let var = fwd.var;
        let id = self.push(
            fwd.output,
            vec![x, gamma, beta],
            Some(Box::new(move |g, _, p| {
                let (gx, gg, gb) = if train {
                    norm::batchnorm2d_backward_train(g, p[0], p[1], &mean, &var, eps)?
                } else {
                    norm::batchnorm2d_backward_eval(g, p[0], p[1], &mean, &var, eps)?
                };
                Ok(vec![gx, gg, gb])
            })),
        )?;
        Ok((id, fwd.new_running))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss node. Gradients accumulate by
    /// summation at fan-out; leaves with no path to the loss report zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(usage_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(&[1]).reshape(self.value(loss).shape())?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(rule) = &node.backward else {
                continue;
            };
            let Some(grad_out) = grads[i].clone() else {
                continue;
            };
            if grad_out.shape() != node.value.shape() {
                return Err(shape_err!(
                    "gradient shape {:?} does not match value shape {:?} at node {}",
                    grad_out.shape(),
                    node.value.shape(),
                    i
                ));
            }
            let parent_values: Vec<&Tensor<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = rule(&grad_out, &node.value, &parent_values)?;
            if parent_grads.len() != node.parents.len() {
                return Err(usage_err!(
                    "backward rule returned {} gradients for {} parents",
                    parent_grads.len(),
                    node.parents.len()
                ));
            }
            for (parent, grad) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                if self.checked {
                    grad.ensure_finite("backward gradient")?;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }
}
