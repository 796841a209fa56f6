//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends one node recording its inputs and any context the
//! backward rule needs; creation order is therefore a topological order, and
//! [`Tape::backward`] walks it once in reverse. Forward values are never
//! mutated by backward.
//!
//! Model parameters live outside the tape in a [`crate::params::ParamStore`];
//! a forward pass binds them as leaves via [`Tape::param`], and
//! [`Tape::accumulate_param_grads`] moves leaf gradients back into the store
//! (adding to whatever is there, so repeated backward passes accumulate until
//! the store is zeroed).

use std::collections::HashMap;

use crate::ops::{self, BroadcastMode, ConvSpec, Reduction};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor, TensorError};

/// Handle to a node in one [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

enum OpRecord<T: Scalar> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2x {
        input: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    OneMinus {
        input: NodeId,
    },
    BroadcastMul {
        map: NodeId,
        features: NodeId,
        mode: BroadcastMode,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Bce {
        pred: NodeId,
        target: Tensor<T>,
        reduction: Reduction,
        clamp_eps: T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: OpRecord<T>,
}

/// One forward pass worth of computation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: Vec<(ParamId, NodeId)>,
    bound_lookup: HashMap<ParamId, NodeId>,
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
            bound: Vec::new(),
            bound_lookup: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: OpRecord<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf holding input data (no gradient tracking).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, OpRecord::Leaf)
    }

    /// Leaf with gradient tracking; used for free variables in tests.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, OpRecord::Leaf)
    }

    /// Bind a stored parameter as a leaf. Repeated binds of the same
    /// parameter return the same node so its gradient is not double-counted.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&nid) = self.bound_lookup.get(&id) {
            return nid;
        }
        let nid = self.push(store.value(id).clone(), true, OpRecord::Leaf);
        self.bound.push((id, nid));
        self.bound_lookup.insert(id, nid);
        nid
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- ops ----

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId, TensorError> {
        let value = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let rg = self.wants(input)
            || self.wants(weight)
            || bias.map_or(false, |b| self.wants(b));
        Ok(self.push(
            value,
            rg,
            OpRecord::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    pub fn max_pool_2x2(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let (value, argmax) = ops::max_pool_2x2(self.value(input))?;
        let rg = self.wants(input);
        Ok(self.push(value, rg, OpRecord::MaxPool2x2 { input, argmax }))
    }

    pub fn upsample_nearest_2x(&mut self, input: NodeId) -> NodeId {
        let value = ops::upsample_nearest_2x(self.value(input));
        let rg = self.wants(input);
        self.push(value, rg, OpRecord::Upsample2x { input })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(value, rg, OpRecord::Concat { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = ops::add(self.value(a), self.value(b))?;
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(value, rg, OpRecord::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(value, rg, OpRecord::Mul { a, b }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = ops::relu(self.value(input));
        let rg = self.wants(input);
        self.push(value, rg, OpRecord::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = ops::sigmoid(self.value(input));
        let rg = self.wants(input);
        self.push(value, rg, OpRecord::Sigmoid { input })
    }

    pub fn one_minus(&mut self, input: NodeId) -> NodeId {
        let value = ops::one_minus(self.value(input));
        let rg = self.wants(input);
        self.push(value, rg, OpRecord::OneMinus { input })
    }

    pub fn broadcast_mul(&mut self, map: NodeId, features: NodeId) -> Result<NodeId, TensorError> {
        let (value, mode) = ops::broadcast_mul(self.value(map), self.value(features))?;
        let rg = self.wants(map) || self.wants(features);
        Ok(self.push(value, rg, OpRecord::BroadcastMul { map, features, mode }))
    }

    pub fn global_average_pool(&mut self, input: NodeId) -> NodeId {
        let value = ops::global_average_pool(self.value(input));
        let rg = self.wants(input);
        self.push(value, rg, OpRecord::GlobalAvgPool { input })
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = ops::sum_all(self.value(input));
        let rg = self.wants(input);
        self.push(value, rg, OpRecord::Sum { input })
    }

    pub fn bce_loss(
        &mut self,
        pred: NodeId,
        target: Tensor<T>,
        reduction: Reduction,
        clamp_eps: T,
    ) -> Result<NodeId, TensorError> {
        let value = ops::bce_loss(self.value(pred), &target, reduction, clamp_eps)?;
        let rg = self.wants(pred);
        Ok(self.push(
            value,
            rg,
            OpRecord::Bce {
                pred,
                target,
                reduction,
                clamp_eps,
            },
        ))
    }

    // ---- backward ----

    fn acc(&mut self, id: NodeId, delta: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.value.shape(), delta.shape());
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every reachable
    /// node that requires it; each node is visited exactly once. Node grads
    /// are reset first, so a sweep always yields exact dloss/dnode —
    /// cross-call accumulation happens in the parameter store via
    /// [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let loss_shape = self.shape(loss);
        if !loss_shape.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.acc(loss, Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("grad present");
            let op = std::mem::replace(&mut self.nodes[i].op, OpRecord::Leaf);
            self.dispatch(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn dispatch(&mut self, out: usize, op: &OpRecord<T>, g: &Tensor<T>) {
        match op {
            OpRecord::Leaf => {}
            OpRecord::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                if self.wants(*input) {
                    let d = ops::conv2d_grad_input(g, self.value(*weight), self.shape(*input), spec);
                    self.acc(*input, d);
                }
                if self.wants(*weight) {
                    let d = ops::conv2d_grad_weight(g, self.value(*input), self.shape(*weight), spec);
                    self.acc(*weight, d);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let d = ops::conv2d_grad_bias(g);
                        self.acc(*b, d);
                    }
                }
            }
            OpRecord::MaxPool2x2 { input, argmax } => {
                if self.wants(*input) {
                    let d = ops::max_pool_2x2_grad(g, argmax, self.shape(*input));
                    self.acc(*input, d);
                }
            }
            OpRecord::Upsample2x { input } => {
                if self.wants(*input) {
                    let d = ops::upsample_nearest_2x_grad(g, self.shape(*input));
                    self.acc(*input, d);
                }
            }
            OpRecord::Concat { a, b } => {
                let (da, db) = ops::concat_split_grad(g, self.shape(*a), self.shape(*b));
                if self.wants(*a) {
                    self.acc(*a, da);
                }
                if self.wants(*b) {
                    self.acc(*b, db);
                }
            }
            OpRecord::Add { a, b } => {
                if self.wants(*a) {
                    self.acc(*a, g.clone());
                }
                if self.wants(*b) {
                    self.acc(*b, g.clone());
                }
            }
            OpRecord::Mul { a, b } => {
                if self.wants(*a) {
                    let d = ops::mul(g, self.value(*b)).expect("validated in forward");
                    self.acc(*a, d);
                }
                if self.wants(*b) {
                    let d = ops::mul(g, self.value(*a)).expect("validated in forward");
                    self.acc(*b, d);
                }
            }
            OpRecord::Relu { input } => {
                if self.wants(*input) {
                    let x = self.value(*input);
                    let mut d = g.clone();
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    self.acc(*input, d);
                }
            }
            OpRecord::Sigmoid { input } => {
                if self.wants(*input) {
                    // derivative from the stored output: s * (1 - s)
                    let mut d = g.clone();
                    for (dv, &sv) in d.data_mut().iter_mut().zip(self.nodes[out].value.data()) {
                        *dv = *dv * sv * (T::one() - sv);
                    }
                    self.acc(*input, d);
                }
            }
            OpRecord::OneMinus { input } => {
                if self.wants(*input) {
                    let d = g.map(|v| -v);
                    self.acc(*input, d);
                }
            }
            OpRecord::BroadcastMul { map, features, mode } => {
                if self.wants(*map) {
                    let d = ops::broadcast_mul_grad_map(g, self.value(*features), *mode);
                    self.acc(*map, d);
                }
                if self.wants(*features) {
                    let d = ops::broadcast_mul_grad_features(g, self.value(*map), *mode);
                    self.acc(*features, d);
                }
            }
            OpRecord::GlobalAvgPool { input } => {
                if self.wants(*input) {
                    let d = ops::global_average_pool_grad(g, self.shape(*input));
                    self.acc(*input, d);
                }
            }
            OpRecord::Sum { input } => {
                if self.wants(*input) {
                    let d = Tensor::full(self.shape(*input), g.item());
                    self.acc(*input, d);
                }
            }
            OpRecord::Bce {
                pred,
                target,
                reduction,
                clamp_eps,
            } => {
                if self.wants(*pred) {
                    let d = ops::bce_loss_grad_pred(
                        g.item(),
                        self.value(*pred),
                        target,
                        *reduction,
                        *clamp_eps,
                    );
                    self.acc(*pred, d);
                }
            }
        }
    }

    /// Add every bound parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for &(pid, nid) in &self.bound {
            if let Some(g) = self.grad(nid) {
                store.grad_mut(pid).add_assign(g);
            }
        }
    }
}
