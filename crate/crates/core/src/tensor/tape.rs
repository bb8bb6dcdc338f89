//! Append-only computation tape for reverse-mode differentiation.
//!
//! Nodes are recorded in execution order, so walking the tape backwards is a
//! valid topological order for the gradient sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{gemm, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// A user-supplied elementwise function with its derivative.
///
/// `derivative` receives both the input `x` and the forward output `y`.
pub trait ElementwiseFn<T>: Send + Sync {
    fn forward(&self, x: T) -> T;
    fn derivative(&self, x: T, y: T) -> T;
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    Relu(NodeId),
    Tanh(NodeId),
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Reshape(NodeId),
    Mse { pred: NodeId, target: NodeId },
    SumSquares { input: NodeId, coeff: T },
    Sum(NodeId),
    Elementwise { input: NodeId, f: Arc<dyn ElementwiseFn<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// A leaf that never receives a gradient (data, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let mut value = store.get(id).clone();
        value.clear_grad();
        let node = self.push(value, Op::Leaf, true);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (out, cols, geom) =
            kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias))?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
                geom,
            },
            rg,
        ))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = kernels::fully_connected(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = kernels::activation(self.value(input), kernels::Activation::Relu);
        let rg = self.needs(&[input]);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let out = kernels::activation(self.value(input), kernels::Activation::Tanh);
        let rg = self.needs(&[input]);
        self.push(out, Op::Tanh(input), rg)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Elementwise sum of two equally shaped nodes (the residual shortcut).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::residual_add(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let loss = kernels::mse_loss(self.value(pred), self.value(target))?;
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg))
    }

    /// `coeff · Σ x²`, used for L2 penalties on kernels.
    pub fn sum_squares(&mut self, input: NodeId, coeff: T) -> NodeId {
        let s = self
            .value(input)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v);
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(coeff * s), Op::SumSquares { input, coeff }, rg)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn elementwise(&mut self, input: NodeId, f: Arc<dyn ElementwiseFn<T>>) -> NodeId {
        let out = self.value(input).map(|v| f.forward(v));
        let rg = self.needs(&[input]);
        self.push(out, Op::Elementwise { input, f }, rg)
    }

    /// Smallest `|x|` fed into any ReLU so far, `None` without ReLUs. Finite
    /// differences are only meaningful away from the kink at 0.
    pub fn relu_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(i) => self.nodes[i.0].value.data().iter().map(|v| v.abs()).reduce(T::min),
                _ => None,
            })
            .reduce(T::min)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    cols,
                    geom,
                } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let cg = kernels::conv2d_backward(
                        geom,
                        cols,
                        self.value(*kernel).data(),
                        &g,
                        need_input,
                    );
                    if let Some(gi) = cg.input {
                        self.accumulate(&mut grads, *input, &gi);
                    }
                    self.accumulate(&mut grads, *kernel, &cg.kernel);
                    self.accumulate(&mut grads, *bias, &cg.bias);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (b, din) = (x.shape()[0], x.shape()[1]);
                    let dout = w.shape()[0];
                    if self.nodes[input.0].requires_grad {
                        let mut gx = vec![T::zero(); b * din];
                        gemm(b, dout, din, &g, false, w.data(), false, &mut gx, false);
                        self.accumulate(&mut grads, *input, &gx);
                    }
                    if self.nodes[weight.0].requires_grad {
                        let mut gw = vec![T::zero(); dout * din];
                        gemm(dout, b, din, &g, true, x.data(), false, &mut gw, false);
                        self.accumulate(&mut grads, *weight, &gw);
                    }
                    if self.nodes[bias.0].requires_grad {
                        let mut gb = vec![T::zero(); dout];
                        for row in g.chunks(dout) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc = *acc + v;
                            }
                        }
                        self.accumulate(&mut grads, *bias, &gb);
                    }
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let gi: Vec<T> = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *input, &gi);
                }
                Op::Tanh(input) => {
                    let y = node.value.data();
                    let gi: Vec<T> = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect();
                    self.accumulate(&mut grads, *input, &gi);
                }
                Op::Concat { a, b } => {
                    let sa = self.value(*a).shape();
                    let sb = self.value(*b).shape();
                    let hw = sa[2] * sa[3];
                    let (ca, cb) = (sa[1] * hw, sb[1] * hw);
                    let mut ga = Vec::with_capacity(sa[0] * ca);
                    let mut gb = Vec::with_capacity(sa[0] * cb);
                    for chunk in g.chunks(ca + cb) {
                        ga.extend_from_slice(&chunk[..ca]);
                        gb.extend_from_slice(&chunk[ca..]);
                    }
                    self.accumulate(&mut grads, *a, &ga);
                    self.accumulate(&mut grads, *b, &gb);
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::Reshape(input) => {
                    self.accumulate(&mut grads, *input, &g);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred).data();
                    let t = self.value(*target).data();
                    let scale = T::from_f64(2.0) * g[0] / T::from_f64(p.len() as f64);
                    let gp: Vec<T> = p.iter().zip(t).map(|(&pv, &tv)| scale * (pv - tv)).collect();
                    if self.nodes[target.0].requires_grad {
                        let gt: Vec<T> = gp.iter().map(|&v| -v).collect();
                        self.accumulate(&mut grads, *target, &gt);
                    }
                    self.accumulate(&mut grads, *pred, &gp);
                }
                Op::SumSquares { input, coeff } => {
                    let scale = T::from_f64(2.0) * *coeff * g[0];
                    let gi: Vec<T> = self.value(*input).data().iter().map(|&v| scale * v).collect();
                    self.accumulate(&mut grads, *input, &gi);
                }
                Op::Sum(input) => {
                    let gi = vec![g[0]; self.value(*input).len()];
                    self.accumulate(&mut grads, *input, &gi);
                }
                Op::Elementwise { input, f } => {
                    let x = self.value(*input).data();
                    let y = node.value.data();
                    let gi: Vec<T> = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&gv, (&xv, &yv))| gv * f.derivative(xv, yv))
                        .collect();
                    self.accumulate(&mut grads, *input, &gi);
                }
            }
        }

        Ok(Gradients {
            grads,
            params: self
                .param_nodes
                .iter()
                .map(|(&pid, &node)| (pid, node))
                .collect(),
        })
    }

    /// Runs [`Tape::backward`] and adds each parameter's gradient into its
    /// grad slot. Every parameter in `store` ends up with an allocated slot.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for id in store.ids().collect::<Vec<_>>() {
            let slot = store.get_mut(id).grad_mut();
            if let Some(g) = grads.param(id) {
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s = *s + v;
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: &[T]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a = *a + v;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf node; `None` if the loss does not depend on it.
    pub fn get(&self, node: NodeId) -> Option<&[T]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, node)| self.get(*node))
    }
}
