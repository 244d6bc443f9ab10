//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every node's value is computed when the node is appended. `backward`
//! expresses each vector-Jacobian product with the same graph operations,
//! so gradients are themselves graph nodes: with `create_graph = true` they
//! can be differentiated again (the meta-learning outer loop relies on it).
//!
//! Accumulation order is fixed: nodes are visited in reverse creation order
//! and each node's inputs are processed left to right.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{col2im_batch, im2col_batch, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Log,
    Sqrt,
    MatMul,
    BatchMatMul,
    SumTo,
    BroadcastTo,
    Reshape,
    Permute(Vec<usize>),
    Im2col(ConvGeometry),
    Col2im(ConvGeometry),
    /// `out[i] = x[idx[i]]`.
    Gather(Arc<[usize]>),
    /// `out = 0; out[idx[i]] += x[i]`.
    ScatterAdd(Arc<[usize]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::MatMul => "matmul",
            Op::BatchMatMul => "batch_matmul",
            Op::SumTo => "sum_to",
            Op::BroadcastTo => "broadcast_to",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Im2col(_) => "im2col",
            Op::Col2im(_) => "col2im",
            Op::Gather(_) => "gather",
            Op::ScatterAdd(_) => "scatter_add",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient node for every node reached by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<NodeId>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.grads.get(id.0).copied().flatten()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    /// Ids of all trainable leaves, in creation order.
    pub fn trainable_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].trainable).map(NodeId).collect()
    }

    /// Value of the gradient recorded for `id`, if any.
    pub fn grad_value<'a>(&'a self, grads: &Gradients, id: NodeId) -> Option<&'a Tensor> {
        grads.get(id).map(|g| self.value(g))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Contract(format!(
                "operation {} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad, trainable: false });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: trainable,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// A trainable leaf; backward populates its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.v(a).add(self.v(b))?;
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.v(a).sub(self.v(b))?;
        self.push(Op::Sub, vec![a, b], v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.v(a).mul(self.v(b))?;
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.v(a).div(self.v(b))?;
        self.push(Op::Div, vec![a, b], v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.v(a).map(|x| -x);
        self.push(Op::Neg, vec![a], v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.v(a).scale(s);
        self.push(Op::Scale(s), vec![a], v)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.v(a).map(|x| x + s);
        self.push(Op::AddScalar, vec![a], v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.v(a).map(f64::exp);
        self.push(Op::Exp, vec![a], v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.v(a).map(f64::ln);
        self.push(Op::Log, vec![a], v)
    }

    /// Square root; its derivative at an exact zero is taken as finite so
    /// that `sqrt(sum(x²))` has a zero gradient at `x = 0`.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.v(a).map(f64::sqrt);
        self.push(Op::Sqrt, vec![a], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.v(a).matmul(self.v(b))?;
        self.push(Op::MatMul, vec![a, b], v)
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.v(a).batch_matmul(self.v(b))?;
        self.push(Op::BatchMatMul, vec![a, b], v)
    }

    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.v(a).sum_to(shape)?;
        self.push(Op::SumTo, vec![a], v)
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.v(a).broadcast_to(shape)?;
        self.push(Op::BroadcastTo, vec![a], v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.v(a).reshape(shape)?;
        self.push(Op::Reshape, vec![a], v)
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = self.v(a).permute(axes)?;
        self.push(Op::Permute(axes.to_vec()), vec![a], v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 2 {
            return shape_err(format!("transpose of non-matrix shape {:?}", self.shape(a)));
        }
        self.permute(a, &[1, 0])
    }

    pub fn im2col(&mut self, x: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = im2col_batch(self.v(x), &geom)?;
        self.push(Op::Im2col(geom), vec![x], v)
    }

    pub fn col2im(&mut self, cols: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = col2im_batch(self.v(cols), &geom)?;
        self.push(Op::Col2im(geom), vec![cols], v)
    }

    /// `out[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: NodeId, idx: Arc<[usize]>, shape: &[usize]) -> Result<NodeId> {
        let src = self.v(x).data();
        if idx.iter().any(|&i| i >= src.len()) {
            return shape_err(format!("gather index out of range for shape {:?}", self.shape(x)));
        }
        let v = Tensor::new(shape.to_vec(), idx.iter().map(|&i| src[i]).collect())?;
        self.push(Op::Gather(idx), vec![x], v)
    }

    /// Zero tensor of `shape` with `x.flat[i]` added at flat position `idx[i]`.
    pub fn scatter_add(&mut self, x: NodeId, idx: Arc<[usize]>, shape: &[usize]) -> Result<NodeId> {
        let src = self.v(x).data();
        let n: usize = shape.iter().product();
        if idx.len() != src.len() || idx.iter().any(|&i| i >= n) {
            return shape_err(format!("scatter_add indices do not fit shape {shape:?}"));
        }
        let mut out = vec![0.0; n];
        for (&i, &s) in idx.iter().zip(src) {
            out[i] += s;
        }
        let v = Tensor::new(shape.to_vec(), out)?;
        self.push(Op::ScatterAdd(idx), vec![x], v)
    }

    // ---- composites built from the primitives above ----

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.v(a).len();
        let flat = self.reshape(a, &[n])?;
        self.sum_to(flat, &[1])
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.v(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis_keep(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let mut shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("axis {axis} out of range for {shape:?}"));
        }
        shape[axis] = 1;
        self.sum_to(a, &shape)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    /// `max(x, 0)`: multiplication by a constant 0/1 mask.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let mask = self.v(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// `|x|` with subgradient 0 at exact zeros.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let sign = self.v(a).map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
        let s = self.constant(sign);
        self.mul(a, s)
    }

    /// Euclidean norm along `axis` (kept with size 1).
    pub fn norm_axis_keep(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sq = self.square(a)?;
        let s = self.sum_axis_keep(sq, axis)?;
        self.sqrt(s)
    }

    /// Row-wise log-softmax of a 2-D tensor, stabilized by subtracting the
    /// row maximum (held constant; the result does not depend on it).
    pub fn log_softmax_rows(&mut self, logits: NodeId) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return shape_err(format!("log_softmax_rows expects a matrix, got {shape:?}"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let v = self.v(logits);
        let maxes: Vec<f64> = (0..rows)
            .map(|r| v.data()[r * cols..(r + 1) * cols].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let m = self.constant(Tensor::new(vec![rows, 1], maxes)?);
        let shifted = self.sub(logits, m)?;
        let e = self.exp(shifted)?;
        let s = self.sum_axis_keep(e, 1)?;
        let lse = self.log(s)?;
        self.sub(shifted, lse)
    }

    pub fn softmax_rows(&mut self, logits: NodeId) -> Result<NodeId> {
        let ls = self.log_softmax_rows(logits)?;
        self.exp(ls)
    }

    // ---- reverse mode ----

    /// Reverse-mode pass from a one-element `loss`.
    ///
    /// With `create_graph = false` the gradient nodes are recorded as
    /// constants; with `true` they stay differentiable.
    pub fn backward(&mut self, loss: NodeId, create_graph: bool) -> Result<Gradients> {
        if self.v(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let saved = self.grad_enabled;
        self.grad_enabled = create_graph && saved;
        let result = self.backward_inner(loss);
        self.grad_enabled = saved;
        result
    }

    fn backward_inner(&mut self, loss: NodeId) -> Result<Gradients> {
        let mut grads: Vec<Option<NodeId>> = vec![None; loss.0 + 1];
        let seed = self.constant(Tensor::ones(self.shape(loss)));
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let contributions = self.vjp(NodeId(i), g)?;
            for (input, contrib) in inputs.into_iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                grads[input.0] = Some(match grads[input.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&mut self, id: NodeId, g: NodeId) -> Result<Vec<Option<NodeId>>> {
        let op = self.nodes[id.0].op.clone();
        let inputs = self.nodes[id.0].inputs.clone();
        let needs: Vec<bool> = inputs.iter().map(|&i| self.nodes[i.0].requires_grad).collect();
        let shape = |s: &Self, i: NodeId| s.shape(i).to_vec();
        let mut out = vec![None; inputs.len()];
        match op {
            Op::Leaf => {}
            Op::Add | Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs[0] {
                    out[0] = Some(self.sum_to(g, &shape(self, a))?);
                }
                if needs[1] {
                    let gb = if matches!(op, Op::Sub) { self.neg(g)? } else { g };
                    out[1] = Some(self.sum_to(gb, &shape(self, b))?);
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs[0] {
                    let t = self.mul(g, b)?;
                    out[0] = Some(self.sum_to(t, &shape(self, a))?);
                }
                if needs[1] {
                    let t = self.mul(g, a)?;
                    out[1] = Some(self.sum_to(t, &shape(self, b))?);
                }
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs[0] {
                    let t = self.div(g, b)?;
                    out[0] = Some(self.sum_to(t, &shape(self, a))?);
                }
                if needs[1] {
                    // d(a/b)/db = -(a/b)/b
                    let t = self.mul(g, id)?;
                    let t = self.div(t, b)?;
                    let t = self.neg(t)?;
                    out[1] = Some(self.sum_to(t, &shape(self, b))?);
                }
            }
            Op::Neg => out[0] = Some(self.neg(g)?),
            Op::Scale(s) => out[0] = Some(self.scale(g, s)?),
            Op::AddScalar => out[0] = Some(g),
            Op::Exp => out[0] = Some(self.mul(g, id)?),
            Op::Log => out[0] = Some(self.div(g, inputs[0])?),
            Op::Sqrt => {
                let half = self.scale(g, 0.5)?;
                let y = self.v(id);
                let denom = if y.data().iter().any(|&v| v == 0.0) {
                    let z = y.map(|v| if v == 0.0 { 1.0 } else { 0.0 });
                    let z = self.constant(z);
                    self.add(id, z)?
                } else {
                    id
                };
                out[0] = Some(self.div(half, denom)?);
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs[0] {
                    let bt = self.transpose(b)?;
                    out[0] = Some(self.matmul(g, bt)?);
                }
                if needs[1] {
                    let at = self.transpose(a)?;
                    out[1] = Some(self.matmul(at, g)?);
                }
            }
            Op::BatchMatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs[0] {
                    let bt = self.permute(b, &[0, 2, 1])?;
                    out[0] = Some(self.batch_matmul(g, bt)?);
                }
                if needs[1] {
                    let at = self.permute(a, &[0, 2, 1])?;
                    out[1] = Some(self.batch_matmul(at, g)?);
                }
            }
            Op::SumTo => out[0] = Some(self.broadcast_to(g, &shape(self, inputs[0]))?),
            Op::BroadcastTo => out[0] = Some(self.sum_to(g, &shape(self, inputs[0]))?),
            Op::Reshape => out[0] = Some(self.reshape(g, &shape(self, inputs[0]))?),
            Op::Permute(axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                out[0] = Some(self.permute(g, &inv)?);
            }
            Op::Im2col(geom) => {
                let t = self.col2im(g, geom)?;
                out[0] = Some(self.reshape(t, &shape(self, inputs[0]))?);
            }
            Op::Col2im(geom) => out[0] = Some(self.im2col(g, geom)?),
            Op::Gather(idx) => {
                out[0] = Some(self.scatter_add(g, idx, &shape(self, inputs[0]))?);
            }
            Op::ScatterAdd(idx) => {
                out[0] = Some(self.gather(g, idx, &shape(self, inputs[0]))?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let l = g.sum_all(w).unwrap();
        let grads = g.backward(l, false).unwrap();
        assert_eq!(g.grad_value(&grads, w).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn half_square_gives_identity_map() {
        let mut g = Graph::new();
        let wt = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let w = g.param(wt.clone());
        let sq = g.square(w).unwrap();
        let s = g.sum_all(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l, false).unwrap();
        assert_eq!(g.grad_value(&grads, w).unwrap(), &wt);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w, false), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let w = g.param(Tensor::from_vec(vec![3.0, 4.0]));
        let p = g.mul(c, w).unwrap();
        let l = g.sum_all(p).unwrap();
        let grads = g.backward(l, false).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(g.grad_value(&grads, w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn second_order_through_create_graph() {
        // f(w) = w³, f'(w) = 3w², f''(w) = 6w
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(2.0));
        let w2 = g.mul(w, w).unwrap();
        let w3 = g.mul(w2, w).unwrap();
        let grads = g.backward(w3, true).unwrap();
        let d1 = grads.get(w).unwrap();
        assert_eq!(g.value(d1).data(), &[12.0]);
        let grads2 = g.backward(d1, false).unwrap();
        assert_eq!(g.grad_value(&grads2, w).unwrap().data(), &[12.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        assert!(g.log(z).is_err());
    }

    #[test]
    fn log_softmax_is_stable() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let ls = g.log_softmax_rows(l).unwrap();
        assert!(g.value(ls).data()[0].abs() < 1e-12);
    }
}
