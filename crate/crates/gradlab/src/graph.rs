//! Append-only computation graphs over [`Tensor`]s with reverse-mode
//! differentiation.
//!
//! `grad` does not maintain a separate tape: it appends new nodes built from
//! the same primitive set, so a gradient is itself a differentiable graph and
//! `grad(grad(f))` is just two calls. That property is what lets an attack
//! objective — a function of a model's parameter gradients — be minimized by
//! gradient descent on the input.
//!
//! Graphs are append-only and node inputs always have smaller ids, so id
//! order is a topological order. Evaluation is pure; a built graph can be
//! shared across threads.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Primitive operations. Every `grad` rule emits only these, which keeps the
/// set closed under differentiation.
#[derive(Debug, Clone)]
pub enum Op {
    /// Placeholder bound to a tensor at evaluation time.
    Leaf,
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    /// 1 where input > 0 (ReLU derivative; subgradient at 0 is 0).
    PosMask(NodeId),
    /// 1 where inputs are exactly equal.
    EqMask(NodeId, NodeId),
    /// Identity value, but gradients do not flow through.
    Detach(NodeId),
    Broadcast(NodeId, Vec<usize>),
    /// Sum over axes, keeping reduced axes as size 1.
    SumAxes(NodeId, Vec<usize>),
    /// Max over axes, keeping reduced axes as size 1.
    MaxAxes(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    /// Zero padding, (before, after) per axis.
    Pad(NodeId, Vec<(usize, usize)>),
    /// (start, end) per axis, end exclusive.
    Slice(NodeId, Vec<(usize, usize)>),
    MatMul(NodeId, NodeId),
    Transpose2(NodeId),
    Conv2d { x: NodeId, k: NodeId, stride: usize, pad: usize },
    /// VJP of Conv2d w.r.t. its input; `hw` is the original input size.
    ConvInputGrad { g: NodeId, k: NodeId, stride: usize, pad: usize, hw: (usize, usize) },
    /// VJP of Conv2d w.r.t. its kernel; `khw` is the kernel size.
    ConvKernelGrad { g: NodeId, x: NodeId, stride: usize, pad: usize, khw: (usize, usize) },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Precomputed evaluation schedule for repeated evals of the same targets.
#[derive(Debug, Clone)]
pub struct Plan {
    order: Vec<usize>,
    /// free_after[i] = node ids whose value can be dropped once order[i] ran.
    free_after: Vec<Vec<usize>>,
    targets: Vec<usize>,
    max_id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // -- constructors -------------------------------------------------------

    pub fn leaf(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Leaf, shape.to_vec())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Div(a, b), shape))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Neg(a), shape)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sqrt(a), shape)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Square(a), shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a), shape)
    }

    pub fn pos_mask(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::PosMask(a), shape)
    }

    pub fn eq_mask(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("eq_mask", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::EqMask(a, b), shape))
    }

    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Detach(a), shape)
    }

    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !ops::broadcast_compatible(self.shape(a), shape) {
            return Err(Error::Shape {
                op: "broadcast",
                detail: format!("{:?} -> {:?}", self.shape(a), shape),
            });
        }
        Ok(self.push(Op::Broadcast(a, shape.to_vec()), shape.to_vec()))
    }

    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let mut shape = self.shape(a).to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::Shape { op: "sum_axes", detail: format!("axis {}", ax) });
            }
            shape[ax] = 1;
        }
        Ok(self.push(Op::SumAxes(a, axes.to_vec()), shape))
    }

    pub fn max_axes(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let mut shape = self.shape(a).to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::Shape { op: "max_axes", detail: format!("axis {}", ax) });
            }
            shape[ax] = 1;
        }
        Ok(self.push(Op::MaxAxes(a, axes.to_vec()), shape))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.shape(a).iter().product::<usize>() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(a), shape),
            });
        }
        Ok(self.push(Op::Reshape(a, shape.to_vec()), shape.to_vec()))
    }

    pub fn pad(&mut self, a: NodeId, pads: &[(usize, usize)]) -> Result<NodeId> {
        if pads.len() != self.shape(a).len() {
            return Err(Error::Shape { op: "pad", detail: "rank mismatch".into() });
        }
        let shape: Vec<usize> = self
            .shape(a)
            .iter()
            .zip(pads)
            .map(|(&s, &(lo, hi))| s + lo + hi)
            .collect();
        Ok(self.push(Op::Pad(a, pads.to_vec()), shape))
    }

    pub fn slice(&mut self, a: NodeId, ranges: &[(usize, usize)]) -> Result<NodeId> {
        if ranges.len() != self.shape(a).len() {
            return Err(Error::Shape { op: "slice", detail: "rank mismatch".into() });
        }
        for (d, &(lo, hi)) in ranges.iter().enumerate() {
            if lo > hi || hi > self.shape(a)[d] {
                return Err(Error::Shape {
                    op: "slice",
                    detail: format!("range {:?} on axis {}", (lo, hi), d),
                });
            }
        }
        let shape: Vec<usize> = ranges.iter().map(|&(lo, hi)| hi - lo).collect();
        Ok(self.push(Op::Slice(a, ranges.to_vec()), shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", detail: format!("{:?} x {:?}", sa, sb) });
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn transpose2(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape { op: "transpose", detail: format!("rank {}", sa.len()) });
        }
        let shape = vec![sa[1], sa[0]];
        Ok(self.push(Op::Transpose2(a), shape))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::Shape { op: "conv2d", detail: format!("{:?} * {:?}", sx, sk) });
        }
        let (oh, ow) = ops::conv2d_out_hw(sx[2], sx[3], sk[2], sk[3], stride, pad)?;
        let shape = vec![sx[0], sk[0], oh, ow];
        Ok(self.push(Op::Conv2d { x, k, stride, pad }, shape))
    }

    fn conv_input_grad(&mut self, g: NodeId, k: NodeId, stride: usize, pad: usize, hw: (usize, usize)) -> NodeId {
        let b = self.shape(g)[0];
        let ci = self.shape(k)[1];
        let shape = vec![b, ci, hw.0, hw.1];
        self.push(Op::ConvInputGrad { g, k, stride, pad, hw }, shape)
    }

    fn conv_kernel_grad(&mut self, g: NodeId, x: NodeId, stride: usize, pad: usize, khw: (usize, usize)) -> NodeId {
        let co = self.shape(g)[1];
        let ci = self.shape(x)[1];
        let shape = vec![co, ci, khw.0, khw.1];
        self.push(Op::ConvKernelGrad { g, x, stride, pad, khw }, shape)
    }

    // -- convenience builders ------------------------------------------------

    /// Constant `value` broadcast to `shape`.
    pub fn splat(&mut self, value: f64, shape: &[usize]) -> NodeId {
        let s = self.scalar(value);
        self.broadcast(s, shape).expect("scalar broadcasts anywhere")
    }

    pub fn mul_scalar(&mut self, a: NodeId, value: f64) -> NodeId {
        let s = self.splat(value, &self.shape(a).to_vec());
        self.mul(a, s).expect("same shape")
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> NodeId {
        let s = self.splat(value, &self.shape(a).to_vec());
        self.add(a, s).expect("same shape")
    }

    pub fn mean_axes(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let reduced: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.mul_scalar(s, 1.0 / reduced as f64))
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let rank = self.shape(a).len();
        if rank == 0 {
            return a;
        }
        let axes: Vec<usize> = (0..rank).collect();
        let s = self.sum_axes(a, &axes).expect("axes in range");
        self.reshape(s, &[]).expect("single element")
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        Ok(self.sum_all(p))
    }

    // -- evaluation ----------------------------------------------------------

    /// Builds an evaluation schedule for `targets`: the reachable nodes in
    /// topological (id) order plus buffer-drop points.
    pub fn plan(&self, targets: &[NodeId]) -> Plan {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = targets.iter().map(|t| t.0).collect();
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            for inp in op_inputs(&self.nodes[id].op) {
                if !needed[inp] {
                    stack.push(inp);
                }
            }
        }
        let order: Vec<usize> = (0..self.nodes.len()).filter(|&i| needed[i]).collect();
        // Last consumer per node; targets are pinned for the whole eval.
        let mut last_use = vec![0usize; self.nodes.len()];
        for &id in &order {
            for inp in op_inputs(&self.nodes[id].op) {
                last_use[inp] = id;
            }
        }
        for t in targets {
            last_use[t.0] = usize::MAX;
        }
        let mut free_after = vec![Vec::new(); order.len()];
        let pos: HashMap<usize, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        for &id in &order {
            let lu = last_use[id];
            if lu != usize::MAX {
                if let Some(&i) = pos.get(&lu) {
                    free_after[i].push(id);
                }
            }
        }
        Plan {
            order,
            free_after,
            targets: targets.iter().map(|t| t.0).collect(),
            max_id: self.nodes.len(),
        }
    }

    /// Evaluates `targets` with the given leaf bindings. Deterministic and
    /// pure: repeated calls with the same inputs are bitwise identical.
    pub fn eval(&self, bindings: &[(NodeId, &Tensor)], targets: &[NodeId]) -> Result<Vec<Tensor>> {
        let plan = self.plan(targets);
        self.eval_plan(&plan, bindings)
    }

    pub fn eval_plan(&self, plan: &Plan, bindings: &[(NodeId, &Tensor)]) -> Result<Vec<Tensor>> {
        assert_eq!(plan.max_id, self.nodes.len(), "plan built for a different graph state");
        let mut bound: Vec<Option<&Tensor>> = vec![None; self.nodes.len()];
        for (id, value) in bindings {
            if !self.is_leaf(*id) {
                return Err(Error::Precondition(format!("binding non-leaf node {}", id.0)));
            }
            if value.shape() != self.shape(*id) {
                return Err(Error::Shape {
                    op: "bind",
                    detail: format!("leaf {} wants {:?}, got {:?}", id.0, self.shape(*id), value.shape()),
                });
            }
            bound[id.0] = Some(value);
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (step, &id) in plan.order.iter().enumerate() {
            let value = self.eval_node(id, &bound, &values)?;
            if !value.all_finite() {
                return Err(Error::NonFinite { op: op_name(&self.nodes[id].op), node: id });
            }
            values[id] = Some(value);
            for &drop_id in &plan.free_after[step] {
                values[drop_id] = None;
            }
        }
        plan.targets
            .iter()
            .map(|&t| values[t].clone().ok_or(Error::Unreachable(t)))
            .collect()
    }

    fn eval_node(&self, id: usize, bound: &[Option<&Tensor>], values: &[Option<Tensor>]) -> Result<Tensor> {
        let get = |n: NodeId| -> &Tensor {
            values[n.0].as_ref().expect("topological order guarantees inputs are present")
        };
        match &self.nodes[id].op {
            Op::Leaf => bound[id]
                .map(|t| t.clone())
                .ok_or(Error::UnboundLeaf(id)),
            Op::Const(t) => Ok(t.clone()),
            Op::Add(a, b) => ops::add(get(*a), get(*b)),
            Op::Sub(a, b) => ops::sub(get(*a), get(*b)),
            Op::Mul(a, b) => ops::mul(get(*a), get(*b)),
            Op::Div(a, b) => ops::div(get(*a), get(*b)),
            Op::Neg(a) => Ok(ops::neg(get(*a))),
            Op::Sqrt(a) => Ok(ops::sqrt(get(*a))),
            Op::Square(a) => Ok(ops::square(get(*a))),
            Op::Log(a) => Ok(ops::log(get(*a))),
            Op::Exp(a) => Ok(ops::exp(get(*a))),
            Op::Relu(a) => Ok(ops::relu(get(*a))),
            Op::PosMask(a) => Ok(ops::pos_mask(get(*a))),
            Op::EqMask(a, b) => ops::eq_mask(get(*a), get(*b)),
            Op::Detach(a) => Ok(get(*a).clone()),
            Op::Broadcast(a, shape) => ops::broadcast(get(*a), shape),
            Op::SumAxes(a, axes) => ops::sum_axes(get(*a), axes),
            Op::MaxAxes(a, axes) => ops::max_axes(get(*a), axes),
            Op::Reshape(a, shape) => get(*a).clone().reshaped(shape),
            Op::Pad(a, pads) => ops::pad(get(*a), pads),
            Op::Slice(a, ranges) => ops::slice(get(*a), ranges),
            Op::MatMul(a, b) => ops::matmul(get(*a), get(*b)),
            Op::Transpose2(a) => ops::transpose2(get(*a)),
            Op::Conv2d { x, k, stride, pad } => ops::conv2d(get(*x), get(*k), *stride, *pad),
            Op::ConvInputGrad { g, k, stride, pad, hw } => {
                ops::conv2d_input_grad(get(*g), get(*k), *stride, *pad, hw.0, hw.1)
            }
            Op::ConvKernelGrad { g, x, stride, pad, khw } => {
                ops::conv2d_kernel_grad(get(*g), get(*x), *stride, *pad, khw.0, khw.1)
            }
        }
    }

    // -- differentiation -----------------------------------------------------

    /// Appends nodes computing `d output / d wrt_i` and returns their ids.
    ///
    /// `output` must be scalar (rank 0). The returned nodes are ordinary
    /// graph nodes, so they can be evaluated together with anything else or
    /// differentiated again.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.shape(output).is_empty() {
            return Err(Error::NonScalarOutput(self.shape(output).to_vec()));
        }
        // Adjoint per node, populated from output downwards. Ids appended
        // during the sweep are all greater than `output`, so the descending
        // sweep never revisits them.
        let mut adjoint: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        let seed = self.scalar(1.0);
        adjoint[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(g) = adjoint[id] else { continue };
            let op = self.nodes[id].op.clone();
            self.emit_vjps(NodeId(id), &op, g, &mut adjoint)?;
        }
        wrt.iter()
            .map(|w| adjoint.get(w.0).copied().flatten().ok_or(Error::Unreachable(w.0)))
            .collect()
    }

    fn accumulate(&mut self, adjoint: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) -> Result<()> {
        adjoint[target.0] = Some(match adjoint[target.0] {
            None => contrib,
            Some(existing) => self.add(existing, contrib)?,
        });
        Ok(())
    }

    /// Reduces `g` (shaped like the broadcast result) back to `shape`.
    fn sum_to(&mut self, g: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(g) == shape {
            return Ok(g);
        }
        let gs = self.shape(g).to_vec();
        let offset = gs.len() - shape.len();
        let mut axes = Vec::new();
        for d in 0..gs.len() {
            let src = if d < offset { 1 } else { shape[d - offset] };
            if src == 1 && gs[d] != 1 {
                axes.push(d);
            } else if d < offset {
                axes.push(d); // size-1 leading axis still needs dropping via reshape
            }
        }
        let summed = if axes.is_empty() { g } else { self.sum_axes(g, &axes)? };
        self.reshape(summed, shape)
    }

    fn emit_vjps(&mut self, node: NodeId, op: &Op, g: NodeId, adjoint: &mut [Option<NodeId>]) -> Result<()> {
        match op {
            Op::Leaf | Op::Const(_) => {}
            // Mask values are piecewise constant; no gradient flows.
            Op::PosMask(_) | Op::EqMask(_, _) | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.accumulate(adjoint, *a, g)?;
                self.accumulate(adjoint, *b, g)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adjoint, *a, g)?;
                let ng = self.neg(g);
                self.accumulate(adjoint, *b, ng)?;
            }
            Op::Mul(a, b) => {
                let da = self.mul(g, *b)?;
                self.accumulate(adjoint, *a, da)?;
                let db = self.mul(g, *a)?;
                self.accumulate(adjoint, *b, db)?;
            }
            Op::Div(a, b) => {
                let da = self.div(g, *b)?;
                self.accumulate(adjoint, *a, da)?;
                let ga = self.mul(g, *a)?;
                let b2 = self.square(*b);
                let frac = self.div(ga, b2)?;
                let db = self.neg(frac);
                self.accumulate(adjoint, *b, db)?;
            }
            Op::Neg(a) => {
                let da = self.neg(g);
                self.accumulate(adjoint, *a, da)?;
            }
            Op::Sqrt(a) => {
                // d sqrt(a) = g / (2 * sqrt(a)); reuse this node's value.
                let two_y = self.mul_scalar(node, 2.0);
                let da = self.div(g, two_y)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::Square(a) => {
                let two_a = self.mul_scalar(*a, 2.0);
                let da = self.mul(g, two_a)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::Log(a) => {
                let da = self.div(g, *a)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::Exp(a) => {
                let da = self.mul(g, node)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::Relu(a) => {
                let mask = self.pos_mask(*a);
                let da = self.mul(g, mask)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::Broadcast(a, _) => {
                let shape = self.shape(*a).to_vec();
                let da = self.sum_to(g, &shape)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::SumAxes(a, _) => {
                let shape = self.shape(*a).to_vec();
                let da = self.broadcast(g, &shape)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::MaxAxes(a, _) => {
                // Gradient routes to max positions; exact ties all receive it.
                let shape = self.shape(*a).to_vec();
                let gb = self.broadcast(g, &shape)?;
                let yb = self.broadcast(node, &shape)?;
                let mask = self.eq_mask(*a, yb)?;
                let da = self.mul(gb, mask)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::Reshape(a, _) => {
                let shape = self.shape(*a).to_vec();
                let da = self.reshape(g, &shape)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::Pad(a, pads) => {
                let ranges: Vec<(usize, usize)> = self
                    .shape(*a)
                    .iter()
                    .zip(pads)
                    .map(|(&s, &(lo, _))| (lo, lo + s))
                    .collect();
                let da = self.slice(g, &ranges)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::Slice(a, ranges) => {
                let pads: Vec<(usize, usize)> = self
                    .shape(*a)
                    .iter()
                    .zip(ranges)
                    .map(|(&s, &(lo, hi))| (lo, s - hi))
                    .collect();
                let da = self.pad(g, &pads)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::MatMul(a, b) => {
                let bt = self.transpose2(*b)?;
                let da = self.matmul(g, bt)?;
                self.accumulate(adjoint, *a, da)?;
                let at = self.transpose2(*a)?;
                let db = self.matmul(at, g)?;
                self.accumulate(adjoint, *b, db)?;
            }
            Op::Transpose2(a) => {
                let da = self.transpose2(g)?;
                self.accumulate(adjoint, *a, da)?;
            }
            Op::Conv2d { x, k, stride, pad } => {
                let hw = (self.shape(*x)[2], self.shape(*x)[3]);
                let khw = (self.shape(*k)[2], self.shape(*k)[3]);
                let dx = self.conv_input_grad(g, *k, *stride, *pad, hw);
                self.accumulate(adjoint, *x, dx)?;
                let dk = self.conv_kernel_grad(g, *x, *stride, *pad, khw);
                self.accumulate(adjoint, *k, dk)?;
            }
            Op::ConvInputGrad { g: g0, k, stride, pad, .. } => {
                // node = C^T_k(g0); upstream g is input-shaped.
                // d/d g0 <g, C^T_k(g0)> = C_k(g);  d/d k <C_k(g), g0> = kernel_grad(g0, g).
                let khw = (self.shape(*k)[2], self.shape(*k)[3]);
                let dg0 = self.conv2d(g, *k, *stride, *pad)?;
                self.accumulate(adjoint, *g0, dg0)?;
                let dk = self.conv_kernel_grad(*g0, g, *stride, *pad, khw);
                self.accumulate(adjoint, *k, dk)?;
            }
            Op::ConvKernelGrad { g: g0, x, stride, pad, .. } => {
                // node = K(g0, x); upstream g is kernel-shaped.
                // d/d g0 <g, K(g0,x)> = conv(x; g);  d/d x = input_grad(g0; g).
                let hw = (self.shape(*x)[2], self.shape(*x)[3]);
                let dg0 = self.conv2d(*x, g, *stride, *pad)?;
                self.accumulate(adjoint, *g0, dg0)?;
                let dx = self.conv_input_grad(*g0, g, *stride, *pad, hw);
                self.accumulate(adjoint, *x, dx)?;
            }
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Const(_) => vec![],
        Op::Neg(a)
        | Op::Sqrt(a)
        | Op::Square(a)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::Relu(a)
        | Op::PosMask(a)
        | Op::Detach(a)
        | Op::Broadcast(a, _)
        | Op::SumAxes(a, _)
        | Op::MaxAxes(a, _)
        | Op::Reshape(a, _)
        | Op::Pad(a, _)
        | Op::Slice(a, _)
        | Op::Transpose2(a) => vec![a.0],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::EqMask(a, b)
        | Op::MatMul(a, b) => vec![a.0, b.0],
        Op::Conv2d { x, k, .. } => vec![x.0, k.0],
        Op::ConvInputGrad { g, k, .. } => vec![g.0, k.0],
        Op::ConvKernelGrad { g, x, .. } => vec![g.0, x.0],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Const(_) => "const",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::Log(..) => "log",
        Op::Exp(..) => "exp",
        Op::Relu(..) => "relu",
        Op::PosMask(..) => "pos_mask",
        Op::EqMask(..) => "eq_mask",
        Op::Detach(..) => "detach",
        Op::Broadcast(..) => "broadcast",
        Op::SumAxes(..) => "sum_axes",
        Op::MaxAxes(..) => "max_axes",
        Op::Reshape(..) => "reshape",
        Op::Pad(..) => "pad",
        Op::Slice(..) => "slice",
        Op::MatMul(..) => "matmul",
        Op::Transpose2(..) => "transpose",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvInputGrad { .. } => "conv2d_input_grad",
        Op::ConvKernelGrad { .. } => "conv2d_kernel_grad",
    }
}

/// Central-difference gradient check.
///
/// Builds `d output / d leaf`, evaluates it at `point`, then perturbs each
/// coordinate of `point` by `step` in both directions. Returns the maximum
/// relative error, with the denominator floored at 1.
pub fn check_gradient(
    graph: &mut Graph,
    output: NodeId,
    leaf: NodeId,
    others: &[(NodeId, &Tensor)],
    point: &Tensor,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::precondition("check_gradient step must be > 0"));
    }
    let grad_id = graph.grad(output, &[leaf])?[0];
    let mut bindings: Vec<(NodeId, &Tensor)> = others.to_vec();
    bindings.push((leaf, point));
    let analytic = graph.eval(&bindings, &[grad_id])?.remove(0);

    let plan = graph.plan(&[output]);
    let mut max_rel = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let f_plus = eval_probe(graph, &plan, others, leaf, &probe)?;
        probe.data_mut()[i] = orig - step;
        let f_minus = eval_probe(graph, &plan, others, leaf, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (f_plus - f_minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (fd - a).abs() / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn eval_probe(graph: &Graph, plan: &Plan, others: &[(NodeId, &Tensor)], leaf: NodeId, point: &Tensor) -> Result<f64> {
    let mut bindings: Vec<(NodeId, &Tensor)> = others.to_vec();
    bindings.push((leaf, point));
    let out = graph.eval_plan(plan, &bindings)?;
    Ok(out[0].item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn eval_add() {
        let mut g = Graph::new();
        let a = g.leaf(&[2]);
        let b = g.leaf(&[2]);
        let c = g.add(a, b).unwrap();
        let av = t(&[2], &[1.0, 2.0]);
        let bv = t(&[2], &[3.0, 4.0]);
        let out = g.eval(&[(a, &av), (b, &bv)], &[c]).unwrap();
        assert_eq!(out[0].data(), &[4.0, 6.0]);
    }

    #[test]
    fn eval_elementwise_square() {
        let mut g = Graph::new();
        let a = g.leaf(&[2]);
        let c = g.mul(a, a).unwrap();
        let av = t(&[2], &[2.0, -3.0]);
        let out = g.eval(&[(a, &av)], &[c]).unwrap();
        assert_eq!(out[0].data(), &[4.0, 9.0]);
    }

    #[test]
    fn eval_identity_conv() {
        let mut g = Graph::new();
        let x = g.leaf(&[1, 1, 2, 2]);
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        let xv = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = g.eval(&[(x, &xv)], &[y]).unwrap();
        assert_eq!(out[0].data(), xv.data());
    }

    #[test]
    fn eval_unbound_leaf_errors() {
        let mut g = Graph::new();
        let a = g.leaf(&[2]);
        let c = g.neg(a);
        assert!(matches!(g.eval(&[], &[c]), Err(Error::UnboundLeaf(_))));
    }

    #[test]
    fn eval_nonfinite_errors() {
        let mut g = Graph::new();
        let a = g.leaf(&[1]);
        let b = g.leaf(&[1]);
        let c = g.div(a, b).unwrap();
        let av = t(&[1], &[1.0]);
        let bv = t(&[1], &[0.0]);
        assert!(matches!(g.eval(&[(a, &av), (b, &bv)], &[c]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(&[3]);
        let sq = g.square(x);
        let f = g.sum_all(sq);
        let dx = g.grad(f, &[x]).unwrap()[0];
        let xv = t(&[3], &[1.0, 2.0, 3.0]);
        let out = g.eval(&[(x, &xv)], &[dx]).unwrap();
        assert_eq!(out[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn second_order_grad() {
        // f = sum(x^2); h = sum(grad(f)^2) = sum(4x^2); grad(h) = 8x.
        let mut g = Graph::new();
        let x = g.leaf(&[2]);
        let sq = g.square(x);
        let f = g.sum_all(sq);
        let df = g.grad(f, &[x]).unwrap()[0];
        let df_sq = g.square(df);
        let h = g.sum_all(df_sq);
        let dh = g.grad(h, &[x]).unwrap()[0];
        let xv = t(&[2], &[1.0, 2.0]);
        let out = g.eval(&[(x, &xv)], &[dh]).unwrap();
        assert_eq!(out[0].data(), &[8.0, 16.0]);
    }

    #[test]
    fn grad_rejects_nonscalar_output() {
        let mut g = Graph::new();
        let x = g.leaf(&[2]);
        let y = g.neg(x);
        assert!(matches!(g.grad(y, &[x]), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn grad_unreachable_errors() {
        let mut g = Graph::new();
        let x = g.leaf(&[2]);
        let z = g.leaf(&[2]);
        let f = g.sum_all(x);
        assert!(matches!(g.grad(f, &[z]), Err(Error::Unreachable(_))));
    }

    /// A three-layer composition mixing conv, matmul, reductions, and
    /// nonlinearities; gradient must agree with central differences.
    #[test]
    fn grad_matches_finite_differences_on_composition() {
        let mut g = Graph::new();
        let x = g.leaf(&[1, 2, 4, 4]);
        let k = g.constant(Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 17 % 23) as f64) / 11.0 - 1.0));
        let c = g.conv2d(x, k, 1, 1).unwrap();
        let r = g.relu(c);
        let m = g.mean_axes(r, &[2, 3]).unwrap();
        let flat = g.reshape(m, &[1, 3]).unwrap();
        let w = g.constant(Tensor::from_fn(&[3, 2], |i| ((i * 5 % 7) as f64) / 3.0 - 1.0));
        let logits = g.matmul(flat, w).unwrap();
        let e = g.exp(logits);
        let s = g.sum_all(e);
        let l = g.log(s);
        let f = g.sum_all(l);
        let point = Tensor::from_fn(&[1, 2, 4, 4], |i| ((i * 13 % 29) as f64) / 14.0 - 1.0 + 0.017);
        let err = check_gradient(&mut g, f, x, &[], &point, 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {}", err);
    }

    #[test]
    fn check_gradient_linear_is_exact() {
        let mut g = Graph::new();
        let x = g.leaf(&[4]);
        let f = g.sum_all(x);
        let point = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        // Power-of-two step keeps every probe exactly representable.
        let err = check_gradient(&mut g, f, x, &[], &point, 2f64.powi(-13)).unwrap();
        assert!(err < 1e-12, "rel err {}", err);
    }

    #[test]
    fn check_gradient_relu_away_from_kink() {
        let mut g = Graph::new();
        let x = g.leaf(&[4]);
        let r = g.relu(x);
        let f = g.sum_all(r);
        let point = t(&[4], &[0.5, -0.75, 1.25, -2.0]);
        let err = check_gradient(&mut g, f, x, &[], &point, 1e-5).unwrap();
        assert!(err < 1e-8, "rel err {}", err);
    }

    #[test]
    fn gradient_is_linear_in_objective() {
        // grad(alpha f + beta h) == alpha grad f + beta grad h, exactly.
        let (alpha, beta) = (2.5, -1.25);
        let mut g = Graph::new();
        let x = g.leaf(&[3]);
        let sq = g.square(x);
        let f = g.sum_all(sq);
        let e = g.exp(x);
        let h = g.sum_all(e);
        let fa = g.mul_scalar(f, alpha);
        let hb = g.mul_scalar(h, beta);
        let combo = g.add(fa, hb).unwrap();
        let d_combo = g.grad(combo, &[x]).unwrap()[0];
        let d_f = g.grad(f, &[x]).unwrap()[0];
        let d_h = g.grad(h, &[x]).unwrap()[0];
        let xv = t(&[3], &[0.3, -1.1, 0.9]);
        let out = g.eval(&[(x, &xv)], &[d_combo, d_f, d_h]).unwrap();
        for i in 0..3 {
            let expect = alpha * out[1].data()[i] + beta * out[2].data()[i];
            assert!((out[0].data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_deterministic_and_pure() {
        let mut g = Graph::new();
        let x = g.leaf(&[2, 3]);
        let e = g.exp(x);
        let s = g.sqrt(e);
        let f = g.sum_all(s);
        let xv = Tensor::from_fn(&[2, 3], |i| (i as f64).sin());
        let xv_copy = xv.clone();
        let a = g.eval(&[(x, &xv)], &[f]).unwrap();
        let b = g.eval(&[(x, &xv)], &[f]).unwrap();
        assert_eq!(a[0].data(), b[0].data());
        assert_eq!(xv, xv_copy);
    }

    /// Hessian rows from grad(grad(f)) agree with central differences of the
    /// first-order gradient on a smooth composition.
    #[test]
    fn second_order_matches_finite_differences() {
        let n = 3;
        let mut g = Graph::new();
        let x = g.leaf(&[n]);
        let e = g.exp(x);
        let sq = g.square(x);
        let prod = g.mul(e, sq).unwrap();
        let f = g.sum_all(prod);
        let df = g.grad(f, &[x]).unwrap()[0];
        let point = t(&[n], &[0.4, -0.3, 0.8]);
        let step = 1e-5;
        for i in 0..n {
            let gi = g.slice(df, &[(i, i + 1)]).unwrap();
            let gi_scalar = g.reshape(gi, &[]).unwrap();
            let hrow_id = g.grad(gi_scalar, &[x]).unwrap()[0];
            let hrow = g.eval(&[(x, &point)], &[hrow_id]).unwrap().remove(0);
            for j in 0..n {
                let mut plus = point.clone();
                plus.data_mut()[j] += step;
                let mut minus = point.clone();
                minus.data_mut()[j] -= step;
                let gp = g.eval(&[(x, &plus)], &[df]).unwrap().remove(0);
                let gm = g.eval(&[(x, &minus)], &[df]).unwrap().remove(0);
                let fd = (gp.data()[i] - gm.data()[i]) / (2.0 * step);
                let a = hrow.data()[j];
                let rel = (fd - a).abs() / a.abs().max(1.0);
                assert!(rel < 1e-5, "H[{},{}] rel err {}", i, j, rel);
            }
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&[2]);
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap(); // f = x * detach(x); df/dx = detach(x)
        let f = g.sum_all(p);
        let dx = g.grad(f, &[x]).unwrap()[0];
        let xv = t(&[2], &[3.0, -4.0]);
        let out = g.eval(&[(x, &xv)], &[dx]).unwrap();
        assert_eq!(out[0].data(), &[3.0, -4.0]);
    }

    #[test]
    fn max_reduction_grad_routes_to_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(&[1, 3]);
        let m = g.max_axes(x, &[1]).unwrap();
        let f = g.sum_all(m);
        let dx = g.grad(f, &[x]).unwrap()[0];
        let xv = t(&[1, 3], &[1.0, 5.0, 2.0]);
        let out = g.eval(&[(x, &xv)], &[dx]).unwrap();
        assert_eq!(out[0].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcast_grad_sums_back() {
        let mut g = Graph::new();
        let v = g.leaf(&[1, 2, 1, 1]);
        let b = g.broadcast(v, &[2, 2, 2, 2]).unwrap();
        let w = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64));
        let p = g.mul(b, w).unwrap();
        let f = g.sum_all(p);
        let dv = g.grad(f, &[v]).unwrap()[0];
        let vv = t(&[1, 2, 1, 1], &[1.0, 1.0]);
        let out = g.eval(&[(v, &vv)], &[dv]).unwrap();
        // d f / d v_c = sum of w over that channel.
        let w0: f64 = (0..16).filter(|i| (i / 4) % 2 == 0).map(|i| i as f64).sum();
        let w1: f64 = (0..16).filter(|i| (i / 4) % 2 == 1).map(|i| i as f64).sum();
        assert_eq!(out[0].data(), &[w0, w1]);
    }
}
