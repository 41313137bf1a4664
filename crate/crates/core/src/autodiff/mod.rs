//! Define-by-run reverse-mode differentiation.
//!
//! Every operation executes immediately and appends a node to the [`Tape`],
//! so node order is a topological order. [`Tape::backward`] walks the nodes in
//! reverse, accumulating gradients. [`Tape::forward`] re-evaluates the recorded
//! graph with new input values.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::functional as f;
use crate::nn::functional::BatchStats;
use crate::tensor::{BinaryOp, Element, ReduceOp, ReducePlan, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

/// A trainable tensor. Binding it to a tape records which node carries it,
/// so gradients can be looked up afterwards without any ordering convention.
#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub value: Tensor<T>,
    bound: Cell<Option<Var>>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            value,
            bound: Cell::new(None),
        }
    }
}

impl<T: Element> PartialEq for Param<T> {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeafKind {
    Input,
    Param,
    Constant,
}

#[derive(Debug, Clone)]
enum Op<T: Element> {
    Leaf(LeafKind),
    Binary(BinaryOp),
    Matmul,
    Reduce(ReduceOp, Vec<usize>),
    Relu,
    Conv2d { stride: usize, pad: usize },
    BatchNormTrain { eps: f64 },
    BatchNormInfer { eps: f64, mean: Tensor<T>, var: Tensor<T> },
    MaxPool { k: usize, stride: usize, pad: usize },
    GlobalAvgPool,
    SoftmaxCrossEntropy { labels: Vec<usize> },
    ShortcutPad { out_channels: usize, stride: usize },
}

#[derive(Debug, Clone)]
enum Saved<T: Element> {
    None,
    Batch(BatchStats<T>),
    Argmax(Vec<usize>),
    Probs(Tensor<T>),
}

#[derive(Debug, Clone)]
struct Node<T: Element> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    saved: Saved<T>,
    requires_grad: bool,
}

/// Recorded computation graph. Single-threaded; build a fresh tape per step.
#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by node.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    tape: u64,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.id)
    }

    /// Gradient of a parameter; zeros when it was not bound on this tape.
    pub fn param(&self, p: &Param<T>) -> Tensor<T> {
        p.bound
            .get()
            .and_then(|v| self.get(v))
            .cloned()
            .unwrap_or_else(|| p.value.zeros_like())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn var(&self, id: usize) -> Var {
        Var { id, tape: self.id }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Graph(format!("variable {} does not belong to this tape", v.id)));
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push_leaf(&mut self, kind: LeafKind, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            inputs: Vec::new(),
            value,
            saved: Saved::None,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Graph input: must be rebound on every [`Tape::forward`] replay.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(LeafKind::Input, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(LeafKind::Constant, value, false)
    }

    /// Register a trainable parameter; binding the same parameter twice
    /// returns the same node.
    pub fn bind(&mut self, p: &Param<T>) -> Var {
        if let Some(v) = p.bound.get() {
            if v.tape == self.id {
                return v;
            }
        }
        let v = self.push_leaf(LeafKind::Param, p.value.clone(), true);
        p.bound.set(Some(v));
        v
    }

    fn record(&mut self, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let ids = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let (value, saved) = {
            let args: Vec<&Tensor<T>> = ids.iter().map(|&i| &self.nodes[i].value).collect();
            evaluate(&op, &args)?
        };
        let requires_grad = ids.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: ids,
            value,
            saved,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Binary(op), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Matmul, &[a, b])
    }

    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        self.record(Op::Reduce(op, axes.to_vec()), &[x])
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(ReduceOp::Sum, x, &axes)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(ReduceOp::Mean, x, &axes)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu, &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.record(Op::Conv2d { stride, pad }, &[x, w])
    }

    /// Training-mode batch norm; also returns the batch statistics so the
    /// caller can update its running averages.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let v = self.record(Op::BatchNormTrain { eps }, &[x, gamma, beta])?;
        match &self.nodes[v.id].saved {
            Saved::Batch(stats) => Ok((v, stats.clone())),
            _ => unreachable!("batchnorm saves its statistics"),
        }
    }

    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let op = Op::BatchNormInfer {
            eps,
            mean: running_mean.clone(),
            var: running_var.clone(),
        };
        self.record(op, &[x, gamma, beta])
    }

    pub fn maxpool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        self.record(Op::MaxPool { k, stride, pad }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.record(Op::GlobalAvgPool, &[x])
    }

    /// `x . w + bias`, with the bias broadcast along axis 1.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, bias)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.record(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn shortcut_pad(&mut self, x: Var, out_channels: usize, stride: usize) -> Result<Var> {
        self.record(Op::ShortcutPad { out_channels, stride }, &[x])
    }

    /// Re-evaluate every node with new values for the graph inputs.
    ///
    /// Every [`Tape::input`] leaf must be bound; parameters and constants keep
    /// their recorded values unless also bound.
    pub fn forward(&mut self, inputs: &HashMap<Var, Tensor<T>>) -> Result<()> {
        let mut bound = HashMap::with_capacity(inputs.len());
        for (v, t) in inputs {
            let id = self.check(*v)?;
            if !matches!(self.nodes[id].op, Op::Leaf(_)) {
                return Err(Error::Graph(format!("node {id} is not a leaf")));
            }
            if t.shape() != self.nodes[id].value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    lhs: self.nodes[id].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            bound.insert(id, t);
        }
        for id in 0..self.nodes.len() {
            if let Op::Leaf(kind) = self.nodes[id].op {
                match bound.get(&id) {
                    Some(t) => self.nodes[id].value = (*t).clone(),
                    None if kind == LeafKind::Input => {
                        return Err(Error::Graph(format!("input node {id} is unbound")));
                    }
                    None => {}
                }
                continue;
            }
            let (value, saved) = {
                let node = &self.nodes[id];
                let args: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                evaluate(&node.op, &args)?
            };
            let node = &mut self.nodes[id];
            node.value = value;
            node.saved = saved;
        }
        Ok(())
    }

    /// Reverse pass from a one-element `loss`. Every node that requires a
    /// gradient and is a leaf gets an entry, zero when it does not reach the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_id = self.check(loss)?;
        if self.nodes[loss_id].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss_id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(self.nodes[loss_id].value.map(|_| T::one()));
        let mut out = HashMap::new();
        for id in (0..=loss_id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf(_) = node.op {
                let g = grads[id].take().unwrap_or_else(|| node.value.zeros_like());
                out.insert(id, g);
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            let input_grads = self.node_backward(node, &dy)?;
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.axpy(T::one(), &g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        for id in loss_id + 1..self.nodes.len() {
            let node = &self.nodes[id];
            if node.requires_grad && matches!(node.op, Op::Leaf(_)) {
                out.insert(id, node.value.zeros_like());
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn node_backward(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let arg = |i: usize| &self.nodes[node.inputs[i]].value;
        let wants = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        let grads = match &node.op {
            Op::Leaf(_) => Vec::new(),
            Op::Binary(op) => binary_backward(*op, arg(0), arg(1), dy, wants(0), wants(1))?,
            Op::Matmul => {
                let (a, b) = (arg(0), arg(1));
                let da = if wants(0) { Some(dy.matmul(&transpose(b))?) } else { None };
                let db = if wants(1) { Some(transpose(a).matmul(dy)?) } else { None };
                vec![da, db]
            }
            Op::Reduce(op, axes) => vec![Some(reduce_backward(*op, axes, arg(0), &node.value, dy)?)],
            Op::Relu => vec![Some(f::relu_backward(arg(0), dy))],
            Op::Conv2d { stride, pad } => {
                let (dx, dw) = f::conv2d_backward(arg(0), arg(1), dy, *stride, *pad, wants(0))?;
                vec![dx, wants(1).then_some(dw)]
            }
            Op::BatchNormTrain { .. } => {
                let Saved::Batch(stats) = &node.saved else {
                    unreachable!("batchnorm saves its statistics")
                };
                let (dx, dg, db) = f::batchnorm_train_backward(arg(0), arg(1), stats, dy)?;
                vec![wants(0).then_some(dx), wants(1).then_some(dg), wants(2).then_some(db)]
            }
            Op::BatchNormInfer { eps, mean, var } => {
                let (dx, dg, db) = f::batchnorm_infer_backward(arg(0), arg(1), mean, var, *eps, dy)?;
                vec![wants(0).then_some(dx), wants(1).then_some(dg), wants(2).then_some(db)]
            }
            Op::MaxPool { .. } => {
                let Saved::Argmax(idx) = &node.saved else {
                    unreachable!("maxpool saves argmax")
                };
                vec![Some(f::maxpool_backward(arg(0).shape(), idx, dy)?)]
            }
            Op::GlobalAvgPool => vec![Some(f::global_avg_pool_backward(arg(0).shape(), dy)?)],
            Op::SoftmaxCrossEntropy { labels } => {
                let Saved::Probs(p) = &node.saved else {
                    unreachable!("cross-entropy saves probabilities")
                };
                vec![Some(f::softmax_cross_entropy_backward(p, labels, dy.item()?))]
            }
            Op::ShortcutPad { stride, .. } => vec![Some(f::shortcut_pad_backward(arg(0).shape(), dy, *stride)?)],
        };
        Ok(grads)
    }
}

fn evaluate<T: Element>(op: &Op<T>, args: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
    Ok(match op {
        Op::Leaf(_) => unreachable!("leaves are not evaluated"),
        Op::Binary(b) => (Tensor::zip(*b, args[0], args[1])?, Saved::None),
        Op::Matmul => (args[0].matmul(args[1])?, Saved::None),
        Op::Reduce(r, axes) => (args[0].reduce(*r, axes)?, Saved::None),
        Op::Relu => (f::relu(args[0]), Saved::None),
        Op::Conv2d { stride, pad } => (f::conv2d(args[0], args[1], *stride, *pad)?, Saved::None),
        Op::BatchNormTrain { eps } => {
            let (y, stats) = f::batchnorm_train(args[0], args[1], args[2], *eps)?;
            (y, Saved::Batch(stats))
        }
        Op::BatchNormInfer { eps, mean, var } => (
            f::batchnorm_infer(args[0], args[1], args[2], mean, var, *eps)?,
            Saved::None,
        ),
        Op::MaxPool { k, stride, pad } => {
            let (y, idx) = f::maxpool(args[0], *k, *stride, *pad)?;
            (y, Saved::Argmax(idx))
        }
        Op::GlobalAvgPool => (f::global_avg_pool(args[0])?, Saved::None),
        Op::SoftmaxCrossEntropy { labels } => {
            let (loss, probs) = f::softmax_cross_entropy(args[0], labels)?;
            (Tensor::scalar(loss), Saved::Probs(probs))
        }
        Op::ShortcutPad { out_channels, stride } => (f::shortcut_pad(args[0], *out_channels, *stride)?, Saved::None),
    })
}

fn transpose<T: Element>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let d = m.data();
    Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]).expect("transpose shape")
}

/// Sum a full-shape gradient down to a per-channel vector.
fn sum_per_channel<T: Element>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let inner: usize = g.shape()[2..].iter().product();
    let mut out = vec![T::zero(); channels];
    for (i, chunk) in g.data().chunks(inner).enumerate() {
        out[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::new(&[channels], out).expect("channel vector")
}

fn binary_backward<T: Element>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> Result<Vec<Option<Tensor<T>>>> {
    let same = a.shape() == b.shape();
    let b_full = if same || matches!(op, BinaryOp::Add | BinaryOp::Sub) {
        None
    } else {
        Some(Tensor::zip(BinaryOp::Add, &a.zeros_like(), b)?)
    };
    let b_ref = b_full.as_ref().unwrap_or(b);
    let (da, db_full): (Option<Tensor<T>>, Option<Tensor<T>>) = match op {
        BinaryOp::Add => (want_a.then(|| dy.clone()), want_b.then(|| dy.clone())),
        BinaryOp::Sub => (want_a.then(|| dy.clone()), want_b.then(|| dy.map(|g| -g))),
        BinaryOp::Mul => (
            if want_a { Some(dy.mul(b_ref)?) } else { None },
            if want_b { Some(dy.mul(a)?) } else { None },
        ),
        BinaryOp::Max => {
            let pick = |first: bool| -> Result<Tensor<T>> {
                let data = a
                    .data()
                    .iter()
                    .zip(b_ref.data())
                    .zip(dy.data())
                    .map(|((&x, &y), &g)| if (x >= y) == first { g } else { T::zero() })
                    .collect();
                Tensor::new(a.shape(), data)
            };
            (
                if want_a { Some(pick(true)?) } else { None },
                if want_b { Some(pick(false)?) } else { None },
            )
        }
    };
    let db = match db_full {
        Some(g) if !same => Some(sum_per_channel(&g, b.numel())),
        other => other,
    };
    Ok(vec![da, db])
}

fn reduce_backward<T: Element>(
    op: ReduceOp,
    axes: &[usize],
    x: &Tensor<T>,
    y: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let plan = ReducePlan::new(x.shape(), axes)?;
    let mut dx = x.zeros_like();
    match op {
        ReduceOp::Sum | ReduceOp::Mean => {
            let scale = if op == ReduceOp::Mean {
                T::one() / T::of(plan.group as f64)
            } else {
                T::one()
            };
            for (i, g) in dx.data_mut().iter_mut().enumerate() {
                *g = dy.data()[plan.out_index(i)] * scale;
            }
        }
        ReduceOp::Max => {
            let mut taken = vec![false; y.numel()];
            for (i, (g, &v)) in dx.data_mut().iter_mut().zip(x.data()).enumerate() {
                let o = plan.out_index(i);
                if !taken[o] && v == y.data()[o] {
                    taken[o] = true;
                    *g = dy.data()[o];
                }
            }
        }
    }
    Ok(dx)
}
