//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: node ids are assigned in creation
//! order, so every node's inputs precede it and a single reverse sweep visits
//! each node once. [`Var`] is a cheap handle into the graph.

pub mod gradcheck;

use std::cell::{Cell, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_backward, conv2d_with, ConvAlgo, ConvGeom, Shape, Tensor};

pub type NodeId = usize;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Abs(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Pool(NodeId),
    Softmax(NodeId),
    /// `Σ_i weights[row, i] · terms[i]`.
    Combine {
        weights: NodeId,
        row: usize,
        terms: Vec<NodeId>,
    },
    Select(NodeId, usize),
    Concat(Vec<NodeId>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    algo: ConvAlgo,
    /// Running hash of the sign pattern seen by every kinked op (relu, abs);
    /// `None` unless the graph was built with [`Graph::instrumented`].
    kinks: Option<Cell<u64>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_conv_algo(ConvAlgo::default())
    }

    pub fn with_conv_algo(algo: ConvAlgo) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            algo,
            kinks: None,
        }
    }

    /// Graph that fingerprints the activation pattern of every relu/abs so
    /// finite-difference checks can tell when a perturbation crossed a kink.
    pub fn instrumented() -> Self {
        Graph {
            kinks: Some(Cell::new(0xcbf2_9ce4_8422_2325)),
            ..Self::new()
        }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(Cell::get)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: receives a gradient in [`Graph::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Var<'_, T> {
        let rg = self.needs_grad(inputs);
        self.push(value, op, rg)
    }

    fn with<R>(&self, id: NodeId, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn fingerprint(&self, x: &Tensor<T>) {
        if let Some(cell) = &self.kinks {
            let mut h = cell.get();
            for v in x.data() {
                h ^= (*v > T::zero()) as u64 + 2 * (*v < T::zero()) as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            cell.set(h);
        }
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_owner(loss);
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::arg(
                "backward",
                format!("seed must be a scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        pending[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |to: NodeId, grad: Tensor<T>| {
                if !nodes[to].requires_grad {
                    return;
                }
                match &mut pending[to] {
                    Some(acc) => acc.data_mut().iter_mut().zip(grad.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            };
            let val = |i: NodeId| &nodes[i].value;
            match &node.op {
                Op::Leaf => leaves[id] = Some(g),
                Op::Conv { x, kernel, bias, geom } => {
                    let r = conv2d_backward(
                        val(*x),
                        val(*kernel),
                        val(*bias),
                        *geom,
                        &g,
                        nodes[*x].requires_grad,
                        nodes[*kernel].requires_grad,
                        nodes[*bias].requires_grad,
                    )?;
                    if let Some(t) = r.input {
                        send(*x, t);
                    }
                    if let Some(t) = r.kernel {
                        send(*kernel, t);
                    }
                    if let Some(t) = r.bias {
                        send(*bias, t);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-T::one()));
                }
                Op::Mul(a, b) => {
                    send(*a, g.mul(val(*b))?);
                    send(*b, g.mul(val(*a))?);
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::Relu(a) => send(
                    *a,
                    g.zip_map(val(*a), "relu", |gv, x| if x > T::zero() { gv } else { T::zero() })?,
                ),
                Op::Abs(a) => send(
                    *a,
                    g.zip_map(val(*a), "abs", |gv, x| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })?,
                ),
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item()?)),
                Op::Mean(a) => {
                    let s = val(*a).shape();
                    send(*a, Tensor::full(s, g.item()? / T::of(s.numel() as f64)));
                }
                Op::Pool(a) => {
                    let s = val(*a).shape();
                    let inv = T::one() / T::of(s.plane() as f64);
                    let plane = s.plane();
                    let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect();
                    send(*a, Tensor::from_vec(s, data)?);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let p = y.shape().c;
                    let mut out = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(p).zip(g.data().chunks(p)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                        out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                    }
                    send(*a, Tensor::from_vec(y.shape(), out)?);
                }
                Op::Combine { weights, row, terms } => {
                    let w = val(*weights);
                    let p = w.shape().c;
                    let wrow = &w.data()[row * p..(row + 1) * p];
                    let mut gw = Tensor::zeros(w.shape());
                    for (i, &t) in terms.iter().enumerate() {
                        let dot = g
                            .data()
                            .iter()
                            .zip(val(t).data())
                            .fold(T::zero(), |s, (&a, &b)| s + a * b);
                        gw.data_mut()[row * p + i] = dot;
                    }
                    for (&t, &wi) in terms.iter().zip(wrow) {
                        send(t, g.scale(wi));
                    }
                    send(*weights, gw);
                }
                Op::Select(a, i) => {
                    let s = val(*a).shape();
                    let mut full = Tensor::zeros(s);
                    let item = s.item();
                    full.data_mut()[i * item..(i + 1) * item].copy_from_slice(g.data());
                    send(*a, full);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &part in parts {
                        let s = val(part).shape();
                        let piece = g.data()[offset..offset + s.numel()].to_vec();
                        offset += s.numel();
                        send(part, Tensor::from_vec(s, piece)?);
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }

    fn check_owner(&self, v: Var<'_, T>) {
        assert!(std::ptr::eq(self, v.graph), "variable belongs to a different graph");
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, `None` when `v` is not a trainable leaf reachable
    /// from the loss.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`; unreachable leaves get zeros.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Shape {
        self.graph.with(self.id, Tensor::shape)
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.with(self.id, Tensor::clone)
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        self.graph.with(self.id, f)
    }

    pub fn item(&self) -> Result<T> {
        self.graph.with(self.id, Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn binary(
        self,
        other: Var<'g, T>,
        make: fn(NodeId, NodeId) -> Op<T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Var<'g, T>> {
        self.graph.check_owner(other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        Ok(self.graph.record(value, make(self.id, other.id), &[self.id, other.id]))
    }

    fn unary(self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Var<'g, T>> {
        let value = self.graph.with(self.id, f)?;
        Ok(self.graph.record(value, op, &[self.id]))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Add, |a, b| a.add(b))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Sub, |a, b| a.sub(b))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Mul, |a, b| a.mul(b))
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        self.unary(Op::Scale(self.id, s), |a| Ok(a.scale(s)))
            .expect("scale is infallible")
    }

    pub fn relu(self) -> Var<'g, T> {
        let g = self.graph;
        self.unary(Op::Relu(self.id), |a| {
            g.fingerprint(a);
            Ok(a.relu())
        })
        .expect("relu is infallible")
    }

    pub fn abs(self) -> Var<'g, T> {
        let g = self.graph;
        self.unary(Op::Abs(self.id), |a| {
            g.fingerprint(a);
            Ok(a.abs())
        })
        .expect("abs is infallible")
    }

    pub fn sum(self) -> Result<Var<'g, T>> {
        self.unary(Op::Sum(self.id), |a| a.sum().map(Tensor::scalar))
    }

    pub fn mean(self) -> Result<Var<'g, T>> {
        self.unary(Op::Mean(self.id), |a| a.mean().map(Tensor::scalar))
    }

    pub fn global_avg_pool(self) -> Result<Var<'g, T>> {
        self.unary(Op::Pool(self.id), Tensor::global_avg_pool)
    }

    /// Normalised exponential over the channel axis of a `[n,p,1,1]` tensor.
    pub fn softmax(self) -> Result<Var<'g, T>> {
        self.unary(Op::Softmax(self.id), |a| {
            let s = a.shape();
            if s.h != 1 || s.w != 1 {
                return Err(Error::arg("softmax", format!("expected [n,p,1,1], got {s:?}")));
            }
            if s.c == 0 {
                return Err(Error::domain("softmax", "empty channel axis"));
            }
            let mut out = Vec::with_capacity(a.len());
            for row in a.data().chunks(s.c) {
                let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
                let z = e.iter().fold(T::zero(), |s, &v| s + v);
                out.extend(e.into_iter().map(|v| v / z));
            }
            Tensor::from_vec(s, out)
        })
    }

    pub fn select_batch(self, i: usize) -> Result<Var<'g, T>> {
        self.unary(Op::Select(self.id, i), |a| a.select_batch(i))
    }

    pub fn conv2d(self, kernel: Var<'g, T>, bias: Var<'g, T>, geom: ConvGeom) -> Result<Var<'g, T>> {
        let g = self.graph;
        g.check_owner(kernel);
        g.check_owner(bias);
        let value = {
            let nodes = g.nodes.borrow();
            conv2d_with(
                g.algo,
                &nodes[self.id].value,
                &nodes[kernel.id].value,
                &nodes[bias.id].value,
                geom,
            )?
        };
        Ok(g.record(
            value,
            Op::Conv {
                x: self.id,
                kernel: kernel.id,
                bias: bias.id,
                geom,
            },
            &[self.id, kernel.id, bias.id],
        ))
    }

    /// Fully connected map on `[n,c,1,1]` features with weight `[out,c,1,1]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::arg("linear", format!("expected [n,c,1,1] features, got {s:?}")));
        }
        self.conv2d(weight, bias, ConvGeom::new(1, 0))
    }
}

/// `Σ_i weights[row, i] · terms[i]` where `weights` is `[n,p,1,1]`.
pub fn combine<'g, T: Scalar>(weights: Var<'g, T>, row: usize, terms: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    const OP: &str = "combine";
    let g = weights.graph;
    let ws = weights.shape();
    if ws.h != 1 || ws.w != 1 {
        return Err(Error::arg(OP, format!("weights must be [n,p,1,1], got {ws:?}")));
    }
    if ws.c != terms.len() {
        return Err(Error::dim(OP, "p", terms.len(), ws.c));
    }
    if row >= ws.n {
        return Err(Error::dim(OP, "n", ws.n, row));
    }
    terms.iter().for_each(|t| g.check_owner(*t));
    let value = {
        let nodes = g.nodes.borrow();
        let w = &nodes[weights.id].value.data()[row * ws.c..(row + 1) * ws.c];
        let refs: Vec<&Tensor<T>> = terms.iter().map(|t| &nodes[t.id].value).collect();
        Tensor::weighted_sum(w, &refs)?
    };
    let ids: Vec<NodeId> = terms.iter().map(|t| t.id).collect();
    let mut inputs = ids.clone();
    inputs.push(weights.id);
    Ok(g.record(
        value,
        Op::Combine {
            weights: weights.id,
            row,
            terms: ids,
        },
        &inputs,
    ))
}

pub fn concat_batch<'g, T: Scalar>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat_batch", "no inputs"))?;
    let g = first.graph;
    parts.iter().for_each(|p| g.check_owner(*p));
    let value = {
        let nodes = g.nodes.borrow();
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &nodes[p.id].value).collect();
        Tensor::concat_batch(&refs)?
    };
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    Ok(g.record(value, Op::Concat(ids.clone()), &ids))
}
