//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Record`] owns every tensor produced during one forward pass together
//! with the operation that produced it. Entries are appended in execution
//! order, so the record is topologically sorted by construction and
//! [`Record::backward`] is a single reverse sweep.
//!
//! Gradients of leaves accumulate across `backward` calls until they are
//! cleared with [`Record::zero_grad`] (or moved out with
//! [`Record::take_param_grads`]).

pub(crate) mod fused;
mod spatial;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, strides, Real, Tensor};

pub use fused::{BCE_CLAMP, IGNORE_INDEX};
pub use spatial::{conv_output_extent, upsample_taps, BatchStats};


/// Handle to a tensor stored in a [`Record`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Exp,
    Square,
}

impl ElementwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Binary {
        kind: ElementwiseKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: ElementwiseKind,
        a: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Reduce {
        a: Var,
        kind: ReduceKind,
        /// Input shape with reduced axes set to 1.
        kept: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Conv2d(spatial::ConvSaved),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    BatchNorm(spatial::NormSaved<T>),
    Encode(fused::EncodeSaved),
    CrossEntropy(fused::CrossEntropySaved),
    Bce(fused::BceSaved),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// The computation record of one forward pass.
#[derive(Debug, Default)]
pub struct Record<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Record<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// gradients flow into it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf { param: None },
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn param_leaf(&mut self, tensor: Tensor<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf { param: Some(id) },
        });
        Var(self.nodes.len() - 1)
    }

    /// Convenience for a constant (non-differentiable) leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Accumulated gradient of a leaf, if any has been computed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Moves the accumulated gradients of parameter leaves out of the record.
    pub(crate) fn take_param_grads(&mut self) -> Vec<(ParamId, Vec<T>)> {
        self.nodes
            .iter_mut()
            .filter_map(|n| match n.op {
                Op::Leaf { param: Some(id) } => n.value.take_grad().map(|g| (id, g)),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            value: value.with_requires_grad(rg),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => Ok(self.unary(kind, a)),
            (true, None) => Err(Error::Config(format!("{kind:?} needs two operands"))),
            (false, Some(_)) => Err(Error::Config(format!("{kind:?} takes one operand"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(ElementwiseKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(ElementwiseKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(ElementwiseKind::Exp, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(ElementwiseKind::Square, a)
    }

    fn binary(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(op_name(kind), ta.shape(), tb.shape()))?;
        let f = |x: T, y: T| match kind {
            ElementwiseKind::Add => x + y,
            ElementwiseKind::Sub => x - y,
            _ => x * y,
        };
        let values = if ta.shape() == tb.shape() {
            ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![T::zero(); n];
            let (sa, sb) = (
                broadcast_strides(ta.shape(), &out_shape),
                broadcast_strides(tb.shape(), &out_shape),
            );
            let (va, vb) = (ta.values(), tb.values());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(va[ia], vb[ib]));
            out
        };
        let value = Tensor::new(&out_shape, values)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    fn unary(&mut self, kind: ElementwiseKind, a: Var) -> Var {
        let ta = self.value(a);
        let values: Vec<T> = ta
            .values()
            .iter()
            .map(|&x| match kind {
                ElementwiseKind::Relu => x.max(T::zero()),
                ElementwiseKind::Sigmoid => sigmoid(x),
                ElementwiseKind::Exp => x.exp(),
                _ => x * x,
            })
            .collect();
        let value = Tensor::new(ta.shape(), values).expect("same shape");
        self.push(value, Op::Unary { kind, a }, &[a])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let ta = self.value(a);
        let values = ta.values().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(ta.shape(), values).expect("same shape");
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.values(), false, tb.values(), false, T::zero(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Sums or averages over `axes`, accumulating in `f64`.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let ta = self.value(a);
        let rank = ta.rank();
        let mut kept = ta.shape().to_vec();
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis {
                    op: "reduce",
                    axis,
                    rank,
                });
            }
            kept[axis] = 1;
        }
        let count: usize = ta.len() / kept.iter().product::<usize>();
        let n_out: usize = kept.iter().product();
        let mut acc = vec![0f64; n_out];
        let in_strides = strides(ta.shape());
        let out_strides = broadcast_strides(&kept, ta.shape());
        let xs = ta.values();
        for_each_broadcast(ta.shape(), &in_strides, &out_strides, |_, ia, io| {
            acc[io] += xs[ia].as_f64()
        });
        let scale = match kind {
            ReduceKind::Sum => 1.0,
            ReduceKind::Mean => 1.0 / count as f64,
        };
        let out_shape: Vec<usize> = if keep_dims {
            kept.clone()
        } else {
            ta.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let value = Tensor::new(&out_shape, acc.iter().map(|&v| T::from_f64(v * scale)).collect())?;
        Ok(self.push(value, Op::Reduce { a, kind, kept }, &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceKind::Sum, a, &axes, false).expect("valid axes")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceKind::Mean, a, &axes, false).expect("valid axes")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().with_requires_grad(false).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Propagates d(loss)/d(leaf) into every reachable leaf that requires a
    /// gradient. Gradients add onto whatever the leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.requires_grad() {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if let Op::Leaf { .. } = self.nodes[i].op {
                leaf_grads.push((i, g));
            } else {
                let mut sink = Sink {
                    nodes: &self.nodes,
                    adj: &mut adj,
                };
                self.nodes[i].backprop(i, &g, &mut sink);
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

/// Destination for input gradients during the backward sweep.
pub(crate) struct Sink<'a, T> {
    nodes: &'a [Node<T>],
    adj: &'a mut [Option<Vec<T>>],
}

impl<T: Real> Sink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub(crate) fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn send(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
        match &mut self.adj[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
            slot @ None => *slot = Some(g),
        }
    }
}

impl<T: Real> Node<T> {
    fn backprop(&self, _index: usize, g: &[T], sink: &mut Sink<'_, T>) {
        let out = &self.value;
        match &self.op {
            Op::Leaf { .. } => unreachable!(),
            Op::Binary { kind, a, b } => {
                let (a, b, kind) = (*a, *b, *kind);
                let (ta, tb) = (sink.value(a), sink.value(b));
                let out_shape = out.shape();
                let (sa, sb) = (
                    broadcast_strides(ta.shape(), out_shape),
                    broadcast_strides(tb.shape(), out_shape),
                );
                let same = ta.shape() == out_shape && tb.shape() == out_shape;
                let ga = sink.wants(a).then(|| {
                    let mut ga = vec![T::zero(); ta.len()];
                    let vb = tb.values();
                    if same {
                        for (i, gi) in ga.iter_mut().enumerate() {
                            *gi = match kind {
                                ElementwiseKind::Mul => g[i] * vb[i],
                                _ => g[i],
                            };
                        }
                    } else {
                        for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                            ga[ia] += match kind {
                                ElementwiseKind::Mul => g[o] * vb[ib],
                                _ => g[o],
                            }
                        });
                    }
                    ga
                });
                let gb = sink.wants(b).then(|| {
                    let mut gb = vec![T::zero(); tb.len()];
                    let va = ta.values();
                    if same {
                        for (i, gi) in gb.iter_mut().enumerate() {
                            *gi = match kind {
                                ElementwiseKind::Mul => g[i] * va[i],
                                ElementwiseKind::Sub => -g[i],
                                _ => g[i],
                            };
                        }
                    } else {
                        for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                            gb[ib] += match kind {
                                ElementwiseKind::Mul => g[o] * va[ia],
                                ElementwiseKind::Sub => -g[o],
                                _ => g[o],
                            }
                        });
                    }
                    gb
                });
                if let Some(ga) = ga {
                    sink.send(a, ga);
                }
                if let Some(gb) = gb {
                    sink.send(b, gb);
                }
            }
            Op::Unary { kind, a } => {
                if !sink.wants(*a) {
                    return;
                }
                let x = sink.value(*a).values();
                let y = out.values();
                let two = T::from_f64(2.0);
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| match kind {
                        ElementwiseKind::Relu => {
                            if x[i] > T::zero() {
                                gi
                            } else {
                                T::zero()
                            }
                        }
                        ElementwiseKind::Sigmoid => gi * y[i] * (T::one() - y[i]),
                        ElementwiseKind::Exp => gi * y[i],
                        _ => gi * two * x[i],
                    })
                    .collect();
                sink.send(*a, ga);
            }
            Op::Scale { a, factor } => {
                let ga = g.iter().map(|&gi| gi * *factor).collect();
                sink.send(*a, ga);
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (sink.value(a), sink.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let ga = sink.wants(a).then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, tb.values(), true, T::zero(), &mut ga);
                    ga
                });
                let gb = sink.wants(b).then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, ta.values(), true, g, false, T::zero(), &mut gb);
                    gb
                });
                if let Some(ga) = ga {
                    sink.send(a, ga);
                }
                if let Some(gb) = gb {
                    sink.send(b, gb);
                }
            }
            Op::Reduce { a, kind, kept } => {
                let ta = sink.value(*a);
                let count = ta.len() / kept.iter().product::<usize>();
                let scale = match kind {
                    ReduceKind::Sum => T::one(),
                    ReduceKind::Mean => T::from_f64(1.0 / count as f64),
                };
                let mut ga = vec![T::zero(); ta.len()];
                let in_strides = strides(ta.shape());
                let out_strides = broadcast_strides(kept, ta.shape());
                for_each_broadcast(ta.shape(), &in_strides, &out_strides, |_, ia, io| {
                    ga[ia] = g[io] * scale
                });
                sink.send(*a, ga);
            }
            Op::Reshape { a } => sink.send(*a, g.to_vec()),
            Op::Conv2d(saved) => saved.backward(g, sink),
            Op::MaxPool { x, argmax } => spatial::max_pool_backward(*x, argmax, g, sink),
            Op::Upsample { x, factor } => spatial::upsample_backward(*x, *factor, g, sink),
            Op::BatchNorm(saved) => saved.backward(g, sink),
            Op::Encode(saved) => saved.backward(out, g, sink),
            Op::CrossEntropy(saved) => saved.backward(g, sink),
            Op::Bce(saved) => saved.backward(g, sink),
        }
    }
}

fn op_name(kind: ElementwiseKind) -> &'static str {
    match kind {
        ElementwiseKind::Add => "add",
        ElementwiseKind::Sub => "sub",
        ElementwiseKind::Mul => "mul",
        ElementwiseKind::Relu => "relu",
        ElementwiseKind::Sigmoid => "sigmoid",
        ElementwiseKind::Exp => "exp",
        ElementwiseKind::Square => "square",
    }
}

/// Overflow-free logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
