//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation is a method on [`Tape`] that evaluates the
//! forward value immediately and appends a node recording its inputs. A
//! [`Var`] is an index into that record. [`Tape::backward`] walks the record in
//! reverse order, so gradients are reproducible bit for bit: every reduction
//! and accumulation happens in a fixed order.
//!
//! A tape is generic over the storage [`Element`]: `f32` by default, `f64`
//! for precise verification. Reductions, convolutions and cumulative sums
//! accumulate in `f64` either way.

mod conv;
mod elementwise;
mod gemm;
pub mod gradcheck;
mod structural;

pub use conv::{Conv2dConfig, Padding};
pub use elementwise::{BinaryKind, UnaryKind};
pub use gradcheck::{
    gradient_check, gradient_check_many, gradient_check_mixed, GradCheckConfig, GradCheckReport, TapeFn,
};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        cfg: Conv2dConfig,
    },
    Conv1d {
        input: Var,
        weight: Var,
        axis: usize,
        pad: usize,
    },
    Cumsum {
        a: Var,
        axis: usize,
    },
    Flip {
        a: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    GlobalAvgPool(Var),
    ScaleChannels {
        x: Var,
        w: Var,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    /// 64-bit value of single-element results (reductions and the scalar
    /// arithmetic built on them).
    exact: Option<f64>,
    requires_grad: bool,
    grad: Option<Tensor<E>>,
    op: Op,
}

/// Ordered record of executed operations.
///
/// A tape is bound to a single execution stream; it is `Send` but not meant
/// to be recorded onto from several threads.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are accumulated for it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            exact: None,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element tensor at the precision it was computed in.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.exact.unwrap_or_else(|| n.value.item().as_f64())
    }

    fn scalar_or_nan(&self, v: Var) -> f64 {
        if self.nodes[v.0].value.numel() == 1 {
            self.scalar_value(v)
        } else {
            f64::NAN
        }
    }

    pub(crate) fn nodes_exact(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].exact
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, op: Op, inputs: &[Var]) -> Var {
        self.push_exact(value, None, op, inputs)
    }

    pub(crate) fn push_exact(
        &mut self,
        value: Tensor<E>,
        exact: Option<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs need no record of how they were produced.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            exact,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar root into every reachable leaf that
    /// requires a gradient. Repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![E::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + b;
                        }
                    }
                    None => {
                        node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                    }
                }
                continue;
            }
            for (input, contrib) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(&contrib) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[E]) -> Vec<(Var, Vec<E>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary { kind, a, b } => {
                let scalars = (self.scalar_or_nan(*a), self.scalar_or_nan(*b));
                elementwise::binary_backward(
                    *kind,
                    val(*a),
                    val(*b),
                    scalars,
                    g,
                    needs(*a),
                    needs(*b),
                )
                    .into_iter()
                    .zip([*a, *b])
                    .filter_map(|(gr, v)| gr.map(|gr| (v, gr)))
                    .collect()
            }
            Op::Unary { kind, a } => {
                vec![(*a, elementwise::unary_backward(*kind, val(*a), out, g))]
            }
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::MulScalar(a, s) => {
                let s = E::of(*s);
                vec![(*a, g.iter().map(|&v| v * s).collect())]
            }
            Op::PowScalar(a, p) => {
                let x = val(*a).data();
                let gr = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        if x == E::zero() && *p < 1.0 {
                            E::zero()
                        } else {
                            E::of(g.as_f64() * p * x.as_f64().powf(p - 1.0))
                        }
                    })
                    .collect();
                vec![(*a, gr)]
            }
            Op::Clamp { a, lo, hi } => {
                let x = val(*a).data();
                let gr = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let x = x.as_f64();
                        if x >= *lo && x <= *hi {
                            g
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                vec![(*a, gr)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Mean(a) => {
                let n = val(*a).numel();
                vec![(*a, vec![E::of(g[0].as_f64() / n as f64); n])]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Conv2d {
                input,
                weight,
                bias,
                cfg,
            } => {
                let (gi, gw, gb) = conv::conv2d_backward(
                    val(*input),
                    val(*weight),
                    out.shape(),
                    g,
                    cfg,
                    needs(*input),
                    needs(*weight),
                    bias.is_some_and(needs),
                );
                let mut r = Vec::new();
                if let Some(gi) = gi {
                    r.push((*input, gi));
                }
                if let Some(gw) = gw {
                    r.push((*weight, gw));
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    r.push((*b, gb));
                }
                r
            }
            Op::Conv1d {
                input,
                weight,
                axis,
                pad,
            } => {
                let (gi, gw) = conv::conv1d_backward(
                    val(*input),
                    val(*weight),
                    out.shape(),
                    g,
                    *axis,
                    *pad,
                    needs(*input),
                    needs(*weight),
                );
                let mut r = Vec::new();
                if let Some(gi) = gi {
                    r.push((*input, gi));
                }
                if let Some(gw) = gw {
                    r.push((*weight, gw));
                }
                r
            }
            Op::Cumsum { a, axis } => {
                vec![(*a, structural::reverse_cumsum(out.shape(), *axis, g))]
            }
            Op::Flip { a, axis } => vec![(*a, structural::flip_data(out.shape(), *axis, g))],
            Op::Concat { parts, axis } => {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| val(*p).shape()).collect();
                structural::split_grad(&shapes, *axis, g)
                    .into_iter()
                    .zip(parts)
                    .map(|(gr, p)| (*p, gr))
                    .collect()
            }
            Op::Slice { a, axis, start } => vec![(
                *a,
                structural::slice_backward(val(*a).shape(), out.shape(), *axis, *start, g),
            )],
            Op::GlobalAvgPool(a) => vec![(*a, structural::gap_backward(val(*a).shape(), g))],
            Op::ScaleChannels { x, w } => {
                let (gx, gw) = structural::scale_channels_backward(val(*x), val(*w), g);
                let mut r = Vec::new();
                if needs(*x) {
                    r.push((*x, gx));
                }
                if needs(*w) {
                    r.push((*w, gw));
                }
                r
            }
        }
    }
}

pub(crate) fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::AxisOutOfRange { axis, rank })
    } else {
        Ok(())
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
