use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Abs,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Log1p,
    Sqrt,
    Square,
}

impl BinaryKind {
    fn apply64(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryKind {
    fn apply64(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Abs => x.abs(),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Log1p => x.ln_1p(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Square => x * x,
        }
    }

    fn check_domain<E: Element>(self, x: &Tensor<E>) -> Result<()> {
        let bad = match self {
            UnaryKind::Ln => x.data().iter().map(|v| v.as_f64()).find(|&v| v <= 0.0 || v.is_nan()),
            UnaryKind::Log1p => x.data().iter().map(|v| v.as_f64()).find(|&v| v <= -1.0 || v.is_nan()),
            UnaryKind::Sqrt => x.data().iter().map(|v| v.as_f64()).find(|&v| v < 0.0 || v.is_nan()),
            _ => None,
        };
        match bad {
            Some(v) => Err(Error::Domain {
                op: self.name(),
                reason: format!("argument {v} outside domain"),
            }),
            None => Ok(()),
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryKind::Neg => "neg",
            UnaryKind::Abs => "abs",
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Ln => "ln",
            UnaryKind::Log1p => "log1p",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
        }
    }
}

/// Broadcast layout of a binary op: equal shapes, or one operand a single value.
#[derive(Clone, Copy)]
enum Layout {
    Same,
    ScalarLhs,
    ScalarRhs,
}

fn layout<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Option<Layout> {
    if a.shape() == b.shape() {
        Some(Layout::Same)
    } else if b.numel() == 1 {
        Some(Layout::ScalarRhs)
    } else if a.numel() == 1 {
        Some(Layout::ScalarLhs)
    } else {
        None
    }
}

pub(super) fn binary_backward<E: Element>(
    kind: BinaryKind,
    a: &Tensor<E>,
    b: &Tensor<E>,
    (sa, sb): (f64, f64),
    g: &[E],
    need_a: bool,
    need_b: bool,
) -> [Option<Vec<E>>; 2] {
    let lay = layout(a, b).expect("layout validated in forward");
    let n = g.len();
    // Broadcast operands use their 64-bit scalar value.
    let av = |i: usize| match lay {
        Layout::ScalarLhs => sa,
        _ => a.data()[i].as_f64(),
    };
    let bv = |i: usize| match lay {
        Layout::ScalarRhs => sb,
        _ => b.data()[i].as_f64(),
    };
    let gi = |i: usize| g[i].as_f64();
    let da = |i: usize| -> f64 {
        match kind {
            BinaryKind::Add | BinaryKind::Sub => gi(i),
            BinaryKind::Mul => gi(i) * bv(i),
            BinaryKind::Div => gi(i) / bv(i),
        }
    };
    let db = |i: usize| -> f64 {
        match kind {
            BinaryKind::Add => gi(i),
            BinaryKind::Sub => -gi(i),
            BinaryKind::Mul => gi(i) * av(i),
            BinaryKind::Div => {
                let b = bv(i);
                -gi(i) * av(i) / (b * b)
            }
        }
    };
    // A broadcast operand collects the sum over every position it touched.
    let reduce = |f: &dyn Fn(usize) -> f64| -> Vec<E> { vec![E::of((0..n).map(f).sum())] };
    let ga = need_a.then(|| match lay {
        Layout::ScalarLhs => reduce(&da),
        _ => (0..n).map(|i| E::of(da(i))).collect(),
    });
    let gb = need_b.then(|| match lay {
        Layout::ScalarRhs => reduce(&db),
        _ => (0..n).map(|i| E::of(db(i))).collect(),
    });
    [ga, gb]
}

pub(super) fn unary_backward<E: Element>(
    kind: UnaryKind,
    x: &Tensor<E>,
    y: &Tensor<E>,
    g: &[E],
) -> Vec<E> {
    let x = x.data();
    let y = y.data();
    (0..g.len())
        .map(|i| {
            let (x, y) = (x[i].as_f64(), y[i].as_f64());
            let d = match kind {
                UnaryKind::Neg => -1.0,
                // Subgradient 0 at the kink for both abs and relu.
                UnaryKind::Abs => {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                UnaryKind::Relu => {
                    if x > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                UnaryKind::Sigmoid => y * (1.0 - y),
                UnaryKind::Exp => y,
                UnaryKind::Ln => 1.0 / x,
                UnaryKind::Log1p => 1.0 / (1.0 + x),
                UnaryKind::Sqrt => {
                    if y > 0.0 {
                        0.5 / y
                    } else {
                        0.0
                    }
                }
                UnaryKind::Square => 2.0 * x,
            };
            E::of(g[i].as_f64() * d)
        })
        .collect()
}

impl<E: Element> Tape<E> {
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let lay = layout(ta, tb).ok_or_else(|| Error::ShapeMismatch {
            op: kind.name(),
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        if ta.numel() == 1 && tb.numel() == 1 {
            let r = kind.apply64(self.scalar_value(a), self.scalar_value(b));
            let shape = ta.shape().to_vec();
            let value = Tensor::from_parts(shape, vec![E::of(r)]);
            return Ok(self.push_exact(value, Some(r), Op::Binary { kind, a, b }, &[a, b]));
        }
        let value = match lay {
            Layout::Same => {
                ta.zip_map(tb, |x, y| E::of(kind.apply64(x.as_f64(), y.as_f64())))?
            }
            Layout::ScalarRhs => {
                let s = self.scalar_value(b);
                ta.map(|x| E::of(kind.apply64(x.as_f64(), s)))
            }
            Layout::ScalarLhs => {
                let s = self.scalar_value(a);
                tb.map(|y| E::of(kind.apply64(s, y.as_f64())))
            }
        };
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        kind.check_domain(x)?;
        if x.numel() == 1 {
            let r = kind.apply64(self.scalar_value(a));
            return Ok(self.push_scalar(a, r, Op::Unary { kind, a }));
        }
        let value = x.map(|v| E::of(kind.apply64(v.as_f64())));
        Ok(self.push(value, Op::Unary { kind, a }, &[a]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a).expect("neg has no domain")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a).expect("abs has no domain")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a).expect("relu has no domain")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a).expect("sigmoid has no domain")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a).expect("exp has no domain")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a).expect("square has no domain")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log1p, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    /// Records a single-element result that keeps its 64-bit value.
    fn push_scalar(&mut self, a: Var, r: f64, op: Op) -> Var {
        let value = Tensor::from_parts(self.shape(a).to_vec(), vec![E::of(r)]);
        self.push_exact(value, Some(r), op, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        if self.value(a).numel() == 1 {
            let r = self.scalar_value(a) + s;
            return self.push_scalar(a, r, Op::AddScalar(a));
        }
        let value = self.value(a).map(|v| E::of(v.as_f64() + s));
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        if self.value(a).numel() == 1 {
            let r = self.scalar_value(a) * s;
            return self.push_scalar(a, r, Op::MulScalar(a, s));
        }
        let value = self.value(a).map(|v| E::of(v.as_f64() * s));
        self.push(value, Op::MulScalar(a, s), &[a])
    }

    /// `s - a`.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    /// `a^p`; negative bases are a domain error unless `p` is a whole number.
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        let x = self.value(a);
        if p.fract() != 0.0 {
            if let Some(v) = x.data().iter().find(|&&v| v < E::zero()) {
                return Err(Error::Domain {
                    op: "pow",
                    reason: format!("negative base {v} with fractional exponent {p}"),
                });
            }
        }
        if x.numel() == 1 {
            let r = self.scalar_value(a).powf(p);
            return Ok(self.push_scalar(a, r, Op::PowScalar(a, p)));
        }
        let value = x.map(|v| E::of(v.as_f64().powf(p)));
        Ok(self.push(value, Op::PowScalar(a, p), &[a]))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| E::of(v.as_f64().clamp(lo, hi)));
        self.push(value, Op::Clamp { a, lo, hi }, &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_exact(Tensor::scalar(E::of(s)), Some(s), Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        self.push_exact(Tensor::scalar(E::of(s)), Some(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let exact = self.nodes_exact(a);
        Ok(self.push_exact(value, exact, Op::Reshape(a), &[a]))
    }
}
