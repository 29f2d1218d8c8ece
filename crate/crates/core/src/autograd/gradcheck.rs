//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`
    /// where `floor = floor_frac * max |numeric|` over the checked coordinates.
    /// Coordinates whose gradient is tiny next to the rest are then judged on
    /// the scale of the gradient as a whole, not on their own magnitude.
    pub floor_frac: f64,
    /// Number of coordinates to probe; `None` checks every coordinate.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            tol: 1e-3,
            floor_frac: 1e-2,
            samples: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub non_finite: bool,
    pub passed: bool,
}

/// A scalar function that can be recorded on a tape of either precision.
///
/// Closures cannot be generic over the element type, so functions checked in
/// mixed precision implement this instead.
pub trait TapeFn {
    fn eval<E: Element>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var>;
}

/// Checks the gradient of a scalar function of one tensor.
pub fn gradient_check<E, F>(f: F, x: &Tensor<E>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&mut Tape<E>, Var) -> Result<Var>,
{
    gradient_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(x), cfg)
}

fn eval<E, F>(f: &F, inputs: &[Tensor<E>]) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<E>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(tape.scalar_value(y))
}

fn analytic<E, F>(f: &F, inputs: &[Tensor<E>]) -> Result<Vec<Vec<f64>>>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<E>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    tape.backward(y)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| match tape.grad(v) {
            Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; x.numel()],
        })
        .collect())
}

/// Coordinates to probe, as (input index, flat index), in ascending order.
fn coordinates(sizes: &[usize], cfg: &GradCheckConfig) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut flat: Vec<usize> = match cfg.samples {
        Some(k) if k < total => index::sample(&mut rng, total, k).into_vec(),
        _ => (0..total).collect(),
    };
    flat.sort_unstable();
    let mut out = Vec::with_capacity(flat.len());
    let (mut which, mut start) = (0, 0);
    for fi in flat {
        while fi >= start + sizes[which] {
            start += sizes[which];
            which += 1;
        }
        out.push((which, fi - start));
    }
    out
}

/// Central difference at one coordinate; uses the step actually
/// representable in the storage type.
fn central<E, F>(f: &F, work: &mut [Tensor<E>], which: usize, idx: usize, eps: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    let orig = work[which].data()[idx];
    let hi = E::of(orig.as_f64() + eps);
    let lo = E::of(orig.as_f64() - eps);
    work[which].data_mut()[idx] = hi;
    let f_hi = eval(f, work)?;
    work[which].data_mut()[idx] = lo;
    let f_lo = eval(f, work)?;
    work[which].data_mut()[idx] = orig;
    Ok((f_hi - f_lo) / (hi.as_f64() - lo.as_f64()))
}

fn summarize(probes: &[((usize, usize), f64, f64)], cfg: &GradCheckConfig) -> GradCheckReport {
    let non_finite = probes.iter().any(|p| !p.1.is_finite() || !p.2.is_finite());
    let scale = probes.iter().map(|p| p.2.abs()).fold(0.0, f64::max);
    let floor = (cfg.floor_frac * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: probes.len(),
        non_finite,
        passed: false,
    };
    for &(at, a, n) in probes {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        let err = if err.is_finite() { err } else { f64::INFINITY };
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(at);
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report.passed = !non_finite && report.max_rel_err <= cfg.tol;
    report
}

fn check_eps(cfg: &GradCheckConfig) -> Result<()> {
    if cfg.eps > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument("gradient check eps must be positive".into()))
    }
}

/// Checks the gradient of a scalar function with respect to several inputs.
/// Coordinates are sampled uniformly over the concatenation of all inputs.
pub fn gradient_check_many<E, F>(
    f: F,
    inputs: &[Tensor<E>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    check_eps(cfg)?;
    let grads = analytic(&f, inputs)?;
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let mut work = inputs.to_vec();
    let mut probes = Vec::new();
    for (w, i) in coordinates(&sizes, cfg) {
        let n = central(&f, &mut work, w, i, cfg.eps)?;
        probes.push(((w, i), grads[w][i], n));
    }
    Ok(summarize(&probes, cfg))
}

/// Checks `f32` tape gradients against central differences evaluated on an
/// `f64` tape at the same (widened) point.
///
/// A 32-bit forward value carries rounding noise of order `1e-7` relative,
/// which a step of `1e-3` amplifies to `1e-4` or worse in the difference
/// quotient; evaluating the difference in 64 bits removes that noise while
/// the gradient under test is still the 32-bit one.
pub fn gradient_check_mixed<F: TapeFn>(
    f: &F,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    check_eps(cfg)?;
    let grads = analytic(&|t: &mut Tape<f32>, v: &[Var]| f.eval(t, v), inputs)?;
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(|x| x.cast()).collect();
    let g64 = |t: &mut Tape<f64>, v: &[Var]| f.eval(t, v);
    let mut probes = Vec::new();
    for (w, i) in coordinates(&sizes, cfg) {
        let n = central(&g64, &mut work, w, i, cfg.eps)?;
        probes.push(((w, i), grads[w][i], n));
    }
    Ok(summarize(&probes, cfg))
}
