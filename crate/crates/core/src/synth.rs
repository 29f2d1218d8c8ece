//! Synthetic low-light data: the darkening model `low = beta * (alpha * high)^gamma`,
//! its parameter distribution, and recovery of the parameters from a pair by
//! Levenberg-Marquardt.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DarkeningParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

pub const ALPHA_RANGE: (f64, f64) = (0.9, 1.0);
pub const BETA_RANGE: (f64, f64) = (0.5, 1.0);
pub const GAMMA_RANGE: (f64, f64) = (1.5, 5.0);

/// Smallest `high` value entering the power law; keeps `ln(alpha * h)` finite.
pub const H_FLOOR: f64 = 1.0 / 255.0;
/// Upper end of the box the fitted parameters are projected into.
pub const PARAM_MAX: f64 = 10.0;
/// Lower end of that box; the box is open at zero.
const PARAM_MIN: f64 = 1e-9;
/// Largest number of pixels used by one fit.
pub const FIT_MAX_PIXELS: usize = 65_536;

impl DarkeningParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let p = DarkeningParams { alpha, beta, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.alpha) && ok(self.beta) && ok(self.gamma) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "darkening parameters must be positive, got {self:?}"
            )))
        }
    }

    /// Midpoint of the sampling ranges.
    pub fn midpoint() -> Self {
        let mid = |r: (f64, f64)| 0.5 * (r.0 + r.1);
        DarkeningParams {
            alpha: mid(ALPHA_RANGE),
            beta: mid(BETA_RANGE),
            gamma: mid(GAMMA_RANGE),
        }
    }

    /// `beta * alpha^gamma`, the overall gain. Only this product and `gamma`
    /// are determined by a pair; `alpha` and `beta` trade off exactly.
    pub fn gain(&self) -> f64 {
        self.beta * self.alpha.powf(self.gamma)
    }

    fn apply(&self, h: f64) -> f64 {
        self.beta * (self.alpha * h).powf(self.gamma)
    }
}

/// Applies the darkening model to every value, clamped to `[0, 1]`.
pub fn darken(img: &Tensor, p: &DarkeningParams) -> Result<Tensor> {
    p.validate()?;
    Ok(img.map(|v| p.apply(v.max(0.0) as f64).clamp(0.0, 1.0) as f32))
}

/// Independent uniform draws: `alpha ~ U(0.9, 1)`, `beta ~ U(0.5, 1)`,
/// `gamma ~ U(1.5, 5)`.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R) -> DarkeningParams {
    let u = |rng: &mut R, r: (f64, f64)| rng.random_range(r.0..=r.1);
    let alpha = u(rng, ALPHA_RANGE);
    let beta = u(rng, BETA_RANGE);
    let gamma = u(rng, GAMMA_RANGE);
    DarkeningParams { alpha, beta, gamma }
}

#[derive(Clone, Debug)]
pub struct LmConfig {
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iter: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tol: f64,
    /// Stop when the step is this small relative to the parameters.
    pub step_tol: f64,
    /// Give up once damping exceeds this without an acceptable step.
    pub lambda_max: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            max_iter: 200,
            cost_tol: 1e-10,
            step_tol: 1e-8,
            lambda_max: 1e16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmStop {
    CostTolerance,
    StepTolerance,
    /// Gradient of the cost is zero; the start point is stationary.
    Stationary,
    /// No step reduced the cost at any damping up to the cap.
    DampingCap,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct LmReport {
    pub x: DVector<f64>,
    /// `0.5 * |r|^2` at `x`.
    pub cost: f64,
    pub iterations: usize,
    pub stop: LmStop,
    /// Cost after each accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
}

/// Levenberg-Marquardt with Marquardt's diagonal scaling. Steps solve
/// `(J'J + lambda * diag(J'J)) d = -J'r`; a step is kept only if it lowers the
/// cost.
pub fn lm_optimize<R, J>(residual: R, jacobian: J, x0: DVector<f64>, cfg: &LmConfig) -> Result<LmReport>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    lm_optimize_projected(residual, jacobian, |_| {}, x0, cfg)
}

/// [`lm_optimize`] with every trial point passed through `project` (for box
/// constraints) before evaluation.
pub fn lm_optimize_projected<R, J, P>(
    residual: R,
    jacobian: J,
    project: P,
    x0: DVector<f64>,
    cfg: &LmConfig,
) -> Result<LmReport>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
    P: Fn(&mut DVector<f64>),
{
    if !(cfg.lambda0 > 0.0 && cfg.lambda_up > 1.0 && cfg.lambda_down > 1.0) {
        return Err(Error::InvalidArgument(
            "LM needs lambda0 > 0 and damping factors > 1".into(),
        ));
    }
    let cost_of = |r: &DVector<f64>| 0.5 * r.norm_squared();
    let mut x = x0;
    project(&mut x);
    let mut r = residual(&x);
    let mut cost = cost_of(&r);
    if !cost.is_finite() {
        return Err(Error::Numerical("LM: non-finite cost at the start point".into()));
    }
    let mut lambda = cfg.lambda0;
    let mut accepted_costs = vec![cost];
    let mut stop = LmStop::MaxIterations;
    let mut iterations = 0;
    'outer: while iterations < cfg.max_iter {
        iterations += 1;
        let jac = jacobian(&x);
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() == 0.0 {
            stop = LmStop::Stationary;
            break;
        }
        loop {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(f64::MIN_POSITIVE.sqrt());
            }
            let step = a.cholesky().map(|c| c.solve(&(-&g)));
            let Some(step) = step.filter(|s| s.iter().all(|v| v.is_finite())) else {
                lambda *= cfg.lambda_up;
                if lambda > cfg.lambda_max {
                    stop = LmStop::DampingCap;
                    break 'outer;
                }
                continue;
            };
            let mut trial = &x + &step;
            project(&mut trial);
            let r_new = residual(&trial);
            let c_new = cost_of(&r_new);
            if c_new.is_finite() && c_new < cost {
                let moved = (&trial - &x).norm();
                let decrease = cost - c_new;
                x = trial;
                r = r_new;
                cost = c_new;
                accepted_costs.push(cost);
                lambda = (lambda / cfg.lambda_down).max(1e-300);
                if decrease <= cfg.cost_tol * cost {
                    stop = LmStop::CostTolerance;
                    break 'outer;
                }
                if moved <= cfg.step_tol * (x.norm() + cfg.step_tol) {
                    stop = LmStop::StepTolerance;
                    break 'outer;
                }
                break;
            }
            lambda *= cfg.lambda_up;
            if lambda > cfg.lambda_max {
                stop = LmStop::DampingCap;
                break 'outer;
            }
        }
    }
    debug_assert!(accepted_costs.windows(2).all(|w| w[1] <= w[0]));
    Ok(LmReport {
        x,
        cost,
        iterations,
        stop,
        accepted_costs,
    })
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub lm: LmConfig,
    pub x0: DarkeningParams,
    pub max_pixels: usize,
    /// Seed of the pixel subsample.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lm: LmConfig::default(),
            x0: DarkeningParams::midpoint(),
            max_pixels: FIT_MAX_PIXELS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub params: DarkeningParams,
    /// Root mean square of the residuals over the fitted pixels.
    pub rms: f64,
    pub lm: LmReport,
    /// The pair carries no information about the curve shape.
    pub ill_posed: bool,
}

/// Least-squares fit of the darkening parameters mapping `high` onto `low`.
pub fn fit_darkening_params(low: &Tensor, high: &Tensor, cfg: &FitConfig) -> Result<FitReport> {
    if low.shape() != high.shape() {
        return Err(Error::ShapeMismatch {
            op: "fit_darkening_params",
            lhs: low.shape().to_vec(),
            rhs: high.shape().to_vec(),
        });
    }
    let n = low.numel();
    let picks: Vec<usize> = if n > cfg.max_pixels {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut v = index::sample(&mut rng, n, cfg.max_pixels).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    let l: Vec<f64> = picks.iter().map(|&i| low.data()[i] as f64).collect();
    let h: Vec<f64> = picks
        .iter()
        .map(|&i| (high.data()[i] as f64).max(H_FLOOR))
        .collect();
    let ln_h: Vec<f64> = h.iter().map(|v| v.ln()).collect();

    let spread = {
        let (lo, hi) = h.iter().fold((f64::MAX, f64::MIN), |a, &v| (a.0.min(v), a.1.max(v)));
        hi - lo
    };
    let ill_posed = spread < 1e-6;
    if ill_posed {
        log::warn!("darkening fit: the normal-light image is constant, parameters are not identifiable");
    }

    // x = (alpha, beta, gamma)
    let residual = |x: &DVector<f64>| {
        let (a, b, g) = (x[0], x[1], x[2]);
        DVector::from_iterator(
            l.len(),
            l.iter().zip(&h).map(|(&lv, &hv)| lv - b * (a * hv).powf(g)),
        )
    };
    let jacobian = |x: &DVector<f64>| {
        let (a, b, g) = (x[0], x[1], x[2]);
        let ln_a = a.ln();
        let mut j = DMatrix::zeros(l.len(), 3);
        for (i, (&hv, &lh)) in h.iter().zip(&ln_h).enumerate() {
            let p = (a * hv).powf(g);
            j[(i, 0)] = -b * g * p / a;
            j[(i, 1)] = -p;
            j[(i, 2)] = -b * p * (ln_a + lh);
        }
        j
    };
    let project = |x: &mut DVector<f64>| {
        for v in x.iter_mut() {
            *v = v.clamp(PARAM_MIN, PARAM_MAX);
        }
    };
    let x0 = DVector::from_vec(vec![cfg.x0.alpha, cfg.x0.beta, cfg.x0.gamma]);
    let lm = lm_optimize_projected(residual, jacobian, project, x0, &cfg.lm)?;
    let params = DarkeningParams {
        alpha: lm.x[0],
        beta: lm.x[1],
        gamma: lm.x[2],
    };
    let rms = (2.0 * lm.cost / l.len() as f64).sqrt();
    Ok(FitReport {
        params,
        rms,
        lm,
        ill_posed,
    })
}

/// Supervision target for the denoiser.
pub enum LedSource<'a> {
    /// A real pair: the clean normal-light image darkened to match the noisy
    /// low-light one.
    Real { low: &'a Tensor, high: &'a Tensor },
    /// A synthetic dark image, which is already noise free.
    Synthetic(&'a Tensor),
}

pub fn make_led_target(src: LedSource<'_>, cfg: &FitConfig) -> Result<Tensor> {
    match src {
        LedSource::Synthetic(dark) => Ok(dark.clone()),
        LedSource::Real { low, high } => {
            let fit = fit_darkening_params(low, high, cfg)?;
            darken(high, &fit.params)
        }
    }
}

/// Adds independent Gaussian noise of standard deviation `sigma` and clamps
/// to `[0, 1]`.
pub fn add_noise<R: Rng + ?Sized>(img: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    let bad = || Error::InvalidArgument(format!("noise sigma must be finite and >= 0, got {sigma}"));
    if sigma.is_nan() || sigma < 0.0 {
        return Err(bad());
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| bad())?;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// A random normal-light `[1, 3, h, w]` scene: a smooth colour gradient with
/// overlaid rectangles, discs and a faint texture, values in `[0.05, 0.95]`.
/// Stands in for photographs when no dataset is at hand.
pub fn procedural_scene<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    let colour = |rng: &mut R| [0; 3].map(|_| rng.random_range(0.1..0.9f32));
    let c0 = colour(rng);
    let c1 = colour(rng);
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq = rng.random_range(0.2..0.8f32);
    let mut data = vec![0.0f32; 3 * h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f32 / w as f32 - 0.5) * dx + (y as f32 / h as f32 - 0.5) * dy + 0.75) / 1.5;
            let tex = 0.04 * ((x as f32 * freq).sin() * (y as f32 * freq * 0.7).cos());
            for c in 0..3 {
                data[c * plane + y * w + x] = c0[c] + (c1[c] - c0[c]) * t + tex;
            }
        }
    }
    let shapes = rng.random_range(3..8);
    for _ in 0..shapes {
        let col = colour(rng);
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let ry = rng.random_range(0.08..0.3f32) * h as f32;
        let rx = rng.random_range(0.08..0.3f32) * w as f32;
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let u = (y as f32 - cy) / ry;
                let v = (x as f32 - cx) / rx;
                let inside = if disc { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        data[c * plane + y * w + x] = col[c];
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.05, 0.95);
    }
    Tensor::new([1, 3, h, w], data).expect("shape matches data")
}
