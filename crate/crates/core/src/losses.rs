//! Training losses and evaluation metrics.
//!
//! The training objective is a sum of SSIM, Charbonnier and DISTS-style
//! terms on the enhanced output, plus the same three terms on the denoiser
//! output when low-exposure supervision is on.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::surround::{apply_separable, gaussian_kernel};
use crate::tensor::{Element, Tensor};

pub const SSIM_WINDOW_HALF: usize = 6;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const DISTS_D1: f64 = 1e-6;
pub const DISTS_D2: f64 = 1e-6;
pub const PSNR_CAP: f64 = 100.0;

fn same_shape<E: Element>(tape: &Tape<E>, op: &'static str, x: Var, y: Var) -> Result<Vec<usize>> {
    let (a, b) = (tape.shape(x), tape.shape(y));
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(a.to_vec())
}

fn window<E: Element>(tape: &mut Tape<E>) -> Var {
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW_HALF).expect("positive sigma");
    tape.constant(k.to_tensor().cast())
}

/// Gaussian-weighted local mean over every full 11x11 window.
fn local_mean<E: Element>(tape: &mut Tape<E>, x: Var, w: Var) -> Result<Var> {
    let rows = tape.conv1d(x, w, 3, 0)?;
    tape.conv1d(rows, w, 2, 0)
}

/// `1 - mean SSIM` over all valid 11x11 Gaussian windows of every channel.
pub fn ssim_loss<E: Element>(tape: &mut Tape<E>, x: Var, y: Var) -> Result<Var> {
    let shape = same_shape(tape, "ssim_loss", x, y)?;
    let side = 2 * SSIM_WINDOW_HALF - 1;
    if shape.len() != 4 || shape[2] < side || shape[3] < side {
        return Err(Error::InvalidShape {
            op: "ssim_loss",
            shape,
            reason: format!("expected [N,C,H,W] with H, W >= {side}"),
        });
    }
    let w = window(tape);
    let mx = local_mean(tape, x, w)?;
    let my = local_mean(tape, y, w)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let exx = local_mean(tape, xx, w)?;
    let eyy = local_mean(tape, yy, w)?;
    let exy = local_mean(tape, xy, w)?;
    let mxx = tape.mul(mx, mx)?;
    let myy = tape.mul(my, my)?;
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(exx, mxx)?;
    let vy = tape.sub(eyy, myy)?;
    let cov = tape.sub(exy, mxy)?;

    let num_l = tape.mul_scalar(mxy, 2.0);
    let num_l = tape.add_scalar(num_l, SSIM_C1);
    let num_s = tape.mul_scalar(cov, 2.0);
    let num_s = tape.add_scalar(num_s, SSIM_C2);
    let den_l = tape.add(mxx, myy)?;
    let den_l = tape.add_scalar(den_l, SSIM_C1);
    let den_s = tape.add(vx, vy)?;
    let den_s = tape.add_scalar(den_s, SSIM_C2);
    let num = tape.mul(num_l, num_s)?;
    let den = tape.mul(den_l, den_s)?;
    let map = tape.div(num, den)?;
    let m = tape.mean(map);
    Ok(tape.rsub_scalar(1.0, m))
}

/// Mean over elements of `sqrt((x - y)^2 + eps^2)`.
pub fn charbonnier_loss<E: Element>(tape: &mut Tape<E>, x: Var, y: Var) -> Result<Var> {
    same_shape(tape, "charbonnier_loss", x, y)?;
    let d = tape.sub(x, y)?;
    let sq = tape.square(d);
    let sq = tape.add_scalar(sq, CHARBONNIER_EPS * CHARBONNIER_EPS);
    let r = tape.sqrt(sq)?;
    Ok(tape.mean(r))
}

/// Deterministic map from an image to one or more feature maps.
pub trait FeatureExtractor {
    fn features<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Vec<Var>>;
}

/// The image itself, then two successive binomial 5x5 blurs.
#[derive(Clone, Copy, Debug)]
pub struct BlurPyramid {
    pub levels: usize,
}

impl Default for BlurPyramid {
    fn default() -> Self {
        BlurPyramid { levels: 3 }
    }
}

impl FeatureExtractor for BlurPyramid {
    fn features<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Vec<Var>> {
        let k: Tensor<E> = Tensor::from_vec([1.0, 4.0, 6.0, 4.0, 1.0].map(|v| E::of(v / 16.0)).to_vec());
        let k = tape.constant(k);
        let mut out = vec![x];
        for _ in 1..self.levels {
            let prev = *out.last().expect("non-empty");
            out.push(apply_separable(tape, prev, k)?);
        }
        Ok(out)
    }
}

/// Raw image as the single feature map.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl FeatureExtractor for Identity {
    fn features<E: Element>(&self, _tape: &mut Tape<E>, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

/// Texture and structure similarity of feature statistics.
///
/// For every feature map and channel, global means give the texture term and
/// global (co)variances the structure term. With `M` map-channel pairs each
/// term is weighted `1 / (2M)`, so identical inputs score exactly zero. The
/// result is averaged over the batch.
pub fn dists_loss<E: Element, F: FeatureExtractor>(
    tape: &mut Tape<E>,
    x: Var,
    y: Var,
    f: &F,
) -> Result<Var> {
    same_shape(tape, "dists_loss", x, y)?;
    let fx = f.features(tape, x)?;
    let fy = f.features(tape, y)?;
    if fx.is_empty() || fx.len() != fy.len() {
        return Err(Error::InvalidArgument("feature extractor returned no maps".into()));
    }
    let mut terms = Vec::with_capacity(fx.len());
    for (&a, &b) in fx.iter().zip(&fy) {
        same_shape(tape, "dists_loss features", a, b)?;
        let ma = tape.global_avg_pool(a)?;
        let mb = tape.global_avg_pool(b)?;
        let aa = tape.mul(a, a)?;
        let bb = tape.mul(b, b)?;
        let ab = tape.mul(a, b)?;
        let eaa = tape.global_avg_pool(aa)?;
        let ebb = tape.global_avg_pool(bb)?;
        let eab = tape.global_avg_pool(ab)?;
        let maa = tape.mul(ma, ma)?;
        let mbb = tape.mul(mb, mb)?;
        let mab = tape.mul(ma, mb)?;
        let va = tape.sub(eaa, maa)?;
        let vb = tape.sub(ebb, mbb)?;
        let cov = tape.sub(eab, mab)?;

        let ln = tape.mul_scalar(mab, 2.0);
        let ln = tape.add_scalar(ln, DISTS_D1);
        let ld = tape.add(maa, mbb)?;
        let ld = tape.add_scalar(ld, DISTS_D1);
        let l = tape.div(ln, ld)?;
        let sn = tape.mul_scalar(cov, 2.0);
        let sn = tape.add_scalar(sn, DISTS_D2);
        let sd = tape.add(va, vb)?;
        let sd = tape.add_scalar(sd, DISTS_D2);
        let s = tape.div(sn, sd)?;
        let ls = tape.add(l, s)?;
        terms.push(ls);
    }
    // Every pair carries the same weight, so the weighted sum is half the
    // mean of `l + s` over pairs and batch.
    let all = tape.concat(&terms, 1)?;
    let m = tape.mean(all);
    let score = tape.mul_scalar(m, 0.5);
    Ok(tape.rsub_scalar(1.0, score))
}

/// The three-term objective on one output/target pair.
fn triple<E: Element, F: FeatureExtractor>(
    tape: &mut Tape<E>,
    x: Var,
    y: Var,
    f: &F,
) -> Result<[Var; 3]> {
    Ok([
        ssim_loss(tape, x, y)?,
        charbonnier_loss(tape, x, y)?,
        dists_loss(tape, x, y, f)?,
    ])
}

/// Loss values of one evaluation. `l_ssim`, `l_char` and `l_dists` are the
/// terms on the enhanced output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_ssim: f64,
    pub l_char: f64,
    pub l_dists: f64,
    pub l_h: f64,
    pub l_l: f64,
    pub l_t: f64,
}

/// Full objective: `L_t = L_h(o, n) + L_l(ol, cl)`, with `L_l = 0` when
/// low-exposure supervision is off. Returns the differentiable total.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<E: Element, F: FeatureExtractor>(
    tape: &mut Tape<E>,
    o: Var,
    n: Var,
    ol: Var,
    cl: Var,
    f: &F,
    use_les: bool,
) -> Result<(Var, LossTerms)> {
    let h = triple(tape, o, n, f)?;
    let hs = tape.add(h[0], h[1])?;
    let lh = tape.add(hs, h[2])?;
    let (lt, l_l) = if use_les {
        let l = triple(tape, ol, cl, f)?;
        let ls = tape.add(l[0], l[1])?;
        let ll = tape.add(ls, l[2])?;
        (tape.add(lh, ll)?, tape.scalar_value(ll))
    } else {
        (lh, 0.0)
    };
    let terms = LossTerms {
        l_ssim: tape.scalar_value(h[0]),
        l_char: tape.scalar_value(h[1]),
        l_dists: tape.scalar_value(h[2]),
        l_h: tape.scalar_value(lh),
        l_l,
        l_t: tape.scalar_value(lt),
    };
    Ok((lt, terms))
}

/// Peak signal-to-noise ratio in dB, capped at 100 dB when the mean squared
/// error is below `1e-10`.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.numel() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM, evaluated in 64 bits. Accepts `[C,H,W]` or `[N,C,H,W]`.
pub fn ssim_index(x: &Tensor, y: &Tensor) -> Result<f64> {
    let as4 = |t: &Tensor| -> Result<Tensor<f64>> {
        let t = t.cast::<f64>();
        match t.rank() {
            3 => {
                let s = t.shape().to_vec();
                t.reshape([1, s[0], s[1], s[2]])
            }
            _ => Ok(t),
        }
    };
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(as4(x)?);
    let b = tape.constant(as4(y)?);
    let l = ssim_loss(&mut tape, a, b)?;
    Ok(1.0 - tape.scalar_value(l))
}
