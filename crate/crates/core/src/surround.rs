//! Surround functions: classical fixed kernels and the learnable adaptive
//! surround function (ASF).
//!
//! Every kernel here is a 1-D vector of odd length `2K-1` that sums to one, is
//! symmetric about its center, and does not decrease toward the center. The
//! 2-D surround is the outer product of the 1-D kernel with itself, so it is
//! always applied as two 1-D passes.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A normalized, symmetric, center-peaked 1-D surround kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct SurroundKernel1D {
    weights: Vec<f32>,
}

impl SurroundKernel1D {
    /// Wraps weights, checking odd length, normalization (1e-5), symmetry and
    /// center monotonicity.
    pub fn from_weights(weights: Vec<f32>) -> Result<Self> {
        let kernel = SurroundKernel1D { weights };
        kernel.validate(1e-5)?;
        Ok(kernel)
    }

    /// Normalizes a symmetric half-profile `profile[d]`, `d = 0..K`, given from
    /// the center outward.
    fn from_profile(profile: &[f64]) -> Result<Self> {
        if profile.is_empty() {
            return Err(Error::InvalidArgument("kernel half size must be >= 1".into()));
        }
        let k = profile.len();
        let total: f64 = profile[0] + 2.0 * profile[1..].iter().sum::<f64>();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::SingularKernel);
        }
        let weights = (0..2 * k - 1)
            .map(|i| {
                let d = (i as isize - (k as isize - 1)).unsigned_abs();
                (profile[d] / total) as f32
            })
            .collect();
        Ok(SurroundKernel1D { weights })
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// `K`, so that the kernel has `2K-1` taps.
    pub fn half_size(&self) -> usize {
        self.weights.len().div_ceil(2)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.weights.clone())
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let w = &self.weights;
        if w.len().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "surround kernel length {} is not odd",
                w.len()
            )));
        }
        let sum: f64 = w.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "surround kernel sums to {sum}"
            )));
        }
        let n = w.len();
        for i in 0..n / 2 {
            if w[i] != w[n - 1 - i] {
                return Err(Error::InvalidArgument(format!(
                    "surround kernel asymmetric at tap {i}"
                )));
            }
            if w[i] > w[i + 1] {
                return Err(Error::InvalidArgument(format!(
                    "surround kernel decreases toward center at tap {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Sampled Gaussian surround `exp(-d^2 / (2 sigma^2))`, normalized.
pub fn gaussian_kernel(sigma: f64, half_size: usize) -> Result<SurroundKernel1D> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let profile: Vec<f64> = (0..half_size)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    SurroundKernel1D::from_profile(&profile)
}

/// Smallest half size for which the Gaussian tail falls below `rel` of the peak.
pub fn gaussian_half_size(sigma: f64, rel: f64) -> usize {
    let reach = sigma * (-2.0 * rel.ln()).sqrt();
    reach.floor() as usize + 2
}

/// Inverse-square surround `1/d^2`; the center tap takes the `d = 1` value.
pub fn inverse_square_kernel(half_size: usize) -> Result<SurroundKernel1D> {
    let profile: Vec<f64> = (0..half_size)
        .map(|d| 1.0 / (d.max(1) as f64).powi(2))
        .collect();
    SurroundKernel1D::from_profile(&profile)
}

/// Exponential surround `exp(-|d| / c)`.
pub fn exponential_kernel(c: f64, half_size: usize) -> Result<SurroundKernel1D> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "exponential constant must be positive, got {c}"
        )));
    }
    let profile: Vec<f64> = (0..half_size).map(|d| (-(d as f64) / c).exp()).collect();
    SurroundKernel1D::from_profile(&profile)
}

/// Learnable ASF parameters: a vector of `K` raw values.
#[derive(Clone, Debug, PartialEq)]
pub struct AsfParams {
    pub raw: Tensor,
}

impl AsfParams {
    /// The all-ones initialization, which yields a triangular kernel.
    pub fn ones(half_size: usize) -> Result<Self> {
        if half_size == 0 {
            return Err(Error::InvalidArgument("ASF size must be >= 1".into()));
        }
        Ok(AsfParams {
            raw: Tensor::ones([half_size]),
        })
    }

    pub fn new(raw: Vec<f32>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidArgument("ASF size must be >= 1".into()));
        }
        Ok(AsfParams {
            raw: Tensor::from_vec(raw),
        })
    }

    pub fn half_size(&self) -> usize {
        self.raw.numel()
    }

    /// Half differences of a kernel's rising half, from which
    /// [`build_asf_1d`] reproduces that kernel.
    pub fn from_kernel(kernel: &SurroundKernel1D) -> Self {
        let half = &kernel.weights()[..kernel.half_size()];
        let raw = half
            .iter()
            .enumerate()
            .map(|(i, &w)| if i == 0 { w } else { w - half[i - 1] })
            .collect();
        AsfParams {
            raw: Tensor::from_vec(raw),
        }
    }

    /// Evaluates the kernel these parameters currently describe.
    pub fn kernel(&self) -> Result<SurroundKernel1D> {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(self.raw.clone());
        let k = build_asf_1d(&mut tape, x)?;
        Ok(SurroundKernel1D {
            weights: tape.value(k).data().to_vec(),
        })
    }
}

/// Differentiable ASF construction from a raw vector of length `K`:
/// `rise = cumsum(|x|)`, mirror `rise` without its last element, concatenate
/// to length `2K-1`, divide by the total.
pub fn build_asf_1d<E: Element>(tape: &mut Tape<E>, raw: Var) -> Result<Var> {
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 1 {
        return Err(Error::InvalidShape {
            op: "build_asf_1d",
            shape,
            reason: "ASF parameters must be a 1-D vector".into(),
        });
    }
    let k = shape[0];
    let magnitude = tape.abs(raw);
    let rise = tape.cumsum(magnitude, 0)?;
    let full = if k > 1 {
        let head = tape.slice(rise, 0, 0, k - 1)?;
        let fall = tape.flip(head, 0)?;
        tape.concat(&[rise, fall], 0)?
    } else {
        rise
    };
    let total = tape.sum(full);
    if tape.scalar_value(total) <= 0.0 {
        return Err(Error::SingularKernel);
    }
    tape.div(full, total)
}

/// Outer product `k k^T`, row-major `(2K-1) x (2K-1)`.
pub fn asf_2d(kernel: &SurroundKernel1D) -> Tensor {
    let w = kernel.weights();
    let n = w.len();
    let data = w
        .iter()
        .flat_map(|&a| w.iter().map(move |&b| (a as f64 * b as f64) as f32))
        .collect();
    Tensor::from_parts(vec![n, n], data)
}

/// Depthwise surround filtering of `[N,C,H,W]` features: the 1-D kernel runs
/// along width then height with zero padding of `K-1` per side, which equals
/// filtering with the outer-product kernel.
pub fn apply_separable<E: Element>(tape: &mut Tape<E>, feat: Var, kernel: Var) -> Result<Var> {
    let shape = tape.shape(feat).to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidShape {
            op: "apply_separable",
            shape,
            reason: "expected [N,C,H,W]".into(),
        });
    }
    let rows = tape.conv1d_same(feat, kernel, 3)?;
    tape.conv1d_same(rows, kernel, 2)
}

/// Non-differentiable convenience wrapper over [`apply_separable`].
pub fn filter_separable(image: &Tensor, kernel: &SurroundKernel1D) -> Result<Tensor> {
    let mut tape: Tape = Tape::new();
    let x = tape.constant(image.clone());
    let k = tape.constant(kernel.to_tensor());
    let y = apply_separable(&mut tape, x, k)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradient_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f32], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| (x as f64 - y).abs() <= tol)
    }

    #[test]
    fn gaussian_sigma_one() {
        let k = gaussian_kernel(1.0, 2).unwrap();
        let e = (-0.5f64).exp();
        let z = 1.0 + 2.0 * e;
        assert!(close(k.weights(), &[e / z, 1.0 / z, e / z], 1e-7));
        assert!(close(k.weights(), &[0.2741, 0.4519, 0.2741], 1e-4));
    }

    #[test]
    fn gaussian_flat_limit_and_errors() {
        let k = gaussian_kernel(1e6, 2).unwrap();
        assert!(close(k.weights(), &[1.0 / 3.0; 3], 1e-6));
        assert!(gaussian_kernel(0.0, 3).is_err());
        assert!(gaussian_kernel(-1.0, 3).is_err());
        assert!(gaussian_kernel(1.0, 0).is_err());
    }

    #[test]
    fn gaussian_half_size_reaches_tail() {
        for sigma in [15.0, 50.0, 80.0] {
            let k = gaussian_half_size(sigma, 1e-3);
            let tail = (-0.5 * ((k - 1) as f64 / sigma).powi(2)).exp();
            let inner = (-0.5 * ((k - 2) as f64 / sigma).powi(2)).exp();
            assert!(tail < 1e-3 && inner >= 1e-3, "sigma {sigma} K {k}");
        }
    }

    #[test]
    fn exponential_and_inverse_square() {
        let k = exponential_kernel(30.0, 2).unwrap();
        let e = (-1.0f64 / 30.0).exp();
        let z = 1.0 + 2.0 * e;
        assert!(close(k.weights(), &[e / z, 1.0 / z, e / z], 1e-7));
        assert!(exponential_kernel(0.0, 2).is_err());

        assert_eq!(inverse_square_kernel(1).unwrap().weights(), &[1.0]);
        // Center clamps to the d=1 value.
        let k = inverse_square_kernel(3).unwrap();
        let z = 1.0 + 2.0 * (1.0 + 0.25);
        assert!(close(k.weights(), &[0.25 / z, 1.0 / z, 1.0 / z, 1.0 / z, 0.25 / z], 1e-7));
    }

    #[test]
    fn inverse_square_decays_fastest_near_center() {
        // Normalize each profile to its center and compare the first off-center
        // drops with a Gaussian and an exponential of similar reach.
        let k = 8;
        let inv = inverse_square_kernel(k).unwrap();
        let gau = gaussian_kernel(3.0, k).unwrap();
        let exp = exponential_kernel(3.0, k).unwrap();
        let rel = |kern: &SurroundKernel1D, d: usize| {
            let c = k - 1;
            kern.weights()[c + d] / kern.weights()[c]
        };
        // 1/r^2 with the clamped center is flat to d=1, then falls to 1/4.
        assert!(rel(&inv, 2) < rel(&gau, 2));
        assert!(rel(&inv, 2) < rel(&exp, 2));
    }

    #[test]
    fn asf_toy_trace() {
        let k = AsfParams::ones(5).unwrap().kernel().unwrap();
        let want: Vec<f64> = [1, 2, 3, 4, 5, 4, 3, 2, 1].iter().map(|&v| v as f64 / 25.0).collect();
        assert!(close(k.weights(), &want, 1e-7));
        assert_eq!(k.len(), 9);
    }

    #[test]
    fn asf_single_tap_and_hand_trace() {
        assert_eq!(AsfParams::ones(1).unwrap().kernel().unwrap().weights(), &[1.0]);
        let k = AsfParams::new(vec![0.5, -0.25]).unwrap().kernel().unwrap();
        assert!(close(k.weights(), &[2.0 / 7.0, 3.0 / 7.0, 2.0 / 7.0], 1e-7));
    }

    #[test]
    fn asf_all_zero_is_singular() {
        let r = AsfParams::new(vec![0.0, 0.0, 0.0]).unwrap().kernel();
        assert!(matches!(r, Err(Error::SingularKernel)));
        assert!(AsfParams::new(vec![]).is_err());
        assert!(AsfParams::ones(0).is_err());
    }

    #[test]
    fn outer_product_kernel() {
        assert_eq!(asf_2d(&SurroundKernel1D::from_weights(vec![1.0]).unwrap()).data(), &[1.0]);
        let k = SurroundKernel1D::from_weights(vec![0.25, 0.5, 0.25]).unwrap();
        let k2 = asf_2d(&k);
        assert_eq!(k2.shape(), &[3, 3]);
        assert_eq!(k2.data()[4], 0.25);
        assert_eq!(k2.data()[0], 0.0625);
        assert!((k2.sum() - 1.0).abs() < 1e-7);
        for r in 0..3 {
            let row: f32 = k2.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((row - k.weights()[r]).abs() < 1e-7);
            for c in 0..3 {
                assert_eq!(k2.data()[r * 3 + c], k2.data()[c * 3 + r]);
                assert_eq!(k2.data()[r * 3 + c], k2.data()[(2 - r) * 3 + (2 - c)]);
            }
        }
    }

    #[test]
    fn separable_preserves_constants_in_interior() {
        let k = AsfParams::ones(3).unwrap().kernel().unwrap();
        let img = Tensor::full([1, 2, 9, 9], 0.7);
        let out = filter_separable(&img, &k).unwrap();
        for c in 0..2 {
            for y in 2..7 {
                for x in 2..7 {
                    assert!((out.at4(0, c, y, x) - 0.7).abs() < 1e-6);
                }
            }
        }
        // Zero padding darkens the corners.
        assert!(out.at4(0, 0, 0, 0) < 0.7);
    }

    #[test]
    fn asf_gradient_through_separable_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img: Tensor<f64> = Tensor::uniform([1, 2, 7, 7], 0.0, 1.0, &mut rng);
        let weights: Tensor<f64> = Tensor::uniform([1, 2, 7, 7], -1.0, 1.0, &mut rng);
        let raw = Tensor::from_vec(vec![1.0, 0.7, 1.3]);
        let report = gradient_check(
            |t: &mut Tape<f64>, raw| {
                let k = build_asf_1d(t, raw)?;
                let x = t.constant(img.clone());
                let y = apply_separable(t, x, k)?;
                let w = t.constant(weights.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &raw,
            &GradCheckConfig {
                eps: 1e-6,
                tol: 1e-6,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #[test]
        fn asf_kernels_satisfy_invariants(raw in prop::collection::vec(-3.0f32..3.0, 1..20)) {
            prop_assume!(raw.iter().any(|v| v.abs() > 1e-3));
            let k = AsfParams::new(raw.clone()).unwrap().kernel().unwrap();
            prop_assert_eq!(k.len(), 2 * raw.len() - 1);
            prop_assert!(k.validate(1e-6).is_ok());
        }

        #[test]
        fn gaussians_round_trip_through_asf(sigma in 0.5f64..20.0, half in 1usize..16) {
            let g = gaussian_kernel(sigma, half).unwrap();
            let rebuilt = AsfParams::from_kernel(&g).kernel().unwrap();
            prop_assert!(g.max_abs_diff(&rebuilt) < 1e-6);
        }
    }

    impl SurroundKernel1D {
        fn max_abs_diff(&self, other: &SurroundKernel1D) -> f32 {
            self.weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max)
        }
    }
}
