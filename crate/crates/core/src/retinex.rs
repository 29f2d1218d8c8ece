//! Single- and multi-scale Retinex baselines in image space.
//!
//! Reflectance is `log(I + delta) - S * log(I + delta)` with `S` a surround
//! kernel applied separably. The surround runs over the log image, not the
//! image itself.

use crate::error::{Error, Result};
use crate::surround::{filter_separable, gaussian_half_size, gaussian_kernel, SurroundKernel1D};
use crate::tensor::Tensor;

/// One 8-bit quantization step; keeps the logarithm finite at black pixels.
pub const LOG_OFFSET: f32 = 1.0 / 255.0;

/// Single-scale Retinex reflectance of an `[N,C,H,W]` image.
pub fn ssr(image: &Tensor, kernel: &SurroundKernel1D) -> Result<Tensor> {
    ssr_with_offset(image, kernel, LOG_OFFSET)
}

pub fn ssr_with_offset(image: &Tensor, kernel: &SurroundKernel1D, delta: f32) -> Result<Tensor> {
    if let Some(v) = image.data().iter().find(|&&v| !(v + delta > 0.0)) {
        return Err(Error::Domain {
            op: "ssr",
            reason: format!("pixel {v} is not positive after offset {delta}"),
        });
    }
    let log_img = image.map(|v| (v + delta).ln());
    let surround = filter_separable(&log_img, kernel)?;
    log_img.zip_map(&surround, |a, b| a - b)
}

/// Weighted sum of single-scale reflectances. Weights must sum to one.
pub fn msr(image: &Tensor, kernels: &[SurroundKernel1D], weights: &[f64]) -> Result<Tensor> {
    if kernels.is_empty() || kernels.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "msr needs one weight per kernel ({} kernels, {} weights)",
            kernels.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "msr weights sum to {total}, expected 1"
        )));
    }
    let mut acc = vec![0.0f64; image.numel()];
    for (kernel, &w) in kernels.iter().zip(weights) {
        let r = ssr(image, kernel)?;
        for (a, &v) in acc.iter_mut().zip(r.data()) {
            *a += w * v as f64;
        }
    }
    Tensor::new(image.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

/// Gaussian kernels at the given scales, each wide enough that its tail is
/// below 1e-3 of its peak.
pub fn gaussian_scales(sigmas: &[f64]) -> Result<Vec<SurroundKernel1D>> {
    sigmas
        .iter()
        .map(|&s| gaussian_kernel(s, gaussian_half_size(s, 1e-3)))
        .collect()
}

/// The classic three-scale configuration: sigma 15, 50 and 80, equal weights.
pub fn msr_default(image: &Tensor) -> Result<Tensor> {
    let kernels = gaussian_scales(&[15.0, 50.0, 80.0])?;
    msr(image, &kernels, &[1.0 / 3.0; 3])
}

/// Linearly maps each channel of each sample onto `[0, 1]` for display.
pub fn stretch_to_unit(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 4 {
        return Err(Error::InvalidShape {
            op: "stretch_to_unit",
            shape: t.shape().to_vec(),
            reason: "expected [N,C,H,W]".into(),
        });
    }
    let plane = t.shape()[2] * t.shape()[3];
    let mut out = t.data().to_vec();
    for chunk in out.chunks_exact_mut(plane) {
        let lo = chunk.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        for v in chunk {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}
