//! Image files and paired datasets.
//!
//! Images are 8-bit RGB PNG files mapped to `[0, 1]` by `/255` and held as
//! `[1, 3, H, W]` tensors. A paired dataset is a directory with `low/` and
//! `high/` subdirectories of identically named files and, optionally,
//! `led_target/` with the noise-free dark targets.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};
use rand::Rng;

use crate::error::{Error, Result};
use crate::synth::{self, DarkeningParams, FitConfig, LedSource};
use crate::tensor::Tensor;

pub const LOW_DIR: &str = "low";
pub const HIGH_DIR: &str = "high";
pub const LED_DIR: &str = "led_target";
pub const MANIFEST: &str = "manifest.txt";

/// Reads an 8-bit image as a `[1, 3, H, W]` tensor in `[0, 1]`. Grey and
/// alpha channels are expanded or dropped; 16-bit and float images are
/// rejected.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = match img {
        DynamicImage::ImageRgb8(b) => b,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) => {
            img.to_rgb8()
        }
        other => {
            return Err(Error::Data(format!(
                "{}: only 8-bit images are supported, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([1, 3, h, w], data)
}

/// Writes a `[1, 3, H, W]` or `[3, H, W]` tensor as an 8-bit RGB PNG with
/// `round(clamp(v, 0, 1) * 255)`.
pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    let (h, w) = match s {
        [1, 3, h, w] | [3, h, w] => (*h, *w),
        _ => {
            return Err(Error::InvalidShape {
                op: "save_rgb",
                shape: s.to_vec(),
                reason: "expected [1,3,H,W] or [3,H,W]".into(),
            })
        }
    };
    let d = img.data();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| to_u8(d[c * h * w + i])))
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Image files (by extension `png`) in a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Input image, normal-light target and noise-free dark target of one scene,
/// each `[1, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub name: String,
    pub low: Tensor,
    pub high: Tensor,
    pub led_target: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct PairedDataset {
    pub samples: Vec<TrainSample>,
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl PairedDataset {
    /// Loads `low/`, `high/` and, when present, `led_target/`. Without LED
    /// targets the dark image itself is used, which is correct for synthetic
    /// pairs; real pairs should have targets written by the fit command.
    pub fn load(root: &Path) -> Result<Self> {
        let low_dir = root.join(LOW_DIR);
        let high_dir = root.join(HIGH_DIR);
        let led_dir = root.join(LED_DIR);
        let has_led = led_dir.is_dir();
        if !has_led {
            log::warn!(
                "{}: no {LED_DIR}/ directory, using the low-light images as denoiser targets",
                root.display()
            );
        }
        let mut samples = Vec::new();
        for low_path in list_images(&low_dir)? {
            let name = file_name(&low_path);
            let high_path = high_dir.join(&name);
            if !high_path.is_file() {
                return Err(Error::Data(format!("{}: no matching {HIGH_DIR}/{name}", root.display())));
            }
            let low = load_rgb(&low_path)?;
            let high = load_rgb(&high_path)?;
            if low.shape() != high.shape() {
                return Err(Error::Data(format!("{name}: low and high sizes differ")));
            }
            let led_target = if has_led {
                let t = load_rgb(&led_dir.join(&name))?;
                if t.shape() != low.shape() {
                    return Err(Error::Data(format!("{name}: {LED_DIR} size differs")));
                }
                t
            } else {
                low.clone()
            };
            samples.push(TrainSample {
                name,
                low,
                high,
                led_target,
            });
        }
        if samples.is_empty() {
            return Err(Error::Data(format!("{}: no image pairs found", root.display())));
        }
        Ok(PairedDataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for s in &self.samples {
            save_rgb(&root.join(LOW_DIR).join(&s.name), &s.low)?;
            save_rgb(&root.join(HIGH_DIR).join(&s.name), &s.high)?;
            save_rgb(&root.join(LED_DIR).join(&s.name), &s.led_target)?;
        }
        Ok(())
    }
}

/// A synthetic stand-in for a real captured pair: a procedural scene is
/// darkened with sampled parameters and corrupted with Gaussian noise. As for
/// real pairs, the denoiser target is the clean image darkened with
/// parameters fitted to the noisy one.
pub fn lol_style_sample<R: Rng + ?Sized>(
    name: impl Into<String>,
    h: usize,
    w: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<(TrainSample, DarkeningParams)> {
    let high = synth::procedural_scene(h, w, rng);
    let params = synth::sample_params(rng);
    let dark = synth::darken(&high, &params)?;
    let low = synth::add_noise(&dark, noise_sigma, rng)?;
    let led_target = synth::make_led_target(LedSource::Real { low: &low, high: &high }, &FitConfig::default())?;
    let sample = TrainSample {
        name: name.into(),
        low,
        high,
        led_target,
    };
    Ok((sample, params))
}

/// How a manifest entry's parameters were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSource {
    Sampled,
    Fitted,
}

/// Writes `name alpha beta gamma source` lines.
pub fn write_manifest(path: &Path, rows: &[(String, DarkeningParams, ParamSource)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("# name alpha beta gamma source\n");
    for (name, p, src) in rows {
        let src = match src {
            ParamSource::Sampled => "sampled",
            ParamSource::Fitted => "fitted",
        };
        text.push_str(&format!("{name} {:.9} {:.9} {:.9} {src}\n", p.alpha, p.beta, p.gamma));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, DarkeningParams, ParamSource)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Data(format!("{}:{}: malformed manifest line", path.display(), no + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let p = DarkeningParams::new(num(f[1])?, num(f[2])?, num(f[3])?)?;
        let src = match f[4] {
            "sampled" => ParamSource::Sampled,
            "fitted" => ParamSource::Fitted,
            _ => return Err(bad()),
        };
        rows.push((f[0].to_string(), p, src));
    }
    Ok(rows)
}
