//! Training: Adam, aligned patch sampling, the staged schedule, checkpoints
//! and the metrics log.
//!
//! Every random choice is a pure function of the seed and the step index, so
//! a run resumed from a checkpoint continues exactly as the uninterrupted run
//! would have.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::checkpoint::{self, optimizer_path};
use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::losses::{self, BlurPyramid, LossTerms};
use crate::net::{self, BlockKind, BoundParams, ForwardMode, NetConfig, NetworkParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// Number of applied updates.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().fill(0.0);
        }
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is `None`
/// (frozen) are left alone. A non-finite gradient skips the whole step and
/// returns `false`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<bool> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let shapes_match = state.m[i].shape() == p.shape() && state.v[i].shape() == p.shape();
        if !shapes_match || g.as_ref().is_some_and(|g| g.shape() != p.shape()) {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.as_ref().map_or_else(|| state.m[i].shape().to_vec(), |g| g.shape().to_vec()),
            });
        }
    }
    if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
        log::warn!("non-finite gradient in parameter {i}, update skipped");
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let step = cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            *pj = (*pj as f64 - step) as f32;
        }
    }
    Ok(true)
}

// Counters are stored as four exact 16-bit chunks, since the container
// only holds f32 values.
fn encode_u64(v: u64) -> Tensor {
    Tensor::from_vec((0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect())
}

fn decode_u64(t: &Tensor) -> Result<u64> {
    if t.shape() != [4] || t.data().iter().any(|&c| c.fract() != 0.0 || !(0.0..65536.0).contains(&c)) {
        return Err(Error::Format("malformed counter in optimizer state".into()));
    }
    Ok(t.data().iter().enumerate().map(|(i, &c)| (c as u64) << (16 * i)).sum())
}

/// Writes the optimizer state and the trainer's step counter.
pub fn save_optimizer(path: &Path, names: &[String], state: &AdamState, train_step: u64) -> Result<()> {
    let counters = [encode_u64(state.step), encode_u64(train_step)];
    let m_names: Vec<String> = names.iter().map(|n| format!("m.{n}")).collect();
    let v_names: Vec<String> = names.iter().map(|n| format!("v.{n}")).collect();
    let mut entries: Vec<(&str, &Tensor)> = vec![("adam_step", &counters[0]), ("train_step", &counters[1])];
    entries.extend(m_names.iter().map(String::as_str).zip(&state.m));
    entries.extend(v_names.iter().map(String::as_str).zip(&state.v));
    checkpoint::save_tensors(path, entries.into_iter())
}

/// Reads optimizer state written by [`save_optimizer`] for `params`. Returns
/// the state and the trainer's step counter.
pub fn load_optimizer(path: &Path, params: &NetworkParams) -> Result<(AdamState, u64)> {
    let mut named = checkpoint::load_tensors(path)?;
    let mut take = |name: &str| -> Result<Tensor> {
        let i = named
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("optimizer state lacks {name:?}")))?;
        Ok(named.swap_remove(i).1)
    };
    let adam_step = decode_u64(&take("adam_step")?)?;
    let train_step = decode_u64(&take("train_step")?)?;
    let mut state = AdamState::new(params.tensors());
    for (i, (name, p)) in params.iter().enumerate() {
        for (slot, prefix) in [(&mut state.m[i], "m"), (&mut state.v[i], "v")] {
            let t = take(&format!("{prefix}.{name}"))?;
            if t.shape() != p.shape() {
                return Err(Error::Format(format!("{prefix}.{name}: shape does not match the parameter")));
            }
            *slot = t;
        }
    }
    if let Some((extra, _)) = named.first() {
        return Err(Error::Format(format!("unexpected optimizer entry {extra:?}")));
    }
    state.step = adam_step;
    Ok((state, train_step))
}

/// Location of one crop: sample index and top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub index: usize,
    pub y0: usize,
    pub x0: usize,
}

/// Aligned crops stacked into `[B, 3, P, P]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub low: Tensor,
    pub high: Tensor,
    pub led_target: Tensor,
    pub windows: Vec<CropWindow>,
}

const BATCH_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Draws batches of random crops. The batch for a step depends only on the
/// seed and the step index.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    eligible: Vec<usize>,
    batch: usize,
    patch: usize,
    seed: u64,
}

impl BatchSampler {
    /// Images smaller than the patch are skipped with a warning.
    pub fn new(data: &PairedDataset, batch: usize, patch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || patch == 0 {
            return Err(Error::Config("batch and patch sizes must be positive".into()));
        }
        let mut eligible = Vec::new();
        for (i, s) in data.samples.iter().enumerate() {
            let sh = s.low.shape();
            if sh[2] >= patch && sh[3] >= patch {
                eligible.push(i);
            } else {
                log::warn!("{}: {}x{} is smaller than the {patch}px patch, skipped", s.name, sh[2], sh[3]);
            }
        }
        if eligible.is_empty() {
            return Err(Error::Data(format!("no image is at least {patch}x{patch}")));
        }
        Ok(BatchSampler {
            eligible,
            batch,
            patch,
            seed,
        })
    }

    pub fn windows(&self, data: &PairedDataset, step: u64) -> Vec<CropWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ BATCH_STREAM_SALT);
        rng.set_stream(step);
        (0..self.batch)
            .map(|_| {
                let index = self.eligible[rng.random_range(0..self.eligible.len())];
                let sh = data.samples[index].low.shape();
                let y0 = rng.random_range(0..=sh[2] - self.patch);
                let x0 = rng.random_range(0..=sh[3] - self.patch);
                CropWindow { index, y0, x0 }
            })
            .collect()
    }

    pub fn sample(&self, data: &PairedDataset, step: u64) -> Result<Batch> {
        let windows = self.windows(data, step);
        let p = self.patch;
        let crops = |pick: fn(&crate::data::TrainSample) -> &Tensor| -> Result<Tensor> {
            let parts = windows
                .iter()
                .map(|w| pick(&data.samples[w.index]).crop(w.y0, w.x0, p, p))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack_batch(&parts)
        };
        Ok(Batch {
            low: crops(|s| &s.low)?,
            high: crops(|s| &s.high)?,
            led_target: crops(|s| &s.led_target)?,
            windows,
        })
    }
}

/// Hyperparameters and file locations of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub adam: AdamConfig,
    pub batch: usize,
    pub patch: usize,
    /// Steps on `train_data`.
    pub steps: u64,
    /// Steps on `pretrain_data` before `train_data`; 0 disables the stage.
    pub pretrain_steps: u64,
    pub seed: u64,
    pub use_les: bool,
    /// Keep the denoiser's weights fixed.
    pub freeze_led: bool,
    /// Zero the Adam moments when the second stage begins.
    pub reset_optimizer: bool,
    pub train_data: Option<PathBuf>,
    pub pretrain_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    /// Steps between evaluations on `eval_data`; 0 disables them.
    pub eval_every: u64,
    pub checkpoint: Option<PathBuf>,
    /// Steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub metrics: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            adam: AdamConfig::default(),
            batch: 8,
            patch: 64,
            steps: 2000,
            pretrain_steps: 0,
            seed: 0,
            use_les: true,
            freeze_led: false,
            reset_optimizer: true,
            train_data: None,
            pretrain_data: None,
            eval_data: None,
            eval_every: 0,
            checkpoint: None,
            checkpoint_every: 500,
            metrics: None,
        }
    }
}

/// Keys accepted in configuration files, with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("batch", "patches per step"),
    ("patch", "patch side in pixels, at least the largest surround receptive field"),
    ("steps", "steps on train_data"),
    ("pretrain_steps", "steps on pretrain_data first (0 = no pretraining)"),
    ("seed", "seed of initialization and patch sampling"),
    ("use_les", "supervise the denoiser output (true/false)"),
    ("freeze_led", "keep denoiser weights fixed (true/false)"),
    ("reset_optimizer", "reset Adam moments between stages (true/false)"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("train_data", "paired dataset directory"),
    ("pretrain_data", "paired dataset directory for the first stage"),
    ("eval_data", "paired dataset directory for periodic PSNR/SSIM"),
    ("eval_every", "steps between evaluations (0 = never)"),
    ("checkpoint", "checkpoint path; optimizer state goes to <path>.adam"),
    ("checkpoint_every", "steps between checkpoints (0 = only at the end)"),
    ("metrics", "append-only per-step loss log"),
    ("channels", "feature width of the main branch"),
    ("led_features", "feature width of the denoiser"),
    ("dense_layers", "layers per residual dense block"),
    ("growth", "channels added per dense layer"),
    ("asf_sizes", "comma-separated surround half sizes, one block each"),
    ("blocks", "keep only the first N blocks"),
    ("eca", "channel attention (true/false)"),
    ("block", "adaptive or plain"),
];

/// Splits `key = value` lines. Blank lines and `#` comments are ignored;
/// unknown keys are errors.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !CONFIG_KEYS.iter().any(|(name, _)| *name == k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl TrainConfig {
    /// Applies settings in order on top of the defaults; later entries win.
    /// `blocks` is applied last so it composes with `asf_sizes`.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut blocks = None;
        for (k, v) in pairs {
            if k == "blocks" {
                blocks = Some(parse_value::<usize>(k, v)?);
            } else {
                cfg.set(k, v)?;
            }
        }
        if let Some(n) = blocks {
            if n == 0 || n > cfg.net.blocks() {
                return Err(Error::Config(format!(
                    "blocks must be between 1 and {}, got {n}",
                    cfg.net.blocks()
                )));
            }
            cfg.net = cfg.net.with_blocks(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = || Some(PathBuf::from(v));
        match key {
            "batch" => self.batch = parse_value(key, v)?,
            "patch" => self.patch = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "use_les" => self.use_les = parse_bool(key, v)?,
            "freeze_led" => self.freeze_led = parse_bool(key, v)?,
            "reset_optimizer" => self.reset_optimizer = parse_bool(key, v)?,
            "lr" => self.adam.lr = parse_value(key, v)?,
            "beta1" => self.adam.beta1 = parse_value(key, v)?,
            "beta2" => self.adam.beta2 = parse_value(key, v)?,
            "adam_eps" => self.adam.eps = parse_value(key, v)?,
            "train_data" => self.train_data = path(),
            "pretrain_data" => self.pretrain_data = path(),
            "eval_data" => self.eval_data = path(),
            "eval_every" => self.eval_every = parse_value(key, v)?,
            "checkpoint" => self.checkpoint = path(),
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "metrics" => self.metrics = path(),
            "channels" => self.net.channels = parse_value(key, v)?,
            "led_features" => self.net.led_features = parse_value(key, v)?,
            "dense_layers" => self.net.dense_layers = parse_value(key, v)?,
            "growth" => self.net.growth = parse_value(key, v)?,
            "asf_sizes" => {
                self.net.asf_sizes = v
                    .split(',')
                    .map(|s| parse_value(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "blocks" => {
                let n: usize = parse_value(key, v)?;
                if n == 0 || n > self.net.blocks() {
                    return Err(Error::Config(format!("blocks must be between 1 and {}", self.net.blocks())));
                }
                self.net = self.net.clone().with_blocks(n);
            }
            "eca" => self.net.use_eca = parse_bool(key, v)?,
            "block" => {
                self.net.block = match v {
                    "adaptive" => BlockKind::Adaptive,
                    "plain" => BlockKind::Plain,
                    _ => return Err(Error::Config(format!("block: expected adaptive or plain, got {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.adam.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        let rf = self.net.max_receptive_field();
        if self.patch < rf {
            return Err(Error::Config(format!(
                "patch {} is smaller than the largest surround receptive field {rf}",
                self.patch
            )));
        }
        if self.patch < 2 * losses::SSIM_WINDOW_HALF + 1 {
            return Err(Error::Config("patch is smaller than the SSIM window".into()));
        }
        Ok(())
    }
}

/// Losses of one step; `step` counts completed steps, starting at 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub terms: LossTerms,
    /// False when the update was skipped for a non-finite gradient.
    pub applied: bool,
}

impl StepRecord {
    /// `step loss l_ssim l_char l_dists l_l`, values in shortest round-trip
    /// decimal form.
    pub fn log_line(&self) -> String {
        let t = &self.terms;
        format!("{} {} {} {} {} {}", self.step, t.l_t, t.l_ssim, t.l_char, t.l_dists, t.l_l)
    }
}

/// Per-image and mean quality of predictions against references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(name, psnr, ssim)`, sorted by name.
    pub rows: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (String, &'a Tensor, &'a Tensor)>) -> Result<Self> {
        let mut rows = pairs
            .into_iter()
            .map(|(name, pred, target)| {
                Ok((name, losses::psnr(pred, target, 1.0)?, losses::ssim_index(pred, target)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::Data("nothing to evaluate".into()));
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let n = rows.len() as f64;
        let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.2).sum::<f64>() / n;
        Ok(EvalReport {
            rows,
            mean_psnr,
            mean_ssim,
        })
    }
}

/// Enhances every low-light image of `data` and scores it against the
/// normal-light one.
pub fn evaluate(params: &NetworkParams, cfg: &NetConfig, data: &PairedDataset) -> Result<EvalReport> {
    let outs = data
        .samples
        .iter()
        .map(|s| net::enhance(params, cfg, &s.low))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pairs(
        data.samples
            .iter()
            .zip(&outs)
            .map(|(s, o)| (s.name.clone(), o, &s.high)),
    )
}

/// A dataset and the number of steps spent on it.
#[derive(Clone, Copy, Debug)]
pub struct Stage<'a> {
    pub data: &'a PairedDataset,
    pub steps: u64,
}

/// Owns the parameters and optimizer state of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: NetworkParams,
    pub adam: AdamState,
    /// Completed steps.
    pub step: u64,
    extractor: BlurPyramid,
}

impl Trainer {
    /// Fresh parameters initialized from the configured seed.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = NetworkParams::init(&cfg.net, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        Self::with_params(cfg, params)
    }

    pub fn with_params(cfg: TrainConfig, params: NetworkParams) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(params.tensors());
        Ok(Trainer {
            cfg,
            params,
            adam,
            step: 0,
            extractor: BlurPyramid::default(),
        })
    }

    /// Restores parameters, optimizer state and step counter.
    pub fn resume(cfg: TrainConfig, checkpoint: &Path) -> Result<Self> {
        cfg.validate()?;
        let params = checkpoint::load_params(checkpoint, &cfg.net)?;
        let (adam, step) = load_optimizer(&optimizer_path(checkpoint), &params)?;
        let mut t = Self::with_params(cfg, params)?;
        t.adam = adam;
        t.step = step;
        Ok(t)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        checkpoint::save_params(path, &self.params)?;
        save_optimizer(&optimizer_path(path), self.params.names(), &self.adam, self.step)
    }

    fn trainable(&self, name: &str) -> bool {
        !(self.cfg.freeze_led && name.starts_with("led."))
    }

    /// Loss terms and parameter gradients on one batch. Domain failures
    /// inside the graph (a NaN reaching `sqrt`, say) surface as
    /// [`Error::Numerical`].
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(LossTerms, Vec<Option<Tensor>>)> {
        self.record(batch).map_err(|e| match e {
            Error::Domain { .. } | Error::SingularKernel => {
                Error::Numerical(format!("step {}: {e}", self.step + 1))
            }
            e => e,
        })
    }

    fn record(&self, batch: &Batch) -> Result<(LossTerms, Vec<Option<Tensor>>)> {
        let mut tape: Tape = Tape::new();
        let p = BoundParams::bind(&self.params, &mut tape, |n| self.trainable(n));
        let x = tape.constant(batch.low.clone());
        let out = net::surroundnet_forward(&mut tape, x, &p, &self.cfg.net, ForwardMode::Train)?;
        let n = tape.constant(batch.high.clone());
        let cl = tape.constant(batch.led_target.clone());
        let (lt, terms) = losses::total_loss(
            &mut tape,
            out.enhanced,
            n,
            out.led_out,
            cl,
            &self.extractor,
            self.cfg.use_les,
        )?;
        if !terms.l_t.is_finite() {
            return Err(Error::Numerical(format!("loss is {} at step {}", terms.l_t, self.step + 1)));
        }
        tape.backward(lt)?;
        let grads = p.vars().iter().map(|&v| tape.grad(v).cloned()).collect();
        Ok((terms, grads))
    }

    /// Samples the batch for the current step, updates the parameters and
    /// advances the step counter.
    pub fn train_step(&mut self, sampler: &BatchSampler, data: &PairedDataset) -> Result<StepRecord> {
        let batch = sampler.sample(data, self.step)?;
        let (terms, grads) = self.loss_and_grads(&batch)?;
        let applied = adam_step(self.params.tensors_mut(), &grads, &mut self.adam, &self.cfg.adam)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            terms,
            applied,
        })
    }

    /// Runs the remaining steps of the schedule. A non-finite loss aborts
    /// with an error; the last periodic checkpoint is left untouched.
    pub fn run(&mut self, stages: &[Stage<'_>], eval: Option<&PairedDataset>) -> Result<Vec<StepRecord>> {
        let samplers = stages
            .iter()
            .map(|s| BatchSampler::new(s.data, self.cfg.batch, self.cfg.patch, self.cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        let mut starts = Vec::with_capacity(stages.len());
        let mut total = 0u64;
        for s in stages {
            starts.push(total);
            total += s.steps;
        }
        let mut metrics = match &self.cfg.metrics {
            Some(path) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?,
            ),
            None => None,
        };
        let mut records = Vec::new();
        while self.step < total {
            let si = starts.iter().rposition(|&s| s <= self.step).unwrap_or(0);
            if si > 0 && self.step == starts[si] && self.cfg.reset_optimizer {
                log::info!("stage {} begins at step {}, optimizer reset", si + 1, self.step);
                self.adam.reset();
            }
            let rec = self.train_step(&samplers[si], stages[si].data)?;
            if let (Some(f), Some(path)) = (metrics.as_mut(), &self.cfg.metrics) {
                writeln!(f, "{}", rec.log_line()).map_err(|e| Error::io(path, e))?;
            }
            if rec.step % 100 == 0 || rec.step == 1 {
                log::info!("step {} loss {:.6} l_l {:.6}", rec.step, rec.terms.l_t, rec.terms.l_l);
            }
            records.push(rec);
            let every = self.cfg.checkpoint_every;
            if let Some(path) = &self.cfg.checkpoint {
                if every > 0 && rec.step % every == 0 {
                    self.save_checkpoint(path)?;
                }
            }
            if let Some(data) = eval {
                if self.cfg.eval_every > 0 && rec.step % self.cfg.eval_every == 0 {
                    self.log_eval(data)?;
                }
            }
        }
        if let Some(path) = &self.cfg.checkpoint {
            self.save_checkpoint(path)?;
        }
        Ok(records)
    }

    fn log_eval(&self, data: &PairedDataset) -> Result<()> {
        let r = evaluate(&self.params, &self.cfg.net, data)?;
        log::info!("step {} eval psnr {:.3} ssim {:.4}", self.step, r.mean_psnr, r.mean_ssim);
        if let Some(path) = &self.cfg.metrics {
            let mut s = path.as_os_str().to_owned();
            s.push(".eval");
            let path = PathBuf::from(s);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{} {} {}", self.step, r.mean_psnr, r.mean_ssim).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrainSample;

    fn bowl(steps: usize) -> f32 {
        let mut x = vec![Tensor::from_vec(vec![1.0f32])];
        let mut st = AdamState::new(&x);
        let cfg = AdamConfig::default();
        for _ in 0..steps {
            let g = x[0].map(|v| 2.0 * v);
            assert!(adam_step(&mut x, &[Some(g)], &mut st, &cfg).unwrap());
        }
        x[0].data()[0]
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let x = bowl(5000);
        assert!(x.abs() < 1e-3, "{x}");
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let p0 = Tensor::from_vec(vec![0.3f32, -2.0]);
        let mut p = vec![p0.clone()];
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[Some(Tensor::zeros([2]))], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0], p0);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let mut p = vec![Tensor::from_vec(vec![0.0f32, 0.0])];
        let mut st = AdamState::new(&p);
        let g = Tensor::from_vec(vec![3.0f32, -0.01]);
        let cfg = AdamConfig::default();
        let mut last = p[0].clone();
        for _ in 0..200 {
            adam_step(&mut p, &[Some(g.clone())], &mut st, &cfg).unwrap();
            let d: Vec<f32> = p[0].data().iter().zip(last.data()).map(|(a, b)| a - b).collect();
            assert!((d[0] + 1e-3).abs() < 1e-6 && (d[1] - 1e-3).abs() < 1e-6, "{d:?}");
            last = p[0].clone();
        }
    }

    #[test]
    fn adam_skips_non_finite_and_frozen() {
        let mut p = vec![Tensor::from_vec(vec![1.0f32]), Tensor::from_vec(vec![2.0f32])];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        let bad = [Some(Tensor::from_vec(vec![f32::NAN])), None];
        assert!(!adam_step(&mut p, &bad, &mut st, &cfg).unwrap());
        assert_eq!(st.step, 0);
        let ok = [Some(Tensor::from_vec(vec![1.0f32])), None];
        assert!(adam_step(&mut p, &ok, &mut st, &cfg).unwrap());
        assert_eq!(p[1].data(), &[2.0]);
        assert!(p[0].data()[0] < 1.0);
    }

    #[test]
    fn counters_round_trip() {
        for v in [0u64, 1, 65535, 65536, 1 << 40, u64::MAX] {
            assert_eq!(decode_u64(&encode_u64(v)).unwrap(), v);
        }
    }

    fn dataset(sizes: &[(usize, usize)]) -> PairedDataset {
        let samples = sizes
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| {
                let ramp = |k: f32| {
                    Tensor::new(
                        [1, 3, h, w],
                        (0..3 * h * w).map(|j| (j as f32 * 0.37 + k).sin() * 0.5 + 0.5).collect(),
                    )
                    .unwrap()
                };
                TrainSample {
                    name: format!("{i}.png"),
                    low: ramp(0.0),
                    high: ramp(1.0),
                    led_target: ramp(2.0),
                }
            })
            .collect();
        PairedDataset { samples }
    }

    #[test]
    fn batches_are_deterministic_and_aligned() {
        let data = dataset(&[(20, 24), (5, 5), (18, 30)]);
        let s = BatchSampler::new(&data, 6, 8, 11).unwrap();
        let a = s.sample(&data, 3).unwrap();
        assert_eq!(a, s.sample(&data, 3).unwrap());
        assert_ne!(a.windows, s.sample(&data, 4).unwrap().windows);
        assert!(a.windows.iter().all(|w| w.index != 1));
        for (k, w) in a.windows.iter().enumerate() {
            let src = &data.samples[w.index];
            for (batch, full) in [(&a.low, &src.low), (&a.high, &src.high), (&a.led_target, &src.led_target)] {
                assert_eq!(batch.at4(k, 2, 7, 5), full.at4(0, 2, w.y0 + 7, w.x0 + 5));
            }
        }
        assert!(BatchSampler::new(&dataset(&[(5, 5)]), 1, 8, 0).is_err());
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 9 x 9 = 81 offsets, 10^4 draws; 99th percentile of chi-square(80).
        const CRITICAL: f64 = 112.329;
        let data = dataset(&[(40, 40)]);
        let s = BatchSampler::new(&data, 100, 32, 5).unwrap();
        let mut counts = [0usize; 81];
        for step in 0..100 {
            for w in s.windows(&data, step) {
                counts[w.y0 * 9 + w.x0] += 1;
            }
        }
        let expected = 10_000.0 / 81.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < CRITICAL, "chi2 {chi2}");
    }

    #[test]
    fn config_parsing() {
        let text = "# desk run\nbatch = 4\nasf_sizes = 3, 5\nblocks = 1 # keep one\neca = false\nblock = plain\n";
        let cfg = TrainConfig::from_pairs(&parse_config(text).unwrap()).unwrap();
        assert_eq!(cfg.batch, 4);
        assert_eq!(cfg.net.asf_sizes, vec![3]);
        assert!(!cfg.net.use_eca);
        assert_eq!(cfg.net.block, BlockKind::Plain);
        assert!(parse_config("bacth = 4").is_err());
        assert!(parse_config("batch 4").is_err());
        assert!(TrainConfig::from_pairs(&parse_config("patch = 20").unwrap()).is_err());
        assert!(TrainConfig::from_pairs(&parse_config("use_les = maybe").unwrap()).is_err());
        let keys: Vec<_> = CONFIG_KEYS.iter().map(|k| k.0).collect();
        let mut cfg = TrainConfig::default();
        for k in keys {
            assert!(!matches!(cfg.set(k, ""), Err(Error::Config(m)) if m.starts_with("unknown")), "{k}");
        }
    }
}
