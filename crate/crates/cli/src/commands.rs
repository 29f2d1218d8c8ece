use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use surroundnet::autograd::GradCheckConfig;
use surroundnet::checkpoint;
use surroundnet::data::{
    self, list_images, load_rgb, save_rgb, write_manifest, PairedDataset, ParamSource, TrainSample,
};
use surroundnet::net::{self, network_gradient_check, NetConfig, NetworkParams};
use surroundnet::retinex;
use surroundnet::synth::{self, DarkeningParams, FitConfig};
use surroundnet::train::{self, parse_config, EvalReport, Stage, TrainConfig, Trainer};
use surroundnet::{Error, Tensor};

use crate::{Command, EvalArgs, FitArgs, GradcheckArgs, NetArgs, SsrArgs, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
    /// Some inputs of a batch command failed; the messages were printed.
    Files(usize),
    Check(String),
}

impl CliError {
    /// 1 usage, 2 data, 3 numerical.
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) => match e {
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                Error::Numerical(_) | Error::Domain { .. } | Error::SingularKernel => 3,
                _ => 2,
            },
            CliError::Files(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Files(n) => write!(f, "{n} input(s) failed"),
            CliError::Check(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Enhance {
            input,
            checkpoint,
            output,
        } => enhance(&input, &checkpoint, &output),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Ssr(a) => ssr(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
    }
}

/// A single file, or the PNG files of a directory sorted by name.
fn input_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let files = list_images(path)?;
        if files.is_empty() {
            return Err(Error::Data(format!("{}: no PNG images", path.display())).into());
        }
        Ok(files)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::Data(format!("{}: no such file or directory", path.display())).into())
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())).into())
}

/// Applies `f` to every input and writes the result under `output` with the
/// same name. Failures are listed and do not stop the other files.
fn map_images(input: &Path, output: &Path, f: impl Fn(&Tensor) -> surroundnet::Result<Tensor>) -> Result<()> {
    let files = input_files(input)?;
    create_dir(output)?;
    let mut failed = 0;
    for path in &files {
        let dst = output.join(file_name(path));
        match load_rgb(path).and_then(|img| f(&img)).and_then(|out| save_rgb(&dst, &out)) {
            Ok(()) => log::info!("{} -> {}", path.display(), dst.display()),
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Files(failed));
    }
    Ok(())
}

fn enhance(input: &Path, ckpt: &Path, output: &Path) -> Result<()> {
    let (cfg, params) = checkpoint::load_params_any(ckpt)?;
    map_images(input, output, |img| net::enhance(&params, &cfg, img))
}

/// Configuration file entries, then explicit flags, then `--set` overrides.
fn config_pairs(net: &NetArgs, flags: Vec<(&str, String)>) -> Result<Vec<(String, String)>> {
    let mut pairs = match &net.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => Vec::new(),
    };
    pairs.extend(flags.into_iter().map(|(k, v)| (k.to_string(), v)));
    for s in &net.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let line = format!("{} = {}", k.trim(), v.trim());
        pairs.extend(parse_config(&line)?);
    }
    Ok(pairs)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut flags: Vec<(&str, String)> = Vec::new();
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    for (k, v) in [
        ("train_data", path(&a.train_data)),
        ("pretrain_data", path(&a.pretrain_data)),
        ("eval_data", path(&a.eval_data)),
        ("checkpoint", path(&a.checkpoint)),
        ("metrics", path(&a.metrics)),
        ("steps", a.steps.map(|v| v.to_string())),
        ("pretrain_steps", a.pretrain_steps.map(|v| v.to_string())),
        ("batch", a.batch.map(|v| v.to_string())),
        ("patch", a.patch.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("checkpoint_every", a.checkpoint_every.map(|v| v.to_string())),
        ("use_les", a.no_les.then(|| "false".to_string())),
    ] {
        if let Some(v) = v {
            flags.push((k, v));
        }
    }
    let cfg = TrainConfig::from_pairs(&config_pairs(&a.net, flags)?)?;
    let train_dir = cfg
        .train_data
        .clone()
        .ok_or_else(|| CliError::Usage("train_data is required".into()))?;
    let data = PairedDataset::load(&train_dir)?;
    let pretrain = match (&cfg.pretrain_data, cfg.pretrain_steps) {
        (_, 0) => None,
        (Some(dir), _) => Some(PairedDataset::load(dir)?),
        (None, _) => return Err(CliError::Usage("pretrain_steps needs pretrain_data".into())),
    };
    let eval = cfg.eval_data.as_deref().map(PairedDataset::load).transpose()?;
    if cfg.checkpoint.is_none() {
        log::warn!("no checkpoint path given, the trained network will not be saved");
    }
    let mut trainer = if a.resume {
        let ckpt = cfg
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::Usage("--resume needs a checkpoint path".into()))?;
        Trainer::resume(cfg.clone(), &ckpt)?
    } else {
        Trainer::new(cfg.clone())?
    };
    let mut stages = Vec::new();
    if let Some(p) = &pretrain {
        stages.push(Stage {
            data: p,
            steps: cfg.pretrain_steps,
        });
    }
    stages.push(Stage {
        data: &data,
        steps: cfg.steps,
    });
    let records = trainer.run(&stages, eval.as_ref())?;
    match records.last() {
        Some(r) => println!("step {} loss {}", r.step, r.terms.l_t),
        None => println!("nothing to do: already at step {}", trainer.step),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let highs: Vec<(String, Tensor)> = match (&a.input, a.procedural) {
        (Some(dir), None) => input_files(dir)?
            .iter()
            .map(|p| Ok((file_name(p), load_rgb(p)?)))
            .collect::<Result<_>>()?,
        (None, Some(n)) => (0..n)
            .map(|i| (format!("scene_{i:04}.png"), synth::procedural_scene(a.size, a.size, &mut rng)))
            .collect(),
        _ => return Err(CliError::Usage("give exactly one of --input or --procedural".into())),
    };
    let mut samples = Vec::new();
    let mut rows = Vec::new();
    for (name, high) in highs {
        let p = synth::sample_params(&mut rng);
        let dark = synth::darken(&high, &p)?;
        let low = if a.noise > 0.0 {
            synth::add_noise(&dark, a.noise, &mut rng)?
        } else {
            dark.clone()
        };
        rows.push((name.clone(), p, ParamSource::Sampled));
        samples.push(TrainSample {
            name,
            low,
            high,
            led_target: dark,
        });
    }
    let set = PairedDataset { samples };
    set.save(&a.output)?;
    write_manifest(&a.output.join(data::MANIFEST), &rows)?;
    println!("wrote {} pairs to {}", set.len(), a.output.display());
    Ok(())
}

fn print_fit(p: &DarkeningParams, rms: f64) {
    println!("alpha {:.6}", p.alpha);
    println!("beta {:.6}", p.beta);
    println!("gamma {:.6}", p.gamma);
    println!("gain {:.6}", p.gain());
    println!("rms {:.6e}", rms);
}

fn fit(a: FitArgs) -> Result<()> {
    let cfg = FitConfig {
        seed: a.seed,
        ..FitConfig::default()
    };
    match (&a.low, &a.high, &a.data) {
        (low, Some(high), None) => {
            let high = load_rgb(high)?;
            let low = match (low, &a.darken) {
                (Some(low), None) => load_rgb(low)?,
                (None, Some(p)) if p.len() == 3 => synth::darken(&high, &DarkeningParams::new(p[0], p[1], p[2])?)?,
                _ => return Err(CliError::Usage("give --low, or --darken with three values, with --high".into())),
            };
            let r = synth::fit_darkening_params(&low, &high, &cfg)?;
            print_fit(&r.params, r.rms);
            if r.ill_posed {
                log::warn!("the pair is nearly constant; gamma is poorly determined");
            }
            Ok(())
        }
        (None, None, Some(dir)) => {
            let mut set = PairedDataset::load(dir)?;
            let mut rows = Vec::new();
            for s in &mut set.samples {
                let r = synth::fit_darkening_params(&s.low, &s.high, &cfg)?;
                let p = r.params;
                println!(
                    "{} alpha {:.6} beta {:.6} gamma {:.6} gain {:.6} rms {:.4e}",
                    s.name,
                    p.alpha,
                    p.beta,
                    p.gamma,
                    p.gain(),
                    r.rms
                );
                s.led_target = synth::darken(&s.high, &p)?;
                save_rgb(&dir.join(data::LED_DIR).join(&s.name), &s.led_target)?;
                rows.push((s.name.clone(), p, ParamSource::Fitted));
            }
            write_manifest(&dir.join(data::MANIFEST), &rows)?;
            Ok(())
        }
        _ => Err(CliError::Usage("give --high with --low or --darken, or --data".into())),
    }
}

fn print_report(r: &EvalReport) {
    let width = r.rows.iter().map(|row| row.0.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:>9}  {:>8}", "name", "psnr", "ssim");
    for (name, p, s) in &r.rows {
        println!("{name:<width$}  {p:>9.4}  {s:>8.6}");
    }
    println!("{:<width$}  {:>9.4}  {:>8.6}", "mean", r.mean_psnr, r.mean_ssim);
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = match (&a.pred, &a.target, &a.checkpoint, &a.data) {
        (Some(pred), Some(target), None, None) => {
            let pairs = if pred.is_dir() {
                input_files(pred)?
                    .into_iter()
                    .map(|p| {
                        let t = target.join(file_name(&p));
                        if !t.is_file() {
                            return Err(Error::Data(format!("{}: no reference image", t.display())).into());
                        }
                        Ok((p, t))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![(pred.clone(), target.clone())]
            };
            let images = pairs
                .iter()
                .map(|(p, t)| Ok((file_name(p), load_rgb(p)?, load_rgb(t)?)))
                .collect::<Result<Vec<_>>>()?;
            EvalReport::from_pairs(images.iter().map(|(n, p, t)| (n.clone(), p, t)))?
        }
        (None, None, Some(ckpt), Some(dir)) => {
            let (cfg, params) = checkpoint::load_params_any(ckpt)?;
            train::evaluate(&params, &cfg, &PairedDataset::load(dir)?)?
        }
        _ => return Err(CliError::Usage("give --pred and --target, or --checkpoint and --data".into())),
    };
    print_report(&report);
    Ok(())
}

fn ssr(a: SsrArgs) -> Result<()> {
    let (kernels, weights) = match &a.scales {
        Some(scales) if !scales.is_empty() => {
            let n = scales.len();
            (retinex::gaussian_scales(scales)?, vec![1.0 / n as f64; n])
        }
        Some(_) => return Err(CliError::Usage("--scales needs at least one value".into())),
        None => (retinex::gaussian_scales(&[a.sigma])?, vec![1.0]),
    };
    map_images(&a.input, &a.output, |img| {
        let r = retinex::msr(img, &kernels, &weights)?;
        retinex::stretch_to_unit(&r)
    })
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = NetConfig {
        channels: 4,
        led_features: 4,
        dense_layers: 2,
        growth: 2,
        asf_sizes: vec![2, 3],
        ..NetConfig::default()
    };
    let gc = GradCheckConfig {
        eps: a.eps,
        tol: a.tol,
        samples: Some(a.samples),
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let r = network_gradient_check(&cfg, a.size, a.seed, &gc)?;
    println!(
        "checked {} coordinates, max relative error {:.3e} (tolerance {:.1e})",
        r.checked, r.max_rel_err, a.tol
    );
    if r.passed {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed at {:?}: analytic {} numeric {}",
            r.worst, r.analytic_at_worst, r.numeric_at_worst
        )))
    }
}

fn params(a: NetArgs) -> Result<()> {
    let cfg = TrainConfig::from_pairs(&config_pairs(&a, Vec::new())?)?.net;
    let p = NetworkParams::zeros(&cfg)?;
    for (module, n) in p.count_by_module() {
        println!("{module:<10} {n:>8}");
    }
    println!("{:<10} {:>8}", "total", p.param_count());
    Ok(())
}
