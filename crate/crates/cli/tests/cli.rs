use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use surroundnet::checkpoint;
use surroundnet::data::save_rgb;
use surroundnet::net::{NetConfig, NetworkParams};
use surroundnet::synth::procedural_scene;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surroundnet"))
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scene(path: &Path, h: usize, w: usize, seed: u64) {
    save_rgb(path, &procedural_scene(h, w, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
}

#[test]
fn help_lists_every_flag() {
    let cases: &[(&str, &[&str])] = &[
        ("enhance", &["--input", "--checkpoint", "--output"]),
        (
            "train",
            &[
                "--config",
                "--set",
                "--train-data",
                "--pretrain-data",
                "--eval-data",
                "--steps",
                "--pretrain-steps",
                "--batch",
                "--patch",
                "--seed",
                "--lr",
                "--no-les",
                "--checkpoint",
                "--checkpoint-every",
                "--metrics",
                "--resume",
            ],
        ),
        ("synth", &["--input", "--procedural", "--size", "--noise", "--output", "--seed"]),
        ("fit", &["--low", "--high", "--darken", "--data", "--seed"]),
        ("eval", &["--pred", "--target", "--checkpoint", "--data"]),
        ("ssr", &["--input", "--output", "--sigma", "--scales"]),
        ("gradcheck", &["--seed", "--samples", "--eps", "--tol", "--size"]),
        ("params", &["--config", "--set"]),
    ];
    for (cmd, flags) in cases {
        let out = cli(&[cmd, "--help"]);
        assert!(out.status.success());
        let text = stdout(&out);
        for flag in *flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}:\n{text}");
        }
        assert!(text.contains("--log-level"), "{cmd}");
    }
}

#[test]
fn params_default_total_is_below_150k() {
    let out = cli(&["params"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let total: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("total"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert_eq!(total, 144_748);
    assert!(total < 150_000);
    for module in ["led", "shallow", "blocks", "eca", "out"] {
        assert!(text.lines().any(|l| l.starts_with(module)), "{module} missing:\n{text}");
    }

    let no_eca = stdout(&cli(&["params", "--set", "eca=false"]));
    assert!(no_eca.contains("144730"), "{no_eca}");
}

#[test]
fn eval_identical_dirs_hits_the_caps() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b.png", "a.png"] {
        scene(&dir.path().join("x").join(name), 20, 24, name.len() as u64 + name.as_bytes()[0] as u64);
    }
    let x = dir.path().join("x");
    let out = cli(&["eval", "--pred", p(&x), "--target", p(&x)]);
    assert!(out.status.success());
    let text = stdout(&out);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["a.png", "b.png", "mean"]);
    for r in rows {
        assert_eq!(r[1].parse::<f64>().unwrap(), 100.0);
        assert_eq!(r[2].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn fit_recovers_self_darkened_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let high = dir.path().join("high.png");
    scene(&high, 64, 64, 3);
    let (alpha, beta, gamma) = (0.93, 0.71, 2.6);
    let out = cli(&["fit", "--high", p(&high), "--darken", "0.93,0.71,2.6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let get = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap()
            .trim()
            .parse()
            .unwrap()
    };
    // Only gamma and the gain beta * alpha^gamma are determined by a pair.
    assert!((get("gamma ") - gamma).abs() < 1e-3, "{text}");
    let gain = beta * f64::powf(alpha, gamma);
    assert!((get("gain ") - gain).abs() < 1e-3, "{text}");
    assert!(get("rms ") < 1e-4, "{text}");
}

/// Zero weights except a unit shallow bias and a 3x3 output kernel of 0.08
/// on the first fused channel. Every shallow feature is then 1, the blocks
/// contribute nothing, the attention gates are sigmoid(0) = 0.5, and the
/// output is 0.08 * 0.5 times the number of in-image taps: 0.36 inside,
/// 0.24 on edges, 0.16 in corners, i.e. bytes 92, 61 and 41.
fn golden_checkpoint(path: &Path) {
    let cfg = NetConfig::default();
    let mut params = NetworkParams::zeros(&cfg).unwrap();
    let bias = params.get_mut("shallow.bias").unwrap();
    bias.data_mut().fill(1.0);
    let w = params.get_mut("out.weight").unwrap();
    let cin = w.shape()[1];
    for o in 0..3 {
        for t in 0..9 {
            w.data_mut()[o * cin * 9 + t] = 0.08;
        }
    }
    checkpoint::save_params(path, &params).unwrap();
}

#[test]
fn enhance_with_golden_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("golden.ckpt");
    golden_checkpoint(&ckpt);
    let input = dir.path().join("in");
    scene(&input.join("one.png"), 9, 13, 1);
    scene(&input.join("two.png"), 16, 7, 2);

    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = cli(&["enhance", "--input", p(&input), "--checkpoint", p(&ckpt), "--output", p(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let a = run("a");
    let b = run("b");
    for (name, h, w) in [("one.png", 9, 13), ("two.png", 16, 7)] {
        let bytes = fs::read(a.join(name)).unwrap();
        assert_eq!(bytes, fs::read(b.join(name)).unwrap());
        let img = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!((img.height() as usize, img.width() as usize), (h, w));
        for (x, y, px) in img.enumerate_pixels() {
            let edges = (x == 0 || x as usize == w - 1) as u8 + (y == 0 || y as usize == h - 1) as u8;
            let want = [92, 61, 41][edges as usize];
            assert_eq!(px.0, [want; 3], "{name} at ({x}, {y})");
        }
    }
}

#[test]
fn ssr_writes_same_sized_images() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    scene(&input, 30, 40, 4);
    let out_dir = dir.path().join("out");
    let out = cli(&["ssr", "--input", p(&input), "--output", p(&out_dir), "--scales", "3,9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(out_dir.join("in.png")).unwrap().to_rgb8();
    assert_eq!((img.width(), img.height()), (40, 30));
}

#[test]
fn synth_then_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = cli(&["synth", "--procedural", "2", "--size", "24", "--noise", "0.01", "--output", p(&data), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.txt").is_file());
    assert_eq!(fs::read_dir(data.join("low")).unwrap().count(), 2);

    let ckpt = dir.path().join("net.ckpt");
    let metrics = dir.path().join("metrics.txt");
    let config = dir.path().join("net.cfg");
    fs::write(&config, "# small network\nchannels = 4\nled_features = 4\ngrowth = 2\ndense_layers = 1\nasf_sizes = 2,3\n").unwrap();
    let out = cli(&[
        "train",
        "--config",
        p(&config),
        "--train-data",
        p(&data),
        "--steps",
        "3",
        "--batch",
        "2",
        "--patch",
        "16",
        "--checkpoint",
        p(&ckpt),
        "--metrics",
        p(&metrics),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 3);

    let out = cli(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().any(|l| l.starts_with("mean")));

    let out = cli(&["fit", "--data", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(data.join("manifest.txt")).unwrap().contains("fitted"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["params", "--set", "chanels=4"]).status.code(), Some(1));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "batch = 4\ntypo_key = 1\n").unwrap();
    let out = cli(&["params", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let missing = dir.path().join("missing.png");
    let out = cli(&["ssr", "--input", p(&missing), "--output", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    // One unreadable file among good ones: the rest are still written.
    let input = dir.path().join("mixed");
    scene(&input.join("good.png"), 8, 8, 1);
    fs::write(input.join("broken.png"), b"not an image").unwrap();
    let out_dir = dir.path().join("mixed_out");
    let out = cli(&["ssr", "--input", p(&input), "--output", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.png"));
    assert!(out_dir.join("good.png").is_file());

    let out = cli(&["gradcheck", "--samples", "120", "--tol", "1e-30"]);
    assert_eq!(out.status.code(), Some(3));
    let out = cli(&["gradcheck", "--samples", "120"]);
    assert!(out.status.success(), "{}", stdout(&out));
}
