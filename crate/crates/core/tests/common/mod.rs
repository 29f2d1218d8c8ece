//! Gradient-check probes shared by the gradient and acceptance tests: every
//! tape operation, every network block and the composed network, each at
//! 32 bits on at least 100 coordinates.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use surroundnet::autograd::{
    gradient_check_mixed, Conv2dConfig, GradCheckConfig, GradCheckReport, Padding, TapeFn,
};
use surroundnet::net::{
    arblock_forward, eca_forward, led_forward, network_gradient_check, plain_block_forward,
    rdb_forward, BlockKind, BoundParams, NetConfig, NetworkParams,
};
use surroundnet::surround::{apply_separable, build_asf_1d};
use surroundnet::{Element, Result, Tape, Tensor, Var};

const MIN_COORDS: usize = 100;

#[derive(Clone, Copy, Debug)]
pub enum Op {
    Add,
    Sub,
    Mul,
    MulBroadcast,
    Div,
    Neg,
    Abs,
    Relu,
    Sigmoid,
    Exp,
    Square,
    Ln,
    Log1p,
    Sqrt,
    AddScalar,
    MulScalar,
    RsubScalar,
    PowScalar,
    Clamp,
    Sum,
    Mean,
    Reshape,
    Conv2d,
    Conv2dDilatedGrouped,
    Conv1dValid,
    Conv1dPadded,
    Conv1dSame,
    Cumsum,
    Flip,
    Concat,
    Slice,
    GlobalAvgPool,
    ScaleChannels,
    BuildAsf,
    ApplySeparable,
}

/// `sum(w * op(inputs))` with a fixed random weight `w` shaped like the
/// op's output.
struct OpProbe {
    op: Op,
    w: Tensor,
}

fn apply<E: Element>(op: Op, t: &mut Tape<E>, v: &[Var]) -> Result<Var> {
    Ok(match op {
        Op::Add => t.add(v[0], v[1])?,
        Op::Sub => t.sub(v[0], v[1])?,
        Op::Mul | Op::MulBroadcast => t.mul(v[0], v[1])?,
        Op::Div => t.div(v[0], v[1])?,
        Op::Neg => t.neg(v[0]),
        Op::Abs => t.abs(v[0]),
        Op::Relu => t.relu(v[0]),
        Op::Sigmoid => t.sigmoid(v[0]),
        Op::Exp => t.exp(v[0]),
        Op::Square => t.square(v[0]),
        Op::Ln => t.ln(v[0])?,
        Op::Log1p => t.log1p(v[0])?,
        Op::Sqrt => t.sqrt(v[0])?,
        Op::AddScalar => t.add_scalar(v[0], 0.7),
        Op::MulScalar => t.mul_scalar(v[0], -1.3),
        Op::RsubScalar => t.rsub_scalar(2.0, v[0]),
        Op::PowScalar => t.pow_scalar(v[0], 2.5)?,
        Op::Clamp => t.clamp(v[0], -0.5, 0.5),
        Op::Sum => {
            let s = t.sum(v[0]);
            t.square(s)
        }
        Op::Mean => {
            let s = t.mean(v[0]);
            t.square(s)
        }
        Op::Reshape => t.reshape(v[0], [6, 20])?,
        Op::Conv2d => t.conv2d(
            v[0],
            v[1],
            Some(v[2]),
            Conv2dConfig {
                padding: Padding {
                    top: 1,
                    bottom: 0,
                    left: 2,
                    right: 1,
                },
                ..Conv2dConfig::default()
            },
        )?,
        Op::Conv2dDilatedGrouped => t.conv2d(v[0], v[1], Some(v[2]), Conv2dConfig::same(3, 2).with_groups(2))?,
        Op::Conv1dValid => t.conv1d(v[0], v[1], 3, 0)?,
        Op::Conv1dPadded => t.conv1d(v[0], v[1], 2, 1)?,
        Op::Conv1dSame => t.conv1d_same(v[0], v[1], 1)?,
        Op::Cumsum => t.cumsum(v[0], 2)?,
        Op::Flip => t.flip(v[0], 3)?,
        Op::Concat => t.concat(&[v[0], v[1]], 1)?,
        Op::Slice => t.slice(v[0], 3, 1, 3)?,
        Op::GlobalAvgPool => t.global_avg_pool(v[0])?,
        Op::ScaleChannels => t.scale_channels(v[0], v[1])?,
        Op::BuildAsf => build_asf_1d(t, v[0])?,
        Op::ApplySeparable => {
            let k = build_asf_1d(t, v[1])?;
            apply_separable(t, v[0], k)?
        }
    })
}

impl TapeFn for OpProbe {
    fn eval<E: Element>(&self, t: &mut Tape<E>, v: &[Var]) -> Result<Var> {
        let y = apply(self.op, t, v)?;
        let w = t.constant(self.w.cast());
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn u(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, &mut rng(seed))
}

/// Values with `0.1 <= |v| <= 1`, keeping kinks at zero out of reach.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    u(shape, 0.1, 1.0, seed).zip_map(&u(shape, -1.0, 1.0, seed + 1), |a, s| a.copysign(s)).unwrap()
}

fn inputs(op: Op) -> Vec<Tensor> {
    let s = [2, 3, 4, 5];
    match op {
        Op::Add | Op::Sub | Op::Mul => vec![u(&s, -1.0, 1.0, 1), u(&s, -1.0, 1.0, 2)],
        Op::MulBroadcast => vec![u(&s, -1.0, 1.0, 1), Tensor::scalar(0.8)],
        Op::Div => vec![u(&s, -1.0, 1.0, 1), u(&s, 0.5, 2.0, 2)],
        Op::Neg | Op::Sigmoid | Op::Exp | Op::Square | Op::AddScalar | Op::MulScalar | Op::RsubScalar => {
            vec![u(&s, -2.0, 2.0, 3)]
        }
        Op::Abs | Op::Relu => vec![away_from_zero(&s, 4)],
        Op::Ln | Op::Sqrt | Op::PowScalar => vec![u(&s, 0.2, 2.0, 5)],
        Op::Log1p => vec![u(&s, -0.5, 2.0, 6)],
        // Keep clear of the bounds at +-0.5.
        Op::Clamp => vec![away_from_zero(&s, 7).map(|v| if v.abs() > 0.45 && v.abs() < 0.55 { v * 0.5 } else { v })],
        Op::Sum | Op::Mean | Op::Reshape | Op::Cumsum | Op::Flip | Op::Slice | Op::GlobalAvgPool => {
            vec![u(&s, -1.0, 1.0, 8)]
        }
        Op::Conv2d => vec![u(&[2, 3, 5, 6], -1.0, 1.0, 9), u(&[4, 3, 3, 3], -1.0, 1.0, 10), u(&[4], -1.0, 1.0, 11)],
        Op::Conv2dDilatedGrouped => {
            vec![u(&[1, 4, 7, 6], -1.0, 1.0, 12), u(&[6, 2, 3, 3], -1.0, 1.0, 13), u(&[6], -1.0, 1.0, 14)]
        }
        Op::Conv1dValid => vec![u(&[2, 3, 4, 9], -1.0, 1.0, 15), u(&[5], -1.0, 1.0, 16)],
        Op::Conv1dPadded => vec![u(&[2, 3, 8, 3], -1.0, 1.0, 17), u(&[3], -1.0, 1.0, 18)],
        Op::Conv1dSame => vec![u(&[10, 12], -1.0, 1.0, 19), u(&[5], -1.0, 1.0, 20)],
        Op::Concat => vec![u(&s, -1.0, 1.0, 21), u(&[2, 1, 4, 5], -1.0, 1.0, 22)],
        Op::ScaleChannels => vec![u(&s, -1.0, 1.0, 23), u(&[2, 3], 0.1, 1.0, 24)],
        // A strictly positive raw vector keeps the normalizer away from zero.
        Op::BuildAsf => vec![u(&[100], 0.2, 1.5, 25)],
        Op::ApplySeparable => vec![u(&[2, 3, 7, 8], 0.0, 1.0, 26), u(&[3], 0.3, 1.5, 27)],
    }
}

pub fn check(op: Op) -> GradCheckReport {
    let xs = inputs(op);
    let coords: usize = xs.iter().map(Tensor::numel).sum();
    let mut t: Tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
    let y = apply(op, &mut t, &vars).unwrap();
    let out_shape = t.shape(y).to_vec();
    let probe = OpProbe {
        op,
        w: u(&out_shape, -1.0, 1.0, 99),
    };
    let cfg = GradCheckConfig {
        samples: Some(coords.min(200)),
        ..GradCheckConfig::default()
    };
    let r = gradient_check_mixed(&probe, &xs, &cfg).unwrap();
    assert!(r.checked >= MIN_COORDS, "{op:?}: only {} coordinates", r.checked);
    r
}


fn small_net() -> NetConfig {
    NetConfig {
        channels: 4,
        led_features: 4,
        dense_layers: 2,
        growth: 2,
        asf_sizes: vec![2, 3],
        ..NetConfig::default()
    }
}

/// Checks through ReLU layers use a small step: at `1e-3` or `1e-4` some
/// perturbations flip a pre-activation across zero and the difference
/// quotient no longer measures the derivative. The numeric side runs in
/// `f64`, so the small step costs no accuracy.
fn kinked() -> GradCheckConfig {
    GradCheckConfig {
        eps: 1e-6,
        samples: Some(200),
        ..GradCheckConfig::default()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Block {
    Led,
    Rdb,
    Adaptive,
    Plain,
    Eca,
}

struct BlockProbe {
    block: Block,
    cfg: NetConfig,
    names: Vec<String>,
    w: Tensor,
}

impl BlockProbe {
    fn output<E: Element>(&self, t: &mut Tape<E>, v: &[Var]) -> Result<Var> {
        let p = BoundParams::from_vars(self.names.clone(), v[1..].to_vec())?;
        match self.block {
            Block::Led => led_forward(t, v[0], &p, &self.cfg),
            Block::Rdb => rdb_forward(t, v[0], &p, "led.rdb1", self.cfg.dense_layers),
            Block::Adaptive => arblock_forward(t, v[0], &p, "blocks.1"),
            Block::Plain => plain_block_forward(t, v[0], &p, "blocks.1"),
            Block::Eca => eca_forward(t, v[0], &p),
        }
    }
}

impl TapeFn for BlockProbe {
    fn eval<E: Element>(&self, t: &mut Tape<E>, v: &[Var]) -> Result<Var> {
        let y = self.output(t, v)?;
        let w = t.constant(self.w.cast());
        let y = t.mul(y, w)?;
        Ok(t.sum(y))
    }
}

pub fn check_block(block: Block) -> GradCheckReport {
    let mut cfg = small_net();
    let (prefix, input) = match block {
        Block::Led => ("led.", u(&[1, 3, 10, 10], 0.05, 1.0, 30)),
        Block::Rdb => ("led.rdb1.", u(&[2, 4, 6, 6], -1.0, 1.0, 31)),
        Block::Adaptive => ("blocks.1.", u(&[1, 4, 9, 9], 0.0, 1.0, 32)),
        Block::Plain => {
            cfg.block = BlockKind::Plain;
            ("blocks.1.", u(&[1, 4, 9, 9], 0.0, 1.0, 33))
        }
        Block::Eca => ("eca.", u(&[2, 12, 5, 5], -1.0, 1.0, 34)),
    };
    let params = NetworkParams::init(&cfg, &mut rng(35)).unwrap();
    let mut names = Vec::new();
    let mut xs = vec![input];
    for (n, t) in params.iter().filter(|(n, _)| n.starts_with(prefix)) {
        names.push(n.to_string());
        xs.push(t.clone());
    }
    let mut probe = BlockProbe {
        block,
        cfg,
        names,
        w: Tensor::scalar(1.0),
    };
    let mut tape: Tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let y = probe.output(&mut tape, &vars).unwrap();
    probe.w = u(tape.shape(y), -1.0, 1.0, 36);
    let r = gradient_check_mixed(&probe, &xs, &kinked()).unwrap();
    assert!(r.checked >= MIN_COORDS, "{block:?}: {}", r.checked);
    r
}

pub const ALL_OPS: [Op; 35] = [
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::MulBroadcast,
    Op::Div,
    Op::Neg,
    Op::Abs,
    Op::Relu,
    Op::Sigmoid,
    Op::Exp,
    Op::Square,
    Op::Ln,
    Op::Log1p,
    Op::Sqrt,
    Op::AddScalar,
    Op::MulScalar,
    Op::RsubScalar,
    Op::PowScalar,
    Op::Clamp,
    Op::Sum,
    Op::Mean,
    Op::Reshape,
    Op::Conv2d,
    Op::Conv2dDilatedGrouped,
    Op::Conv1dValid,
    Op::Conv1dPadded,
    Op::Conv1dSame,
    Op::Cumsum,
    Op::Flip,
    Op::Concat,
    Op::Slice,
    Op::GlobalAvgPool,
    Op::ScaleChannels,
    Op::BuildAsf,
    Op::ApplySeparable,
];

pub const ALL_BLOCKS: [Block; 5] = [Block::Led, Block::Rdb, Block::Adaptive, Block::Plain, Block::Eca];

/// Composed-network check at one seed.
pub fn check_network(seed: u64) -> GradCheckReport {
    let r = network_gradient_check(&small_net(), 12, seed, &GradCheckConfig { seed, ..kinked() }).unwrap();
    assert!(r.checked >= MIN_COORDS);
    r
}
