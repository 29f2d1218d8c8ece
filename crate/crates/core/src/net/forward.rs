use super::{BlockKind, NetConfig, NetworkParams};
use crate::autograd::{Conv2dConfig, Tape, Var};
use crate::error::{Error, Result};
use crate::surround::{apply_separable, build_asf_1d};
use crate::tensor::{Element, Tensor};

/// Parameters recorded on a tape, addressable by canonical name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    /// Records every tensor as a leaf; `trainable(name)` decides which ones
    /// receive gradients.
    pub fn bind<E: Element>(
        params: &NetworkParams,
        tape: &mut Tape<E>,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| tape.leaf(t.cast(), trainable(name)))
            .collect();
        BoundParams {
            names: params.names().to_vec(),
            vars,
        }
    }

    /// Wraps handles already on a tape, one per name, in canonical order.
    pub fn from_vars(names: Vec<String>, vars: Vec<Var>) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter names for {} handles",
                names.len(),
                vars.len()
            )));
        }
        Ok(BoundParams { names, vars })
    }

    /// Every parameter trainable.
    pub fn bind_all<E: Element>(params: &NetworkParams, tape: &mut Tape<E>) -> Self {
        Self::bind(params, tape, |_| true)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name:?}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Training keeps the raw output for the loss; inference clamps to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    pub enhanced: Var,
    /// Denoised low-light image from the LED.
    pub led_out: Var,
}

fn conv<E: Element>(
    tape: &mut Tape<E>,
    p: &BoundParams,
    name: &str,
    x: Var,
    cfg: Conv2dConfig,
) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), cfg)
}

fn check_channels<E: Element>(tape: &Tape<E>, x: Var, want: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected [N,C,H,W]".into(),
        });
    }
    if s[1] != want {
        return Err(Error::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: format!("expected {want} channels"),
        });
    }
    Ok(())
}

/// Residual dense block: each 3x3 layer sees every earlier feature, a 1x1
/// fusion maps back to the input width, and the input is added back.
pub fn rdb_forward<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    p: &BoundParams,
    prefix: &str,
    dense_layers: usize,
) -> Result<Var> {
    let fusion_w = p.get(&format!("{prefix}.fusion.weight"))?;
    check_channels(tape, x, tape.shape(fusion_w)[0], "rdb_forward")?;
    let mut feats = vec![x];
    for i in 0..dense_layers {
        let input = if feats.len() == 1 { x } else { tape.concat(&feats, 1)? };
        let y = conv(tape, p, &format!("{prefix}.dense.{i}"), input, Conv2dConfig::same(3, 1))?;
        feats.push(tape.relu(y));
    }
    let all = tape.concat(&feats, 1)?;
    let fused = conv(tape, p, &format!("{prefix}.fusion"), all, Conv2dConfig::default())?;
    tape.add(fused, x)
}

/// Low-exposure denoiser with a global input-to-output residual.
pub fn led_forward<E: Element>(
    tape: &mut Tape<E>,
    img: Var,
    p: &BoundParams,
    cfg: &NetConfig,
) -> Result<Var> {
    check_channels(tape, img, 3, "led_forward")?;
    let h = conv(tape, p, "led.head", img, Conv2dConfig::same(5, 1))?;
    let h = tape.relu(h);
    let h = rdb_forward(tape, h, p, "led.rdb1", cfg.dense_layers)?;
    let h = rdb_forward(tape, h, p, "led.rdb2", cfg.dense_layers)?;
    let t = conv(tape, p, "led.tail", h, Conv2dConfig::same(5, 1))?;
    tape.add(t, img)
}

fn enhance_branches<E: Element>(
    tape: &mut Tape<E>,
    illum: Var,
    refl: Var,
    p: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let ei = conv(tape, p, &format!("{prefix}.illum_conv"), illum, Conv2dConfig::same(3, 1))?;
    let ei = tape.relu(ei);
    let er = conv(tape, p, &format!("{prefix}.refl_conv1"), refl, Conv2dConfig::same(3, 2))?;
    let er = tape.relu(er);
    let er = conv(tape, p, &format!("{prefix}.refl_conv2"), er, Conv2dConfig::same(3, 2))?;
    let er = tape.relu(er);
    let both = tape.concat(&[ei, er], 1)?;
    conv(tape, p, &format!("{prefix}.fusion_conv"), both, Conv2dConfig::default())
}

/// Adaptive Retinex block over non-negative features: the log features are
/// split into a surround-filtered illumination and the residual reflectance,
/// each is enhanced on its own branch, and a 1x1 convolution fuses them.
pub fn arblock_forward<E: Element>(
    tape: &mut Tape<E>,
    feat: Var,
    p: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    if let Some(v) = tape.value(feat).data().iter().find(|&&v| !(v >= E::zero())) {
        return Err(Error::Domain {
            op: "arblock_forward",
            reason: format!("feature value {v} is negative"),
        });
    }
    let x_log = tape.log1p(feat)?;
    let kernel = build_asf_1d(tape, p.get(&format!("{prefix}.asf"))?)?;
    let illum = apply_separable(tape, x_log, kernel)?;
    let refl = tape.sub(x_log, illum)?;
    enhance_branches(tape, illum, refl, p, prefix)
}

/// Ablation block: the same convolutions on the raw features.
pub fn plain_block_forward<E: Element>(
    tape: &mut Tape<E>,
    feat: Var,
    p: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    enhance_branches(tape, feat, feat, p, prefix)
}

/// Channel gating: pooled statistics, two bias-free 1-D convolutions along
/// the channel axis, sigmoid.
pub fn eca_forward<E: Element>(tape: &mut Tape<E>, feat: Var, p: &BoundParams) -> Result<Var> {
    let g = tape.global_avg_pool(feat)?;
    let g = tape.conv1d_same(g, p.get("eca.conv_a")?, 1)?;
    let g = tape.conv1d_same(g, p.get("eca.conv_b")?, 1)?;
    let w = tape.sigmoid(g);
    tape.scale_channels(feat, w)
}

pub fn surroundnet_forward<E: Element>(
    tape: &mut Tape<E>,
    img: Var,
    p: &BoundParams,
    cfg: &NetConfig,
    mode: ForwardMode,
) -> Result<NetOutput> {
    let led_out = led_forward(tape, img, p, cfg)?;
    let s = conv(tape, p, "shallow", led_out, Conv2dConfig::same(3, 1))?;
    let s = tape.relu(s);
    let mut parts = vec![s];
    for b in 0..cfg.blocks() {
        let prefix = format!("blocks.{b}");
        let y = match cfg.block {
            BlockKind::Adaptive => arblock_forward(tape, s, p, &prefix)?,
            BlockKind::Plain => plain_block_forward(tape, s, p, &prefix)?,
        };
        parts.push(y);
    }
    let mut fused = tape.concat(&parts, 1)?;
    if cfg.use_eca {
        fused = eca_forward(tape, fused, p)?;
    }
    let out = conv(tape, p, "out", fused, Conv2dConfig::same(3, 1))?;
    let enhanced = match mode {
        ForwardMode::Train => out,
        ForwardMode::Infer => tape.clamp(out, 0.0, 1.0),
    };
    Ok(NetOutput { enhanced, led_out })
}

/// Inference-mode results as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Enhanced image, clamped to `[0, 1]`.
    pub enhanced: Tensor,
    pub led_out: Tensor,
}

/// Runs the network on a `[N, 3, H, W]` image in inference mode.
pub fn infer(params: &NetworkParams, cfg: &NetConfig, img: &Tensor) -> Result<Inference> {
    let mut tape: Tape = Tape::new();
    let p = BoundParams::bind(params, &mut tape, |_| false);
    let x = tape.constant(img.clone());
    let out = surroundnet_forward(&mut tape, x, &p, cfg, ForwardMode::Infer)?;
    Ok(Inference {
        enhanced: tape.value(out.enhanced).clone(),
        led_out: tape.value(out.led_out).clone(),
    })
}

pub fn enhance(params: &NetworkParams, cfg: &NetConfig, img: &Tensor) -> Result<Tensor> {
    Ok(infer(params, cfg, img)?.enhanced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetConfig {
        NetConfig {
            channels: 4,
            led_features: 4,
            dense_layers: 2,
            growth: 2,
            asf_sizes: vec![2, 3],
            ..NetConfig::default()
        }
    }

    #[test]
    fn zero_weights_make_led_and_rdb_identities() {
        let cfg = small();
        let params = NetworkParams::zeros(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform([1, 3, 9, 7], 0.0, 1.0, &mut rng);
        let mut t: Tape = Tape::new();
        let p = BoundParams::bind_all(&params, &mut t);
        let x = t.constant(img.clone());
        let y = led_forward(&mut t, x, &p, &cfg).unwrap();
        assert_eq!(t.value(y), &img);
        let f = t.constant(Tensor::uniform([2, 4, 5, 6], -1.0, 1.0, &mut rng));
        let r = rdb_forward(&mut t, f, &p, "led.rdb1", cfg.dense_layers).unwrap();
        assert_eq!(t.value(r), t.value(f));
    }

    #[test]
    fn zero_fusion_gives_zero_block_output() {
        let cfg = small();
        let mut params = NetworkParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for n in ["blocks.0.fusion_conv.weight", "blocks.0.fusion_conv.bias"] {
            params.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let mut t: Tape = Tape::new();
        let p = BoundParams::bind_all(&params, &mut t);
        let f = t.constant(Tensor::uniform([1, 4, 8, 8], 0.0, 2.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let y = arblock_forward(&mut t, f, &p, "blocks.0").unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn arblock_rejects_negative_features() {
        let cfg = small();
        let params = NetworkParams::zeros(&cfg).unwrap();
        let mut t: Tape = Tape::new();
        let p = BoundParams::bind_all(&params, &mut t);
        let f = t.constant(Tensor::full([1, 4, 4, 4], -0.1));
        assert!(matches!(
            arblock_forward(&mut t, f, &p, "blocks.0"),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn zero_eca_kernels_halve_features() {
        let cfg = small();
        let params = NetworkParams::zeros(&cfg).unwrap();
        let mut t: Tape = Tape::new();
        let p = BoundParams::bind_all(&params, &mut t);
        let fv = Tensor::uniform([2, 12, 3, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let f = t.constant(fv.clone());
        let y = eca_forward(&mut t, f, &p).unwrap();
        assert!(t.value(y).max_abs_diff(&fv.map(|v| v * 0.5)) == 0.0);
    }

    #[test]
    fn output_shape_matches_input_and_is_clamped() {
        for cfg in [
            small(),
            NetConfig {
                block: BlockKind::Plain,
                use_eca: false,
                ..small()
            },
        ] {
            let params = NetworkParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let mut t: Tape = Tape::new();
            let p = BoundParams::bind_all(&params, &mut t);
            let img = t.constant(Tensor::uniform([2, 3, 11, 13], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
            let out = surroundnet_forward(&mut t, img, &p, &cfg, ForwardMode::Infer).unwrap();
            assert_eq!(t.shape(out.enhanced), &[2, 3, 11, 13]);
            assert_eq!(t.shape(out.led_out), &[2, 3, 11, 13]);
            assert!(t.value(out.enhanced).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
