//! Finite-difference verification of the composed network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{surroundnet_forward, BoundParams, ForwardMode, NetConfig, NetworkParams};
use crate::autograd::{gradient_check_mixed, GradCheckConfig, GradCheckReport, Tape, TapeFn, Var};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// `sum(w_o * enhanced) + sum(w_l * led_out)` as a function of the image
/// (input 0) and every parameter (inputs 1..), in training mode. The fixed
/// random weights make every output element matter.
pub struct NetworkProbe {
    pub cfg: NetConfig,
    pub names: Vec<String>,
    pub w_out: Tensor,
    pub w_led: Tensor,
}

impl NetworkProbe {
    pub fn inputs(&self, img: &Tensor, params: &NetworkParams) -> Vec<Tensor> {
        let mut v = vec![img.clone()];
        v.extend(params.tensors().iter().cloned());
        v
    }
}

impl TapeFn for NetworkProbe {
    fn eval<E: Element>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
        let p = BoundParams::from_vars(self.names.clone(), inputs[1..].to_vec())?;
        let out = surroundnet_forward(tape, inputs[0], &p, &self.cfg, ForwardMode::Train)?;
        let wo = tape.constant(self.w_out.cast());
        let wl = tape.constant(self.w_led.cast());
        let a = tape.mul(out.enhanced, wo)?;
        let b = tape.mul(out.led_out, wl)?;
        let a = tape.sum(a);
        let b = tape.sum(b);
        tape.add(a, b)
    }
}

/// Checks the gradient of [`NetworkProbe`] at seeded random parameters and a
/// random `[1, 3, side, side]` image in `[0.05, 1]`.
pub fn network_gradient_check(
    cfg: &NetConfig,
    side: usize,
    seed: u64,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = NetworkParams::init(cfg, &mut rng)?;
    let img = Tensor::uniform([1, 3, side, side], 0.05, 1.0, &mut rng);
    let probe = NetworkProbe {
        cfg: cfg.clone(),
        names: params.names().to_vec(),
        w_out: Tensor::uniform([1, 3, side, side], -1.0, 1.0, &mut rng),
        w_led: Tensor::uniform([1, 3, side, side], -1.0, 1.0, &mut rng),
    };
    gradient_check_mixed(&probe, &probe.inputs(&img, &params), gc)
}
