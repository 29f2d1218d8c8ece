use rand::Rng;

use super::{BlockKind, NetConfig, ECA_KERNEL};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.into(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn conv(out: &mut Vec<ParamSpec>, name: &str, cout: usize, cin: usize, k: usize) {
    out.push(ParamSpec::new(format!("{name}.weight"), [cout, cin, k, k]));
    out.push(ParamSpec::new(format!("{name}.bias"), [cout]));
}

/// Canonical ordered list of every parameter of a configuration.
pub(crate) fn layout(cfg: &NetConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    let f = cfg.led_features;
    conv(&mut v, "led.head", f, 3, 5);
    for r in 1..=2 {
        for i in 0..cfg.dense_layers {
            conv(&mut v, &format!("led.rdb{r}.dense.{i}"), cfg.growth, f + i * cfg.growth, 3);
        }
        conv(&mut v, &format!("led.rdb{r}.fusion"), f, f + cfg.dense_layers * cfg.growth, 1);
    }
    conv(&mut v, "led.tail", 3, f, 5);
    let c = cfg.channels;
    conv(&mut v, "shallow", c, 3, 3);
    for (b, &k) in cfg.asf_sizes.iter().enumerate() {
        if cfg.block == BlockKind::Adaptive {
            v.push(ParamSpec::new(format!("blocks.{b}.asf"), [k]));
        }
        conv(&mut v, &format!("blocks.{b}.illum_conv"), c, c, 3);
        conv(&mut v, &format!("blocks.{b}.refl_conv1"), c, c, 3);
        conv(&mut v, &format!("blocks.{b}.refl_conv2"), c, c, 3);
        conv(&mut v, &format!("blocks.{b}.fusion_conv"), c, 2 * c, 1);
    }
    if cfg.use_eca {
        v.push(ParamSpec::new("eca.conv_a", [ECA_KERNEL]));
        v.push(ParamSpec::new("eca.conv_b", [ECA_KERNEL]));
    }
    conv(&mut v, "out", 3, (cfg.blocks() + 1) * c, 3);
    v
}

/// The full trainable parameter set, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl NetworkParams {
    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for convolution weights and
    /// biases and for the attention kernels; surround parameters start at one.
    pub fn init<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let specs = layout(cfg);
        let mut tensors = Vec::with_capacity(specs.len());
        let mut fan_in = 1;
        for s in &specs {
            let t = if s.name.ends_with(".asf") {
                Tensor::ones(s.shape.clone())
            } else {
                if s.name.ends_with(".weight") {
                    fan_in = s.shape[1..].iter().product();
                } else if s.name.starts_with("eca.") {
                    fan_in = ECA_KERNEL;
                }
                // Biases reuse the fan-in of the weight just before them.
                let bound = 1.0 / (fan_in as f32).sqrt();
                Tensor::uniform(s.shape.clone(), -bound, bound, rng)
            };
            tensors.push(t);
        }
        Ok(NetworkParams {
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }

    /// Every tensor zero except surround parameters, which stay at one.
    pub fn zeros(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = layout(cfg);
        let tensors = specs
            .iter()
            .map(|s| {
                if s.name.ends_with(".asf") {
                    Tensor::ones(s.shape.clone())
                } else {
                    Tensor::zeros(s.shape.clone())
                }
            })
            .collect();
        Ok(NetworkParams {
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }

    /// Assembles a parameter set from named tensors, which must match the
    /// configuration's layout exactly (order is free).
    pub fn from_named(cfg: &NetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let specs = layout(cfg);
        if named.len() != specs.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for this configuration, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; specs.len()];
        for (name, t) in named {
            let i = specs
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name:?}")))?;
            if t.shape() != specs[i].shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    specs[i].shape
                )));
            }
            if slots[i].replace(t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name:?}")));
            }
        }
        Ok(NetworkParams {
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors: slots.into_iter().map(|t| t.expect("all slots filled")).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count per top-level module (`led`, `shallow`, `blocks.i`, ...).
    pub fn count_by_module(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.iter() {
            let parts: Vec<&str> = name.split('.').collect();
            let key = if parts[0] == "blocks" {
                format!("blocks.{}", parts[1])
            } else {
                parts[0].to_string()
            };
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += t.numel(),
                None => out.push((key, t.numel())),
            }
        }
        out
    }
}

/// Parameter count of a configuration without allocating it.
pub fn param_count(cfg: &NetConfig) -> usize {
    layout(cfg).iter().map(ParamSpec::numel).sum()
}
