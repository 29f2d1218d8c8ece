//! SurroundNet: a low-exposure denoiser (LED), a shallow 3x3 convolution,
//! parallel adaptive Retinex blocks, channel attention and an output
//! projection.
//!
//! Parameters live in [`NetworkParams`] as named tensors. A forward pass binds
//! them onto a [`Tape`](crate::Tape) and returns tape handles, so the same code
//! serves inference, training and gradient checks in either precision.

mod check;
mod forward;
mod params;

pub use forward::{
    arblock_forward, eca_forward, enhance, infer, led_forward, plain_block_forward, rdb_forward,
    surroundnet_forward, BoundParams, ForwardMode, Inference, NetOutput,
};
pub use check::{network_gradient_check, NetworkProbe};
pub use params::{param_count, NetworkParams, ParamSpec};

use crate::error::{Error, Result};

/// Kind of the parallel feature blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Log transform, learned surround split, enhancement branches.
    Adaptive,
    /// The same convolutions applied directly to the features, no surround.
    Plain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Width of the shallow features and of every block.
    pub channels: usize,
    /// Width of the denoiser's internal features.
    pub led_features: usize,
    /// Dense layers per residual dense block.
    pub dense_layers: usize,
    /// Channels added by each dense layer.
    pub growth: usize,
    /// Half sizes of the surround kernels; one block per entry.
    pub asf_sizes: Vec<usize>,
    pub use_eca: bool,
    pub block: BlockKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: 32,
            led_features: 16,
            dense_layers: 4,
            growth: 8,
            asf_sizes: vec![3, 7, 11, 15],
            use_eca: true,
            block: BlockKind::Adaptive,
        }
    }
}

/// Kernel length of the two channel-attention convolutions.
pub const ECA_KERNEL: usize = 9;

impl NetConfig {
    pub fn blocks(&self) -> usize {
        self.asf_sizes.len()
    }

    /// Keeps only the first `n` blocks.
    pub fn with_blocks(mut self, n: usize) -> Self {
        self.asf_sizes.truncate(n);
        self
    }

    /// Largest receptive field of any surround kernel, `2K - 1`.
    pub fn max_receptive_field(&self) -> usize {
        self.asf_sizes.iter().map(|&k| 2 * k - 1).max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.channels == 0 || self.led_features == 0 || self.growth == 0 {
            return bad("channel widths must be positive");
        }
        if self.dense_layers == 0 {
            return bad("dense_layers must be at least 1");
        }
        if !(1..=4).contains(&self.blocks()) {
            return bad("block count must be between 1 and 4");
        }
        if self.asf_sizes.contains(&0) {
            return bad("surround half sizes must be positive");
        }
        Ok(())
    }
}
