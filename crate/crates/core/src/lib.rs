//! Low-light image enhancement with learnable adaptive surround functions.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod net;
pub mod retinex;
pub mod surround;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use net::{NetConfig, NetworkParams};
pub use tensor::{Element, Tensor};
