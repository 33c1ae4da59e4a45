//! Dense tensors with a dynamic reverse-mode tape.
//!
//! Values are 2-D (`m × n`) for the attention stacks and 4-D (`[B, C, H, W]`)
//! for the perception convolutions. A [`Tape`] is rebuilt for every forward
//! pass, so the agent count may change from call to call.

pub mod nn;
mod params;
mod tape;
mod tensor;

pub use params::{Bound, ParamId, ParamStore, PARAMS_BLOB, PARAMS_MANIFEST};
pub use tape::{Conv2dSpec, Tape, Var, LAYER_NORM_EPS, LEAKY_SLOPE};
pub use tensor::{bilinear_downsample, Tensor};
