//! Minimal layer library with explicit forward traces and hand-written backward passes.

mod blocks;
mod conv;
pub mod ops;
mod param;

pub use blocks::{DecoderBlock, DecoderTrace, EncoderBlock, EncoderTrace};
pub use conv::{Conv2d, DepthwiseConv2d};
pub use param::{Param, ParamKind};
