//! A small CPU autodiff engine sized for desk-scale segmentation training.
//!
//! Convolutions are lowered to im2col + gemm; everything runs single-threaded
//! and in a fixed order, so results are bit-reproducible for a given seed.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;


pub use layers::{BatchNorm2d, Conv2d, ConvBn, Ctx, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tape::{ConvGeometry, Gradients, Tape, Var};
pub use tensor::{Float, Tensor};
