//! Desk-scale volumetric segmentation of additive-manufacturing defects in
//! XCT volumes: from-scratch 3D convolution kernels with hand-paired
//! gradients, three 3D U-Net variants, Adam training with a step-decay
//! schedule, XCT preprocessing and label generation, overlapping
//! sliding-window inference, and IOU evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod unet;
pub mod volume;
pub mod preprocess;
pub mod train;
pub mod tensor;

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor5};
