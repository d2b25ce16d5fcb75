//! Numeric kernels (forward and gradient) for every layer type used by the
//! 3D U-Net variants: convolution, transposed convolution, max pooling,
//! ReLU, batch/group normalization, channel concatenation, and the softmax
//! cross-entropy loss.
//!
//! All kernels are pure given explicit inputs (batch-norm train mode mutates
//! only its own [`NormState`] running statistics) and bit-deterministic:
//! internal parallelism partitions disjoint output elements and each
//! element's accumulation order is fixed, independent of the worker count.

mod activation;
mod concat;
mod conv;
mod loss;
mod norm;
mod pool;

pub use activation::{relu, relu_grad};
pub use concat::{concat_channels, concat_channels_grad};
pub use conv::{conv3d, conv3d_grad, transposed_conv3d, transposed_conv3d_grad};
pub use loss::softmax_cross_entropy;
pub use norm::{batchnorm3d, batchnorm3d_grad, groupnorm3d, groupnorm3d_grad, NormCache};
pub use pool::{maxpool3d, maxpool3d_grad};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor5};

/// Forward-pass mode: training uses batch statistics and retains what the
/// backward pass needs; evaluation uses running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution parameters: weight shaped `(c_out, c_in, k_d, k_h, k_w)` plus
/// one bias per output channel. The same struct carries weight gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    pub weight: Tensor5<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self { weight: Tensor5::zeros([c_out, c_in, k, k, k]), bias: vec![T::zero(); c_out] }
    }

    pub fn new(weight: Tensor5<T>, bias: Vec<T>) -> Result<Self> {
        if weight.n() != bias.len() {
            return Err(Error::Shape(format!(
                "conv weights declare {} output channels but bias has {} entries",
                weight.n(),
                bias.len()
            )));
        }
        let [_, _, kd, kh, kw] = weight.shape();
        if kd != kh || kh != kw {
            return Err(Error::Shape(format!("anisotropic kernel {}x{}x{} not supported", kd, kh, kw)));
        }
        Ok(Self { weight, bias })
    }

    pub fn c_out(&self) -> usize {
        self.weight.n()
    }

    pub fn c_in(&self) -> usize {
        self.weight.c()
    }

    pub fn kernel(&self) -> usize {
        self.weight.d()
    }
}

/// Normalization parameters shared by batch norm and group norm: per-channel
/// gamma/beta, running statistics (batch norm only), and the channels-per-group
/// setting (group norm only).
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
    pub channels_per_group: usize,
}

impl<T: Scalar> NormState<T> {
    /// Fresh state for `c` channels: gamma 1, beta 0, running mean 0 / var 1.
    pub fn new(c: usize, momentum: f64, epsilon: f64, channels_per_group: usize) -> Self {
        Self {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            momentum: T::from_f64_c(momentum),
            epsilon: T::from_f64_c(epsilon),
            channels_per_group,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

pub(crate) fn check_channels<T: Scalar>(op: &str, input: &Tensor5<T>, expected: usize) -> Result<()> {
    if input.c() != expected {
        return Err(Error::Shape(format!(
            "{}: input has {} channels, parameters expect {}",
            op,
            input.c(),
            expected
        )));
    }
    Ok(())
}
