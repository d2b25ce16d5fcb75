//! Rectified linear unit. The subgradient at 0 is defined as 0.

use crate::tensor::{Scalar, Tensor5};

pub fn relu<T: Scalar>(input: &Tensor5<T>) -> Tensor5<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `upstream` masked by the sign of the forward input.
pub fn relu_grad<T: Scalar>(input: &Tensor5<T>, upstream: &Tensor5<T>) -> Tensor5<T> {
    assert_eq!(input.shape(), upstream.shape(), "relu_grad: shape mismatch");
    let mut out = Tensor5::zeros(input.shape());
    for ((o, &x), &u) in out.data_mut().iter_mut().zip(input.data()).zip(upstream.data()) {
        if x > T::zero() {
            *o = u;
        }
    }
    out
}
