//! Channel concatenation for skip-connection merges.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor5};

/// Concatenates `a` and `b` along the channel axis, `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    let [an, ac, ad, ah, aw] = a.shape();
    let [bn, bc, bd, bh, bw] = b.shape();
    if (an, ad, ah, aw) != (bn, bd, bh, bw) {
        return Err(Error::Shape(format!(
            "concat_channels: non-channel axes disagree, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor5::zeros([an, ac + bc, ad, ah, aw]);
    let plane = ad * ah * aw;
    let o = out.data_mut();
    for n in 0..an {
        let dst = n * (ac + bc) * plane;
        o[dst..dst + ac * plane].copy_from_slice(&a.data()[n * ac * plane..(n + 1) * ac * plane]);
        o[dst + ac * plane..dst + (ac + bc) * plane]
            .copy_from_slice(&b.data()[n * bc * plane..(n + 1) * bc * plane]);
    }
    Ok(out)
}

/// Splits `upstream` back into the two channel blocks that fed the concat.
pub fn concat_channels_grad<T: Scalar>(
    upstream: &Tensor5<T>,
    c_a: usize,
) -> Result<(Tensor5<T>, Tensor5<T>)> {
    let [n, c, d, h, w] = upstream.shape();
    if c_a > c {
        return Err(Error::Shape(format!(
            "concat_channels_grad: first block has {} channels but upstream only {}",
            c_a, c
        )));
    }
    let c_b = c - c_a;
    let mut ga = Tensor5::zeros([n, c_a, d, h, w]);
    let mut gb = Tensor5::zeros([n, c_b, d, h, w]);
    let plane = d * h * w;
    for bn in 0..n {
        let src = bn * c * plane;
        ga.data_mut()[bn * c_a * plane..(bn + 1) * c_a * plane]
            .copy_from_slice(&upstream.data()[src..src + c_a * plane]);
        gb.data_mut()[bn * c_b * plane..(bn + 1) * c_b * plane]
            .copy_from_slice(&upstream.data()[src + c_a * plane..src + c * plane]);
    }
    Ok((ga, gb))
}
