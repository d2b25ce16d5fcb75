//! Per-voxel two-class softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor5};

/// Mean over all voxels of `-log softmax(logits)[target]`, with the exact
/// gradient with respect to the logits. The softmax is computed with
/// max-subtraction so extreme logits neither overflow nor underflow.
///
/// `targets` holds one class label in `{0, 1}` per voxel, row-major over
/// `(n, d, h, w)`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor5<T>,
    targets: &[u8],
) -> Result<(T, Tensor5<T>)> {
    let [n, c, d, h, w] = logits.shape();
    if c != 2 {
        return Err(Error::Shape(format!("softmax_cross_entropy: expected 2 channels, got {}", c)));
    }
    let voxels = n * d * h * w;
    if targets.len() != voxels {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy: logits cover {} voxels but targets has {}",
            voxels,
            targets.len()
        )));
    }
    if let Some(bad) = targets.iter().find(|&&t| t > 1) {
        return Err(Error::Data(format!("softmax_cross_entropy: target label {} is not in {{0,1}}", bad)));
    }
    let plane = d * h * w;
    let inv_count = T::one() / T::from_usize_c(voxels);
    let mut grad = Tensor5::zeros(logits.shape());
    let mut loss = T::zero();
    for bn in 0..n {
        let b0 = bn * c * plane;
        let b1 = b0 + plane;
        for i in 0..plane {
            let z0 = logits.data()[b0 + i];
            let z1 = logits.data()[b1 + i];
            let m = z0.max(z1);
            let e0 = (z0 - m).exp();
            let e1 = (z1 - m).exp();
            let denom = e0 + e1;
            let p0 = e0 / denom;
            let p1 = e1 / denom;
            let t = targets[bn * plane + i];
            // -log p_target = log(denom) + m - z_target
            let zt = if t == 0 { z0 } else { z1 };
            loss = loss + denom.ln() + m - zt;
            let (t0, t1) = if t == 0 { (T::one(), T::zero()) } else { (T::zero(), T::one()) };
            grad.data_mut()[b0 + i] = (p0 - t0) * inv_count;
            grad.data_mut()[b1 + i] = (p1 - t1) * inv_count;
        }
    }
    Ok((loss * inv_count, grad))
}
