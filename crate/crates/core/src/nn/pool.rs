//! 2x2x2 stride-2 max pooling with argmax routing for the backward pass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor5};

/// Max over each 2x2x2 window. Returns the pooled tensor and, per output
/// voxel, the flat index into `input` of the winning voxel; ties break to
/// the lowest flat index. Every spatial extent must be even.
pub fn maxpool3d<T: Scalar>(input: &Tensor5<T>) -> Result<(Tensor5<T>, Vec<u32>)> {
    let [n, c, d, h, w] = input.shape();
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool3d: spatial extents ({}, {}, {}) must all be even",
            d, h, w
        )));
    }
    let oshape = [n, c, d / 2, h / 2, w / 2];
    let plane = (d / 2) * (h / 2) * (w / 2);
    let idat = input.data();
    let mut out = Tensor5::zeros(oshape);
    let mut arg = vec![0u32; out.len()];

    out.data_mut()
        .par_chunks_mut(plane)
        .zip(arg.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(block, (ochunk, achunk))| {
            let base = block * d * h * w;
            let mut oi = 0;
            for zd in 0..d / 2 {
                for zh in 0..h / 2 {
                    for zw in 0..w / 2 {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for kd in 0..2 {
                            for kh in 0..2 {
                                for kw in 0..2 {
                                    let fi = base
                                        + ((2 * zd + kd) * h + 2 * zh + kh) * w
                                        + 2 * zw
                                        + kw;
                                    if idat[fi] > best {
                                        best = idat[fi];
                                        best_i = fi;
                                    }
                                }
                            }
                        }
                        ochunk[oi] = best;
                        achunk[oi] = best_i as u32;
                        oi += 1;
                    }
                }
            }
        });
    Ok((out, arg))
}

/// Routes `upstream` back to the stored argmax voxels.
pub fn maxpool3d_grad<T: Scalar>(
    input_shape: [usize; 5],
    argmax: &[u32],
    upstream: &Tensor5<T>,
) -> Result<Tensor5<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "maxpool3d_grad: upstream has {} voxels but argmax recorded {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor5::zeros(input_shape);
    let g = grad.data_mut();
    for (u, &a) in upstream.data().iter().zip(argmax) {
        g[a as usize] = g[a as usize] + *u;
    }
    Ok(grad)
}
