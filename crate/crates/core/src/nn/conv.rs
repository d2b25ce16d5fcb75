//! 3D convolution (cross-correlation convention, no kernel flip) and the
//! 2x2x2 stride-2 transposed convolution used for decoder upsampling, each
//! with exact gradient counterparts.

use rayon::prelude::*;

use super::{check_channels, ConvWeights};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor5};

fn out_extent(input: usize, pad: usize, k: usize, stride: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn check_conv_args<T: Scalar>(
    input: &Tensor5<T>,
    w: &ConvWeights<T>,
    padding: [usize; 3],
    stride: [usize; 3],
) -> Result<[usize; 5]> {
    check_channels("conv3d", input, w.c_in())?;
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::Config(format!("conv3d: stride must be >= 1, got {:?}", stride)));
    }
    let k = w.kernel();
    let [_, _, d, h, wd] = input.shape();
    for (axis, &ext) in [d, h, wd].iter().enumerate() {
        if ext + 2 * padding[axis] < k {
            return Err(Error::Shape(format!(
                "conv3d: padded input extent {} on axis {} is smaller than kernel {}",
                ext + 2 * padding[axis],
                axis,
                k
            )));
        }
    }
    Ok([
        input.n(),
        w.c_out(),
        out_extent(d, padding[0], k, stride[0]),
        out_extent(h, padding[1], k, stride[1]),
        out_extent(wd, padding[2], k, stride[2]),
    ])
}

/// Cross-correlation of `input` with `w`, bias added per output channel.
///
/// Output spatial extent per axis is `floor((in + 2 pad - k) / stride) + 1`;
/// with k=3, pad=1, stride=1 the spatial shape is preserved.
pub fn conv3d<T: Scalar>(
    input: &Tensor5<T>,
    w: &ConvWeights<T>,
    padding: [usize; 3],
    stride: [usize; 3],
) -> Result<Tensor5<T>> {
    let oshape = check_conv_args(input, w, padding, stride)?;
    let [_, c_out, od, oh, ow] = oshape;
    let [_, c_in, di, hi, wi] = input.shape();
    let k = w.kernel();
    let mut out = Tensor5::zeros(oshape);
    let plane = od * oh * ow;
    let wdat = w.weight.data();
    let idat = input.data();

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(block, chunk)| {
            let (bn, co) = (block / c_out, block % c_out);
            chunk.fill(w.bias[co]);
            for ci in 0..c_in {
                let in_base = (bn * c_in + ci) * di * hi * wi;
                let w_base = (co * c_in + ci) * k * k * k;
                for zd in 0..od {
                    for zh in 0..oh {
                        let orow = (zd * oh + zh) * ow;
                        for kd in 0..k {
                            let id = (zd * stride[0] + kd) as isize - padding[0] as isize;
                            if id < 0 || id as usize >= di {
                                continue;
                            }
                            for kh in 0..k {
                                let ih = (zh * stride[1] + kh) as isize - padding[1] as isize;
                                if ih < 0 || ih as usize >= hi {
                                    continue;
                                }
                                let irow = in_base + (id as usize * hi + ih as usize) * wi;
                                let wrow = w_base + (kd * k + kh) * k;
                                for kw in 0..k {
                                    let wv = wdat[wrow + kw];
                                    let off = kw as isize - padding[2] as isize;
                                    if stride[2] == 1 {
                                        // zw + off in [0, wi)
                                        let lo = (-off).max(0) as usize;
                                        let hi_w = (wi as isize - off).min(ow as isize).max(0) as usize;
                                        if lo >= hi_w {
                                            continue;
                                        }
                                        let src = &idat[(irow as isize + lo as isize + off) as usize
                                            ..(irow as isize + hi_w as isize + off) as usize];
                                        let dst = &mut chunk[orow + lo..orow + hi_w];
                                        for (o, &x) in dst.iter_mut().zip(src) {
                                            *o = *o + wv * x;
                                        }
                                    } else {
                                        for zw in 0..ow {
                                            let iw = (zw * stride[2]) as isize + off;
                                            if iw >= 0 && (iw as usize) < wi {
                                                chunk[orow + zw] =
                                                    chunk[orow + zw] + wv * idat[irow + iw as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of `sum(upstream * conv3d(input, w))` with respect to the input
/// and the weights/bias. `upstream` must match the forward output shape.
pub fn conv3d_grad<T: Scalar>(
    input: &Tensor5<T>,
    w: &ConvWeights<T>,
    padding: [usize; 3],
    stride: [usize; 3],
    upstream: &Tensor5<T>,
) -> Result<(Tensor5<T>, ConvWeights<T>)> {
    let oshape = check_conv_args(input, w, padding, stride)?;
    if upstream.shape() != oshape {
        return Err(Error::Shape(format!(
            "conv3d_grad: upstream shape {:?} does not match forward output {:?}",
            upstream.shape(),
            oshape
        )));
    }
    let [n, c_out, od, oh, ow] = oshape;
    let [_, c_in, di, hi, wi] = input.shape();
    let k = w.kernel();
    let udat = upstream.data();
    let idat = input.data();
    let wdat = w.weight.data();

    // grad wrt input: each input voxel accumulates over the outputs it fed.
    let mut grad_input = Tensor5::zeros(input.shape());
    let in_plane = di * hi * wi;
    grad_input
        .data_mut()
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(block, chunk)| {
            let (bn, ci) = (block / c_in, block % c_in);
            for co in 0..c_out {
                let up_base = (bn * c_out + co) * od * oh * ow;
                let w_base = (co * c_in + ci) * k * k * k;
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wdat[w_base + (kd * k + kh) * k + kw];
                            // output voxel (zd,zh,zw) reads input voxel
                            // (zd*s - p + kd, ...); invert per axis.
                            for zd in 0..od {
                                let id = (zd * stride[0] + kd) as isize - padding[0] as isize;
                                if id < 0 || id as usize >= di {
                                    continue;
                                }
                                for zh in 0..oh {
                                    let ih = (zh * stride[1] + kh) as isize - padding[1] as isize;
                                    if ih < 0 || ih as usize >= hi {
                                        continue;
                                    }
                                    let urow = up_base + (zd * oh + zh) * ow;
                                    let grow = (id as usize * hi + ih as usize) * wi;
                                    for zw in 0..ow {
                                        let iw =
                                            (zw * stride[2] + kw) as isize - padding[2] as isize;
                                        if iw >= 0 && (iw as usize) < wi {
                                            chunk[grow + iw as usize] = chunk[grow + iw as usize]
                                                + wv * udat[urow + zw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    // grad wrt weight: one fixed-order reduction per weight element,
    // parallel over (co, ci) pairs.
    let mut grad_w = Tensor5::zeros(w.weight.shape());
    let kvol = k * k * k;
    grad_w
        .data_mut()
        .par_chunks_mut(kvol)
        .enumerate()
        .for_each(|(pair, wchunk)| {
            let (co, ci) = (pair / c_in, pair % c_in);
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let mut acc = T::zero();
                        for bn in 0..n {
                            let up_base = (bn * c_out + co) * od * oh * ow;
                            let in_base = (bn * c_in + ci) * di * hi * wi;
                            for zd in 0..od {
                                let id = (zd * stride[0] + kd) as isize - padding[0] as isize;
                                if id < 0 || id as usize >= di {
                                    continue;
                                }
                                for zh in 0..oh {
                                    let ih = (zh * stride[1] + kh) as isize - padding[1] as isize;
                                    if ih < 0 || ih as usize >= hi {
                                        continue;
                                    }
                                    let urow = up_base + (zd * oh + zh) * ow;
                                    let irow = in_base + (id as usize * hi + ih as usize) * wi;
                                    for zw in 0..ow {
                                        let iw =
                                            (zw * stride[2] + kw) as isize - padding[2] as isize;
                                        if iw >= 0 && (iw as usize) < wi {
                                            acc = acc + udat[urow + zw] * idat[irow + iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                        wchunk[(kd * k + kh) * k + kw] = acc;
                    }
                }
            }
        });

    // grad wrt bias: sum of upstream per output channel.
    let mut grad_b = vec![T::zero(); c_out];
    let ovox = od * oh * ow;
    for bn in 0..n {
        for co in 0..c_out {
            let base = (bn * c_out + co) * ovox;
            let mut acc = T::zero();
            for v in &udat[base..base + ovox] {
                acc = acc + *v;
            }
            grad_b[co] = grad_b[co] + acc;
        }
    }

    Ok((grad_input, ConvWeights { weight: grad_w, bias: grad_b }))
}

fn check_tconv_args<T: Scalar>(input: &Tensor5<T>, w: &ConvWeights<T>) -> Result<[usize; 5]> {
    if w.kernel() != 2 {
        return Err(Error::Config(format!(
            "transposed_conv3d: only kernel 2 with stride 2 is supported, got kernel {}",
            w.kernel()
        )));
    }
    check_channels("transposed_conv3d", input, w.c_in())?;
    let [n, _, d, h, wd] = input.shape();
    Ok([n, w.c_out(), 2 * d, 2 * h, 2 * wd])
}

/// Transposed convolution with kernel 2x2x2 and stride 2 (the adjoint of a
/// stride-2 conv3d): output spatial extent is twice the input per axis. Each
/// output voxel receives exactly one kernel tap per input channel.
pub fn transposed_conv3d<T: Scalar>(input: &Tensor5<T>, w: &ConvWeights<T>) -> Result<Tensor5<T>> {
    let oshape = check_tconv_args(input, w)?;
    let [_, c_out, od, oh, ow] = oshape;
    let [_, c_in, di, hi, wi] = input.shape();
    let wdat = w.weight.data();
    let idat = input.data();
    let mut out = Tensor5::zeros(oshape);
    let plane = od * oh * ow;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(block, chunk)| {
            let (bn, co) = (block / c_out, block % c_out);
            chunk.fill(w.bias[co]);
            for ci in 0..c_in {
                let in_base = (bn * c_in + ci) * di * hi * wi;
                let w_base = (co * c_in + ci) * 8;
                for zd in 0..od {
                    let (id, kd) = (zd / 2, zd % 2);
                    for zh in 0..oh {
                        let (ih, kh) = (zh / 2, zh % 2);
                        let orow = (zd * oh + zh) * ow;
                        let irow = in_base + (id * hi + ih) * wi;
                        for zw in 0..ow {
                            let (iw, kw) = (zw / 2, zw % 2);
                            let wv = wdat[w_base + (kd * 2 + kh) * 2 + kw];
                            chunk[orow + zw] = chunk[orow + zw] + wv * idat[irow + iw];
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of `sum(upstream * transposed_conv3d(input, w))`.
pub fn transposed_conv3d_grad<T: Scalar>(
    input: &Tensor5<T>,
    w: &ConvWeights<T>,
    upstream: &Tensor5<T>,
) -> Result<(Tensor5<T>, ConvWeights<T>)> {
    let oshape = check_tconv_args(input, w)?;
    if upstream.shape() != oshape {
        return Err(Error::Shape(format!(
            "transposed_conv3d_grad: upstream shape {:?} does not match forward output {:?}",
            upstream.shape(),
            oshape
        )));
    }
    let [n, c_out, od, oh, ow] = oshape;
    let [_, c_in, di, hi, wi] = input.shape();
    let udat = upstream.data();
    let idat = input.data();
    let wdat = w.weight.data();

    // grad wrt input: gather the 2x2x2 output block each input voxel scattered to.
    let mut grad_input = Tensor5::zeros(input.shape());
    let in_plane = di * hi * wi;
    grad_input
        .data_mut()
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(block, chunk)| {
            let (bn, ci) = (block / c_in, block % c_in);
            for co in 0..c_out {
                let up_base = (bn * c_out + co) * od * oh * ow;
                let w_base = (co * c_in + ci) * 8;
                for id in 0..di {
                    for ih in 0..hi {
                        let grow = (id * hi + ih) * wi;
                        for iw in 0..wi {
                            let mut acc = T::zero();
                            for kd in 0..2 {
                                for kh in 0..2 {
                                    for kw in 0..2 {
                                        let u = udat[up_base
                                            + ((2 * id + kd) * oh + 2 * ih + kh) * ow
                                            + 2 * iw
                                            + kw];
                                        acc = acc + u * wdat[w_base + (kd * 2 + kh) * 2 + kw];
                                    }
                                }
                            }
                            chunk[grow + iw] = chunk[grow + iw] + acc;
                        }
                    }
                }
            }
        });

    // grad wrt weight.
    let mut grad_w = Tensor5::zeros(w.weight.shape());
    grad_w
        .data_mut()
        .par_chunks_mut(8)
        .enumerate()
        .for_each(|(pair, wchunk)| {
            let (co, ci) = (pair / c_in, pair % c_in);
            for kd in 0..2 {
                for kh in 0..2 {
                    for kw in 0..2 {
                        let mut acc = T::zero();
                        for bn in 0..n {
                            let up_base = (bn * c_out + co) * od * oh * ow;
                            let in_base = (bn * c_in + ci) * di * hi * wi;
                            for id in 0..di {
                                for ih in 0..hi {
                                    let irow = in_base + (id * hi + ih) * wi;
                                    let urow =
                                        up_base + ((2 * id + kd) * oh + 2 * ih + kh) * ow + kw;
                                    for iw in 0..wi {
                                        acc = acc + idat[irow + iw] * udat[urow + 2 * iw];
                                    }
                                }
                            }
                        }
                        wchunk[(kd * 2 + kh) * 2 + kw] = acc;
                    }
                }
            }
        });

    let mut grad_b = vec![T::zero(); c_out];
    let ovox = od * oh * ow;
    for bn in 0..n {
        for co in 0..c_out {
            let base = (bn * c_out + co) * ovox;
            let mut acc = T::zero();
            for v in &udat[base..base + ovox] {
                acc = acc + *v;
            }
            grad_b[co] = grad_b[co] + acc;
        }
    }

    Ok((grad_input, ConvWeights { weight: grad_w, bias: grad_b }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngExt, SeedableRng};

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed)
    }

    fn random_tensor(shape: [usize; 5], rng: &mut impl Rng) -> Tensor5<f64> {
        let data = (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor5::from_vec(shape, data).unwrap()
    }

    #[test]
    fn zero_input_gives_bias_everywhere() {
        let mut r = rng();
        let input = Tensor5::<f64>::zeros([1, 1, 3, 3, 3]);
        let weight = random_tensor([2, 1, 3, 3, 3], &mut r);
        let w = ConvWeights::new(weight, vec![0.25, -1.5]).unwrap();
        let out = conv3d(&input, &w, [1, 1, 1], [1, 1, 1]).unwrap();
        for co in 0..2 {
            for zd in 0..3 {
                for zh in 0..3 {
                    for zw in 0..3 {
                        assert_eq!(out.at(0, co, zd, zh, zw), w.bias[co]);
                    }
                }
            }
        }
    }

    #[test]
    fn unit_1x1_kernel_is_identity_per_channel() {
        let mut r = rng();
        let input = random_tensor([1, 1, 4, 4, 4], &mut r);
        let w = ConvWeights::new(Tensor5::from_vec([1, 1, 1, 1, 1], vec![1.0]).unwrap(), vec![0.0]).unwrap();
        let out = conv3d(&input, &w, [0, 0, 0], [1, 1, 1]).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn channel_mismatch_names_both_values() {
        let input = Tensor5::<f64>::zeros([1, 3, 4, 4, 4]);
        let w = ConvWeights::<f64>::zeros(2, 2, 3);
        let err = conv3d(&input, &w, [1, 1, 1], [1, 1, 1]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "diagnostic must name both: {msg}");
    }

    #[test]
    fn k3_pad1_stride1_preserves_spatial_shape() {
        let mut r = rng();
        let input = random_tensor([2, 2, 5, 6, 7], &mut r);
        let w = ConvWeights::new(random_tensor([3, 2, 3, 3, 3], &mut r), vec![0.0; 3]).unwrap();
        let out = conv3d(&input, &w, [1, 1, 1], [1, 1, 1]).unwrap();
        assert_eq!(out.shape(), [2, 3, 5, 6, 7]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng();
        let input = random_tensor([1, 2, 4, 4, 4], &mut r);
        let w = ConvWeights::new(random_tensor([3, 2, 3, 3, 3], &mut r), vec![0.1; 3]).unwrap();
        let upstream = Tensor5::<f64>::zeros([1, 3, 4, 4, 4]);
        let (gi, gw) = conv3d_grad(&input, &w, [1, 1, 1], [1, 1, 1], &upstream).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.weight.data().iter().all(|&v| v == 0.0));
        assert!(gw.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_bias_is_upstream_channel_sum() {
        let mut r = rng();
        let input = random_tensor([2, 1, 4, 4, 4], &mut r);
        let w = ConvWeights::new(random_tensor([2, 1, 3, 3, 3], &mut r), vec![0.0; 2]).unwrap();
        let upstream = random_tensor([2, 2, 4, 4, 4], &mut r);
        let (_, gw) = conv3d_grad(&input, &w, [1, 1, 1], [1, 1, 1], &upstream).unwrap();
        for co in 0..2 {
            let mut want = 0.0;
            for bn in 0..2 {
                for zd in 0..4 {
                    for zh in 0..4 {
                        for zw in 0..4 {
                            want += upstream.at(bn, co, zd, zh, zw);
                        }
                    }
                }
            }
            assert!((gw.bias[co] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn upstream_shape_mismatch_rejected() {
        let input = Tensor5::<f64>::zeros([1, 1, 4, 4, 4]);
        let w = ConvWeights::<f64>::zeros(1, 1, 3);
        let upstream = Tensor5::<f64>::zeros([1, 1, 5, 4, 4]);
        assert!(conv3d_grad(&input, &w, [1, 1, 1], [1, 1, 1], &upstream).is_err());
    }

    #[test]
    fn transposed_single_voxel_broadcasts_block() {
        let input = Tensor5::from_vec([1, 1, 1, 1, 1], vec![3.5]).unwrap();
        let w = ConvWeights::new(Tensor5::filled([1, 1, 2, 2, 2], 1.0), vec![0.0]).unwrap();
        let out = transposed_conv3d(&input, &w).unwrap();
        assert_eq!(out.shape(), [1, 1, 2, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn transposed_rejects_other_kernels() {
        let input = Tensor5::<f64>::zeros([1, 1, 2, 2, 2]);
        let w = ConvWeights::<f64>::zeros(1, 1, 3);
        assert!(transposed_conv3d(&input, &w).is_err());
    }

    #[test]
    fn transposed_is_adjoint_of_stride2_conv() {
        // <conv_s2(x), y> == <x, tconv(y)> with shared weights, bias 0.
        let mut r = rng();
        let x = random_tensor([1, 3, 4, 4, 4], &mut r);
        let y = random_tensor([1, 2, 4, 4, 4], &mut r);
        let wt = random_tensor([2, 3, 2, 2, 2], &mut r); // conv: 3 -> 2 channels
        let conv_w = ConvWeights::new(wt.clone(), vec![0.0; 2]).unwrap();
        let fwd = conv3d(&x, &conv_w, [0, 0, 0], [2, 2, 2]).unwrap();
        assert_eq!(fwd.shape(), [1, 2, 2, 2, 2]);
        // transposed weights swap the channel axes: maps 2 -> 3 channels.
        let mut swapped = Tensor5::<f64>::zeros([3, 2, 2, 2, 2]);
        for a in 0..2 {
            for b in 0..3 {
                for kd in 0..2 {
                    for kh in 0..2 {
                        for kw in 0..2 {
                            swapped.set(b, a, kd, kh, kw, wt.at(a, b, kd, kh, kw));
                        }
                    }
                }
            }
        }
        let tw = ConvWeights::new(swapped, vec![0.0; 3]).unwrap();
        // y lives in conv output space: downsample it first to 2^3 grid.
        let y_small = Tensor5::from_fn([1, 2, 2, 2, 2], |_, c, d, h, w| y.at(0, c, d, h, w));
        let back = transposed_conv3d(&y_small, &tw).unwrap();
        assert_eq!(back.shape(), x.shape());
        let lhs: f64 = fwd.data().iter().zip(y_small.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "lhs {lhs} rhs {rhs}");
    }
}
