//! Brute-force reference implementations used only by the test suites.
//!
//! Everything here is written definitionally with plain nested loops over
//! flat `f64` (or integer) buffers and deliberately shares no code with the
//! production kernels — not even the tensor container. Ops take a flat slice
//! plus an explicit shape; shapes are small by construction (tests cap them).
//! Performance is irrelevant.

/// Parameters of the central finite-difference gradient check.
#[derive(Clone, Copy, Debug)]
pub struct FiniteDiffSpec {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative-error comparison.
    pub floor: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        Self { step: 1e-4, tol: 1e-4, floor: 1e-8 }
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

#[inline]
fn at5(data: &[f64], s: [usize; 5], n: usize, c: usize, d: usize, h: usize, w: usize) -> f64 {
    data[(((n * s[1] + c) * s[2] + d) * s[3] + h) * s[4] + w]
}

/// Direct seven-nested-loop cross-correlation. Weight shape `(c_out, c_in, k, k, k)`.
pub fn naive_conv3d(
    input: &[f64],
    ishape: [usize; 5],
    weight: &[f64],
    wshape: [usize; 5],
    bias: &[f64],
    pad: [usize; 3],
    stride: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, c_in, di, hi, wi] = ishape;
    let [c_out, wc_in, kd, kh, kw] = wshape;
    assert_eq!(c_in, wc_in);
    let od = (di + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (hi + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wi + 2 * pad[2] - kw) / stride[2] + 1;
    let oshape = [n, c_out, od, oh, ow];
    let mut out = vec![0.0; n * c_out * od * oh * ow];
    let mut i = 0;
    for bn in 0..n {
        for co in 0..c_out {
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..c_in {
                            for fd in 0..kd {
                                for fh in 0..kh {
                                    for fw in 0..kw {
                                        let id = (zd * stride[0] + fd) as isize - pad[0] as isize;
                                        let ih = (zh * stride[1] + fh) as isize - pad[1] as isize;
                                        let iw = (zw * stride[2] + fw) as isize - pad[2] as isize;
                                        if id < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                        if id >= di || ih >= hi || iw >= wi {
                                            continue;
                                        }
                                        acc += at5(input, ishape, bn, ci, id, ih, iw)
                                            * at5(weight, wshape, co, ci, fd, fh, fw);
                                    }
                                }
                            }
                        }
                        out[i] = acc;
                        i += 1;
                    }
                }
            }
        }
    }
    (out, oshape)
}

/// Direct transposed convolution with kernel 2 and stride 2; each input voxel
/// scatters into a 2x2x2 output block. Weight shape `(c_out, c_in, 2, 2, 2)`.
pub fn naive_transposed_conv3d(
    input: &[f64],
    ishape: [usize; 5],
    weight: &[f64],
    wshape: [usize; 5],
    bias: &[f64],
) -> (Vec<f64>, [usize; 5]) {
    let [n, c_in, di, hi, wi] = ishape;
    let [c_out, wc_in, kd, kh, kw] = wshape;
    assert_eq!(c_in, wc_in);
    assert_eq!([kd, kh, kw], [2, 2, 2]);
    let oshape = [n, c_out, 2 * di, 2 * hi, 2 * wi];
    let mut out = vec![0.0; oshape.iter().product()];
    for bn in 0..n {
        for co in 0..c_out {
            for zd in 0..di {
                for zh in 0..hi {
                    for zw in 0..wi {
                        for ci in 0..c_in {
                            let x = at5(input, ishape, bn, ci, zd, zh, zw);
                            for fd in 0..2 {
                                for fh in 0..2 {
                                    for fw in 0..2 {
                                        let oi = (((bn * c_out + co) * (2 * di) + 2 * zd + fd)
                                            * (2 * hi)
                                            + 2 * zh
                                            + fh)
                                            * (2 * wi)
                                            + 2 * zw
                                            + fw;
                                        out[oi] += x * at5(weight, wshape, co, ci, fd, fh, fw);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let ovox = 8 * di * hi * wi;
    for bn in 0..n {
        for co in 0..c_out {
            for i in 0..ovox {
                out[(bn * c_out + co) * ovox + i] += bias[co];
            }
        }
    }
    (out, oshape)
}

/// Direct 2x2x2 stride-2 max pooling. Returns `(values, argmax flat indices, out shape)`;
/// ties go to the lowest flat index.
pub fn naive_maxpool3d(input: &[f64], ishape: [usize; 5]) -> (Vec<f64>, Vec<usize>, [usize; 5]) {
    let [n, c, di, hi, wi] = ishape;
    let oshape = [n, c, di / 2, hi / 2, wi / 2];
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for bn in 0..n {
        for bc in 0..c {
            for zd in 0..di / 2 {
                for zh in 0..hi / 2 {
                    for zw in 0..wi / 2 {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for fd in 0..2 {
                            for fh in 0..2 {
                                for fw in 0..2 {
                                    let fi = (((bn * c + bc) * di + 2 * zd + fd) * hi + 2 * zh + fh) * wi
                                        + 2 * zw
                                        + fw;
                                    if input[fi] > best {
                                        best = input[fi];
                                        best_i = fi;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_i);
                    }
                }
            }
        }
    }
    (out, arg, oshape)
}

/// Per-channel batch normalization over `(n, d, h, w)` with biased variance,
/// train-mode statistics.
pub fn naive_batchnorm_train(
    input: &[f64],
    ishape: [usize; 5],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let [n, c, d, h, w] = ishape;
    let count = (n * d * h * w) as f64;
    let mut out = vec![0.0; input.len()];
    for bc in 0..c {
        let mut sum = 0.0;
        for bn in 0..n {
            for bd in 0..d {
                for bh in 0..h {
                    for bw in 0..w {
                        sum += at5(input, ishape, bn, bc, bd, bh, bw);
                    }
                }
            }
        }
        let mean = sum / count;
        let mut var = 0.0;
        for bn in 0..n {
            for bd in 0..d {
                for bh in 0..h {
                    for bw in 0..w {
                        let dv = at5(input, ishape, bn, bc, bd, bh, bw) - mean;
                        var += dv * dv;
                    }
                }
            }
        }
        var /= count;
        let inv = 1.0 / (var + eps).sqrt();
        for bn in 0..n {
            for bd in 0..d {
                for bh in 0..h {
                    for bw in 0..w {
                        let i = (((bn * c + bc) * d + bd) * h + bh) * w + bw;
                        out[i] = gamma[bc] * (input[i] - mean) * inv + beta[bc];
                    }
                }
            }
        }
    }
    out
}

/// Group normalization over `(sample, group)` blocks with biased variance.
pub fn naive_groupnorm(
    input: &[f64],
    ishape: [usize; 5],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    channels_per_group: usize,
) -> Vec<f64> {
    let [n, c, d, h, w] = ishape;
    assert_eq!(c % channels_per_group, 0);
    let groups = c / channels_per_group;
    let count = (channels_per_group * d * h * w) as f64;
    let mut out = vec![0.0; input.len()];
    for bn in 0..n {
        for g in 0..groups {
            let c_lo = g * channels_per_group;
            let c_hi = c_lo + channels_per_group;
            let mut sum = 0.0;
            for bc in c_lo..c_hi {
                for bd in 0..d {
                    for bh in 0..h {
                        for bw in 0..w {
                            sum += at5(input, ishape, bn, bc, bd, bh, bw);
                        }
                    }
                }
            }
            let mean = sum / count;
            let mut var = 0.0;
            for bc in c_lo..c_hi {
                for bd in 0..d {
                    for bh in 0..h {
                        for bw in 0..w {
                            let dv = at5(input, ishape, bn, bc, bd, bh, bw) - mean;
                            var += dv * dv;
                        }
                    }
                }
            }
            var /= count;
            let inv = 1.0 / (var + eps).sqrt();
            for bc in c_lo..c_hi {
                for bd in 0..d {
                    for bh in 0..h {
                        for bw in 0..w {
                            let i = (((bn * c + bc) * d + bd) * h + bh) * w + bw;
                            out[i] = gamma[bc] * (input[i] - mean) * inv + beta[bc];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mean per-voxel two-class softmax cross-entropy. `targets` is one label per
/// voxel in `(n, d, h, w)` row-major order.
pub fn naive_softmax_ce(logits: &[f64], lshape: [usize; 5], targets: &[u8]) -> f64 {
    let [n, c, d, h, w] = lshape;
    assert_eq!(c, 2);
    let voxels = n * d * h * w;
    assert_eq!(targets.len(), voxels);
    let mut loss = 0.0;
    let mut vi = 0;
    for bn in 0..n {
        for bd in 0..d {
            for bh in 0..h {
                for bw in 0..w {
                    let z0 = at5(logits, lshape, bn, 0, bd, bh, bw);
                    let z1 = at5(logits, lshape, bn, 1, bd, bh, bw);
                    let m = z0.max(z1);
                    let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
                    let zt = if targets[vi] == 0 { z0 } else { z1 };
                    loss += lse - zt;
                    vi += 1;
                }
            }
        }
    }
    loss / voxels as f64
}

#[inline]
fn clamp_i(v: isize, hi: usize) -> usize {
    v.clamp(0, hi as isize - 1) as usize
}

/// Sort-the-neighborhood median over the `(2r+1)^3` cube, edge-replicated.
pub fn naive_median3d_u8(data: &[u8], dims: [usize; 3], radius: usize) -> Vec<u8> {
    let [d, h, w] = dims;
    let r = radius as isize;
    let mut out = vec![0u8; data.len()];
    for zd in 0..d {
        for zh in 0..h {
            for zw in 0..w {
                let mut hood = Vec::new();
                for od in -r..=r {
                    for oh in -r..=r {
                        for ow in -r..=r {
                            let sd = clamp_i(zd as isize + od, d);
                            let sh = clamp_i(zh as isize + oh, h);
                            let sw = clamp_i(zw as isize + ow, w);
                            hood.push(data[(sd * h + sh) * w + sw]);
                        }
                    }
                }
                hood.sort_unstable();
                // Lower central order statistic; for the odd cube count this
                // is the plain median.
                out[(zd * h + zh) * w + zw] = hood[(hood.len() - 1) / 2];
            }
        }
    }
    out
}

/// Per-slice Bernsen thresholding from extrema of the `(2r+1)^2` window,
/// edge-replicated. Midpoint comparisons are exact (doubled, no rounding).
/// Returns 1 for defect (dark), 0 for background.
pub fn naive_bernsen(data: &[u8], dims: [usize; 3], radius: usize, c_min: u8, low: u8) -> Vec<u8> {
    let [d, h, w] = dims;
    let r = radius as isize;
    let mut out = vec![0u8; data.len()];
    for zd in 0..d {
        for zh in 0..h {
            for zw in 0..w {
                let mut zmin = u8::MAX;
                let mut zmax = u8::MIN;
                for oh in -r..=r {
                    for ow in -r..=r {
                        let sh = clamp_i(zh as isize + oh, h);
                        let sw = clamp_i(zw as isize + ow, w);
                        let v = data[(zd * h + sh) * w + sw];
                        zmin = zmin.min(v);
                        zmax = zmax.max(v);
                    }
                }
                let contrast = zmax - zmin;
                let mid2 = zmax as u32 + zmin as u32; // 2 * midpoint
                let v = data[(zd * h + zh) * w + zw];
                let defect = if contrast >= c_min {
                    (v as u32) * 2 < mid2
                } else {
                    mid2 < 2 * low as u32
                };
                out[(zd * h + zh) * w + zw] = defect as u8;
            }
        }
    }
    out
}

/// Direct double-loop 2D non-local means on one slice: every pixel is the
/// normalized `exp(-max(d2 - 2 sigma^2, 0) / h^2)`-weighted mean over its
/// search window, where `d2` is the mean squared patch difference.
#[allow(clippy::too_many_arguments)]
pub fn naive_nlm2d(
    slice: &[f64],
    height: usize,
    width: usize,
    h_param: f64,
    sigma: f64,
    patch_radius: usize,
    search_radius: usize,
) -> Vec<f64> {
    let pr = patch_radius as isize;
    let sr = search_radius as isize;
    let patch_count = ((2 * patch_radius + 1) * (2 * patch_radius + 1)) as f64;
    let mut out = vec![0.0; slice.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut wsum = 0.0;
            let mut acc = 0.0;
            for sy in y - sr..=y + sr {
                for sx in x - sr..=x + sr {
                    let mut d2 = 0.0;
                    for py in -pr..=pr {
                        for px in -pr..=pr {
                            let a = slice[clamp_i(y + py, height) * width + clamp_i(x + px, width)];
                            let b = slice[clamp_i(sy + py, height) * width + clamp_i(sx + px, width)];
                            d2 += (a - b) * (a - b);
                        }
                    }
                    d2 /= patch_count;
                    let wgt = (-(d2 - 2.0 * sigma * sigma).max(0.0) / (h_param * h_param)).exp();
                    wsum += wgt;
                    acc += wgt * slice[clamp_i(sy, height) * width + clamp_i(sx, width)];
                }
            }
            out[(y as usize) * width + x as usize] = acc / wsum;
        }
    }
    out
}

/// Per-voxel confusion tally with defect (=1) as the positive class.
/// Returns `(tp, fp, fn, tn)`.
pub fn naive_confusion(pred: &[u8], truth: &[u8]) -> (u64, u64, u64, u64) {
    assert_eq!(pred.len(), truth.len());
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for i in 0..pred.len() {
        match (pred[i], truth[i]) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            (0, 0) => tn += 1,
            other => panic!("non-binary mask voxel {:?}", other),
        }
    }
    (tp, fp, fneg, tn)
}
