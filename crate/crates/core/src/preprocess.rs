//! XCT preprocessing chain: 16-to-8-bit window quantization, 3D median
//! filtering, per-slice non-local means denoising, and Bernsen local
//! thresholding for label generation.
//!
//! NLM and Bernsen work per 2D slice; the median filter is 3D. Edges are
//! handled by replication everywhere so volumes never shrink.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Volume, VoxelData};

/// Bernsen thresholding parameters. The low-contrast rule stands in for
/// noise-calibrated thresholds; everything is config-exposed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernsenParams {
    /// Square window radius in pixels.
    pub window_radius: usize,
    /// Minimum local contrast (gray levels) for the midpoint rule to apply.
    pub c_min: u8,
    /// Low-contrast regions are defect iff the window midpoint is below this.
    pub low_level: u8,
}

impl Default for BernsenParams {
    fn default() -> Self {
        Self { window_radius: 15, c_min: 15, low_level: 128 }
    }
}

impl BernsenParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_radius == 0 {
            return Err(Error::Config("bernsen window_radius must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear window map `clamp((x - lo) / (hi - lo)) * 255`, rounded half-up.
pub fn quantize_u16_to_u8(v: &Volume, lo: u16, hi: u16) -> Result<Volume> {
    if lo >= hi {
        return Err(Error::Config(format!("quantize window lo {} must be < hi {}", lo, hi)));
    }
    let src = v.as_u16()?;
    let span = (hi - lo) as f64;
    let data: Vec<u8> = src
        .iter()
        .map(|&x| {
            let t = (x.clamp(lo, hi) - lo) as f64 / span;
            (t * 255.0 + 0.5).floor() as u8
        })
        .collect();
    Ok(Volume { dims: v.dims, spacing: v.spacing, data: VoxelData::U8(data) })
}

#[inline]
fn clamp_i(v: isize, hi: usize) -> usize {
    v.clamp(0, hi as isize - 1) as usize
}

fn median3d_impl<X: Copy + PartialOrd + Send + Sync>(
    src: &[X],
    dims: [usize; 3],
    radius: usize,
) -> Vec<X> {
    let [d, h, w] = dims;
    let r = radius as isize;
    let hood_len = (2 * radius + 1).pow(3);
    let mut out = vec![src[0]; src.len()];
    out.par_chunks_mut(h * w).enumerate().for_each(|(zd, plane)| {
        let mut hood: Vec<X> = Vec::with_capacity(hood_len);
        for zh in 0..h {
            for zw in 0..w {
                hood.clear();
                for od in -r..=r {
                    let sd = clamp_i(zd as isize + od, d);
                    for oh in -r..=r {
                        let sh = clamp_i(zh as isize + oh, h);
                        let row = (sd * h + sh) * w;
                        for ow in -r..=r {
                            hood.push(src[row + clamp_i(zw as isize + ow, w)]);
                        }
                    }
                }
                hood.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
                // The cube neighborhood count is odd; the lower central order
                // statistic is the plain median.
                plane[zh * w + zw] = hood[(hood.len() - 1) / 2];
            }
        }
    });
    out
}

/// Replaces each voxel by the median of its `(2r+1)^3` cube neighborhood,
/// edge-replicated.
pub fn median3d(v: &Volume, radius: usize) -> Result<Volume> {
    if radius == 0 {
        return Err(Error::Config("median radius must be >= 1".into()));
    }
    let data = match &v.data {
        VoxelData::U8(s) => VoxelData::U8(median3d_impl(s, v.dims, radius)),
        VoxelData::U16(s) => VoxelData::U16(median3d_impl(s, v.dims, radius)),
        VoxelData::F32(s) => VoxelData::F32(median3d_impl(s, v.dims, radius)),
    };
    Ok(Volume { dims: v.dims, spacing: v.spacing, data })
}

fn nlm_slice(src: &[f64], height: usize, width: usize, h_param: f64, pr: usize, sr: usize) -> Vec<f64> {
    let pr = pr as isize;
    let sr = sr as isize;
    let patch_count = ((2 * pr + 1) * (2 * pr + 1)) as f64;
    let inv_h2 = 1.0 / (h_param * h_param);
    let mut out = vec![0.0; src.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut wsum = 0.0;
            let mut acc = 0.0;
            for sy in y - sr..=y + sr {
                for sx in x - sr..=x + sr {
                    let mut d2 = 0.0;
                    for py in -pr..=pr {
                        let ay = clamp_i(y + py, height);
                        let by = clamp_i(sy + py, height);
                        for px in -pr..=pr {
                            let a = src[ay * width + clamp_i(x + px, width)];
                            let b = src[by * width + clamp_i(sx + px, width)];
                            d2 += (a - b) * (a - b);
                        }
                    }
                    d2 /= patch_count;
                    // sigma is taken as 0: the noise-compensated distance
                    // max(d^2 - 2 sigma^2, 0) reduces to d^2.
                    let wgt = (-d2.max(0.0) * inv_h2).exp();
                    wsum += wgt;
                    acc += wgt * src[clamp_i(sy, height) * width + clamp_i(sx, width)];
                }
            }
            out[(y as usize) * width + x as usize] = acc / wsum;
        }
    }
    out
}

/// Per-slice 2D non-local means: each pixel becomes the weighted mean of its
/// search-window pixels, weight `exp(-d2 / h^2)` with `d2` the mean squared
/// patch difference. Integer volumes are filtered in f64 and rounded back.
pub fn nlm_denoise(v: &Volume, h_param: f64, patch_radius: usize, search_radius: usize) -> Result<Volume> {
    if h_param <= 0.0 {
        return Err(Error::Config(format!("nlm h must be positive, got {}", h_param)));
    }
    let [d, hh, ww] = v.dims;
    let plane = hh * ww;
    let src: Vec<f64> = (0..v.len()).map(|i| v.get_f64(i)).collect();
    let slices: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|k| nlm_slice(&src[k * plane..(k + 1) * plane], hh, ww, h_param, patch_radius, search_radius))
        .collect();
    let flat: Vec<f64> = slices.into_iter().flatten().collect();
    let data = match v.dtype() {
        crate::volume::Dtype::U8 => {
            VoxelData::U8(flat.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8).collect())
        }
        crate::volume::Dtype::U16 => {
            VoxelData::U16(flat.iter().map(|&x| x.round().clamp(0.0, 65535.0) as u16).collect())
        }
        crate::volume::Dtype::F32 => VoxelData::F32(flat.iter().map(|&x| x as f32).collect()),
    };
    Ok(Volume { dims: v.dims, spacing: v.spacing, data })
}

/// Sliding min/max over one axis of a plane, edge-replicated; the square
/// window is separable so two passes give the window extrema.
fn axis_minmax(min_in: &[u8], max_in: &[u8], h: usize, w: usize, r: usize, rows: bool) -> (Vec<u8>, Vec<u8>) {
    let mut mn = vec![0u8; h * w];
    let mut mx = vec![0u8; h * w];
    let r = r as isize;
    for y in 0..h {
        for x in 0..w {
            let mut lo = u8::MAX;
            let mut hi = u8::MIN;
            for o in -r..=r {
                let i = if rows {
                    y * w + clamp_i(x as isize + o, w)
                } else {
                    clamp_i(y as isize + o, h) * w + x
                };
                lo = lo.min(min_in[i]);
                hi = hi.max(max_in[i]);
            }
            mn[y * w + x] = lo;
            mx[y * w + x] = hi;
        }
    }
    (mn, mx)
}

/// Per-slice Bernsen local thresholding. With window extrema `zmax`, `zmin`,
/// contrast `c = zmax - zmin` and midpoint `mid = (zmax + zmin) / 2`: where
/// `c >= c_min` a pixel is defect iff its intensity is below `mid`;
/// low-contrast regions are defect iff `mid < low_level`. Midpoint
/// comparisons are exact (doubled), defects are dark pores. Returns a
/// `{0,1}` u8 mask.
pub fn bernsen_threshold(v: &Volume, p: &BernsenParams) -> Result<Volume> {
    p.validate()?;
    let src = v.as_u8()?;
    let [d, h, w] = v.dims;
    let plane = h * w;
    let masks: Vec<Vec<u8>> = (0..d)
        .into_par_iter()
        .map(|k| {
            let s = &src[k * plane..(k + 1) * plane];
            let (mn, mx) = axis_minmax(s, s, h, w, p.window_radius, true);
            let (mn, mx) = axis_minmax(&mn, &mx, h, w, p.window_radius, false);
            (0..plane)
                .map(|i| {
                    let contrast = mx[i] - mn[i];
                    let mid2 = mx[i] as u32 + mn[i] as u32;
                    let defect = if contrast >= p.c_min {
                        (s[i] as u32) * 2 < mid2
                    } else {
                        mid2 < 2 * p.low_level as u32
                    };
                    defect as u8
                })
                .collect()
        })
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        data: VoxelData::U8(masks.into_iter().flatten().collect()),
    })
}
