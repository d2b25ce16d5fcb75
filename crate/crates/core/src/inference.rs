//! Overlapping sliding-window prediction over whole volumes with probability
//! blending and binarization.

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor5;
use crate::unet::UNetModel;
use crate::volume::{Volume, VoxelData};

/// Tiling of a (possibly padded) volume into overlapping patch-sized tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    /// Tile origins in the padded volume, lexicographically increasing.
    pub origins: Vec<[usize; 3]>,
    pub padded_dims: [usize; 3],
    /// Padding inserted before the volume origin (this implementation pads
    /// only at the high end, so these are zero; the crop contract keeps them
    /// explicit).
    pub pre_pad: [usize; 3],
    /// Original (cropped) output dims.
    pub out_dims: [usize; 3],
}

impl TilePlan {
    /// Number of covering tiles per padded voxel.
    pub fn coverage_counts(&self) -> Vec<u32> {
        let [d, h, w] = self.padded_dims;
        let mut counts = vec![0u32; d * h * w];
        for o in &self.origins {
            for zd in o[0]..o[0] + self.patch[0] {
                for zh in o[1]..o[1] + self.patch[1] {
                    let row = (zd * h + zh) * w + o[2];
                    for c in &mut counts[row..row + self.patch[2]] {
                        *c += 1;
                    }
                }
            }
        }
        counts
    }
}

fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut origins = Vec::new();
    let mut o = 0;
    while o < last {
        origins.push(o);
        o += stride;
    }
    origins.push(last);
    origins
}

/// Plans tile origins over the volume, reflection-padding each extent up to
/// the patch size first. Origins per axis step by the stride with a final
/// origin clamped to `extent - patch` (deduplicated), so every padded voxel
/// is covered by at least one tile.
pub fn plan_tiles(vol_dims: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Result<TilePlan> {
    for a in 0..3 {
        if stride[a] == 0 {
            return Err(Error::Config(format!("tile stride {:?} contains zero", stride)));
        }
        if stride[a] > patch[a] {
            return Err(Error::Config(format!(
                "tile stride {:?} exceeds patch {:?} on axis {}; voxels would be skipped",
                stride, patch, a
            )));
        }
        if patch[a] == 0 || vol_dims[a] == 0 {
            return Err(Error::Config("empty patch or volume".into()));
        }
    }
    let padded = [
        vol_dims[0].max(patch[0]),
        vol_dims[1].max(patch[1]),
        vol_dims[2].max(patch[2]),
    ];
    let per_axis: Vec<Vec<usize>> =
        (0..3).map(|a| axis_origins(padded[a], patch[a], stride[a])).collect();
    let mut origins = Vec::with_capacity(per_axis[0].len() * per_axis[1].len() * per_axis[2].len());
    for &od in &per_axis[0] {
        for &oh in &per_axis[1] {
            for &ow in &per_axis[2] {
                origins.push([od, oh, ow]);
            }
        }
    }
    Ok(TilePlan { patch, stride, origins, padded_dims: padded, pre_pad: [0; 3], out_dims: vol_dims })
}

/// Index into an extent with mirror bouncing (reflection without repeating
/// the edge sample), valid for any overshoot.
fn reflect(mut i: isize, extent: usize) -> usize {
    let e = extent as isize;
    if e == 1 {
        return 0;
    }
    let period = 2 * (e - 1);
    i = i.rem_euclid(period);
    if i >= e {
        i = period - i;
    }
    i as usize
}

/// Reflection-pads an f32 volume at the high end of each axis.
fn pad_reflect(v: &Volume, padded: [usize; 3]) -> Result<Vec<f32>> {
    let src = v.as_f32()?;
    let [d, h, w] = v.dims;
    let [pd, ph, pw] = padded;
    let mut out = vec![0f32; pd * ph * pw];
    for zd in 0..pd {
        let sd = reflect(zd as isize, d);
        for zh in 0..ph {
            let sh = reflect(zh as isize, h);
            let srow = (sd * h + sh) * w;
            let orow = (zd * ph + zh) * pw;
            for zw in 0..pw {
                out[orow + zw] = src[srow + reflect(zw as isize, w)];
            }
        }
    }
    Ok(out)
}

/// Per-voxel defect probability map.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub data: Vec<f32>,
}

impl ProbVolume {
    pub fn to_volume(&self) -> Volume {
        Volume { dims: self.dims, spacing: self.spacing, data: VoxelData::F32(self.data.clone()) }
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        let data = v.as_f32()?.to_vec();
        if let Some(bad) = data.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Data(format!("probability {} outside [0,1]", bad)));
        }
        Ok(Self { dims: v.dims, spacing: v.spacing, data })
    }
}

/// How overlapping tile probabilities are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlendMode {
    /// Plain average over covering tiles.
    #[default]
    Uniform,
    /// Tiles weighted by a separable Gaussian centred in the tile
    /// (sigma = extent / 4 per axis).
    Gaussian,
}

impl BlendMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BlendMode::Uniform),
            "gaussian" => Ok(BlendMode::Gaussian),
            other => Err(Error::Config(format!("unknown blend mode '{}', expected uniform | gaussian", other))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlendMode::Uniform => "uniform",
            BlendMode::Gaussian => "gaussian",
        }
    }
}

fn tile_weights(patch: [usize; 3], blend: BlendMode) -> Vec<f32> {
    match blend {
        BlendMode::Uniform => vec![1.0; patch.iter().product()],
        BlendMode::Gaussian => {
            let axis = |ext: usize| -> Vec<f64> {
                let sigma = ext as f64 / 4.0;
                let c = (ext as f64 - 1.0) / 2.0;
                (0..ext).map(|i| (-0.5 * ((i as f64 - c) / sigma).powi(2)).exp()).collect()
            };
            let (wd, wh, ww) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
            let mut out = Vec::with_capacity(patch.iter().product());
            for a in &wd {
                for b in &wh {
                    for c in &ww {
                        out.push((a * b * c) as f32);
                    }
                }
            }
            out
        }
    }
}

/// Eval-mode sliding-window prediction: per tile, forward + softmax over the
/// two channels; per-voxel probability is the (weighted) average over all
/// covering tiles; the padding is cropped off. The input must already be
/// normalized by the same rule as training. Deterministic: tiles run
/// sequentially in plan order.
pub fn predict_volume(
    model: &mut UNetModel<f32>,
    v: &Volume,
    plan: &TilePlan,
    blend: BlendMode,
) -> Result<ProbVolume> {
    if v.dims != plan.out_dims {
        return Err(Error::Shape(format!(
            "predict_volume: volume dims {:?} do not match plan dims {:?}",
            v.dims, plan.out_dims
        )));
    }
    let padded = pad_reflect(v, plan.padded_dims)?;
    let [pd, ph, pw] = plan.padded_dims;
    let [td, th, tw] = plan.patch;
    let weights = tile_weights(plan.patch, blend);
    // f64 accumulation makes uniform blending of k identical tile values
    // reproduce the value exactly, so constant-output models are
    // stride-independent bit for bit.
    let mut prob_sum = vec![0f64; pd * ph * pw];
    let mut weight_sum = vec![0f64; pd * ph * pw];

    let mut tile = Tensor5::<f32>::zeros([1, 1, td, th, tw]);
    for origin in &plan.origins {
        for zd in 0..td {
            for zh in 0..th {
                let srow = ((origin[0] + zd) * ph + origin[1] + zh) * pw + origin[2];
                let drow = (zd * th + zh) * tw;
                tile.data_mut()[drow..drow + tw].copy_from_slice(&padded[srow..srow + tw]);
            }
        }
        let logits = model.forward(&tile, Mode::Eval)?;
        let plane = td * th * tw;
        let ldat = logits.data();
        for zd in 0..td {
            for zh in 0..th {
                let orow = ((origin[0] + zd) * ph + origin[1] + zh) * pw + origin[2];
                let lrow = (zd * th + zh) * tw;
                for zw in 0..tw {
                    let z0 = ldat[lrow + zw];
                    let z1 = ldat[plane + lrow + zw];
                    // stable two-class softmax for the defect channel
                    let m = z0.max(z1);
                    let e0 = (z0 - m).exp();
                    let e1 = (z1 - m).exp();
                    let p = e1 / (e0 + e1);
                    let wgt = weights[lrow + zw] as f64;
                    prob_sum[orow + zw] += wgt * p as f64;
                    weight_sum[orow + zw] += wgt;
                }
            }
        }
    }

    let [od, oh, ow] = plan.out_dims;
    let mut out = Vec::with_capacity(od * oh * ow);
    for zd in 0..od {
        for zh in 0..oh {
            let row = ((zd + plan.pre_pad[0]) * ph + zh + plan.pre_pad[1]) * pw + plan.pre_pad[2];
            for zw in 0..ow {
                let denom = weight_sum[row + zw];
                debug_assert!(denom > 0.0, "uncovered voxel");
                out.push(((prob_sum[row + zw] / denom) as f32).clamp(0.0, 1.0));
            }
        }
    }
    Ok(ProbVolume { dims: plan.out_dims, spacing: v.spacing, data: out })
}

/// Defect iff probability >= threshold; threshold must lie in (0, 1).
pub fn binarize(p: &ProbVolume, threshold: f64) -> Result<Volume> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("binarize threshold must be in (0,1), got {}", threshold)));
    }
    let t = threshold as f32;
    let data: Vec<u8> = p.data.iter().map(|&v| u8::from(v >= t)).collect();
    Ok(Volume { dims: p.dims, spacing: p.spacing, data: VoxelData::U8(data) })
}
