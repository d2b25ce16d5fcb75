//! Data pipeline: normalization, fg-biased patch sampling, flip/rotate
//! augmentation, porosity, and the synthetic AM-defect volume generator that
//! stands in for full-scale XCT data at desk scale.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{LabeledVolume, Volume, VoxelData};

/// Per-volume z-score: zero mean, unit standard deviation, computed in f64.
/// Constant volumes map to all zeros (the std is clamped at 1e-8).
pub fn normalize_zscore(v: &Volume) -> Volume {
    let n = v.len() as f64;
    let mut sum = 0.0;
    for i in 0..v.len() {
        sum += v.get_f64(i);
    }
    let mean = sum / n;
    let mut var = 0.0;
    for i in 0..v.len() {
        let d = v.get_f64(i) - mean;
        var += d * d;
    }
    let std = (var / n).sqrt().max(1e-8);
    let data: Vec<f32> = (0..v.len()).map(|i| ((v.get_f64(i) - mean) / std) as f32).collect();
    Volume { dims: v.dims, spacing: v.spacing, data: VoxelData::F32(data) }
}

/// Windowed min-max alternative to the z-score: maps the observed value
/// range onto [0, 1]. Constant volumes map to all zeros.
pub fn normalize_minmax(v: &Volume) -> Volume {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..v.len() {
        let x = v.get_f64(i);
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let span = (hi - lo).max(1e-8);
    let data: Vec<f32> = (0..v.len()).map(|i| ((v.get_f64(i) - lo) / span) as f32).collect();
    Volume { dims: v.dims, spacing: v.spacing, data: VoxelData::F32(data) }
}

/// Defect fraction of a binary mask.
pub fn porosity(mask: &Volume) -> Result<f64> {
    let m = mask.as_u8()?;
    if let Some(bad) = m.iter().find(|&&v| v > 1) {
        return Err(Error::Data(format!("porosity: mask voxel value {} is not binary", bad)));
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(m.iter().filter(|&&v| v == 1).count() as f64 / m.len() as f64)
}

fn crop(v: &Volume, origin: [usize; 3], size: [usize; 3]) -> Volume {
    let [_, h, w] = v.dims;
    let copy_rows = |out: &mut Vec<u8>, src: &[u8]| {
        for d in 0..size[0] {
            for hh in 0..size[1] {
                let row = ((origin[0] + d) * h + origin[1] + hh) * w + origin[2];
                out.extend_from_slice(&src[row..row + size[2]]);
            }
        }
    };
    let data = match &v.data {
        VoxelData::U8(src) => {
            let mut out = Vec::with_capacity(size.iter().product());
            copy_rows(&mut out, src);
            VoxelData::U8(out)
        }
        VoxelData::U16(src) => {
            let mut out = Vec::with_capacity(size.iter().product());
            for d in 0..size[0] {
                for hh in 0..size[1] {
                    let row = ((origin[0] + d) * h + origin[1] + hh) * w + origin[2];
                    out.extend_from_slice(&src[row..row + size[2]]);
                }
            }
            VoxelData::U16(out)
        }
        VoxelData::F32(src) => {
            let mut out = Vec::with_capacity(size.iter().product());
            for d in 0..size[0] {
                for hh in 0..size[1] {
                    let row = ((origin[0] + d) * h + origin[1] + hh) * w + origin[2];
                    out.extend_from_slice(&src[row..row + size[2]]);
                }
            }
            VoxelData::F32(out)
        }
    };
    Volume { dims: size, spacing: v.spacing, data }
}

fn mask_has_defect(mask: &Volume, origin: [usize; 3], size: [usize; 3]) -> bool {
    let m = mask.as_u8().expect("mask is u8");
    let [_, h, w] = mask.dims;
    for d in 0..size[0] {
        for hh in 0..size[1] {
            let row = ((origin[0] + d) * h + origin[1] + hh) * w + origin[2];
            if m[row..row + size[2]].iter().any(|&v| v == 1) {
                return true;
            }
        }
    }
    false
}

/// Axis-aligned crop of image and mask at the same origin. With probability
/// `fg_bias` the origin is rejection-sampled (up to 100 tries) until the
/// patch holds at least one defect voxel, falling back to uniform.
pub fn sample_patch(
    lv: &LabeledVolume,
    patch: [usize; 3],
    rng: &mut ChaCha8Rng,
    fg_bias: f64,
) -> Result<LabeledVolume> {
    let dims = lv.image.dims;
    for a in 0..3 {
        if patch[a] > dims[a] {
            return Err(Error::Data(format!(
                "patch {:?} does not fit in volume {:?}",
                patch, dims
            )));
        }
    }
    let draw_origin = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(0..=dims[0] - patch[0]),
            rng.random_range(0..=dims[1] - patch[1]),
            rng.random_range(0..=dims[2] - patch[2]),
        ]
    };
    let want_fg = rng.random_range(0.0..1.0) < fg_bias;
    let mut origin = draw_origin(rng);
    if want_fg {
        let mut tries = 1;
        while !mask_has_defect(&lv.mask, origin, patch) && tries < 100 {
            origin = draw_origin(rng);
            tries += 1;
        }
    }
    Ok(LabeledVolume { image: crop(&lv.image, origin, patch), mask: crop(&lv.mask, origin, patch) })
}

/// One augmentation decision: independent axis flips and a quarter-turn
/// count in the h-w plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flips: [bool; 3],
    pub quarter_turns: u8,
}

pub fn draw_augment(rng: &mut ChaCha8Rng) -> AugmentDraw {
    AugmentDraw {
        flips: [rng.random(), rng.random(), rng.random()],
        quarter_turns: rng.random_range(0..4u8),
    }
}

fn remap_volume(v: &Volume, new_dims: [usize; 3], f: impl Fn(usize, usize, usize) -> usize) -> Volume {
    let [nd, nh, nw] = new_dims;
    let total = nd * nh * nw;
    let data = match &v.data {
        VoxelData::U8(src) => {
            let mut out = Vec::with_capacity(total);
            for d in 0..nd {
                for h in 0..nh {
                    for w in 0..nw {
                        out.push(src[f(d, h, w)]);
                    }
                }
            }
            VoxelData::U8(out)
        }
        VoxelData::U16(src) => {
            let mut out = Vec::with_capacity(total);
            for d in 0..nd {
                for h in 0..nh {
                    for w in 0..nw {
                        out.push(src[f(d, h, w)]);
                    }
                }
            }
            VoxelData::U16(out)
        }
        VoxelData::F32(src) => {
            let mut out = Vec::with_capacity(total);
            for d in 0..nd {
                for h in 0..nh {
                    for w in 0..nw {
                        out.push(src[f(d, h, w)]);
                    }
                }
            }
            VoxelData::F32(out)
        }
    };
    Volume { dims: new_dims, spacing: v.spacing, data }
}

fn transform_volume(v: &Volume, draw: AugmentDraw) -> Volume {
    let [d, h, w] = v.dims;
    let flipped = remap_volume(v, v.dims, |zd, zh, zw| {
        let sd = if draw.flips[0] { d - 1 - zd } else { zd };
        let sh = if draw.flips[1] { h - 1 - zh } else { zh };
        let sw = if draw.flips[2] { w - 1 - zw } else { zw };
        (sd * h + sh) * w + sw
    });
    // Rotation by k quarter turns in the h-w plane; odd turns need h == w
    // (callers skip those draws otherwise).
    let k = draw.quarter_turns % 4;
    if k == 0 {
        return flipped;
    }
    match k {
        1 => remap_volume(&flipped, v.dims, |zd, zh, zw| (zd * h + zw) * w + (w - 1 - zh)),
        2 => remap_volume(&flipped, v.dims, |zd, zh, zw| (zd * h + (h - 1 - zh)) * w + (w - 1 - zw)),
        3 => remap_volume(&flipped, v.dims, |zd, zh, zw| (zd * h + (h - 1 - zw)) * w + zh),
        _ => unreachable!(),
    }
}

/// Applies a fixed augmentation decision to image and mask identically.
/// A rotation with odd quarter turns on a non-square h-w plane is skipped
/// for that draw (the flips still apply).
pub fn apply_augment(lv: &LabeledVolume, mut draw: AugmentDraw) -> LabeledVolume {
    let [_, h, w] = lv.image.dims;
    if h != w && draw.quarter_turns % 2 == 1 {
        draw.quarter_turns = 0;
    }
    LabeledVolume {
        image: transform_volume(&lv.image, draw),
        mask: transform_volume(&lv.mask, draw),
    }
}

/// Random flips (p = 0.5 per axis) plus a k*90-degree axial rotation.
pub fn augment(lv: &LabeledVolume, rng: &mut ChaCha8Rng) -> LabeledVolume {
    apply_augment(lv, draw_augment(rng))
}

// ---------------------------------------------------------------------------
// Synthetic defect volumes
// ---------------------------------------------------------------------------

/// Recipe for a synthetic labeled volume: dark ellipsoidal pores in bright
/// material, blurred and noised, grown to a target porosity.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub target_porosity: f64,
    /// Base pore radius range in voxels.
    pub radius_range: [f64; 2],
    /// One random axis of each pore is stretched by a factor in this range.
    pub elongation_range: [f64; 2],
    pub material_gray: u8,
    pub pore_gray: u8,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub spacing: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            target_porosity: 0.05,
            radius_range: [2.0, 5.0],
            elongation_range: [1.0, 2.0],
            material_gray: 200,
            pore_gray: 60,
            noise_sigma: 10.0,
            blur_sigma: 0.8,
            spacing: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("synth dims {:?} contain zero", self.dims)));
        }
        if !(self.target_porosity > 0.0 && self.target_porosity < 0.25) {
            return Err(Error::Config(format!(
                "target_porosity must be in (0, 0.25), got {}",
                self.target_porosity
            )));
        }
        if !(self.radius_range[0] > 0.0 && self.radius_range[0] <= self.radius_range[1]) {
            return Err(Error::Config(format!("bad radius range {:?}", self.radius_range)));
        }
        if !(self.elongation_range[0] >= 1.0 && self.elongation_range[0] <= self.elongation_range[1]) {
            return Err(Error::Config(format!("bad elongation range {:?}", self.elongation_range)));
        }
        let max_extent = self.radius_range[1] * self.elongation_range[1] * 2.0;
        let min_dim = *self.dims.iter().min().unwrap() as f64;
        if max_extent > min_dim {
            return Err(Error::Config(format!(
                "infeasible spec: pore extent up to {:.1} voxels does not fit dims {:?}",
                max_extent, self.dims
            )));
        }
        if self.noise_sigma < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::Config("noise/blur sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Separable Gaussian blur on an f64 grid, edge-replicated, kernel radius
/// ceil(3 sigma).
fn gaussian_blur(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= ksum;
    }
    let [d, h, w] = dims;
    let idx = |zd: usize, zh: usize, zw: usize| (zd * h + zh) * w + zw;
    let mut tmp = vec![0.0; data.len()];
    // one pass per axis
    for axis in 0..3 {
        let extent = dims[axis] as isize;
        for zd in 0..d {
            for zh in 0..h {
                for zw in 0..w {
                    let pos = [zd as isize, zh as isize, zw as isize];
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let mut p = pos;
                        p[axis] = (p[axis] + ki as isize - radius).clamp(0, extent - 1);
                        acc += kv * data[idx(p[0] as usize, p[1] as usize, p[2] as usize)];
                    }
                    tmp[idx(zd, zh, zw)] = acc;
                }
            }
        }
        data.copy_from_slice(&tmp);
    }
}

/// Grows the defect mask as a union of random ellipsoids until porosity
/// reaches the target (never exceeding 1.2x target), then renders the image:
/// material/pore gray levels, Gaussian blur, i.i.d. Gaussian noise, clamped
/// to u8. Deterministic per seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<LabeledVolume> {
    use rand::SeedableRng;
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let total = d * h * w;
    let target = (spec.target_porosity * total as f64).ceil() as usize;
    let cap = (1.2 * spec.target_porosity * total as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = vec![0u8; total];
    let mut defect = 0usize;
    let mut rejected = 0usize;

    while defect < target && rejected < 1000 {
        let center = [
            rng.random_range(0.0..d as f64),
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        ];
        let r = rng.random_range(spec.radius_range[0]..=spec.radius_range[1]);
        let e = rng.random_range(spec.elongation_range[0]..=spec.elongation_range[1]);
        let axis = rng.random_range(0..3usize);
        let mut semi = [r, r, r];
        semi[axis] *= e;

        // Voxels the ellipsoid would add, scanned over its bounding box.
        let lo = |a: usize| (center[a] - semi[a]).floor().max(0.0) as usize;
        let hi = |a: usize, ext: usize| ((center[a] + semi[a]).ceil() as usize).min(ext - 1);
        let mut added = Vec::new();
        for zd in lo(0)..=hi(0, d) {
            for zh in lo(1)..=hi(1, h) {
                for zw in lo(2)..=hi(2, w) {
                    let dist = ((zd as f64 + 0.5 - center[0]) / semi[0]).powi(2)
                        + ((zh as f64 + 0.5 - center[1]) / semi[1]).powi(2)
                        + ((zw as f64 + 0.5 - center[2]) / semi[2]).powi(2);
                    let i = (zd * h + zh) * w + zw;
                    if dist <= 1.0 && mask[i] == 0 {
                        added.push(i);
                    }
                }
            }
        }
        if defect + added.len() > cap {
            rejected += 1;
            continue;
        }
        for i in added {
            mask[i] = 1;
        }
        defect = mask.iter().filter(|&&v| v == 1).count();
    }
    // Degenerate recipes (every candidate overshoots the cap): top up with
    // single voxels, which cannot overshoot while cap - target >= 1.
    while defect < target {
        let i = rng.random_range(0..total);
        if mask[i] == 0 {
            mask[i] = 1;
            defect += 1;
        }
    }

    let mut image: Vec<f64> = mask
        .iter()
        .map(|&m| if m == 1 { spec.pore_gray as f64 } else { spec.material_gray as f64 })
        .collect();
    gaussian_blur(&mut image, spec.dims, spec.blur_sigma);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("positive sigma");
        for v in image.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let image_u8: Vec<u8> = image.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();

    LabeledVolume::new(
        Volume::new(spec.dims, spec.spacing, VoxelData::U8(image_u8))?,
        Volume::new(spec.dims, spec.spacing, VoxelData::U8(mask))?,
    )
}
