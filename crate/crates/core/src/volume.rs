//! The 3D scalar grid underlying images and masks, plus its on-disk formats:
//! the `.vhdr`/`.vol` pair (text header + little-endian raw data) and 8/16-bit
//! binary PGM ("P5") slices.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    U8,
    U16,
    F32,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
            Dtype::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "u16" => Ok(Dtype::U16),
            "f32" => Ok(Dtype::F32),
            other => Err(Error::Format(format!("unknown dtype '{}'", other))),
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::U16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::U8(_) => Dtype::U8,
            VoxelData::U16(_) => Dtype::U16,
            VoxelData::F32(_) => Dtype::F32,
        }
    }
}

/// A 3D scalar grid with row-major `(d, h, w)` layout and the physical
/// distance between slices as metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub data: VoxelData,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: f64, data: VoxelData) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "volume data length {} does not match dims {:?} (= {} voxels)",
                data.len(),
                dims,
                expect
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros_u8(dims: [usize; 3]) -> Self {
        Self { dims, spacing: 1.0, data: VoxelData::U8(vec![0; dims.iter().product()]) }
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    /// Voxel value widened to f64 regardless of dtype.
    #[inline]
    pub fn get_f64(&self, i: usize) -> f64 {
        match &self.data {
            VoxelData::U8(v) => v[i] as f64,
            VoxelData::U16(v) => v[i] as f64,
            VoxelData::F32(v) => v[i] as f64,
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Ok(v),
            other => Err(Error::Data(format!("expected a u8 volume, got {}", other.dtype().as_str()))),
        }
    }

    pub fn as_u16(&self) -> Result<&[u16]> {
        match &self.data {
            VoxelData::U16(v) => Ok(v),
            other => Err(Error::Data(format!("expected a u16 volume, got {}", other.dtype().as_str()))),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            VoxelData::F32(v) => Ok(v),
            other => Err(Error::Data(format!("expected an f32 volume, got {}", other.dtype().as_str()))),
        }
    }

    /// Depth slice `k` as a `(1, h, w)` volume of the same dtype.
    pub fn extract_slice(&self, k: usize) -> Result<Volume> {
        let [d, h, w] = self.dims;
        if k >= d {
            return Err(Error::Data(format!("slice index {} out of range (depth {})", k, d)));
        }
        let (lo, hi) = (k * h * w, (k + 1) * h * w);
        let data = match &self.data {
            VoxelData::U8(v) => VoxelData::U8(v[lo..hi].to_vec()),
            VoxelData::U16(v) => VoxelData::U16(v[lo..hi].to_vec()),
            VoxelData::F32(v) => VoxelData::F32(v[lo..hi].to_vec()),
        };
        Volume::new([1, h, w], self.spacing, data)
    }

    /// `(1, 1, d, h, w)` activation tensor; integer dtypes widen losslessly.
    pub fn to_tensor(&self) -> Tensor5<f32> {
        let [d, h, w] = self.dims;
        let data: Vec<f32> = match &self.data {
            VoxelData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::U16(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::F32(v) => v.clone(),
        };
        Tensor5::from_vec([1, 1, d, h, w], data).expect("matching lengths")
    }
}

/// An image volume paired with its `{0 = background, 1 = defect}` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub image: Volume,
    pub mask: Volume,
}

impl LabeledVolume {
    pub fn new(image: Volume, mask: Volume) -> Result<Self> {
        if image.dims != mask.dims {
            return Err(Error::Shape(format!(
                "image dims {:?} do not match mask dims {:?}",
                image.dims, mask.dims
            )));
        }
        let m = mask.as_u8()?;
        if let Some(bad) = m.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask voxel value {} is not in {{0,1}}", bad)));
        }
        Ok(Self { image, mask })
    }
}

// ---------------------------------------------------------------------------
// .vhdr / .vol
// ---------------------------------------------------------------------------

/// Strips a trailing `.vol`/`.vhdr` extension so any of `name`, `name.vol`,
/// `name.vhdr` addresses the same pair.
fn base_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("vol") | Some("vhdr") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

/// Writes `<base>.vhdr` (text: dims, dtype, spacing) and `<base>.vol`
/// (little-endian raw voxels, row-major d,h,w).
pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    let base = base_path(path);
    let header = format!(
        "dims = {} {} {}\ndtype = {}\nspacing = {}\n",
        v.dims[0],
        v.dims[1],
        v.dims[2],
        v.dtype().as_str(),
        v.spacing
    );
    fs::write(base.with_extension("vhdr"), header)?;
    let mut raw = Vec::with_capacity(v.len() * v.dtype().bytes_per_voxel());
    match &v.data {
        VoxelData::U8(d) => raw.extend_from_slice(d),
        VoxelData::U16(d) => {
            for x in d {
                raw.extend_from_slice(&x.to_le_bytes());
            }
        }
        VoxelData::F32(d) => {
            for x in d {
                raw.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fs::write(base.with_extension("vol"), raw)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let base = base_path(path);
    let hdr_path = base.with_extension("vhdr");
    let header = fs::read_to_string(&hdr_path)
        .map_err(|e| Error::Format(format!("malformed header: cannot read {}: {}", hdr_path.display(), e)))?;

    let mut dims: Option<[usize; 3]> = None;
    let mut dtype: Option<Dtype> = None;
    let mut spacing: Option<f64> = None;
    for line in header.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed header: line '{}' is not 'key = value'", line)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "dims" => {
                let parts: Vec<usize> = value
                    .split_whitespace()
                    .map(|p| {
                        p.parse()
                            .map_err(|_| Error::Format(format!("malformed header: bad dims '{}'", value)))
                    })
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Format(format!("malformed header: dims needs 3 values, got '{}'", value)));
                }
                dims = Some([parts[0], parts[1], parts[2]]);
            }
            "dtype" => dtype = Some(Dtype::parse(value)?),
            "spacing" => {
                spacing = Some(value.parse().map_err(|_| {
                    Error::Format(format!("malformed header: bad spacing '{}'", value))
                })?)
            }
            other => {
                return Err(Error::Format(format!("malformed header: unknown key '{}'", other)));
            }
        }
    }
    let dims = dims.ok_or_else(|| Error::Format("malformed header: missing dims".into()))?;
    let dtype = dtype.ok_or_else(|| Error::Format("malformed header: missing dtype".into()))?;
    let spacing = spacing.ok_or_else(|| Error::Format("malformed header: missing spacing".into()))?;

    let raw = fs::read(base.with_extension("vol"))?;
    let voxels: usize = dims.iter().product();
    let expect = voxels * dtype.bytes_per_voxel();
    if raw.len() < expect {
        return Err(Error::Format(format!(
            "truncated data: {} has {} bytes, header implies {}",
            base.with_extension("vol").display(),
            raw.len(),
            expect
        )));
    }
    if raw.len() > expect {
        return Err(Error::Format(format!(
            "trailing data: {} has {} bytes, header implies {}",
            base.with_extension("vol").display(),
            raw.len(),
            expect
        )));
    }
    let data = match dtype {
        Dtype::U8 => VoxelData::U8(raw),
        Dtype::U16 => {
            VoxelData::U16(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
        }
        Dtype::F32 => VoxelData::F32(
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        ),
    };
    Volume::new(dims, spacing, data)
}

// ---------------------------------------------------------------------------
// PGM (P5)
// ---------------------------------------------------------------------------

/// One imported 2D slice: 8-bit or 16-bit single-channel.
pub struct PgmSlice {
    pub width: usize,
    pub height: usize,
    pub data: VoxelData,
}

/// Reads a binary single-channel PGM. 16-bit samples are big-endian per the
/// format definition.
pub fn read_pgm(path: &Path) -> Result<PgmSlice> {
    let raw = fs::read(path)?;
    let mut pos = 0usize;

    fn skip_ws_and_comments(raw: &[u8], pos: &mut usize) {
        loop {
            while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < raw.len() && raw[*pos] == b'#' {
                while *pos < raw.len() && raw[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn read_token(raw: &[u8], pos: &mut usize) -> Option<String> {
        skip_ws_and_comments(raw, pos);
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            None
        } else {
            Some(String::from_utf8_lossy(&raw[start..*pos]).into_owned())
        }
    }

    let e = |msg: String| Error::Format(format!("{}: {}", path.display(), msg));
    let magic = read_token(&raw, &mut pos).ok_or_else(|| e("malformed header: empty file".into()))?;
    if magic != "P5" {
        return Err(e(format!("malformed header: magic '{}', expected P5", magic)));
    }
    let mut next_usize = |what: &str| -> Result<usize> {
        read_token(&raw, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| e(format!("malformed header: bad {}", what)))
    };
    let width = next_usize("width")?;
    let height = next_usize("height")?;
    let maxval = next_usize("maxval")?;
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let count = width * height;
    let data = if maxval == 0 || maxval > 65535 {
        return Err(e(format!("unknown dtype: maxval {}", maxval)));
    } else if maxval <= 255 {
        let body = raw.get(pos..pos + count).ok_or_else(|| e("truncated data".into()))?;
        VoxelData::U8(body.to_vec())
    } else {
        let body = raw.get(pos..pos + 2 * count).ok_or_else(|| e("truncated data".into()))?;
        VoxelData::U16(body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect())
    };
    Ok(PgmSlice { width, height, data })
}

/// Writes an 8-bit binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::Shape(format!(
            "pgm data length {} does not match {}x{}",
            data.len(),
            width,
            height
        )));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", width, height)?;
    f.write_all(data)?;
    Ok(())
}

/// Reads ordered PGM slices into a volume; slice `k` of the list occupies
/// depth index `k`. All slices must agree on dimensions and dtype; a
/// mismatch names the offending file.
pub fn stack_slices(slice_paths: &[PathBuf], spacing: f64) -> Result<Volume> {
    if slice_paths.is_empty() {
        return Err(Error::Data("stack_slices: no slices given".into()));
    }
    let first = read_pgm(&slice_paths[0])?;
    let (w, h) = (first.width, first.height);
    let dtype = first.data.dtype();
    let mut u8s: Vec<u8> = Vec::new();
    let mut u16s: Vec<u16> = Vec::new();
    let mut push = |s: PgmSlice| match s.data {
        VoxelData::U8(mut v) => u8s.append(&mut v),
        VoxelData::U16(mut v) => u16s.append(&mut v),
        VoxelData::F32(_) => unreachable!("pgm slices are integer"),
    };
    push(first);
    for p in &slice_paths[1..] {
        let s = read_pgm(p)?;
        if (s.width, s.height) != (w, h) {
            return Err(Error::Data(format!(
                "slice {} is {}x{}, expected {}x{}",
                p.display(),
                s.width,
                s.height,
                w,
                h
            )));
        }
        if s.data.dtype() != dtype {
            return Err(Error::Data(format!(
                "slice {} is {}, expected {}",
                p.display(),
                s.data.dtype().as_str(),
                dtype.as_str()
            )));
        }
        push(s);
    }
    let d = slice_paths.len();
    let data = match dtype {
        Dtype::U8 => VoxelData::U8(u8s),
        Dtype::U16 => VoxelData::U16(u16s),
        Dtype::F32 => unreachable!(),
    };
    Volume::new([d, h, w], spacing, data)
}
