//! Checkpoint file format "VSEG1": magic bytes, a length-prefixed UTF-8
//! config record, every registry tensor (learnable parameters and batch-norm
//! running statistics, in registry order) as little-endian f32 scalars, and
//! an optional optimizer-state section (step counter plus first/second
//! moments per parameter, same ordering) so training can resume exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::unet::{build_model, UNetConfig, UNetModel, VariantKind};

const MAGIC: &[u8; 5] = b"VSEG1";

fn config_record(cfg: &UNetConfig) -> String {
    format!(
        "variant={}\nin_channels={}\nout_channels={}\nlevels={}\nbase_channels={}\ngn_channels_per_group={}\n",
        cfg.variant.as_str(),
        cfg.in_channels,
        cfg.out_channels,
        cfg.levels,
        cfg.base_channels,
        cfg.gn_channels_per_group
    )
}

fn parse_config_record(text: &str) -> Result<UNetConfig> {
    let mut cfg = UNetConfig::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed config record line '{}'", line)))?;
        let bad = |_| Error::Format(format!("malformed config record value '{}'", value));
        match key {
            "variant" => cfg.variant = VariantKind::parse(value)?,
            "in_channels" => cfg.in_channels = value.parse().map_err(bad)?,
            "out_channels" => cfg.out_channels = value.parse().map_err(bad)?,
            "levels" => cfg.levels = value.parse().map_err(bad)?,
            "base_channels" => cfg.base_channels = value.parse().map_err(bad)?,
            "gn_channels_per_group" => cfg.gn_channels_per_group = value.parse().map_err(bad)?,
            other => return Err(Error::Format(format!("unknown config record key '{}'", other))),
        }
    }
    Ok(cfg)
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the model (and optionally its optimizer) to `path`.
pub fn save_checkpoint(path: &Path, model: &mut UNetModel<f32>, optim: Option<&Adam<f32>>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let record = config_record(model.config());
    out.extend_from_slice(&(record.len() as u32).to_le_bytes());
    out.extend_from_slice(record.as_bytes());
    model.for_each_tensor(&mut |e| push_f32s(&mut out, e.value));
    match optim {
        None => out.push(0),
        Some(adam) => {
            out.push(1);
            out.extend_from_slice(&adam.t.to_le_bytes());
            for slice in adam.m.iter().chain(adam.v.iter()) {
                push_f32s(&mut out, slice);
            }
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated data: checkpoint {} ends early", self.path.display()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take_f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * count)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

/// Restored optimizer state: step counter and per-parameter moments.
#[derive(Clone, Debug)]
pub struct OptimSnapshot {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Loads a checkpoint, rebuilding the model from the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<(UNetModel<f32>, Option<OptimSnapshot>)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(5)? != MAGIC {
        return Err(Error::Format(format!(
            "malformed header: {} does not start with the VSEG1 magic",
            path.display()
        )));
    }
    let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let record = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("malformed header: config record is not UTF-8".into()))?;
    let config = parse_config_record(record)?;
    let mut model = build_model::<f32>(&config, 0)?;

    // Tensor values in registry order.
    let mut sizes: Vec<usize> = Vec::new();
    let mut param_sizes: Vec<usize> = Vec::new();
    model.for_each_tensor(&mut |e| {
        sizes.push(e.value.len());
        if e.grad.is_some() {
            param_sizes.push(e.value.len());
        }
    });
    let mut tensors = Vec::with_capacity(sizes.len());
    for n in &sizes {
        tensors.push(r.take_f32s(*n)?);
    }
    let mut it = tensors.into_iter();
    model.for_each_tensor(&mut |e| {
        e.value.copy_from_slice(&it.next().expect("tensor count matches"));
    });

    let flag = r.take(1)?[0];
    let optim = match flag {
        0 => None,
        1 => {
            let t = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let mut m = Vec::with_capacity(param_sizes.len());
            for n in &param_sizes {
                m.push(r.take_f32s(*n)?);
            }
            let mut v = Vec::with_capacity(param_sizes.len());
            for n in &param_sizes {
                v.push(r.take_f32s(*n)?);
            }
            Some(OptimSnapshot { t, m, v })
        }
        other => {
            return Err(Error::Format(format!("malformed optimizer-state flag {}", other)));
        }
    };
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "trailing data: checkpoint {} has {} unread bytes",
            path.display(),
            buf.len() - r.pos
        )));
    }
    Ok((model, optim))
}

/// Loads weights from `path` into an existing model after validating that the
/// embedded config equals the model's.
pub fn load_into(path: &Path, model: &mut UNetModel<f32>) -> Result<Option<OptimSnapshot>> {
    let (loaded, optim) = load_checkpoint(path)?;
    if loaded.config() != model.config() {
        return Err(Error::Config(format!(
            "checkpoint config {:?} does not match model config {:?}",
            loaded.config(),
            model.config()
        )));
    }
    let mut src = Vec::new();
    let mut loaded = loaded;
    loaded.for_each_tensor(&mut |e| src.push(e.value.to_vec()));
    let mut it = src.into_iter();
    model.for_each_tensor(&mut |e| e.value.copy_from_slice(&it.next().expect("same registry")));
    Ok(optim)
}
