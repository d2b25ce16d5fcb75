//! Training-loop orchestration: fg-biased patch sampling, augmentation,
//! normalization, forward/backward, Adam with the step-decay schedule,
//! periodic validation, logging, and checkpointing.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_into, save_checkpoint};
use crate::config::{NormalizeMode, RunConfig};
use crate::data::{augment, normalize_minmax, normalize_zscore, porosity, sample_patch};
use crate::error::{Error, Result};
use crate::inference::{binarize, plan_tiles, predict_volume, ProbVolume};
use crate::metrics::{confusion_counts, iou_report, IouReport};
use crate::nn::{softmax_cross_entropy, Mode};
use crate::optim::{lr_at, Adam};
use crate::tensor::Tensor5;
use crate::unet::{build_model, UNetModel};
use crate::volume::{load_volume, LabeledVolume, Volume};

/// One log row. Training rows carry lr and loss; rows produced by a
/// validation pass carry the IOU numbers (on the same row when the
/// validation ran right after that iteration's step).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub iter: u64,
    pub lr: Option<f64>,
    pub loss: Option<f64>,
    pub val: Option<(f64, f64)>, // (mean_iou, defect_iou)
    /// Wall-clock seconds since the loop started; never serialized.
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// Append-only CSV `iter,lr,loss,val_mean_iou,val_defect_iou`.
    /// Timestamps are intentionally excluded so identical runs produce
    /// byte-identical logs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr,loss,val_mean_iou,val_defect_iou\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iter,
                fmt(r.lr),
                fmt(r.loss),
                fmt(r.val.map(|v| v.0)),
                fmt(r.val.map(|v| v.1)),
            ));
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub final_val: Option<IouReport>,
    pub wall_secs: f64,
}

fn normalize(cfg: &RunConfig, v: &Volume) -> Volume {
    match cfg.data.normalize {
        NormalizeMode::Zscore => normalize_zscore(v),
        NormalizeMode::Minmax => normalize_minmax(v),
    }
}

fn load_pairs(images: &[PathBuf], masks: &[PathBuf]) -> Result<Vec<LabeledVolume>> {
    images
        .iter()
        .zip(masks)
        .map(|(ip, mp)| {
            let image = load_volume(ip)?;
            let mask = load_volume(mp)?;
            LabeledVolume::new(image, mask).map_err(|e| {
                Error::Data(format!("{} / {}: {}", ip.display(), mp.display(), e))
            })
        })
        .collect()
}

/// Stateless per-iteration RNG stream so a resumed run replays the exact
/// draws of a straight run.
fn iter_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ iter.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Validation = whole-volume sliding-window inference + IOU against the mask.
pub fn validate_model(
    cfg: &RunConfig,
    model: &mut UNetModel<f32>,
    val: &LabeledVolume,
) -> Result<(IouReport, ProbVolume)> {
    let normalized = normalize(cfg, &val.image);
    let plan = plan_tiles(val.image.dims, cfg.inference.patch, cfg.inference.stride)?;
    let prob = predict_volume(model, &normalized, &plan, cfg.inference.blend)?;
    let pred = binarize(&prob, cfg.inference.threshold)?;
    let report = iou_report(&confusion_counts(&pred, &val.mask)?);
    Ok((report, prob))
}

/// Runs the full training loop per the config: per iteration sample a
/// fg-biased patch, augment, normalize, forward(train), softmax-CE loss,
/// backward, Adam step at `lr_at(iter)`; every `train.eval_every` iterations
/// a full validation-volume inference is logged. Writes `final.ckpt`,
/// `best.ckpt` (highest validation mean IOU) and `train_log.csv` under
/// `train.out_dir`. Fully reproducible from the seed.
pub fn train_loop(cfg: &RunConfig) -> Result<(UNetModel<f32>, TrainOutcome)> {
    cfg.validate()?;
    if cfg.data.train_images.is_empty() {
        return Err(Error::Config("data.train_images is empty".into()));
    }
    let volumes = load_pairs(&cfg.data.train_images, &cfg.data.train_masks)?;
    let val = match (&cfg.data.val_image, &cfg.data.val_mask) {
        (Some(ip), Some(mp)) => {
            let pairs = load_pairs(&[ip.clone()], &[mp.clone()])?;
            Some(pairs.into_iter().next().unwrap())
        }
        _ => None,
    };
    let patch = cfg.hyper.patch;
    for (i, lv) in volumes.iter().enumerate() {
        for a in 0..3 {
            if patch[a] > lv.image.dims[a] {
                return Err(Error::Data(format!(
                    "training volume {} dims {:?} smaller than patch {:?}",
                    cfg.data.train_images[i].display(),
                    lv.image.dims,
                    patch
                )));
            }
        }
    }

    let mut model = build_model::<f32>(&cfg.model, cfg.seed)?;
    let mut adam = Adam::with_betas(&mut model, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps);
    let mut start_iter = 0u64;
    if let Some(resume) = &cfg.train.resume {
        let snap = load_into(resume, &mut model)?;
        if let Some(snap) = snap {
            start_iter = snap.t;
            adam.t = snap.t;
            adam.m = snap.m;
            adam.v = snap.v;
        }
    }

    std::fs::create_dir_all(&cfg.train.out_dir)?;
    let final_path = cfg.train.out_dir.join("final.ckpt");
    let best_path = cfg.train.out_dir.join("best.ckpt");
    let log_path = cfg.train.out_dir.join("train_log.csv");

    let started = Instant::now();
    let mut log = TrainLog::default();
    let mut best_mean = f64::NEG_INFINITY;
    let mut best_written = false;
    let mut last_val: Option<IouReport> = None;

    for iter in start_iter..cfg.hyper.total_iters {
        let mut rng = iter_rng(cfg.seed, iter);
        let lr = lr_at(iter, &cfg.schedule);

        // Assemble the batch (batch size 1 in the published setup).
        let mut images: Vec<Volume> = Vec::with_capacity(cfg.hyper.batch_size);
        let mut targets: Vec<u8> = Vec::new();
        for _ in 0..cfg.hyper.batch_size {
            let which = if volumes.len() == 1 {
                0
            } else {
                use rand::RngExt;
                rng.random_range(0..volumes.len())
            };
            let mut p = sample_patch(&volumes[which], patch, &mut rng, cfg.data.fg_bias)?;
            if cfg.data.augment {
                p = augment(&p, &mut rng);
            }
            targets.extend_from_slice(p.mask.as_u8()?);
            images.push(normalize(cfg, &p.image));
        }
        let mut batch = Tensor5::<f32>::zeros([cfg.hyper.batch_size, 1, patch[0], patch[1], patch[2]]);
        let plane: usize = patch.iter().product();
        for (b, img) in images.iter().enumerate() {
            batch.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(img.as_f32()?);
        }

        let logits = model.forward(&batch, Mode::Train)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {} at iteration {}", loss, iter)));
        }
        model.backward(&grad)?;
        adam.step(&mut model, lr, cfg.hyper.weight_decay)?;

        let mut record = TrainRecord {
            iter,
            lr: Some(lr),
            loss: Some(loss as f64),
            val: None,
            elapsed_secs: started.elapsed().as_secs_f64(),
        };
        if let Some(val_lv) = &val {
            if cfg.train.eval_every > 0 && (iter + 1) % cfg.train.eval_every == 0 {
                let (report, _) = validate_model(cfg, &mut model, val_lv)?;
                record.val = Some((report.mean_iou, report.iou_defect));
                last_val = Some(report);
                if report.mean_iou > best_mean {
                    best_mean = report.mean_iou;
                    save_checkpoint(&best_path, &mut model, Some(&adam))?;
                    best_written = true;
                }
            }
        }
        log.records.push(record);
    }

    // Closing validation unless the last iteration just ran one.
    if let Some(val_lv) = &val {
        let already = log.records.last().map(|r| r.val.is_some()).unwrap_or(false);
        if !already {
            let (report, _) = validate_model(cfg, &mut model, val_lv)?;
            last_val = Some(report);
            log.records.push(TrainRecord {
                iter: cfg.hyper.total_iters,
                lr: None,
                loss: None,
                val: Some((report.mean_iou, report.iou_defect)),
                elapsed_secs: started.elapsed().as_secs_f64(),
            });
            if report.mean_iou > best_mean {
                save_checkpoint(&best_path, &mut model, Some(&adam))?;
                best_written = true;
            }
        }
    }

    save_checkpoint(&final_path, &mut model, Some(&adam))?;
    if !best_written {
        save_checkpoint(&best_path, &mut model, Some(&adam))?;
    }
    std::fs::write(&log_path, log.to_csv())?;

    let outcome = TrainOutcome {
        log,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        log_path,
        final_val: last_val,
        wall_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, outcome))
}

/// One comparison-table row.
#[derive(Clone, Debug)]
pub struct VariantRow {
    pub variant: crate::unet::VariantKind,
    pub wall_secs: f64,
    pub mean_iou: Option<f64>,
    pub defect_iou: Option<f64>,
}

/// Trains each variant with identical seed and data and reports wall-clock
/// seconds plus validation IOU per variant. Wall-clock numbers are reported,
/// never asserted.
pub fn compare_variants(cfg: &RunConfig, variants: &[crate::unet::VariantKind]) -> Result<Vec<VariantRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        let mut vcfg = cfg.clone();
        vcfg.model.variant = variant;
        vcfg.train.out_dir = cfg.train.out_dir.join(variant.as_str());
        let (_, outcome) = train_loop(&vcfg)?;
        rows.push(VariantRow {
            variant,
            wall_secs: outcome.wall_secs,
            mean_iou: outcome.final_val.map(|r| r.mean_iou),
            defect_iou: outcome.final_val.map(|r| r.iou_defect),
        });
    }
    Ok(rows)
}

/// Renders the comparison table; `compare_paper` appends the published
/// full-scale reference rows (never asserted, hardware-bound).
pub fn render_variant_table(rows: &[VariantRow], compare_paper: bool) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>12} {:>10} {:>11}\n",
        "variant", "wall_secs", "mean_iou", "defect_iou"
    ));
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>12.1} {:>10} {:>11}\n",
            r.variant.as_str(),
            r.wall_secs,
            fmt(r.mean_iou),
            fmt(r.defect_iou),
        ));
    }
    if compare_paper {
        out.push_str(&reference_table());
    }
    out
}

/// The published full-scale reference results (CoCr validation sample):
/// mean IOU and training hours per variant.
pub fn reference_table() -> String {
    let mut out = String::new();
    out.push_str("reference (full-scale GPU runs, reported, not reproduced here):\n");
    out.push_str(&format!("{:<24} {:>12} {:>10}\n", "variant", "train_hours", "mean_iou"));
    out.push_str(&format!("{:<24} {:>12} {:>10}\n", "conv_bn_relu", "6.58", "0.863"));
    out.push_str(&format!("{:<24} {:>12} {:>10}\n", "conv_relu_gn", "14.00", "0.881"));
    out.push_str(&format!("{:<24} {:>12} {:>10}\n", "residual_symmetric", "19.97", "0.884"));
    out
}

/// Porosity of a prediction/truth pair for the eval report.
pub fn porosity_pair(pred: &Volume, truth: &Volume) -> Result<(f64, f64)> {
    Ok((porosity(pred)?, porosity(truth)?))
}
