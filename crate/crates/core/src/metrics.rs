//! Confusion counts and per-class/mean intersection over union, with defect
//! as the positive class.

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Exact voxel tally of `pred` against `truth` (both binary, equal dims).
pub fn confusion_counts(pred: &Volume, truth: &Volume) -> Result<Confusion> {
    if pred.dims != truth.dims {
        return Err(Error::Shape(format!(
            "confusion_counts: pred dims {:?} do not match truth dims {:?}",
            pred.dims, truth.dims
        )));
    }
    let p = pred.as_u8()?;
    let t = truth.as_u8()?;
    let mut c = Confusion::default();
    for i in 0..p.len() {
        match (p[i], t[i]) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            (a, b) => {
                return Err(Error::Data(format!(
                    "confusion_counts: non-binary voxel pair ({}, {}) at index {}",
                    a, b, i
                )))
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouReport {
    pub iou_defect: f64,
    pub iou_background: f64,
    pub mean_iou: f64,
}

/// Per-class IOU and their arithmetic mean. A class absent from both pred
/// and truth scores 1 by convention.
pub fn iou_report(c: &Confusion) -> IouReport {
    let class_iou = |inter: u64, fa: u64, fb: u64| {
        let denom = inter + fa + fb;
        if denom == 0 {
            1.0
        } else {
            inter as f64 / denom as f64
        }
    };
    let iou_defect = class_iou(c.tp, c.fp, c.fn_);
    let iou_background = class_iou(c.tn, c.fp, c.fn_);
    IouReport { iou_defect, iou_background, mean_iou: 0.5 * (iou_defect + iou_background) }
}
