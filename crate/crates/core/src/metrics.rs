//! Segmentation and temporal-consistency metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::BinaryMask;
use crate::error::{Error, Result};
use crate::numerics::{distance_transform, Tensor};

/// Masks of consecutive frames, all of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    masks: Vec<BinaryMask>,
}

impl MaskSequence {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Err(Error::invalid("mask sequence is empty"));
        };
        if masks.iter().any(|m| !m.same_shape(first)) {
            return Err(Error::invalid("mask sequence has frames of different sizes"));
        }
        Ok(Self { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }
}

fn check_same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )))
    }
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean IoU over the frames of two sequences.
pub fn mean_iou(pred: &MaskSequence, gt: &MaskSequence) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len())));
    }
    let mut total = 0.0;
    for (p, g) in pred.masks().iter().zip(gt.masks()) {
        total += iou(p, g)?;
    }
    Ok(total / pred.len() as f64)
}

/// Video consistency over sliding windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VcScore {
    /// Mean over scored windows; `None` when every window was skipped.
    pub value: Option<f64>,
    pub scored: usize,
    /// Windows whose ground-truth common area is empty.
    pub skipped: usize,
}

/// For every window of `window` consecutive frames: the fraction of the
/// ground-truth common area (pixels foreground in every ground-truth frame)
/// that is also foreground in every predicted frame.
pub fn video_consistency(pred: &MaskSequence, gt: &MaskSequence, window: usize) -> Result<VcScore> {
    if window < 2 {
        return Err(Error::invalid(format!("window must be at least 2, got {window}")));
    }
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len())));
    }
    check_same_shape(&pred.masks()[0], &gt.masks()[0])?;
    if gt.len() < window {
        return Err(Error::InsufficientFrames {
            window,
            frames: gt.len(),
        });
    }
    let n = gt.masks()[0].len();
    let (mut sum, mut scored, mut skipped) = (0.0, 0usize, 0usize);
    for start in 0..=gt.len() - window {
        let (mut common, mut agreed) = (0usize, 0usize);
        for p in 0..n {
            let in_gt = (start..start + window).all(|t| gt.masks()[t].get(p));
            if in_gt {
                common += 1;
                agreed += (start..start + window).all(|t| pred.masks()[t].get(p)) as usize;
            }
        }
        if common == 0 {
            skipped += 1;
        } else {
            scored += 1;
            sum += agreed as f64 / common as f64;
        }
    }
    Ok(VcScore {
        value: (scored > 0).then(|| sum / scored as f64),
        scored,
        skipped,
    })
}

/// Foreground pixels with at least one 4-neighbour outside the mask (the
/// image border counts as outside).
pub fn boundary(mask: &BinaryMask) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let v = mask.values();
    (0..h * w)
        .map(|p| {
            if !v[p] {
                return false;
            }
            let (y, x) = (p / w, p % w);
            y == 0 || x == 0 || y + 1 == h || x + 1 == w || !v[p - w] || !v[p + w] || !v[p - 1] || !v[p + 1]
        })
        .collect()
}

/// Default boundary tolerance: 1% of the image diagonal, at least one pixel.
pub fn default_boundary_tolerance(height: usize, width: usize) -> f64 {
    let diag = ((height * height + width * width) as f64).sqrt();
    (0.01 * diag).ceil().max(1.0)
}

/// Contour F-measure: precision and recall are the fractions of predicted
/// and ground-truth boundary pixels lying within `tolerance` (Euclidean, in
/// pixels) of the other mask's boundary.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tolerance: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let bp = boundary(pred);
    let bg = boundary(gt);
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let within = |from: &[bool], to: &[bool]| -> Result<usize> {
        let dt = distance_transform(to, h, w)?;
        Ok(from
            .iter()
            .zip(dt.data())
            .filter(|&(&b, &d)| b && d <= tolerance)
            .count())
    };
    let precision = within(&bp, &bg)? as f64 / np as f64;
    let recall = within(&bg, &bp)? as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Best single-shot IoU minus the K-shot IoU.
pub fn kshot_stability(iou_k: f64, iou_one_shot: &[f64]) -> Result<f64> {
    let best = iou_one_shot
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    match best {
        Some(b) => Ok(b - iou_k),
        None => Err(Error::invalid("k-shot stability needs at least one single-shot IoU")),
    }
}

/// Nearest-neighbour resampling of a mask.
pub fn resize_nearest(mask: &BinaryMask, height: usize, width: usize) -> Result<BinaryMask> {
    let (sh, sw) = (mask.height(), mask.width());
    let values = (0..height * width)
        .map(|p| {
            let (y, x) = (p / width, p % width);
            mask.get((y * sh / height) * sw + x * sw / width)
        })
        .collect();
    BinaryMask::new(height, width, values)
}

/// Per-pixel mean of masks resampled to `height x width`.
pub fn center_bias_map(masks: &[BinaryMask], height: usize, width: usize) -> Result<Tensor> {
    if masks.is_empty() {
        return Err(Error::invalid("center-bias map needs at least one mask"));
    }
    let mut acc = vec![0.0; height * width];
    for m in masks {
        let r = resize_nearest(m, height, width)?;
        for (a, &v) in acc.iter_mut().zip(r.values()) {
            if v {
                *a += 1.0;
            }
        }
    }
    let n = masks.len() as f64;
    Tensor::new(vec![height, width], acc.into_iter().map(|a| a / n).collect())
}

/// Metrics of one predicted sequence against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    /// Video consistency per window; `None` when the window could not be
    /// scored (too few frames, or every common area empty).
    pub vc: BTreeMap<usize, Option<f64>>,
    pub boundary_f: f64,
    pub skipped_windows: BTreeMap<usize, usize>,
}

pub fn evaluate_sequence(pred: &MaskSequence, gt: &MaskSequence, windows: &[usize]) -> Result<MetricReport> {
    let miou = mean_iou(pred, gt)?;
    let first = &gt.masks()[0];
    let tol = default_boundary_tolerance(first.height(), first.width());
    let mut bf = 0.0;
    for (p, g) in pred.masks().iter().zip(gt.masks()) {
        bf += boundary_f(p, g, tol)?;
    }
    let mut vc = BTreeMap::new();
    let mut skipped_windows = BTreeMap::new();
    for &w in windows {
        match video_consistency(pred, gt, w) {
            Ok(score) => {
                vc.insert(w, score.value);
                skipped_windows.insert(w, score.skipped);
            }
            Err(Error::InsufficientFrames { .. }) => {
                vc.insert(w, None);
                skipped_windows.insert(w, 0);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MetricReport {
        miou,
        vc,
        boundary_f: bf / pred.len() as f64,
        skipped_windows,
    })
}
