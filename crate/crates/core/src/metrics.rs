//! Segmentation and detection metrics.
//!
//! Detection AP follows the COCO conventions: greedy one-to-one matching in
//! descending score order, 101-point interpolated precision, and IOU
//! thresholds 0.50:0.05:0.95 for mAP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check_shapes<T: Real>(a: &Tensor<T>, b: &Tensor<T>, name: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{name}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Dice similarity `2|A ∩ B| / (|A| + |B|)` of two masks (values > 0.5
/// count as foreground). Two empty masks score 1.
pub fn dsc<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_shapes(a, b, "dsc")?;
    let half = T::lit(0.5);
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > half, y > half);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mean absolute per-pixel difference between a probability map and a
/// binary truth.
pub fn mae<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    check_shapes(pred, truth, "mae")?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| (p - t).abs().as_f64())
        .sum();
    Ok(s / pred.len() as f64)
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Option<Self> {
        (x_min <= x_max && y_min <= y_max).then_some(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }
}

/// Tight box over the foreground (> 0.5) of an `[H, W]` mask.
pub fn mask_to_bbox<T: Real>(mask: &Tensor<T>) -> Option<BBox> {
    let w = *mask.shape().last()?;
    let half = T::lit(0.5);
    let mut b: Option<BBox> = None;
    for (i, _) in mask.data().iter().enumerate().filter(|(_, &v)| v > half) {
        let (x, y) = (i % w, i / w);
        b = Some(match b {
            None => BBox { x_min: x, y_min: y, x_max: x, y_max: y },
            Some(b) => BBox {
                x_min: b.x_min.min(x),
                y_min: b.y_min.min(y),
                x_max: b.x_max.max(x),
                y_max: b.y_max.max(y),
            },
        });
    }
    b
}

/// Pixel-count intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = a.x_min.max(b.x_min);
    let y0 = a.y_min.max(b.y_min);
    let x1 = a.x_max.min(b.x_max);
    let y1 = a.y_max.min(b.y_max);
    if x0 > x1 || y0 > y1 {
        return 0.0;
    }
    let inter = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    inter / ((a.area() + b.area()) as f64 - inter)
}

/// A scored box predicted for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Ranked detections with their match outcome at one IOU threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionRecallCurve {
    /// `(score, is_true_positive)` in non-increasing score order.
    pub ranked: Vec<(f64, bool)>,
    pub ground_truths: usize,
    pub iou_threshold: f64,
}

impl PrecisionRecallCurve {
    /// Greedy matching: detections are visited by descending score (ties by
    /// input order); each claims its frame's unmatched truth if
    /// IOU >= threshold.
    pub fn build(detections: &[Detection], truths: &[Option<BBox>], iou_threshold: f64) -> Self {
        let mut order: Vec<usize> = (0..detections.len()).collect();
        order.sort_by(|&a, &b| {
            detections[b]
                .score
                .partial_cmp(&detections[a].score)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut matched = vec![false; truths.len()];
        let ranked = order
            .into_iter()
            .map(|i| {
                let d = &detections[i];
                let tp = match truths.get(d.frame).copied().flatten() {
                    Some(t) if !matched[d.frame] && iou(&d.bbox, &t) >= iou_threshold => {
                        matched[d.frame] = true;
                        true
                    }
                    _ => false,
                };
                (d.score, tp)
            })
            .collect();
        PrecisionRecallCurve {
            ranked,
            ground_truths: truths.iter().filter(|t| t.is_some()).count(),
            iou_threshold,
        }
    }

    /// `(precision, recall)` after each ranked detection.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut tp = 0usize;
        let gt = self.ground_truths.max(1) as f64;
        self.ranked
            .iter()
            .enumerate()
            .map(|(k, &(_, hit))| {
                tp += hit as usize;
                (tp as f64 / (k + 1) as f64, tp as f64 / gt)
            })
            .collect()
    }

    /// 101-point interpolated average precision.
    pub fn average_precision(&self) -> f64 {
        if self.ground_truths == 0 || self.ranked.is_empty() {
            return 0.0;
        }
        interpolated_ap(&self.points())
    }
}

/// Mean over recall levels `r = 0, 0.01, ..., 1` of the best precision
/// achieved at recall >= r (zero when unreachable).
pub fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = points
            .iter()
            .filter(|&&(_, rec)| rec >= r - 1e-12)
            .map(|&(p, _)| p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

pub fn average_precision(detections: &[Detection], truths: &[Option<BBox>], iou_threshold: f64) -> f64 {
    PrecisionRecallCurve::build(detections, truths, iou_threshold).average_precision()
}

/// IOU thresholds 0.50, 0.55, ..., 0.95.
pub fn map_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub fn mean_ap(detections: &[Detection], truths: &[Option<BBox>]) -> f64 {
    map_thresholds()
        .iter()
        .map(|&t| average_precision(detections, truths, t))
        .sum::<f64>()
        / 10.0
}
