//! Evaluation and baseline reports.
//!
//! Per-frame rows carry everything the summary needs (scores and boxes), so
//! a summary can always be recomputed from the CSV alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::run_baseline;
use crate::error::{Error, Result};
use crate::infer::SequencePrediction;
use crate::io::{write_json, write_tensor};
use crate::metrics::{average_precision, dsc, mae, mask_to_bbox, mean_ap, BBox, Detection};
use crate::model::Target;
use crate::synth::Sequence;
use crate::tensor::Tensor;
use crate::train::{csv_error, target_mask};

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const BASELINE_CSV: &str = "baseline.csv";
pub const BASELINE_SUMMARY_JSON: &str = "baseline_summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub sequence: usize,
    pub frame: usize,
    pub dsc: f64,
    pub mae: f64,
    /// Mean probability inside the predicted mask; empty when nothing was
    /// predicted.
    pub score: Option<f64>,
    pub pred_x_min: Option<usize>,
    pub pred_y_min: Option<usize>,
    pub pred_x_max: Option<usize>,
    pub pred_y_max: Option<usize>,
    pub true_x_min: Option<usize>,
    pub true_y_min: Option<usize>,
    pub true_x_max: Option<usize>,
    pub true_y_max: Option<usize>,
}

impl FrameMetrics {
    pub fn predicted_box(&self) -> Option<BBox> {
        BBox::new(self.pred_x_min?, self.pred_y_min?, self.pred_x_max?, self.pred_y_max?)
    }

    pub fn true_box(&self) -> Option<BBox> {
        BBox::new(self.true_x_min?, self.true_y_min?, self.true_x_max?, self.true_y_max?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub mean_dsc: f64,
    pub mean_mae: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
}

impl Summary {
    pub fn from_rows(rows: &[FrameMetrics]) -> Self {
        let n = rows.len().max(1) as f64;
        let truths: Vec<Option<BBox>> = rows.iter().map(FrameMetrics::true_box).collect();
        let detections: Vec<Detection> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                Some(Detection {
                    frame: i,
                    score: r.score?,
                    bbox: r.predicted_box()?,
                })
            })
            .collect();
        Summary {
            frames: rows.len(),
            mean_dsc: rows.iter().map(|r| r.dsc).sum::<f64>() / n,
            mean_mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
            ap50: average_precision(&detections, &truths, 0.5),
            ap75: average_precision(&detections, &truths, 0.75),
            map: mean_ap(&detections, &truths),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target: Target,
    pub summary: Summary,
    /// Echo of whatever configuration produced the predictions.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(skip)]
    pub rows: Vec<FrameMetrics>,
}

/// Metrics of one predicted frame against its truth mask.
pub fn frame_metrics(sequence: usize, frame: usize, prob: &Tensor, mask: &Tensor, truth: &Tensor) -> Result<FrameMetrics> {
    let pred = mask_to_bbox(mask);
    let tb = mask_to_bbox(truth);
    let score = pred.map(|_| {
        let (s, n) = prob
            .data()
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m > 0.5)
            .fold((0.0, 0usize), |(s, n), (&p, _)| (s + p as f64, n + 1));
        s / n as f64
    });
    Ok(FrameMetrics {
        sequence,
        frame,
        dsc: dsc(mask, truth)?,
        mae: mae(prob, truth)?,
        score,
        pred_x_min: pred.map(|b| b.x_min),
        pred_y_min: pred.map(|b| b.y_min),
        pred_x_max: pred.map(|b| b.x_max),
        pred_y_max: pred.map(|b| b.y_max),
        true_x_min: tb.map(|b| b.x_min),
        true_y_min: tb.map(|b| b.y_min),
        true_x_max: tb.map(|b| b.x_max),
        true_y_max: tb.map(|b| b.y_max),
    })
}

pub fn evaluate_predictions(
    predictions: &[SequencePrediction],
    sequences: &[Sequence],
    target: Target,
    config: serde_json::Value,
) -> Result<MetricsReport> {
    if predictions.len() != sequences.len() {
        return Err(Error::contract(format!(
            "{} predicted sequences for {} dataset sequences",
            predictions.len(),
            sequences.len()
        )));
    }
    let mut rows = Vec::new();
    for (k, (p, s)) in predictions.iter().zip(sequences).enumerate() {
        if p.frames.len() != s.frames.len() {
            return Err(Error::contract(format!(
                "sequence {k}: {} predicted frames, {} in the dataset",
                p.frames.len(),
                s.frames.len()
            )));
        }
        for (fp, fs) in p.frames.iter().zip(&s.frames) {
            rows.push(frame_metrics(k, fp.frame, &fp.prob, &fp.mask, target_mask(fs, target))?);
        }
    }
    Ok(MetricsReport {
        target,
        summary: Summary::from_rows(&rows),
        config,
        rows,
    })
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

impl MetricsReport {
    pub fn write(&self, root: &Path) -> Result<()> {
        write_csv(&root.join(METRICS_CSV), &self.rows)?;
        write_json(&root.join(SUMMARY_JSON), self)
    }

    pub fn read_rows(root: &Path) -> Result<Vec<FrameMetrics>> {
        read_csv(&root.join(METRICS_CSV))
    }
}

/// One frame of the clustering baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub sequence: usize,
    pub frame: usize,
    pub applicable: bool,
    pub catheter_present: bool,
    pub dsc: Option<f64>,
    pub mae: Option<f64>,
    pub centroid_x: Option<f64>,
    pub centroid_y: Option<f64>,
    pub var_rms: Option<f64>,
    /// Distance to the centroid of the true catheter mask.
    pub centroid_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub frames: usize,
    pub applicable: usize,
    pub mean_dsc: f64,
    pub mean_mae: f64,
    /// Share of frames with a true catheter whose selected centroid is
    /// within 3 px of it.
    pub within_3px: f64,
}

impl BaselineSummary {
    pub fn from_rows(rows: &[BaselineRow]) -> Self {
        let app: Vec<&BaselineRow> = rows.iter().filter(|r| r.applicable).collect();
        let n = app.len().max(1) as f64;
        let present = rows.iter().filter(|r| r.catheter_present).count();
        let hits = rows
            .iter()
            .filter(|r| r.centroid_error.is_some_and(|e| e <= 3.0))
            .count();
        BaselineSummary {
            frames: rows.len(),
            applicable: app.len(),
            mean_dsc: app.iter().filter_map(|r| r.dsc).sum::<f64>() / n,
            mean_mae: app.iter().filter_map(|r| r.mae).sum::<f64>() / n,
            within_3px: hits as f64 / present.max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineReport {
    pub rows: Vec<BaselineRow>,
    pub summary: BaselineSummary,
    /// Selected-cluster masks (all zero where inapplicable), per sequence.
    pub masks: Vec<Vec<Tensor>>,
}

/// Centroid `[x, y]` of a binary mask's foreground.
pub fn mask_centroid(mask: &Tensor) -> Option<[f64; 2]> {
    let w = mask.shape()[1];
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, &v) in mask.data().iter().enumerate() {
        if v > 0.5 {
            sx += (i % w) as f64;
            sy += (i / w) as f64;
            n += 1;
        }
    }
    (n > 0).then(|| [sx / n as f64, sy / n as f64])
}

/// Runs the clustering baseline on every frame. `aorta_masks` supplies the
/// region of interest per sequence and frame; `None` uses ground truth.
pub fn run_baseline_report(
    sequences: &[Sequence],
    aorta_masks: Option<&[Vec<Tensor>]>,
    level: f64,
    seed: u64,
) -> Result<BaselineReport> {
    let mut rows = Vec::new();
    let mut masks = Vec::with_capacity(sequences.len());
    for (k, s) in sequences.iter().enumerate() {
        let mut seq_masks = Vec::with_capacity(s.frames.len());
        for (t, f) in s.frames.iter().enumerate() {
            let roi = match aorta_masks {
                Some(m) => m
                    .get(k)
                    .and_then(|v| v.get(t))
                    .ok_or_else(|| Error::contract(format!("no aorta mask for sequence {k} frame {t}")))?,
                None => &f.aorta_mask,
            };
            let truth_c = mask_centroid(&f.catheter_mask);
            match run_baseline(&f.image, roi, level, seed) {
                Ok(out) => {
                    let sel = out.selection;
                    let c = sel.centroid;
                    rows.push(BaselineRow {
                        sequence: k,
                        frame: t,
                        applicable: true,
                        catheter_present: truth_c.is_some(),
                        dsc: Some(dsc(&sel.mask, &f.catheter_mask)?),
                        mae: Some(mae(&sel.mask, &f.catheter_mask)?),
                        centroid_x: Some(c[0]),
                        centroid_y: Some(c[1]),
                        var_rms: Some(sel.var_rms),
                        centroid_error: truth_c.map(|tc| ((tc[0] - c[0]).powi(2) + (tc[1] - c[1]).powi(2)).sqrt()),
                    });
                    seq_masks.push(sel.mask);
                }
                Err(Error::BaselineInapplicable(_)) => {
                    rows.push(BaselineRow {
                        sequence: k,
                        frame: t,
                        applicable: false,
                        catheter_present: truth_c.is_some(),
                        dsc: None,
                        mae: None,
                        centroid_x: None,
                        centroid_y: None,
                        var_rms: None,
                        centroid_error: None,
                    });
                    seq_masks.push(Tensor::zeros(f.image.shape().to_vec()));
                }
                Err(e) => return Err(e),
            }
        }
        masks.push(seq_masks);
    }
    Ok(BaselineReport {
        summary: BaselineSummary::from_rows(&rows),
        rows,
        masks,
    })
}

impl BaselineReport {
    pub fn write(&self, root: &Path) -> Result<()> {
        write_csv(&root.join(BASELINE_CSV), &self.rows)?;
        write_json(&root.join(BASELINE_SUMMARY_JSON), &self.summary)?;
        for (k, seq) in self.masks.iter().enumerate() {
            let dir = root.join(crate::infer::sequence_dir(k));
            for (t, m) in seq.iter().enumerate() {
                write_tensor(&dir.join(format!("frame_{t:03}_baseline.tns")), m)?;
            }
        }
        Ok(())
    }

    pub fn read_rows(root: &Path) -> Result<Vec<BaselineRow>> {
        read_csv(&root.join(BASELINE_CSV))
    }
}
