//! Detection scoring: greedy IoU matching, precision/recall/F1 and latency
//! summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_3d, Box3D};
use crate::scheduler::LedgerRow;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("frame {0} has detections but no labels")]
    MissingLabels(u32),
    #[error("frame {0} has labels but no detections")]
    MissingDetections(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// (detection index, ground-truth index, IoU), in acceptance order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 from counts; a frame with nothing to find and nothing found scores 1.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl FrameMatch {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_from_counts(self.tp, self.fp, self.fn_)
    }

    pub fn iou_sum(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// Greedy one-to-one matching: candidate pairs at or above `threshold` are
/// taken by descending IoU, ties broken by lower detection then lower
/// ground-truth index.
pub fn match_frame(dets: &[Box3D], gts: &[Box3D], threshold: f64) -> FrameMatch {
    let mut cands = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = iou_3d(d, g);
            if iou >= threshold && iou > 0.0 {
                cands.push((i, j, iou));
            }
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (i, j, iou) in cands {
        if !det_used[i] && !gt_used[j] {
            det_used[i] = true;
            gt_used[j] = true;
            pairs.push((i, j, iou));
        }
    }
    let tp = pairs.len();
    FrameMatch { pairs, tp, fp: dets.len() - tp, fn_: gts.len() - tp }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean IoU over true positives; 0 when there are none.
    pub mean_iou: f64,
}

impl Counts {
    fn new(tp: usize, fp: usize, fn_: usize, iou_sum: f64) -> Self {
        Self {
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: f1_from_counts(tp, fp, fn_),
            mean_iou: if tp == 0 { 0.0 } else { iou_sum / tp as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: u32,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub frames: usize,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p99_s: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl LatencySummary {
    /// Summary over `total_s` of processed (non-dropped) rows.
    pub fn from_ledger(rows: &[LedgerRow]) -> Option<Self> {
        let mut t: Vec<f64> = rows
            .iter()
            .filter(|r| r.decision != crate::scheduler::OffloadDecision::Dropped)
            .map(|r| r.total_s)
            .collect();
        if t.is_empty() {
            return None;
        }
        t.sort_by(f64::total_cmp);
        Some(Self {
            frames: t.len(),
            mean_s: t.iter().sum::<f64>() / t.len() as f64,
            p50_s: percentile(&t, 50.0),
            p99_s: percentile(&t, 99.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    /// Micro-averaged over all frames.
    pub aggregate: Counts,
    pub frames: Vec<FrameEval>,
    pub latency: Option<LatencySummary>,
}

/// Scores detections against labels frame by frame. Both maps must cover the
/// same frames.
pub fn evaluate(
    dets: &BTreeMap<u32, Vec<Box3D>>,
    labels: &BTreeMap<u32, Vec<Box3D>>,
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    if let Some(&f) = dets.keys().find(|f| !labels.contains_key(f)) {
        return Err(EvalError::MissingLabels(f));
    }
    if let Some(&f) = labels.keys().find(|f| !dets.contains_key(f)) {
        return Err(EvalError::MissingDetections(f));
    }
    let (mut tp, mut fp, mut fn_, mut iou_sum) = (0, 0, 0, 0.0);
    let mut frames = Vec::with_capacity(dets.len());
    for (&frame, d) in dets {
        let m = match_frame(d, &labels[&frame], iou_threshold);
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
        iou_sum += m.iou_sum();
        frames.push(FrameEval { frame, counts: Counts::new(m.tp, m.fp, m.fn_, m.iou_sum()) });
    }
    Ok(EvalReport { iou_threshold, aggregate: Counts::new(tp, fp, fn_, iou_sum), frames, latency: None })
}
