//! Offloading schedule: periodic test frames graded against the cloud, anchor
//! frames when a test fails, the latency ledger and recomputation of frames
//! processed against a stale reference.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BandwidthTrace, Calibration, InstanceFrame, PointCloud};
use crate::eval::match_frame;
use crate::geometry::{points_in_box, Box3D};
use crate::tracking::{Tracker, TrackerConfig};
use crate::transform::{centroid, transform_frame, TransformParams};

/// Modeled latency of returning a box list from the cloud, seconds.
pub const RESPONSE_LATENCY_S: f64 = 0.001;

/// On-board per-frame processing time used when not measuring, seconds.
pub const DEFAULT_ONBOARD_S: f64 = 0.07629;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("no pending test for frame {0}")]
    UnknownTestFrame(usize),
    #[error("history no longer holds frame {0}")]
    MissingHistory(usize),
    #[error("frame {got} does not follow frame {last}")]
    OutOfOrder { last: usize, got: usize },
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnboardMode {
    /// Every locally processed frame costs `onboard_s`.
    Fixed,
    /// Wall-clock time of the local processing.
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Frames between test offloads.
    pub n_t: usize,
    /// F1 below this triggers an anchor.
    pub q_t: f64,
    /// IoU needed for a transformed box to count against a cloud box.
    pub iou_gate_eval: f64,
    pub cloud_inference_s: f64,
    /// Frames kept for recomputation; 0 means `2 * n_t`.
    pub history_capacity: usize,
    pub onboard_mode: OnboardMode,
    pub onboard_s: f64,
    /// Sensor frame interval, seconds.
    pub frame_period_s: f64,
    /// Skip frames that arrived while an anchor was blocking.
    pub drop_late: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            n_t: 4,
            q_t: 0.7,
            iou_gate_eval: 0.4,
            cloud_inference_s: 0.04,
            history_capacity: 0,
            onboard_mode: OnboardMode::Fixed,
            onboard_s: DEFAULT_ONBOARD_S,
            frame_period_s: 0.1,
            drop_late: false,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        let ok = self.n_t >= 1
            && self.q_t > 0.0
            && self.q_t <= 1.0
            && (0.0..=1.0).contains(&self.iou_gate_eval)
            && self.cloud_inference_s >= 0.0
            && self.onboard_s >= 0.0
            && self.frame_period_s > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SchedulerError::InvalidConfig(format!("{self:?}")))
        }
    }

    pub fn history_len(&self) -> usize {
        if self.history_capacity == 0 {
            2 * self.n_t
        } else {
            self.history_capacity
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OffloadDecision {
    Local,
    TestOffload,
    AnchorOffload,
    /// Skipped because it arrived while an anchor was blocking.
    Dropped,
}

impl fmt::Display for OffloadDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Local => "local",
            Self::TestOffload => "test",
            Self::AnchorOffload => "anchor",
            Self::Dropped => "dropped",
        })
    }
}

/// Seconds needed to push `bytes` through `trace` starting at `t0`.
pub fn transmission_time(bytes: usize, trace: &BandwidthTrace, t0: f64) -> f64 {
    let mut remaining = bytes as f64 * 8.0;
    if remaining == 0.0 {
        return 0.0;
    }
    let period = trace.period();
    let segments: Vec<(f64, f64, f64)> = trace.segments().collect();
    let mut tc = t0.rem_euclid(period);
    let mut elapsed = 0.0;
    loop {
        if tc >= period {
            tc = 0.0;
        }
        let &(_, end, mbps) = segments.iter().find(|s| tc < s.1).expect("tc lies within one cycle");
        let rate = mbps * 1e6;
        let span = end - tc;
        let capacity = rate * span;
        if capacity >= remaining {
            return elapsed + remaining / rate;
        }
        remaining -= capacity;
        elapsed += span;
        tc = end;
    }
}

/// Network wait of an anchor frame: upload, cloud inference and response.
pub fn anchor_wait(bytes: usize, trace: &BandwidthTrace, t0: f64, cfg: &SchedulerConfig) -> f64 {
    transmission_time(bytes, trace, t0) + cfg.cloud_inference_s + RESPONSE_LATENCY_S
}

/// F1 of transformed boxes against the cloud's, the same scoring the
/// evaluator applies per frame.
pub fn grade_test(transformed: &[Box3D], cloud: &[Box3D], iou_gate_eval: f64) -> f64 {
    match_frame(transformed, cloud, iou_gate_eval).f1()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub frame: usize,
    pub decision: OffloadDecision,
    pub onboard_s: f64,
    pub wait_s: f64,
    pub total_s: f64,
    pub f1_test: Option<f64>,
    /// Output of this frame was later recomputed against a cloud result.
    pub revised: bool,
}

pub const LEDGER_HEADER: &str = "frame,decision,onboard_s,wait_s,total_s,f1_test,revised";

impl LedgerRow {
    pub fn to_csv(&self) -> String {
        let f1 = self.f1_test.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.frame, self.decision, self.onboard_s, self.wait_s, self.total_s, f1, self.revised as u8
        )
    }
}

pub fn ledger_csv(rows: &[LedgerRow]) -> String {
    let mut s = String::from(LEDGER_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// What a test result did to the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestOutcome {
    Passed,
    /// Latched an anchor for the next frame.
    Triggered,
    /// Failed, but an anchor is already latched or has happened since the test.
    Absorbed,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    pub config: SchedulerConfig,
    last_frame: Option<usize>,
    last_anchor: Option<usize>,
    last_test: usize,
    /// Test frame whose failure latched the pending anchor.
    trigger: Option<usize>,
    /// Test frame that caused the most recent anchor.
    anchor_cause: Option<usize>,
    pending_tests: BTreeMap<usize, f64>,
    ledger: Vec<LedgerRow>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Self {
            config,
            last_frame: None,
            last_anchor: None,
            last_test: 0,
            trigger: None,
            anchor_cause: None,
            pending_tests: BTreeMap::new(),
            ledger: Vec::new(),
        }
    }

    pub fn anchor_pending(&self) -> bool {
        self.trigger.is_some()
    }

    /// Test frame whose failed grade caused the most recent anchor; `None`
    /// for the bootstrap anchor.
    pub fn anchor_cause(&self) -> Option<usize> {
        self.anchor_cause
    }

    pub fn pending_tests(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pending_tests.iter().map(|(&k, &v)| (k, v))
    }

    pub fn ledger(&self) -> &[LedgerRow] {
        &self.ledger
    }

    fn advance(&mut self, frame_idx: usize) -> Result<(), SchedulerError> {
        if let Some(last) = self.last_frame {
            if frame_idx <= last {
                return Err(SchedulerError::OutOfOrder { last, got: frame_idx });
            }
        }
        self.last_frame = Some(frame_idx);
        Ok(())
    }

    /// Chooses how `frame_idx` is processed and updates the schedule.
    /// `send_time` is when a test upload would start.
    pub fn decide(&mut self, frame_idx: usize, send_time: f64) -> Result<OffloadDecision, SchedulerError> {
        self.advance(frame_idx)?;
        if self.last_anchor.is_none() || self.trigger.is_some() {
            self.last_anchor = Some(frame_idx);
            self.last_test = frame_idx;
            self.anchor_cause = self.trigger.take();
            return Ok(OffloadDecision::AnchorOffload);
        }
        if frame_idx - self.last_test >= self.config.n_t {
            self.last_test = frame_idx;
            self.pending_tests.insert(frame_idx, send_time);
            return Ok(OffloadDecision::TestOffload);
        }
        Ok(OffloadDecision::Local)
    }

    /// Records a frame that was skipped without processing.
    pub fn drop_frame(&mut self, frame_idx: usize) -> Result<LedgerRow, SchedulerError> {
        self.advance(frame_idx)?;
        Ok(self.push_row(frame_idx, OffloadDecision::Dropped, 0.0, 0.0))
    }

    pub fn on_test_result(&mut self, frame_idx: usize, f1: f64) -> Result<TestOutcome, SchedulerError> {
        if self.pending_tests.remove(&frame_idx).is_none() {
            return Err(SchedulerError::UnknownTestFrame(frame_idx));
        }
        if let Some(row) = self.ledger.iter_mut().find(|r| r.frame == frame_idx) {
            row.f1_test = Some(f1);
        }
        if f1 >= self.config.q_t {
            return Ok(TestOutcome::Passed);
        }
        let stale = self.last_anchor.is_some_and(|a| a > frame_idx);
        if stale || self.trigger.is_some() {
            return Ok(TestOutcome::Absorbed);
        }
        self.trigger = Some(frame_idx);
        Ok(TestOutcome::Triggered)
    }

    fn push_row(&mut self, frame: usize, decision: OffloadDecision, onboard_s: f64, wait_s: f64) -> LedgerRow {
        let row = LedgerRow {
            frame,
            decision,
            onboard_s,
            wait_s,
            total_s: onboard_s + wait_s,
            f1_test: None,
            revised: false,
        };
        self.ledger.push(row.clone());
        row
    }

    /// Adds the latency row for a processed frame. Anchor frames wait on the
    /// network for `wait_s`; the rest cost their on-board time only, since
    /// test uploads run alongside local processing.
    pub fn account_frame(
        &mut self,
        frame_idx: usize,
        decision: OffloadDecision,
        onboard_s: f64,
        wait_s: f64,
    ) -> LedgerRow {
        match decision {
            OffloadDecision::AnchorOffload => self.push_row(frame_idx, decision, 0.0, wait_s),
            OffloadDecision::Dropped => self.push_row(frame_idx, decision, 0.0, 0.0),
            _ => self.push_row(frame_idx, decision, onboard_s, 0.0),
        }
    }

    pub fn mark_revised(&mut self, frames: impl IntoIterator<Item = usize>) {
        for f in frames {
            if let Some(row) = self.ledger.iter_mut().find(|r| r.frame == f) {
                row.revised = true;
            }
        }
    }
}

/// Inputs of one processed frame, kept for recomputation.
#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub frame_idx: usize,
    pub cloud: Arc<PointCloud>,
    pub instances: Arc<InstanceFrame>,
}

#[derive(Debug, Clone)]
pub struct History {
    capacity: usize,
    entries: VecDeque<HistoryEntry>,
}

impl History {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), entries: VecDeque::new() }
    }

    pub fn push(&mut self, entry: HistoryEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn get(&self, frame_idx: usize) -> Option<&HistoryEntry> {
        self.entries.iter().find(|e| e.frame_idx == frame_idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Cloud boxes paired with the centroid of the frame points they contain.
pub fn cloud_refs(boxes: &[Box3D], pc: &PointCloud) -> Vec<(Box3D, Option<[f64; 3]>)> {
    let pts = pc.xyz();
    boxes
        .iter()
        .map(|b| {
            let (_, mask) = points_in_box(&pts, b);
            let inside: Vec<[f64; 3]> = pts.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            (*b, centroid(&inside))
        })
        .collect()
}

/// Shared context for re-running the local transformation.
#[derive(Debug, Clone, Copy)]
pub struct RecomputeContext<'a> {
    pub calib: &'a Calibration,
    pub tracker: TrackerConfig,
    pub transform: &'a TransformParams,
    pub avg_size: [f64; 3],
}

/// Re-derives frames `(test_idx, current]` with a fresh tracker seeded by the
/// cloud result of `test_idx`. Live state is untouched.
pub fn recompute(
    history: &History,
    test_idx: usize,
    cloud: &[Box3D],
    current: usize,
    ctx: &RecomputeContext<'_>,
) -> Result<BTreeMap<usize, Vec<Box3D>>, SchedulerError> {
    let mut out = BTreeMap::new();
    if current <= test_idx {
        return Ok(out);
    }
    let frames: Vec<&HistoryEntry> = (test_idx..=current)
        .map(|f| history.get(f).ok_or(SchedulerError::MissingHistory(f)))
        .collect::<Result<_, _>>()?;
    let base = frames[0];
    let mut tracker = Tracker::new(ctx.tracker);
    tracker.step(&base.instances);
    tracker.relink(&cloud_refs(cloud, &base.cloud), ctx.calib, base.instances.width, base.instances.height);
    for e in &frames[1..] {
        let step = tracker.step(&e.instances);
        let ft = transform_frame(&e.cloud, &e.instances, ctx.calib, &step.refs, ctx.avg_size, ctx.transform);
        tracker.link(&ft.boxes);
        out.insert(e.frame_idx, ft.boxes.iter().map(|b| b.bbox).collect());
    }
    Ok(out)
}
