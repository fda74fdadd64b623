//! The edge loop: per frame, decide between local transformation and cloud
//! offload, keep tracks linked to 3D boxes and account latency.
//!
//! Time is simulated. Frame `i` arrives at `i * frame_period_s`; processing
//! starts once the previous frame is done. Test uploads run in the
//! background and their grades are applied at the first frame starting after
//! the result arrives. Anchor frames block the loop for the network wait,
//! during which frames since the failed test are recomputed.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::cloud::{ClientError, CloudClient};
use crate::config::{RunConfig, SequencePaths};
use crate::dataset::{
    self, encode_point_cloud, BandwidthTrace, Calibration, CloudDetections, DatasetError, InstanceFrame, PointCloud,
};
use crate::geometry::Box3D;
use crate::scheduler::{
    anchor_wait, cloud_refs, grade_test, recompute, History, HistoryEntry, LedgerRow, OffloadDecision, OnboardMode,
    RecomputeContext, Scheduler, SchedulerConfig, SchedulerError, TestOutcome,
};
use crate::synth::{frame_file, SyntheticScene};
use crate::tracking::{Tracker, TrackerConfig};
use crate::transform::{transform_frame, Diagnostic, TransformParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("frame {frame}: {source}")]
    Scheduler { frame: u32, source: SchedulerError },
    #[error("frame {frame}: cloud request failed: {source}")]
    Cloud { frame: u32, source: ClientError },
    #[error("frame {frame}: emitted an invalid box {bbox:?}")]
    InvalidBox { frame: u32, bbox: Box3D },
    #[error("invalid pipeline parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone)]
pub struct FrameInput {
    pub cloud: Arc<PointCloud>,
    pub instances: Arc<InstanceFrame>,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub calib: Calibration,
    /// Frames in capture order, with strictly increasing ids.
    pub frames: Vec<FrameInput>,
}

impl Sequence {
    /// Loads every frame listed in the instance records.
    pub fn load(paths: &SequencePaths) -> Result<Self, PipelineError> {
        let calib = dataset::load_calibration(&paths.calib)?;
        let mut frames = Vec::new();
        for record in dataset::load_instance_records(&paths.detections)? {
            let id = record.frame;
            let mut cloud = dataset::load_point_cloud(&paths.velodyne.join(frame_file(id, "bin")))?;
            cloud.frame_id = id;
            let map = dataset::load_instance_map(&paths.masks.join(frame_file(id, "imap")))?;
            let instances = InstanceFrame::new(&record, map)?;
            frames.push(FrameInput { cloud: Arc::new(cloud), instances: Arc::new(instances) });
        }
        frames.sort_by_key(|f| f.cloud.frame_id);
        Ok(Self { calib, frames })
    }
}

impl From<&SyntheticScene> for Sequence {
    fn from(scene: &SyntheticScene) -> Self {
        Self {
            calib: scene.calib.clone(),
            frames: scene
                .frames
                .iter()
                .map(|f| FrameInput { cloud: f.cloud.clone(), instances: f.instances.clone() })
                .collect(),
        }
    }
}

/// Where cloud detections come from.
pub enum CloudBackend {
    /// Precomputed detections delivered after a trace-driven network delay.
    Simulated { trace: BandwidthTrace, store: BTreeMap<u32, CloudDetections> },
    /// A real detector; waits are measured wall time.
    Live { addr: String, timeout: Duration, client: Option<CloudClient> },
}

impl CloudBackend {
    pub fn live(addr: impl Into<String>, timeout: Duration) -> Self {
        Self::Live { addr: addr.into(), timeout, client: None }
    }

    /// Cloud boxes for `cloud` sent at `send_time`, and how long until they
    /// are back on the edge.
    fn request(
        &mut self,
        cloud: &PointCloud,
        send_time: f64,
        cfg: &SchedulerConfig,
    ) -> Result<(Vec<Box3D>, f64), ClientError> {
        let payload = encode_point_cloud(cloud);
        match self {
            Self::Simulated { trace, store } => {
                let boxes = store.get(&cloud.frame_id).map(CloudDetections::boxes3d).unwrap_or_default();
                Ok((boxes, anchor_wait(payload.len(), trace, send_time, cfg)))
            }
            Self::Live { addr, timeout, client } => {
                let started = Instant::now();
                if client.is_none() {
                    *client = Some(CloudClient::connect(addr.as_str(), *timeout)?);
                }
                let result = client.as_mut().expect("connected above").request(cloud.frame_id, &payload, *timeout);
                if result.is_err() {
                    // The stream may hold a late reply; start over next time.
                    *client = None;
                }
                Ok((result?.boxes3d(), started.elapsed().as_secs_f64()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PipelineParams {
    pub scheduler: SchedulerConfig,
    pub tracker: TrackerConfig,
    pub transform: TransformParams,
}

impl From<&RunConfig> for PipelineParams {
    fn from(cfg: &RunConfig) -> Self {
        Self { scheduler: cfg.scheduler, tracker: cfg.tracker, transform: cfg.transform_params() }
    }
}

/// A graded test offload.
#[derive(Debug, Clone, PartialEq)]
pub struct TestRecord {
    pub frame: u32,
    /// Frame whose start consumed the result.
    pub delivered_at: u32,
    pub f1: f64,
    pub outcome: TestOutcome,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    /// Boxes emitted in real time, per frame id.
    pub detections: BTreeMap<u32, Vec<Box3D>>,
    /// Recomputed boxes for frames revised during anchors.
    pub revisions: BTreeMap<u32, Vec<Box3D>>,
    pub ledger: Vec<LedgerRow>,
    pub tests: Vec<TestRecord>,
    pub diagnostics: Vec<Diagnostic>,
}

struct PendingTest {
    frame: u32,
    arrival: f64,
    transformed: Vec<Box3D>,
    cloud: Vec<Box3D>,
}

/// Running mean of cloud box sizes, seeded with the configured prior.
struct SizePrior {
    sum: [f64; 3],
    n: usize,
    default: [f64; 3],
}

impl SizePrior {
    fn add(&mut self, boxes: &[Box3D]) {
        for b in boxes {
            for k in 0..3 {
                self.sum[k] += b.size[k];
            }
            self.n += 1;
        }
    }

    fn get(&self) -> [f64; 3] {
        if self.n == 0 {
            self.default
        } else {
            self.sum.map(|s| s / self.n as f64)
        }
    }
}

fn check_boxes(frame: u32, boxes: &[Box3D]) -> Result<(), PipelineError> {
    match boxes.iter().find(|b| b.validate().is_err()) {
        Some(&bbox) => Err(PipelineError::InvalidBox { frame, bbox }),
        None => Ok(()),
    }
}

pub fn run_pipeline(
    seq: &Sequence,
    params: &PipelineParams,
    backend: &mut CloudBackend,
) -> Result<PipelineOutput, PipelineError> {
    let cfg = params.scheduler;
    cfg.validate().map_err(|e| PipelineError::InvalidParams(e.to_string()))?;
    params.transform.validate().map_err(|e| PipelineError::InvalidParams(e.to_string()))?;
    let mut sched = Scheduler::new(cfg);
    let mut tracker = Tracker::new(params.tracker);
    let mut history = History::new(cfg.history_len());
    let mut sizes = SizePrior { sum: [0.0; 3], n: 0, default: params.transform.estimation.default_size };
    let mut pending: Vec<PendingTest> = Vec::new();
    let mut test_cloud: BTreeMap<u32, Vec<Box3D>> = BTreeMap::new();
    let mut out = PipelineOutput::default();
    let mut last_boxes: Vec<Box3D> = Vec::new();
    let mut clock = 0.0_f64;
    let n = seq.frames.len();

    for (i, input) in seq.frames.iter().enumerate() {
        let frame = input.cloud.frame_id;
        let idx = frame as usize;
        let sched_err = |source| PipelineError::Scheduler { frame, source };
        let start = clock.max(i as f64 * cfg.frame_period_s);
        history.push(HistoryEntry { frame_idx: idx, cloud: input.cloud.clone(), instances: input.instances.clone() });

        pending.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.frame.cmp(&b.frame)));
        let ready = pending.iter().take_while(|p| p.arrival <= start).count();
        for p in pending.drain(..ready) {
            let f1 = grade_test(&p.transformed, &p.cloud, cfg.iou_gate_eval);
            let outcome = sched.on_test_result(p.frame as usize, f1).map_err(sched_err)?;
            log::debug!("test {} graded {f1:.3} at frame {frame}: {outcome:?}", p.frame);
            sizes.add(&p.cloud);
            test_cloud.insert(p.frame, p.cloud);
            out.tests.push(TestRecord { frame: p.frame, delivered_at: frame, f1, outcome });
        }

        let next_arrived = i + 1 < n && (i + 1) as f64 * cfg.frame_period_s <= clock;
        if cfg.drop_late && i > 0 && next_arrived {
            sched.drop_frame(idx).map_err(sched_err)?;
            out.detections.insert(frame, last_boxes.clone());
            continue;
        }

        let decision = sched.decide(idx, start).map_err(sched_err)?;
        match decision {
            OffloadDecision::AnchorOffload => {
                let (boxes, wait) = backend
                    .request(&input.cloud, start, &cfg)
                    .map_err(|source| PipelineError::Cloud { frame, source })?;
                check_boxes(frame, &boxes)?;
                sizes.add(&boxes);
                let recompute_started = Instant::now();
                if let Some(k) = sched.anchor_cause() {
                    let ctx = RecomputeContext {
                        calib: &seq.calib,
                        tracker: params.tracker,
                        transform: &params.transform,
                        avg_size: sizes.get(),
                    };
                    let cloud_k = test_cloud.get(&(k as u32)).cloned().unwrap_or_default();
                    match recompute(&history, k, &cloud_k, idx.saturating_sub(1), &ctx) {
                        Ok(revised) => {
                            sched.mark_revised(revised.keys().copied());
                            for (f, b) in revised {
                                out.revisions.insert(f as u32, b);
                            }
                        }
                        Err(e) => log::warn!("frame {frame}: skipping recomputation: {e}"),
                    }
                }
                tracker.step(&input.instances);
                tracker.relink(
                    &cloud_refs(&boxes, &input.cloud),
                    &seq.calib,
                    input.instances.width,
                    input.instances.height,
                );
                let busy = recompute_started.elapsed().as_secs_f64();
                if matches!(backend, CloudBackend::Simulated { .. }) && busy > wait {
                    log::warn!(
                        "frame {frame}: recomputation took {busy:.4} s, longer than the {wait:.4} s anchor wait"
                    );
                }
                sched.account_frame(idx, decision, 0.0, wait);
                clock = start + wait;
                last_boxes = boxes;
            }
            OffloadDecision::Local | OffloadDecision::TestOffload => {
                let started = Instant::now();
                let step = tracker.step(&input.instances);
                let ft = transform_frame(
                    &input.cloud,
                    &input.instances,
                    &seq.calib,
                    &step.refs,
                    sizes.get(),
                    &params.transform,
                );
                tracker.link(&ft.boxes);
                let measured = started.elapsed().as_secs_f64();
                let boxes: Vec<Box3D> = ft.boxes.iter().map(|e| e.bbox).collect();
                check_boxes(frame, &boxes)?;
                out.diagnostics.extend(ft.diagnostics);
                if decision == OffloadDecision::TestOffload {
                    match backend.request(&input.cloud, start, &cfg) {
                        Ok((cloud, delay)) => pending.push(PendingTest {
                            frame,
                            arrival: start + delay,
                            transformed: boxes.clone(),
                            cloud,
                        }),
                        Err(e) => log::warn!("frame {frame}: test offload failed: {e}"),
                    }
                }
                let onboard = match cfg.onboard_mode {
                    OnboardMode::Fixed => cfg.onboard_s,
                    OnboardMode::Measured => measured,
                };
                sched.account_frame(idx, decision, onboard, 0.0);
                clock = start + onboard;
                last_boxes = boxes;
            }
            OffloadDecision::Dropped => unreachable!("decide never drops"),
        }
        out.detections.insert(frame, last_boxes.clone());
    }
    out.ledger = sched.ledger().to_vec();
    Ok(out)
}

/// Builds the backend named by the config: a trace plus the cloud store, or
/// a live server.
pub fn backend_from_config(cfg: &RunConfig) -> Result<CloudBackend, PipelineError> {
    match (&cfg.trace, &cfg.server) {
        (Some(trace), None) => Ok(CloudBackend::Simulated {
            trace: dataset::load_bandwidth_trace(trace)?,
            store: dataset::load_cloud_store(&cfg.paths.cloud_store)?,
        }),
        (None, Some(addr)) => Ok(CloudBackend::live(addr.clone(), Duration::from_secs_f64(cfg.server_timeout_s))),
        _ => Err(PipelineError::InvalidParams("exactly one of trace or server must be set".into())),
    }
}

/// Ground truth for every frame of the sequence, as labelled on disk.
pub fn load_labels_for(seq: &Sequence, labels_dir: &Path) -> Result<BTreeMap<u32, Vec<Box3D>>, PipelineError> {
    let mut labels = BTreeMap::new();
    for f in &seq.frames {
        let id = f.cloud.frame_id;
        let path = labels_dir.join(frame_file(id, "txt"));
        let boxes = dataset::load_labels(&path, &seq.calib)?.into_iter().map(|l| l.bbox).collect();
        labels.insert(id, boxes);
    }
    Ok(labels)
}

/// Every `NNNNNN.txt` label file in `dir`, keyed by frame id.
pub fn load_label_dir(dir: &Path, calib: &Calibration) -> Result<BTreeMap<u32, Vec<Box3D>>, PipelineError> {
    let io = |source| DatasetError::Io { path: dir.to_owned(), source };
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let Some(frame) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let boxes = dataset::load_labels(&path, calib)?.into_iter().map(|l| l.bbox).collect();
        out.insert(frame, boxes);
    }
    Ok(out)
}
