//! Frame-to-frame association of 2D instances and the 3D boxes linked to them.

mod hungarian;
mod kalman;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use hungarian::solve as hungarian_solve;
pub use kalman::{
    box_to_measurement, kf_init, kf_predict, kf_update, state_to_box, KalmanConfig, StateCov, StateVec, TrackState,
};

use crate::dataset::{Calibration, InstanceFrame};
use crate::geometry::{iou_2d, project_box3d_to_2d, Box2D, Box3D};
use crate::transform::{InstanceEstimate, TrackRef};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssociationResult {
    /// (track index, detection index) pairs into the inputs of [`associate`].
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Gated IoU cost: pairs below the gate cost as much as leaving both unmatched.
fn gated_cost(iou: f64, gate: f64) -> f64 {
    if iou >= gate {
        1.0 - iou
    } else {
        1.0
    }
}

/// Optimal one-to-one matching of predicted boxes to detections maximizing
/// total IoU over pairs that pass `iou_gate`.
pub fn associate(predicted: &[Box2D], detections: &[Box2D], iou_gate: f64) -> AssociationResult {
    let n = predicted.len().max(detections.len());
    let mut iou = vec![vec![0.0; detections.len()]; predicted.len()];
    let mut cost = vec![vec![1.0; n]; n];
    for (i, p) in predicted.iter().enumerate() {
        for (j, d) in detections.iter().enumerate() {
            iou[i][j] = iou_2d(p, d);
            cost[i][j] = gated_cost(iou[i][j], iou_gate);
        }
    }
    let assign = hungarian::solve(&cost);
    let mut res = AssociationResult::default();
    let mut det_used = vec![false; detections.len()];
    for (i, &j) in assign.iter().enumerate().take(predicted.len()) {
        if j < detections.len() && iou[i][j] >= iou_gate {
            res.matches.push((i, j));
            det_used[j] = true;
        } else {
            res.unmatched_tracks.push(i);
        }
    }
    res.unmatched_detections = (0..detections.len()).filter(|&j| !det_used[j]).collect();
    res
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub iou_gate: f64,
    /// Tracks unmatched for more than this many frames are dropped.
    pub max_age: u32,
    /// Matches a track needs before its 3D box is handed out.
    pub min_hits: u32,
    pub kalman: KalmanConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { iou_gate: 0.3, max_age: 3, min_hits: 1, kalman: KalmanConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    /// Previous 3D boxes for instances matched to linked tracks.
    pub refs: BTreeMap<u16, TrackRef>,
    /// Track id per instance of the frame.
    pub instance_tracks: BTreeMap<u16, u64>,
}

#[derive(Debug, Clone, Default)]
pub struct Tracker {
    pub config: TrackerConfig,
    tracks: Vec<TrackState>,
    next_id: u64,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self { config, tracks: Vec::new(), next_id: 0 }
    }

    pub fn tracks(&self) -> &[TrackState] {
        &self.tracks
    }

    fn spawn(&mut self, b: &Box2D) -> &mut TrackState {
        let t = kf_init(self.next_id, b, &self.config.kalman);
        self.next_id += 1;
        self.tracks.push(t);
        self.tracks.last_mut().expect("just pushed")
    }

    /// Predicts every track, matches them to the frame's instances and
    /// returns the previous 3D box of each matched, linked instance.
    pub fn step(&mut self, frame: &InstanceFrame) -> StepOutput {
        let cfg = self.config;
        let mut predicted = Vec::with_capacity(self.tracks.len());
        for t in &mut self.tracks {
            let (next, b) = kf_predict(t, &cfg.kalman);
            *t = next;
            t.instance_id = None;
            predicted.push(b);
        }
        let mut dets: Vec<(u16, Box2D)> = frame.boxes.iter().map(|b| (b.id, b.bbox)).collect();
        dets.sort_by_key(|d| d.0);
        let det_boxes: Vec<Box2D> = dets.iter().map(|d| d.1).collect();
        let assoc = associate(&predicted, &det_boxes, cfg.iou_gate);

        let mut out = StepOutput::default();
        for &(ti, di) in &assoc.matches {
            let (id, b) = dets[di];
            let t = &mut self.tracks[ti];
            *t = kf_update(t, &b, &cfg.kalman);
            t.instance_id = Some(id);
            out.instance_tracks.insert(id, t.track_id);
            if let Some(bbox) = t.linked_box3d {
                if t.hits >= cfg.min_hits {
                    out.refs.insert(id, TrackRef { bbox, centroid: t.prev_cluster_centroid });
                }
            }
        }
        self.tracks.retain(|t| t.age <= cfg.max_age);
        for &di in &assoc.unmatched_detections {
            let (id, b) = dets[di];
            let t = self.spawn(&b);
            t.instance_id = Some(id);
            let tid = t.track_id;
            out.instance_tracks.insert(id, tid);
        }
        out
    }

    /// Stores this frame's estimated boxes on the tracks matched to their instances.
    pub fn link(&mut self, estimates: &[InstanceEstimate]) {
        let by_instance: BTreeMap<u16, &InstanceEstimate> = estimates.iter().map(|e| (e.instance_id, e)).collect();
        for t in &mut self.tracks {
            if let Some(e) = t.instance_id.and_then(|id| by_instance.get(&id)) {
                t.linked_box3d = Some(e.bbox);
                t.prev_cluster_centroid = Some(e.centroid);
            }
        }
    }

    /// Re-links tracks to cloud boxes for the frame last passed to
    /// [`Tracker::step`]. Boxes are matched through their image projections;
    /// unmatched boxes start tracks of their own.
    pub fn relink(&mut self, cloud: &[(Box3D, Option<[f64; 3]>)], calib: &Calibration, width: u32, height: u32) {
        let projected: Vec<(usize, Box2D)> = cloud
            .iter()
            .enumerate()
            .filter_map(|(i, (b, _))| project_box3d_to_2d(b, calib, width, height).map(|p| (i, p)))
            .filter(|(_, p)| p.width() > 0.0 && p.height() > 0.0)
            .collect();
        let track_boxes: Vec<Box2D> = self.tracks.iter().map(|t| t.last_box2d).collect();
        let det_boxes: Vec<Box2D> = projected.iter().map(|p| p.1).collect();
        let assoc = associate(&track_boxes, &det_boxes, self.config.iou_gate);
        for &(ti, di) in &assoc.matches {
            let (ci, _) = projected[di];
            let t = &mut self.tracks[ti];
            t.linked_box3d = Some(cloud[ci].0);
            t.prev_cluster_centroid = cloud[ci].1;
        }
        for &di in &assoc.unmatched_detections {
            let (ci, b) = projected[di];
            let t = self.spawn(&b);
            t.linked_box3d = Some(cloud[ci].0);
            t.prev_cluster_centroid = cloud[ci].1;
        }
    }
}
