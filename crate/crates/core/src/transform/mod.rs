//! Lifting 2D instance masks to 3D boxes.

mod estimation;
mod filtration;
mod ransac;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use estimation::{
    center_offset, estimate_box_new, estimate_box_tracked, estimate_center, estimate_heading, fit_surface,
    horizontal_normal, orient_away, rotate_minus_90, rotate_plus_90, CenterEstimate, EstimationParams, HeadingCase,
    NewBoxEstimate, Side, Surface,
};
pub use filtration::{filtration_mask, point_filtration, FiltrationParams, FiltrationTrace};
pub use ransac::{ransac_plane, PlaneFit};

use crate::dataset::{Calibration, InstanceFrame, PointCloud};
use crate::geometry::{project_point, Box3D, GeometryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("empty point cluster")]
    EmptyCluster,
    #[error("degenerate cluster: {0}")]
    DegenerateCluster(String),
    #[error("plane normal has no horizontal component")]
    ZeroNormal,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCluster {
    pub instance_id: u16,
    pub frame_id: u32,
    pub points: Vec<[f64; 3]>,
}

impl PointCluster {
    pub fn centroid(&self) -> Option<[f64; 3]> {
        centroid(&self.points)
    }
}

pub fn centroid(points: &[[f64; 3]]) -> Option<[f64; 3]> {
    if points.is_empty() {
        return None;
    }
    let mut acc = [0.0; 3];
    for p in points {
        for k in 0..3 {
            acc[k] += p[k];
        }
    }
    Some(acc.map(|v| v / points.len() as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformParams {
    pub filtration: FiltrationParams,
    pub estimation: EstimationParams,
    /// Base seed for the per-instance RANSAC streams.
    pub seed: u64,
}

impl TransformParams {
    pub fn validate(&self) -> Result<(), TransformError> {
        self.filtration.validate()?;
        self.estimation.validate()
    }

    /// RANSAC seed for one instance in one frame, independent of processing order.
    pub fn instance_seed(&self, frame_id: u32, instance_id: u16) -> u64 {
        let mut z = self.seed ^ ((frame_id as u64) << 16 | instance_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

/// Groups the points whose projection lands on a nonzero mask pixel by
/// instance id. Instances that catch no point are absent from the result.
pub fn assign_points_to_instances(
    pc: &PointCloud,
    frame: &InstanceFrame,
    calib: &Calibration,
) -> BTreeMap<u16, PointCluster> {
    let mut clusters: BTreeMap<u16, PointCluster> = BTreeMap::new();
    for p in &pc.points {
        let xyz = p.xyz();
        let proj = project_point(calib, xyz);
        if !proj.valid {
            continue;
        }
        let Some(id) = frame.map.lookup(proj.u, proj.v) else { continue };
        if id == 0 {
            continue;
        }
        clusters
            .entry(id)
            .or_insert_with(|| PointCluster { instance_id: id, frame_id: pc.frame_id, points: Vec::new() })
            .points
            .push(xyz);
    }
    clusters
}

/// What an instance's box was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRef {
    pub bbox: Box3D,
    /// Centroid of the filtered cluster the box was last estimated from.
    pub centroid: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimateMethod {
    Tracked,
    New,
    /// Previous box shifted by the cluster centroid motion.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceEstimate {
    pub instance_id: u16,
    pub bbox: Box3D,
    /// Centroid of the filtered cluster.
    pub centroid: [f64; 3],
    pub method: EstimateMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub frame_id: u32,
    pub instance_id: u16,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameTransform {
    /// Ascending by instance id.
    pub boxes: Vec<InstanceEstimate>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Estimates one box per instance of `frame`. Instances present in `refs`
/// keep their previous size and heading family; the rest get `avg_size`.
pub fn transform_frame(
    pc: &PointCloud,
    frame: &InstanceFrame,
    calib: &Calibration,
    refs: &BTreeMap<u16, TrackRef>,
    avg_size: [f64; 3],
    params: &TransformParams,
) -> FrameTransform {
    let mut clusters = assign_points_to_instances(pc, frame, calib);
    let mut out = FrameTransform::default();
    let diag = |id: u16, message: String| {
        log::debug!("frame {} instance {id}: {message}", frame.frame_id);
        Diagnostic { frame_id: frame.frame_id, instance_id: id, message }
    };
    let mut ids: Vec<u16> = frame.boxes.iter().map(|b| b.id).collect();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let Some(raw) = clusters.remove(&id) else {
            out.diagnostics.push(diag(id, "no points in mask".into()));
            continue;
        };
        let cluster = match point_filtration(&raw, &params.filtration) {
            Ok(c) => c,
            Err(e) => {
                out.diagnostics.push(diag(id, e.to_string()));
                continue;
            }
        };
        let Some(c) = cluster.centroid() else { continue };
        let seed = params.instance_seed(frame.frame_id, id);
        let estimate = match refs.get(&id) {
            Some(r) => match estimate_box_tracked(&cluster.points, &r.bbox, &params.estimation, seed) {
                Ok(b) => Some((b, EstimateMethod::Tracked)),
                Err(e) => {
                    out.diagnostics.push(diag(id, format!("tracked estimate failed, using fallback: {e}")));
                    let bbox = match r.centroid {
                        Some(prev) => r.bbox.translated([c[0] - prev[0], c[1] - prev[1], c[2] - prev[2]]),
                        None => r.bbox,
                    };
                    Some((bbox, EstimateMethod::Fallback))
                }
            },
            None => match estimate_box_new(&cluster.points, avg_size, &params.estimation, seed) {
                Ok(est) => Some((est.bbox, EstimateMethod::New)),
                Err(e) => {
                    out.diagnostics.push(diag(id, format!("new estimate failed: {e}")));
                    None
                }
            },
        };
        if let Some((bbox, method)) = estimate {
            out.boxes.push(InstanceEstimate { instance_id: id, bbox, centroid: c, method });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{InstanceMap, Point};
    use crate::geometry::project_point;

    fn frame_with_rect(calib: &Calibration, id: u16, u: (u32, u32), v: (u32, u32)) -> InstanceFrame {
        let mut f = InstanceFrame::empty(0, 1242, 375);
        let mut map = InstanceMap::empty(1242, 375);
        for row in v.0..v.1 {
            for col in u.0..u.1 {
                map.set(col, row, id);
            }
        }
        f.map = map;
        f.boxes.push(crate::dataset::InstanceBox {
            id,
            bbox: crate::geometry::Box2D::new(u.0 as f64, v.0 as f64, u.1 as f64, v.1 as f64).unwrap(),
            score: 0.9,
        });
        let _ = calib;
        f
    }

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud {
            frame_id: 0,
            points: points.iter().map(|p| Point { x: p[0] as f32, y: p[1] as f32, z: p[2] as f32, r: 0.0 }).collect(),
        }
    }

    #[test]
    fn empty_map_yields_no_clusters() {
        let calib = Calibration::kitti_like();
        let pc = cloud(&[[10.0, 0.0, 0.0], [5.0, 1.0, -1.0]]);
        let f = InstanceFrame::empty(0, 1242, 375);
        assert!(assign_points_to_instances(&pc, &f, &calib).is_empty());
    }

    #[test]
    fn points_inside_rendered_rectangle_join_cluster() {
        let calib = Calibration::kitti_like();
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [10.0 + i as f64 * 0.1, (i % 5) as f64 * 0.2 - 0.4, -0.5]).collect();
        // Render the map from the same projection so every point lands inside.
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &pts {
            let pp = project_point(&calib, *p);
            u0 = u0.min(pp.u);
            u1 = u1.max(pp.u);
            v0 = v0.min(pp.v);
            v1 = v1.max(pp.v);
        }
        let f = frame_with_rect(
            &calib,
            1,
            (u0.floor() as u32, u1.ceil() as u32 + 1),
            (v0.floor() as u32, v1.ceil() as u32 + 1),
        );
        let mut all = pts.clone();
        all.push([-10.0, 0.0, 0.0]);
        let clusters = assign_points_to_instances(&cloud(&all), &f, &calib);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[&1].points.len(), pts.len());
    }

    #[test]
    fn no_instances_no_boxes() {
        let calib = Calibration::kitti_like();
        let out = transform_frame(
            &cloud(&[[10.0, 0.0, 0.0]]),
            &InstanceFrame::empty(0, 1242, 375),
            &calib,
            &BTreeMap::new(),
            [3.9, 1.6, 1.56],
            &TransformParams::default(),
        );
        assert!(out.boxes.is_empty());
        assert!(out.diagnostics.is_empty());
    }

    #[test]
    fn instance_without_points_is_omitted_with_diagnostic() {
        let calib = Calibration::kitti_like();
        let f = frame_with_rect(&calib, 3, (0, 10), (0, 10));
        let out = transform_frame(
            &cloud(&[[10.0, 0.0, 0.0]]),
            &f,
            &calib,
            &BTreeMap::new(),
            [3.9, 1.6, 1.56],
            &TransformParams::default(),
        );
        assert!(out.boxes.is_empty());
        assert_eq!(out.diagnostics.len(), 1);
        assert_eq!(out.diagnostics[0].instance_id, 3);
    }

    #[test]
    fn degenerate_tracked_cluster_falls_back() {
        let calib = Calibration::kitti_like();
        let pts = [[10.0, 0.0, -0.5], [10.2, 0.0, -0.5]];
        let c = project_point(&calib, pts[0]);
        let f = frame_with_rect(&calib, 1, (c.u as u32 - 20, c.u as u32 + 20), (c.v as u32 - 20, c.v as u32 + 20));
        let prev = Box3D::new([11.0, 0.0, -0.9], [3.9, 1.6, 1.56], 0.0).unwrap();
        let mut refs = BTreeMap::new();
        refs.insert(1, TrackRef { bbox: prev, centroid: Some([9.6, 0.0, -0.5]) });
        let out = transform_frame(&cloud(&pts), &f, &calib, &refs, [3.9, 1.6, 1.56], &TransformParams::default());
        assert_eq!(out.boxes.len(), 1);
        assert_eq!(out.boxes[0].method, EstimateMethod::Fallback);
        assert!((out.boxes[0].bbox.center[0] - 11.5).abs() < 1e-6);
        assert_eq!(out.boxes[0].bbox.size, prev.size);
    }

    #[test]
    fn seeds_differ_per_instance() {
        let p = TransformParams::default();
        assert_ne!(p.instance_seed(0, 1), p.instance_seed(0, 2));
        assert_ne!(p.instance_seed(0, 1), p.instance_seed(1, 1));
        assert_eq!(p.instance_seed(7, 3), p.instance_seed(7, 3));
    }
}
