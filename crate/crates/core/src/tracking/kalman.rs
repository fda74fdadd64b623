//! Constant-velocity Kalman filter over 2D boxes in (u, v, s, r) form:
//! center, area and aspect ratio, with rates for center and area.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{Box2D, Box3D};

pub type StateVec = SVector<f64, 7>;
pub type StateCov = SMatrix<f64, 7, 7>;
type Measurement = SVector<f64, 4>;

const MIN_AREA: f64 = 1e-6;
const MIN_ASPECT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    /// Initial covariance diagonal.
    pub initial_var: [f64; 7],
    /// Process noise diagonal.
    pub process_var: [f64; 7],
    /// Measurement noise diagonal.
    pub measurement_var: [f64; 4],
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            initial_var: [10.0, 10.0, 10.0, 10.0, 1000.0, 1000.0, 1000.0],
            process_var: [1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4],
            measurement_var: [1.0, 1.0, 10.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub track_id: u64,
    pub mean: StateVec,
    pub cov: StateCov,
    pub last_box2d: Box2D,
    pub linked_box3d: Option<Box3D>,
    pub prev_cluster_centroid: Option<[f64; 3]>,
    /// Frames since the last match.
    pub age: u32,
    pub hits: u32,
    /// Instance matched in the most recent step.
    pub instance_id: Option<u16>,
}

impl TrackState {
    pub fn box2d(&self) -> Box2D {
        state_to_box(&self.mean)
    }
}

pub fn box_to_measurement(b: &Box2D) -> [f64; 4] {
    let [u, v] = b.center();
    let s = b.width() * b.height();
    let r = b.width() / b.height();
    [u, v, s, r]
}

/// Rebuilds a box from the position part of a state, flooring area and aspect.
pub fn state_to_box(x: &StateVec) -> Box2D {
    let s = x[2].max(MIN_AREA);
    let r = x[3].max(MIN_ASPECT);
    let w = (s * r).sqrt();
    let h = s / w;
    Box2D { x1: x[0] - w / 2.0, y1: x[1] - h / 2.0, x2: x[0] + w / 2.0, y2: x[1] + h / 2.0 }
}

pub fn kf_init(track_id: u64, b: &Box2D, cfg: &KalmanConfig) -> TrackState {
    let z = box_to_measurement(b);
    let mean = StateVec::from([z[0], z[1], z[2], z[3], 0.0, 0.0, 0.0]);
    TrackState {
        track_id,
        mean,
        cov: StateCov::from_diagonal(&StateVec::from(cfg.initial_var)),
        last_box2d: *b,
        linked_box3d: None,
        prev_cluster_centroid: None,
        age: 0,
        hits: 1,
        instance_id: None,
    }
}

fn transition() -> StateCov {
    let mut f = StateCov::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    f
}

fn observation() -> SMatrix<f64, 4, 7> {
    let mut h = SMatrix::<f64, 4, 7>::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

/// Advances the state one frame and returns it with its predicted box.
pub fn kf_predict(t: &TrackState, cfg: &KalmanConfig) -> (TrackState, Box2D) {
    let f = transition();
    let mut mean = f * t.mean;
    mean[2] = mean[2].max(MIN_AREA);
    let cov = f * t.cov * f.transpose() + StateCov::from_diagonal(&StateVec::from(cfg.process_var));
    let next = TrackState { mean, cov: symmetrize(cov), age: t.age + 1, ..t.clone() };
    let b = state_to_box(&next.mean);
    (next, b)
}

fn symmetrize(p: StateCov) -> StateCov {
    (p + p.transpose()) * 0.5
}

/// Measurement update with `det`; linked 3D state is carried over untouched.
pub fn kf_update(t: &TrackState, det: &Box2D, cfg: &KalmanConfig) -> TrackState {
    let h = observation();
    let r = SMatrix::<f64, 4, 4>::from_diagonal(&Measurement::from(cfg.measurement_var));
    let z = Measurement::from(box_to_measurement(det));
    let innovation = z - h * t.mean;
    let s = h * t.cov * h.transpose() + r;
    // R is positive definite, so S always inverts.
    let s_inv = s.try_inverse().unwrap_or_else(SMatrix::<f64, 4, 4>::identity);
    let k = t.cov * h.transpose() * s_inv;
    let mut mean = t.mean + k * innovation;
    mean[2] = mean[2].max(MIN_AREA);
    mean[3] = mean[3].max(MIN_ASPECT);
    let i_kh = StateCov::identity() - k * h;
    let cov = i_kh * t.cov * i_kh.transpose() + k * r * k.transpose();
    TrackState { mean, cov: symmetrize(cov), last_box2d: *det, age: 0, hits: t.hits + 1, ..t.clone() }
}
