//! Removal of tainted background points from an instance's point cluster.
//!
//! Object points sit much nearer to the sensor than the background that leaks
//! through a 2D mask, so the cluster is cut around its nearest point. When
//! that leaves too few points the anchor steps outward by `s_t` and the cut
//! is retried, up to `max_iter` times.

use serde::{Deserialize, Serialize};

use super::{PointCluster, TransformError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FiltrationParams {
    /// Distance gate around the critical point, meters.
    pub f_t: f64,
    /// Minimum number of kept points.
    pub m_t: usize,
    /// Outward step of the critical point, meters.
    pub s_t: f64,
    pub max_iter: usize,
}

impl Default for FiltrationParams {
    fn default() -> Self {
        Self { f_t: 4.5, m_t: 24, s_t: 12.0, max_iter: 3 }
    }
}

impl FiltrationParams {
    pub fn validate(&self) -> Result<(), TransformError> {
        if !(self.f_t > 0.0 && self.s_t > 0.0 && self.m_t >= 1 && self.max_iter >= 1) {
            return Err(TransformError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Outcome of a filtration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FiltrationTrace {
    pub mask: Vec<bool>,
    /// Index of the final critical point.
    pub critical: usize,
    pub iterations: usize,
}

/// Runs the filtration loop and returns the final membership mask.
pub fn filtration_mask(points: &[[f64; 3]], p: &FiltrationParams) -> Result<FiltrationTrace, TransformError> {
    if points.is_empty() {
        return Err(TransformError::EmptyCluster);
    }
    let range: Vec<f64> = points.iter().map(norm).collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| range[a].total_cmp(&range[b]).then(a.cmp(&b)));

    let mut critical = order[0];
    let mut iterations = 0;
    let mut mask;
    loop {
        let anchor = points[critical];
        mask = points.iter().map(|q| dist(q, &anchor) < p.f_t).collect::<Vec<bool>>();
        iterations += 1;
        let kept = mask.iter().filter(|&&m| m).count();
        if kept >= p.m_t || iterations >= p.max_iter {
            break;
        }
        let target = range[critical] + p.s_t;
        let pos = order.partition_point(|&i| range[i] < target);
        match order.get(pos) {
            Some(&next) => critical = next,
            None => break,
        }
    }
    Ok(FiltrationTrace { mask, critical, iterations })
}

/// Filters a cluster; the result is always a subset of the input, in input order.
pub fn point_filtration(cluster: &PointCluster, p: &FiltrationParams) -> Result<PointCluster, TransformError> {
    let trace = filtration_mask(&cluster.points, p)?;
    Ok(PointCluster {
        instance_id: cluster.instance_id,
        frame_id: cluster.frame_id,
        points: cluster.points.iter().zip(&trace.mask).filter(|(_, &m)| m).map(|(q, _)| *q).collect(),
    })
}
