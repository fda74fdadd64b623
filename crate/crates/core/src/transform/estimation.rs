//! Heading and center estimation from a fitted surface.
//!
//! A visible surface of a car is either its front/back (the surface normal
//! runs along the heading) or its side (the normal is perpendicular to it).
//! The box center sits half a length or half a width behind the surface,
//! along the surface normal.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::ransac::{ransac_plane, PlaneFit};
use super::TransformError;
use crate::geometry::{count_points_in_box, Box3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadingCase {
    Parallel,
    Perpendicular,
}

/// Which side of the surface a center candidate lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Away from the sensor.
    Far,
    Near,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationParams {
    /// Parallel gate on the angle between surface normal and previous heading, radians.
    pub xi: f64,
    pub ransac_iters: usize,
    /// Inlier distance to the plane, meters.
    pub ransac_tol: f64,
    /// (l, w, h) used for new objects before any cloud result has been seen.
    pub default_size: [f64; 3],
    /// Least-squares refit of the winning plane on its inliers.
    pub refine: bool,
    /// Planes with |n_z| above this are treated as roofs and skipped once.
    pub top_normal_z: f64,
}

impl Default for EstimationParams {
    fn default() -> Self {
        Self {
            xi: 30f64.to_radians(),
            ransac_iters: 30,
            ransac_tol: 0.1,
            default_size: [3.9, 1.6, 1.56],
            refine: true,
            top_normal_z: 0.5,
        }
    }
}

impl EstimationParams {
    pub fn validate(&self) -> Result<(), TransformError> {
        let size_ok = self.default_size.iter().all(|&s| s.is_finite() && s > 0.0);
        if !(self.xi > 0.0 && self.xi < FRAC_PI_2 && self.ransac_iters >= 1 && self.ransac_tol > 0.0 && size_ok) {
            return Err(TransformError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

fn unit2(v: [f64; 2]) -> Result<[f64; 2], TransformError> {
    let n = v[0].hypot(v[1]);
    if !(n >= 1e-6) {
        return Err(TransformError::ZeroNormal);
    }
    Ok([v[0] / n, v[1] / n])
}

fn angle_between(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] * b[0] + a[1] * b[1]).clamp(-1.0, 1.0).acos()
}

pub fn rotate_plus_90(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

pub fn rotate_minus_90(v: [f64; 2]) -> [f64; 2] {
    [v[1], -v[0]]
}

/// Horizontal unit direction of a plane normal.
pub fn horizontal_normal(plane: &PlaneFit) -> Result<[f64; 2], TransformError> {
    unit2([plane.normal[0], plane.normal[1]])
}

/// Picks the heading from the surface normal `v` given the previous heading.
pub fn estimate_heading(v: [f64; 2], h_prev: [f64; 2], xi: f64) -> Result<([f64; 2], HeadingCase), TransformError> {
    let v = unit2(v)?;
    let h_prev = unit2(h_prev)?;
    let alpha = angle_between(h_prev, v);
    if alpha < xi {
        return Ok((v, HeadingCase::Parallel));
    }
    if alpha > std::f64::consts::PI - xi {
        return Ok(([-v[0], -v[1]], HeadingCase::Parallel));
    }
    let plus = rotate_plus_90(v);
    let minus = rotate_minus_90(v);
    let h = if angle_between(minus, h_prev) < angle_between(plus, h_prev) { minus } else { plus };
    Ok((h, HeadingCase::Perpendicular))
}

/// Half extent of the box along the surface normal.
pub fn center_offset(case: HeadingCase, size: [f64; 3]) -> f64 {
    match case {
        HeadingCase::Parallel => 0.5 * size[0],
        HeadingCase::Perpendicular => 0.5 * size[1],
    }
}

/// Flips `axis` so that it points away from the sensor at the origin.
pub fn orient_away(axis: [f64; 2], surface_center: [f64; 3]) -> [f64; 2] {
    if axis[0] * surface_center[0] + axis[1] * surface_center[1] < 0.0 {
        [-axis[0], -axis[1]]
    } else {
        axis
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterEstimate {
    pub center: [f64; 3],
    pub side: Side,
    /// Far and near candidates with their contained-point counts.
    pub candidates: [([f64; 3], usize); 2],
}

/// Places the center half a length (or width) from the surface center along
/// `axis`, on whichever side holds more cluster points. Ties go to `+axis`.
///
/// Points are counted in the candidate box grown by `pad` on every side, so
/// points on the fitted surface (shared by both candidates) count for both
/// and only off-surface points decide.
pub fn estimate_center(
    surface_center: [f64; 3],
    axis: [f64; 2],
    case: HeadingCase,
    size: [f64; 3],
    theta: f64,
    cluster: &[[f64; 3]],
    pad: f64,
) -> Result<CenterEstimate, TransformError> {
    let off = center_offset(case, size);
    let cand = |sign: f64| {
        [surface_center[0] + sign * off * axis[0], surface_center[1] + sign * off * axis[1], surface_center[2]]
    };
    let plus = cand(1.0);
    let minus = cand(-1.0);
    let padded = size.map(|d| d + 2.0 * pad.max(0.0));
    let n_plus = count_points_in_box(cluster, &Box3D::new(plus, padded, theta)?);
    let n_minus = count_points_in_box(cluster, &Box3D::new(minus, padded, theta)?);
    let (center, side) = if n_plus >= n_minus { (plus, Side::Far) } else { (minus, Side::Near) };
    Ok(CenterEstimate { center, side, candidates: [(plus, n_plus), (minus, n_minus)] })
}

/// A fitted surface ready for box placement.
#[derive(Debug, Clone)]
pub struct Surface {
    pub plane: PlaneFit,
    pub center: [f64; 3],
    /// Horizontal surface normal pointing away from the sensor.
    pub axis: [f64; 2],
}

pub fn fit_surface(cluster: &[[f64; 3]], params: &EstimationParams, seed: u64) -> Result<Surface, TransformError> {
    let plane = ransac_plane(cluster, params, seed)?;
    let center = plane.inlier_mean(cluster);
    let axis = orient_away(horizontal_normal(&plane)?, center);
    Ok(Surface { plane, center, axis })
}

/// Box for an object with a known previous box: size is inherited and the
/// heading stays close to the previous one.
pub fn estimate_box_tracked(
    cluster: &[[f64; 3]],
    prev: &Box3D,
    params: &EstimationParams,
    seed: u64,
) -> Result<Box3D, TransformError> {
    let surface = fit_surface(cluster, params, seed)?;
    let (heading, case) = estimate_heading(surface.axis, prev.heading(), params.xi)?;
    let theta = heading[1].atan2(heading[0]);
    let est = estimate_center(surface.center, surface.axis, case, prev.size, theta, cluster, params.ransac_tol)?;
    Ok(Box3D::new(est.center, prev.size, theta)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewBoxEstimate {
    pub bbox: Box3D,
    /// Candidates in the order parallel far, parallel near, perpendicular far,
    /// perpendicular near, with their contained-point counts (padded as in
    /// [`estimate_center`]).
    pub candidates: [(Box3D, usize); 4],
}

/// Box for an object with no history: both heading hypotheses and both
/// center sides are scored and the box holding the most points wins.
pub fn estimate_box_new(
    cluster: &[[f64; 3]],
    avg_size: [f64; 3],
    params: &EstimationParams,
    seed: u64,
) -> Result<NewBoxEstimate, TransformError> {
    if cluster.is_empty() {
        return Err(TransformError::DegenerateCluster("empty cluster".into()));
    }
    let surface = fit_surface(cluster, params, seed)?;
    let axis = surface.axis;
    let theta_par = axis[1].atan2(axis[0]);
    let perp = rotate_plus_90(axis);
    let theta_perp = perp[1].atan2(perp[0]);
    let par =
        estimate_center(surface.center, axis, HeadingCase::Parallel, avg_size, theta_par, cluster, params.ransac_tol)?;
    let per = estimate_center(
        surface.center,
        axis,
        HeadingCase::Perpendicular,
        avg_size,
        theta_perp,
        cluster,
        params.ransac_tol,
    )?;
    let mk = |(c, n): ([f64; 3], usize), theta: f64| Box3D::new(c, avg_size, theta).map(|b| (b, n));
    let candidates = [
        mk(par.candidates[0], theta_par)?,
        mk(par.candidates[1], theta_par)?,
        mk(per.candidates[0], theta_perp)?,
        mk(per.candidates[1], theta_perp)?,
    ];
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.1 > candidates[best].1 {
            best = i;
        }
    }
    Ok(NewBoxEstimate { bbox: candidates[best].0, candidates })
}
