//! Box types, projections and IoU kernels.
//!
//! All geometry is carried in `f64`. Point clouds are stored as `f32` on disk
//! and widened on entry.

use std::f64::consts::PI;

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::dataset::{Calibration, PointCloud};

/// Membership slack for closed-box tests, in meters.
const INSIDE_EPS: f64 = 1e-9;
/// Clipped polygons smaller than this (m²) count as empty.
const MIN_POLYGON_AREA: f64 = 1e-12;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid 3D box: {0}")]
    InvalidBox3D(String),
    #[error("invalid 2D box: {0}")]
    InvalidBox2D(String),
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a - 2.0 * PI
    } else {
        a
    }
}

/// Yaw-only 3D box in the LiDAR frame.
///
/// `center` is the volumetric center, `size` is `(l, w, h)` with `l` measured
/// along the heading, and `theta` is the heading about the vertical axis,
/// measured from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub theta: f64,
}

impl Box3D {
    /// Builds a box, normalizing `theta` and checking the size/finiteness invariants.
    pub fn new(center: [f64; 3], size: [f64; 3], theta: f64) -> Result<Self, GeometryError> {
        let b = Self { center, size, theta: normalize_angle(theta) };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.center.iter().chain(&self.size).all(|v| v.is_finite()) || !self.theta.is_finite() {
            return Err(GeometryError::InvalidBox3D(format!("non-finite value in {self:?}")));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(GeometryError::InvalidBox3D(format!("non-positive size {:?}", self.size)));
        }
        if !(self.theta > -PI && self.theta <= PI) {
            return Err(GeometryError::InvalidBox3D(format!("theta {} outside (-pi, pi]", self.theta)));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Unit heading vector in the x-y plane.
    pub fn heading(&self) -> [f64; 2] {
        [self.theta.cos(), self.theta.sin()]
    }

    pub fn translated(&self, delta: [f64; 3]) -> Self {
        Self { center: [self.center[0] + delta[0], self.center[1] + delta[1], self.center[2] + delta[2]], ..*self }
    }

    /// Footprint corners, counter-clockwise starting at the (+l, +w) corner.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let hl = 0.5 * self.size[0];
        let hw = 0.5 * self.size[1];
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly])
    }

    fn z_range(&self) -> (f64, f64) {
        let hh = 0.5 * self.size[2];
        (self.center[2] - hh, self.center[2] + hh)
    }
}

/// Axis-aligned image box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidBox2D(format!("non-finite value in {self:?}")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(GeometryError::InvalidBox2D(format!("empty extent {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)]
    }
}

/// One point's image-plane projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    /// Depth along the rectified camera's optical axis, meters.
    pub depth: f64,
    pub valid: bool,
}

fn project_xyz(calib: &Calibration, p: [f64; 3]) -> PixelProjection {
    let h = Vector4::new(p[0], p[1], p[2], 1.0);
    let cam = calib.lidar_to_rect() * h;
    let img = calib.lidar_to_image() * h;
    let depth = cam[2];
    let w = img[2];
    let valid = depth > 0.0 && w > 0.0 && w.is_finite();
    PixelProjection { u: img[0] / w, v: img[1] / w, depth, valid }
}

/// Projects every point through `lidar_to_cam`, `rect` and `cam_proj`.
///
/// Points with non-positive camera depth are flagged invalid, never dropped,
/// so the output is index-aligned with `pc.points`.
pub fn project_points(pc: &PointCloud, calib: &Calibration) -> Vec<PixelProjection> {
    pc.points.iter().map(|p| project_xyz(calib, [p.x as f64, p.y as f64, p.z as f64])).collect()
}

pub fn project_point(calib: &Calibration, p: [f64; 3]) -> PixelProjection {
    project_xyz(calib, p)
}

/// Corners of the yaw-rotated cuboid.
///
/// Order: bottom face counter-clockwise from the (+l, +w) corner, then the
/// top face in the same order.
pub fn box3d_corners(b: &Box3D) -> [[f64; 3]; 8] {
    let bev = b.bev_corners();
    let (z0, z1) = b.z_range();
    let mut out = [[0.0; 3]; 8];
    for (i, c) in bev.iter().enumerate() {
        out[i] = [c[0], c[1], z0];
        out[i + 4] = [c[0], c[1], z1];
    }
    out
}

/// Axis-aligned hull of the corners that project in front of the camera,
/// without clipping to the image. Returns the hull and the projected corners.
pub fn projected_corner_hull(b: &Box3D, calib: &Calibration) -> Option<(Box2D, Vec<[f64; 2]>)> {
    let pts: Vec<[f64; 2]> =
        box3d_corners(b).iter().map(|&c| project_xyz(calib, c)).filter(|p| p.valid).map(|p| [p.u, p.v]).collect();
    if pts.is_empty() {
        return None;
    }
    let mut hull = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in &pts {
        hull[0] = hull[0].min(p[0]);
        hull[1] = hull[1].min(p[1]);
        hull[2] = hull[2].max(p[0]);
        hull[3] = hull[3].max(p[1]);
    }
    let b2 = Box2D::new(hull[0], hull[1], hull[2], hull[3]).ok()?;
    Some((b2, pts))
}

/// Image-plane box of a 3D box: the hull of its projected corners, clipped
/// to `[0, width] x [0, height]`. `None` when every corner is behind the
/// camera or the clipped hull is degenerate.
pub fn project_box3d_to_2d(b: &Box3D, calib: &Calibration, width: u32, height: u32) -> Option<Box2D> {
    let (hull, _) = projected_corner_hull(b, calib)?;
    let (w, h) = (width as f64, height as f64);
    Box2D::new(hull.x1.clamp(0.0, w), hull.y1.clamp(0.0, h), hull.x2.clamp(0.0, w), hull.y2.clamp(0.0, h)).ok()
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area; positive for counter-clockwise rings.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

/// Sutherland–Hodgman clip of `subject` against the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let scale = clip.iter().chain(subject).fold(1.0f64, |m, p| m.max(p[0].abs()).max(p[1].abs()));
    let eps = 1e-12 * scale * scale;
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let c_cur = cross(e0, e1, cur);
            let c_prev = cross(e0, e1, prev);
            let cur_in = c_cur >= -eps;
            let prev_in = c_prev >= -eps;
            if cur_in {
                if !prev_in {
                    output.push(segment_cut(prev, cur, c_prev, c_cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_cut(prev, cur, c_prev, c_cur));
            }
        }
    }
    output
}

fn segment_cut(s: [f64; 2], e: [f64; 2], cs: f64, ce: f64) -> [f64; 2] {
    let t = (cs / (cs - ce)).clamp(0.0, 1.0);
    [s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])]
}

/// Footprint intersection area of two boxes, m².
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_convex_polygon(&a.bev_corners(), &b.bev_corners());
    let area = polygon_area(&poly).abs();
    if area < MIN_POLYGON_AREA {
        0.0
    } else {
        area.min(a.size[0] * a.size[1]).min(b.size[0] * b.size[1])
    }
}

/// Volumetric IoU of two yaw-only boxes: footprint intersection times
/// vertical overlap over the union volume.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let area = bev_intersection_area(a, b);
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Closed-box membership: points are rotated into the box frame and compared
/// against the half extents (boundary inclusive).
pub fn points_in_box(points: &[[f64; 3]], b: &Box3D) -> (usize, Vec<bool>) {
    let (s, c) = b.theta.sin_cos();
    let half = [0.5 * b.size[0], 0.5 * b.size[1], 0.5 * b.size[2]];
    let mask: Vec<bool> = points
        .iter()
        .map(|p| {
            let dx = p[0] - b.center[0];
            let dy = p[1] - b.center[1];
            let dz = p[2] - b.center[2];
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            lx.abs() <= half[0] + INSIDE_EPS && ly.abs() <= half[1] + INSIDE_EPS && dz.abs() <= half[2] + INSIDE_EPS
        })
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    (count, mask)
}

pub fn count_points_in_box(points: &[[f64; 3]], b: &Box3D) -> usize {
    points_in_box(points, b).0
}
