//! RANSAC plane fitting on a point cluster.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EstimationParams, TransformError};

/// Seed offset for the second pass after a top surface is rejected.
const RERUN_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    /// Unit normal; the plane is `normal · p = offset`.
    pub normal: [f64; 3],
    pub offset: f64,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
}

impl PlaneFit {
    pub fn residual(&self, p: &[f64; 3]) -> f64 {
        dot(&self.normal, p) - self.offset
    }

    /// Mean of the inlier points.
    pub fn inlier_mean(&self, points: &[[f64; 3]]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for (p, _) in points.iter().zip(&self.inliers).filter(|(_, &m)| m) {
            for k in 0..3 {
                acc[k] += p[k];
            }
        }
        let n = self.inlier_count.max(1) as f64;
        acc.map(|v| v / n)
    }

    pub fn is_top_surface(&self, limit: f64) -> bool {
        self.normal[2].abs() > limit
    }
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn plane_through(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> Option<([f64; 3], f64)> {
    let n = cross(&sub(b, a), &sub(c, a));
    let len = norm(&n);
    let scale = norm(&sub(b, a)).max(norm(&sub(c, a))).max(1e-300);
    if len <= 1e-12 * scale * scale {
        return None;
    }
    let n = n.map(|v| v / len);
    Some((n, dot(&n, a)))
}

fn score(points: &[[f64; 3]], normal: &[f64; 3], offset: f64, tol: f64) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = points.iter().map(|p| (dot(normal, p) - offset).abs() <= tol).collect();
    let n = mask.iter().filter(|&&m| m).count();
    (mask, n)
}

/// A deterministic non-collinear triple, or `None` when every point lies on
/// one line.
fn spanning_triple(points: &[[f64; 3]]) -> Option<[usize; 3]> {
    let a = 0;
    let (b, db) = points.iter().enumerate().map(|(i, p)| (i, norm(&sub(p, &points[a])))).fold((0, 0.0), |m, x| {
        if x.1 > m.1 {
            x
        } else {
            m
        }
    });
    if db <= 1e-9 {
        return None;
    }
    let ab = sub(&points[b], &points[a]);
    let (c, dc) = points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, norm(&cross(&ab, &sub(p, &points[a]))) / db))
        .fold((0, 0.0), |m, x| if x.1 > m.1 { x } else { m });
    if dc <= 1e-9 {
        return None;
    }
    Some([a, b, c])
}

/// Least-squares plane through the masked points.
fn refit(points: &[[f64; 3]], mask: &[bool]) -> Option<([f64; 3], f64)> {
    let sel: Vec<Vector3<f64>> = points.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| Vector3::from(*p)).collect();
    if sel.len() < 3 {
        return None;
    }
    let mean = sel.iter().sum::<Vector3<f64>>() / sel.len() as f64;
    let cov = sel.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - mean;
        acc + d * d.transpose()
    });
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    let n = eig.eigenvectors.column(k).normalize();
    if !n.iter().all(|v| v.is_finite()) {
        return None;
    }
    let n = [n[0], n[1], n[2]];
    Some((n, dot(&n, &[mean[0], mean[1], mean[2]])))
}

fn single_pass(points: &[[f64; 3]], params: &EstimationParams, seed: u64) -> Result<PlaneFit, TransformError> {
    if points.len() < 3 {
        return Err(TransformError::DegenerateCluster(format!("{} points", points.len())));
    }
    let Some(fallback) = spanning_triple(points) else {
        return Err(TransformError::DegenerateCluster("all points collinear".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<([f64; 3], f64, Vec<bool>, usize)> = None;
    for _ in 0..params.ransac_iters {
        let idx = rand::seq::index::sample(&mut rng, points.len(), 3);
        let (i, j, k) = (idx.index(0), idx.index(1), idx.index(2));
        let Some((n, d)) = plane_through(&points[i], &points[j], &points[k]) else { continue };
        let (mask, count) = score(points, &n, d, params.ransac_tol);
        if best.as_ref().is_none_or(|b| count > b.3) {
            best = Some((n, d, mask, count));
        }
    }
    let (mut normal, mut offset, mut inliers, mut count) = match best {
        Some(b) => b,
        None => {
            let [a, b, c] = fallback;
            let (n, d) = plane_through(&points[a], &points[b], &points[c])
                .ok_or_else(|| TransformError::DegenerateCluster("no spanning triple".into()))?;
            let (mask, cnt) = score(points, &n, d, params.ransac_tol);
            (n, d, mask, cnt)
        }
    };
    if params.refine {
        if let Some((n, d)) = refit(points, &inliers) {
            let (mask, cnt) = score(points, &n, d, params.ransac_tol);
            if cnt >= count {
                (normal, offset, inliers, count) = (n, d, mask, cnt);
            }
        }
    }
    Ok(PlaneFit { normal, offset, inliers, inlier_count: count })
}

/// Best-of-`ransac_iters` plane by inlier count, deterministic in `seed`.
///
/// When the winning plane is near-horizontal (a roof or the ground), its
/// inliers are removed and the search runs once more on what is left.
pub fn ransac_plane(points: &[[f64; 3]], params: &EstimationParams, seed: u64) -> Result<PlaneFit, TransformError> {
    let first = single_pass(points, params, seed)?;
    if !first.is_top_surface(params.top_normal_z) {
        return Ok(first);
    }
    let keep: Vec<usize> = (0..points.len()).filter(|&i| !first.inliers[i]).collect();
    let rest: Vec<[f64; 3]> = keep.iter().map(|&i| points[i]).collect();
    match single_pass(&rest, params, seed ^ RERUN_SEED_SALT) {
        Ok(second) => {
            let mut inliers = vec![false; points.len()];
            for (&i, &m) in keep.iter().zip(&second.inliers) {
                inliers[i] = m;
            }
            Ok(PlaneFit { inliers, ..second })
        }
        Err(_) => Ok(first),
    }
}
