//! Synthetic driving scenes: cuboid cars on a flat road, scanned by a
//! ray-cast LiDAR, with perfect instance masks and ground truth.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    self, encode_instance_map, encode_point_cloud, format_cloud_line, format_label, Calibration, CloudDetections,
    InstanceBox, InstanceFrame, InstanceMap, Point, PointCloud, ScoredBox,
};
use crate::geometry::{project_point, Box2D, Box3D};

pub const IMAGE_WIDTH: u32 = 1242;
pub const IMAGE_HEIGHT: u32 = 375;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub frames: usize,
    pub objects: usize,
    /// Gaussian noise per point coordinate, meters.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Height of the road below the sensor, meters (negative).
    pub ground_z: f64,
    pub include_ground: bool,
    pub channels: usize,
    pub elevation_max_deg: f64,
    pub elevation_min_deg: f64,
    pub azimuth_step_deg: f64,
    /// Half field of view scanned around the sensor's x axis.
    pub azimuth_half_fov_deg: f64,
    pub max_range: f64,
    /// Speed range, meters per frame.
    pub speed: [f64; 2],
    /// Objects with fewer LiDAR hits are left out of the frame.
    pub min_hits: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            objects: 3,
            noise_sigma: 0.02,
            seed: 0,
            ground_z: -1.73,
            include_ground: true,
            channels: 64,
            elevation_max_deg: 2.0,
            elevation_min_deg: -24.9,
            azimuth_step_deg: 0.2,
            azimuth_half_fov_deg: 40.0,
            max_range: 80.0,
            speed: [0.2, 0.6],
            min_hits: 5,
        }
    }
}

/// A car moving at constant velocity along its heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthObject {
    pub start: Box3D,
    /// Meters per frame along the heading.
    pub speed: f64,
}

impl SynthObject {
    pub fn at(&self, frame: usize) -> Box3D {
        let d = self.speed * frame as f64;
        self.start.translated([d * self.start.theta.cos(), d * self.start.theta.sin(), 0.0])
    }
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub cloud: Arc<PointCloud>,
    pub instances: Arc<InstanceFrame>,
    /// Visible objects' boxes, the ground truth.
    pub truth: Vec<Box3D>,
    /// Object index per instance id.
    pub instance_objects: BTreeMap<u16, usize>,
    /// Object index per point, `None` for ground.
    pub point_objects: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SynthConfig,
    pub calib: Calibration,
    pub objects: Vec<SynthObject>,
    pub frames: Vec<SynthFrame>,
}

impl SyntheticScene {
    /// Cloud store equal to the ground truth at `f32` precision.
    pub fn cloud_store(&self) -> BTreeMap<u32, CloudDetections> {
        self.frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let det = CloudDetections {
                    frame_id: i as u32,
                    boxes: f.truth.iter().map(|b| ScoredBox { bbox: *b, score: 1.0 }).collect(),
                };
                let det = dataset::parse_cloud_line(&format_cloud_line(&det)).expect("own output parses");
                (i as u32, det)
            })
            .collect()
    }

    pub fn labels(&self) -> BTreeMap<u32, Vec<Box3D>> {
        self.frames.iter().enumerate().map(|(i, f)| (i as u32, f.truth.clone())).collect()
    }
}

fn place_objects(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<SynthObject> {
    // Lanes alternate around the sensor lane so objects never overlap.
    (0..cfg.objects)
        .map(|k| {
            let lane = match k % 2 {
                0 => (k / 2) as f64,
                _ => -((k / 2 + 1) as f64),
            };
            let lane = if k == 0 { 0.0 } else { lane };
            let y = lane * 3.5 + rng.random_range(-0.3..0.3);
            let x = 12.0 + 4.0 * (k / 3) as f64 + rng.random_range(0.0..18.0);
            let l = rng.random_range(3.6..4.4);
            let w = rng.random_range(1.5..1.8);
            let h = rng.random_range(1.4..1.7);
            let away = x < 21.0;
            let theta = if away { 0.0 } else { std::f64::consts::PI } + rng.random_range(-0.1..0.1);
            let speed = rng.random_range(cfg.speed[0]..=cfg.speed[1]);
            let start = Box3D::new([x, y, cfg.ground_z + 0.5 * h], [l, w, h], theta).expect("valid car box");
            SynthObject { start, speed }
        })
        .collect()
}

/// Distance along the ray to the box surface, if hit in front of the origin.
fn ray_box(dir: [f64; 3], b: &Box3D) -> Option<f64> {
    let (s, c) = b.theta.sin_cos();
    // Ray origin and direction in the box frame.
    let o = [-b.center[0], -b.center[1], -b.center[2]];
    let o = [c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [0.5 * b.size[0], 0.5 * b.size[1], 0.5 * b.size[2]];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let bb = (half[k] - o[k]) / d[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Nearest hit per LiDAR ray: `(point, object index)`.
fn scan(cfg: &SynthConfig, boxes: &[Box3D]) -> Vec<([f64; 3], Option<usize>)> {
    let mut hits = Vec::new();
    let n_az = (2.0 * cfg.azimuth_half_fov_deg / cfg.azimuth_step_deg).round() as usize + 1;
    for ch in 0..cfg.channels {
        let frac = if cfg.channels > 1 { ch as f64 / (cfg.channels - 1) as f64 } else { 0.0 };
        let elev = (cfg.elevation_max_deg + frac * (cfg.elevation_min_deg - cfg.elevation_max_deg)).to_radians();
        for ia in 0..n_az {
            let az = (-cfg.azimuth_half_fov_deg + ia as f64 * cfg.azimuth_step_deg).to_radians();
            let dir = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
            let mut best: Option<(f64, Option<usize>)> = None;
            for (k, b) in boxes.iter().enumerate() {
                if let Some(t) = ray_box(dir, b) {
                    if best.is_none_or(|x| t < x.0) {
                        best = Some((t, Some(k)));
                    }
                }
            }
            if cfg.include_ground && dir[2] < 0.0 {
                let t = cfg.ground_z / dir[2];
                if best.is_none_or(|x| t < x.0) {
                    best = Some((t, None));
                }
            }
            if let Some((t, obj)) = best {
                if t <= cfg.max_range {
                    hits.push(([t * dir[0], t * dir[1], t * dir[2]], obj));
                }
            }
        }
    }
    hits
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Pixels within `margin` of the convex polygon (or of its points when degenerate).
fn fill_hull(hull: &[[f64; 2]], margin: f64, width: u32, height: u32, mut paint: impl FnMut(u32, u32)) {
    if hull.is_empty() {
        return;
    }
    let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in hull {
        u0 = u0.min(p[0]);
        u1 = u1.max(p[0]);
        v0 = v0.min(p[1]);
        v1 = v1.max(p[1]);
    }
    let c0 = (u0 - margin).floor().max(0.0) as u32;
    let c1 = ((u1 + margin).ceil().max(0.0) as u32).min(width.saturating_sub(1));
    let r0 = (v0 - margin).floor().max(0.0) as u32;
    let r1 = ((v1 + margin).ceil().max(0.0) as u32).min(height.saturating_sub(1));
    let inside = |q: [f64; 2]| -> bool {
        if hull.len() < 3 {
            return hull.iter().any(|p| (p[0] - q[0]).abs() <= margin && (p[1] - q[1]).abs() <= margin);
        }
        hull.iter().zip(hull.iter().cycle().skip(1)).all(|(a, b)| {
            let e = [b[0] - a[0], b[1] - a[1]];
            let len = e[0].hypot(e[1]);
            len == 0.0 || (e[0] * (q[1] - a[1]) - e[1] * (q[0] - a[0])) / len >= -margin
        })
    };
    for r in r0..=r1 {
        for c in c0..=c1 {
            if inside([c as f64, r as f64]) {
                paint(c, r);
            }
        }
    }
}

pub fn generate_synthetic_scene(cfg: &SynthConfig) -> SyntheticScene {
    let calib = Calibration::kitti_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objects = place_objects(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mut frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let boxes: Vec<Box3D> = objects.iter().map(|o| o.at(f)).collect();
        let hits = scan(cfg, &boxes);
        let mut points = Vec::with_capacity(hits.len());
        let mut point_objects = Vec::with_capacity(hits.len());
        let mut per_object: Vec<Vec<[f64; 2]>> = vec![Vec::new(); boxes.len()];
        for (p, obj) in hits {
            let p = if cfg.noise_sigma > 0.0 {
                [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng), p[2] + noise.sample(&mut rng)]
            } else {
                p
            };
            let pt = Point { x: p[0] as f32, y: p[1] as f32, z: p[2] as f32, r: 0.5 };
            if let Some(k) = obj {
                let proj = project_point(&calib, pt.xyz());
                if proj.valid {
                    per_object[k].push([proj.u, proj.v]);
                }
            }
            points.push(pt);
            point_objects.push(obj);
        }

        let mut visible: Vec<usize> = (0..boxes.len()).filter(|&k| per_object[k].len() >= cfg.min_hits).collect();
        let mut ids: Vec<u16> = (1..=visible.len() as u16).collect();
        ids.shuffle(&mut rng);
        // Paint far objects first so nearer ones occlude them.
        visible.sort_by(|&a, &b| {
            let ra = boxes[a].center[0].hypot(boxes[a].center[1]);
            let rb = boxes[b].center[0].hypot(boxes[b].center[1]);
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut map = InstanceMap::empty(IMAGE_WIDTH, IMAGE_HEIGHT);
        let mut instance_objects = BTreeMap::new();
        for (&k, &id) in visible.iter().zip(&ids) {
            let hull = convex_hull(per_object[k].clone());
            fill_hull(&hull, 0.75, IMAGE_WIDTH, IMAGE_HEIGHT, |c, r| map.set(c, r, id));
            instance_objects.insert(id, k);
        }
        let mut extent: BTreeMap<u16, (u32, u32, u32, u32)> = BTreeMap::new();
        for r in 0..IMAGE_HEIGHT {
            for c in 0..IMAGE_WIDTH {
                let id = map.get(c, r);
                if id != 0 {
                    let e = extent.entry(id).or_insert((c, r, c, r));
                    *e = (e.0.min(c), e.1.min(r), e.2.max(c), e.3.max(r));
                }
            }
        }
        let mut inst_boxes = Vec::new();
        for (&id, &(c0, r0, c1, r1)) in &extent {
            let bbox = Box2D::new(
                (c0 as f64 - 0.5).max(0.0),
                (r0 as f64 - 0.5).max(0.0),
                (c1 as f64 + 0.5).min(IMAGE_WIDTH as f64),
                (r1 as f64 + 0.5).min(IMAGE_HEIGHT as f64),
            )
            .expect("nonempty pixel extent");
            inst_boxes.push(InstanceBox { id, bbox, score: 0.9 });
        }
        // Objects fully painted over by nearer ones have no instance left.
        instance_objects.retain(|id, _| extent.contains_key(id));
        let mut truth_idx: Vec<usize> = instance_objects.values().copied().collect();
        truth_idx.sort_unstable();
        let instances =
            InstanceFrame { frame_id: f as u32, width: IMAGE_WIDTH, height: IMAGE_HEIGHT, boxes: inst_boxes, map };
        frames.push(SynthFrame {
            cloud: Arc::new(PointCloud { frame_id: f as u32, points }),
            instances: Arc::new(instances),
            truth: truth_idx.iter().map(|&k| boxes[k]).collect(),
            instance_objects,
            point_objects,
        });
    }
    SyntheticScene { config: cfg.clone(), calib, objects, frames }
}

pub const VELODYNE_DIR: &str = "velodyne";
pub const MASKS_DIR: &str = "masks";
pub const LABELS_DIR: &str = "labels";
pub const CALIB_FILE: &str = "calib.txt";
pub const DETECTIONS_FILE: &str = "detections2d.jsonl";
pub const CLOUD_FILE: &str = "cloud.jsonl";

pub fn frame_file(frame: u32, ext: &str) -> String {
    format!("{frame:06}.{ext}")
}

/// Writes the scene in the on-disk sequence layout under `dir`.
pub fn write_bundle(scene: &SyntheticScene, dir: &Path) -> dataset::Result<()> {
    dataset::write_file(&dir.join(CALIB_FILE), scene.calib.to_text())?;
    let mut records = String::new();
    for f in &scene.frames {
        let id = f.cloud.frame_id;
        dataset::write_file(&dir.join(VELODYNE_DIR).join(frame_file(id, "bin")), encode_point_cloud(&f.cloud))?;
        dataset::write_file(&dir.join(MASKS_DIR).join(frame_file(id, "imap")), encode_instance_map(&f.instances.map))?;
        records.push_str(&serde_json::to_string(&f.instances.to_record())?);
        records.push('\n');
        let mut labels = String::new();
        for b in &f.truth {
            let image_box = crate::geometry::project_box3d_to_2d(b, &scene.calib, IMAGE_WIDTH, IMAGE_HEIGHT);
            labels.push_str(&format_label("Car", b, image_box.as_ref(), &scene.calib));
            labels.push('\n');
        }
        dataset::write_file(&dir.join(LABELS_DIR).join(frame_file(id, "txt")), labels)?;
    }
    dataset::write_file(&dir.join(DETECTIONS_FILE), records)?;
    let mut cloud = String::new();
    for det in scene.cloud_store().values() {
        cloud.push_str(&format_cloud_line(det));
        cloud.push('\n');
    }
    dataset::write_file(&dir.join(CLOUD_FILE), cloud)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_objects_means_empty_frames() {
        let scene = generate_synthetic_scene(&SynthConfig { frames: 3, objects: 0, ..SynthConfig::default() });
        assert_eq!(scene.frames.len(), 3);
        for f in &scene.frames {
            assert!(f.truth.is_empty());
            assert!(f.instances.boxes.is_empty());
            assert!(f.point_objects.iter().all(Option::is_none));
        }
    }

    #[test]
    fn noiseless_points_lie_on_faces() {
        let cfg = SynthConfig {
            frames: 1,
            objects: 1,
            noise_sigma: 0.0,
            include_ground: false,
            speed: [0.0, 0.0],
            ..SynthConfig::default()
        };
        let scene = generate_synthetic_scene(&cfg);
        let b = scene.objects[0].start;
        let (s, c) = b.theta.sin_cos();
        let f = &scene.frames[0];
        assert!(!f.cloud.points.is_empty());
        for p in &f.cloud.points {
            let d = [p.x as f64 - b.center[0], p.y as f64 - b.center[1], p.z as f64 - b.center[2]];
            let local = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
            // Distance to the nearest face plane.
            let resid = (0..3).map(|k| (local[k].abs() - 0.5 * b.size[k]).abs()).fold(f64::MAX, f64::min);
            assert!(resid < 1e-5, "residual {resid}");
        }
    }

    #[test]
    fn masks_agree_with_points() {
        let scene = generate_synthetic_scene(&SynthConfig { frames: 4, objects: 3, seed: 5, ..SynthConfig::default() });
        let (mut own, mut total) = (0usize, 0usize);
        for f in &scene.frames {
            let by_object: BTreeMap<usize, u16> = f.instance_objects.iter().map(|(&id, &k)| (k, id)).collect();
            for (p, obj) in f.cloud.points.iter().zip(&f.point_objects) {
                let Some(k) = obj else { continue };
                let Some(&id) = by_object.get(k) else { continue };
                let proj = project_point(&scene.calib, p.xyz());
                total += 1;
                if proj.valid && f.instances.map.lookup(proj.u, proj.v) == Some(id) {
                    own += 1;
                }
            }
        }
        assert!(total > 0);
        assert!(own as f64 >= 0.99 * total as f64, "{own}/{total}");
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SynthConfig { frames: 2, seed: 9, ..SynthConfig::default() };
        let a = generate_synthetic_scene(&cfg);
        let b = generate_synthetic_scene(&cfg);
        assert_eq!(a.frames[1].cloud, b.frames[1].cloud);
        assert_eq!(a.frames[1].instances, b.frames[1].instances);
    }

    #[test]
    fn bundle_round_trips_through_loaders() {
        let scene = generate_synthetic_scene(&SynthConfig { frames: 2, seed: 1, ..SynthConfig::default() });
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&scene, dir.path()).unwrap();
        let pc = dataset::load_point_cloud(&dir.path().join(VELODYNE_DIR).join(frame_file(1, "bin"))).unwrap();
        assert_eq!(&pc, scene.frames[1].cloud.as_ref());
        let store = dataset::load_cloud_store(&dir.path().join(CLOUD_FILE)).unwrap();
        assert_eq!(store, scene.cloud_store());
        let calib = dataset::load_calibration(&dir.path().join(CALIB_FILE)).unwrap();
        let labels = dataset::load_labels(&dir.path().join(LABELS_DIR).join(frame_file(0, "txt")), &calib).unwrap();
        assert_eq!(labels.len(), scene.frames[0].truth.len());
        for (l, t) in labels.iter().zip(&scene.frames[0].truth) {
            assert!(crate::geometry::iou_3d(&l.bbox, t) > 0.999);
        }
    }
}
