//! Box estimation on synthetic LiDAR scans of moving cars.

use std::collections::BTreeMap;

use edgelift::dataset::{Point, PointCloud};
use edgelift::geometry::{iou_3d, Box3D};
use edgelift::synth::{generate_synthetic_scene, SynthConfig, SyntheticScene};
use edgelift::transform::{transform_frame, EstimateMethod, TrackRef, TransformParams};

fn scene(seed: u64, speed: f64) -> SyntheticScene {
    generate_synthetic_scene(&SynthConfig {
        frames: 2,
        objects: 3,
        seed,
        speed: [speed, speed],
        ..SynthConfig::default()
    })
}

/// IoU of every box estimated in frame 1 against the truth, with each
/// instance either tracked from its frame 0 truth or new.
fn frame1_ious(scene: &SyntheticScene, tracked: bool, avg_size: Option<[f64; 3]>) -> Vec<(u16, f64, EstimateMethod)> {
    let f = &scene.frames[1];
    let object = |id: &u16| &scene.objects[f.instance_objects[id]];
    let refs: BTreeMap<u16, TrackRef> = if tracked {
        f.instance_objects.keys().map(|id| (*id, TrackRef { bbox: object(id).at(0), centroid: None })).collect()
    } else {
        BTreeMap::new()
    };
    let params = TransformParams::default();
    let out =
        transform_frame(&f.cloud, &f.instances, &scene.calib, &refs, avg_size.unwrap_or([3.9, 1.6, 1.56]), &params);
    out.boxes.iter().map(|e| (e.instance_id, iou_3d(&e.bbox, &object(&e.instance_id).at(1)), e.method)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn tracked_box_follows_a_one_meter_move() {
    let mut all = Vec::new();
    for seed in 0..10 {
        for (_, iou, method) in frame1_ious(&scene(seed, 1.0), true, None) {
            assert_eq!(method, EstimateMethod::Tracked);
            all.push(iou);
        }
    }
    assert!(all.len() >= 20, "too few visible objects: {}", all.len());
    let m = mean(&all);
    assert!(m >= 0.6, "mean IoU {m:.3} over {all:?}");
}

#[test]
fn stationary_tracked_box_stays_put() {
    let mut all = Vec::new();
    for seed in 0..10 {
        all.extend(frame1_ious(&scene(seed, 0.0), true, None).into_iter().map(|(_, iou, _)| iou));
    }
    let m = mean(&all);
    assert!(m >= 0.9, "mean IoU {m:.3} over {all:?}");
}

#[test]
fn new_box_with_true_size_overlaps_truth() {
    let mut all = Vec::new();
    for seed in 0..10 {
        let s = scene(seed, 0.5);
        // One run per object, each given that car's own dimensions.
        for (id, &k) in &s.frames[1].instance_objects {
            let size = s.objects[k].start.size;
            let Some(&(_, iou, method)) = frame1_ious(&s, false, Some(size)).iter().find(|e| e.0 == *id) else {
                continue;
            };
            assert_eq!(method, EstimateMethod::New);
            all.push(iou);
        }
    }
    let m = mean(&all);
    assert!(m >= 0.5, "mean IoU {m:.3} over {all:?}");
}

#[test]
fn two_point_cluster_takes_the_fallback() {
    let s = scene(1, 1.0);
    let f = &s.frames[1];
    let (&id, &k) = f.instance_objects.iter().next().unwrap();
    let keep: Vec<Point> =
        f.cloud.points.iter().zip(&f.point_objects).filter(|(_, o)| **o == Some(k)).map(|(p, _)| *p).take(2).collect();
    assert_eq!(keep.len(), 2);
    let cloud = PointCloud { frame_id: 1, points: keep };
    let prev: Box3D = s.objects[k].at(0);
    let refs = BTreeMap::from([(id, TrackRef { bbox: prev, centroid: None })]);
    let out = transform_frame(&cloud, &f.instances, &s.calib, &refs, [3.9, 1.6, 1.56], &TransformParams::default());
    let est = out.boxes.iter().find(|e| e.instance_id == id).unwrap();
    assert_eq!(est.method, EstimateMethod::Fallback);
    assert_eq!(est.bbox, prev);
    assert!(out.diagnostics.iter().any(|d| d.instance_id == id));
}
