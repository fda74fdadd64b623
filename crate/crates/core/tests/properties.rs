//! Property tests for the invariants of each module.

use std::collections::BTreeMap;

use proptest::prelude::*;

use edgelift::cloud::{decode_boxes, encode_boxes};
use edgelift::dataset::{
    decode_point_cloud, encode_point_cloud, format_cloud_line, parse_cloud_line, BandwidthTrace, CloudDetections,
    Point, PointCloud, ScoredBox,
};
use edgelift::eval::match_frame;
use edgelift::geometry::{iou_2d, iou_3d, points_in_box, Box2D, Box3D};
use edgelift::scheduler::{transmission_time, OffloadDecision, Scheduler, SchedulerConfig};
use edgelift::tracking::{associate, hungarian_solve};
use edgelift::transform::{estimate_heading, filtration_mask, FiltrationParams, HeadingCase};

fn box3d() -> impl Strategy<Value = Box3D> {
    (-20.0..20.0f64, -20.0..20.0f64, -2.0..1.0f64, 0.5..5.0f64, 0.5..3.0f64, 0.5..2.5f64, -3.2..3.2f64)
        .prop_map(|(x, y, z, l, w, h, t)| Box3D::new([x, y, z], [l, w, h], t).unwrap())
}

fn box2d() -> impl Strategy<Value = Box2D> {
    (0.0..200.0f64, 0.0..100.0f64, 1.0..80.0f64, 1.0..60.0f64)
        .prop_map(|(x, y, w, h)| Box2D::new(x, y, x + w, y + h).unwrap())
}

fn point3() -> impl Strategy<Value = [f64; 3]> {
    (-60.0..60.0f64, -60.0..60.0f64, -3.0..2.0f64).prop_map(|(x, y, z)| [x, y, z])
}

proptest! {
    #[test]
    fn iou_3d_is_symmetric_and_bounded(a in box3d(), b in box3d()) {
        let ab = iou_3d(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - iou_3d(&b, &a)).abs() < 1e-9);
        prop_assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_2d_is_symmetric_and_bounded(a in box2d(), b in box2d()) {
        let ab = iou_2d(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - iou_2d(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn box_center_is_inside(b in box3d()) {
        let (n, mask) = points_in_box(&[b.center], &b);
        prop_assert_eq!(n, 1);
        prop_assert!(mask[0]);
    }

    #[test]
    fn filtration_keeps_a_nonempty_subset(pts in prop::collection::vec(point3(), 1..200)) {
        let p = FiltrationParams::default();
        let trace = filtration_mask(&pts, &p).unwrap();
        prop_assert_eq!(trace.mask.len(), pts.len());
        prop_assert!(trace.mask[trace.critical]);
        prop_assert!(trace.iterations >= 1 && trace.iterations <= p.max_iter);
        let c = pts[trace.critical];
        for (q, &m) in pts.iter().zip(&trace.mask) {
            let d = ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2) + (q[2] - c[2]).powi(2)).sqrt();
            prop_assert_eq!(m, d < p.f_t);
        }
    }

    #[test]
    fn heading_stays_within_gate_of_previous(a in -3.1..3.1f64, b in -3.1..3.1f64) {
        let xi = 30f64.to_radians();
        let v = [a.cos(), a.sin()];
        let prev = [b.cos(), b.sin()];
        let (h, case) = estimate_heading(v, prev, xi).unwrap();
        prop_assert!((h[0].hypot(h[1]) - 1.0).abs() < 1e-9);
        let ang = (h[0] * prev[0] + h[1] * prev[1]).clamp(-1.0, 1.0).acos();
        match case {
            HeadingCase::Parallel => prop_assert!(ang <= xi + 1e-9),
            // The closer quarter turn is never more than 90 degrees from the previous heading.
            HeadingCase::Perpendicular => prop_assert!(ang <= std::f64::consts::FRAC_PI_2 - xi + 1e-9),
        }
    }

    #[test]
    fn hungarian_returns_a_permutation(cost in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 5), 5)) {
        let assign = hungarian_solve(&cost);
        let mut seen = assign.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn association_is_one_to_one(tracks in prop::collection::vec(box2d(), 0..8), dets in prop::collection::vec(box2d(), 0..8)) {
        let r = associate(&tracks, &dets, 0.3);
        prop_assert_eq!(r.matches.len() + r.unmatched_tracks.len(), tracks.len());
        prop_assert_eq!(r.matches.len() + r.unmatched_detections.len(), dets.len());
        let mut t: Vec<usize> = r.matches.iter().map(|m| m.0).chain(r.unmatched_tracks.iter().copied()).collect();
        t.sort_unstable();
        prop_assert_eq!(t, (0..tracks.len()).collect::<Vec<_>>());
    }

    #[test]
    fn match_count_ignores_detection_order(dets in prop::collection::vec(box3d(), 0..6), gts in prop::collection::vec(box3d(), 0..6)) {
        let m = match_frame(&dets, &gts, 0.4);
        let rev: Vec<Box3D> = dets.iter().rev().copied().collect();
        let r = match_frame(&rev, &gts, 0.4);
        prop_assert_eq!(m.tp, r.tp);
        prop_assert_eq!(m.tp + m.fp, dets.len());
        prop_assert_eq!(m.tp + m.fn_, gts.len());
    }

    #[test]
    fn ledger_is_conserved(fails in prop::collection::vec(any::<bool>(), 30), waits in prop::collection::vec(0.0..2.0f64, 30)) {
        let cfg = SchedulerConfig::default();
        let mut s = Scheduler::new(cfg);
        let mut fails = fails.into_iter();
        let mut latched = false;
        for (f, &wait) in waits.iter().enumerate() {
            let d = s.decide(f, f as f64 * 0.1).unwrap();
            // A latched trigger turns the very next frame into an anchor.
            prop_assert_eq!(latched, f > 0 && d == OffloadDecision::AnchorOffload);
            s.account_frame(f, d, cfg.onboard_s, wait);
            latched = false;
            if d == OffloadDecision::TestOffload {
                let f1 = if fails.next().unwrap() { 0.2 } else { 1.0 };
                s.on_test_result(f, f1).unwrap();
                latched = s.anchor_pending();
            }
        }
        for r in s.ledger() {
            prop_assert_eq!(r.total_s, r.onboard_s + r.wait_s);
            if r.decision != OffloadDecision::AnchorOffload {
                prop_assert_eq!(r.wait_s, 0.0);
            }
        }
    }

    #[test]
    fn transmission_time_is_additive(bytes in 1usize..5_000_000, split in 0.0..1.0f64, t0 in 0.0..10.0f64,
                                      rates in prop::collection::vec(1.0..40.0f64, 1..6)) {
        let trace = BandwidthTrace::new("p", rates.iter().enumerate().map(|(i, &r)| (i as f64 * 0.5, r)).collect()).unwrap();
        let whole = transmission_time(bytes, &trace, t0);
        let first = ((bytes as f64) * split) as usize;
        let t1 = transmission_time(first, &trace, t0);
        let t2 = transmission_time(bytes - first, &trace, t0 + t1);
        prop_assert!((whole - (t1 + t2)).abs() < 1e-6);
        prop_assert!(whole > 0.0);
    }

    #[test]
    fn point_cloud_bytes_round_trip(pts in prop::collection::vec((-80.0..80.0f32, -80.0..80.0f32, -5.0..5.0f32, 0.0..1.0f32), 0..100)) {
        let pc = PointCloud { frame_id: 3, points: pts.into_iter().map(|(x, y, z, r)| Point { x, y, z, r }).collect() };
        prop_assert_eq!(decode_point_cloud(&encode_point_cloud(&pc), 3).unwrap(), pc);
    }

    #[test]
    fn cloud_boxes_round_trip_at_f32(boxes in prop::collection::vec((box3d(), 0.0..1.0f64), 0..10)) {
        let det = CloudDetections { frame_id: 9, boxes: boxes.into_iter().map(|(bbox, score)| ScoredBox { bbox, score }).collect() };
        let line = parse_cloud_line(&format_cloud_line(&det)).unwrap();
        let wire = decode_boxes(&encode_boxes(&det.boxes), 9).unwrap();
        prop_assert_eq!(&line, &wire);
        // Once at f32 precision, both encodings are exact.
        prop_assert_eq!(parse_cloud_line(&format_cloud_line(&line)).unwrap(), line.clone());
        prop_assert_eq!(decode_boxes(&encode_boxes(&line.boxes), 9).unwrap(), line);
    }
}

#[test]
fn evaluate_rejects_unaligned_frames() {
    let d: BTreeMap<u32, Vec<Box3D>> = BTreeMap::from([(0, vec![])]);
    let l: BTreeMap<u32, Vec<Box3D>> = BTreeMap::from([(1, vec![])]);
    assert!(edgelift::eval::evaluate(&d, &l, 0.4).is_err());
}
