//! End-to-end runs of the edge pipeline over synthetic sequences.

use std::collections::BTreeMap;

use edgelift::config::RunConfig;
use edgelift::dataset::{self, BandwidthTrace, CloudDetections};
use edgelift::geometry::iou_3d;
use edgelift::pipeline::{self, run_pipeline, CloudBackend, PipelineParams, Sequence};
use edgelift::scheduler::{recompute, History, HistoryEntry, OffloadDecision, RecomputeContext};
use edgelift::synth::{generate_synthetic_scene, write_bundle, SynthConfig};

#[test]
fn bundle_on_disk_runs_like_the_scene_in_memory() {
    let scene = generate_synthetic_scene(&SynthConfig { frames: 12, seed: 8, ..SynthConfig::default() });
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&scene, dir.path()).unwrap();
    let trace = BandwidthTrace::constant("c", 15.0).unwrap();
    std::fs::write(dir.path().join("trace.csv"), dataset::format_bandwidth_trace(&trace)).unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, RunConfig { trace: Some("trace.csv".into()), ..RunConfig::default() }.to_toml()).unwrap();

    let cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.validate().unwrap();
    let seq = Sequence::load(&cfg.paths).unwrap();
    let mut backend = pipeline::backend_from_config(&cfg).unwrap();
    let from_disk = run_pipeline(&seq, &PipelineParams::from(&cfg), &mut backend).unwrap();

    let mut memory = CloudBackend::Simulated { trace, store: scene.cloud_store() };
    let in_memory = run_pipeline(&Sequence::from(&scene), &PipelineParams::default(), &mut memory).unwrap();
    assert_eq!(from_disk.ledger, in_memory.ledger);
    assert_eq!(from_disk.detections.len(), 12);
    for (f, boxes) in &in_memory.detections {
        let disk = &from_disk.detections[f];
        assert_eq!(disk.len(), boxes.len(), "frame {f}");
        for (a, b) in disk.iter().zip(boxes) {
            assert!(iou_3d(a, b) > 0.999, "frame {f}: {a:?} vs {b:?}");
        }
    }

    // Labels pass through the camera frame on the way to disk.
    let labels = pipeline::load_labels_for(&seq, &cfg.paths.labels).unwrap();
    for (f, truth) in scene.labels() {
        assert_eq!(labels[&f].len(), truth.len());
        for (a, b) in labels[&f].iter().zip(&truth) {
            assert!(iou_3d(a, b) > 0.95, "frame {f}");
        }
    }
}

#[test]
fn failed_test_triggers_recompute_equal_to_a_rerun() {
    let scene = generate_synthetic_scene(&SynthConfig { frames: 14, seed: 6, ..SynthConfig::default() });
    let seq = Sequence::from(&scene);
    // The cloud result for frame 4 is off by 2.5 m, so its test fails.
    let mut store = scene.cloud_store();
    let bad: Vec<_> = store[&4]
        .boxes
        .iter()
        .map(|b| dataset::ScoredBox { bbox: b.bbox.translated([2.5, 0.0, 0.0]), score: b.score })
        .collect();
    store.insert(4, CloudDetections { frame_id: 4, boxes: bad.clone() });
    let params = PipelineParams::default();
    let mut backend =
        CloudBackend::Simulated { trace: BandwidthTrace::constant("c", 40.0).unwrap(), store: store.clone() };
    let out = run_pipeline(&seq, &params, &mut backend).unwrap();

    let test = out.tests.iter().find(|t| t.frame == 4).expect("frame 4 was tested");
    assert!(test.f1 < params.scheduler.q_t, "test f1 {}", test.f1);
    let anchor = out
        .ledger
        .iter()
        .find(|r| r.frame > 4 && r.decision == OffloadDecision::AnchorOffload)
        .expect("an anchor follows the failed test")
        .frame;
    assert_eq!(anchor as u32, test.delivered_at);

    let revised: Vec<usize> = out.ledger.iter().filter(|r| r.revised).map(|r| r.frame).collect();
    assert_eq!(revised, (5..anchor).collect::<Vec<_>>());
    assert_eq!(out.revisions.keys().map(|&f| f as usize).collect::<Vec<_>>(), revised);

    // Rerun frames 4 to anchor - 1 from scratch, seeded with the bad result.
    let mut history = History::new(64);
    for f in &seq.frames[4..anchor] {
        history.push(HistoryEntry {
            frame_idx: f.cloud.frame_id as usize,
            cloud: f.cloud.clone(),
            instances: f.instances.clone(),
        });
    }
    // The size prior is the running mean over cloud boxes seen so far: the
    // bootstrap anchor, the failed test and the current anchor.
    let mut sum = [0.0; 3];
    let mut n = 0;
    for f in [0, 4, anchor as u32] {
        for b in &store[&f].boxes {
            for (acc, v) in sum.iter_mut().zip(b.bbox.size) {
                *acc += v;
            }
            n += 1;
        }
    }
    let ctx = RecomputeContext {
        calib: &seq.calib,
        tracker: params.tracker,
        transform: &params.transform,
        avg_size: sum.map(|s| s / n as f64),
    };
    let bad_boxes: Vec<_> = bad.iter().map(|b| b.bbox).collect();
    let rerun = recompute(&history, 4, &bad_boxes, anchor - 1, &ctx).unwrap();
    let rerun: BTreeMap<u32, _> = rerun.into_iter().map(|(f, b)| (f as u32, b)).collect();
    assert_eq!(out.revisions, rerun);
}
