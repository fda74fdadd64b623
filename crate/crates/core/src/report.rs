//! Run artifacts: `eval.json`, `ledger.csv` and a short `summary.txt`.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{self, Calibration, DatasetError};
use crate::eval::{EvalReport, LatencySummary};
use crate::geometry::{project_box3d_to_2d, Box3D};
use crate::scheduler::{ledger_csv, LedgerRow, OffloadDecision};
use crate::synth::frame_file;

pub const EVAL_FILE: &str = "eval.json";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const DETS_DIR: &str = "dets";

pub fn summary_text(report: &EvalReport, ledger: &[LedgerRow]) -> String {
    let a = &report.aggregate;
    let mut s = String::new();
    let _ = writeln!(s, "frames evaluated: {}", report.frames.len());
    let _ = writeln!(s, "iou threshold: {}", report.iou_threshold);
    let _ = writeln!(s, "tp {} fp {} fn {}", a.tp, a.fp, a.fn_);
    let _ = writeln!(s, "precision {:.4} recall {:.4} f1 {:.4}", a.precision, a.recall, a.f1);
    let _ = writeln!(s, "mean tp iou {:.4}", a.mean_iou);
    for d in
        [OffloadDecision::AnchorOffload, OffloadDecision::TestOffload, OffloadDecision::Local, OffloadDecision::Dropped]
    {
        let n = ledger.iter().filter(|r| r.decision == d).count();
        let _ = writeln!(s, "{d} frames: {n}");
    }
    let _ = writeln!(s, "revised frames: {}", ledger.iter().filter(|r| r.revised).count());
    match &report.latency {
        Some(l) => {
            let _ = writeln!(s, "latency mean {:.4} s p50 {:.4} s p99 {:.4} s", l.mean_s, l.p50_s, l.p99_s);
        }
        None => s.push_str("latency: no frames\n"),
    }
    s
}

/// Writes the three report files into `out_dir`, overwriting old ones.
/// The latency summary is taken from `ledger`.
pub fn write_report(report: &EvalReport, ledger: &[LedgerRow], out_dir: &Path) -> Result<EvalReport, DatasetError> {
    let mut report = report.clone();
    report.latency = LatencySummary::from_ledger(ledger);
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    dataset::write_file(&out_dir.join(EVAL_FILE), json)?;
    dataset::write_file(&out_dir.join(LEDGER_FILE), ledger_csv(ledger))?;
    dataset::write_file(&out_dir.join(SUMMARY_FILE), summary_text(&report, ledger))?;
    Ok(report)
}

/// Writes per-frame boxes as label files under `dir`, readable by the evaluator.
pub fn write_detections(
    dets: &std::collections::BTreeMap<u32, Vec<Box3D>>,
    calib: &Calibration,
    width: u32,
    height: u32,
    dir: &Path,
) -> Result<(), DatasetError> {
    for (&frame, boxes) in dets {
        let mut text = String::new();
        for b in boxes {
            let image_box = project_box3d_to_2d(b, calib, width, height);
            text.push_str(&dataset::format_label("Car", b, image_box.as_ref(), calib));
            text.push('\n');
        }
        dataset::write_file(&dir.join(frame_file(frame, "txt")), text)?;
    }
    Ok(())
}
