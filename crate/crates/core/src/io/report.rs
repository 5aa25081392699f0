//! Evaluation reports: a JSON summary plus a per-instance CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::atomic_write;
use crate::error::{Error, Result};
use crate::eval::{worst_k, EvalMode, EvalReport, GtEntry, MatchPolicy};

/// mIoU as printed everywhere: four decimals.
pub fn format_miou(miou: f64) -> String {
    format!("{miou:.4}")
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    miou: String,
    miou_exact: f64,
    total_gt_count: usize,
    mode: EvalMode,
    policy: MatchPolicy,
    per_image_sum: &'a std::collections::BTreeMap<String, f64>,
    worst: Vec<GtEntry>,
    per_gt: &'a [GtEntry],
}

/// JSON summary including the `worst` lowest-IoU ground-truth instances.
pub fn render_report(report: &EvalReport, worst: usize) -> String {
    let doc = ReportDoc {
        miou: format_miou(report.miou),
        miou_exact: report.miou,
        total_gt_count: report.total_gt_count,
        mode: report.mode,
        policy: report.policy,
        per_image_sum: &report.per_image_sum,
        worst: worst_k(report, worst),
        per_gt: &report.per_gt,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("plain data serializes");
    text.push('\n');
    text
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from("image_id,gt_instance_id,best_source,best_instance_id,best_iou\n");
    for e in &report.per_gt {
        let (source, id) = match &e.best_pred {
            Some(p) => (csv_field(&p.source), p.instance_id.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(&e.image_id),
            e.gt_instance_id,
            source,
            id,
            e.best_iou
        );
    }
    out
}

/// Writes `path` (JSON) and the same path with a `.csv` extension.
pub fn write_report(report: &EvalReport, path: &Path, worst: usize) -> Result<()> {
    if report.total_gt_count == 0 {
        return Err(Error::NoGroundTruth);
    }
    atomic_write(path, render_report(report, worst).as_bytes())?;
    atomic_write(&path.with_extension("csv"), render_csv(report).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate_dataset, EvalOptions};
    use crate::instance::{ClassLabel, Instance, PredictionSet};
    use crate::mask::BinaryMask;

    fn fixture() -> EvalReport {
        let mut gt = PredictionSet::new("img", "gt", 100, 100);
        gt.instances.push(Instance::new(0, ClassLabel::WholeCell, BinaryMask::full(100, 100).unwrap(), 1.0, "gt"));
        let mut pred = PredictionSet::new("img", "m", 100, 100);
        let sub = BinaryMask::from_fn(100, 100, |r, c| (c * 100 + r) < 9389).unwrap();
        assert_eq!(sub.area(), 9389);
        pred.instances.push(Instance::new(7, ClassLabel::WholeCell, sub, 0.9, "m"));
        evaluate_dataset(&[gt], &[pred], EvalOptions::default()).unwrap()
    }

    #[test]
    fn four_decimal_formatting() {
        assert_eq!(format_miou(fixture().miou), "0.9389");
        assert_eq!(format_miou(1.0), "1.0000");
        assert_eq!(format_miou(0.0), "0.0000");
    }

    #[test]
    fn report_and_csv() {
        let report = fixture();
        let json: serde_json::Value = serde_json::from_str(&render_report(&report, 5)).unwrap();
        assert_eq!(json["miou"], "0.9389");
        assert_eq!(json["total_gt_count"], 1);
        assert_eq!(json["worst"].as_array().unwrap().len(), 1);
        let csv = render_csv(&report);
        assert_eq!(csv.lines().nth(1).unwrap(), "img,0,m,7,0.9389");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_report(&report, &path, 3).unwrap();
        assert!(path.exists() && dir.path().join("report.csv").exists());
    }
}
