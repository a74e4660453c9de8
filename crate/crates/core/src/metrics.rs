//! Per-class IoU, majority voting and report formatting.

use crate::raster::{Class, LabelMask};
use crate::{CoreError, Result};
use std::fmt::Write as _;

/// Pixel counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
}

impl ClassCounts {
    /// IoU; a class absent from both masks scores 1.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// Indexed by class id.
    pub counts: [ClassCounts; Class::COUNT],
    /// Indexed by class id.
    pub confusion: [[u64; Class::COUNT]; Class::COUNT],
}

impl IouReport {
    pub fn class_iou(&self, class: Class) -> f64 {
        self.counts[class.id() as usize].iou()
    }

    /// Mean IoU over the foreground classes.
    pub fn overall(&self) -> f64 {
        Class::FOREGROUND.iter().map(|&c| self.class_iou(c)).sum::<f64>() / Class::FOREGROUND.len() as f64
    }

    pub fn foreground_ious(&self) -> [f64; 3] {
        Class::FOREGROUND.map(|c| self.class_iou(c))
    }
}

/// Compares a prediction against ground truth. `confusion[t][p]` counts
/// pixels of true class `t` predicted as `p`.
pub fn iou(prediction: &LabelMask, truth: &LabelMask) -> Result<IouReport> {
    if prediction.height() != truth.height() || prediction.width() != truth.width() {
        return Err(CoreError::invalid(format!(
            "iou: prediction is {}x{} but ground truth is {}x{}",
            prediction.height(),
            prediction.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut confusion = [[0u64; Class::COUNT]; Class::COUNT];
    for (&p, &t) in prediction.ids().iter().zip(truth.ids()) {
        confusion[t as usize][p as usize] += 1;
    }
    let counts = std::array::from_fn(|k| {
        let predicted: u64 = (0..Class::COUNT).map(|t| confusion[t][k]).sum();
        let actual: u64 = confusion[k].iter().sum();
        let intersection = confusion[k][k];
        ClassCounts {
            intersection,
            union: predicted + actual - intersection,
        }
    });
    Ok(IouReport { counts, confusion })
}

/// Per-pixel mode of several predictions; ties go to the smallest class id.
pub fn majority_vote(masks: &[LabelMask]) -> Result<LabelMask> {
    let first = masks
        .first()
        .ok_or_else(|| CoreError::invalid("majority vote of zero masks"))?;
    let (h, w) = (first.height(), first.width());
    if let Some(m) = masks.iter().find(|m| m.height() != h || m.width() != w) {
        return Err(CoreError::invalid(format!(
            "majority vote: mask is {}x{}, expected {h}x{w}",
            m.height(),
            m.width()
        )));
    }
    let data = (0..h * w)
        .map(|i| {
            let mut votes = [0usize; Class::COUNT];
            for m in masks {
                votes[m.ids()[i] as usize] += 1;
            }
            // first maximum wins, so ties resolve to the lower id
            let mut best = 0;
            for k in 1..Class::COUNT {
                if votes[k] > votes[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, data)
}

/// Foreground and overall IoU averaged over repeated runs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub runs: usize,
    pub class_mean: [f64; 3],
    pub overall_mean: f64,
    pub overall_std: f64,
}

pub fn mean_iou_over_runs(reports: &[IouReport]) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(CoreError::invalid("no runs to average"));
    }
    let n = reports.len() as f64;
    let mut class_mean = [0.0; 3];
    for r in reports {
        for (m, v) in class_mean.iter_mut().zip(r.foreground_ious()) {
            *m += v / n;
        }
    }
    let overall: Vec<f64> = reports.iter().map(IouReport::overall).collect();
    let overall_mean = overall.iter().sum::<f64>() / n;
    let overall_std = (overall.iter().map(|v| (v - overall_mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(RunSummary {
        runs: reports.len(),
        class_mean,
        overall_mean,
        overall_std,
    })
}

/// Aligned text table, IoU in percent.
pub fn format_table(rows: &[(&str, &IouReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>9} {:>9} {:>9} {:>9}",
        "method", "building", "road", "tree", "Overall"
    );
    for (name, report) in rows {
        let [b, r, t] = report.foreground_ious();
        let _ = writeln!(
            out,
            "{:<16} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
            name,
            b * 100.0,
            r * 100.0,
            t * 100.0,
            report.overall() * 100.0
        );
    }
    out
}

/// CSV with one row per report, IoU as fractions.
pub fn format_csv(rows: &[(&str, &IouReport)]) -> String {
    let mut out = String::from("method,building,road,tree,overall\n");
    for (name, report) in rows {
        let [b, r, t] = report.foreground_ious();
        let _ = writeln!(out, "{name},{b:.6},{r:.6},{t:.6},{:.6}", report.overall());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, ids: &[u8]) -> LabelMask {
        LabelMask::new(h, w, ids.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let m = mask(2, 2, &[0, 1, 2, 3]);
        let r = iou(&m, &m).unwrap();
        assert_eq!(r.overall(), 1.0);
    }

    #[test]
    fn absent_classes_score_one() {
        let m = mask(1, 3, &[0, 0, 1]);
        let r = iou(&m, &m).unwrap();
        assert_eq!(r.class_iou(Class::Road), 1.0);
        assert_eq!(r.class_iou(Class::Tree), 1.0);
    }

    #[test]
    fn partial_overlap() {
        let pred = mask(1, 4, &[1, 1, 0, 0]);
        let truth = mask(1, 4, &[1, 0, 1, 0]);
        let r = iou(&pred, &truth).unwrap();
        assert!((r.class_iou(Class::Building) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.confusion[1][0], 1);
        assert_eq!(r.confusion[0][1], 1);
        assert!((r.overall() - (1.0 / 3.0 + 2.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(iou(&mask(1, 2, &[0, 0]), &mask(2, 1, &[0, 0])).is_err());
    }

    #[test]
    fn vote_tie_goes_to_lower_id() {
        let v = majority_vote(&[mask(1, 2, &[3, 2]), mask(1, 2, &[1, 2]), mask(1, 2, &[3, 1])]).unwrap();
        assert_eq!(v.ids(), &[3, 2]);
        let tie = majority_vote(&[mask(1, 1, &[3]), mask(1, 1, &[2])]).unwrap();
        assert_eq!(tie.ids(), &[2]);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn run_summary_and_formats() {
        let a = iou(&mask(1, 2, &[1, 0]), &mask(1, 2, &[1, 1])).unwrap();
        let b = iou(&mask(1, 2, &[1, 1]), &mask(1, 2, &[1, 1])).unwrap();
        let s = mean_iou_over_runs(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.runs, 2);
        assert!((s.class_mean[0] - 0.75).abs() < 1e-15);
        let table = format_table(&[("none", &a), ("colormapgan", &b)]);
        assert!(table.lines().next().unwrap().contains("Overall"));
        assert!(table.contains("100.00"));
        let csv = format_csv(&[("none", &a)]);
        assert_eq!(csv.lines().nth(1).unwrap(), "none,0.500000,1.000000,1.000000,0.833333");
    }
}
