//! Pixelwise confusion counts and the metrics derived from them.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fp, "precision")
    }

    pub fn recall(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fn_, "recall")
    }

    /// Harmonic mean of precision and recall.
    pub fn f1(&self) -> Result<f64> {
        f1_from_precision_recall(self.precision()?, self.recall()?)
    }

    pub fn iou(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fp + self.fn_, "iou")
    }

    pub fn scores(&self) -> Scores {
        Scores {
            iou: self.iou().ok(),
            f1: self.f1().ok(),
            precision: self.precision().ok(),
            recall: self.recall().ok(),
        }
    }
}

/// F1 implied by precision and recall.
pub fn f1_from_precision_recall(precision: f64, recall: f64) -> Result<f64> {
    if precision + recall == 0.0 {
        return Err(Error::UndefinedMetric("f1"));
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// F1 implied by IoU on the same confusion counts (`F1 = 2J / (1 + J)`).
pub fn f1_from_iou(iou: f64) -> f64 {
    2.0 * iou / (1.0 + iou)
}

fn ratio(num: u64, den: u64, what: &'static str) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedMetric(what));
    }
    Ok(num as f64 / den as f64)
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// All four metrics; `None` marks an undefined value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Formats an optional metric, writing `nan` for undefined values.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

fn is_foreground(v: f32) -> Result<bool> {
    match v {
        0.0 => Ok(false),
        255.0 => Ok(true),
        other => Err(Error::NonBinaryInput(other as f64)),
    }
}

/// Adds the per-pixel confusion of `pred` against `truth` (single band, values 0/255).
pub fn accumulate(pred: &RasterGrid, truth: &RasterGrid, counts: ConfusionCounts) -> Result<ConfusionCounts> {
    if !pred.same_dims(truth) || pred.bands() != 1 || truth.bands() != 1 {
        return Err(Error::shape(format!(
            "prediction {}x{}x{} vs truth {}x{}x{} (single band required)",
            pred.width(),
            pred.height(),
            pred.bands(),
            truth.width(),
            truth.height(),
            truth.bands()
        )));
    }
    let mut c = counts;
    let (ps, ts) = (pred.samples(), truth.samples());
    for i in 0..ps.len() {
        match (is_foreground(ps.get_f32(i))?, is_foreground(ts.get_f32(i))?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scene: String,
    pub model: String,
    pub dataset: String,
    pub counts: ConfusionCounts,
}

pub const REPORT_HEADER: &str = "scene,model,dataset,iou,f1,precision,recall";

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let s = r.counts.scores();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scene,
            r.model,
            r.dataset,
            fmt_metric(s.iou),
            fmt_metric(s.f1),
            fmt_metric(s.precision),
            fmt_metric(s.recall)
        );
    }
    out
}

pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    std::fs::write(path, format_report(rows)).map_err(|e| Error::io(path, e))
}
