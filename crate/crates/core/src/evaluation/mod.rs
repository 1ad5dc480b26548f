//! Classifier metrics, confidence intervals, significance tests and curve
//! export.

mod metrics;
mod stats;

pub use metrics::{
    accuracy_f1, auprc, auroc, pr_points, roc_points, trapezoid, Confusion, MetricsReport, DEFAULT_THRESHOLD,
};
pub use stats::{
    aggregate, one_tailed_t_test, paired_one_tailed_t_test, t_quantile_975, AggregateReport, Favors, MeanCi,
    SignificanceResult, METRICS,
};

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Two-column comma-separated curve file with a header row. Values use
/// Rust's shortest round-trip float formatting.
pub fn curve_csv(x_name: &str, y_name: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("{x_name},{y_name}\n");
    for (x, y) in points {
        writeln!(out, "{x},{y}").unwrap();
    }
    out
}

pub fn write_curve(path: &Path, x_name: &str, y_name: &str, points: &[(f64, f64)]) -> Result<()> {
    std::fs::write(path, curve_csv(x_name, y_name, points)).map_err(|e| Error::io(path, e))
}

/// Linear interpolation of the TPR at `fpr` on a ROC polyline. At a vertical
/// step the highest TPR reached at that FPR is returned.
pub fn tpr_at_fpr(points: &[(f64, f64)], fpr: f64) -> Option<f64> {
    let best_at = points
        .iter()
        .filter(|p| p.0 == fpr)
        .map(|p| p.1)
        .fold(None, |acc: Option<f64>, y| Some(acc.map_or(y, |a| a.max(y))));
    if best_at.is_some() {
        return best_at;
    }
    points.windows(2).find(|w| w[0].0 < fpr && fpr < w[1].0).map(|w| {
        let t = (fpr - w[0].0) / (w[1].0 - w[0].0);
        w[0].1 + t * (w[1].1 - w[0].1)
    })
}
