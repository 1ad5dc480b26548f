use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Per distinct score, descending: (positives, negatives) at that score.
fn threshold_groups(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().unwrap();
        if labels[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// ROC curve as `(false positive rate, true positive rate)` points from a
/// descending threshold sweep, starting at (0,0) and ending at (1,1).
/// Interior points lying on a purely vertical or horizontal run are dropped.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (p, n) = check_inputs(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::Metric(format!(
            "ROC needs both classes ({p} positives, {n} negatives)"
        )));
    }
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (gp, gn) in threshold_groups(scores, labels) {
        tp += gp;
        fp += gn;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let mut reduced: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for (i, &pt) in points.iter().enumerate() {
        if i > 0 && i + 1 < points.len() {
            let (prev, next) = (points[i - 1], points[i + 1]);
            let vertical = prev.0 == pt.0 && pt.0 == next.0;
            let horizontal = prev.1 == pt.1 && pt.1 == next.1;
            if vertical || horizontal {
                continue;
            }
        }
        reduced.push(pt);
    }
    Ok(reduced)
}

/// Trapezoidal area under a polyline given in increasing x.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Area under the ROC curve. Tied scores contribute half a concordant pair,
/// so the value equals the Mann–Whitney statistic divided by `P·N`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(trapezoid(&roc_points(scores, labels)?))
}

/// Precision–recall points `(recall, precision)`, one per distinct
/// threshold in descending order.
pub fn pr_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (p, _) = check_inputs(scores, labels)?;
    if p == 0 {
        return Err(Error::Metric("precision-recall needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    Ok(threshold_groups(scores, labels)
        .into_iter()
        .map(|(gp, gn)| {
            tp += gp;
            fp += gn;
            (tp as f64 / p as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect())
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over descending thresholds.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (recall, precision) in pr_points(scores, labels)? {
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Predictions are `score >= threshold`.
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        check_inputs(scores, labels)?;
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.tn + self.fn_;
        if total == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / total as f64
        }
    }

    /// `2TP / (2TP + FP + FN)`, defined as 0 when all three are zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn accuracy_f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    let c = Confusion::at(scores, labels, threshold)?;
    Ok((c.accuracy(), c.f1()))
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Test-set metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub f1: f64,
    pub n_test: usize,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let (accuracy, f1) = accuracy_f1(scores, labels, threshold)?;
        Ok(MetricsReport {
            accuracy,
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            f1,
            n_test: scores.len(),
            threshold,
        })
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "auroc" => Some(self.auroc),
            "auprc" => Some(self.auprc),
            "f1" => Some(self.f1),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn perfect_roc_points() {
        let pts = roc_points(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn auprc_examples() {
        let ap = auprc(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(auprc(&[0.2, 0.9, 0.4], &[1, 1, 1]).unwrap(), 1.0);
        assert!(auprc(&[0.2, 0.9], &[0, 0]).is_err());
    }

    #[test]
    fn confusion_formulas() {
        // TP=2, FP=1, FN=1, TN=6
        let scores = [0.9, 0.8, 0.7, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2];
        let labels = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0];
        let (acc, f1) = accuracy_f1(&scores, &labels, 0.5).unwrap();
        assert!((acc - 0.8).abs() < 1e-15);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        let (acc, f1) = accuracy_f1(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!((acc, f1), (1.0, 1.0));
        assert_eq!(accuracy_f1(&[0.1, 0.2], &[0, 0], 0.5).unwrap().1, 0.0);
    }
}
