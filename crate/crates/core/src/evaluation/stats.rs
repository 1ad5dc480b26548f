//! Across-run aggregation with t-based 95% confidence intervals, and
//! one-tailed two-sample t-tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::MetricsReport;
use crate::error::{Error, Result};

pub const METRICS: [&str; 4] = ["accuracy", "auroc", "auprc", "f1"];

/// Mean shifted by the first element, so constant inputs come back exactly.
fn mean(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

/// Sample variance (n − 1 denominator).
fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Two-sided 95% quantile `t_{0.975, df}`.
pub fn t_quantile_975(df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width_95: f64,
}

impl MeanCi {
    /// `mean ± t_{0.975,n−1} · s / √n`.
    pub fn of(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Metric(format!("a confidence interval needs at least 2 values, got {n}")));
        }
        let s = variance(values).sqrt();
        Ok(MeanCi {
            mean: mean(values),
            half_width_95: t_quantile_975((n - 1) as f64) * s / (n as f64).sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub accuracy: MeanCi,
    pub auroc: MeanCi,
    pub auprc: MeanCi,
    pub f1: MeanCi,
    pub n_runs: usize,
}

impl AggregateReport {
    pub fn metric(&self, name: &str) -> Option<MeanCi> {
        match name {
            "accuracy" => Some(self.accuracy),
            "auroc" => Some(self.auroc),
            "auprc" => Some(self.auprc),
            "f1" => Some(self.f1),
            _ => None,
        }
    }
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.len() < 2 {
        return Err(Error::Metric(format!(
            "aggregation needs at least 2 runs, got {}",
            reports.len()
        )));
    }
    let ci = |f: fn(&MetricsReport) -> f64| MeanCi::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        accuracy: ci(|r| r.accuracy)?,
        auroc: ci(|r| r.auroc)?,
        auprc: ci(|r| r.auprc)?,
        f1: ci(|r| r.f1)?,
        n_runs: reports.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Favors {
    A,
    B,
    Neither,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub t_statistic: f64,
    pub degrees_freedom: f64,
    /// One-tailed p-value for H1: mean(b) > mean(a).
    pub p_one_tailed: f64,
    pub direction: Favors,
}

impl SignificanceResult {
    /// `**` for p < 0.001, `*` for p < 0.05, empty otherwise.
    pub fn stars(&self) -> &'static str {
        if self.p_one_tailed < 0.001 {
            "**"
        } else if self.p_one_tailed < 0.05 {
            "*"
        } else {
            ""
        }
    }
}

fn one_tailed(t: f64, df: f64, mean_diff: f64) -> SignificanceResult {
    let p = if t.is_nan() {
        0.5
    } else if t.is_infinite() {
        if t > 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        dist.sf(t).clamp(0.0, 1.0)
    };
    let direction = if mean_diff > 0.0 {
        Favors::B
    } else if mean_diff < 0.0 {
        Favors::A
    } else {
        Favors::Neither
    };
    SignificanceResult {
        t_statistic: if t.is_nan() { 0.0 } else { t },
        degrees_freedom: df,
        p_one_tailed: p,
        direction,
    }
}

/// Welch's unequal-variance t-test, one-tailed for mean(b) > mean(a), with
/// Welch–Satterthwaite degrees of freedom. When both samples have zero
/// variance the statistic is 0 with p = 0.5 for equal means and ±∞ with
/// p ∈ {0, 1} otherwise; degrees of freedom then fall back to `na + nb − 2`.
pub fn one_tailed_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric(format!(
            "t-test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let diff = mean(b) - mean(a);
    let se2 = va + vb;
    if se2 == 0.0 {
        let t = if diff == 0.0 { f64::NAN } else { diff.signum() * f64::INFINITY };
        return Ok(one_tailed(t, na + nb - 2.0, diff));
    }
    let df = se2.powi(2) / (va.powi(2) / (na - 1.0) + vb.powi(2) / (nb - 1.0));
    Ok(one_tailed(diff / se2.sqrt(), df, diff))
}

/// Paired t-test on `b − a`, one-tailed for mean(b) > mean(a). For
/// seed-matched runs.
pub fn paired_one_tailed_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Metric(format!(
            "paired t-test needs equal sizes of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = d.len() as f64;
    let md = mean(&d);
    let se = (variance(&d) / n).sqrt();
    let t = if se == 0.0 {
        if md == 0.0 {
            f64::NAN
        } else {
            md.signum() * f64::INFINITY
        }
    } else {
        md / se
    };
    Ok(one_tailed(t, n - 1.0, md))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(v: f64) -> MetricsReport {
        MetricsReport {
            accuracy: v,
            auroc: v,
            auprc: v,
            f1: v,
            n_test: 10,
            threshold: 0.5,
        }
    }

    #[test]
    fn identical_reports_have_zero_width() {
        let agg = aggregate(&vec![report(0.8); 10]).unwrap();
        assert_eq!(agg.auroc.half_width_95, 0.0);
        assert_eq!(agg.auroc.mean, 0.8);
    }

    #[test]
    fn aggregation_needs_two_runs() {
        assert!(aggregate(&[report(0.5)]).is_err());
    }

    #[test]
    fn identical_samples_give_half() {
        let a = [0.9, 0.91, 0.89];
        let r = one_tailed_t_test(&a, &a).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert!((r.p_one_tailed - 0.5).abs() < 1e-12);
        assert_eq!(r.stars(), "");

        let c = [0.7; 4];
        let r = one_tailed_t_test(&c, &c).unwrap();
        assert_eq!((r.t_statistic, r.p_one_tailed, r.direction), (0.0, 0.5, Favors::Neither));
    }

    #[test]
    fn extreme_separation_is_highly_significant() {
        let a = [0.80, 0.82, 0.81, 0.79, 0.83, 0.80, 0.81, 0.82, 0.78, 0.84];
        let sd = variance(&a).sqrt();
        let b: Vec<f64> = a.iter().map(|x| x + 10.0 * sd).collect();
        let r = one_tailed_t_test(&a, &b).unwrap();
        assert!(r.p_one_tailed < 0.001);
        assert_eq!(r.stars(), "**");
        assert_eq!(r.direction, Favors::B);
        let r = one_tailed_t_test(&b, &a).unwrap();
        assert!(r.p_one_tailed > 0.999);
    }
}
