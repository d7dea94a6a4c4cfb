//! Top-logit RMSE, best-of-K RMSE, selection gap and coverage.
//!
//! RMSE is computed per sample over the 12 joints and then averaged over
//! samples. The training loss instead sums squared errors over joints.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::grasphead::{select_top_logit, HypothesisSet, JointVector, NUM_JOINTS};
use crate::Error;

/// 15 degrees.
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = std::f64::consts::PI / 12.0;

/// How "within the threshold" is measured for coverage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageNorm {
    /// Every joint within the threshold.
    #[default]
    MaxAbs,
    /// Per-sample RMSE within the threshold.
    Rmse,
}

pub fn sample_rmse(pred: &JointVector, truth: &JointVector) -> f64 {
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    (s / NUM_JOINTS as f64).sqrt()
}

pub fn max_abs_error(pred: &JointVector, truth: &JointVector) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max)
}

pub fn is_covered(h: &HypothesisSet, truth: &JointVector, threshold: f64, norm: CoverageNorm) -> bool {
    h.joints.iter().any(|j| {
        let d = match norm {
            CoverageNorm::MaxAbs => max_abs_error(j, truth),
            CoverageNorm::Rmse => sample_rmse(j, truth),
        };
        d <= threshold
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_top_logit: f64,
    pub rmse_best_of_k: f64,
    pub selection_gap: f64,
    pub coverage_at_threshold: f64,
    pub threshold: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "rmse_top_logit,rmse_best_of_k,selection_gap,coverage_at_threshold,threshold,n_samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.rmse_top_logit,
            self.rmse_best_of_k,
            self.selection_gap,
            self.coverage_at_threshold,
            self.threshold,
            self.n_samples
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples            {}", self.n_samples)?;
        writeln!(f, "top-logit RMSE     {:.4} rad", self.rmse_top_logit)?;
        writeln!(f, "best-of-K RMSE     {:.4} rad", self.rmse_best_of_k)?;
        writeln!(f, "selection gap      {:.4} rad", self.selection_gap)?;
        write!(f, "coverage@{:.1}deg   {:.4}", self.threshold.to_degrees(), self.coverage_at_threshold)
    }
}

/// Aggregates predictions against ground truth. Reduction runs in sample order.
pub fn evaluate(
    predictions: &[(HypothesisSet, JointVector)],
    threshold: f64,
    norm: CoverageNorm,
) -> Result<EvalReport, Error> {
    if predictions.is_empty() {
        return Err(Error::Evaluation("empty split".into()));
    }
    if let Some((h, _)) = predictions.iter().find(|(h, _)| h.k() == 0 || h.k() != h.logits.len()) {
        return Err(Error::Evaluation(format!(
            "malformed hypothesis set with {} joints, {} logits",
            h.k(),
            h.logits.len()
        )));
    }
    let n = predictions.len() as f64;
    let mut top = 0.0;
    let mut best = 0.0;
    let mut covered = 0usize;
    for (h, truth) in predictions {
        let top_rmse = sample_rmse(select_top_logit(h), truth);
        let best_rmse = h.joints.iter().map(|j| sample_rmse(j, truth)).fold(f64::INFINITY, f64::min);
        top += top_rmse;
        best += best_rmse;
        covered += usize::from(is_covered(h, truth, threshold, norm));
    }
    let (rmse_top_logit, rmse_best_of_k) = (top / n, best / n);
    Ok(EvalReport {
        rmse_top_logit,
        rmse_best_of_k,
        selection_gap: rmse_top_logit - rmse_best_of_k,
        coverage_at_threshold: covered as f64 / n,
        threshold,
        n_samples: predictions.len(),
    })
}

/// One row of the budget-versus-RMSE curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: u32,
    pub init: String,
    pub seed: u64,
    pub rmse_top_logit: f64,
    pub coverage: f64,
    pub selection_gap: f64,
}

pub const CURVE_HEADER: &str = "budget,init,seed,rmse_top_logit,coverage,selection_gap";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.budget, p.init, p.seed, p.rmse_top_logit, p.coverage, p.selection_gap
        ));
    }
    s
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<CurvePoint>, Error> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CURVE_HEADER => {}
        other => return Err(Error::Format(format!("unexpected curve header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("curve row has {} fields: {l}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s}: {e}")));
            Ok(CurvePoint {
                budget: f[0].parse().map_err(|e| Error::Format(format!("{}: {e}", f[0])))?,
                init: f[1].to_string(),
                seed: f[2].parse().map_err(|e| Error::Format(format!("{}: {e}", f[2])))?,
                rmse_top_logit: num(f[3])?,
                coverage: num(f[4])?,
                selection_gap: num(f[5])?,
            })
        })
        .collect()
}

/// Mean and sample standard deviation of `rmse_top_logit` per `(budget, init)`.
pub fn summarize_curve(points: &[CurvePoint]) -> Vec<(u32, String, f64, f64, usize)> {
    let mut keys: Vec<(u32, String)> = points.iter().map(|p| (p.budget, p.init.clone())).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(b, init)| {
            let vals: Vec<f64> =
                points.iter().filter(|p| p.budget == b && p.init == init).map(|p| p.rmse_top_logit).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (b, init, mean, sd, vals.len())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_constant_error() {
        let truth = [0.1; NUM_JOINTS];
        let pred = truth.map(|v| v + 0.3);
        assert!((sample_rmse(&pred, &truth) - 0.3).abs() < 1e-12);
        assert_eq!(sample_rmse(&truth, &truth), 0.0);
    }

    #[test]
    fn hand_built_selection_gap() {
        let truth = [0.0; NUM_JOINTS];
        let h =
            HypothesisSet { joints: vec![[0.3; NUM_JOINTS], [1.0; NUM_JOINTS], truth], logits: vec![2.0, 1.0, 0.0] };
        let r = evaluate(&[(h, truth)], DEFAULT_COVERAGE_THRESHOLD, CoverageNorm::MaxAbs).unwrap();
        assert!((r.selection_gap - 0.3).abs() < 1e-12);
        assert_eq!(r.rmse_best_of_k, 0.0);
        assert_eq!(r.coverage_at_threshold, 1.0);
    }

    #[test]
    fn single_hypothesis_has_zero_gap() {
        let truth = [0.2; NUM_JOINTS];
        let h = HypothesisSet { joints: vec![[0.5; NUM_JOINTS]], logits: vec![0.0] };
        let r = evaluate(&[(h, truth)], DEFAULT_COVERAGE_THRESHOLD, CoverageNorm::MaxAbs).unwrap();
        assert_eq!(r.selection_gap, 0.0);
    }

    #[test]
    fn infinite_threshold_covers_everything() {
        let h = HypothesisSet { joints: vec![[9.0; NUM_JOINTS]], logits: vec![0.0] };
        let r = evaluate(&[(h, [0.0; NUM_JOINTS])], f64::INFINITY, CoverageNorm::MaxAbs).unwrap();
        assert_eq!(r.coverage_at_threshold, 1.0);
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(matches!(evaluate(&[], 0.1, CoverageNorm::MaxAbs), Err(Error::Evaluation(_))));
    }

    #[test]
    fn curve_csv_round_trip() {
        let pts = vec![CurvePoint {
            budget: 10,
            init: "scratch".into(),
            seed: 2,
            rmse_top_logit: 0.25,
            coverage: 0.9,
            selection_gap: 0.01,
        }];
        assert_eq!(parse_curve_csv(&curve_csv(&pts)).unwrap(), pts);
    }
}
