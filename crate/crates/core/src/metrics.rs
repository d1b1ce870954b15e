//! ROC/PR curves, AUROC, AUPRC and thresholded F1.
//!
//! Scores are swept from high to low with equal scores grouped into a single
//! step, so tied windows never get an arbitrary order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores aligned with binary labels (1 = anomaly).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Metric("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Metric("scores contain NaN".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    /// Cumulative `(tp, fp)` after each group of equal scores, highest first.
    fn sweep(&self) -> Vec<(u64, u64)> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0u64, 0u64);
        for (k, &i) in order.iter().enumerate() {
            if self.labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            let last_of_group = order.get(k + 1).is_none_or(|&j| self.scores[j] != self.scores[i]);
            if last_of_group {
                out.push((tp, fp));
            }
        }
        out
    }

    fn require_both(&self) -> Result<(u64, u64)> {
        let (p, n) = (self.positives() as u64, self.negatives() as u64);
        if p == 0 || n == 0 {
            return Err(Error::Metric(format!(
                "curve metrics need both classes ({p} positives, {n} negatives)"
            )));
        }
        Ok((p, n))
    }
}

/// Ordered `(x, y)` points: `(FPR, TPR)` for ROC, `(recall, precision)` for PR.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurvePoints {
    pub points: Vec<(f64, f64)>,
}

impl CurvePoints {
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    /// `Σ (xₖ − xₖ₋₁)·yₖ`.
    pub fn step_area(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1].0 - w[0].0) * w[1].1).sum()
    }

    /// Two comma-separated columns under a header naming them.
    pub fn to_text(&self, x_name: &str, y_name: &str) -> String {
        let mut s = format!("{x_name},{y_name}\n");
        for (x, y) in &self.points {
            s.push_str(&format!("{x:?},{y:?}\n"));
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let parse = |v: Option<&str>| -> Result<f64> {
                v.and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: format!("bad curve point `{line}`"),
                })
            };
            let mut cols = line.split(',');
            points.push((parse(cols.next())?, parse(cols.next())?));
        }
        Ok(Self { points })
    }
}

/// ROC from `(0, 0)` to `(1, 1)`, one point per distinct score.
pub fn roc_curve(ls: &LabeledScores) -> Result<CurvePoints> {
    let (p, n) = ls.require_both()?;
    let mut points = vec![(0.0, 0.0)];
    points.extend(
        ls.sweep()
            .into_iter()
            .map(|(tp, fp)| (fp as f64 / n as f64, tp as f64 / p as f64)),
    );
    Ok(CurvePoints { points })
}

/// Trapezoidal ROC area. Evaluated on integer counts so the result equals
/// the pairwise win probability (ties counted as one half) exactly.
pub fn auroc(ls: &LabeledScores) -> Result<f64> {
    let (p, n) = ls.require_both()?;
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    for (tp, fp) in ls.sweep() {
        twice_area += u128::from(fp - prev_fp) * u128::from(tp + prev_tp);
        (prev_tp, prev_fp) = (tp, fp);
    }
    Ok(twice_area as f64 / (2 * u128::from(p) * u128::from(n)) as f64)
}

/// PR curve starting at `(0, 1)`, one point per distinct score.
pub fn pr_curve(ls: &LabeledScores) -> Result<CurvePoints> {
    let p = ls.positives() as u64;
    if p == 0 {
        return Err(Error::Metric("precision-recall needs at least one positive".into()));
    }
    let mut points = vec![(0.0, 1.0)];
    points.extend(
        ls.sweep()
            .into_iter()
            .map(|(tp, fp)| (tp as f64 / p as f64, tp as f64 / (tp + fp) as f64)),
    );
    Ok(CurvePoints { points })
}

/// Step-wise PR area: precision at each recall increment.
pub fn auprc(ls: &LabeledScores) -> Result<f64> {
    Ok(pr_curve(ls)?.step_area())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Point-wise F1 with predictions `score > tau`. Undefined ratios are 0.
pub fn f1_at_threshold(ls: &LabeledScores, tau: f64) -> F1Score {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &l) in ls.scores.iter().zip(&ls.labels) {
        match (s > tau, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Score {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
    }
}

/// Writes `roc.csv` and `pr.csv` into `dir`; returns the paths written.
pub fn export_curves(ls: &LabeledScores, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let roc = dir.join("roc.csv");
    let pr = dir.join("pr.csv");
    std::fs::write(&roc, roc_curve(ls)?.to_text("fpr", "tpr")).map_err(|e| Error::io(&roc, e))?;
    std::fs::write(&pr, pr_curve(ls)?.to_text("recall", "precision")).map_err(|e| Error::io(&pr, e))?;
    Ok(vec![roc, pr])
}
