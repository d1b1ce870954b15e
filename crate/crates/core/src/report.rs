//! Run reports: per-window records, adaptation counts, events and metrics,
//! with a line-oriented text form that parses back losslessly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auprc, auroc, f1_at_threshold, F1Score, LabeledScores};

/// FPR levels the summary reports F1 at.
pub const SUMMARY_ALPHAS: [f64; 3] = [0.005, 0.01, 0.05];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolTag {
    Hard,
    Moderate,
    Below,
}

impl PoolTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolTag::Hard => "hard",
            PoolTag::Moderate => "moderate",
            PoolTag::Below => "below",
        }
    }

    fn parse(s: &str) -> Option<Option<Self>> {
        match s {
            "-" => Some(None),
            "hard" => Some(Some(PoolTag::Hard)),
            "moderate" => Some(Some(PoolTag::Moderate)),
            "below" => Some(Some(PoolTag::Below)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    /// Test step at which the window ends.
    pub t: usize,
    pub score: f64,
    pub prediction: bool,
    pub label: Option<u8>,
    pub tag: Option<PoolTag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    Curated {
        t: usize,
        score: f64,
        distance: Option<f64>,
        pool: PoolTag,
    },
    Adapted {
        batch_index: usize,
        pool: PoolTag,
        pool_size: usize,
        steps: usize,
        loss_before: f64,
        loss_after: f64,
        anomalies_in_pool: Option<usize>,
    },
    AdaptFailed {
        batch_index: usize,
        pool: PoolTag,
        pool_size: usize,
        message: String,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    /// Samples consumed by successful or failed adaptation steps.
    pub total_adapt: usize,
    pub hard: usize,
    pub moderate: usize,
    pub below: usize,
    pub curated: usize,
    /// Left in pools at stream end.
    pub pending: usize,
    pub adapt_events: usize,
    pub anomalies_in_pools: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1At {
    pub alpha: f64,
    pub tau: f64,
    pub score: F1Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub auroc: f64,
    pub auprc: f64,
    pub f1: Vec<F1At>,
}

impl MetricsSummary {
    /// `None` when records carry no labels or only one class.
    pub fn compute(records: &[WindowRecord], taus: &[(f64, f64)]) -> Result<Option<Self>> {
        let Some(labels) = records.iter().map(|r| r.label).collect::<Option<Vec<u8>>>() else {
            return Ok(None);
        };
        let ls = LabeledScores::new(records.iter().map(|r| r.score).collect(), labels)?;
        if ls.positives() == 0 || ls.negatives() == 0 {
            return Ok(None);
        }
        let f1 = taus
            .iter()
            .map(|&(alpha, tau)| F1At {
                alpha,
                tau,
                score: f1_at_threshold(&ls, tau),
            })
            .collect();
        Ok(Some(Self {
            auroc: auroc(&ls)?,
            auprc: auprc(&ls)?,
            f1,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub alpha: f64,
    pub tau: f64,
    /// `(alpha, tau)` for every summary level, from validation scores.
    pub summary_taus: Vec<(f64, f64)>,
    /// Test steps before the first complete window.
    pub excluded_steps: usize,
    pub backbone_before: String,
    pub backbone_after: String,
    pub records: Vec<WindowRecord>,
    pub counts: Counts,
    pub events: Vec<Event>,
    pub metrics: Option<MetricsSummary>,
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// The metric lines of a summary block.
pub fn metrics_text(metrics: Option<&MetricsSummary>) -> String {
    let Some(m) = metrics else {
        return "metrics=unavailable\n".into();
    };
    let mut s = String::new();
    let _ = writeln!(s, "auroc={:?}", m.auroc);
    let _ = writeln!(s, "auprc={:?}", m.auprc);
    for f in &m.f1 {
        let _ = writeln!(
            s,
            "f1@{}={:?} precision={:?} recall={:?} tau={:?}",
            f.alpha, f.score.f1, f.score.precision, f.score.recall, f.tau
        );
    }
    s
}

impl RunReport {
    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    /// The score series alone: `t,score,prediction,label`. Pool tags are
    /// left out so runs that never adapt produce identical files.
    pub fn scores_csv(&self) -> String {
        let mut s = String::from("t,score,prediction,label\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:?},{},{}",
                r.t,
                r.score,
                u8::from(r.prediction),
                fmt_opt(r.label)
            );
        }
        s
    }

    /// Per-window records: `t,score,prediction,label,tag`.
    pub fn records_csv(&self) -> String {
        let mut s = String::from("t,score,prediction,label,tag\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:?},{},{},{}",
                r.t,
                r.score,
                u8::from(r.prediction),
                fmt_opt(r.label),
                r.tag.map_or("-", PoolTag::as_str)
            );
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let c = &self.counts;
        let _ = writeln!(s, "adapt.total={}", c.total_adapt);
        let _ = writeln!(s, "adapt.hard={}", c.hard);
        let _ = writeln!(s, "adapt.moderate={}", c.moderate);
        let _ = writeln!(s, "adapt.below={}", c.below);
        let _ = writeln!(s, "adapt.events={}", c.adapt_events);
        let _ = writeln!(s, "curated={}", c.curated);
        let _ = writeln!(s, "pending={}", c.pending);
        let _ = writeln!(s, "anomalies_in_pools={}", fmt_opt(c.anomalies_in_pools));
        s.push_str(&metrics_text(self.metrics.as_ref()));
        s
    }

    /// Header, per-window records, then the summary block.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# run report\n");
        let _ = writeln!(s, "mode={}", self.mode);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "alpha={:?}", self.alpha);
        let _ = writeln!(s, "tau={:?}", self.tau);
        for (a, t) in &self.summary_taus {
            let _ = writeln!(s, "tau@{a:?}={t:?}");
        }
        s.push_str("evaluation=causal (each window scored by the model state at its arrival)\n");
        let _ = writeln!(s, "excluded_steps={}", self.excluded_steps);
        let _ = writeln!(s, "backbone_before={}", self.backbone_before);
        let _ = writeln!(s, "backbone_after={}", self.backbone_after);
        let _ = writeln!(s, "records={}", self.records.len());
        s.push_str(&self.records_csv());
        s.push_str("[summary]\n");
        s.push_str(&self.summary_text());
        s
    }

    /// One JSON object per line.
    pub fn events_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).map_err(|e| Error::State(e.to_string()))?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// The parts of a report text needed to recompute its summary.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedReport {
    pub header: Vec<(String, String)>,
    pub summary_taus: Vec<(f64, f64)>,
    pub records: Vec<WindowRecord>,
    pub summary: String,
}

impl ParsedReport {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Metric lines recomputed from the records.
    pub fn recompute_metrics(&self) -> Result<Option<MetricsSummary>> {
        MetricsSummary::compute(&self.records, &self.summary_taus)
    }

    /// Recomputes the metric lines and checks them against the stored
    /// summary block, returning the recomputed text.
    pub fn verify_summary(&self) -> Result<String> {
        let text = metrics_text(self.recompute_metrics()?.as_ref());
        if !self.summary.ends_with(&text) {
            return Err(Error::Mismatch(
                "stored summary differs from metrics recomputed from the records".into(),
            ));
        }
        Ok(text)
    }
}

pub fn parse_report(text: &str) -> Result<ParsedReport> {
    let perr = |line: usize, message: String| Error::Parse { line, message };
    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, "# run report")) => {}
        _ => return Err(perr(1, "missing report header".into())),
    }
    let mut header = Vec::new();
    let mut summary_taus = Vec::new();
    for (i, line) in lines.by_ref() {
        if line == "t,score,prediction,label,tag" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| perr(i + 1, format!("expected key=value, got `{line}`")))?;
        if let Some(a) = k.strip_prefix("tau@") {
            let a: f64 = a.parse().map_err(|_| perr(i + 1, format!("bad alpha `{a}`")))?;
            let t: f64 = v.parse().map_err(|_| perr(i + 1, format!("bad tau `{v}`")))?;
            summary_taus.push((a, t));
        }
        header.push((k.to_string(), v.to_string()));
    }
    let mut records = Vec::new();
    let mut summary = String::new();
    let mut in_summary = false;
    for (i, line) in lines {
        if in_summary {
            summary.push_str(line);
            summary.push('\n');
            continue;
        }
        if line == "[summary]" {
            in_summary = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || perr(i + 1, format!("bad record `{line}`"));
        if cols.len() != 5 {
            return Err(bad());
        }
        records.push(WindowRecord {
            t: cols[0].parse().map_err(|_| bad())?,
            score: cols[1].parse().map_err(|_| bad())?,
            prediction: match cols[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            },
            label: match cols[3] {
                "-" => None,
                v => Some(v.parse().map_err(|_| bad())?),
            },
            tag: PoolTag::parse(cols[4]).ok_or_else(bad)?,
        });
    }
    if !in_summary {
        return Err(perr(text.lines().count(), "missing [summary] block".into()));
    }
    Ok(ParsedReport {
        header,
        summary_taus,
        records,
        summary,
    })
}
