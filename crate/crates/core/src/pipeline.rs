//! Calibration on validation data and the causal test-time stream.
//!
//! Each test batch is scored by the model as it stands, then curated, then
//! appended to its pool. A pool that reaches the minimum size triggers one
//! adaptation and is emptied. A window's recorded score is therefore never
//! influenced by itself or anything after it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain, window_scores, Backbone, BackboneConfig, PretrainConfig, PretrainLog};
use crate::data::{normalize, split_and_window, MultivariateSeries, NormStats, SplitSpec, Splits, WindowSet};
use crate::error::{Error, Result};
use crate::fpm::{
    build_reference_sets, compute_threshold, fit_gaussian, CandidateTag, CurationConfig, Curator, GaussianStats,
};
use crate::report::{Counts, Event, MetricsSummary, PoolTag, RunReport, WindowRecord, SUMMARY_ALPHAS};
use crate::sana::{adapt_full_model, adapt_step, AdaptConfig, Sana, SanaConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// False-positive mining against the validation reference sets.
    Fpm,
    /// Every window scoring at or below `τ`.
    AllBelow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateTarget {
    Sana,
    FullModel,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Fpm => "fpm",
            Selection::AllBelow => "all",
        }
    }
}

impl UpdateTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateTarget::Sana => "sana",
            UpdateTarget::FullModel => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    NoTta,
    Candi,
    CandiHardOnly,
    CandiModOnly,
    AblateFpmSana,
    AblateFpmFull,
    AblateAllSana,
    AblateAllFull,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::NoTta,
        Mode::Candi,
        Mode::CandiHardOnly,
        Mode::CandiModOnly,
        Mode::AblateFpmSana,
        Mode::AblateFpmFull,
        Mode::AblateAllSana,
        Mode::AblateAllFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::NoTta => "no-tta",
            Mode::Candi => "candi",
            Mode::CandiHardOnly => "candi-hard-only",
            Mode::CandiModOnly => "candi-mod-only",
            Mode::AblateFpmSana => "ablate-fpm-sana",
            Mode::AblateFpmFull => "ablate-fpm-full",
            Mode::AblateAllSana => "ablate-all-sana",
            Mode::AblateAllFull => "ablate-all-full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }

    /// `None` for the no-adaptation baseline.
    pub fn plan(self) -> Option<(Selection, UpdateTarget)> {
        use Selection::*;
        use UpdateTarget::*;
        match self {
            Mode::NoTta => None,
            Mode::Candi | Mode::CandiHardOnly | Mode::CandiModOnly | Mode::AblateFpmSana => Some((Fpm, Sana)),
            Mode::AblateFpmFull => Some((Fpm, FullModel)),
            Mode::AblateAllSana => Some((AllBelow, Sana)),
            Mode::AblateAllFull => Some((AllBelow, FullModel)),
        }
    }

    fn pools(self) -> (bool, bool) {
        match self {
            Mode::CandiHardOnly => (true, false),
            Mode::CandiModOnly => (false, true),
            _ => (true, true),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub batch_size: usize,
    pub sana: SanaConfig,
    pub adapt: AdaptConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Candi,
            alpha: 0.01,
            batch_size: 256,
            sana: SanaConfig::default(),
            adapt: AdaptConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.sana.validate()?;
        self.adapt.validate()
    }
}

/// Validation-derived state shared by every run over one backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub val_scores: Vec<f64>,
    pub val_latents: Vec<Vec<f64>>,
    pub stats: GaussianStats,
    pub curation: CurationConfig,
}

impl Calibration {
    pub fn fit(backbone: &Backbone, validation: &WindowSet, batch: usize, curation: CurationConfig) -> Result<Self> {
        let val_scores = backbone.score_windows(validation, batch)?;
        let val_latents = backbone.latents(validation, batch)?;
        let stats = fit_gaussian(&val_latents, curation.epsilon)?;
        Ok(Self {
            val_scores,
            val_latents,
            stats,
            curation,
        })
    }

    fn curator(&self, alpha: f64) -> Result<Curator> {
        let threshold = compute_threshold(&self.val_scores, alpha)?;
        let sets = build_reference_sets(&self.val_latents, &self.val_scores, &threshold)?;
        Curator::new(threshold, &sets, self.stats.clone(), &self.curation)
    }

    fn summary_taus(&self) -> Result<Vec<(f64, f64)>> {
        SUMMARY_ALPHAS
            .iter()
            .map(|&a| Ok((a, compute_threshold(&self.val_scores, a)?.tau)))
            .collect()
    }
}

/// Everything the stream needs, built from raw train and test series.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub norm: NormStats,
    pub splits: Splits,
    pub backbone: Backbone,
    pub log: PretrainLog,
    pub calibration: Calibration,
}

/// Normalizes with train statistics, splits and windows, pretrains the
/// backbone and calibrates it on the validation tail.
pub fn prepare(
    train: &MultivariateSeries,
    test: &MultivariateSeries,
    split: &SplitSpec,
    backbone: BackboneConfig,
    pretrain_cfg: &PretrainConfig,
    curation: CurationConfig,
) -> Result<Prepared> {
    let (norm, train_n, rest) = normalize(train, &[test])?;
    let splits = split_and_window(&train_n, &rest[0], split, backbone.window)?;
    let (bb, log) = pretrain(&splits.train, Some(&splits.validation), backbone, pretrain_cfg)?;
    let calibration = Calibration::fit(&bb, &splits.validation, pretrain_cfg.batch_size, curation)?;
    Ok(Prepared {
        norm,
        splits,
        backbone: bb,
        log,
        calibration,
    })
}

/// Windows waiting for adaptation, stored by value.
#[derive(Clone, Debug)]
struct Pool {
    tag: PoolTag,
    windows: Vec<f64>,
    labels: Vec<u8>,
    count: usize,
}

impl Pool {
    fn new(tag: PoolTag) -> Self {
        Self {
            tag,
            windows: Vec::new(),
            labels: Vec::new(),
            count: 0,
        }
    }

    fn push(&mut self, window: &[f64], label: Option<u8>) {
        self.windows.extend_from_slice(window);
        self.labels.extend(label);
        self.count += 1;
    }

    fn take(&mut self, dims: usize, len: usize) -> Result<(Tensor, Vec<u8>)> {
        let t = Tensor::new(vec![self.count, dims, len], std::mem::take(&mut self.windows))?;
        self.count = 0;
        Ok((t, std::mem::take(&mut self.labels)))
    }
}

/// Adaptable model state for one stream.
enum Model {
    Frozen,
    Sana(Sana),
    Full { backbone: Backbone, steps: u64 },
}

/// Runs the stream for `cfg.mode` over `test` windows.
pub fn run_stream(test: &WindowSet, backbone: &Backbone, calib: &Calibration, cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(Error::State("the pretrained backbone must be frozen".into()));
    }
    let (dims, len) = (test.dims(), test.window_len());
    let curator = calib.curator(cfg.alpha)?;
    let tau = curator.threshold.tau;
    let before = backbone.checksum();
    let plan = cfg.mode.plan();
    let mut model = match plan {
        None => Model::Frozen,
        Some((_, UpdateTarget::Sana)) => Model::Sana(Sana::new(cfg.sana, dims, len, cfg.seed)?),
        Some((_, UpdateTarget::FullModel)) => Model::Full {
            backbone: backbone.clone(),
            steps: 0,
        },
    };
    let (hard_on, mod_on) = cfg.mode.pools();
    let mut pools = [
        Pool::new(PoolTag::Hard),
        Pool::new(PoolTag::Moderate),
        Pool::new(PoolTag::Below),
    ];
    let mut records = Vec::with_capacity(test.len());
    let mut events = Vec::new();
    let mut counts = Counts::default();
    let mut anomalies = test.labels.as_ref().map(|_| 0usize);

    for (batch_index, start) in (0..test.len()).step_by(cfg.batch_size).enumerate() {
        let end = (start + cfg.batch_size).min(test.len());
        let x = test.batch(start, end);
        let scores = match &model {
            Model::Frozen => window_scores(&x, &backbone.reconstruct(&x)?)?,
            Model::Sana(sana) => sana.score_batch(&x, backbone)?,
            Model::Full { backbone: b, .. } => window_scores(&x, &b.reconstruct(&x)?)?,
        };
        let tags: Vec<(Option<PoolTag>, Option<f64>)> = match plan {
            None => vec![(None, None); scores.len()],
            Some((Selection::AllBelow, _)) => scores
                .iter()
                .map(|&s| ((s <= tau).then_some(PoolTag::Below), None))
                .collect(),
            Some((Selection::Fpm, _)) => {
                // the encoder in use: frozen for SANA, the updated copy for full-model
                let latents = match &model {
                    Model::Full { backbone: b, .. } => b.encode_latents(&x)?,
                    _ => backbone.encode_latents(&x)?,
                };
                curator
                    .curate(&scores, &latents)?
                    .into_iter()
                    .map(|d| {
                        let tag = match d.tag {
                            Some(CandidateTag::Hard) if hard_on => Some(PoolTag::Hard),
                            Some(CandidateTag::Moderate) if mod_on => Some(PoolTag::Moderate),
                            _ => None,
                        };
                        (tag, d.distance)
                    })
                    .collect()
            }
        };
        for (k, (&score, (tag, distance))) in scores.iter().zip(&tags).enumerate() {
            let i = start + k;
            let label = test.labels.as_ref().map(|l| l[i]);
            records.push(WindowRecord {
                t: test.ends[i],
                score,
                prediction: score > tau,
                label,
                tag: *tag,
            });
            if let Some(tag) = *tag {
                let pool = &mut pools[tag as usize];
                pool.push(test.window(i), label);
                counts.curated += 1;
                if tag != PoolTag::Below {
                    events.push(Event::Curated {
                        t: test.ends[i],
                        score,
                        distance: *distance,
                        pool: tag,
                    });
                }
            }
        }
        for pool in pools.iter_mut() {
            if pool.count < cfg.adapt.min_pool {
                continue;
            }
            let (windows, labels) = pool.take(dims, len)?;
            let size = windows.shape()[0];
            let outcome = match &mut model {
                Model::Frozen => unreachable!("no pool fills without a plan"),
                Model::Sana(sana) => adapt_step(&windows, backbone, sana, &cfg.adapt),
                Model::Full { backbone: b, steps } => adapt_full_model(&windows, b, steps, &cfg.adapt),
            };
            counts.total_adapt += size;
            match pool.tag {
                PoolTag::Hard => counts.hard += size,
                PoolTag::Moderate => counts.moderate += size,
                PoolTag::Below => counts.below += size,
            }
            let in_pool = (!labels.is_empty()).then(|| labels.iter().filter(|&&l| l == 1).count());
            if let (Some(a), Some(n)) = (anomalies.as_mut(), in_pool) {
                *a += n;
            }
            match outcome {
                Ok(o) => {
                    counts.adapt_events += 1;
                    events.push(Event::Adapted {
                        batch_index,
                        pool: pool.tag,
                        pool_size: size,
                        steps: o.losses.len(),
                        loss_before: o.loss_before(),
                        loss_after: o.loss_after,
                        anomalies_in_pool: in_pool,
                    });
                }
                Err(e) => {
                    log::warn!("adaptation on batch {batch_index} failed and was rolled back: {e}");
                    events.push(Event::AdaptFailed {
                        batch_index,
                        pool: pool.tag,
                        pool_size: size,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    counts.pending = pools.iter().map(|p| p.count).sum();
    counts.anomalies_in_pools = anomalies;
    let summary_taus = calib.summary_taus()?;
    let after = match &model {
        Model::Full { backbone: b, .. } => b.checksum(),
        _ => backbone.checksum(),
    };
    Ok(RunReport {
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        alpha: cfg.alpha,
        tau,
        metrics: MetricsSummary::compute(&records, &summary_taus)?,
        summary_taus,
        excluded_steps: len.saturating_sub(1),
        backbone_before: before,
        backbone_after: after,
        records,
        counts,
        events,
    })
}

/// Scores every window with the frozen backbone; no adaptation.
pub fn run_no_tta(test: &WindowSet, backbone: &Backbone, calib: &Calibration, alpha: f64) -> Result<RunReport> {
    let cfg = RunConfig {
        mode: Mode::NoTta,
        alpha,
        ..RunConfig::default()
    };
    run_stream(test, backbone, calib, &cfg)
}

/// The CANDI stream for any adapting mode in `cfg`.
pub fn run_candi_stream(
    test: &WindowSet,
    backbone: &Backbone,
    calib: &Calibration,
    cfg: &RunConfig,
) -> Result<RunReport> {
    if cfg.mode == Mode::NoTta {
        return Err(Error::Config("run_candi_stream needs an adapting mode".into()));
    }
    run_stream(test, backbone, calib, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub selection: Selection,
    pub target: UpdateTarget,
    pub label: &'static str,
    pub report: RunReport,
}

pub const ABLATION_MODES: [(Mode, &str); 4] = [
    (Mode::AblateFpmSana, "fpm+sana"),
    (Mode::AblateFpmFull, "fpm+full"),
    (Mode::AblateAllSana, "all+sana"),
    (Mode::AblateAllFull, "all+full (m2n2-like baseline)"),
];

/// The four selection × update-target cells on the same stream.
pub fn run_ablation_grid(
    test: &WindowSet,
    backbone: &Backbone,
    calib: &Calibration,
    base: &RunConfig,
) -> Result<Vec<AblationCell>> {
    ABLATION_MODES
        .iter()
        .map(|&(mode, label)| {
            let (selection, target) = mode.plan().expect("ablation modes adapt");
            let cfg = RunConfig { mode, ..base.clone() };
            Ok(AblationCell {
                selection,
                target,
                label,
                report: run_stream(test, backbone, calib, &cfg)?,
            })
        })
        .collect()
}

/// One row per cell: selection, target, label, metrics and counts.
pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut s = String::from(
        "selection,target,label,auroc,auprc,adapt_total,adapt_hard,adapt_moderate,adapt_below,backbone_changed\n",
    );
    for c in cells {
        let (auroc, auprc) = c.report.metrics.as_ref().map_or(("-".into(), "-".into()), |m| {
            (format!("{:.6}", m.auroc), format!("{:.6}", m.auprc))
        });
        let k = &c.report.counts;
        let _ = writeln!(
            s,
            "{},{},{},{auroc},{auprc},{},{},{},{},{}",
            c.selection.as_str(),
            c.target.as_str(),
            c.label,
            k.total_adapt,
            k.hard,
            k.moderate,
            k.below,
            c.report.backbone_before != c.report.backbone_after
        );
    }
    s
}
