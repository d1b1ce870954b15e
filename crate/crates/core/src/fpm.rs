//! False positive mining.
//!
//! Validation scores fix the detection threshold `τ`. Validation latents
//! above `τ` form the false-positive reference set, those inside the
//! interquartile score range form the moderate reference set, and all of
//! them together give the Gaussian statistics used for Mahalanobis
//! distances. A test window becomes an adaptation candidate when its latent
//! lies within `δ = χ²⁻¹_d(0.05)` (squared Mahalanobis) of the reference set
//! matching its side of `τ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{chi2_inv_cdf, quantile};

/// Detection threshold: `tau` is the `(1 − alpha)` quantile of validation
/// scores, so an `alpha` fraction of normal validation windows exceed it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub alpha: f64,
    pub tau: f64,
}

pub fn compute_threshold(val_scores: &[f64], alpha: f64) -> Result<Threshold> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let tau = quantile(val_scores, 1.0 - alpha)?;
    Ok(Threshold { alpha, tau })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    FalsePositive,
    Moderate,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub kind: ReferenceKind,
    pub latents: Vec<Vec<f64>>,
    /// Lowest and highest validation score among the members.
    pub score_range: Option<(f64, f64)>,
}

impl ReferenceSet {
    fn collect(kind: ReferenceKind, latents: &[Vec<f64>], scores: &[f64], keep: impl Fn(f64) -> bool) -> Self {
        let mut members = Vec::new();
        let mut range: Option<(f64, f64)> = None;
        for (z, &s) in latents.iter().zip(scores) {
            if keep(s) {
                members.push(z.clone());
                range = Some(match range {
                    None => (s, s),
                    Some((lo, hi)) => (lo.min(s), hi.max(s)),
                });
            }
        }
        Self {
            kind,
            latents: members,
            score_range: range,
        }
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSets {
    pub false_positive: ReferenceSet,
    pub moderate: ReferenceSet,
    pub validation: ReferenceSet,
}

/// Partitions validation latents by score: `s > τ` → false positive,
/// `Q1 ≤ s ≤ Q3` → moderate, everything → validation.
pub fn build_reference_sets(
    val_latents: &[Vec<f64>],
    val_scores: &[f64],
    threshold: &Threshold,
) -> Result<ReferenceSets> {
    if val_latents.len() != val_scores.len() {
        return Err(Error::Dimension(format!(
            "{} latents for {} scores",
            val_latents.len(),
            val_scores.len()
        )));
    }
    let q1 = quantile(val_scores, 0.25)?;
    let q3 = quantile(val_scores, 0.75)?;
    let tau = threshold.tau;
    let sets = ReferenceSets {
        false_positive: ReferenceSet::collect(ReferenceKind::FalsePositive, val_latents, val_scores, |s| s > tau),
        moderate: ReferenceSet::collect(ReferenceKind::Moderate, val_latents, val_scores, |s| q1 <= s && s <= q3),
        validation: ReferenceSet::collect(ReferenceKind::Validation, val_latents, val_scores, |_| true),
    };
    if sets.false_positive.is_empty() {
        log::warn!("no validation window exceeds tau={tau}; hard-candidate mining disabled");
    }
    Ok(sets)
}

/// Mean, covariance and the Cholesky factor of the regularized covariance
/// `Σ + ε·(tr Σ / d)·I` (or `ε·I` when `tr Σ = 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d` population covariance.
    pub covariance: Vec<f64>,
    /// Row-major lower-triangular factor of the regularized covariance.
    pub cholesky: Vec<f64>,
    pub epsilon: f64,
}

pub fn fit_gaussian(latents: &[Vec<f64>], epsilon: f64) -> Result<GaussianStats> {
    if latents.len() < 2 {
        return Err(Error::Data("need at least two latents to fit a Gaussian".into()));
    }
    let d = latents[0].len();
    if d == 0 || latents.iter().any(|z| z.len() != d) {
        return Err(Error::Dimension("latents must share a non-zero dimension".into()));
    }
    let n = latents.len() as f64;
    let mut mean = vec![0.0; d];
    for z in latents {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for z in latents {
        for ((c, v), m) in centered.iter_mut().zip(z).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in 0..=i {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / n;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let mut reg = cov.clone();
    if trace == 0.0 {
        reg.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            reg[i * d + i] = epsilon;
        }
    } else {
        let ridge = epsilon * trace / d as f64;
        for i in 0..d {
            reg[i * d + i] += ridge;
        }
    }
    let cholesky = cholesky(&reg, d)?;
    Ok(GaussianStats {
        mean,
        covariance: cov,
        cholesky,
        epsilon,
    })
}

fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return Err(Error::Numeric(format!(
                        "covariance not positive definite (pivot {i} = {sum:e})"
                    )));
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Ok(l)
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Solves `L y = v` in place.
    fn forward_solve(&self, v: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let row = &self.cholesky[i * d..i * d + i];
            let s = v[i] - row.iter().zip(&v[..i]).map(|(l, x)| l * x).sum::<f64>();
            v[i] = s / self.cholesky[i * d + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    fn backward_solve(&self, v: &mut [f64]) {
        let d = self.dim();
        for i in (0..d).rev() {
            let s = v[i] - (i + 1..d).map(|k| self.cholesky[k * d + i] * v[k]).sum::<f64>();
            v[i] = s / self.cholesky[i * d + i];
        }
    }

    /// `(a − b)ᵀ Σ'⁻¹ (a − b)` via the two triangular solves.
    pub fn mahalanobis_sq(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != self.dim() || b.len() != self.dim() {
            return Err(Error::Dimension("latent dimension differs from Gaussian".into()));
        }
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let mut x = diff.clone();
        self.forward_solve(&mut x);
        self.backward_solve(&mut x);
        Ok(diff.iter().zip(&x).map(|(u, v)| u * v).sum())
    }

    /// `L⁻¹ v`; squared distances between whitened vectors equal squared
    /// Mahalanobis distances between the originals.
    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        let mut w = v.to_vec();
        self.forward_solve(&mut w);
        w
    }
}

/// Minimum squared Mahalanobis distance from `z` to any member of `refs`.
pub fn mahalanobis_min_sq(z: &[f64], refs: &ReferenceSet, stats: &GaussianStats) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Data(format!("{:?} reference set is empty", refs.kind)));
    }
    let mut best = f64::INFINITY;
    for r in &refs.latents {
        best = best.min(stats.mahalanobis_sq(z, r)?);
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub chi2_percentile: f64,
    pub epsilon: f64,
    /// Degrees of freedom; `None` uses the latent dimension.
    pub dof: Option<usize>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            chi2_percentile: 0.05,
            epsilon: 1e-6,
            dof: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateTag {
    Hard,
    Moderate,
}

/// Curation outcome for one window. `distance` is the minimum squared
/// Mahalanobis distance to the reference set on the window's side of `τ`,
/// absent when that set is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub tag: Option<CandidateTag>,
    pub distance: Option<f64>,
}

/// Reference sets whitened once so each candidate costs `O(|R|·d)`.
#[derive(Clone, Debug)]
pub struct Curator {
    pub threshold: Threshold,
    pub delta: f64,
    stats: GaussianStats,
    fp: Vec<Vec<f64>>,
    moderate: Vec<Vec<f64>>,
}

impl Curator {
    pub fn new(threshold: Threshold, sets: &ReferenceSets, stats: GaussianStats, cfg: &CurationConfig) -> Result<Self> {
        if !(cfg.chi2_percentile > 0.0 && cfg.chi2_percentile < 1.0) {
            return Err(Error::Config("chi-squared percentile must lie in (0, 1)".into()));
        }
        let dof = cfg.dof.unwrap_or(stats.dim());
        let delta = chi2_inv_cdf(cfg.chi2_percentile, dof)?;
        let whiten_all = |set: &ReferenceSet| set.latents.iter().map(|z| stats.whiten(z)).collect();
        Ok(Self {
            threshold,
            delta,
            fp: whiten_all(&sets.false_positive),
            moderate: whiten_all(&sets.moderate),
            stats,
        })
    }

    pub fn stats(&self) -> &GaussianStats {
        &self.stats
    }

    fn min_dist(whitened: &[Vec<f64>], w: &[f64]) -> Option<f64> {
        whitened
            .iter()
            .map(|r| r.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .reduce(f64::min)
    }

    /// Hard: `s > τ` and close to the false-positive set. Moderate: `s ≤ τ`
    /// and close to the moderate set. Closeness means distance `< δ`.
    pub fn decide(&self, score: f64, latent: &[f64]) -> Decision {
        let w = self.stats.whiten(latent);
        let (refs, tag) = if score > self.threshold.tau {
            (&self.fp, CandidateTag::Hard)
        } else {
            (&self.moderate, CandidateTag::Moderate)
        };
        let distance = Self::min_dist(refs, &w);
        Decision {
            tag: distance.filter(|&d| d < self.delta).map(|_| tag),
            distance,
        }
    }

    pub fn curate(&self, scores: &[f64], latents: &[Vec<f64>]) -> Result<Vec<Decision>> {
        if scores.len() != latents.len() {
            return Err(Error::Dimension("scores and latents differ in length".into()));
        }
        Ok(scores.iter().zip(latents).map(|(&s, z)| self.decide(s, z)).collect())
    }
}
