//! Seeded multivariate streams with gradual normality shift and labeled
//! anomalies.
//!
//! Every variable mixes a few shared sinusoids, adds its own sinusoid and
//! correlated Gaussian noise. The test segment continues the same process in
//! time, then ramps the configured shifts linearly from zero at its first
//! step to full magnitude at its last, and finally receives the anomalies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::MultivariateSeries;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    /// Per-variable offset growing to `magnitude` train standard deviations.
    TrendOffset,
    /// Per-variable gain drifting towards `1 ± magnitude`.
    AmplitudeDrift,
    /// Givens rotation of variable pairs up to `magnitude · π/2` radians.
    CorrelationRotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// Impulses of random sign on every affected step.
    Spike,
    /// A constant offset held for the whole interval.
    LevelShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub count: usize,
    pub kind: AnomalyKind,
    /// In train standard deviations of each affected variable.
    pub magnitude: f64,
    pub duration: usize,
    /// Fraction of variables hit by each anomaly (at least one).
    pub variable_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftScenario {
    pub seed: u64,
    pub dims: usize,
    pub train_len: usize,
    pub test_len: usize,
    pub shifts: Vec<Shift>,
    pub anomalies: AnomalySpec,
    pub shared_sources: usize,
    pub noise_std: f64,
}

impl Default for ShiftScenario {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl ShiftScenario {
    /// The desk-scale setting: D=8, 8000 + 8000 steps, trend offset plus
    /// correlation rotation, ten level-shift anomalies.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            dims: 8,
            train_len: 8000,
            test_len: 8000,
            shifts: vec![
                Shift {
                    kind: ShiftKind::TrendOffset,
                    magnitude: 1.5,
                },
                Shift {
                    kind: ShiftKind::CorrelationRotation,
                    magnitude: 0.5,
                },
            ],
            anomalies: AnomalySpec {
                count: 10,
                kind: AnomalyKind::LevelShift,
                magnitude: 3.0,
                duration: 20,
                variable_fraction: 0.25,
            },
            shared_sources: 3,
            noise_std: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.train_len == 0 || self.test_len == 0 {
            return Err(Error::Config("scenario needs D, train and test lengths >= 1".into()));
        }
        let a = &self.anomalies;
        if a.count > 0 {
            if a.duration == 0 {
                return Err(Error::Config("anomaly duration must be >= 1".into()));
            }
            if a.duration > self.test_len || a.count * a.duration > self.test_len {
                return Err(Error::Config(format!(
                    "{} anomalies of {} steps do not fit in {} test steps",
                    a.count, a.duration, self.test_len
                )));
            }
        }
        if !(self.noise_std >= 0.0) || self.shifts.iter().any(|s| !s.magnitude.is_finite()) {
            return Err(Error::Config(
                "noise and shift magnitudes must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Half-open `[start, end)` test-step interval carrying an injected anomaly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScenario {
    pub train: MultivariateSeries,
    pub test: MultivariateSeries,
    pub intervals: Vec<Interval>,
}

/// Reproducibility record written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub scenario: ShiftScenario,
    pub intervals: Vec<Interval>,
    pub labeled_steps: usize,
}

impl GeneratedScenario {
    pub fn manifest(&self, scenario: &ShiftScenario) -> ScenarioManifest {
        ScenarioManifest {
            scenario: scenario.clone(),
            intervals: self.intervals.clone(),
            labeled_steps: self.intervals.iter().map(|i| i.end - i.start).sum(),
        }
    }
}

struct Process {
    mixing: Vec<f64>,
    sources: Vec<(f64, f64)>,
    own: Vec<(f64, f64, f64)>,
    noise_chol: Vec<f64>,
}

impl Process {
    fn new(s: &ShiftScenario, rng: &mut ChaCha8Rng) -> Self {
        let (d, k) = (s.dims, s.shared_sources);
        let mixing = (0..d * k)
            .map(|_| rng.sample::<f64, _>(StandardNormal) / (k.max(1) as f64).sqrt())
            .collect();
        let sources = (0..k)
            .map(|_| {
                (
                    rng.random_range(25.0..120.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let own = (0..d)
            .map(|_| {
                (
                    rng.random_range(0.3..1.0),
                    rng.random_range(8.0..60.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        // unit-diagonal correlation factor: each row normalised to length one
        let mut noise_chol = vec![0.0; d * d];
        for i in 0..d {
            let row: Vec<f64> = (0..=i)
                .map(|j| {
                    if j == i {
                        1.0
                    } else {
                        0.5 * rng.sample::<f64, _>(StandardNormal)
                    }
                })
                .collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, v) in row.iter().enumerate() {
                noise_chol[i * d + j] = v / norm;
            }
        }
        Self {
            mixing,
            sources,
            own,
            noise_chol,
        }
    }

    /// Variable-major `[D, len]` values for absolute steps `t0..t0+len`.
    fn sample(&self, d: usize, t0: usize, len: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let k = self.sources.len();
        let mut out = vec![0.0; d * len];
        let mut eps = vec![0.0; d];
        for step in 0..len {
            let t = (t0 + step) as f64;
            let src: Vec<f64> = self
                .sources
                .iter()
                .map(|&(p, ph)| (std::f64::consts::TAU * t / p + ph).sin())
                .collect();
            eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
            for i in 0..d {
                let shared: f64 = (0..k).map(|j| self.mixing[i * k + j] * src[j]).sum();
                let (amp, p, ph) = self.own[i];
                let noise: f64 = (0..=i).map(|j| self.noise_chol[i * d + j] * eps[j]).sum();
                out[i * len + step] = shared + amp * (std::f64::consts::TAU * t / p + ph).sin() + noise_std * noise;
            }
        }
        out
    }
}

fn std_per_variable(values: &[f64], d: usize, len: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let col = &values[i * len..(i + 1) * len];
            let m = col.iter().sum::<f64>() / len as f64;
            (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len as f64).sqrt()
        })
        .collect()
}

pub fn generate_shift_scenario(s: &ShiftScenario) -> Result<GeneratedScenario> {
    s.validate()?;
    let d = s.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let process = Process::new(s, &mut rng);
    let train = process.sample(d, 0, s.train_len, s.noise_std, &mut rng);
    let sigma: Vec<f64> = std_per_variable(&train, d, s.train_len)
        .into_iter()
        .map(|v| if v > 0.0 { v } else { 1.0 })
        .collect();
    let n = s.test_len;
    let mut test = process.sample(d, s.train_len, n, s.noise_std, &mut rng);

    let ramp = |t: usize| if n > 1 { t as f64 / (n - 1) as f64 } else { 1.0 };
    for shift in &s.shifts {
        match shift.kind {
            ShiftKind::TrendOffset => {
                let dir: Vec<f64> = (0..d)
                    .map(|_| {
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        sign * rng.random_range(0.5..1.0)
                    })
                    .collect();
                for i in 0..d {
                    for t in 0..n {
                        test[i * n + t] += shift.magnitude * ramp(t) * dir[i] * sigma[i];
                    }
                }
            }
            ShiftKind::AmplitudeDrift => {
                let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                for i in 0..d {
                    for t in 0..n {
                        test[i * n + t] *= 1.0 + shift.magnitude * ramp(t) * dir[i];
                    }
                }
            }
            ShiftKind::CorrelationRotation => {
                let mut vars: Vec<usize> = (0..d).collect();
                for i in (1..d).rev() {
                    vars.swap(i, rng.random_range(0..=i));
                }
                for pair in vars.chunks_exact(2) {
                    let (a, b) = (pair[0], pair[1]);
                    for t in 0..n {
                        let theta = shift.magnitude * ramp(t) * std::f64::consts::FRAC_PI_2;
                        let (sn, cs) = theta.sin_cos();
                        let (xa, xb) = (test[a * n + t] / sigma[a], test[b * n + t] / sigma[b]);
                        test[a * n + t] = (cs * xa - sn * xb) * sigma[a];
                        test[b * n + t] = (sn * xa + cs * xb) * sigma[b];
                    }
                }
            }
        }
    }

    let mut labels = vec![0u8; n];
    let mut intervals = Vec::new();
    let spec = s.anomalies;
    if let Some(segment) = n.checked_div(spec.count) {
        let affected = ((spec.variable_fraction * d as f64).round() as usize).clamp(1, d);
        for k in 0..spec.count {
            let seg_start = k * segment;
            let slack = segment - spec.duration;
            let start = seg_start + if slack > 0 { rng.random_range(0..=slack) } else { 0 };
            let end = start + spec.duration;
            let mut vars: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                vars.swap(i, rng.random_range(0..=i));
            }
            for &v in &vars[..affected] {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                for t in start..end {
                    let s_t = match spec.kind {
                        AnomalyKind::LevelShift => sign,
                        AnomalyKind::Spike => {
                            if rng.random_bool(0.5) {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                    };
                    test[v * n + t] += s_t * spec.magnitude * sigma[v];
                }
            }
            labels[start..end].iter_mut().for_each(|l| *l = 1);
            intervals.push(Interval { start, end });
        }
    }

    let names: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    Ok(GeneratedScenario {
        train: MultivariateSeries::new(names.clone(), train, None)?,
        test: MultivariateSeries::new(names, test, Some(labels))?,
        intervals,
    })
}
