//! Series ingestion, normalization, chronological splitting and windowing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `D × T` multivariate series stored variable-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    pub names: Vec<String>,
    values: Vec<f64>,
    len: usize,
    pub labels: Option<Vec<u8>>,
}

impl MultivariateSeries {
    /// `values` is variable-major: `values[i * t + step]`.
    pub fn new(names: Vec<String>, values: Vec<f64>, labels: Option<Vec<u8>>) -> Result<Self> {
        let d = names.len();
        if d == 0 {
            return Err(Error::Data("series needs at least one variable".into()));
        }
        if !values.len().is_multiple_of(d) {
            return Err(Error::Dimension("values not divisible by variable count".into()));
        }
        let len = values.len() / d;
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::Dimension(format!("{} labels for {} time steps", l.len(), len)));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::Data("labels must be 0 or 1".into()));
            }
        }
        Ok(Self {
            names,
            values,
            len,
            labels,
        })
    }

    pub fn dims(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn variable(&self, i: usize) -> &[f64] {
        &self.values[i * self.len..(i + 1) * self.len]
    }

    pub fn get(&self, var: usize, step: usize) -> f64 {
        self.values[var * self.len + step]
    }

    /// Steps `[start, end)` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let values = (0..self.dims())
            .flat_map(|i| self.variable(i)[start..end].iter().copied())
            .collect();
        Self {
            names: self.names.clone(),
            values,
            len: end - start,
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }

    /// Keeps every `rate`-th step, starting with the first.
    pub fn downsample(&self, rate: usize) -> Self {
        if rate <= 1 {
            return self.clone();
        }
        let keep: Vec<usize> = (0..self.len).step_by(rate).collect();
        let values = (0..self.dims())
            .flat_map(|i| keep.iter().map(move |&s| (i, s)))
            .map(|(i, s)| self.get(i, s))
            .collect();
        Self {
            names: self.names.clone(),
            values,
            len: keep.len(),
            labels: self.labels.as_ref().map(|l| keep.iter().map(|&s| l[s]).collect()),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = self.names.clone();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for step in 0..self.len {
            let mut row: Vec<String> = (0..self.dims()).map(|i| format!("{:?}", self.get(i, step))).collect();
            if let Some(l) = &self.labels {
                row.push(l[step].to_string());
            }
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Reads a CSV with a header of variable names and an optional trailing
/// `label` column holding 0/1.
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file)
}

pub fn parse_csv(reader: impl std::io::Read) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Parse {
            line: 1,
            message: "missing header".into(),
        });
    }
    let has_label = header.last().is_some_and(|h| h.eq_ignore_ascii_case("label"));
    let d = header.len() - usize::from(has_label);
    if d == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no variable columns".into(),
        });
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (i, col) in columns.iter_mut().enumerate() {
            let cell = &record[i];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric cell `{cell}` in column {}", header[i]),
            })?;
            col.push(v);
        }
        if has_label {
            let cell = &record[d];
            let label = match cell {
                "0" | "0.0" => 0,
                "1" | "1.0" => 1,
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("label `{cell}` is not 0 or 1"),
                    })
                }
            };
            labels.push(label);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "empty body".into(),
        });
    }
    let names = header[..d].to_vec();
    let values = columns.into_iter().flatten().collect();
    MultivariateSeries::new(names, values, has_label.then_some(labels))
}

/// Per-variable mean and standard deviation taken from training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(train: &MultivariateSeries) -> Self {
        let n = train.len().max(1) as f64;
        let mut mean = Vec::with_capacity(train.dims());
        let mut std = Vec::with_capacity(train.dims());
        for i in 0..train.dims() {
            let col = train.variable(i);
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(m);
            // rounding in the mean leaves ~1 ulp of spurious spread
            std.push(if sd <= 1e-12 * m.abs().max(1.0) { 0.0 } else { sd });
        }
        Self { mean, std }
    }

    /// z-scores each variable; zero-variance variables are only centered.
    pub fn apply(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        if series.dims() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "normalization fitted on {} variables, series has {}",
                self.mean.len(),
                series.dims()
            )));
        }
        let t = series.len();
        let mut values = Vec::with_capacity(series.values.len());
        for i in 0..series.dims() {
            let (m, s) = (self.mean[i], self.std[i]);
            values.extend(
                series
                    .variable(i)
                    .iter()
                    .map(|v| if s > 0.0 { (v - m) / s } else { v - m }),
            );
        }
        debug_assert_eq!(values.len(), series.dims() * t);
        MultivariateSeries::new(series.names.clone(), values, series.labels.clone())
    }
}

/// Fits statistics on `train` and applies them to every series given.
pub fn normalize(
    train: &MultivariateSeries,
    others: &[&MultivariateSeries],
) -> Result<(NormStats, MultivariateSeries, Vec<MultivariateSeries>)> {
    let stats = NormStats::fit(train);
    let train_n = stats.apply(train)?;
    let rest = others.iter().map(|s| stats.apply(s)).collect::<Result<_>>()?;
    Ok((stats, train_n, rest))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub downsample_rate: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            validation_fraction: 0.2,
            downsample_rate: 1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        if self.downsample_rate == 0 {
            return Err(Error::Config("downsample rate must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stride-1 windows of shape `D × L`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    dims: usize,
    window: usize,
    data: Vec<f64>,
    /// Index of each window's last step within its source segment.
    pub ends: Vec<usize>,
    /// Label at each window's end step, when the source carried labels.
    pub labels: Option<Vec<u8>>,
}

impl WindowSet {
    pub fn from_series(series: &MultivariateSeries, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window length must be >= 1".into()));
        }
        if series.len() < window {
            return Err(Error::Data(format!(
                "segment of {} steps is shorter than window length {window}",
                series.len()
            )));
        }
        let d = series.dims();
        let count = series.len() - window + 1;
        let mut data = Vec::with_capacity(count * d * window);
        for start in 0..count {
            for i in 0..d {
                data.extend_from_slice(&series.variable(i)[start..start + window]);
            }
        }
        let ends: Vec<usize> = (window - 1..series.len()).collect();
        let labels = series.labels.as_ref().map(|l| ends.iter().map(|&t| l[t]).collect());
        Ok(Self {
            dims: d,
            window,
            data,
            ends,
            labels,
        })
    }

    /// Builds a set directly from `[N, D, L]` data.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[n, d, l] = t.shape() else {
            return Err(Error::Dimension("window tensor must be [N, D, L]".into()));
        };
        Ok(Self {
            dims: d,
            window: l,
            data: t.data().to_vec(),
            ends: (0..n).map(|i| i + l - 1).collect(),
            labels: None,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    pub fn window(&self, idx: usize) -> &[f64] {
        let size = self.dims * self.window;
        &self.data[idx * size..(idx + 1) * size]
    }

    /// Windows `[start, end)` as a `[n, D, L]` tensor.
    pub fn batch(&self, start: usize, end: usize) -> Tensor {
        let size = self.dims * self.window;
        Tensor::new(
            vec![end - start, self.dims, self.window],
            self.data[start * size..end * size].to_vec(),
        )
        .expect("window slice matches shape")
    }

    /// The windows at `indices`, in order, as `[n, D, L]`.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let size = self.dims * self.window;
        let mut data = Vec::with_capacity(indices.len() * size);
        for &i in indices {
            data.extend_from_slice(self.window(i));
        }
        Tensor::new(vec![indices.len(), self.dims, self.window], data).expect("gathered windows match shape")
    }

    pub fn all(&self) -> Tensor {
        self.batch(0, self.len())
    }
}

/// Train, validation and test windows from chronologically split data.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: WindowSet,
    pub validation: WindowSet,
    pub test: WindowSet,
    /// Test steps without a full window (the first `L − 1`).
    pub excluded_test_steps: usize,
}

/// Downsamples both series, carves the validation tail off the training
/// series, and cuts stride-1 windows inside each segment.
pub fn split_and_window(
    train: &MultivariateSeries,
    test: &MultivariateSeries,
    spec: &SplitSpec,
    window: usize,
) -> Result<Splits> {
    spec.validate()?;
    if train.dims() != test.dims() {
        return Err(Error::Dimension(format!(
            "train has {} variables, test has {}",
            train.dims(),
            test.dims()
        )));
    }
    let train = train.downsample(spec.downsample_rate);
    let test = test.downsample(spec.downsample_rate);
    let (fit, val) = split_validation(&train, spec.validation_fraction);
    Ok(Splits {
        train: WindowSet::from_series(&fit, window)?,
        validation: WindowSet::from_series(&val, window)?,
        test: WindowSet::from_series(&test, window)?,
        excluded_test_steps: window - 1,
    })
}

/// Splits off the last `round(fraction · T)` steps.
pub fn split_validation(train: &MultivariateSeries, fraction: f64) -> (MultivariateSeries, MultivariateSeries) {
    let n_val = ((train.len() as f64) * fraction).round() as usize;
    let cut = train.len() - n_val.min(train.len());
    (train.slice(0, cut), train.slice(cut, train.len()))
}
