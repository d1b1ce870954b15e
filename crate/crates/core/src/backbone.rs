//! MLP reconstruction autoencoder: pretraining, reconstruction, anomaly
//! scores and L2-normalized latents.
//!
//! ```text
//! window [D, L] → flatten D·L → hidden (tanh) → latent d → hidden (tanh) → D·L
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{l2_normalize, linear, uniform_init};
use crate::optim::{optimizer_step, OptimConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub dims: usize,
    pub window: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl BackboneConfig {
    pub fn new(dims: usize, window: usize) -> Self {
        Self {
            dims,
            window,
            hidden: 256,
            latent: 64,
        }
    }

    fn input(&self) -> usize {
        self.dims * self.window
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.window == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::Config("backbone dimensions must all be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Per-epoch mean reconstruction losses from [`pretrain`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
}

const LAYERS: [&str; 4] = ["enc1", "enc2", "dec1", "dec2"];

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

fn pname(layer: &str, part: &str) -> String {
    format!("backbone.{layer}.{part}")
}

impl Backbone {
    /// Randomly initialised, trainable backbone.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [
            (config.input(), config.hidden),
            (config.hidden, config.latent),
            (config.latent, config.hidden),
            (config.hidden, config.input()),
        ];
        let mut params = ParamStore::new();
        for (layer, (fan_in, fan_out)) in LAYERS.iter().zip(sizes) {
            params.insert(
                pname(layer, "w"),
                uniform_init(&mut rng, &[fan_in, fan_out], fan_in),
                true,
            );
            params.insert(pname(layer, "b"), uniform_init(&mut rng, &[fan_out], fan_in), true);
        }
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking every expected shape.
    pub fn from_params(config: BackboneConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = Self::new(config, 0)?;
        for (name, p) in expected.params.iter() {
            let got = params.get(name)?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "checkpoint `{name}` has shape {:?}, config implies {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Dimension("checkpoint has unexpected parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|(_, p)| !p.trainable)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let (d, l) = (self.config.dims, self.config.window);
        match *shape {
            [b, sd, sl] if sd == d && sl == l => Ok(b),
            _ => Err(Error::Dimension(format!(
                "backbone expects windows [B, {d}, {l}], got {shape:?}"
            ))),
        }
    }

    /// Records the encoder on `g`; `x` is `[B, D, L]`. Returns the raw latent.
    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = self.check_input(g.value(x).shape())?;
        let flat = g.reshape(x, &[b, self.config.input()])?;
        let h = self.layer(g, flat, "enc1")?;
        let h = g.tanh(h);
        self.layer(g, h, "enc2")
    }

    /// Records the full autoencoder on `g`; output has the shape of `x`.
    pub fn reconstruct_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let z = self.encode_graph(g, x)?;
        let h = self.layer(g, z, "dec1")?;
        let h = g.tanh(h);
        let out = self.layer(g, h, "dec2")?;
        g.reshape(out, &shape)
    }

    fn layer(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = g.param(&self.params, &pname(name, "w"))?;
        let b = g.param(&self.params, &pname(name, "b"))?;
        linear(g, x, w, b)
    }

    /// Reconstructs a `[D, L]` window or a `[B, D, L]` batch.
    pub fn reconstruct(&self, windows: &Tensor) -> Result<Tensor> {
        let single = windows.rank() == 2;
        let input = if single {
            windows.clone().reshape(&[1, windows.shape()[0], windows.shape()[1]])?
        } else {
            windows.clone()
        };
        let mut g = Graph::new();
        let x = g.constant(input);
        let y = self.reconstruct_graph(&mut g, x)?;
        let out = g.value(y).clone();
        if single {
            out.reshape(windows.shape())
        } else {
            Ok(out)
        }
    }

    /// L2-normalized latents for a `[B, D, L]` batch, one row per window.
    /// Windows whose raw latent is the zero vector map to zero and are logged.
    pub fn encode_latents(&self, windows: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.constant(windows.clone());
        let z = self.encode_graph(&mut g, x)?;
        let latent = self.config.latent;
        Ok(g.value(z)
            .data()
            .chunks(latent)
            .map(|row| {
                if row.iter().all(|&v| v == 0.0) {
                    log::warn!("encoder produced a zero latent; left unnormalized");
                }
                l2_normalize(row)
            })
            .collect())
    }

    pub fn encode_latent(&self, window: &Tensor) -> Result<Vec<f64>> {
        let x = window.clone().reshape(&[1, self.config.dims, self.config.window])?;
        Ok(self.encode_latents(&x)?.remove(0))
    }

    /// Anomaly scores of every window, evaluated in chunks of `batch`.
    pub fn score_windows(&self, windows: &WindowSet, batch: usize) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(windows.len());
        for start in (0..windows.len()).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(windows.len());
            let x = windows.batch(start, end);
            let recon = self.reconstruct(&x)?;
            scores.extend(window_scores(&x, &recon)?);
        }
        Ok(scores)
    }

    pub fn latents(&self, windows: &WindowSet, batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(windows.len());
        for start in (0..windows.len()).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(windows.len());
            out.extend(self.encode_latents(&windows.batch(start, end))?);
        }
        Ok(out)
    }

    /// Mean reconstruction loss over a window set.
    pub fn mean_loss(&self, windows: &WindowSet, batch: usize) -> Result<f64> {
        let scores = self.score_windows(windows, batch)?;
        Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
    }
}

/// Mean squared reconstruction error of one window.
pub fn anomaly_score(window: &[f64], reconstruction: &[f64]) -> Result<f64> {
    if window.len() != reconstruction.len() {
        return Err(Error::Dimension(format!(
            "window has {} values, reconstruction {}",
            window.len(),
            reconstruction.len()
        )));
    }
    let sum: f64 = window.iter().zip(reconstruction).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / window.len().max(1) as f64)
}

/// Per-window scores for matching `[B, D, L]` tensors.
pub fn window_scores(windows: &Tensor, reconstruction: &Tensor) -> Result<Vec<f64>> {
    if windows.shape() != reconstruction.shape() || windows.rank() != 3 {
        return Err(Error::Dimension(format!(
            "scoring {:?} against {:?}",
            windows.shape(),
            reconstruction.shape()
        )));
    }
    let size = windows.shape()[1] * windows.shape()[2];
    windows
        .data()
        .chunks(size)
        .zip(reconstruction.data().chunks(size))
        .map(|(x, y)| anomaly_score(x, y))
        .collect()
}

/// Trains a fresh backbone on normal windows with Adam and a cosine
/// schedule, then freezes it. `validation` is only used for monitoring.
pub fn pretrain(
    train: &WindowSet,
    validation: Option<&WindowSet>,
    config: BackboneConfig,
    cfg: &PretrainConfig,
) -> Result<(Backbone, PretrainLog)> {
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be >= 1".into()));
    }
    if train.dims() != config.dims || train.window_len() != config.window {
        return Err(Error::Dimension(format!(
            "training windows are [{}, {}], backbone expects [{}, {}]",
            train.dims(),
            train.window_len(),
            config.dims,
            config.window
        )));
    }
    let mut backbone = Backbone::new(config, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let optim = OptimConfig::adam_cosine(cfg.learning_rate, total_steps);
    optim.validate()?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = PretrainLog::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.gather(chunk);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let recon = backbone.reconstruct_graph(&mut g, xv)?;
            let loss = g.mse_mean(recon, xv)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite pretraining loss at epoch {}",
                    epoch + 1
                )));
            }
            weighted += value * chunk.len() as f64;
            g.backward(loss)?.accumulate_into(&mut backbone.params)?;
            optimizer_step(&mut backbone.params, &optim, step)?;
            step += 1;
        }
        log.train_loss.push(weighted / train.len() as f64);
        if let Some(val) = validation {
            log.validation_loss.push(backbone.mean_loss(val, cfg.batch_size)?);
        }
        log::debug!("epoch {} train loss {:.6}", epoch + 1, log.train_loss[epoch]);
    }
    backbone.params.reset_optimizer();
    backbone.freeze();
    Ok((backbone, log))
}
