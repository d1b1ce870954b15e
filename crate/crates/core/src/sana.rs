//! Input and output normality-adaptation modules and the test-time update.
//!
//! Each side turns every variable's length-`L` sequence into an `h`-dim token
//! (same-padded convolution, then a mean over time), mixes tokens across
//! variables with single-head attention, maps each token back to length `L`
//! with its own linear head and adds the result through a gate:
//! `x̃ᵢ = xᵢ + tanh(gᵢ)·Aᵢ`. With all gates at zero both sides are exact
//! identities, so an unadapted model scores exactly like the backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{window_scores, Backbone};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attention, uniform_init, AttentionWeights};
use crate::optim::{optimizer_step, OptimConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SanaConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub gating_init: f64,
}

impl Default for SanaConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            kernel: 3,
            gating_init: 0.0,
        }
    }
}

impl SanaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("SANA hidden dimension must be >= 1".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("SANA kernel must be odd, got {}", self.kernel)));
        }
        if !self.gating_init.is_finite() {
            return Err(Error::Config("gating init must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Input,
    Output,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Input => "sana.in.",
            Side::Output => "sana.out.",
        }
    }
}

/// Both modules' parameters, all trainable, in one store.
#[derive(Clone, Debug)]
pub struct Sana {
    pub config: SanaConfig,
    pub dims: usize,
    pub window: usize,
    pub params: ParamStore,
    /// Optimizer steps taken so far; indexes the learning-rate schedule.
    pub steps_taken: u64,
}

const PARTS: [&str; 9] = [
    "conv.w", "conv.b", "attn.q", "attn.k", "attn.v", "attn.o", "head.w", "head.b", "gate",
];

fn pname(side: Side, part: &str) -> String {
    format!("{}{part}", side.prefix())
}

impl Sana {
    pub fn new(config: SanaConfig, dims: usize, window: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims == 0 || window == 0 {
            return Err(Error::Config("SANA needs D >= 1 and L >= 1".into()));
        }
        let (h, k) = (config.hidden, config.kernel);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for side in [Side::Input, Side::Output] {
            let mut put = |part: &str, t: Tensor| params.insert(pname(side, part), t, true);
            put("conv.w", uniform_init(&mut rng, &[h, 1, k], k));
            put("conv.b", uniform_init(&mut rng, &[h], k));
            for p in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                put(p, uniform_init(&mut rng, &[h, h], h));
            }
            put("head.w", uniform_init(&mut rng, &[dims, h, window], h));
            put("head.b", uniform_init(&mut rng, &[dims, window], h));
            put("gate", Tensor::full(&[dims], config.gating_init));
        }
        Ok(Self {
            config,
            dims,
            window,
            params,
            steps_taken: 0,
        })
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_params(config: SanaConfig, dims: usize, window: usize, params: ParamStore) -> Result<Self> {
        let expected = Self::new(config, dims, window, 0)?;
        if params.len() != expected.params.len() {
            return Err(Error::Dimension("SANA checkpoint has unexpected parameters".into()));
        }
        for (name, p) in expected.params.iter() {
            if params.get(name)?.value.shape() != p.value.shape() {
                return Err(Error::Dimension(format!("SANA parameter `{name}` has the wrong shape")));
            }
        }
        Ok(Self { params, ..expected })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records one side on `g` for `x` of shape `[B, D, L]`.
    pub fn side_graph(&self, g: &mut Graph, x: Var, side: Side) -> Result<Var> {
        self.side_graph_with(g, x, side, &self.params)
    }

    /// As [`Sana::side_graph`] but reading parameters from `store`.
    pub fn side_graph_with(&self, g: &mut Graph, x: Var, side: Side, store: &ParamStore) -> Result<Var> {
        let b = match *g.value(x).shape() {
            [b, d, l] if d == self.dims && l == self.window => b,
            ref s => {
                return Err(Error::Dimension(format!(
                    "SANA expects [B, {}, {}], got {s:?}",
                    self.dims, self.window
                )))
            }
        };
        let (d, l, h) = (self.dims, self.window, self.config.hidden);
        let p = |part: &str| g_param(g, store, side, part);
        let [cw, cb, q, k, v, o, hw, hb, gate] = PARTS.map(p);
        let (cw, cb, hw, hb, gate) = (cw?, cb?, hw?, hb?, gate?);
        let weights = AttentionWeights {
            q: q?,
            k: k?,
            v: v?,
            o: o?,
        };
        let seq = g.reshape(x, &[b * d, 1, l])?;
        let conv = g.conv1d_same(seq, cw, cb)?;
        let tokens = g.mean_last(conv)?;
        let tokens = g.reshape(tokens, &[b, d, h])?;
        let mixed = attention(g, tokens, weights)?.output;
        let adj = g.per_var_linear(mixed, hw, hb)?;
        g.gated_residual(x, gate, adj)
    }

    /// `output(backbone(input(x)))` on `g`.
    pub fn candi_graph(&self, g: &mut Graph, x: Var, backbone: &Backbone) -> Result<Var> {
        let adapted = self.side_graph(g, x, Side::Input)?;
        let recon = backbone.reconstruct_graph(g, adapted)?;
        self.side_graph(g, recon, Side::Output)
    }

    fn run_side(&self, x: &Tensor, side: Side) -> Result<Tensor> {
        let (input, single) = batched(x, self.dims, self.window)?;
        let mut g = Graph::new();
        let xv = g.constant(input);
        let y = self.side_graph(&mut g, xv, side)?;
        unbatch(g.value(y).clone(), single)
    }

    /// Adapted window for a `[D, L]` window or `[B, D, L]` batch.
    pub fn input_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run_side(x, Side::Input)
    }

    /// Adapted reconstruction for a `[D, L]` or `[B, D, L]` reconstruction.
    pub fn output_forward(&self, recon: &Tensor) -> Result<Tensor> {
        self.run_side(recon, Side::Output)
    }

    /// Final reconstruction of the adapted detector.
    pub fn candi_forward(&self, x: &Tensor, backbone: &Backbone) -> Result<Tensor> {
        let (input, single) = batched(x, self.dims, self.window)?;
        let mut g = Graph::new();
        let xv = g.constant(input);
        let y = self.candi_graph(&mut g, xv, backbone)?;
        unbatch(g.value(y).clone(), single)
    }

    /// Anomaly scores of a `[B, D, L]` batch under the adapted detector.
    pub fn score_batch(&self, x: &Tensor, backbone: &Backbone) -> Result<Vec<f64>> {
        let recon = self.candi_forward(x, backbone)?;
        window_scores(x, &recon)
    }
}

fn g_param(g: &mut Graph, store: &ParamStore, side: Side, part: &str) -> Result<Var> {
    g.param(store, &pname(side, part))
}

fn batched(x: &Tensor, d: usize, l: usize) -> Result<(Tensor, bool)> {
    match *x.shape() {
        [xd, xl] if xd == d && xl == l => Ok((x.clone().reshape(&[1, d, l])?, true)),
        [_, xd, xl] if xd == d && xl == l => Ok((x.clone(), false)),
        ref s => Err(Error::Dimension(format!("expected [{d}, {l}] windows, got {s:?}"))),
    }
}

fn unbatch(t: Tensor, single: bool) -> Result<Tensor> {
    if single {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    } else {
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub optimizer: OptimConfig,
    pub steps: usize,
    pub min_pool: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimConfig::sgd_nesterov(0.01),
            steps: 1,
            min_pool: 16,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("adaptation steps must be >= 1".into()));
        }
        if self.min_pool == 0 {
            return Err(Error::Config("min pool must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Loss before each optimizer step, plus the loss after the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub losses: Vec<f64>,
    pub loss_after: f64,
}

impl AdaptOutcome {
    pub fn loss_before(&self) -> f64 {
        self.losses[0]
    }
}

/// Runs `cfg.steps` updates of `store` on the mean reconstruction error of
/// `pool`. On a non-finite loss or gradient, `store` is restored and the
/// error returned.
fn adapt_loop<F>(
    pool: &Tensor,
    store: &mut ParamStore,
    counter: &mut u64,
    cfg: &AdaptConfig,
    forward: F,
) -> Result<AdaptOutcome>
where
    F: Fn(&mut Graph, &ParamStore, Var) -> Result<Var>,
{
    cfg.validate()?;
    let n = pool.shape().first().copied().unwrap_or(0);
    if pool.rank() != 3 || n < cfg.min_pool {
        return Err(Error::Precondition(format!(
            "adaptation pool holds {n} windows, minimum is {}",
            cfg.min_pool
        )));
    }
    let snapshot = (store.clone(), *counter);
    let mut losses = Vec::with_capacity(cfg.steps);
    let result = (|| -> Result<f64> {
        for _ in 0..cfg.steps {
            let mut g = Graph::new();
            let x = g.constant(pool.clone());
            let recon = forward(&mut g, store, x)?;
            let loss = g.mse_mean(recon, x)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite adaptation loss {value}")));
            }
            losses.push(value);
            store.zero_grad();
            g.backward(loss)?.accumulate_into(store)?;
            optimizer_step(store, &cfg.optimizer, *counter)?;
            *counter += 1;
        }
        let mut g = Graph::new();
        let x = g.constant(pool.clone());
        let recon = forward(&mut g, store, x)?;
        let loss = g.mse_mean(recon, x)?;
        let after = g.value(loss).data()[0];
        if !after.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {after} after adaptation")));
        }
        Ok(after)
    })();
    match result {
        Ok(loss_after) => Ok(AdaptOutcome { losses, loss_after }),
        Err(e) => {
            (*store, *counter) = snapshot;
            Err(e)
        }
    }
}

/// Updates only the SANA parameters on `pool` (`[P, D, L]`); the backbone is
/// read but never written.
pub fn adapt_step(pool: &Tensor, backbone: &Backbone, sana: &mut Sana, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    if !backbone.is_frozen() {
        return Err(Error::Precondition("SANA adaptation needs a frozen backbone".into()));
    }
    let shape = sana.clone_shape();
    let mut store = std::mem::take(&mut sana.params);
    let mut counter = sana.steps_taken;
    let out = adapt_loop(pool, &mut store, &mut counter, cfg, |g, s, x| {
        let a = shape.side_graph_with(g, x, Side::Input, s)?;
        let r = backbone.reconstruct_graph(g, a)?;
        shape.side_graph_with(g, r, Side::Output, s)
    });
    sana.params = store;
    sana.steps_taken = counter;
    out
}

/// Updates every backbone parameter on `pool` with no SANA modules.
pub fn adapt_full_model(
    pool: &Tensor,
    backbone: &mut Backbone,
    counter: &mut u64,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    let config = backbone.config;
    let mut store = std::mem::take(&mut backbone.params);
    store.set_trainable(true);
    let out = adapt_loop(pool, &mut store, counter, cfg, |g, s, x| {
        let view = Backbone {
            config,
            params: s.clone(),
        };
        view.reconstruct_graph(g, x)
    });
    backbone.params = store;
    out
}

impl Sana {
    /// Shape-only copy used to build graphs against a detached store.
    fn clone_shape(&self) -> Sana {
        Sana {
            config: self.config,
            dims: self.dims,
            window: self.window,
            params: ParamStore::new(),
            steps_taken: 0,
        }
    }
}
