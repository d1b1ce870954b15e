//! The TOML run configuration and its command-line overrides.
//!
//! Every field has a default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use candi_core::backbone::{BackboneConfig, PretrainConfig};
use candi_core::data::SplitSpec;
use candi_core::fpm::CurationConfig;
use candi_core::optim::OptimConfig;
use candi_core::pipeline::{Mode, RunConfig};
use candi_core::sana::{AdaptConfig, SanaConfig};
use candi_core::synth::ShiftScenario;
use candi_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    /// Used when `data.train` is unset.
    pub synth: ShiftScenario,
    pub split: SplitSpec,
    pub backbone: BackboneSection,
    pub pretrain: PretrainConfig,
    pub curation: CurationConfig,
    pub run: RunSection,
    pub sana: SanaConfig,
    pub adapt: AdaptSection,
    /// Checkpoint directory; `<out>/checkpoint` when unset.
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub window: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let c = BackboneConfig::new(1, 10);
        Self {
            window: c.window,
            hidden: c.hidden,
            latent: c.latent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        let r = RunConfig::default();
        Self {
            mode: r.mode,
            alpha: r.alpha,
            batch_size: r.batch_size,
            seed: r.seed,
        }
    }
}

/// Nesterov SGD with the fixed momentum, weight decay and clipping of the
/// adaptation recipe; only the step size is configurable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub learning_rate: f64,
    pub steps: usize,
    pub min_pool: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let a = AdaptConfig::default();
        Self {
            learning_rate: a.optimizer.learning_rate,
            steps: a.steps,
            min_pool: a.min_pool,
        }
    }
}

/// Values given on the command line or through `CANDI_*` variables.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub alpha: Option<f64>,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub gating_init: Option<f64>,
    pub hidden_dim: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Flags win over file values. `seed` reseeds generation, pretraining
    /// and the stream together.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.mode {
            self.run.mode = m;
        }
        if let Some(a) = o.alpha {
            self.run.alpha = a;
        }
        if let Some(lr) = o.lr {
            self.adapt.learning_rate = lr;
        }
        if let Some(s) = o.steps {
            self.adapt.steps = s;
        }
        if let Some(g) = o.gating_init {
            self.sana.gating_init = g;
        }
        if let Some(h) = o.hidden_dim {
            self.sana.hidden = h;
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
            self.pretrain.seed = s;
            self.synth.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir().join("checkpoint"))
    }

    pub fn backbone_config(&self, dims: usize) -> BackboneConfig {
        BackboneConfig {
            dims,
            window: self.backbone.window,
            hidden: self.backbone.hidden,
            latent: self.backbone.latent,
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            mode: self.run.mode,
            alpha: self.run.alpha,
            batch_size: self.run.batch_size,
            sana: self.sana,
            adapt: AdaptConfig {
                optimizer: OptimConfig::sgd_nesterov(self.adapt.learning_rate),
                steps: self.adapt.steps,
                min_pool: self.adapt.min_pool,
            },
            seed: self.run.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration is always representable as TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_recipe_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c.backbone.window, 10);
        assert_eq!(c.run.batch_size, 256);
        assert_eq!(c.adapt.min_pool, 16);
        assert_eq!(c.split.validation_fraction, 0.2);
        assert_eq!(c.run_config(), RunConfig::default());
    }

    #[test]
    fn flags_override_file_values() {
        let mut c = Config::parse("[run]\nalpha = 0.01\nmode = \"no-tta\"\n").unwrap();
        c.apply(&Overrides {
            alpha: Some(0.05),
            seed: Some(9),
            ..Overrides::default()
        });
        assert_eq!(c.run.alpha, 0.05);
        assert_eq!(c.run.mode, Mode::NoTta);
        assert_eq!((c.run.seed, c.pretrain.seed, c.synth.seed), (9, 9, 9));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = Config::parse("[sana]\nhidden = 64\n[data]\ntrain = \"a.csv\"\n").unwrap();
        c.apply(&Overrides {
            lr: Some(0.1),
            ..Overrides::default()
        });
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::parse("[run]\nalhpa = 0.1\n"), Err(Error::Config(_))));
    }
}
