//! On-disk artifacts written by pretraining and read back by later runs.
//!
//! A checkpoint directory holds three JSON files: the backbone weights,
//! the normalization statistics and the validation calibration. Floats are
//! written with round-trip precision, so a reload reproduces every score
//! bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PretrainConfig, PretrainLog};
use crate::data::{MultivariateSeries, NormStats, SplitSpec, WindowSet};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::{Calibration, Prepared};
use crate::tensor::Tensor;

pub const BACKBONE_FILE: &str = "backbone.json";
pub const NORM_FILE: &str = "normalization.json";
pub const CALIBRATION_FILE: &str = "calibration.json";

const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BackboneFile {
    format: u32,
    config: BackboneConfig,
    pretrain: PretrainConfig,
    split: SplitSpec,
    log: PretrainLog,
    checksum: String,
    params: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub pretrain: PretrainConfig,
    pub split: SplitSpec,
    pub log: PretrainLog,
    pub norm: NormStats,
    pub calibration: Calibration,
}

impl Checkpoint {
    pub fn from_prepared(p: &Prepared, pretrain: PretrainConfig, split: SplitSpec) -> Self {
        Self {
            backbone: p.backbone.clone(),
            pretrain,
            split,
            log: p.log.clone(),
            norm: p.norm.clone(),
            calibration: p.calibration.clone(),
        }
    }

    pub fn config(&self) -> BackboneConfig {
        self.backbone.config
    }

    /// Writes the three artifact files into `dir` and returns their paths.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = BackboneFile {
            format: FORMAT,
            config: self.backbone.config,
            pretrain: self.pretrain,
            split: self.split,
            log: self.log.clone(),
            checksum: self.backbone.checksum(),
            params: self
                .backbone
                .params
                .iter()
                .map(|(n, p)| (n.to_string(), p.value.clone()))
                .collect(),
        };
        Ok(vec![
            write_json(dir.join(BACKBONE_FILE), &file)?,
            write_json(dir.join(NORM_FILE), &self.norm)?,
            write_json(dir.join(CALIBRATION_FILE), &self.calibration)?,
        ])
    }

    /// Reads a checkpoint and verifies the stored weight checksum.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let file: BackboneFile = read_json(dir.join(BACKBONE_FILE))?;
        if file.format != FORMAT {
            return Err(Error::Mismatch(format!(
                "checkpoint format {} (expected {FORMAT})",
                file.format
            )));
        }
        let mut params = ParamStore::new();
        for (name, value) in file.params {
            params.insert(name, value, false);
        }
        let backbone = Backbone::from_params(file.config, params)?;
        if backbone.checksum() != file.checksum {
            return Err(Error::Mismatch(
                "backbone weights do not match their recorded checksum".into(),
            ));
        }
        let ck = Self {
            backbone,
            pretrain: file.pretrain,
            split: file.split,
            log: file.log,
            norm: read_json(dir.join(NORM_FILE))?,
            calibration: read_json(dir.join(CALIBRATION_FILE))?,
        };
        ck.check_consistent()?;
        Ok(ck)
    }

    fn check_consistent(&self) -> Result<()> {
        let c = self.config();
        if self.norm.mean.len() != c.dims || self.norm.std.len() != c.dims {
            return Err(Error::Mismatch(format!(
                "normalization covers {} variables, backbone D={}",
                self.norm.mean.len(),
                c.dims
            )));
        }
        if self.calibration.stats.dim() != c.latent || self.calibration.val_latents.iter().any(|z| z.len() != c.latent)
        {
            return Err(Error::Mismatch(format!(
                "calibration latents do not have d={}",
                c.latent
            )));
        }
        Ok(())
    }

    /// Normalizes `test` with the stored train statistics and cuts its
    /// stride-1 windows, exactly as pretraining did.
    pub fn test_windows(&self, test: &MultivariateSeries) -> Result<WindowSet> {
        if test.dims() != self.config().dims {
            return Err(Error::Mismatch(format!(
                "test data has D={}, checkpoint has D={}",
                test.dims(),
                self.config().dims
            )));
        }
        let test = self.norm.apply(test)?.downsample(self.split.downsample_rate);
        WindowSet::from_series(&test, self.config().window)
    }

    /// Fails with [`Error::Mismatch`] unless D, L and d agree with `expected`.
    pub fn ensure_matches(&self, expected: &BackboneConfig) -> Result<()> {
        let c = self.config();
        let pairs = [
            ("D", c.dims, expected.dims),
            ("L", c.window, expected.window),
            ("d", c.latent, expected.latent),
        ];
        match pairs.iter().find(|(_, a, b)| a != b) {
            Some((what, have, want)) => Err(Error::Mismatch(format!(
                "checkpoint has {what}={have}, configuration wants {want}"
            ))),
            None => Ok(()),
        }
    }
}

pub fn write_json(path: PathBuf, value: &impl Serialize) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_json<T: DeserializeOwned>(path: PathBuf) -> Result<T> {
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}
