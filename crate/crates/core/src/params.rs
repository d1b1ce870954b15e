//! Named parameter tensors with gradient accumulators and optimizer slots.
//!
//! The checkpoint format is line-oriented text:
//!
//! ```text
//! paramstore v1 <count>
//! <name> <trainable:0|1> <rank> <dim>...
//! <value> <value> ...
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! `f64`, so save/load round trips are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub(crate) slot_a: Option<Tensor>,
    pub(crate) slot_b: Option<Tensor>,
}

impl Param {
    fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable,
            slot_a: None,
            slot_b: None,
        }
    }
}

/// Parameters keyed by name, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    pub(crate) adam_step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param::new(value, trainable));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Drops gradients and optimizer state, keeping values and flags.
    pub fn reset_optimizer(&mut self) {
        self.adam_step = 0;
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
            p.slot_a = None;
            p.slot_b = None;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Euclidean norm over the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over names, shapes and value bits, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in &self.params {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("paramstore v1 {}\n", self.params.len());
        for (name, p) in &self.params {
            let shape = p.value.shape();
            let _ = write!(out, "{} {} {}", name, u8::from(p.trainable), shape.len());
            for d in shape {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let mut first = true;
            for v in p.value.data() {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, message: &str| Error::Parse {
            line: line + 1,
            message: message.to_string(),
        };
        let (idx, header) = lines.next().ok_or_else(|| parse_err(0, "empty checkpoint"))?;
        let count: usize = header
            .strip_prefix("paramstore v1 ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| parse_err(idx, "bad header"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let (idx, meta) = lines.next().ok_or_else(|| parse_err(idx, "truncated"))?;
            let mut fields = meta.split_whitespace();
            let name = fields.next().ok_or_else(|| parse_err(idx, "missing name"))?;
            let trainable = match fields.next() {
                Some("0") => false,
                Some("1") => true,
                _ => return Err(parse_err(idx, "bad trainable flag")),
            };
            let rank: usize = fields
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| parse_err(idx, "bad rank"))?;
            let shape: Vec<usize> = fields
                .map(|d| d.parse().map_err(|_| parse_err(idx, "bad dimension")))
                .collect::<Result<_>>()?;
            if shape.len() != rank {
                return Err(parse_err(idx, "rank does not match dimension list"));
            }
            let (vidx, body) = lines.next().ok_or_else(|| parse_err(idx, "missing values"))?;
            let values: Vec<f64> = body
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| parse_err(vidx, "bad value")))
                .collect::<Result<_>>()?;
            let tensor = Tensor::new(shape, values).map_err(|e| parse_err(vidx, &e.to_string()))?;
            store.insert(name, tensor, trainable);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
