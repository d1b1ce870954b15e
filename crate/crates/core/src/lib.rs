//! Curated test-time adaptation for multivariate time-series anomaly
//! detection.

// `!(x > 0.0)` is used deliberately: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fpm;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod sana;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
