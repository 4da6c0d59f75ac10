//! Blind image denoising with content-conditioned filters and per-stage noise
//! estimation, built on explicit forward/backward primitives in f64.
//!
//! The crate is CPU-only. Data-parallel inner loops run on rayon when the
//! `parallel` feature (default) is enabled; the sequential fallback computes
//! bit-identical results.

pub mod condfilter;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod nem;
pub mod network;
pub mod noise;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor4;
