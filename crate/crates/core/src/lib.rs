//! Extreme-aware multi-step time-series forecasting: windowed data
//! preparation, a dropout MLP with per-sample gradients, IPF/EVT/meta sample
//! reweighting, early-stopped SGD, layer-freezing fine-tuning, evaluation and
//! a synthetic generator.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod nn;
pub mod reweight;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorClass, Result};
