//! Desk-scale time-series forecaster built around deviation-driven dynamic patching.
//!
//! A raw series is embedded per timestep, contextualized by a small gated-recurrence
//! encoder, compressed by keeping one token per detected patch, run through a
//! causal-attention backbone with mixture-of-experts feed-forwards, expanded back to
//! timestep resolution, and decoded into multi-horizon forecasts. Everything runs on
//! an f64 tape with reverse-mode gradients; no external tensor runtime.

pub mod ablation;
pub mod backbone;
pub mod commands;
pub mod error;
pub mod forecaster;
pub mod params;
pub mod patcher;
pub mod report;
pub mod series;
pub mod ssm;
pub mod svg;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
