//! Anomaly prediction from time-series forecasts.
//!
//! A base forecaster produces a horizon forecast and an embedding of the
//! context window. The embedding retrieves the true horizons of the nearest
//! historical windows; a learned two-stage attention fuses them with a scaled
//! copy of the forecast, and a linear head maps the fused forecast to one
//! anomaly probability per future timestep.

mod binio;
pub mod config;
pub mod dataset;
pub mod error;
pub mod forecaster;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod retrieval;

pub use binio::atomic_write;
pub use error::{F2aError, Result};
