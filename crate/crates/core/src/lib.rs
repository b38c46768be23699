//! Encoder-decoder foundation model for univariate time-series forecasting.
//!
//! Contexts are cut into patches at several resolutions, projected and
//! fused into one token sequence, encoded by a T5-style stack and decoded
//! patch by patch into joint point and quantile forecasts.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod head;
pub mod inference;
pub mod model;
pub mod params;
pub mod patch;
pub mod scalar;
pub mod seed;
pub mod series;
pub mod synth;
pub mod tape;
pub mod training;

pub use backbone::BackboneConfig;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{DatasetNaive, DatasetSpec, EvalReport, Forecaster, ModelForecaster, Protocol, SeasonalNaive};
pub use head::{PatchPrediction, QuantileSet};
pub use inference::{forecast, ForecastRequest, ForecastResult};
pub use model::{Model, ModelConfig};
pub use patch::PatchConfig;
pub use series::TimeSeries;
pub use synth::{CorpusManifest, SynthConfig};
pub use training::{LogRecord, TrainConfig, Trainer};
