//! Fixtures shared by the benchmarks.

use tsfound_core::synth::{synth_corpus, SynthConfig};
use tsfound_core::training::{make_batch, Batch};
use tsfound_core::{Model, RunConfig, TimeSeries};

pub fn desk() -> RunConfig {
    RunConfig::preset("desk-tiny").expect("preset exists").expect("preset is valid")
}

/// A small synthetic corpus at the desk series length.
pub fn corpus(n: usize) -> Vec<TimeSeries> {
    let cfg = desk();
    let synth = SynthConfig {
        num_series: n,
        ..cfg.data.synth.expect("desk preset has a synthetic corpus")
    };
    synth_corpus(&synth, 1).expect("corpus").0
}

/// Desk model plus one training batch of `batch_size` windows.
pub fn model_and_batch(batch_size: usize) -> (Model<f32>, Batch, RunConfig) {
    let mut cfg = desk();
    cfg.train.batch_size = batch_size;
    let model = Model::init(cfg.model.clone(), 0).expect("model");
    let batch = make_batch(&corpus(64), &cfg.model, &cfg.train, 0, 0).expect("batch");
    (model, batch, cfg)
}
