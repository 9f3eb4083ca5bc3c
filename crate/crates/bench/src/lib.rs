//! Fixtures for the benchmarks: a default-sized model and a short synthetic stream.

use leopard::harness::{build_learner, prepare_streams, ExperimentConfig, Method, PreparedStreams};
use leopard::learner::Learner;
use leopard::stream::MaskedStreams;

pub fn bench_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.stream.n_source_batches = 4;
    c.stream.n_target_batches = 4;
    c.learner.init_epochs = 5;
    c.seeds = vec![1];
    c.n_runs = 1;
    c
}

pub fn streams(config: &ExperimentConfig) -> (PreparedStreams, MaskedStreams) {
    let prepared = prepare_streams(config, config.seeds[0]).expect("synthetic streams");
    let masked = prepared.masked().expect("masking");
    (prepared, masked)
}

/// Learner after warm-up and cluster seeding.
pub fn ready_learner(config: &ExperimentConfig) -> (Learner, MaskedStreams) {
    let (prepared, masked) = streams(config);
    let learner = build_learner(config, &prepared, &masked, Method::Leopard, config.seeds[0]).expect("learner");
    (learner, masked)
}
