//! Prequential protocol: every batch is scored before training and only
//! prerecorded labels reach the learner.

use leopard::harness::{prepare_streams, run_single, ExperimentConfig, Method};
use leopard::stream::{mask_labels, Domain};

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.stream.n_source_batches = 5;
    c.stream.n_target_batches = 7;
    c.stream.source_batch_size = 40;
    c.stream.target_batch_size = 30;
    c.learner.init_epochs = 3;
    c.learner.epochs = 1;
    c
}

#[test]
fn every_fresh_batch_is_evaluated_once_before_training() {
    let c = config();
    for method in [Method::Leopard, Method::AeKmeans] {
        let run = run_single(&c, 2, method).unwrap();
        assert!(run.audit.is_clean(), "{method:?}: {:?}", run.audit.violations);
        assert_eq!(run.audit.evaluations, 5 + 7);
        assert_eq!(run.audit.training_steps, 7);
        assert_eq!(run.audit.label_reads_during_training, 0);
        let target = run.records.iter().filter(|r| r.stream == Domain::Target).count();
        assert_eq!(target, 7);
    }
}

#[test]
fn only_the_labelled_share_of_the_prerecorded_sample_keeps_labels() {
    let c = config();
    let streams = prepare_streams(&c, 4).unwrap();
    let masked = mask_labels(&streams.prerecorded, &streams.source, &streams.target, &streams.stream_config).unwrap();
    assert_eq!(masked.prerecorded.n_labelled(), c.stream.prerecorded_size());
    assert_eq!(masked.source.len(), masked.source_labels.len());
    for labels in masked.source_labels.iter().chain(&masked.target_labels) {
        assert_eq!(labels.read_count(), 0);
    }
}
