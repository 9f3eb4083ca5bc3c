//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use leopard::clustering::{Cluster, DistanceStats};
use leopard::network::{Hyperparameters, LeopardModel, ModelConfig, ModelGradients, ParamGroup};
use leopard::numerics::{finite_diff_gradient, max_relative_error, seeded_rng, Matrix};
use leopard::stream::Domain;
use rand::Rng;

pub const STEP: f64 = 1e-6;
pub const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        source_dim: 3,
        target_dim: 5,
        n_classes: 2,
        adapter_dim: 4,
        extractor_hidden: 6,
        feature_dim: 5,
        initial_width: 4,
        domain_hidden: 4,
    }
}

pub fn small_model(seed: u64, depth: usize, clusters_per_layer: usize) -> LeopardModel {
    let mut model = LeopardModel::new(small_config(), Hyperparameters::default(), seed).unwrap();
    for k in 1..depth {
        model.add_layer(seed + k as u64).unwrap();
    }
    let mut rng = seeded_rng(seed ^ 0x5eed);
    // Zero biases put ReLU pre-activations exactly on the kink whenever a unit's input is all zero.
    for group in [ParamGroup::Extractor, ParamGroup::Classifier, ParamGroup::DomainClassifier] {
        for p in model.params_mut(group) {
            if p.value.cols() == 1 {
                for v in p.value.data_mut() {
                    *v += rng.random_range(-0.1..0.1);
                }
            }
        }
    }
    for layer in &mut model.layers {
        for _ in 0..clusters_per_layer {
            let centre: Vec<f64> = (0..layer.width()).map(|_| rng.random_range(0.0..1.0)).collect();
            layer.clusters.push(Cluster::new(centre, DistanceStats { mean: 1.0, std: 0.5 }, 2));
        }
    }
    model
}

pub fn samples(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = seeded_rng(seed);
    let s = (0..4).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let t = (0..3).map(|_| (0..5).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    (s, t)
}

pub fn pooled<'a>(s: &'a [Vec<f64>], t: &'a [Vec<f64>]) -> Vec<(&'a [f64], Domain)> {
    s.iter()
        .map(|x| (x.as_slice(), Domain::Source))
        .chain(t.iter().map(|x| (x.as_slice(), Domain::Target)))
        .collect()
}

/// Largest relative error between `grads` and finite differences of `loss`
/// over the tensors of `group` selected by `pick`.
pub fn group_error<F>(
    model: &LeopardModel,
    grads: &ModelGradients,
    group: ParamGroup,
    pick: impl Fn(usize) -> bool,
    loss: F,
) -> f64
where
    F: Fn(&LeopardModel) -> f64,
{
    let analytic = grads.tensors(group);
    let n = model.params(group).len();
    assert_eq!(analytic.len(), n);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in (0..n).filter(|&i| pick(i)) {
        let numeric = finite_diff_gradient(
            |w: &Matrix| {
                let mut probe = model.clone();
                probe.params_mut(group)[i].value = w.clone();
                loss(&probe)
            },
            &model.params(group)[i].value,
            STEP,
        )
        .unwrap();
        worst = worst.max(max_relative_error(analytic[i], &numeric, FLOOR));
        checked += 1;
    }
    assert!(checked > 0);
    worst
}
