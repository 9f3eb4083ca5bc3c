//! Training schedule: warm-up on the prerecorded sample, cluster seeding from
//! the scarce labels, then per batch pair drift handling, node evolution,
//! joint clustering/reconstruction descent, adversarial domain alignment,
//! cluster growth and allegiance refresh.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    kl_loss, maybe_grow_cluster, nearest_neighbour_prior, predict, similarity_matrix,
    target_distribution, update_allegiance, PredictionTrace,
};
use crate::error::{invalid_arg, LeopardError, Result};
use crate::network::{reverse_gradient, Hyperparameters, LeopardModel, ModelGradients, ParamGroup, STACK_ACTIVATION};
use crate::numerics::{mean, seeded_rng, SeededRng};
use crate::stream::{Domain, HiddenLabels, Prerecorded, UnlabelledBatch};
use crate::structure::{
    DriftConfig, DriftDetector, DriftState, EventKind, EventStream, StructuralEvent,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub alpha_cd: f64,
    pub alpha_kl: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub init_epochs: usize,
    pub epochs: usize,
    pub domain_epochs: usize,
    pub minibatch_size: usize,
    pub drift: DriftConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        let h = Hyperparameters::default();
        LearnerConfig {
            alpha_cd: h.alpha_cd,
            alpha_kl: h.alpha_kl,
            lambda: h.lambda,
            learning_rate: h.learning_rate,
            momentum: h.momentum,
            init_epochs: 50,
            epochs: 5,
            domain_epochs: 1,
            minibatch_size: 16,
            drift: DriftConfig::default(),
        }
    }
}

impl LearnerConfig {
    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            alpha_cd: self.alpha_cd,
            alpha_kl: self.alpha_kl,
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_cd", self.alpha_cd), ("alpha_kl", self.alpha_kl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid_arg!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.lambda > 0.0) {
            return Err(invalid_arg!("lambda must be > 0, got {}", self.lambda));
        }
        if self.epochs == 0 {
            return Err(invalid_arg!("epochs must be >= 1"));
        }
        if self.minibatch_size == 0 {
            return Err(invalid_arg!("minibatch_size must be >= 1"));
        }
        crate::numerics::SgdMomentum::new(self.learning_rate, self.momentum)?;
        self.drift.validate()
    }
}

/// Which optional parts of the method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Switches {
    pub structure_learning: bool,
    pub kl_loss: bool,
    pub cd_loss: bool,
}

impl Switches {
    pub const FULL: Switches = Switches {
        structure_learning: true,
        kl_loss: true,
        cd_loss: true,
    };
    pub const NONE: Switches = Switches {
        structure_learning: false,
        kl_loss: false,
        cd_loss: false,
    };
}

impl Default for Switches {
    fn default() -> Self {
        Switches::FULL
    }
}

/// Loss values of one training step. `alpha_kl`/`alpha_cd` are the weights
/// actually applied (zero when the corresponding term is switched off).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_end_to_end: f64,
    pub layer_recon: Vec<f64>,
    pub layer_kl: Vec<f64>,
    pub cluster: f64,
    pub cd: f64,
    pub all: f64,
    pub alpha_kl: f64,
    pub alpha_cd: f64,
}

impl LossReport {
    /// Largest violation of the `L_cluster` and `L_all` decomposition identities.
    pub fn decomposition_error(&self) -> f64 {
        let layered: f64 = self
            .layer_recon
            .iter()
            .zip(&self.layer_kl)
            .map(|(r, k)| r + self.alpha_kl * k)
            .sum();
        let cluster_gap = (self.cluster - (self.recon_end_to_end + layered)).abs();
        let all_gap = (self.all - (self.cluster - self.alpha_cd * self.cd)).abs();
        cluster_gap.max(all_gap)
    }
}

/// Clustering-loss part of a [`LossReport`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterLoss {
    pub recon_end_to_end: f64,
    pub layer_recon: Vec<f64>,
    pub layer_kl: Vec<f64>,
    pub total: f64,
}

/// Self-training targets `Φ` for every layer over `samples` (empty for layers without clusters).
pub fn cluster_targets(model: &LeopardModel, samples: &[(&[f64], Domain)]) -> Result<Vec<Vec<Vec<f64>>>> {
    let latents = encode_all(model, samples)?;
    (0..model.depth())
        .map(|l| {
            let clusters = &model.layers[l].clusters;
            if clusters.is_empty() {
                return Ok(Vec::new());
            }
            let rows: Vec<Vec<f64>> = latents.iter().map(|h| h[l].clone()).collect();
            Ok(target_distribution(&similarity_matrix(&rows, clusters, model.hyper.lambda)?))
        })
        .collect()
}

fn encode_all(model: &LeopardModel, samples: &[(&[f64], Domain)]) -> Result<Vec<Vec<Vec<f64>>>> {
    samples
        .iter()
        .map(|(x, d)| {
            let z = model.extract(x, *d)?;
            model.encode(&z, model.depth())
        })
        .collect()
}

/// `L₁ + Σ_l (MSE(h^{l-1}, ĥ^{l-1}) + α₂ KL_l)` over a pooled batch with its gradients.
///
/// `L₁` is differentiated end to end; each layer's term only reaches that
/// layer's weights, biases and centroids. `targets[l][i]` is `Φ` of sample `i`
/// at layer `l`; when `None` the targets are derived from `samples` themselves.
/// `alpha_kl = 0` drops the KL terms.
pub fn compute_cluster_loss(
    model: &LeopardModel,
    samples: &[(&[f64], Domain)],
    targets: Option<&[Vec<Vec<f64>>]>,
    alpha_kl: f64,
) -> Result<(ClusterLoss, ModelGradients)> {
    if samples.is_empty() {
        return Err(invalid_arg!("cluster loss over an empty batch"));
    }
    let n = samples.len() as f64;
    let depth = model.depth();
    let mut grads = model.zero_gradients();
    let mut loss = ClusterLoss {
        layer_recon: vec![0.0; depth],
        layer_kl: vec![0.0; depth],
        ..ClusterLoss::default()
    };
    let mut traces = Vec::with_capacity(samples.len());
    for (x, d) in samples {
        let t = model.forward(x, *d)?;
        let dim = x.len() as f64;
        loss.recon_end_to_end += t.x_hat.iter().zip(*x).map(|(r, v)| (r - v).powi(2)).sum::<f64>() / (n * dim);
        model.backprop_reconstruction(&t, 1.0 / (n * dim), &mut grads);
        traces.push(t);
    }

    let owned_targets;
    let targets = match targets {
        Some(t) => Some(t),
        None if alpha_kl > 0.0 => {
            owned_targets = cluster_targets(model, samples)?;
            Some(owned_targets.as_slice())
        }
        None => None,
    };

    for l in 0..depth {
        let latents: Vec<Vec<f64>> = traces.iter().map(|t| t.latents[l].clone()).collect();
        let clusters = &model.layers[l].clusters;
        let kl = match targets {
            Some(t) if alpha_kl > 0.0 && !clusters.is_empty() => {
                let g = kl_loss(&latents, clusters, &t[l], model.hyper.lambda)?;
                loss.layer_kl[l] = g.loss;
                for (acc, c) in grads.layers[l].centroids.iter_mut().zip(&g.centroids) {
                    for (a, v) in acc.data_mut().iter_mut().zip(c) {
                        *a += alpha_kl * v;
                    }
                }
                Some(g.latents)
            }
            _ => None,
        };
        let width_in = model.layers[l].input_dim() as f64;
        let scale = 1.0 / (n * width_in);
        for (i, t) in traces.iter().enumerate() {
            let input = if l == 0 { &t.extractor.z } else { &t.latents[l - 1] };
            let extra: Option<Vec<f64>> = kl.as_ref().map(|g| g[i].iter().map(|v| alpha_kl * v).collect());
            let sq = model.backprop_layer_local(l, input, &t.latents[l], extra.as_deref(), scale, &mut grads.layers[l])?;
            loss.layer_recon[l] += sq * scale;
        }
    }
    loss.total = loss.recon_end_to_end
        + loss
            .layer_recon
            .iter()
            .zip(&loss.layer_kl)
            .map(|(r, k)| r + alpha_kl * k)
            .sum::<f64>();
    if !loss.total.is_finite() {
        return Err(LeopardError::NumericFailure("non-finite clustering loss".into()));
    }
    Ok((loss, grads))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-mean_S ln p(x) - mean_T ln(1 - p(x))` with gradients: the domain
/// classifier receives the plain gradient, the extractor the gradient passed
/// through the reversal layer (`-α₁` times the plain one).
pub fn compute_cd_loss(
    model: &LeopardModel,
    source: &[&[f64]],
    target: &[&[f64]],
    alpha_cd: f64,
) -> Result<(f64, ModelGradients)> {
    if source.is_empty() || target.is_empty() {
        return Err(invalid_arg!("domain loss needs both streams"));
    }
    let mut grads = model.zero_gradients();
    let mut loss = 0.0;
    for (samples, domain) in [(source, Domain::Source), (target, Domain::Target)] {
        let n = samples.len() as f64;
        for x in samples {
            let ext = model.extractor.forward(x, domain)?;
            let tr = model.domain_classifier.forward(&ext.z)?;
            let p = crate::numerics::sigmoid(tr.logit);
            let (l, g_logit) = match domain {
                Domain::Source => (softplus(-tr.logit), p - 1.0),
                Domain::Target => (softplus(tr.logit), p),
            };
            loss += l / n;
            let g_z = model.backprop_domain(&ext.z, &tr, g_logit / n, &mut grads.domain);
            model.backprop_extractor(&ext, domain, &reverse_gradient(&g_z, alpha_cd), &mut grads);
        }
    }
    if !loss.is_finite() {
        return Err(LeopardError::NumericFailure("non-finite domain loss".into()));
    }
    Ok((loss, grads))
}

/// Trains extractor and stack on reconstruction only. Returns the
/// end-to-end reconstruction error measured at the start of every epoch plus
/// the final value.
pub fn warm_up(
    model: &mut LeopardModel,
    samples: &[(&[f64], Domain)],
    epochs: usize,
    minibatch: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(invalid_arg!("warm-up needs a non-empty prerecorded sample"));
    }
    let mut curve = Vec::with_capacity(epochs + 1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..epochs {
        curve.push(reconstruction_error(model, samples)?);
        order.shuffle(rng);
        for chunk in order.chunks(minibatch.max(1)) {
            let mb: Vec<(&[f64], Domain)> = chunk.iter().map(|&i| samples[i]).collect();
            let (_, g) = compute_cluster_loss(model, &mb, None, 0.0)?;
            model.apply_updates(&g, ParamGroup::Extractor)?;
            model.apply_updates(&g, ParamGroup::Classifier)?;
        }
    }
    curve.push(reconstruction_error(model, samples)?);
    Ok(curve)
}

/// Mean end-to-end reconstruction error `MSE(x, x̂)`.
pub fn reconstruction_error(model: &LeopardModel, samples: &[(&[f64], Domain)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, d) in samples {
        let t = model.forward(x, *d)?;
        total += t.x_hat.iter().zip(*x).map(|(r, v)| (r - v).powi(2)).sum::<f64>() / x.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains only layer `layer` on its own reconstruction of `inputs`.
pub fn warm_up_layer(
    model: &mut LeopardModel,
    layer: usize,
    inputs: &[Vec<f64>],
    epochs: usize,
    minibatch: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    if inputs.is_empty() {
        return Err(invalid_arg!("layer warm-up needs inputs"));
    }
    let opt = model.optimizer()?;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(minibatch.max(1)) {
            let mut grads = model.zero_gradients();
            let scale = 1.0 / (chunk.len() * model.layers[layer].input_dim()) as f64;
            for &i in chunk {
                let h = model.layers[layer].tied.encode(&inputs[i], STACK_ACTIVATION)?;
                model.backprop_layer_local(layer, &inputs[i], &h, None, scale, &mut grads.layers[layer])?;
            }
            let g = &grads.layers[layer].tied;
            if !(g.weight.is_finite() && g.enc_bias.is_finite() && g.dec_bias.is_finite()) {
                return Err(LeopardError::NumericFailure("non-finite layer warm-up gradient".into()));
            }
            let t = &mut model.layers[layer].tied;
            opt.step(&mut t.weight, &g.weight)?;
            opt.step(&mut t.enc_bias, &g.enc_bias)?;
            opt.step(&mut t.dec_bias, &g.dec_bias)?;
        }
    }
    Ok(())
}

/// A source/target batch pair. A stale batch (its stream already exhausted)
/// only feeds the domain loss.
#[derive(Debug, Clone, Copy)]
pub struct BatchPair<'a> {
    pub index: usize,
    pub source: &'a UnlabelledBatch,
    pub target: &'a UnlabelledBatch,
    pub source_fresh: bool,
    pub target_fresh: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub batch: usize,
    pub losses: Option<LossReport>,
    pub events: Vec<StructuralEvent>,
    pub skipped: bool,
    pub clusters_grown: usize,
}

/// Owns a model and runs the streaming schedule on it.
#[derive(Debug, Clone)]
pub struct Learner {
    model: LeopardModel,
    config: LearnerConfig,
    switches: Switches,
    prerecorded: Prerecorded,
    source_detector: DriftDetector,
    target_detector: DriftDetector,
    /// Last fresh batch of each stream, kept so that both halves of the drift
    /// window are measured with the same model.
    previous_source: Option<UnlabelledBatch>,
    previous_target: Option<UnlabelledBatch>,
    rng: SeededRng,
    clusters_initialized: bool,
    skipped_batches: usize,
}

impl Learner {
    pub fn new(
        mut model: LeopardModel,
        config: LearnerConfig,
        switches: Switches,
        prerecorded: Prerecorded,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if prerecorded.is_empty() {
            return Err(invalid_arg!("prerecorded sample is empty"));
        }
        model.hyper = config.hyperparameters();
        Ok(Learner {
            model,
            source_detector: DriftDetector::new(config.drift),
            target_detector: DriftDetector::new(config.drift),
            config,
            switches,
            prerecorded,
            previous_source: None,
            previous_target: None,
            rng: seeded_rng(seed),
            clusters_initialized: false,
            skipped_batches: 0,
        })
    }

    pub fn model(&self) -> &LeopardModel {
        &self.model
    }

    pub fn into_model(self) -> LeopardModel {
        self.model
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn switches(&self) -> Switches {
        self.switches
    }

    pub fn prerecorded(&self) -> &Prerecorded {
        &self.prerecorded
    }

    pub fn skipped_batches(&self) -> usize {
        self.skipped_batches
    }

    fn alpha_kl(&self) -> f64 {
        if self.switches.kl_loss {
            self.config.alpha_kl
        } else {
            0.0
        }
    }

    fn alpha_cd(&self) -> f64 {
        if self.switches.cd_loss {
            self.config.alpha_cd
        } else {
            0.0
        }
    }

    /// Reconstruction-only pretraining on every prerecorded feature vector.
    pub fn warm_up(&mut self) -> Result<Vec<f64>> {
        let samples: Vec<(&[f64], Domain)> = self
            .prerecorded
            .features
            .iter()
            .map(|x| (x.as_slice(), Domain::Source))
            .collect();
        warm_up(
            &mut self.model,
            &samples,
            self.config.init_epochs,
            self.config.minibatch_size,
            &mut self.rng,
        )
    }

    fn labelled_latents(&self, layer: usize) -> Result<Vec<(Vec<f64>, usize)>> {
        self.prerecorded
            .labelled()
            .map(|(x, y)| {
                let z = self.model.extract(x, Domain::Source)?;
                let h = self.model.encode(&z, layer + 1)?;
                Ok((h[layer].clone(), y))
            })
            .collect()
    }

    fn seed_layer_clusters(&mut self, layer: usize) -> Result<()> {
        let labelled = self.labelled_latents(layer)?;
        if labelled.is_empty() {
            return Err(LeopardError::InvalidState("no labelled prerecorded samples".into()));
        }
        let latents: Vec<Vec<f64>> = labelled.iter().map(|(h, _)| h.clone()).collect();
        let prior = nearest_neighbour_prior(&latents);
        let m = self.model.config.n_classes;
        let clusters = &mut self.model.layers[layer].clusters;
        for h in &latents {
            maybe_grow_cluster(clusters, h, m, prior);
        }
        update_allegiance(clusters, &labelled, m, self.model.hyper.lambda)
    }

    /// Seeds every layer's clusters from the labelled prerecorded samples.
    pub fn init_clusters(&mut self) -> Result<()> {
        if self.clusters_initialized {
            return Err(LeopardError::InvalidState(
                "clusters already initialized; reset them first".into(),
            ));
        }
        for l in 0..self.model.depth() {
            self.seed_layer_clusters(l)?;
        }
        self.clusters_initialized = true;
        Ok(())
    }

    /// Drops every cluster so that [`Learner::init_clusters`] may run again.
    pub fn reset_clusters(&mut self) {
        for layer in &mut self.model.layers {
            layer.clusters.clear();
        }
        self.clusters_initialized = false;
    }

    /// Recomputes every layer's allegiance from re-encoded labelled prerecorded samples.
    pub fn refresh_allegiance(&mut self) -> Result<()> {
        let m = self.model.config.n_classes;
        let lambda = self.model.hyper.lambda;
        for l in 0..self.model.depth() {
            let labelled = self.labelled_latents(l)?;
            update_allegiance(&mut self.model.layers[l].clusters, &labelled, m, lambda)?;
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64], domain: Domain) -> Result<PredictionTrace> {
        predict(&self.model, x, domain)
    }

    /// Fraction of the batch whose prediction matches the hidden labels. Takes
    /// `&self`: evaluation cannot change the model.
    pub fn evaluate_batch(&self, batch: &UnlabelledBatch, labels: &HiddenLabels) -> Result<f64> {
        evaluate_with(batch, labels, |x, d| Ok(self.predict(x, d)?.label))
    }

    /// One step of the streaming schedule on a batch pair.
    pub fn train_on_batch_pair(&mut self, pair: BatchPair<'_>) -> Result<BatchReport> {
        if !self.clusters_initialized {
            return Err(LeopardError::InvalidState("train_on_batch_pair before init_clusters".into()));
        }
        let snapshot = (
            self.model.clone(),
            self.source_detector.clone(),
            self.target_detector.clone(),
            self.previous_source.clone(),
            self.previous_target.clone(),
        );
        match self.train_inner(pair) {
            Err(LeopardError::NumericFailure(msg)) => {
                log::warn!("batch {} skipped: {msg}", pair.index);
                (
                    self.model,
                    self.source_detector,
                    self.target_detector,
                    self.previous_source,
                    self.previous_target,
                ) = snapshot;
                self.skipped_batches += 1;
                Ok(BatchReport {
                    batch: pair.index,
                    losses: None,
                    events: Vec::new(),
                    skipped: true,
                    clusters_grown: 0,
                })
            }
            other => other,
        }
    }

    fn train_inner(&mut self, pair: BatchPair<'_>) -> Result<BatchReport> {
        let mut events = Vec::new();
        let mut fresh: Vec<(&[f64], Domain)> = Vec::new();
        for (batch, is_fresh) in [(pair.source, pair.source_fresh), (pair.target, pair.target_fresh)] {
            if is_fresh {
                fresh.extend(batch.features().iter().map(|x| (x.as_slice(), batch.domain())));
            } else {
                log::info!(
                    "batch pair {}: reusing {} batch {} for the domain loss only",
                    pair.index,
                    batch.domain(),
                    batch.batch_index()
                );
            }
        }

        if self.switches.structure_learning {
            self.handle_drift(&pair, &mut events)?;
            if !fresh.is_empty() {
                self.evolve_nodes(pair.index, &fresh, &mut events)?;
            }
        }

        let alpha_kl = self.alpha_kl();
        let alpha_cd = self.alpha_cd();
        let mut report = LossReport {
            alpha_kl,
            alpha_cd,
            ..LossReport::default()
        };
        if !fresh.is_empty() {
            let (loss, _) = compute_cluster_loss(&self.model, &fresh, None, alpha_kl)?;
            report.recon_end_to_end = loss.recon_end_to_end;
            report.layer_recon = loss.layer_recon;
            report.layer_kl = loss.layer_kl;
            report.cluster = loss.total;
            for _ in 0..self.config.epochs {
                let targets = if alpha_kl > 0.0 {
                    Some(cluster_targets(&self.model, &fresh)?)
                } else {
                    None
                };
                let mut order: Vec<usize> = (0..fresh.len()).collect();
                order.shuffle(&mut self.rng);
                for chunk in order.chunks(self.config.minibatch_size) {
                    let mb: Vec<(&[f64], Domain)> = chunk.iter().map(|&i| fresh[i]).collect();
                    let mb_targets: Option<Vec<Vec<Vec<f64>>>> = targets.as_ref().map(|t| {
                        t.iter()
                            .map(|layer| {
                                if layer.is_empty() {
                                    Vec::new()
                                } else {
                                    chunk.iter().map(|&i| layer[i].clone()).collect()
                                }
                            })
                            .collect()
                    });
                    let (_, g) = compute_cluster_loss(&self.model, &mb, mb_targets.as_deref(), alpha_kl)?;
                    self.model.apply_updates(&g, ParamGroup::Extractor)?;
                    self.model.apply_updates(&g, ParamGroup::Classifier)?;
                }
            }
        }

        if self.switches.cd_loss {
            let source: Vec<&[f64]> = pair.source.features().iter().map(Vec::as_slice).collect();
            let target: Vec<&[f64]> = pair.target.features().iter().map(Vec::as_slice).collect();
            let (cd, _) = compute_cd_loss(&self.model, &source, &target, alpha_cd)?;
            report.cd = cd;
            for _ in 0..self.config.domain_epochs {
                self.domain_epoch(&source, &target, alpha_cd)?;
            }
        }
        report.all = report.cluster - alpha_cd * report.cd;

        let mut clusters_grown = 0;
        if self.switches.structure_learning && !fresh.is_empty() {
            clusters_grown = self.grow_clusters(&fresh)?;
        }
        self.refresh_allegiance()?;
        Ok(BatchReport {
            batch: pair.index,
            losses: Some(report),
            events,
            skipped: false,
            clusters_grown,
        })
    }

    fn domain_epoch(&mut self, source: &[&[f64]], target: &[&[f64]], alpha_cd: f64) -> Result<()> {
        let mut s_order: Vec<usize> = (0..source.len()).collect();
        let mut t_order: Vec<usize> = (0..target.len()).collect();
        s_order.shuffle(&mut self.rng);
        t_order.shuffle(&mut self.rng);
        let steps = (source.len() + target.len()).div_ceil(self.config.minibatch_size).max(1);
        let s_chunk = source.len().div_ceil(steps).max(1);
        let t_chunk = target.len().div_ceil(steps).max(1);
        for (s, t) in s_order.chunks(s_chunk).zip(t_order.chunks(t_chunk)) {
            let src: Vec<&[f64]> = s.iter().map(|&i| source[i]).collect();
            let tgt: Vec<&[f64]> = t.iter().map(|&i| target[i]).collect();
            let (_, mut g) = compute_cd_loss(&self.model, &src, &tgt, alpha_cd)?;
            g.scale(ParamGroup::DomainClassifier, alpha_cd);
            self.model.apply_updates(&g, ParamGroup::DomainClassifier)?;
            self.model.apply_updates(&g, ParamGroup::Extractor)?;
        }
        Ok(())
    }

    fn handle_drift(&mut self, pair: &BatchPair<'_>, events: &mut Vec<StructuralEvent>) -> Result<()> {
        let mut drifted = None;
        for (batch, is_fresh, stream) in [
            (pair.source, pair.source_fresh, EventStream::Source),
            (pair.target, pair.target_fresh, EventStream::Target),
        ] {
            if !is_fresh {
                continue;
            }
            let statistic = |b: &UnlabelledBatch| -> Result<Vec<f64>> {
                b.features()
                    .iter()
                    .map(|x| self.model.extract(x, b.domain()).map(|z| mean(&z)))
                    .collect()
            };
            let current = statistic(batch)?;
            let (detector, previous) = match stream {
                EventStream::Source => (&mut self.source_detector, &mut self.previous_source),
                _ => (&mut self.target_detector, &mut self.previous_target),
            };
            let before = match previous.as_ref() {
                Some(p) => Some(
                    p.features()
                        .iter()
                        .map(|x| self.model.extract(x, p.domain()).map(|z| mean(&z)))
                        .collect::<Result<Vec<f64>>>()?,
                ),
                None => None,
            };
            *previous = Some(batch.clone());
            let state = detector.update_with_previous(before.as_deref(), &current);
            let kind = match state {
                DriftState::Stable => continue,
                DriftState::Warning => EventKind::Warning,
                DriftState::Drift => {
                    detector.acknowledge_drift();
                    drifted.get_or_insert(stream);
                    EventKind::Drift
                }
            };
            events.push(StructuralEvent {
                batch: pair.index,
                stream,
                event: kind,
                layer: None,
                detail: format!("{} batch {}", batch.domain(), batch.batch_index()),
            });
        }
        if let Some(stream) = drifted {
            let seed = self.rng.random();
            let width = self.model.add_layer(seed)?;
            let layer = self.model.depth() - 1;
            self.initialize_new_layer(layer)?;
            events.push(StructuralEvent {
                batch: pair.index,
                stream,
                event: EventKind::AddLayer,
                layer: Some(layer),
                detail: format!(
                    "width {width}, {} clusters",
                    self.model.layers[layer].clusters.len()
                ),
            });
        }
        Ok(())
    }

    /// Warm-up of a freshly added layer on the prerecorded sample, then its cluster seeding.
    fn initialize_new_layer(&mut self, layer: usize) -> Result<()> {
        let inputs: Vec<Vec<f64>> = self
            .prerecorded
            .features
            .iter()
            .map(|x| {
                let z = self.model.extract(x, Domain::Source)?;
                Ok(if layer == 0 {
                    z
                } else {
                    self.model.encode(&z, layer)?.pop().expect("layer > 0")
                })
            })
            .collect::<Result<_>>()?;
        warm_up_layer(
            &mut self.model,
            layer,
            &inputs,
            self.config.init_epochs,
            self.config.minibatch_size,
            &mut self.rng,
        )?;
        self.seed_layer_clusters(layer)
    }

    /// Control-chart driven node growing and pruning, one decision per layer at most.
    fn evolve_nodes(&mut self, batch: usize, fresh: &[(&[f64], Domain)], events: &mut Vec<StructuralEvent>) -> Result<()> {
        let features: Vec<Vec<f64>> = fresh
            .iter()
            .map(|(x, d)| self.model.extract(x, *d))
            .collect::<Result<_>>()?;
        for l in 0..self.model.depth() {
            let inputs: Vec<Vec<f64>> = features
                .iter()
                .map(|z| {
                    Ok(if l == 0 {
                        z.clone()
                    } else {
                        self.model.encode(z, l)?.pop().expect("l > 0")
                    })
                })
                .collect::<Result<_>>()?;
            let mut grow = false;
            let mut variances = Vec::with_capacity(inputs.len());
            {
                let layer = &mut self.model.layers[l];
                for x in &inputs {
                    let h = layer.tied.encode(x, STACK_ACTIVATION)?;
                    let rec = layer.tied.decode(&h, STACK_ACTIVATION)?;
                    layer.contribution.observe(&h);
                    let obs = layer.spc.observe(x, &rec)?;
                    variances.push(obs.variance);
                    if !grow && layer.spc.should_grow_node(obs.bias) {
                        grow = true;
                    }
                }
            }
            if grow {
                let seed = self.rng.random();
                self.model.grow_node(l, &inputs, seed)?;
                events.push(StructuralEvent {
                    batch,
                    stream: EventStream::Pooled,
                    event: EventKind::GrowNode,
                    layer: Some(l),
                    detail: format!("width {}", self.model.layers[l].width()),
                });
            } else if self.model.layers[l].spc.should_prune_node(mean(&variances)) {
                if let Some(node) = self.model.layers[l].contribution.prune_candidate() {
                    self.model.prune_node(l, node)?;
                    events.push(StructuralEvent {
                        batch,
                        stream: EventStream::Pooled,
                        event: EventKind::PruneNode,
                        layer: Some(l),
                        detail: format!("node {node}, width {}", self.model.layers[l].width()),
                    });
                } else {
                    log::info!("layer {l}: pruning suppressed at the minimum width");
                }
            }
        }
        Ok(())
    }

    fn grow_clusters(&mut self, fresh: &[(&[f64], Domain)]) -> Result<usize> {
        let latents = encode_all(&self.model, fresh)?;
        let m = self.model.config.n_classes;
        let mut grown = 0;
        for l in 0..self.model.depth() {
            let rows: Vec<Vec<f64>> = latents.iter().map(|h| h[l].clone()).collect();
            let prior = nearest_neighbour_prior(&rows);
            let clusters = &mut self.model.layers[l].clusters;
            for h in &rows {
                if maybe_grow_cluster(clusters, h, m, prior).grew() {
                    grown += 1;
                }
            }
        }
        Ok(grown)
    }
}

/// Shared evaluation loop: reveals the hidden labels once and scores `predict_label`.
pub fn evaluate_with<F>(batch: &UnlabelledBatch, labels: &HiddenLabels, mut predict_label: F) -> Result<f64>
where
    F: FnMut(&[f64], Domain) -> Result<usize>,
{
    if labels.len() != batch.len() || labels.batch_index() != batch.batch_index() || labels.domain() != batch.domain() {
        return Err(invalid_arg!(
            "evaluation labels ({} {} #{}) do not belong to {} batch #{} of {} samples",
            labels.len(),
            labels.domain(),
            labels.batch_index(),
            batch.domain(),
            batch.batch_index(),
            batch.len()
        ));
    }
    if batch.is_empty() {
        return Err(invalid_arg!("cannot evaluate an empty batch"));
    }
    let truth = labels.reveal();
    let mut correct = 0usize;
    for (x, &y) in batch.features().iter().zip(truth) {
        if predict_label(x, batch.domain())? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    use crate::network::ModelConfig;

    fn tiny_model(seed: u64) -> LeopardModel {
        let config = ModelConfig {
            source_dim: 3,
            target_dim: 4,
            n_classes: 2,
            adapter_dim: 4,
            extractor_hidden: 5,
            feature_dim: 4,
            initial_width: 4,
            domain_hidden: 3,
        };
        LeopardModel::new(config, Hyperparameters::default(), seed).unwrap()
    }

    fn prerecorded(n: usize) -> Prerecorded {
        let mut rng = seeded_rng(4);
        let features: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let base = if i % 2 == 0 { 0.2 } else { 0.8 };
                (0..3).map(|_| base + 0.05 * rng.random::<f64>()).collect()
            })
            .collect();
        Prerecorded {
            labels: (0..n).map(|i| Some(i % 2)).collect(),
            features,
            n_classes: 2,
        }
    }

    #[test]
    fn cd_loss_at_chance_is_two_ln_two() {
        let mut m = tiny_model(1);
        m.domain_classifier.output.weight.value.fill(0.0);
        let s = [vec![0.1, 0.2, 0.3]];
        let t = [vec![0.4, 0.3, 0.2, 0.1]];
        let (l, _) = compute_cd_loss(
            &m,
            &s.iter().map(Vec::as_slice).collect::<Vec<_>>(),
            &t.iter().map(Vec::as_slice).collect::<Vec<_>>(),
            0.1,
        )
        .unwrap();
        assert_abs_diff_eq!(l, 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 1.3863, epsilon = 1e-4);
    }

    #[test]
    fn extractor_gradient_is_reversed_and_scaled() {
        let m = tiny_model(2);
        let s = [vec![0.1, 0.7, 0.3]];
        let t = [vec![0.4, 0.9, 0.2, 0.1]];
        let s: Vec<&[f64]> = s.iter().map(Vec::as_slice).collect();
        let t: Vec<&[f64]> = t.iter().map(Vec::as_slice).collect();
        let (_, plain) = compute_cd_loss(&m, &s, &t, -1.0).unwrap();
        let (_, rev) = compute_cd_loss(&m, &s, &t, 0.1).unwrap();
        for (a, b) in rev.tensors(ParamGroup::Extractor).iter().zip(plain.tensors(ParamGroup::Extractor)) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_abs_diff_eq!(*x, -0.1 * y, epsilon = 1e-15);
            }
        }
        assert_eq!(rev.domain, plain.domain);
    }

    #[test]
    fn kl_weight_zero_is_pure_reconstruction() {
        let mut learner = Learner::new(tiny_model(3), LearnerConfig::default(), Switches::FULL, prerecorded(10), 1).unwrap();
        learner.init_clusters().unwrap();
        let p = prerecorded(6);
        let samples: Vec<(&[f64], Domain)> = p.features.iter().map(|x| (x.as_slice(), Domain::Source)).collect();
        let (l, g) = compute_cluster_loss(learner.model(), &samples, None, 0.0).unwrap();
        assert!(l.layer_kl.iter().all(|v| *v == 0.0));
        assert_abs_diff_eq!(l.total, l.recon_end_to_end + l.layer_recon.iter().sum::<f64>(), epsilon = 1e-15);
        assert!(g.layers.iter().flat_map(|lg| &lg.centroids).all(|c| c.max_abs() == 0.0));
    }

    #[test]
    fn warm_up_reduces_reconstruction_error() {
        let mut m = tiny_model(5);
        let x = vec![0.3, 0.6, 0.9];
        let samples = vec![(x.as_slice(), Domain::Source); 8];
        let mut rng = seeded_rng(0);
        let curve = warm_up(&mut m, &samples, 40, 4, &mut rng).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        assert_eq!(m.total_clusters(), 0);

        let before = m.clone();
        warm_up(&mut m, &samples, 0, 4, &mut rng).unwrap();
        assert_eq!(m, before);
        assert!(warm_up(&mut m, &[], 1, 4, &mut rng).is_err());
    }

    #[test]
    fn init_clusters_examples() {
        let one = Prerecorded {
            features: vec![vec![0.5, 0.5, 0.5]],
            labels: vec![Some(1)],
            n_classes: 2,
        };
        let mut learner = Learner::new(tiny_model(6), LearnerConfig::default(), Switches::FULL, one, 1).unwrap();
        learner.init_clusters().unwrap();
        assert_eq!(learner.model().layers[0].clusters.len(), 1);
        assert_eq!(learner.model().layers[0].clusters[0].allegiance, vec![0.0, 1.0]);
        assert!(matches!(learner.init_clusters(), Err(LeopardError::InvalidState(_))));
        learner.reset_clusters();
        learner.init_clusters().unwrap();
    }

    #[test]
    fn evaluation_checks_labels_and_leaves_model_alone() {
        let mut learner = Learner::new(tiny_model(7), LearnerConfig::default(), Switches::FULL, prerecorded(10), 1).unwrap();
        learner.init_clusters().unwrap();
        let batch = UnlabelledBatch::new(prerecorded(4).features, Domain::Source, 1);
        let labels = HiddenLabels::new(vec![0, 1, 0, 1], Domain::Source, 1);
        let before = learner.model().clone();
        let acc = learner.evaluate_batch(&batch, &labels).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(learner.model(), &before);
        assert_eq!(labels.read_count(), 1);

        let wrong = HiddenLabels::new(vec![0, 1], Domain::Source, 1);
        assert!(matches!(learner.evaluate_batch(&batch, &wrong), Err(LeopardError::InvalidArgument(_))));

        let perfect = evaluate_with(&batch, &labels, |_, _| Ok(0)).unwrap();
        assert_abs_diff_eq!(perfect, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn training_keeps_cluster_count_monotone_and_losses_consistent() {
        let config = LearnerConfig {
            init_epochs: 5,
            epochs: 2,
            ..LearnerConfig::default()
        };
        let mut learner = Learner::new(tiny_model(8), config, Switches::FULL, prerecorded(20), 3).unwrap();
        learner.warm_up().unwrap();
        learner.init_clusters().unwrap();
        let mut rng = seeded_rng(9);
        for k in 1..=6 {
            let s = UnlabelledBatch::new(
                (0..20).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect(),
                Domain::Source,
                k,
            );
            let t = UnlabelledBatch::new(
                (0..24).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect(),
                Domain::Target,
                k,
            );
            let before = learner.model().total_clusters();
            let r = learner
                .train_on_batch_pair(BatchPair {
                    index: k,
                    source: &s,
                    target: &t,
                    source_fresh: true,
                    target_fresh: true,
                })
                .unwrap();
            assert!(learner.model().total_clusters() >= before);
            let losses = r.losses.unwrap();
            assert!(losses.decomposition_error() < 1e-9);
            learner.model().check_consistency().unwrap();
        }
    }

    #[test]
    fn degenerate_configuration_is_streaming_autoencoder() {
        let config = LearnerConfig {
            epochs: 1,
            domain_epochs: 0,
            alpha_kl: 0.0,
            ..LearnerConfig::default()
        };
        let switches = Switches {
            structure_learning: false,
            kl_loss: true,
            cd_loss: true,
        };
        let mut learner = Learner::new(tiny_model(10), config, switches, prerecorded(10), 3).unwrap();
        learner.init_clusters().unwrap();
        let domain_before = learner.model().domain_classifier.clone();
        let clusters_before: Vec<_> = learner.model().layers[0].clusters.iter().map(|c| c.centroid.clone()).collect();
        let s = UnlabelledBatch::new(prerecorded(6).features, Domain::Source, 1);
        let t = UnlabelledBatch::new(vec![vec![0.5; 4]; 6], Domain::Target, 1);
        learner
            .train_on_batch_pair(BatchPair {
                index: 1,
                source: &s,
                target: &t,
                source_fresh: true,
                target_fresh: true,
            })
            .unwrap();
        assert_eq!(learner.model().domain_classifier, domain_before);
        let after: Vec<_> = learner.model().layers[0].clusters.iter().map(|c| c.centroid.clone()).collect();
        assert_eq!(after, clusters_before);
    }
}
