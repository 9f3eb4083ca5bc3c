//! The three learnable sub-networks and their hand-written backward passes.
//!
//! * feature extractor: a linear adapter per stream into a shared dimension,
//!   then two rectifier layers shared by both streams. Its decoder mirrors it
//!   with tied weights and ends in a sigmoid on the raw feature space.
//! * classifier body: a stack of tied-weight autoencoder layers, each with its
//!   own cluster set, control charts and node-contribution statistics.
//! * domain classifier: one rectifier hidden layer and a sigmoid output unit.
//!
//! Every weight matrix is stored once; decoders read it transposed, so the
//! tied-weight invariant cannot be broken by updates or structural edits.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::Cluster;
use crate::error::{invalid_arg, LeopardError, Result};
use crate::numerics::{
    relu, seeded_rng, sigmoid, xavier_bound, xavier_with, Matrix, Param, SeededRng, SgdMomentum,
};
use crate::stream::Domain;
use crate::structure::{ActivationContribution, SpcStats, MIN_LAYER_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Rectifier,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Rectifier => relu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Rectifier => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// An encoder matrix `W` (width x input) with encoder bias `b` and decoder bias
/// `c`; the decoder weight is `Wᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiedLayer {
    pub weight: Param,
    pub enc_bias: Param,
    pub dec_bias: Param,
}

impl TiedLayer {
    pub fn xavier(rng: &mut SeededRng, input: usize, width: usize) -> Result<Self> {
        Ok(TiedLayer {
            weight: Param::new(xavier_with(rng, input, width)?),
            enc_bias: Param::zeros(width, 1),
            dec_bias: Param::zeros(input, 1),
        })
    }

    pub fn from_parts(weight: Matrix, enc_bias: Vec<f64>, dec_bias: Vec<f64>) -> Result<Self> {
        if enc_bias.len() != weight.rows() || dec_bias.len() != weight.cols() {
            return Err(invalid_arg!(
                "biases of length {}/{} do not fit a {}x{} weight",
                enc_bias.len(),
                dec_bias.len(),
                weight.rows(),
                weight.cols()
            ));
        }
        Ok(TiedLayer {
            weight: Param::new(weight),
            enc_bias: Param::new(Matrix::column(enc_bias)),
            dec_bias: Param::new(Matrix::column(dec_bias)),
        })
    }

    pub fn width(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.cols()
    }

    /// The decoder weight, always `Wᵀ`.
    pub fn decoder_weight(&self) -> Matrix {
        self.weight.value.transpose()
    }

    pub fn encode(&self, x: &[f64], act: Activation) -> Result<Vec<f64>> {
        let mut y = self.weight.value.matvec(x)?;
        for (v, b) in y.iter_mut().zip(self.enc_bias.value.data()) {
            *v = act.apply(*v + b);
        }
        Ok(y)
    }

    pub fn decode(&self, h: &[f64], act: Activation) -> Result<Vec<f64>> {
        let mut y = self.weight.value.tmatvec(h)?;
        for (v, c) in y.iter_mut().zip(self.dec_bias.value.data()) {
            *v = act.apply(*v + c);
        }
        Ok(y)
    }

    /// Accumulates the encoder-side gradient of `y = act(W x + b)` and returns `∂/∂x`.
    fn backward_encode(&self, x: &[f64], y: &[f64], g_y: &[f64], act: Activation, grad: &mut TiedGrad) -> Vec<f64> {
        let g_pre: Vec<f64> = g_y
            .iter()
            .zip(y)
            .map(|(g, y)| g * act.derivative_from_output(*y))
            .collect();
        for (b, g) in grad.enc_bias.data_mut().iter_mut().zip(&g_pre) {
            *b += g;
        }
        grad.weight.add_outer(1.0, &g_pre, x);
        self.weight.value.tmatvec(&g_pre).expect("shape checked by forward pass")
    }

    /// Accumulates the decoder-side gradient of `y = act(Wᵀ h + c)` and returns `∂/∂h`.
    fn backward_decode(&self, h: &[f64], y: &[f64], g_y: &[f64], act: Activation, grad: &mut TiedGrad) -> Vec<f64> {
        let g_pre: Vec<f64> = g_y
            .iter()
            .zip(y)
            .map(|(g, y)| g * act.derivative_from_output(*y))
            .collect();
        for (c, g) in grad.dec_bias.data_mut().iter_mut().zip(&g_pre) {
            *c += g;
        }
        grad.weight.add_outer(1.0, h, &g_pre);
        self.weight.value.matvec(&g_pre).expect("shape checked by forward pass")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiedGrad {
    pub weight: Matrix,
    pub enc_bias: Matrix,
    pub dec_bias: Matrix,
}

impl TiedGrad {
    pub fn zeros_like(layer: &TiedLayer) -> Self {
        TiedGrad {
            weight: Matrix::zeros(layer.width(), layer.input_dim()),
            enc_bias: Matrix::zeros(layer.width(), 1),
            dec_bias: Matrix::zeros(layer.input_dim(), 1),
        }
    }

    fn tensors(&self) -> [&Matrix; 3] {
        [&self.weight, &self.enc_bias, &self.dec_bias]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.weight, &mut self.enc_bias, &mut self.dec_bias]
    }
}

fn tied_params(layer: &TiedLayer) -> [&Param; 3] {
    [&layer.weight, &layer.enc_bias, &layer.dec_bias]
}

fn tied_params_mut(layer: &mut TiedLayer) -> [&mut Param; 3] {
    [&mut layer.weight, &mut layer.enc_bias, &mut layer.dec_bias]
}

/// Plain affine layer `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Param,
    pub bias: Param,
}

impl DenseLayer {
    fn xavier(rng: &mut SeededRng, input: usize, width: usize) -> Result<Self> {
        Ok(DenseLayer {
            weight: Param::new(xavier_with(rng, input, width)?),
            bias: Param::zeros(width, 1),
        })
    }

    fn affine(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.value.matvec(x)?;
        for (v, b) in y.iter_mut().zip(self.bias.value.data()) {
            *v += b;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl DenseGrad {
    fn zeros_like(layer: &DenseLayer) -> Self {
        DenseGrad {
            weight: Matrix::zeros(layer.weight.value.rows(), layer.weight.value.cols()),
            bias: Matrix::zeros(layer.bias.value.rows(), 1),
        }
    }
}

pub const ADAPTER_ENCODER: Activation = Activation::Identity;
pub const ADAPTER_DECODER: Activation = Activation::Sigmoid;
pub const HIDDEN_ENCODER: Activation = Activation::Rectifier;
pub const HIDDEN_DECODER: Activation = Activation::Identity;
pub const FEATURE_ENCODER: Activation = Activation::Rectifier;
pub const FEATURE_DECODER: Activation = Activation::Rectifier;
/// Activation of every stacked-autoencoder encoder and decoder.
pub const STACK_ACTIVATION: Activation = Activation::Rectifier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub source_adapter: TiedLayer,
    pub target_adapter: TiedLayer,
    pub hidden: TiedLayer,
    pub output: TiedLayer,
}

/// Intermediate values of one extractor pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorTrace {
    pub x: Vec<f64>,
    pub adapted: Vec<f64>,
    pub hidden: Vec<f64>,
    pub z: Vec<f64>,
}

impl FeatureExtractor {
    pub fn adapter(&self, domain: Domain) -> &TiedLayer {
        match domain {
            Domain::Source => &self.source_adapter,
            Domain::Target => &self.target_adapter,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.output.width()
    }

    pub fn forward(&self, x: &[f64], domain: Domain) -> Result<ExtractorTrace> {
        let adapted = self.adapter(domain).encode(x, ADAPTER_ENCODER)?;
        let hidden = self.hidden.encode(&adapted, HIDDEN_ENCODER)?;
        let z = self.output.encode(&hidden, FEATURE_ENCODER)?;
        Ok(ExtractorTrace {
            x: x.to_vec(),
            adapted,
            hidden,
            z,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorGrads {
    pub source_adapter: TiedGrad,
    pub target_adapter: TiedGrad,
    pub hidden: TiedGrad,
    pub output: TiedGrad,
}

impl ExtractorGrads {
    fn adapter_mut(&mut self, domain: Domain) -> &mut TiedGrad {
        match domain {
            Domain::Source => &mut self.source_adapter,
            Domain::Target => &mut self.target_adapter,
        }
    }
}

/// One layer of the classifier body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub tied: TiedLayer,
    pub clusters: Vec<Cluster>,
    pub spc: SpcStats,
    pub contribution: ActivationContribution,
}

impl LayerState {
    pub fn new(tied: TiedLayer) -> Self {
        let (input, width) = (tied.input_dim(), tied.width());
        LayerState {
            tied,
            clusters: Vec::new(),
            spc: SpcStats::new(input),
            contribution: ActivationContribution::new(width),
        }
    }

    pub fn width(&self) -> usize {
        self.tied.width()
    }

    pub fn input_dim(&self) -> usize {
        self.tied.input_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub tied: TiedGrad,
    pub centroids: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainClassifier {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainTrace {
    pub hidden: Vec<f64>,
    pub logit: f64,
    /// `σ(logit)` kept strictly inside (0, 1).
    pub probability: f64,
}

impl DomainClassifier {
    pub fn forward(&self, z: &[f64]) -> Result<DomainTrace> {
        let hidden: Vec<f64> = self.hidden.affine(z)?.into_iter().map(relu).collect();
        let logit = self.output.affine(&hidden)?[0];
        Ok(DomainTrace {
            hidden,
            logit,
            probability: sigmoid(logit).clamp(f64::EPSILON, 1.0 - f64::EPSILON),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainGrads {
    pub hidden: DenseGrad,
    pub output: DenseGrad,
}

/// Shapes of the sub-networks at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub source_dim: usize,
    pub target_dim: usize,
    pub n_classes: usize,
    /// Shared dimension the per-stream adapters map into.
    pub adapter_dim: usize,
    pub extractor_hidden: usize,
    /// Width `u'` of the natural features `Z`.
    pub feature_dim: usize,
    pub initial_width: usize,
    pub domain_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            source_dim: 4,
            target_dim: 6,
            n_classes: 3,
            adapter_dim: 16,
            extractor_hidden: 32,
            feature_dim: 16,
            initial_width: 8,
            domain_hidden: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("source_dim", self.source_dim),
            ("target_dim", self.target_dim),
            ("adapter_dim", self.adapter_dim),
            ("extractor_hidden", self.extractor_hidden),
            ("feature_dim", self.feature_dim),
            ("domain_hidden", self.domain_hidden),
        ] {
            if v == 0 {
                return Err(invalid_arg!("{name} must be positive"));
            }
        }
        if self.n_classes < 2 {
            return Err(invalid_arg!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.initial_width < MIN_LAYER_WIDTH {
            return Err(invalid_arg!(
                "initial_width must be >= {MIN_LAYER_WIDTH}, got {}",
                self.initial_width
            ));
        }
        Ok(())
    }
}

/// Loss weights and optimizer settings carried by the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Weight of the domain loss and scale of the gradient reversal.
    pub alpha_cd: f64,
    /// Weight of the KL clustering term.
    pub alpha_kl: f64,
    /// Degrees of freedom of the student-t kernel.
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            alpha_cd: 0.1,
            alpha_kl: 1.0,
            lambda: 1.0,
            learning_rate: 0.01,
            momentum: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Extractor,
    Classifier,
    DomainClassifier,
}

/// Gradients for every trainable tensor, mirroring the model's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub extractor: ExtractorGrads,
    pub layers: Vec<LayerGrads>,
    pub domain: DomainGrads,
}

impl ModelGradients {
    /// Tensors of one group in the order of [`LeopardModel::params`].
    pub fn tensors(&self, group: ParamGroup) -> Vec<&Matrix> {
        match group {
            ParamGroup::Extractor => {
                let e = &self.extractor;
                [&e.source_adapter, &e.target_adapter, &e.hidden, &e.output]
                    .into_iter()
                    .flat_map(TiedGrad::tensors)
                    .collect()
            }
            ParamGroup::Classifier => self
                .layers
                .iter()
                .flat_map(|l| l.tied.tensors().into_iter().chain(l.centroids.iter()))
                .collect(),
            ParamGroup::DomainClassifier => {
                let d = &self.domain;
                vec![&d.hidden.weight, &d.hidden.bias, &d.output.weight, &d.output.bias]
            }
        }
    }

    pub fn tensors_mut(&mut self, group: ParamGroup) -> Vec<&mut Matrix> {
        match group {
            ParamGroup::Extractor => {
                let e = &mut self.extractor;
                [&mut e.source_adapter, &mut e.target_adapter, &mut e.hidden, &mut e.output]
                    .into_iter()
                    .flat_map(TiedGrad::tensors_mut)
                    .collect()
            }
            ParamGroup::Classifier => self
                .layers
                .iter_mut()
                .flat_map(|l| l.tied.tensors_mut().into_iter().chain(l.centroids.iter_mut()))
                .collect(),
            ParamGroup::DomainClassifier => {
                let d = &mut self.domain;
                vec![
                    &mut d.hidden.weight,
                    &mut d.hidden.bias,
                    &mut d.output.weight,
                    &mut d.output.bias,
                ]
            }
        }
    }

    pub fn scale(&mut self, group: ParamGroup, alpha: f64) {
        for t in self.tensors_mut(group) {
            t.scale(alpha);
        }
    }

    pub fn is_finite(&self, group: ParamGroup) -> bool {
        self.tensors(group).iter().all(|t| t.is_finite())
    }
}

/// Forward pass through the extractor, the whole stack and back down to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub domain: Domain,
    pub extractor: ExtractorTrace,
    /// `h¹ .. h^L`.
    pub latents: Vec<Vec<f64>>,
    /// `ĥ⁰ .. ĥ^{L-1}` produced by decoding down from `h^L`; `ĥ⁰` reconstructs `Z`.
    pub reconstructions: Vec<Vec<f64>>,
    pub hidden_hat: Vec<f64>,
    pub adapted_hat: Vec<f64>,
    pub x_hat: Vec<f64>,
}

/// `grad' = -α₁ grad`; the reversal layer is the identity on the forward pass.
pub fn reverse_gradient(grad: &[f64], alpha: f64) -> Vec<f64> {
    grad.iter().map(|g| -alpha * g).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeopardModel {
    pub config: ModelConfig,
    pub hyper: Hyperparameters,
    pub extractor: FeatureExtractor,
    pub layers: Vec<LayerState>,
    pub domain_classifier: DomainClassifier,
}

impl LeopardModel {
    pub fn new(config: ModelConfig, hyper: Hyperparameters, seed: u64) -> Result<Self> {
        config.validate()?;
        SgdMomentum::new(hyper.learning_rate, hyper.momentum)?;
        let mut rng = seeded_rng(seed);
        let source_adapter = TiedLayer::xavier(&mut rng, config.source_dim, config.adapter_dim)?;
        let mut target_adapter = TiedLayer::xavier(&mut rng, config.target_dim, config.adapter_dim)?;
        // Both adapters start identical on the leading input coordinates the streams have in common.
        for c in 0..config.source_dim.min(config.target_dim) {
            for r in 0..config.adapter_dim {
                target_adapter.weight.value.set(r, c, source_adapter.weight.value.get(r, c));
            }
        }
        let extractor = FeatureExtractor {
            source_adapter,
            target_adapter,
            hidden: TiedLayer::xavier(&mut rng, config.adapter_dim, config.extractor_hidden)?,
            output: TiedLayer::xavier(&mut rng, config.extractor_hidden, config.feature_dim)?,
        };
        let first = TiedLayer::xavier(&mut rng, config.feature_dim, config.initial_width)?;
        let domain_classifier = DomainClassifier {
            hidden: DenseLayer::xavier(&mut rng, config.feature_dim, config.domain_hidden)?,
            output: DenseLayer::xavier(&mut rng, config.domain_hidden, 1)?,
        };
        Ok(LeopardModel {
            config,
            hyper,
            extractor,
            layers: vec![LayerState::new(first)],
            domain_classifier,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerState::width).collect()
    }

    pub fn total_nodes(&self) -> usize {
        self.layers.iter().map(LayerState::width).sum()
    }

    pub fn total_clusters(&self) -> usize {
        self.layers.iter().map(|l| l.clusters.len()).sum()
    }

    pub fn optimizer(&self) -> Result<SgdMomentum> {
        SgdMomentum::new(self.hyper.learning_rate, self.hyper.momentum)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(invalid_arg!("layer {layer} does not exist (depth {})", self.layers.len()));
        }
        Ok(())
    }

    /// Natural features `Z` of a raw sample.
    pub fn extract(&self, x: &[f64], domain: Domain) -> Result<Vec<f64>> {
        Ok(self.extractor.forward(x, domain)?.z)
    }

    /// `h¹ .. h^depth` from natural features.
    pub fn encode(&self, z: &[f64], depth: usize) -> Result<Vec<Vec<f64>>> {
        if depth > self.layers.len() {
            return Err(invalid_arg!("depth {depth} exceeds model depth {}", self.layers.len()));
        }
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(depth);
        for layer in &self.layers[..depth] {
            let input = out.last().map_or(z, Vec::as_slice);
            out.push(layer.tied.encode(input, STACK_ACTIVATION)?);
        }
        Ok(out)
    }

    /// Reconstruction of layer `layer`'s input from its output `h`.
    pub fn decode(&self, h: &[f64], layer: usize, act: Activation) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        self.layers[layer].tied.decode(h, act)
    }

    pub fn domain_forward(&self, z: &[f64]) -> Result<f64> {
        Ok(self.domain_classifier.forward(z)?.probability)
    }

    pub fn forward(&self, x: &[f64], domain: Domain) -> Result<ForwardTrace> {
        let extractor = self.extractor.forward(x, domain)?;
        let latents = self.encode(&extractor.z, self.layers.len())?;
        let depth = self.layers.len();
        let mut reconstructions = vec![Vec::new(); depth];
        let mut top = latents.last().cloned().unwrap_or_else(|| extractor.z.clone());
        for l in (0..depth).rev() {
            top = self.layers[l].tied.decode(&top, STACK_ACTIVATION)?;
            reconstructions[l] = top.clone();
        }
        let z_hat = reconstructions.first().cloned().unwrap_or_else(|| extractor.z.clone());
        let hidden_hat = self.extractor.output.decode(&z_hat, FEATURE_DECODER)?;
        let adapted_hat = self.extractor.hidden.decode(&hidden_hat, HIDDEN_DECODER)?;
        let x_hat = self.extractor.adapter(domain).decode(&adapted_hat, ADAPTER_DECODER)?;
        Ok(ForwardTrace {
            domain,
            extractor,
            latents,
            reconstructions,
            hidden_hat,
            adapted_hat,
            x_hat,
        })
    }

    pub fn zero_gradients(&self) -> ModelGradients {
        let e = &self.extractor;
        ModelGradients {
            extractor: ExtractorGrads {
                source_adapter: TiedGrad::zeros_like(&e.source_adapter),
                target_adapter: TiedGrad::zeros_like(&e.target_adapter),
                hidden: TiedGrad::zeros_like(&e.hidden),
                output: TiedGrad::zeros_like(&e.output),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    tied: TiedGrad::zeros_like(&l.tied),
                    centroids: l.clusters.iter().map(|c| Matrix::zeros(c.dim(), 1)).collect(),
                })
                .collect(),
            domain: DomainGrads {
                hidden: DenseGrad::zeros_like(&self.domain_classifier.hidden),
                output: DenseGrad::zeros_like(&self.domain_classifier.output),
            },
        }
    }

    /// Trainable tensors of one group, in a fixed order shared with [`ModelGradients::tensors`].
    pub fn params(&self, group: ParamGroup) -> Vec<&Param> {
        match group {
            ParamGroup::Extractor => {
                let e = &self.extractor;
                [&e.source_adapter, &e.target_adapter, &e.hidden, &e.output]
                    .into_iter()
                    .flat_map(tied_params)
                    .collect()
            }
            ParamGroup::Classifier => self
                .layers
                .iter()
                .flat_map(|l| tied_params(&l.tied).into_iter().chain(l.clusters.iter().map(|c| &c.centroid)))
                .collect(),
            ParamGroup::DomainClassifier => {
                let d = &self.domain_classifier;
                vec![&d.hidden.weight, &d.hidden.bias, &d.output.weight, &d.output.bias]
            }
        }
    }

    pub fn params_mut(&mut self, group: ParamGroup) -> Vec<&mut Param> {
        match group {
            ParamGroup::Extractor => {
                let e = &mut self.extractor;
                [&mut e.source_adapter, &mut e.target_adapter, &mut e.hidden, &mut e.output]
                    .into_iter()
                    .flat_map(tied_params_mut)
                    .collect()
            }
            ParamGroup::Classifier => self
                .layers
                .iter_mut()
                .flat_map(|l| {
                    tied_params_mut(&mut l.tied)
                        .into_iter()
                        .chain(l.clusters.iter_mut().map(|c| &mut c.centroid))
                })
                .collect(),
            ParamGroup::DomainClassifier => {
                let d = &mut self.domain_classifier;
                vec![
                    &mut d.hidden.weight,
                    &mut d.hidden.bias,
                    &mut d.output.weight,
                    &mut d.output.bias,
                ]
            }
        }
    }

    /// One momentum step on a parameter group. The whole group is rejected
    /// without any change if a gradient is non-finite or mis-shaped.
    pub fn apply_updates(&mut self, grads: &ModelGradients, group: ParamGroup) -> Result<()> {
        let opt = self.optimizer()?;
        let tensors = grads.tensors(group);
        let params = self.params_mut(group);
        if tensors.len() != params.len() {
            return Err(LeopardError::InvalidState(format!(
                "{group:?}: {} gradients for {} parameters",
                tensors.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(&tensors) {
            if p.shape() != g.shape() {
                return Err(LeopardError::InvalidState(format!(
                    "{group:?}: gradient shape {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(LeopardError::NumericFailure(format!("non-finite {group:?} gradient")));
            }
        }
        for (p, g) in params.into_iter().zip(tensors) {
            opt.step(p, g)?;
        }
        Ok(())
    }

    /// Backpropagates `scale · Σ (x̂ - x)²` through the full decoder chain, the
    /// stack encoders and the extractor.
    pub(crate) fn backprop_reconstruction(&self, trace: &ForwardTrace, scale: f64, grads: &mut ModelGradients) {
        let g_xhat: Vec<f64> = trace
            .x_hat
            .iter()
            .zip(&trace.extractor.x)
            .map(|(r, x)| 2.0 * scale * (r - x))
            .collect();
        let e = &self.extractor;
        let eg = &mut grads.extractor;
        let g = e.adapter(trace.domain).backward_decode(
            &trace.adapted_hat,
            &trace.x_hat,
            &g_xhat,
            ADAPTER_DECODER,
            eg.adapter_mut(trace.domain),
        );
        let g = e
            .hidden
            .backward_decode(&trace.hidden_hat, &trace.adapted_hat, &g, HIDDEN_DECODER, &mut eg.hidden);
        let z_hat = &trace.reconstructions[0];
        let mut g = e
            .output
            .backward_decode(z_hat, &trace.hidden_hat, &g, FEATURE_DECODER, &mut eg.output);

        let depth = self.layers.len();
        for l in 0..depth {
            let upper = if l + 1 == depth {
                &trace.latents[depth - 1]
            } else {
                &trace.reconstructions[l + 1]
            };
            g = self.layers[l].tied.backward_decode(
                upper,
                &trace.reconstructions[l],
                &g,
                STACK_ACTIVATION,
                &mut grads.layers[l].tied,
            );
        }
        for l in (0..depth).rev() {
            let input = if l == 0 { &trace.extractor.z } else { &trace.latents[l - 1] };
            g = self.layers[l].tied.backward_encode(
                input,
                &trace.latents[l],
                &g,
                STACK_ACTIVATION,
                &mut grads.layers[l].tied,
            );
        }
        self.backprop_extractor(&trace.extractor, trace.domain, &g, grads);
    }

    /// Backpropagates `∂L/∂Z` through the extractor encoders.
    pub(crate) fn backprop_extractor(&self, trace: &ExtractorTrace, domain: Domain, g_z: &[f64], grads: &mut ModelGradients) {
        let e = &self.extractor;
        let eg = &mut grads.extractor;
        let g = e
            .output
            .backward_encode(&trace.hidden, &trace.z, g_z, FEATURE_ENCODER, &mut eg.output);
        let g = e
            .hidden
            .backward_encode(&trace.adapted, &trace.hidden, &g, HIDDEN_ENCODER, &mut eg.hidden);
        e.adapter(domain)
            .backward_encode(&trace.x, &trace.adapted, &g, ADAPTER_ENCODER, eg.adapter_mut(domain));
    }

    /// Layer-local reconstruction `scale · Σ (h^{l-1} - r(Wᵀ h^l + c))²` plus an
    /// external gradient on `h^l`; gradients stop at `h^{l-1}`. Returns the
    /// unscaled squared error.
    pub(crate) fn backprop_layer_local(
        &self,
        layer: usize,
        input: &[f64],
        latent: &[f64],
        latent_grad: Option<&[f64]>,
        scale: f64,
        grads: &mut LayerGrads,
    ) -> Result<f64> {
        let tied = &self.layers[layer].tied;
        let rec = tied.decode(latent, STACK_ACTIVATION)?;
        let sq: f64 = rec.iter().zip(input).map(|(r, x)| (r - x).powi(2)).sum();
        let g_rec: Vec<f64> = rec.iter().zip(input).map(|(r, x)| 2.0 * scale * (r - x)).collect();
        let mut g_h = tied.backward_decode(latent, &rec, &g_rec, STACK_ACTIVATION, &mut grads.tied);
        if let Some(extra) = latent_grad {
            for (g, e) in g_h.iter_mut().zip(extra) {
                *g += e;
            }
        }
        tied.backward_encode(input, latent, &g_h, STACK_ACTIVATION, &mut grads.tied);
        Ok(sq)
    }

    /// Backpropagates `∂L/∂logit` through the domain classifier; returns `∂L/∂Z`.
    pub(crate) fn backprop_domain(&self, z: &[f64], trace: &DomainTrace, g_logit: f64, grads: &mut DomainGrads) -> Vec<f64> {
        let d = &self.domain_classifier;
        grads.output.bias.data_mut()[0] += g_logit;
        grads.output.weight.add_outer(g_logit, &[1.0], &trace.hidden);
        let g_hidden: Vec<f64> = d
            .output
            .weight
            .value
            .row(0)
            .iter()
            .zip(&trace.hidden)
            .map(|(w, h)| if *h > 0.0 { g_logit * w } else { 0.0 })
            .collect();
        for (b, g) in grads.hidden.bias.data_mut().iter_mut().zip(&g_hidden) {
            *b += g;
        }
        grads.hidden.weight.add_outer(1.0, &g_hidden, z);
        d.hidden.weight.value.tmatvec(&g_hidden).expect("shape checked by forward pass")
    }

    /// Adds one node to `layer`. `batch_inputs` are the layer's inputs over the
    /// current batch; the new node's mean activation on them seeds the new
    /// centroid coordinate, its contribution and the next layer's charts.
    pub fn grow_node(&mut self, layer: usize, batch_inputs: &[Vec<f64>], rng_seed: u64) -> Result<()> {
        self.check_layer(layer)?;
        let mut rng = seeded_rng(rng_seed);
        let (input, width) = (self.layers[layer].input_dim(), self.layers[layer].width());
        let bound = xavier_bound(input, width + 1);
        let row: Vec<f64> = (0..input).map(|_| rng.random_range(-bound..=bound)).collect();
        for x in batch_inputs {
            if x.len() != input {
                return Err(invalid_arg!("batch input of length {} for layer input {input}", x.len()));
            }
        }
        let mean_activation = if batch_inputs.is_empty() {
            0.0
        } else {
            batch_inputs
                .iter()
                .map(|x| relu(row.iter().zip(x).map(|(w, v)| w * v).sum()))
                .sum::<f64>()
                / batch_inputs.len() as f64
        };

        let state = &mut self.layers[layer];
        state.tied.weight.push_row(&row)?;
        state.tied.enc_bias.push_row(&[0.0])?;
        for cluster in &mut state.clusters {
            cluster.push_coordinate(mean_activation)?;
        }
        state.contribution.push_node(mean_activation);
        state.spc.reset_bias_min();

        if let Some(next) = self.layers.get_mut(layer + 1) {
            let rows = next.width();
            let bound = xavier_bound(width + 1, rows);
            let col: Vec<f64> = (0..rows).map(|_| rng.random_range(-bound..=bound)).collect();
            next.tied.weight.push_col(&col)?;
            next.tied.dec_bias.push_row(&[0.0])?;
            next.spc.push_dim(mean_activation);
        }
        Ok(())
    }

    /// Removes node `index` from `layer`. Returns `false` (and changes nothing)
    /// when the layer is already at the width floor.
    pub fn prune_node(&mut self, layer: usize, index: usize) -> Result<bool> {
        self.check_layer(layer)?;
        let width = self.layers[layer].width();
        if width <= MIN_LAYER_WIDTH {
            log::info!("pruning suppressed: layer {layer} is at the minimum width {width}");
            return Ok(false);
        }
        if index >= width {
            return Err(invalid_arg!("node {index} out of range for width {width}"));
        }
        let state = &mut self.layers[layer];
        state.tied.weight.remove_row(index)?;
        state.tied.enc_bias.remove_row(index)?;
        for cluster in &mut state.clusters {
            cluster.remove_coordinate(index)?;
        }
        state.contribution.remove_node(index);
        state.spc.reset_variance_min();
        if let Some(next) = self.layers.get_mut(layer + 1) {
            next.tied.weight.remove_col(index)?;
            next.tied.dec_bias.remove_row(index)?;
            next.spc.remove_dim(index)?;
        }
        Ok(true)
    }

    /// Appends a layer of half the current top width (at least the floor).
    /// Returns the new width.
    pub fn add_layer(&mut self, rng_seed: u64) -> Result<usize> {
        let top = self
            .layers
            .last()
            .map_or(self.config.feature_dim, LayerState::width);
        let width = (top / 2).max(MIN_LAYER_WIDTH);
        let mut rng = seeded_rng(rng_seed);
        self.layers.push(LayerState::new(TiedLayer::xavier(&mut rng, top, width)?));
        Ok(width)
    }

    /// Checks that every layer's input dimension matches the width below it and
    /// that per-layer statistics agree with the weight shapes.
    pub fn check_consistency(&self) -> Result<()> {
        let mut below = self.extractor.feature_dim();
        for (l, layer) in self.layers.iter().enumerate() {
            let t = &layer.tied;
            let ok = t.input_dim() == below
                && t.enc_bias.shape() == (t.width(), 1)
                && t.dec_bias.shape() == (t.input_dim(), 1)
                && layer.spc.dim() == t.input_dim()
                && layer.contribution.mean_abs.len() == t.width()
                && layer.clusters.iter().all(|c| c.dim() == t.width());
            if !ok {
                return Err(LeopardError::InvalidState(format!("layer {l} has inconsistent shapes")));
            }
            below = t.width();
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: LeopardModel = serde_json::from_str(text)?;
        model.check_consistency()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| LeopardError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LeopardError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use crate::clustering::DistanceStats;

    fn small_config() -> ModelConfig {
        ModelConfig {
            source_dim: 3,
            target_dim: 4,
            n_classes: 2,
            adapter_dim: 4,
            extractor_hidden: 5,
            feature_dim: 4,
            initial_width: 4,
            domain_hidden: 3,
        }
    }

    fn model() -> LeopardModel {
        LeopardModel::new(small_config(), Hyperparameters::default(), 7).unwrap()
    }

    fn identity_layer(n: usize) -> TiedLayer {
        TiedLayer::from_parts(Matrix::identity(n), vec![0.0; n], vec![0.0; n]).unwrap()
    }

    #[test]
    fn adapters_share_leading_columns_at_start() {
        let m = model();
        let (s, t) = (&m.extractor.source_adapter.weight.value, &m.extractor.target_adapter.weight.value);
        for r in 0..4 {
            assert_eq!(&s.row(r)[..3], &t.row(r)[..3]);
        }
        assert!((0..4).any(|r| t.get(r, 3) != 0.0));
    }

    #[test]
    fn encode_examples() {
        let mut m = model();
        m.layers[0] = LayerState::new(identity_layer(4));
        assert_eq!(m.encode(&[0.1, 0.2, 0.3, 0.4], 1).unwrap()[0], vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(m.encode(&[-1.0, 2.0, 0.0, 0.0], 1).unwrap()[0], vec![0.0, 2.0, 0.0, 0.0]);

        let l = TiedLayer::from_parts(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), vec![-1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(l.encode(&[1.0, 1.0], STACK_ACTIVATION).unwrap(), vec![1.0]);

        assert!(matches!(m.encode(&[1.0], 1), Err(LeopardError::InvalidArgument(_))));
        assert!(matches!(m.encode(&[0.0; 4], 2), Err(LeopardError::InvalidArgument(_))));
    }

    #[test]
    fn decode_examples() {
        let m = model();
        let zero = vec![0.0; m.layers[0].width()];
        let mut m = m;
        m.layers[0].tied.dec_bias.value.fill(0.0);
        assert!(m.decode(&zero, 0, Activation::Sigmoid).unwrap().iter().all(|&v| v == 0.5));
        assert!(m.decode(&zero, 0, Activation::Rectifier).unwrap().iter().all(|&v| v == 0.0));

        let l = TiedLayer::from_parts(Matrix::from_rows(&[vec![2.0]]).unwrap(), vec![0.0], vec![0.0]).unwrap();
        assert_eq!(l.decode(&[1.0], Activation::Rectifier).unwrap(), vec![2.0]);

        // mutating the encoder is visible to the decoder
        let mut l = l;
        l.weight.value.set(0, 0, 3.0);
        assert_eq!(l.decode(&[1.0], Activation::Rectifier).unwrap(), vec![3.0]);
        assert_eq!(l.decoder_weight(), l.weight.value.transpose());
    }

    #[test]
    fn domain_forward_examples() {
        let mut m = model();
        for p in m.params_mut(ParamGroup::DomainClassifier) {
            p.value.fill(0.0);
        }
        assert_eq!(m.domain_forward(&[0.3; 4]).unwrap(), 0.5);
        assert_abs_diff_eq!(sigmoid(2.0), 0.8808, epsilon = 1e-4);

        let m = model();
        let mut rng = seeded_rng(1);
        for _ in 0..200 {
            let z: Vec<f64> = (0..4).map(|_| rand::Rng::random_range(&mut rng, -50.0..50.0)).collect();
            let p = m.domain_forward(&z).unwrap();
            assert!(p > 0.0 && p < 1.0, "{p}");
        }
    }

    #[test]
    fn reverse_gradient_examples() {
        let r = reverse_gradient(&[1.0, -2.0], 0.1);
        assert_abs_diff_eq!(r[0], -0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], 0.2, epsilon = 1e-15);
        assert!(reverse_gradient(&[3.0, -4.0], 0.0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut m = model();
        m.layers[0].clusters.push(Cluster::new(vec![0.1; 4], DistanceStats::default(), 2));
        let before = m.clone();
        let g = m.zero_gradients();
        for group in [ParamGroup::Extractor, ParamGroup::Classifier, ParamGroup::DomainClassifier] {
            m.apply_updates(&g, group).unwrap();
        }
        assert_eq!(m, before);
    }

    #[test]
    fn extractor_update_hand_value() {
        // ΔW_f = -μ (∂L_cluster - α₁ ∂L_cd) with unit gradients, μ = 0.01, α₁ = 0.1
        let hyper = Hyperparameters {
            momentum: 0.0,
            ..Hyperparameters::default()
        };
        let mut m = LeopardModel::new(small_config(), hyper, 7).unwrap();
        let before = m.extractor.hidden.weight.value.get(0, 0);
        let mut g = m.zero_gradients();
        let cluster_grad = 1.0;
        let cd_grad = 1.0;
        let combined = cluster_grad + reverse_gradient(&[cd_grad], hyper.alpha_cd)[0];
        g.extractor.hidden.weight.set(0, 0, combined);
        m.apply_updates(&g, ParamGroup::Extractor).unwrap();
        assert_abs_diff_eq!(m.extractor.hidden.weight.value.get(0, 0) - before, -0.009, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected_atomically() {
        let mut m = model();
        let before = m.clone();
        let mut g = m.zero_gradients();
        g.extractor.source_adapter.weight.fill(1.0);
        g.extractor.output.enc_bias.set(0, 0, f64::NAN);
        assert!(matches!(
            m.apply_updates(&g, ParamGroup::Extractor),
            Err(LeopardError::NumericFailure(_))
        ));
        assert_eq!(m, before);
    }

    #[test]
    fn grow_node_bookkeeping() {
        let mut m = model();
        m.add_layer(3).unwrap();
        m.layers[0].clusters.push(Cluster::new(vec![0.1; 4], DistanceStats::default(), 2));
        m.layers[0].clusters.push(Cluster::new(vec![0.2; 4], DistanceStats::default(), 2));
        let next_cols = m.layers[1].tied.weight.value.cols();
        m.grow_node(0, &[vec![0.0; 4], vec![0.0; 4]], 11).unwrap();
        assert_eq!(m.layers[0].width(), 5);
        assert_eq!(m.layers[1].tied.weight.value.cols(), next_cols + 1);
        assert!(m.layers[0].clusters.iter().all(|c| c.dim() == 5));
        assert!(m.layers[0].clusters.iter().all(|c| c.centre()[4] == 0.0));
        m.check_consistency().unwrap();
        let z = m.extract(&[0.2, 0.4, 0.6], Domain::Source).unwrap();
        let h = m.encode(&z, 2).unwrap();
        assert_eq!(h[0].len(), 5);
        assert!(h.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn grow_node_seeds_centroid_with_batch_mean() {
        let mut m = model();
        m.layers[0].clusters.push(Cluster::new(vec![0.0; 4], DistanceStats::default(), 2));
        let batch = vec![vec![1.0, 0.5, 0.2, 0.0], vec![0.3, 0.9, 0.1, 0.4]];
        m.grow_node(0, &batch, 5).unwrap();
        let row = m.layers[0].tied.weight.value.row(4).to_vec();
        let expect = batch
            .iter()
            .map(|x| relu(row.iter().zip(x).map(|(w, v)| w * v).sum()))
            .sum::<f64>()
            / 2.0;
        assert_abs_diff_eq!(m.layers[0].clusters[0].centre()[4], expect, epsilon = 1e-15);
    }

    #[test]
    fn prune_node_bookkeeping() {
        let mut m = model();
        m.grow_node(0, &[], 1).unwrap();
        m.add_layer(2).unwrap();
        m.layers[0].clusters.push(Cluster::new(vec![0.1, 0.2, 0.3, 0.4, 0.5], DistanceStats::default(), 2));
        assert!(m.prune_node(0, 2).unwrap());
        assert_eq!(m.layers[0].width(), 4);
        assert_eq!(m.layers[1].input_dim(), 4);
        assert_eq!(m.layers[0].clusters[0].centre(), &[0.1, 0.2, 0.4, 0.5]);
        m.check_consistency().unwrap();
        let z = m.extract(&[0.2, 0.4, 0.6], Domain::Source).unwrap();
        assert_eq!(m.encode(&z, 1).unwrap()[0].len(), 4);

        while m.layers[1].width() > 2 {
            m.prune_node(1, 0).unwrap();
        }
        let before = m.clone();
        assert!(!m.prune_node(1, 0).unwrap());
        assert_eq!(m, before);
    }

    #[test]
    fn add_layer_widths() {
        let mut m = model();
        m.layers[0] = LayerState::new(TiedLayer::xavier(&mut seeded_rng(0), 4, 96).unwrap());
        // input dims of later layers follow the new top width
        assert_eq!(m.add_layer(1).unwrap(), 48);
        let mut m = model();
        m.layers[0] = LayerState::new(TiedLayer::xavier(&mut seeded_rng(0), 4, 3).unwrap());
        assert_eq!(m.add_layer(1).unwrap(), 2);
        assert_eq!(m.depth(), 2);
        assert_eq!(m.layers[1].input_dim(), 3);
        assert!(m.layers[1].clusters.is_empty());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = model();
        m.layers[0].clusters.push(Cluster::new(vec![0.123456789; 4], DistanceStats { mean: 0.3, std: 0.1 }, 2));
        m.add_layer(9).unwrap();
        let back = LeopardModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn reversal_composes_to_alpha_squared(
            g in proptest::collection::vec(-10.0f64..10.0, 1..8),
            alpha in 0.0f64..3.0,
        ) {
            let twice = reverse_gradient(&reverse_gradient(&g, alpha), alpha);
            for (a, b) in twice.iter().zip(&g) {
                prop_assert!((a - alpha * alpha * b).abs() < 1e-12);
            }
        }

        #[test]
        fn encode_decode_shapes_round_trip(grows in 0usize..4, prunes in 0usize..4, layers in 0usize..3) {
            let mut m = model();
            for s in 0..layers {
                m.add_layer(s as u64).unwrap();
            }
            for s in 0..grows {
                m.grow_node(s % m.depth(), &[], s as u64).unwrap();
            }
            for s in 0..prunes {
                m.prune_node(s % m.depth(), 0).unwrap();
            }
            m.check_consistency().unwrap();
            let t = m.forward(&[0.1, 0.5, 0.9, 0.3], Domain::Target).unwrap();
            for l in 0..m.depth() {
                let rec = m.decode(&t.latents[l], l, STACK_ACTIVATION).unwrap();
                prop_assert_eq!(rec.len(), m.layers[l].input_dim());
            }
            prop_assert_eq!(t.x_hat.len(), 4);
            prop_assert!(t.x_hat.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
        }
    }
}
