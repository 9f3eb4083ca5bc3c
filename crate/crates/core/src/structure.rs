//! Structural decisions: node growth/pruning from bias and variance control
//! charts, least-contribution pruning candidates, and a Hoeffding-bound drift
//! detector over the extractor's output.

use serde::{Deserialize, Serialize};

use crate::clustering::RunningStats;
use crate::error::{invalid_arg, Result};

/// Samples observed before SPC decisions are allowed.
pub const SPC_BURN_IN: u64 = 10;
/// Decay of the moving averages `E[ĥ]` and `E[ĥ²]`.
pub const SPC_DECAY: f64 = 0.95;
/// Minimum width a layer may be pruned down to.
pub const MIN_LAYER_WIDTH: usize = 2;

/// A (mean, std) pair as tracked by the control charts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartLevel {
    pub mean: f64,
    pub std: f64,
}

impl ChartLevel {
    fn of(stats: &RunningStats) -> Self {
        ChartLevel {
            mean: stats.mean(),
            std: stats.std(),
        }
    }

    fn level(&self) -> f64 {
        self.mean + self.std
    }
}

/// Network-significance bias and variance of one reconstructed sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpcObservation {
    pub bias: f64,
    pub variance: f64,
}

/// Running bias/variance control charts of one layer's reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpcStats {
    ema_mean: Vec<f64>,
    ema_sq: Vec<f64>,
    initialized: bool,
    bias: RunningStats,
    variance: RunningStats,
    bias_min: Option<ChartLevel>,
    variance_min: Option<ChartLevel>,
    samples: u64,
}

impl SpcStats {
    pub fn new(dim: usize) -> Self {
        SpcStats {
            ema_mean: vec![0.0; dim],
            ema_sq: vec![0.0; dim],
            initialized: false,
            bias: RunningStats::default(),
            variance: RunningStats::default(),
            bias_min: None,
            variance_min: None,
            samples: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.ema_mean.len()
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn expected_output(&self) -> &[f64] {
        &self.ema_mean
    }

    pub fn bias_level(&self) -> ChartLevel {
        ChartLevel::of(&self.bias)
    }

    pub fn variance_level(&self) -> ChartLevel {
        ChartLevel::of(&self.variance)
    }

    pub fn bias_min(&self) -> Option<ChartLevel> {
        self.bias_min
    }

    pub fn variance_min(&self) -> Option<ChartLevel> {
        self.variance_min
    }

    /// Folds one `(h, ĥ)` pair into the charts.
    pub fn observe(&mut self, h: &[f64], h_hat: &[f64]) -> Result<SpcObservation> {
        if h.len() != self.dim() || h_hat.len() != self.dim() {
            return Err(invalid_arg!(
                "SPC expects dimension {}, got {} and {}",
                self.dim(),
                h.len(),
                h_hat.len()
            ));
        }
        if self.initialized {
            for ((m, s), &r) in self.ema_mean.iter_mut().zip(self.ema_sq.iter_mut()).zip(h_hat) {
                *m = SPC_DECAY * *m + (1.0 - SPC_DECAY) * r;
                *s = SPC_DECAY * *s + (1.0 - SPC_DECAY) * r * r;
            }
        } else {
            self.ema_mean.copy_from_slice(h_hat);
            self.ema_sq = h_hat.iter().map(|r| r * r).collect();
            self.initialized = true;
        }
        let n = self.dim().max(1) as f64;
        let bias = self.ema_mean.iter().zip(h).map(|(m, x)| (m - x).powi(2)).sum::<f64>() / n;
        let variance = self
            .ema_mean
            .iter()
            .zip(&self.ema_sq)
            .map(|(m, s)| (s - m * m).max(0.0))
            .sum::<f64>()
            / n;
        self.bias.push(bias);
        self.variance.push(variance);
        self.samples += 1;
        if self.samples >= SPC_BURN_IN {
            let b = ChartLevel::of(&self.bias);
            if self.bias_min.is_none_or(|m| b.level() < m.level()) {
                self.bias_min = Some(b);
            }
            let v = ChartLevel::of(&self.variance);
            if self.variance_min.is_none_or(|m| v.level() < m.level()) {
                self.variance_min = Some(v);
            }
        }
        Ok(SpcObservation { bias, variance })
    }

    /// `μ_bias + σ_bias ≥ μ_bias^min + k₂ σ_bias^min`; resets the bias minima when it fires.
    pub fn should_grow_node(&mut self, bias: f64) -> bool {
        let Some(min) = self.ready_minimum(self.bias_min) else {
            return false;
        };
        let current = ChartLevel::of(&self.bias);
        let fire = current.level() >= min.mean + spc_confidence(bias) * min.std;
        if fire {
            self.bias_min = Some(current);
        }
        fire
    }

    /// `μ_var + σ_var ≥ μ_var^min + 2 k₃ σ_var^min`; resets the variance minima when it fires.
    pub fn should_prune_node(&mut self, variance: f64) -> bool {
        let Some(min) = self.ready_minimum(self.variance_min) else {
            return false;
        };
        let current = ChartLevel::of(&self.variance);
        let fire = current.level() >= min.mean + 2.0 * spc_confidence(variance) * min.std;
        if fire {
            self.variance_min = Some(current);
        }
        fire
    }

    fn ready_minimum(&self, min: Option<ChartLevel>) -> Option<ChartLevel> {
        if self.samples < SPC_BURN_IN {
            None
        } else {
            min
        }
    }

    pub fn reset_bias_min(&mut self) {
        self.bias_min = (self.samples >= SPC_BURN_IN).then(|| ChartLevel::of(&self.bias));
    }

    pub fn reset_variance_min(&mut self) {
        self.variance_min = (self.samples >= SPC_BURN_IN).then(|| ChartLevel::of(&self.variance));
    }

    /// Tracks a new input coordinate whose expected value starts at `initial`.
    pub fn push_dim(&mut self, initial: f64) {
        self.ema_mean.push(initial);
        self.ema_sq.push(initial * initial);
    }

    pub fn remove_dim(&mut self, index: usize) -> Result<()> {
        if index >= self.dim() {
            return Err(invalid_arg!("SPC dimension {index} out of range {}", self.dim()));
        }
        self.ema_mean.remove(index);
        self.ema_sq.remove(index);
        Ok(())
    }

    #[cfg(test)]
    fn with_levels(samples: u64, current: (f64, f64), min: (f64, f64)) -> Self {
        // Builds charts whose running level is `current` by feeding two values.
        let mut s = SpcStats::new(1);
        s.samples = samples;
        s.initialized = true;
        let spread = current.1 / std::f64::consts::SQRT_2;
        for x in [current.0 - spread, current.0 + spread] {
            s.bias.push(x);
            s.variance.push(x);
        }
        let m = ChartLevel { mean: min.0, std: min.1 };
        s.bias_min = Some(m);
        s.variance_min = Some(m);
        s
    }
}

/// `1.3 exp(-x²) + 0.7`, the dynamic SPC confidence for both charts.
pub fn spc_confidence(x: f64) -> f64 {
    1.3 * (-x * x).exp() + 0.7
}

/// Running mean of `|h|` per node, the basis for choosing which node to prune.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationContribution {
    pub mean_abs: Vec<f64>,
    pub count: u64,
}

impl ActivationContribution {
    pub fn new(width: usize) -> Self {
        ActivationContribution {
            mean_abs: vec![0.0; width],
            count: 0,
        }
    }

    pub fn observe(&mut self, h: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for (m, v) in self.mean_abs.iter_mut().zip(h) {
            *m += (v.abs() - *m) / n;
        }
    }

    pub fn push_node(&mut self, initial: f64) {
        self.mean_abs.push(initial);
    }

    pub fn remove_node(&mut self, index: usize) {
        self.mean_abs.remove(index);
    }

    /// Least-contributing node, lowest index on ties; `None` at the width floor.
    pub fn prune_candidate(&self) -> Option<usize> {
        if self.mean_abs.len() <= MIN_LAYER_WIDTH {
            return None;
        }
        Some(
            self.mean_abs
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v < self.mean_abs[best] { i } else { best }),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftState {
    Stable,
    Warning,
    Drift,
}

/// Significance levels of the cut test, the drift bound and the warning bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    pub alpha_cut: f64,
    pub alpha_drift: f64,
    pub alpha_warning: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            alpha_cut: 0.001,
            alpha_drift: 0.001,
            alpha_warning: 0.005,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha_cut", self.alpha_cut),
            ("alpha_drift", self.alpha_drift),
            ("alpha_warning", self.alpha_warning),
        ] {
            if !(a > 0.0 && a < 1.0) {
                return Err(invalid_arg!("{name} must lie in (0, 1), got {a}"));
            }
        }
        if self.alpha_warning <= self.alpha_drift {
            return Err(invalid_arg!(
                "alpha_warning ({}) must exceed alpha_drift ({}) so the warning band is non-empty",
                self.alpha_warning,
                self.alpha_drift
            ));
        }
        Ok(())
    }
}

/// Candidate cut positions as fractions of the window.
pub const CUT_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];
/// Shortest window the detector evaluates.
pub const MIN_WINDOW: usize = 8;

/// `√(ln(1/α) / (2 size))`.
pub fn hoeffding_epsilon(size: usize, alpha: f64) -> f64 {
    ((1.0 / alpha).ln() / (2.0 * size as f64)).sqrt()
}

/// `(b - a) √((size - cut) / (2 cut size) ln(1/α))`.
pub fn drift_bound(range: f64, size: usize, cut: usize, alpha: f64) -> f64 {
    let (size, cut) = (size as f64, cut as f64);
    range * ((size - cut) / (2.0 * cut * size) * (1.0 / alpha).ln()).sqrt()
}

/// Cut test `P̂ + ε_P ≥ Q̂ + ε_Q`.
pub fn is_cut_point(p_mean: f64, eps_p: f64, q_mean: f64, eps_q: f64) -> bool {
    p_mean + eps_p >= q_mean + eps_q
}

/// Evaluates one window without warning escalation.
pub fn evaluate_window(window: &[f64], config: &DriftConfig) -> DriftState {
    let size = window.len();
    if size < MIN_WINDOW {
        return DriftState::Stable;
    }
    let (lo, hi) = window
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return DriftState::Stable;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let p_mean = mean(window);
    let eps_p = range * hoeffding_epsilon(size, config.alpha_cut);
    for frac in CUT_FRACTIONS {
        let cut = ((size as f64) * frac) as usize;
        let q_mean = mean(&window[..cut]);
        let eps_q = range * hoeffding_epsilon(cut, config.alpha_cut);
        if !is_cut_point(p_mean, eps_p, q_mean, eps_q) {
            continue;
        }
        let gap = (mean(&window[cut..]) - q_mean).abs();
        if gap >= drift_bound(range, size, cut, config.alpha_drift) {
            return DriftState::Drift;
        }
        if gap >= drift_bound(range, size, cut, config.alpha_warning) {
            return DriftState::Warning;
        }
        return DriftState::Stable;
    }
    DriftState::Stable
}

/// Per-stream detector over a window made of the last two batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftDetector {
    config: DriftConfig,
    previous: Option<Vec<f64>>,
    warning_pending: bool,
    state: DriftState,
}

impl DriftDetector {
    pub fn new(config: DriftConfig) -> Self {
        DriftDetector {
            config,
            previous: None,
            warning_pending: false,
            state: DriftState::Stable,
        }
    }

    pub fn state(&self) -> DriftState {
        self.state
    }

    /// Feeds one batch of per-sample statistics and returns the resulting state.
    /// An unconfirmed Warning expires after one batch; a Warning followed by
    /// Warning or Drift escalates to Drift.
    pub fn update(&mut self, batch: &[f64]) -> DriftState {
        let raw = match self.previous.take() {
            Some(mut window) => {
                window.extend_from_slice(batch);
                evaluate_window(&window, &self.config)
            }
            None => DriftState::Stable,
        };
        self.previous = Some(batch.to_vec());
        self.escalate(raw)
    }

    /// Like [`DriftDetector::update`] but with the previous batch's statistics
    /// supplied by the caller (recomputed under the current model); `None` on
    /// the first batch.
    pub fn update_with_previous(&mut self, previous: Option<&[f64]>, batch: &[f64]) -> DriftState {
        let raw = match previous {
            Some(p) => {
                let window: Vec<f64> = p.iter().chain(batch).copied().collect();
                evaluate_window(&window, &self.config)
            }
            None => DriftState::Stable,
        };
        self.previous = Some(batch.to_vec());
        self.escalate(raw)
    }

    fn escalate(&mut self, raw: DriftState) -> DriftState {
        self.state = match raw {
            DriftState::Drift => DriftState::Drift,
            DriftState::Warning if self.warning_pending => DriftState::Drift,
            other => other,
        };
        self.warning_pending = self.state == DriftState::Warning;
        self.state
    }

    /// Returns the detector to Stable after a structural response to drift.
    pub fn acknowledge_drift(&mut self) {
        self.state = DriftState::Stable;
        self.warning_pending = false;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    GrowNode,
    PruneNode,
    AddLayer,
    Drift,
    Warning,
}

/// Which data a structural decision was taken on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStream {
    Source,
    Target,
    Pooled,
}

/// One line of the structural event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralEvent {
    pub batch: usize,
    pub stream: EventStream,
    pub event: EventKind,
    pub layer: Option<usize>,
    pub detail: String,
}
