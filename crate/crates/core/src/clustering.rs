//! Soft clustering inside each latent space.
//!
//! Similarity is a student-t kernel over squared Euclidean distance, the
//! self-training target sharpens it by squaring and frequency-normalizing, and
//! clusters inherit a class profile ("allegiance") from the few labelled
//! prerecorded samples.

use serde::{Deserialize, Serialize};

use crate::error::{LeopardError, Result};
use crate::network::LeopardModel;
use crate::numerics::{squared_distance, Matrix, Param};
use crate::stream::Domain;

/// Guard for cluster frequencies in the target distribution.
pub const FREQUENCY_FLOOR: f64 = 1e-12;

/// Incremental mean / standard deviation (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation; zero below two observations.
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0).sqrt()
        }
    }
}

/// Distance statistics used in the growth test, either measured or inherited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub std: f64,
}

/// Own observations needed before a cluster's measured statistics replace its prior.
pub const MIN_DISTANCE_OBSERVATIONS: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// `R_l x 1` trainable centroid.
    pub centroid: Param,
    pub cardinality: u64,
    pub distances: RunningStats,
    /// Statistics used until `distances` holds enough observations.
    pub prior: DistanceStats,
    pub allegiance: Vec<f64>,
}

impl Cluster {
    pub fn new(centre: Vec<f64>, prior: DistanceStats, n_classes: usize) -> Self {
        Cluster {
            centroid: Param::new(Matrix::column(centre)),
            cardinality: 1,
            distances: RunningStats::default(),
            prior,
            allegiance: vec![0.0; n_classes],
        }
    }

    pub fn centre(&self) -> &[f64] {
        self.centroid.value.data()
    }

    pub fn dim(&self) -> usize {
        self.centroid.value.rows()
    }

    pub fn distance_stats(&self) -> DistanceStats {
        if self.distances.count() >= MIN_DISTANCE_OBSERVATIONS {
            DistanceStats {
                mean: self.distances.mean(),
                std: self.distances.std(),
            }
        } else {
            self.prior
        }
    }

    pub fn push_coordinate(&mut self, value: f64) -> Result<()> {
        self.centroid.push_row(&[value])
    }

    pub fn remove_coordinate(&mut self, index: usize) -> Result<()> {
        self.centroid.remove_row(index)
    }
}

/// Similarity of one latent vector to every cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub phi: Vec<f64>,
    pub winner: usize,
}

/// Unnormalized student-t kernel `(1 + d²/λ)^(-(λ+1)/2)` on a squared distance.
pub fn student_t_kernel(sq_dist: f64, lambda: f64) -> f64 {
    (1.0 + sq_dist / lambda).powf(-(lambda + 1.0) / 2.0)
}

/// Index of the closest centroid (lowest index on ties) and its squared distance.
pub fn nearest(h: &[f64], clusters: &[Cluster]) -> Option<(usize, f64)> {
    clusters
        .iter()
        .enumerate()
        .map(|(j, c)| (j, squared_distance(h, c.centre())))
        .fold(None, |best, (j, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((j, d)),
        })
}

pub fn similarity(h: &[f64], clusters: &[Cluster], lambda: f64) -> Result<SoftAssignment> {
    if clusters.is_empty() {
        return Err(LeopardError::InvalidState("similarity over an empty cluster set".into()));
    }
    let sq: Vec<f64> = clusters.iter().map(|c| squared_distance(h, c.centre())).collect();
    Ok(soft_assignment_from_sq(&sq, lambda))
}

fn soft_assignment_from_sq(sq: &[f64], lambda: f64) -> SoftAssignment {
    // Work in log space so far-away samples cannot underflow every kernel to zero.
    let exponent = -(lambda + 1.0) / 2.0;
    let logs: Vec<f64> = sq.iter().map(|d| exponent * (d / lambda).ln_1p()).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut phi: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = phi.iter().sum();
    phi.iter_mut().for_each(|p| *p /= total);
    let winner = phi
        .iter()
        .enumerate()
        .fold(0, |best, (j, &p)| if p > phi[best] { j } else { best });
    SoftAssignment { phi, winner }
}

/// Rows of `φ` for a batch of latent vectors.
pub fn similarity_matrix(latents: &[Vec<f64>], clusters: &[Cluster], lambda: f64) -> Result<Vec<Vec<f64>>> {
    latents
        .iter()
        .map(|h| similarity(h, clusters, lambda).map(|s| s.phi))
        .collect()
}

/// `Φ_ij = (φ_ij² / ζ_j) / Σ_j' (φ_ij'² / ζ_j')` with `ζ_j = Σ_i φ_ij`.
pub fn target_distribution(phi: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = phi.first().map_or(0, Vec::len);
    let mut freq = vec![0.0; k];
    for row in phi {
        for (f, p) in freq.iter_mut().zip(row) {
            *f += p;
        }
    }
    phi.iter()
        .map(|row| {
            let mut t: Vec<f64> = row
                .iter()
                .zip(&freq)
                .map(|(p, f)| p * p / f.max(FREQUENCY_FLOOR))
                .collect();
            let s: f64 = t.iter().sum();
            t.iter_mut().for_each(|v| *v /= s);
            t
        })
        .collect()
}

/// `Σ_j φ_j ln(φ_j / Φ_j)` for a single row.
pub fn kl_row(phi: &[f64], target: &[f64]) -> f64 {
    phi.iter()
        .zip(target)
        .map(|(&p, &q)| if p > 0.0 { p * (p / q).ln() } else { 0.0 })
        .sum()
}

/// Loss and gradients of the batch-mean KL term with the target held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGradients {
    pub loss: f64,
    /// One gradient per latent row.
    pub latents: Vec<Vec<f64>>,
    /// One gradient per centroid.
    pub centroids: Vec<Vec<f64>>,
}

/// Mean over rows of `KL(φ_i | Φ_i)`, differentiated through the student-t kernel
/// into the latent vectors and every centroid.
pub fn kl_loss(
    latents: &[Vec<f64>],
    clusters: &[Cluster],
    target: &[Vec<f64>],
    lambda: f64,
) -> Result<KlGradients> {
    if clusters.is_empty() {
        return Err(LeopardError::InvalidState("KL loss over an empty cluster set".into()));
    }
    if latents.len() != target.len() {
        return Err(LeopardError::InvalidArgument(format!(
            "{} latent rows but {} target rows",
            latents.len(),
            target.len()
        )));
    }
    let n = latents.len().max(1) as f64;
    let a = (lambda + 1.0) / 2.0;
    let mut loss = 0.0;
    let mut grad_h = Vec::with_capacity(latents.len());
    let mut grad_c: Vec<Vec<f64>> = clusters.iter().map(|c| vec![0.0; c.dim()]).collect();
    for (h, t) in latents.iter().zip(target) {
        let sq: Vec<f64> = clusters.iter().map(|c| squared_distance(h, c.centre())).collect();
        let phi = soft_assignment_from_sq(&sq, lambda).phi;
        loss += kl_row(&phi, t);
        // dK/ds_k = φ_k (g_k - Σ_j φ_j g_j), g_j = ln(φ_j / Φ_j), s_k = ln kernel_k
        let g: Vec<f64> = phi.iter().zip(t).map(|(p, q)| (p / q).ln()).collect();
        let g_bar: f64 = phi.iter().zip(&g).map(|(p, gj)| p * gj).sum();
        let mut gh = vec![0.0; h.len()];
        for (k, cluster) in clusters.iter().enumerate() {
            let ds = phi[k] * (g[k] - g_bar);
            // ds_k / d(d_k²) = -a / (λ + d_k²); d(d_k²)/dh = 2 (h - c_k)
            let coef = ds * (-a / (lambda + sq[k])) * 2.0 / n;
            if coef == 0.0 {
                continue;
            }
            for ((gv, gc), (hv, cv)) in gh
                .iter_mut()
                .zip(grad_c[k].iter_mut())
                .zip(h.iter().zip(cluster.centre()))
            {
                let d = coef * (hv - cv);
                *gv += d;
                *gc -= d;
            }
        }
        grad_h.push(gh);
    }
    Ok(KlGradients {
        loss: loss / n,
        latents: grad_h,
        centroids: grad_c,
    })
}

/// Recomputes every cluster's class profile from labelled latents:
/// `Ale_jo = Σ_{n in o} φ_j(h_n) / Σ_n φ_j(h_n)`.
pub fn update_allegiance(
    clusters: &mut [Cluster],
    labelled: &[(Vec<f64>, usize)],
    n_classes: usize,
    lambda: f64,
) -> Result<()> {
    if labelled.is_empty() {
        return Err(LeopardError::InvalidState(
            "no labelled prerecorded samples; allegiance undefined".into(),
        ));
    }
    if clusters.is_empty() {
        return Ok(());
    }
    let mut mass = vec![vec![0.0; n_classes]; clusters.len()];
    for (h, label) in labelled {
        let s = similarity(h, clusters, lambda)?;
        for (row, p) in mass.iter_mut().zip(&s.phi) {
            row[*label] += p;
        }
    }
    for (cluster, row) in clusters.iter_mut().zip(mass) {
        let total: f64 = row.iter().sum();
        cluster.allegiance = if total > 0.0 {
            row.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / n_classes as f64; n_classes]
        };
    }
    Ok(())
}

/// Per-layer scores and the aggregated decision for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    /// `None` for layers without clusters (left out of the sum).
    pub local_scores: Vec<Option<Vec<f64>>>,
    pub winners: Vec<Option<usize>>,
    pub global_score: Vec<f64>,
    pub label: usize,
}

/// First index of the maximum (lowest index wins ties).
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

/// Sums the winning cluster's allegiance over layers and picks the best class.
pub fn score_layers(per_layer: &[(&[Cluster], &[f64])], n_classes: usize) -> PredictionTrace {
    let mut global = vec![0.0; n_classes];
    let mut local_scores = Vec::with_capacity(per_layer.len());
    let mut winners = Vec::with_capacity(per_layer.len());
    for (l, (clusters, h)) in per_layer.iter().enumerate() {
        match nearest(h, clusters) {
            Some((win, _)) => {
                let row = clusters[win].allegiance.clone();
                for (g, v) in global.iter_mut().zip(&row) {
                    *g += v;
                }
                local_scores.push(Some(row));
                winners.push(Some(win));
            }
            None => {
                log::debug!("layer {l} has no clusters; skipped in prediction");
                local_scores.push(None);
                winners.push(None);
            }
        }
    }
    PredictionTrace {
        label: argmax(&global),
        local_scores,
        winners,
        global_score: global,
    }
}

/// Class decision of `model` for one raw sample.
pub fn predict(model: &LeopardModel, x: &[f64], domain: Domain) -> Result<PredictionTrace> {
    let z = model.extract(x, domain)?;
    let latents = model.encode(&z, model.depth())?;
    let per_layer: Vec<(&[Cluster], &[f64])> = model
        .layers
        .iter()
        .zip(&latents)
        .map(|(layer, h)| (layer.clusters.as_slice(), h.as_slice()))
        .collect();
    Ok(score_layers(&per_layer, model.config.n_classes))
}

/// Dynamic confidence `k₁ = 2 exp(-‖h - C_win‖) + 2`.
pub fn growth_confidence(distance: f64) -> f64 {
    2.0 * (-distance).exp() + 2.0
}

/// Outcome of offering one latent vector to a layer's cluster set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClusterUpdate {
    /// Empty layer: the sample became the first cluster.
    Bootstrapped,
    /// The sample fell outside the winner's coverage and seeded a new cluster.
    Grew { winner: usize, distance: f64 },
    /// The winner absorbed the sample.
    Absorbed { winner: usize, distance: f64 },
}

impl ClusterUpdate {
    pub fn grew(&self) -> bool {
        !matches!(self, ClusterUpdate::Absorbed { .. })
    }
}

/// Growth test `min_i D(h, C_i) > μ_D + k₁ σ_D` against the nearest cluster.
///
/// The winner records the distance in its Welford statistics either way. A new
/// cluster is centred on `h` with cardinality 1 and inherits the winner's
/// statistics as its prior; an absorbing winner increments its cardinality. On an empty layer `h` becomes
/// the first cluster with `bootstrap_prior`.
pub fn maybe_grow_cluster(
    clusters: &mut Vec<Cluster>,
    h: &[f64],
    n_classes: usize,
    bootstrap_prior: DistanceStats,
) -> ClusterUpdate {
    let Some((winner, sq)) = nearest(h, clusters) else {
        clusters.push(Cluster::new(h.to_vec(), bootstrap_prior, n_classes));
        return ClusterUpdate::Bootstrapped;
    };
    let distance = sq.sqrt();
    let stats = clusters[winner].distance_stats();
    let grow = distance > stats.mean + growth_confidence(distance) * stats.std;
    clusters[winner].distances.push(distance);
    if grow {
        let mut fresh = Cluster::new(h.to_vec(), stats, n_classes);
        fresh.allegiance = clusters[winner].allegiance.clone();
        clusters.push(fresh);
        ClusterUpdate::Grew { winner, distance }
    } else {
        clusters[winner].cardinality += 1;
        ClusterUpdate::Absorbed { winner, distance }
    }
}

/// Scale prior for a layer's first cluster: mean and spread of each sample's
/// distance to its nearest neighbour within `latents`.
pub fn nearest_neighbour_prior(latents: &[Vec<f64>]) -> DistanceStats {
    if latents.len() < 2 {
        return DistanceStats::default();
    }
    let mut stats = RunningStats::default();
    for (i, a) in latents.iter().enumerate() {
        let nn = latents
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, b)| squared_distance(a, b))
            .fold(f64::INFINITY, f64::min);
        stats.push(nn.sqrt());
    }
    DistanceStats {
        mean: stats.mean(),
        std: stats.std(),
    }
}
