//! Two-stream data model, synthetic drifting streams, CSV ingestion and the
//! label-scarcity masking protocol.
//!
//! Labels travel in two strictly separated channels after [`mask_labels`]:
//! the learner only ever receives [`UnlabelledBatch`] values plus the small
//! labelled [`Prerecorded`] set, while the ground truth of every stream batch
//! sits in [`HiddenLabels`], which only the prequential evaluator opens.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, LeopardError, Result};
use crate::numerics::{seeded_rng, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Domain-classifier target: 1 for source, 0 for target.
    pub fn origin_label(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => f.write_str("source"),
            Domain::Target => f.write_str("target"),
        }
    }
}

/// A batch as produced by a data source, ground truth attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamBatch {
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub batch_index: usize,
}

impl StreamBatch {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
        domain: Domain,
        batch_index: usize,
    ) -> Result<Self> {
        let batch = StreamBatch {
            features,
            labels,
            domain,
            batch_index,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if let Some(i) = self.features.iter().position(|x| x.len() != d) {
            return Err(invalid_arg!(
                "batch {}: sample {i} has dimension {} (expected {d})",
                self.batch_index,
                self.features[i].len()
            ));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.features.len() {
                return Err(invalid_arg!(
                    "batch {}: {} labels for {} samples",
                    self.batch_index,
                    labels.len(),
                    self.features.len()
                ));
            }
        }
        Ok(())
    }
}

/// The only batch type the learner accepts during streaming.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabelledBatch {
    features: Vec<Vec<f64>>,
    domain: Domain,
    batch_index: usize,
}

impl UnlabelledBatch {
    pub fn new(features: Vec<Vec<f64>>, domain: Domain, batch_index: usize) -> Self {
        UnlabelledBatch {
            features,
            domain,
            batch_index,
        }
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn batch_index(&self) -> usize {
        self.batch_index
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Ground truth of one stream batch, readable only through [`HiddenLabels::reveal`],
/// which counts every access so a run can prove when labels were looked at.
#[derive(Debug)]
pub struct HiddenLabels {
    labels: Vec<usize>,
    batch_index: usize,
    domain: Domain,
    reads: AtomicUsize,
}

impl HiddenLabels {
    pub fn new(labels: Vec<usize>, domain: Domain, batch_index: usize) -> Self {
        HiddenLabels {
            labels,
            batch_index,
            domain,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn reveal(&self) -> &[usize] {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.labels
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch_index(&self) -> usize {
        self.batch_index
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }
}

impl Clone for HiddenLabels {
    fn clone(&self) -> Self {
        HiddenLabels::new(self.labels.clone(), self.domain, self.batch_index)
    }
}

/// Prerecorded source sample: every feature vector, labels only for the retained subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prerecorded {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Option<usize>>,
    pub n_classes: usize,
}

impl Prerecorded {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n_labelled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// `(features, label)` pairs of the labelled subset.
    pub fn labelled(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features
            .iter()
            .zip(&self.labels)
            .filter_map(|(x, l)| l.map(|l| (x.as_slice(), l)))
    }

    pub fn as_unlabelled(&self) -> UnlabelledBatch {
        UnlabelledBatch::new(self.features.clone(), Domain::Source, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub n_source_batches: usize,
    pub n_target_batches: usize,
    pub source_batch_size: usize,
    pub target_batch_size: usize,
    pub n_classes: usize,
    pub label_proportion: f64,
    pub source_drift_batch: usize,
    pub target_drift_batch: usize,
    pub source_dim: usize,
    pub target_dim: usize,
    /// Standard deviation of each class blob in the 2-D latent space.
    pub latent_spread: f64,
    /// Additive observation noise in feature space.
    pub noise_std: f64,
    /// Std of the perturbation separating the target's view of the shared
    /// leading coordinates from the source's; 0 makes them identical.
    pub view_shift: f64,
    pub rng_seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            n_source_batches: 40,
            n_target_batches: 40,
            source_batch_size: 100,
            target_batch_size: 120,
            n_classes: 3,
            label_proportion: 0.10,
            source_drift_batch: 20,
            target_drift_batch: 21,
            source_dim: 4,
            target_dim: 6,
            latent_spread: 0.35,
            noise_std: 0.02,
            view_shift: 0.3,
            rng_seed: 0,
        }
    }
}

impl StreamConfig {
    /// `N_m = round(p * N_S)`.
    pub fn prerecorded_size(&self) -> usize {
        (self.label_proportion * self.source_batch_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(invalid_arg!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if !(self.label_proportion > 0.0 && self.label_proportion <= 1.0) {
            return Err(invalid_arg!(
                "label_proportion must lie in (0, 1], got {}",
                self.label_proportion
            ));
        }
        if self.source_batch_size == 0 || self.target_batch_size == 0 {
            return Err(invalid_arg!("batch sizes must be positive"));
        }
        if self.source_dim == 0 || self.target_dim == 0 {
            return Err(invalid_arg!("feature dimensions must be positive"));
        }
        if self.source_drift_batch == self.target_drift_batch {
            return Err(invalid_arg!(
                "drift batches must differ (asynchronous drift), both are {}",
                self.source_drift_batch
            ));
        }
        if !(self.latent_spread >= 0.0 && self.noise_std >= 0.0 && self.view_shift >= 0.0) {
            return Err(invalid_arg!("spread, noise and view shift must be non-negative"));
        }
        Ok(())
    }
}

/// Scaling-hyperplane drift: batches with `batch_index >= start_batch` are rescaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub drift_vector: Vec<f64>,
    pub start_batch: usize,
}

impl DriftSpec {
    /// Drift vector drawn once from `seed`, entries uniform in `[0.5, 2.0]`.
    pub fn sampled(dim: usize, start_batch: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        DriftSpec {
            drift_vector: (0..dim).map(|_| rng.random_range(0.5..=2.0)).collect(),
            start_batch,
        }
    }

    pub fn applies_to(&self, batch_index: usize) -> bool {
        batch_index >= self.start_batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledBatch {
    pub batch: StreamBatch,
    /// Zero-norm samples left untouched.
    pub warnings: usize,
}

/// `x' = (d_z ⊙ x) / ||x||₂` per sample; zero-norm samples pass through unchanged.
pub fn apply_scaling_hyperplane(batch: &StreamBatch, spec: &DriftSpec) -> Result<ScaledBatch> {
    if !batch.is_empty() && batch.dim() != spec.drift_vector.len() {
        return Err(invalid_arg!(
            "drift vector dimension {} does not match batch dimension {}",
            spec.drift_vector.len(),
            batch.dim()
        ));
    }
    let mut warnings = 0;
    let features = batch
        .features
        .iter()
        .map(|x| {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                warnings += 1;
                x.clone()
            } else {
                x.iter()
                    .zip(&spec.drift_vector)
                    .map(|(v, d)| d * v / norm)
                    .collect()
            }
        })
        .collect();
    if warnings > 0 {
        log::warn!(
            "batch {}: {warnings} zero-norm sample(s) left unscaled",
            batch.batch_index
        );
    }
    Ok(ScaledBatch {
        batch: StreamBatch {
            features,
            labels: batch.labels.clone(),
            domain: batch.domain,
            batch_index: batch.batch_index,
        },
        warnings,
    })
}

/// Output of [`generate_synthetic_streams`], ground truth still attached.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStreams {
    pub prerecorded: StreamBatch,
    pub source: Vec<StreamBatch>,
    pub target: Vec<StreamBatch>,
    pub source_drift: DriftSpec,
    pub target_drift: DriftSpec,
}

/// Random affine view of the 2-D latent space into feature space, squashed to (0, 1).
struct LatentView {
    map: Matrix,
    offset: Vec<f64>,
}

impl LatentView {
    fn sample(rng: &mut SeededRng, dim: usize) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data = (0..dim * 2).map(|_| normal.sample(rng)).collect();
        LatentView {
            map: Matrix::from_vec(dim, 2, data).unwrap(),
            offset: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    /// A view whose first `min(dim, self.dim)` coordinates perturb this view's
    /// (weights and offsets jittered by `shift`); further coordinates are fresh.
    fn related(&self, rng: &mut SeededRng, dim: usize, shift: f64) -> Self {
        let jitter = Normal::new(0.0, shift.max(1e-12)).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let shared = dim.min(self.map.rows());
        let mut data = Vec::with_capacity(dim * 2);
        let mut offset = Vec::with_capacity(dim);
        for r in 0..dim {
            if r < shared {
                data.extend(self.map.row(r).iter().map(|w| w + jitter.sample(rng)));
                offset.push(self.offset[r] + jitter.sample(rng));
            } else {
                data.extend((0..2).map(|_| normal.sample(rng)));
                offset.push(rng.random_range(-0.5..0.5));
            }
        }
        LatentView {
            map: Matrix::from_vec(dim, 2, data).unwrap(),
            offset,
        }
    }

    fn project(&self, z: &[f64], noise: &Normal<f64>, rng: &mut SeededRng) -> Vec<f64> {
        self.map
            .matvec(z)
            .unwrap()
            .into_iter()
            .zip(&self.offset)
            .map(|(v, o)| {
                let squashed = 1.0 / (1.0 + (-(v + o)).exp());
                (squashed + noise.sample(rng)).clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// Class blobs in a 2-D latent plane shared by both streams.
struct LatentClasses {
    means: Vec<[f64; 2]>,
    spread: Normal<f64>,
}

impl LatentClasses {
    fn new(n_classes: usize, spread: f64, rng: &mut SeededRng) -> Self {
        // Uneven angular gaps and radii so that no rotation or reflection maps
        // the class layout onto itself.
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let means = (0..n_classes)
            .map(|c| {
                let frac = c as f64 / n_classes as f64;
                let angle = phase + std::f64::consts::TAU * (frac + 0.08 * frac * frac);
                let radius = 1.5 + 0.35 * c as f64;
                [radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        LatentClasses {
            means,
            spread: Normal::new(0.0, spread.max(1e-12)).unwrap(),
        }
    }

    fn draw(&self, rng: &mut SeededRng) -> (Vec<f64>, usize) {
        let class = rng.random_range(0..self.means.len());
        let m = self.means[class];
        (
            vec![m[0] + self.spread.sample(rng), m[1] + self.spread.sample(rng)],
            class,
        )
    }
}

/// Builds the prerecorded source sample plus the source and target streams.
///
/// Both streams observe the same 2-D class latents through random views of
/// dimension `source_dim` and `target_dim`. The target view perturbs the
/// source view on the shared leading coordinates and adds fresh ones, so the
/// streams share the labelling function under covariate shift. Drift is injected with
/// [`apply_scaling_hyperplane`] from `source_drift_batch` / `target_drift_batch` on.
pub fn generate_synthetic_streams(config: &StreamConfig) -> Result<SyntheticStreams> {
    config.validate()?;
    let mut rng = seeded_rng(config.rng_seed);
    let classes = LatentClasses::new(config.n_classes, config.latent_spread, &mut rng);
    let source_view = LatentView::sample(&mut rng, config.source_dim);
    let target_view = source_view.related(&mut rng, config.target_dim, config.view_shift);
    let source_drift = DriftSpec::sampled(
        config.source_dim,
        config.source_drift_batch,
        config.rng_seed.wrapping_add(0x5eed_0001),
    );
    let target_drift = DriftSpec::sampled(
        config.target_dim,
        config.target_drift_batch,
        config.rng_seed.wrapping_add(0x5eed_0002),
    );
    let noise = Normal::new(0.0, config.noise_std.max(1e-12)).unwrap();

    let mut draw_batch = |view: &LatentView, n: usize, domain: Domain, index: usize| {
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (z, class) = classes.draw(&mut rng);
            features.push(view.project(&z, &noise, &mut rng));
            labels.push(class);
        }
        StreamBatch {
            features,
            labels: Some(labels),
            domain,
            batch_index: index,
        }
    };

    let prerecorded = draw_batch(&source_view, config.source_batch_size, Domain::Source, 0);
    let mut source = Vec::with_capacity(config.n_source_batches);
    for k in 1..=config.n_source_batches {
        source.push(draw_batch(&source_view, config.source_batch_size, Domain::Source, k));
    }
    let mut target = Vec::with_capacity(config.n_target_batches);
    for k in 1..=config.n_target_batches {
        target.push(draw_batch(&target_view, config.target_batch_size, Domain::Target, k));
    }
    let source = inject_drift(source, &source_drift)?;
    let target = inject_drift(target, &target_drift)?;
    Ok(SyntheticStreams {
        prerecorded,
        source,
        target,
        source_drift,
        target_drift,
    })
}

/// Applies `spec` to every batch it covers, composing with whatever the data already holds.
pub fn inject_drift(batches: Vec<StreamBatch>, spec: &DriftSpec) -> Result<Vec<StreamBatch>> {
    batches
        .into_iter()
        .map(|b| {
            if spec.applies_to(b.batch_index) {
                apply_scaling_hyperplane(&b, spec).map(|s| s.batch)
            } else {
                Ok(b)
            }
        })
        .collect()
}

/// Streams after the scarcity protocol has been enforced.
#[derive(Debug, Clone)]
pub struct MaskedStreams {
    pub prerecorded: Prerecorded,
    pub source: Vec<UnlabelledBatch>,
    pub target: Vec<UnlabelledBatch>,
    pub source_labels: Vec<HiddenLabels>,
    pub target_labels: Vec<HiddenLabels>,
}

impl MaskedStreams {
    /// Total number of hidden-label reads so far across both streams.
    pub fn hidden_label_reads(&self) -> usize {
        self.source_labels
            .iter()
            .chain(&self.target_labels)
            .map(HiddenLabels::read_count)
            .sum()
    }
}

/// Per-class label quotas summing to `total`, proportional to `counts`, with the
/// remainder handed out by largest fractional part (ties to the lower class).
pub fn proportional_allocation(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| total as f64 * c as f64 / n as f64)
        .collect();
    let mut alloc: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        alloc[c] += 1;
    }
    alloc
}

/// Keeps `round(p * |prerecorded|)` prerecorded labels, allocated proportionally per
/// class, and moves the labels of every stream batch into the hidden channel.
pub fn mask_labels(
    prerecorded: &StreamBatch,
    source_batches: &[StreamBatch],
    target_batches: &[StreamBatch],
    config: &StreamConfig,
) -> Result<MaskedStreams> {
    let labels = prerecorded
        .labels
        .as_ref()
        .ok_or_else(|| invalid_arg!("prerecorded batch carries no labels"))?;
    let m = config.n_classes;
    let mut counts = vec![0usize; m];
    for &l in labels {
        if l >= m {
            return Err(invalid_arg!("label {l} out of range for {m} classes"));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(invalid_arg!("class {c} has no prerecorded samples"));
    }
    let n_keep = (config.label_proportion * prerecorded.len() as f64).round() as usize;
    let mut quota = proportional_allocation(&counts, n_keep);
    let kept = labels
        .iter()
        .map(|&l| {
            if quota[l] > 0 {
                quota[l] -= 1;
                Some(l)
            } else {
                None
            }
        })
        .collect();

    let hide = |batches: &[StreamBatch]| -> Result<(Vec<UnlabelledBatch>, Vec<HiddenLabels>)> {
        let mut open = Vec::with_capacity(batches.len());
        let mut hidden = Vec::with_capacity(batches.len());
        for b in batches {
            b.validate()?;
            let labels = b.labels.clone().ok_or_else(|| {
                invalid_arg!("{} batch {} has no evaluation labels", b.domain, b.batch_index)
            })?;
            hidden.push(HiddenLabels::new(labels, b.domain, b.batch_index));
            open.push(UnlabelledBatch::new(b.features.clone(), b.domain, b.batch_index));
        }
        Ok((open, hidden))
    };
    let (source, source_labels) = hide(source_batches)?;
    let (target, target_labels) = hide(target_batches)?;
    Ok(MaskedStreams {
        prerecorded: Prerecorded {
            features: prerecorded.features.clone(),
            labels: kept,
            n_classes: m,
        },
        source,
        target,
        source_labels,
        target_labels,
    })
}

/// Feature table loaded from CSV, min-max normalized per column.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub feature_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub n_classes: usize,
    /// Original label strings, indexed by class id.
    pub class_names: Vec<String>,
}

pub fn load_csv_dataset(path: &Path, label_column: Option<&str>) -> Result<CsvDataset> {
    let file = std::fs::File::open(path).map_err(|e| LeopardError::io(path, e))?;
    read_csv_dataset(file, label_column)
}

pub fn read_csv_dataset<R: std::io::Read>(reader: R, label_column: Option<&str>) -> Result<CsvDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = match label_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| invalid_arg!("label column {name:?} not found"))?,
        ),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&i| Some(i) != label_idx).collect();
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let mut x = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| LeopardError::Parse {
                row: row + 1,
                column: headers[c].clone(),
                message: format!("non-numeric value {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(LeopardError::Parse {
                    row: row + 1,
                    column: headers[c].clone(),
                    message: format!("non-finite value {cell:?}"),
                });
            }
            x.push(v);
        }
        features.push(x);
        if let Some(li) = label_idx {
            raw_labels.push(record.get(li).unwrap_or("").trim().to_string());
        }
    }
    min_max_normalize(&mut features, feature_cols.len());

    let (labels, class_names) = match label_idx {
        Some(_) => {
            let (ids, names) = index_labels(&raw_labels);
            (Some(ids), names)
        }
        None => (None, Vec::new()),
    };
    Ok(CsvDataset {
        feature_names: feature_cols.iter().map(|&c| headers[c].clone()).collect(),
        features,
        labels,
        n_classes: class_names.len(),
        class_names,
    })
}

/// Maps label strings to contiguous ids, ordered numerically when every label
/// is an integer and lexically otherwise.
fn index_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let numeric: Option<Vec<i64>> = raw.iter().map(|s| s.parse().ok()).collect();
    let mut names: Vec<String> = match &numeric {
        Some(nums) => {
            let mut v: Vec<i64> = nums.clone();
            v.sort_unstable();
            v.dedup();
            v.into_iter().map(|n| n.to_string()).collect()
        }
        None => {
            let set: BTreeMap<&str, ()> = raw.iter().map(|s| (s.as_str(), ())).collect();
            set.into_keys().map(str::to_string).collect()
        }
    };
    if let Some(nums) = numeric {
        let ids = nums
            .iter()
            .map(|n| names.iter().position(|s| *s == n.to_string()).unwrap())
            .collect();
        return (ids, names);
    }
    names.shrink_to_fit();
    let ids = raw
        .iter()
        .map(|s| names.iter().position(|n| n == s).unwrap())
        .collect();
    (ids, names)
}

fn min_max_normalize(rows: &mut [Vec<f64>], dim: usize) {
    for c in 0..dim {
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[c]), hi.max(r[c])));
        let span = hi - lo;
        for r in rows.iter_mut() {
            r[c] = if span > 0.0 { (r[c] - lo) / span } else { 0.0 };
        }
    }
}

/// Splits a dataset into consecutive batches of `batch_size` (last batch may be shorter).
/// Batch 0 is the prerecorded sample when `with_prerecorded` is set.
pub fn batches_from_dataset(
    dataset: &CsvDataset,
    domain: Domain,
    batch_size: usize,
    with_prerecorded: bool,
) -> Result<Vec<StreamBatch>> {
    if batch_size == 0 {
        return Err(invalid_arg!("batch size must be positive"));
    }
    let first_index = if with_prerecorded { 0 } else { 1 };
    Ok(dataset
        .features
        .chunks(batch_size)
        .enumerate()
        .map(|(i, chunk)| {
            let start = i * batch_size;
            StreamBatch {
                features: chunk.to_vec(),
                labels: dataset
                    .labels
                    .as_ref()
                    .map(|l| l[start..start + chunk.len()].to_vec()),
                domain,
                batch_index: first_index + i,
            }
        })
        .collect())
}

/// Writes batches as CSV with columns `f0..f{d-1}, label, batch_index, domain`.
pub fn write_stream_csv(path: &Path, batches: &[StreamBatch]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LeopardError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_stream_csv_to(&mut out, batches)?;
    out.flush().map_err(|e| LeopardError::io(path, e))
}

pub fn write_stream_csv_to<W: Write>(writer: W, batches: &[StreamBatch]) -> Result<()> {
    let dim = batches.iter().map(StreamBatch::dim).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    header.extend(["label", "batch_index", "domain"].map(String::from));
    w.write_record(&header)?;
    for b in batches {
        for (i, x) in b.features.iter().enumerate() {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(
                b.labels
                    .as_ref()
                    .map_or(String::new(), |l| l[i].to_string()),
            );
            rec.push(b.batch_index.to_string());
            rec.push(b.domain.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| LeopardError::io("<csv writer>", e))?;
    Ok(())
}

/// Reads a file produced by [`write_stream_csv`] back into batches (no normalization).
pub fn read_stream_csv(path: &Path) -> Result<Vec<StreamBatch>> {
    let file = std::fs::File::open(path).map_err(|e| LeopardError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid_arg!("stream csv lacks column {name:?}"))
    };
    let (label_c, batch_c, domain_c) = (col("label")?, col("batch_index")?, col("domain")?);
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|c| ![label_c, batch_c, domain_c].contains(c))
        .collect();
    let mut batches: Vec<StreamBatch> = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let parse_err = |c: usize, msg: String| LeopardError::Parse {
            row: row + 1,
            column: headers[c].clone(),
            message: msg,
        };
        let x = feature_cols
            .iter()
            .map(|&c| {
                record[c]
                    .parse::<f64>()
                    .map_err(|e| parse_err(c, e.to_string()))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = match &record[label_c] {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|e| parse_err(label_c, e.to_string()))?),
        };
        let index: usize = record[batch_c]
            .parse()
            .map_err(|e: std::num::ParseIntError| parse_err(batch_c, e.to_string()))?;
        let domain = match &record[domain_c] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(parse_err(domain_c, format!("unknown domain {other:?}"))),
        };
        match batches.last_mut() {
            Some(b) if b.batch_index == index && b.domain == domain => {
                b.features.push(x);
                match (&mut b.labels, label) {
                    (Some(ls), Some(l)) => ls.push(l),
                    (None, None) => {}
                    _ => return Err(parse_err(label_c, "mixed labelled/unlabelled rows".into())),
                }
            }
            _ => batches.push(StreamBatch {
                features: vec![x],
                labels: label.map(|l| vec![l]),
                domain,
                batch_index: index,
            }),
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small_config() -> StreamConfig {
        StreamConfig {
            n_source_batches: 6,
            n_target_batches: 6,
            source_batch_size: 100,
            target_batch_size: 80,
            n_classes: 2,
            source_drift_batch: 3,
            target_drift_batch: 4,
            rng_seed: 11,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn synthetic_dimensions_follow_config() {
        let s = generate_synthetic_streams(&small_config()).unwrap();
        assert_eq!(s.prerecorded.dim(), 4);
        assert_eq!(s.prerecorded.batch_index, 0);
        assert!(s.source.iter().all(|b| b.dim() == 4 && b.len() == 100));
        assert!(s.target.iter().all(|b| b.dim() == 6 && b.len() == 80));
        assert_eq!(s.source.first().unwrap().batch_index, 1);
    }

    #[test]
    fn synthetic_is_reproducible() {
        let a = generate_synthetic_streams(&small_config()).unwrap();
        let b = generate_synthetic_streams(&small_config()).unwrap();
        assert_eq!(a, b);
        let mut other = small_config();
        other.rng_seed = 12;
        assert_ne!(a.source, generate_synthetic_streams(&other).unwrap().source);
    }

    #[test]
    fn fewer_than_two_classes_rejected() {
        let mut c = small_config();
        c.n_classes = 1;
        assert!(matches!(
            generate_synthetic_streams(&c),
            Err(LeopardError::InvalidArgument(_))
        ));
    }

    #[test]
    fn drift_moves_class_conditional_means() {
        let cfg = small_config();
        let s = generate_synthetic_streams(&cfg).unwrap();
        let before = &s.source[0];
        let after = &s.source[cfg.source_drift_batch]; // batch index k_s + 1
        assert_eq!(after.batch_index, cfg.source_drift_batch + 1);
        // largest standardized mean gap over (class, feature) pairs
        let mut best: f64 = 0.0;
        for class in 0..cfg.n_classes {
            for f in 0..cfg.source_dim {
                let pick = |b: &StreamBatch| -> Vec<f64> {
                    b.features
                        .iter()
                        .zip(b.labels.as_ref().unwrap())
                        .filter(|(_, &l)| l == class)
                        .map(|(x, _)| x[f])
                        .collect()
                };
                let (a, b) = (pick(before), pick(after));
                let stats = |v: &[f64]| {
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
                    (m, var / v.len() as f64)
                };
                let ((ma, sa), (mb, sb)) = (stats(&a), stats(&b));
                best = best.max((ma - mb).abs() / (sa + sb).sqrt());
            }
        }
        assert!(best > 3.0, "standardized gap {best}");
    }

    #[test]
    fn scaling_hyperplane_hand_values() {
        let b = StreamBatch::new(vec![vec![3.0, 4.0]], Some(vec![1]), Domain::Source, 5).unwrap();
        let spec = DriftSpec {
            drift_vector: vec![1.0, 1.0],
            start_batch: 0,
        };
        let out = apply_scaling_hyperplane(&b, &spec).unwrap();
        assert_abs_diff_eq!(out.batch.features[0][0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out.batch.features[0][1], 0.8, epsilon = 1e-15);
        assert_eq!(out.batch.labels, Some(vec![1]));
        assert_eq!(out.warnings, 0);

        let unit = StreamBatch::new(vec![vec![0.6, 0.8]], None, Domain::Target, 1).unwrap();
        let same = apply_scaling_hyperplane(&unit, &spec).unwrap();
        assert_abs_diff_eq!(same.batch.features[0][0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(same.batch.features[0][1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn scaling_hyperplane_zero_norm_warns() {
        let b = StreamBatch::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], None, Domain::Source, 1).unwrap();
        let spec = DriftSpec {
            drift_vector: vec![2.0, 3.0],
            start_batch: 0,
        };
        let out = apply_scaling_hyperplane(&b, &spec).unwrap();
        assert_eq!(out.batch.features[0], vec![0.0, 0.0]);
        assert_eq!(out.batch.features[1], vec![2.0, 0.0]);
        assert_eq!(out.warnings, 1);
    }

    #[test]
    fn scaling_hyperplane_dimension_mismatch() {
        let b = StreamBatch::new(vec![vec![1.0, 2.0]], None, Domain::Source, 1).unwrap();
        let spec = DriftSpec {
            drift_vector: vec![1.0],
            start_batch: 0,
        };
        assert!(apply_scaling_hyperplane(&b, &spec).is_err());
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(proportional_allocation(&[50, 50], 10), vec![5, 5]);
        assert_eq!(proportional_allocation(&[34, 33, 33], 5), vec![2, 2, 1]);
        assert_eq!(proportional_allocation(&[3, 4], 7), vec![3, 4]);
    }

    fn labelled_batch(labels: Vec<usize>) -> StreamBatch {
        let features = labels.iter().map(|&l| vec![l as f64]).collect();
        StreamBatch::new(features, Some(labels), Domain::Source, 0).unwrap()
    }

    #[test]
    fn mask_keeps_proportional_prerecorded_labels() {
        let cfg = StreamConfig {
            n_classes: 2,
            label_proportion: 0.10,
            ..StreamConfig::default()
        };
        let pre = labelled_batch((0..100).map(|i| i % 2).collect());
        let masked = mask_labels(&pre, &[], &[], &cfg).unwrap();
        let mut per_class = [0; 2];
        for (_, l) in masked.prerecorded.labelled() {
            per_class[l] += 1;
        }
        assert_eq!(per_class, [5, 5]);
        assert_eq!(masked.prerecorded.len(), 100);

        let full = StreamConfig {
            label_proportion: 1.0,
            ..cfg.clone()
        };
        assert_eq!(mask_labels(&pre, &[], &[], &full).unwrap().prerecorded.n_labelled(), 100);

        let three = StreamConfig {
            n_classes: 3,
            label_proportion: 0.05,
            ..cfg
        };
        let mut labels = vec![0; 34];
        labels.extend(vec![1; 33]);
        labels.extend(vec![2; 33]);
        let masked = mask_labels(&labelled_batch(labels), &[], &[], &three).unwrap();
        let mut per_class = [0; 3];
        for (_, l) in masked.prerecorded.labelled() {
            per_class[l] += 1;
        }
        assert_eq!(per_class, [2, 2, 1]);
    }

    #[test]
    fn mask_rejects_missing_class() {
        let cfg = StreamConfig {
            n_classes: 3,
            ..StreamConfig::default()
        };
        let pre = labelled_batch(vec![0, 1, 0, 1]);
        assert!(matches!(
            mask_labels(&pre, &[], &[], &cfg),
            Err(LeopardError::InvalidArgument(_))
        ));
    }

    #[test]
    fn masking_hides_stream_labels_behind_counter() {
        let cfg = small_config();
        let s = generate_synthetic_streams(&cfg).unwrap();
        let masked = mask_labels(&s.prerecorded, &s.source, &s.target, &cfg).unwrap();
        assert_eq!(masked.source.len(), cfg.n_source_batches);
        assert_eq!(masked.hidden_label_reads(), 0);
        assert_eq!(masked.target_labels[2].reveal(), s.target[2].labels.as_deref().unwrap());
        assert_eq!(masked.hidden_label_reads(), 1);
    }

    #[test]
    fn csv_loading_normalizes_and_indexes() {
        let data = "f0,f1,label\n1,10,b\n3,10,a\n2,10,b\n";
        let ds = read_csv_dataset(data.as_bytes(), Some("label")).unwrap();
        assert_eq!(ds.features.len(), 3);
        assert_eq!(ds.features[0].len(), 2);
        assert_eq!(ds.features[0], vec![0.0, 0.0]);
        assert_eq!(ds.features[1], vec![1.0, 0.0]);
        assert_eq!(ds.features[2], vec![0.5, 0.0]);
        assert_eq!(ds.labels, Some(vec![1, 0, 1]));
        assert_eq!(ds.n_classes, 2);
    }

    #[test]
    fn csv_numeric_labels_sort_numerically() {
        let data = "x,y\n0.5,10\n0.1,2\n0.2,10\n";
        let ds = read_csv_dataset(data.as_bytes(), Some("y")).unwrap();
        assert_eq!(ds.class_names, vec!["2", "10"]);
        assert_eq!(ds.labels, Some(vec![1, 0, 1]));
    }

    #[test]
    fn csv_header_only_is_empty() {
        let ds = read_csv_dataset("f0,f1,label\n".as_bytes(), Some("label")).unwrap();
        assert!(ds.features.is_empty());
        assert_eq!(ds.n_classes, 0);
    }

    #[test]
    fn csv_errors() {
        let bad = "f0,f1\n1,x\n";
        match read_csv_dataset(bad.as_bytes(), None) {
            Err(LeopardError::Parse { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "f1");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            read_csv_dataset("f0\n1\n".as_bytes(), Some("label")),
            Err(LeopardError::InvalidArgument(_))
        ));
    }

    #[test]
    fn stream_csv_round_trip() {
        let cfg = small_config();
        let s = generate_synthetic_streams(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.csv");
        write_stream_csv(&path, &s.target).unwrap();
        let back = read_stream_csv(&path).unwrap();
        assert_eq!(back, s.target);
    }

    #[test]
    fn dataset_batching() {
        let data = "a,label\n1,0\n2,1\n3,0\n4,1\n5,0\n";
        let ds = read_csv_dataset(data.as_bytes(), Some("label")).unwrap();
        let batches = batches_from_dataset(&ds, Domain::Target, 2, true).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].batch_index, 0);
        assert_eq!(batches[2].len(), 1);
        assert_eq!(batches[1].labels, Some(vec![0, 1]));
    }

    proptest! {
        #[test]
        fn scaling_preserves_shape_and_is_deterministic(
            rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..20),
            d in proptest::collection::vec(0.1f64..3.0, 3),
        ) {
            let b = StreamBatch::new(rows, None, Domain::Source, 2).unwrap();
            let spec = DriftSpec { drift_vector: d, start_batch: 0 };
            let a = apply_scaling_hyperplane(&b, &spec).unwrap();
            let c = apply_scaling_hyperplane(&b, &spec).unwrap();
            prop_assert_eq!(a.batch.len(), b.len());
            prop_assert_eq!(a.batch.dim(), b.dim());
            prop_assert_eq!(a, c);
        }

        #[test]
        fn allocation_sums_to_total(counts in proptest::collection::vec(1usize..60, 2..6), frac in 0.01f64..1.0) {
            let n: usize = counts.iter().sum();
            let total = (frac * n as f64).round() as usize;
            let alloc = proportional_allocation(&counts, total);
            prop_assert_eq!(alloc.iter().sum::<usize>(), total);
            for (a, c) in alloc.iter().zip(&counts) {
                prop_assert!(a <= c);
            }
        }
    }
}
