use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{CsvData, ExperimentConfig};
use super::divergence::proxy_h_divergence;
use super::kmeans::KMeans;
use crate::clustering::{score_layers, update_allegiance, Cluster, DistanceStats};
use crate::error::{LeopardError, Result};
use crate::learner::{evaluate_with, BatchPair, Learner, LossReport, Switches};
use crate::network::LeopardModel;
use crate::stream::{
    batches_from_dataset, generate_synthetic_streams, inject_drift, load_csv_dataset, mask_labels, DriftSpec,
    Domain, MaskedStreams, StreamBatch, StreamConfig, UnlabelledBatch,
};
use crate::structure::{EventKind, StructuralEvent};

/// Number of k-means restarts of the baseline.
pub const BASELINE_RESTARTS: usize = 10;
/// Lower bound on the baseline's k (`k = max(m, BASELINE_MIN_K)`).
pub const BASELINE_MIN_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Leopard,
    AeKmeans,
}

/// One prequential measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_seed: u64,
    pub batch_index: usize,
    pub stream: Domain,
    pub accuracy: f64,
    pub n_layers: usize,
    pub total_nodes: usize,
    pub total_clusters: usize,
    pub losses: Option<LossReport>,
    pub skipped: bool,
    /// Events of the training step that followed the measurement; attached to
    /// the first record of each batch pair only.
    pub events: Vec<StructuralEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mean_target_accuracy: f64,
    pub mean_source_accuracy: f64,
    pub target_batches: usize,
    pub source_batches: usize,
    pub final_layers: usize,
    pub final_nodes: usize,
    pub final_clusters: usize,
    pub skipped_batches: usize,
    pub grow_node_events: usize,
    pub prune_node_events: usize,
    pub add_layer_events: usize,
    pub drift_events: usize,
}

impl RunSummary {
    /// Everything here is derived from the records of one run.
    pub fn from_records(seed: u64, records: &[MetricsRecord]) -> Result<Self> {
        let of = |d: Domain| -> Vec<f64> {
            records.iter().filter(|r| r.stream == d).map(|r| r.accuracy).collect()
        };
        let (target, source) = (of(Domain::Target), of(Domain::Source));
        let last = records
            .last()
            .ok_or_else(|| LeopardError::InvalidState(format!("run {seed} produced no records")))?;
        let count = |kind: EventKind| {
            records
                .iter()
                .flat_map(|r| &r.events)
                .filter(|e| e.event == kind)
                .count()
        };
        let mut skipped_batches: Vec<usize> = records.iter().filter(|r| r.skipped).map(|r| r.batch_index).collect();
        skipped_batches.dedup();
        Ok(RunSummary {
            seed,
            mean_target_accuracy: mean_of(&target),
            mean_source_accuracy: mean_of(&source),
            target_batches: target.len(),
            source_batches: source.len(),
            final_layers: last.n_layers,
            final_nodes: last.total_nodes,
            final_clusters: last.total_clusters,
            skipped_batches: skipped_batches.len(),
            grow_node_events: count(EventKind::GrowNode),
            prune_node_events: count(EventKind::PruneNode),
            add_layer_events: count(EventKind::AddLayer),
            drift_events: count(EventKind::Drift),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub method: Method,
    pub switches: Switches,
    pub label_proportion: f64,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    /// Mean over runs of the per-run average target-stream accuracy.
    pub mean_accuracy: f64,
    /// Sample standard deviation of the same per-run averages (0 for one run).
    pub std_accuracy: f64,
    pub mean_source_accuracy: f64,
}

impl ExperimentSummary {
    pub fn from_runs(method: Method, config: &ExperimentConfig, runs: Vec<RunSummary>) -> Self {
        let target: Vec<f64> = runs.iter().map(|r| r.mean_target_accuracy).collect();
        let source: Vec<f64> = runs.iter().map(|r| r.mean_source_accuracy).collect();
        ExperimentSummary {
            method,
            switches: effective_switches(method, config),
            label_proportion: config.stream.label_proportion,
            seeds: runs.iter().map(|r| r.seed).collect(),
            mean_accuracy: mean_of(&target),
            std_accuracy: sample_std(&target),
            mean_source_accuracy: mean_of(&source),
            runs,
        }
    }
}

/// Evidence that every batch was scored before it was trained on and that
/// training never touched the evaluation labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolAudit {
    pub evaluations: usize,
    pub training_steps: usize,
    pub label_reads_during_training: usize,
    pub violations: Vec<String>,
}

impl ProtocolAudit {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.label_reads_during_training == 0
    }

    fn merge(&mut self, other: &ProtocolAudit) {
        self.evaluations += other.evaluations;
        self.training_steps += other.training_steps;
        self.label_reads_during_training += other.label_reads_during_training;
        self.violations.extend(other.violations.iter().cloned());
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub audit: ProtocolAudit,
    pub model: LeopardModel,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summary: ExperimentSummary,
    pub runs: Vec<RunOutput>,
    pub audit: ProtocolAudit,
}

/// Streams of one run, ground truth still attached to the raw copies.
#[derive(Debug, Clone)]
pub struct PreparedStreams {
    pub prerecorded: StreamBatch,
    pub source: Vec<StreamBatch>,
    pub target: Vec<StreamBatch>,
    pub n_classes: usize,
    pub stream_config: StreamConfig,
}

impl PreparedStreams {
    pub fn masked(&self) -> Result<MaskedStreams> {
        mask_labels(&self.prerecorded, &self.source, &self.target, &self.stream_config)
    }

    pub fn source_dim(&self) -> usize {
        self.prerecorded.dim()
    }

    pub fn target_dim(&self) -> usize {
        self.target.first().map_or(0, StreamBatch::dim)
    }

    /// Share of the most frequent class over all target batches.
    pub fn target_majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.n_classes];
        let mut total = 0;
        for label in self.target.iter().flat_map(|b| b.labels.iter().flatten()) {
            counts[*label] += 1;
            total += 1;
        }
        counts.into_iter().max().unwrap_or(0) as f64 / total.max(1) as f64
    }
}

/// Generates (or loads) the streams of one run. The seed replaces the stream
/// generator's seed, so every method sees identical data for a given seed.
pub fn prepare_streams(config: &ExperimentConfig, seed: u64) -> Result<PreparedStreams> {
    let mut stream_config = config.stream.clone();
    stream_config.rng_seed = seed;
    match &config.data {
        None => {
            let s = generate_synthetic_streams(&stream_config)?;
            Ok(PreparedStreams {
                prerecorded: s.prerecorded,
                source: s.source,
                target: s.target,
                n_classes: stream_config.n_classes,
                stream_config,
            })
        }
        Some(data) => load_csv_streams(data, stream_config, seed),
    }
}

fn load_csv_streams(data: &CsvData, mut stream_config: StreamConfig, seed: u64) -> Result<PreparedStreams> {
    let source = load_csv_dataset(&data.source, Some(&data.label_column))?;
    let target = load_csv_dataset(&data.target, Some(&data.label_column))?;
    if source.class_names != target.class_names {
        return Err(LeopardError::Config(format!(
            "source classes {:?} differ from target classes {:?}",
            source.class_names, target.class_names
        )));
    }
    let n_pre = stream_config.source_batch_size;
    if source.features.len() <= n_pre {
        return Err(LeopardError::Config(format!(
            "source file has {} rows, fewer than one prerecorded batch plus one stream batch",
            source.features.len()
        )));
    }
    let mut source_batches = batches_from_dataset(&source, Domain::Source, n_pre, true)?;
    let prerecorded = source_batches.remove(0);
    let mut target_batches = batches_from_dataset(&target, Domain::Target, stream_config.target_batch_size, false)?;
    if data.inject_drift {
        let s_spec = DriftSpec::sampled(source.features[0].len(), stream_config.source_drift_batch, seed.wrapping_add(1));
        let t_spec = DriftSpec::sampled(target.features[0].len(), stream_config.target_drift_batch, seed.wrapping_add(2));
        source_batches = inject_drift(source_batches, &s_spec)?;
        target_batches = inject_drift(target_batches, &t_spec)?;
    }
    stream_config.n_classes = source.n_classes;
    stream_config.source_dim = source.features[0].len();
    stream_config.target_dim = target.features[0].len();
    stream_config.n_source_batches = source_batches.len();
    stream_config.n_target_batches = target_batches.len();
    Ok(PreparedStreams {
        prerecorded,
        source: source_batches,
        target: target_batches,
        n_classes: stream_config.n_classes,
        stream_config,
    })
}

fn effective_switches(method: Method, config: &ExperimentConfig) -> Switches {
    match method {
        Method::Leopard => config.switches,
        Method::AeKmeans => Switches::NONE,
    }
}

/// Model after warm-up and cluster seeding, ready for the stream.
pub fn build_learner(
    config: &ExperimentConfig,
    streams: &PreparedStreams,
    masked: &MaskedStreams,
    method: Method,
    seed: u64,
) -> Result<Learner> {
    let model_config = config
        .network
        .model_config(streams.source_dim(), streams.target_dim(), streams.n_classes);
    let model = LeopardModel::new(model_config, config.learner.hyperparameters(), seed)?;
    let mut learner = Learner::new(
        model,
        config.learner.clone(),
        effective_switches(method, config),
        masked.prerecorded.clone(),
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1),
    )?;
    learner.warm_up()?;
    learner.init_clusters()?;
    Ok(learner)
}

/// Nearest k-means centroid on the deepest latents, labelled through allegiance.
struct KMeansClassifier {
    clusters: Vec<Cluster>,
    n_classes: usize,
}

impl KMeansClassifier {
    fn fit(learner: &Learner, latents: &[Vec<f64>], seed: u64) -> Result<Self> {
        let model = learner.model();
        let m = model.config.n_classes;
        let km = KMeans::fit(latents, m.max(BASELINE_MIN_K), BASELINE_RESTARTS, seed)?;
        let mut clusters: Vec<Cluster> = km
            .centroids
            .into_iter()
            .map(|c| Cluster::new(c, DistanceStats::default(), m))
            .collect();
        let prerecorded = learner.prerecorded();
        let labelled: Vec<(Vec<f64>, usize)> = prerecorded
            .labelled()
            .map(|(x, y)| Ok((bottleneck(model, x, Domain::Source)?, y)))
            .collect::<Result<_>>()?;
        update_allegiance(&mut clusters, &labelled, m, model.hyper.lambda)?;
        Ok(KMeansClassifier { clusters, n_classes: m })
    }

    fn predict(&self, model: &LeopardModel, x: &[f64], domain: Domain) -> Result<usize> {
        let h = bottleneck(model, x, domain)?;
        Ok(score_layers(&[(&self.clusters, &h)], self.n_classes).label)
    }
}

fn bottleneck(model: &LeopardModel, x: &[f64], domain: Domain) -> Result<Vec<f64>> {
    let z = model.extract(x, domain)?;
    Ok(model.encode(&z, model.depth())?.pop().unwrap_or(z))
}

fn bottleneck_all(model: &LeopardModel, batches: &[&UnlabelledBatch]) -> Result<Vec<Vec<f64>>> {
    batches
        .iter()
        .flat_map(|b| b.features().iter().map(move |x| (x, b.domain())))
        .map(|(x, d)| bottleneck(model, x, d))
        .collect()
}

/// One seeded run of `method` under the prequential protocol.
pub fn run_single(config: &ExperimentConfig, seed: u64, method: Method) -> Result<RunOutput> {
    let streams = prepare_streams(config, seed)?;
    let masked = streams.masked()?;
    let mut learner = build_learner(config, &streams, &masked, method, seed)?;
    let mut baseline = match method {
        Method::AeKmeans => {
            let pre = masked.prerecorded.as_unlabelled();
            let latents = bottleneck_all(learner.model(), &[&pre])?;
            Some(KMeansClassifier::fit(&learner, &latents, seed)?)
        }
        Method::Leopard => None,
    };

    let (ns, nt) = (masked.source.len(), masked.target.len());
    if ns == 0 || nt == 0 {
        return Err(LeopardError::InvalidArgument("both streams need at least one batch".into()));
    }
    let mut records = Vec::with_capacity(ns + nt);
    let mut audit = ProtocolAudit::default();
    for k in 0..ns.max(nt) {
        let (s_fresh, t_fresh) = (k < ns, k < nt);
        let (si, ti) = (k.min(ns - 1), k.min(nt - 1));
        let batch_index = k + 1;

        let mut scored = Vec::new();
        for (fresh, batch, labels) in [
            (t_fresh, &masked.target[ti], &masked.target_labels[ti]),
            (s_fresh, &masked.source[si], &masked.source_labels[si]),
        ] {
            if !fresh {
                continue;
            }
            let before = labels.read_count();
            let accuracy = match &baseline {
                None => learner.evaluate_batch(batch, labels)?,
                Some(b) => evaluate_with(batch, labels, |x, d| b.predict(learner.model(), x, d))?,
            };
            if labels.read_count() != before + 1 {
                audit
                    .violations
                    .push(format!("{} batch {}: evaluation labels not read exactly once", batch.domain(), batch_index));
            }
            audit.evaluations += 1;
            scored.push((batch.domain(), accuracy));
        }

        let reads_before = masked.hidden_label_reads();
        let report = learner.train_on_batch_pair(BatchPair {
            index: batch_index,
            source: &masked.source[si],
            target: &masked.target[ti],
            source_fresh: s_fresh,
            target_fresh: t_fresh,
        })?;
        audit.training_steps += 1;
        audit.label_reads_during_training += masked.hidden_label_reads() - reads_before;
        for (fresh, labels) in [(s_fresh, &masked.source_labels[si]), (t_fresh, &masked.target_labels[ti])] {
            if fresh && labels.read_count() == 0 {
                audit
                    .violations
                    .push(format!("{} batch {batch_index} trained on before evaluation", labels.domain()));
            }
        }

        if let Some(b) = baseline.as_mut() {
            let fresh: Vec<&UnlabelledBatch> = [(s_fresh, &masked.source[si]), (t_fresh, &masked.target[ti])]
                .into_iter()
                .filter_map(|(f, batch)| f.then_some(batch))
                .collect();
            let latents = bottleneck_all(learner.model(), &fresh)?;
            *b = KMeansClassifier::fit(&learner, &latents, seed.wrapping_add(batch_index as u64))?;
        }

        let model = learner.model();
        let mut events = report.events;
        for (stream, accuracy) in scored {
            records.push(MetricsRecord {
                run_seed: seed,
                batch_index,
                stream,
                accuracy,
                n_layers: model.depth(),
                total_nodes: model.total_nodes(),
                total_clusters: match &baseline {
                    Some(b) => b.clusters.len(),
                    None => model.total_clusters(),
                },
                losses: report.losses.clone(),
                skipped: report.skipped,
                events: std::mem::take(&mut events),
            });
        }
    }
    let summary = RunSummary::from_records(seed, &records)?;
    Ok(RunOutput {
        seed,
        records,
        summary,
        audit,
        model: learner.into_model(),
    })
}

/// All seeds of `config`, run in parallel, summarized in seed order. Nothing
/// is written to disk.
pub fn run_runs(config: &ExperimentConfig, method: Method) -> Result<ExperimentOutput> {
    config.validate()?;
    let runs: Vec<Result<RunOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| scope.spawn(move || run_single(config, seed, method)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(LeopardError::InvalidState("run thread panicked".into()))))
            .collect()
    });
    let runs: Vec<RunOutput> = runs.into_iter().collect::<Result<_>>()?;
    let mut audit = ProtocolAudit::default();
    for r in &runs {
        audit.merge(&r.audit);
    }
    let summary = ExperimentSummary::from_runs(method, config, runs.iter().map(|r| r.summary.clone()).collect());
    Ok(ExperimentOutput { summary, runs, audit })
}

/// Fails early with an I/O error when `dir` cannot be created or written.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LeopardError::io(dir, e))?;
    let probe = dir.join(".write_check");
    File::create(&probe).map_err(|e| LeopardError::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| LeopardError::io(&probe, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| LeopardError::io(path, e))
}

/// Runs an experiment and persists `metrics.jsonl`, `summary.json`,
/// `protocol.json`, one model checkpoint per seed and, when enabled, latent
/// embeddings of the last batch pair.
pub fn run_experiment(config: &ExperimentConfig, method: Method) -> Result<ExperimentOutput> {
    config.validate()?;
    let dir = &config.output_dir;
    ensure_writable(dir)?;
    let output = run_runs(config, method)?;

    let metrics = dir.join("metrics.jsonl");
    let file = File::create(&metrics).map_err(|e| LeopardError::io(&metrics, e))?;
    let mut w = BufWriter::new(file);
    for record in output.runs.iter().flat_map(|r| &r.records) {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n").map_err(|e| LeopardError::io(&metrics, e))?;
    }
    w.flush().map_err(|e| LeopardError::io(&metrics, e))?;
    write_json(&dir.join("summary.json"), &output.summary)?;
    write_json(&dir.join("protocol.json"), &output.audit)?;
    write_json(&dir.join("config.json"), config)?;
    for run in &output.runs {
        run.model.save(&dir.join(format!("model_seed{}.json", run.seed)))?;
        if config.export_embeddings {
            let streams = prepare_streams(config, run.seed)?;
            let last: Vec<&StreamBatch> = [streams.source.last(), streams.target.last()].into_iter().flatten().collect();
            export_embeddings(&dir.join(format!("embeddings_seed{}.csv", run.seed)), &run.model, &last)?;
        }
    }
    log::info!(
        "{:?}: mean target accuracy {:.4} ± {:.4} over {} runs",
        method,
        output.summary.mean_accuracy,
        output.summary.std_accuracy,
        output.runs.len()
    );
    Ok(output)
}

/// Reads back the records written by [`run_experiment`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| LeopardError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Writes `domain, batch_index, label, layer, h0..` rows with every layer's latent of every sample.
pub fn export_embeddings(path: &Path, model: &LeopardModel, batches: &[&StreamBatch]) -> Result<()> {
    let file = File::create(path).map_err(|e| LeopardError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(BufWriter::new(file));
    let max_width = model.widths().into_iter().max().unwrap_or(0).max(model.config.feature_dim);
    let mut header: Vec<String> = ["domain", "batch_index", "label", "layer"].map(String::from).to_vec();
    header.extend((0..max_width).map(|i| format!("h{i}")));
    w.write_record(&header)?;
    for batch in batches {
        for (i, x) in batch.features.iter().enumerate() {
            let z = model.extract(x, batch.domain)?;
            let label = batch.labels.as_ref().map_or(String::new(), |l| l[i].to_string());
            let latents = model.encode(&z, model.depth())?;
            for (layer, h) in std::iter::once(&z).chain(&latents).enumerate() {
                let mut row = vec![batch.domain.to_string(), batch.batch_index.to_string(), label.clone(), layer.to_string()];
                row.extend(h.iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
    }
    w.flush().map_err(|e| LeopardError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label_proportion: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Largest minus smallest mean accuracy across proportions.
    pub spread: f64,
}

/// Repeats the experiment for each label proportion, one sub-directory per value.
pub fn label_proportion_sweep(config: &ExperimentConfig, proportions: &[f64], persist: bool) -> Result<SweepTable> {
    if proportions.is_empty() {
        return Err(LeopardError::Config("empty proportion list".into()));
    }
    if persist {
        ensure_writable(&config.output_dir)?;
    }
    let mut rows = Vec::with_capacity(proportions.len());
    for &p in proportions {
        let mut c = config.clone();
        c.stream.label_proportion = p;
        c.output_dir = config.output_dir.join(format!("p{p}"));
        let out = if persist {
            run_experiment(&c, Method::Leopard)?
        } else {
            run_runs(&c, Method::Leopard)?
        };
        rows.push(SweepRow {
            label_proportion: p,
            mean_accuracy: out.summary.mean_accuracy,
            std_accuracy: out.summary.std_accuracy,
        });
    }
    let means: Vec<f64> = rows.iter().map(|r| r.mean_accuracy).collect();
    let spread = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - means.iter().cloned().fold(f64::INFINITY, f64::min);
    let table = SweepTable { rows, spread };
    if persist {
        write_json(&config.output_dir.join("sweep.json"), &table)?;
        let path = config.output_dir.join("sweep.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for row in &table.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| LeopardError::io(&path, e))?;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub seed: u64,
    /// Proxy divergence of the extractor features on the first batch pair, after warm-up.
    pub divergence_before: f64,
    /// The same measurement with the model left at the end of the stream.
    pub divergence_after: f64,
    /// Divergence of each layer's latents at the end of the stream.
    pub layer_divergence_after: Vec<f64>,
    pub mean_target_accuracy: f64,
}

fn features_of(model: &LeopardModel, batch: &UnlabelledBatch, layer: Option<usize>) -> Result<Vec<Vec<f64>>> {
    batch
        .features()
        .iter()
        .map(|x| {
            let z = model.extract(x, batch.domain())?;
            Ok(match layer {
                None => z,
                Some(l) => model.encode(&z, l + 1)?.swap_remove(l),
            })
        })
        .collect()
}

/// Measures how far the learned features of the two streams are apart before and after a run.
pub fn diagnose(config: &ExperimentConfig, seed: u64) -> Result<DiagnoseReport> {
    let single = config.with_seed(seed);
    single.validate()?;
    let streams = prepare_streams(&single, seed)?;
    let masked = streams.masked()?;
    let initial = build_learner(&single, &streams, &masked, Method::Leopard, seed)?;
    let (s, t) = (&masked.source[0], &masked.target[0]);
    let probe_seed = seed.wrapping_add(77);
    let divergence_before = proxy_h_divergence(
        &features_of(initial.model(), s, None)?,
        &features_of(initial.model(), t, None)?,
        probe_seed,
    )?;
    let run = run_single(&single, seed, Method::Leopard)?;
    let divergence_after = proxy_h_divergence(
        &features_of(&run.model, s, None)?,
        &features_of(&run.model, t, None)?,
        probe_seed,
    )?;
    let layer_divergence_after = (0..run.model.depth())
        .map(|l| {
            proxy_h_divergence(
                &features_of(&run.model, s, Some(l))?,
                &features_of(&run.model, t, Some(l))?,
                probe_seed,
            )
        })
        .collect::<Result<_>>()?;
    Ok(DiagnoseReport {
        seed,
        divergence_before,
        divergence_after,
        layer_divergence_after,
        mean_target_accuracy: run.summary.mean_target_accuracy,
    })
}

/// Writes `diagnose.json` (one report per seed) into the output directory.
pub fn write_diagnose(config: &ExperimentConfig, reports: &[DiagnoseReport]) -> Result<()> {
    ensure_writable(&config.output_dir)?;
    write_json(&config.output_dir.join("diagnose.json"), &reports)
}

/// Writes the streams of one seed as `prerecorded.csv`, `source.csv` and `target.csv`.
pub fn write_streams(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<PreparedStreams> {
    ensure_writable(dir)?;
    let streams = prepare_streams(config, seed)?;
    crate::stream::write_stream_csv(&dir.join("prerecorded.csv"), std::slice::from_ref(&streams.prerecorded))?;
    crate::stream::write_stream_csv(&dir.join("source.csv"), &streams.source)?;
    crate::stream::write_stream_csv(&dir.join("target.csv"), &streams.target)?;
    Ok(streams)
}

pub fn mean_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean_of(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}
