//! Batch commands behind the `pocketalign` binary.
//!
//! Every `cmd_*` function wraps one library entry point with file I/O and writes a
//! resolved-config snapshot next to its outputs. Errors carry a kind that maps to the
//! process exit code: input problems exit 1, numeric failures exit 2.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use ndarray::Array2;
use pocketalign::contrastive::{embedding_matrix, train, write_history_csv, AlignmentModel, TrainConfig, TrainError, TrainPair};
use pocketalign::encoder::{EncoderConfig, EncoderParams, FrozenEncoder};
use pocketalign::evaluation::{auc_roc, knn_regress, read_pair_list, regression_metrics, score_pairs, KnnConfig, RegressionMetrics};
use pocketalign::fragment_forge::ComplexRecord;
use pocketalign::pipeline::{extract_file, list_structure_files, read_jsonl, write_jsonl, PipelineConfig};
use pocketalign::sampler::{
    build_sampling_table, export_stats, joint_histogram, stratified_sample, total_variation, Histogram1D, Histogram2D,
    InfeasibleBudget,
};
use pocketalign::tensor_io::{read_embedding_bank, write_embedding_bank};
use pocketalign::transfer_bound::{verify_bound, BoundConfig, BoundReport};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn input(e: impl std::fmt::Display) -> Self {
        Self::Input(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 1,
            Self::Numeric(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Input(_) => "input",
            Self::Numeric(_) => "numeric",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parallelism {
    /// Worker threads; 0 lets the pool pick.
    pub threads: usize,
    /// Merge worker results in input order.
    pub deterministic: bool,
}

impl Default for Parallelism {
    fn default() -> Self {
        Self {
            threads: 1,
            deterministic: true,
        }
    }
}

impl Parallelism {
    fn install<T: Send>(&self, job: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(CliError::input)?;
        Ok(pool.install(job))
    }

    /// Maps `f` over `items` on the pool. Results come back in input order when
    /// deterministic, otherwise in completion order.
    fn map<I: Sync, T: Send>(&self, items: &[I], f: impl Fn(&I) -> T + Sync + Send) -> Result<Vec<T>> {
        if self.deterministic {
            return self.install(|| items.par_iter().map(&f).collect());
        }
        let (tx, rx) = mpsc::channel();
        self.install(|| {
            items.par_iter().for_each_with(tx, |tx, item| {
                let _ = tx.send(f(item));
            })
        })?;
        Ok(rx.into_iter().collect())
    }
}

#[derive(Serialize)]
struct Snapshot<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
}

/// `<out>.config.json` beside a file output.
pub fn snapshot_path(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{name}.config.json"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::input)?;
    fs::write(path, text + "\n").map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_snapshot(path: &Path, command: &str, config: &impl Serialize) -> Result<()> {
    let snap = Snapshot {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    write_json(path, &snap)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
        }
        _ => Ok(()),
    }
}

fn read_records(path: &Path) -> Result<Vec<ComplexRecord>> {
    read_jsonl(path).map_err(CliError::input)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractRun {
    pub pdb_dir: PathBuf,
    pub out: PathBuf,
    pub pipeline: PipelineConfig,
    pub parallelism: Parallelism,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub files: usize,
    pub records: usize,
    pub skipped_fragments: usize,
    /// (file, error) for entries that could not be read.
    pub failed: Vec<(String, String)>,
}

pub fn cmd_extract(run: &ExtractRun) -> Result<ExtractSummary> {
    run.pipeline.extraction.validate().map_err(CliError::input)?;
    let files = list_structure_files(&run.pdb_dir).map_err(CliError::input)?;
    let outcomes = run.parallelism.map(&files, |path| (path.clone(), extract_file(path, &run.pipeline)))?;

    let mut summary = ExtractSummary {
        files: files.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for (path, outcome) in outcomes {
        match outcome {
            Ok(entry) => {
                summary.skipped_fragments += entry.skipped_fragments;
                records.extend(entry.records);
            }
            Err(e) => summary.failed.push((path.display().to_string(), e.to_string())),
        }
    }
    summary.records = records.len();
    ensure_parent(&run.out)?;
    write_jsonl(&run.out, &records).map_err(CliError::input)?;
    write_snapshot(&snapshot_path(&run.out), "extract", run)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRun {
    pub input: PathBuf,
    pub target_hist: PathBuf,
    /// Optional rBSA target; adds a per-bin downsampling weight.
    pub target_rbsa: Option<PathBuf>,
    pub budget: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub parallelism: Parallelism,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSummary {
    pub input_records: usize,
    pub sampled: usize,
    pub budget: usize,
    pub expected: f64,
    /// Distance between the sampled joint histogram and the target restricted to cells
    /// the input can reach. `None` when nothing was sampled.
    pub tv_distance: Option<f64>,
    pub infeasible: Option<InfeasibleBudget>,
    pub stats_dir: PathBuf,
}

/// `<out stem>_stats` beside the sampled dataset.
pub fn stats_dir_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_stats"))
}

pub fn cmd_sample(run: &SampleRun) -> Result<SampleSummary> {
    let records = read_records(&run.input)?;
    let target = Histogram2D::read_csv(&run.target_hist).map_err(CliError::input)?;
    let source = joint_histogram(&records, &target.pocket_edges);
    let mut table = build_sampling_table(&source, &target, run.budget)
        .map_err(CliError::input)?
        .with_seed(run.seed);
    if let Some(path) = &run.target_rbsa {
        let rbsa = Histogram1D::read_csv(path).map_err(CliError::input)?;
        table.fit_rbsa_weights(&records, &rbsa);
    }
    let sampled: Vec<ComplexRecord> = run
        .parallelism
        .map(&records, |r| stratified_sample(std::slice::from_ref(r), &table))?
        .into_iter()
        .flatten()
        .collect();

    ensure_parent(&run.out)?;
    write_jsonl(&run.out, &sampled).map_err(CliError::input)?;
    let stats_dir = stats_dir_for(&run.out);
    fs::create_dir_all(&stats_dir).map_err(CliError::input)?;
    let (joint, _) = export_stats(&sampled, &target.pocket_edges, &table.rbsa_edges, &stats_dir).map_err(CliError::input)?;
    let reachable = target.restricted_to(&source).map_err(CliError::input)?;
    let tv = (joint.total() > 0.0 && reachable.total() > 0.0).then(|| total_variation(&joint, &reachable));
    write_snapshot(&snapshot_path(&run.out), "sample", run)?;
    Ok(SampleSummary {
        input_records: records.len(),
        sampled: sampled.len(),
        budget: run.budget,
        expected: table.expected_count,
        tv_distance: tv,
        infeasible: table.infeasible,
        stats_dir,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsRun {
    pub input: PathBuf,
    pub out_dir: PathBuf,
}

/// Joint and rBSA histograms of a dataset, usable as sampling targets.
pub fn cmd_stats(run: &StatsRun) -> Result<(Histogram2D, Histogram1D)> {
    let records = read_records(&run.input)?;
    fs::create_dir_all(&run.out_dir).map_err(CliError::input)?;
    let out = export_stats(
        &records,
        &Histogram2D::default_edges(),
        &Histogram1D::default_rbsa_edges(),
        &run.out_dir,
    )
    .map_err(CliError::input)?;
    write_snapshot(&run.out_dir.join("config.json"), "stats", run)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LigandEncoderSource {
    /// Load a saved encoder checkpoint.
    Checkpoint(PathBuf),
    /// Build one from a config and seed.
    Seeded { config: EncoderConfig, seed: u64 },
}

impl LigandEncoderSource {
    pub fn load(&self) -> Result<FrozenEncoder> {
        match self {
            Self::Checkpoint(path) => Ok(FrozenEncoder::from_params(EncoderParams::load(path).map_err(CliError::input)?)),
            Self::Seeded { config, seed } => FrozenEncoder::new(config.clone(), *seed).map_err(CliError::input),
        }
    }
}

pub const MODEL_FILE: &str = "model.json";
pub const LIGAND_ENCODER_FILE: &str = "ligand_encoder.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub pocket_encoder: EncoderConfig,
    pub ligand_encoder: LigandEncoderSource,
    pub head_hidden: usize,
    pub proj_dim: usize,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
    pub parallelism: Parallelism,
}

impl TrainRun {
    pub fn new(input: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            input,
            out_dir,
            train: TrainConfig::default(),
            pocket_encoder: EncoderConfig::small(32, 4, 2),
            ligand_encoder: LigandEncoderSource::Seeded {
                config: EncoderConfig::small(32, 4, 2),
                seed: 7,
            },
            head_hidden: 64,
            proj_dim: 32,
            init_seed: 1,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub pairs: usize,
    pub epochs: usize,
    pub final_total: f64,
    pub final_top1: f64,
    pub best_top1: f64,
    pub loss_curve_flagged: bool,
    pub stopped_early: bool,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
    pub model_checksum: String,
}

fn model_checksum(model: &AlignmentModel) -> String {
    let names = model.names();
    pocketalign::tensor_io::content_hash(names.iter().map(String::as_str).zip(model.tensors()))
}

/// Library-level training on a dataset, shared by the command and its parity tests.
pub fn train_on_records(records: &[ComplexRecord], run: &TrainRun) -> Result<(pocketalign::contrastive::TrainOutcome, FrozenEncoder)> {
    let pairs: Vec<TrainPair> = records
        .iter()
        .map(TrainPair::from_record)
        .collect::<std::result::Result<_, _>>()
        .map_err(CliError::input)?;
    let frozen = run.ligand_encoder.load()?;
    let model = AlignmentModel::init(
        run.pocket_encoder.clone(),
        frozen.params().config.out_dim,
        run.head_hidden,
        run.proj_dim,
        run.init_seed,
    )
    .map_err(CliError::input)?;
    match train(&pairs, model, &frozen, &run.train) {
        Ok(outcome) => Ok((outcome, frozen)),
        Err(TrainError::NonFiniteLoss { epoch, step, last_good }) => {
            // Keep the last finite parameters for inspection.
            if fs::create_dir_all(&run.out_dir).is_ok() {
                let _ = last_good.save(&run.out_dir.join("last_good_model.json"));
            }
            Err(CliError::Numeric(format!("non-finite loss at epoch {epoch}, step {step}")))
        }
        Err(e) => Err(CliError::input(e)),
    }
}

pub fn cmd_train(run: &TrainRun) -> Result<TrainSummary> {
    let records = read_records(&run.input)?;
    let (outcome, frozen) = run.parallelism.install(|| train_on_records(&records, run))??;
    fs::create_dir_all(&run.out_dir).map_err(CliError::input)?;
    outcome.model.save(&run.out_dir.join(MODEL_FILE)).map_err(CliError::input)?;
    frozen.params().save(&run.out_dir.join(LIGAND_ENCODER_FILE)).map_err(CliError::input)?;
    let history = fs::File::create(run.out_dir.join(HISTORY_FILE)).map_err(CliError::input)?;
    write_history_csv(&outcome.history, history).map_err(CliError::input)?;
    let last = outcome.history.last();
    let summary = TrainSummary {
        pairs: records.len(),
        epochs: outcome.history.len(),
        final_total: last.map_or(f64::NAN, |h| h.total),
        final_top1: last.map_or(f64::NAN, |h| h.top1),
        best_top1: outcome.history.iter().map(|h| h.top1).fold(0.0, f64::max),
        loss_curve_flagged: outcome.loss_curve_flagged,
        stopped_early: outcome.stopped_early,
        frozen_checksum_before: outcome.frozen_checksum_before.clone(),
        frozen_checksum_after: outcome.frozen_checksum_after.clone(),
        model_checksum: model_checksum(&outcome.model),
    };
    write_json(&run.out_dir.join(SUMMARY_FILE), &summary)?;
    write_snapshot(&run.out_dir.join(CONFIG_FILE), "train", run)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRun {
    pub model: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub parallelism: Parallelism,
}

/// Bank id of a dataset record.
pub fn record_id(r: &ComplexRecord) -> String {
    format!("{}:{}-{}", r.source_id, r.span[0], r.span[1])
}

/// Pocket embedding bank for a dataset.
pub fn cmd_embed(run: &EmbedRun) -> Result<usize> {
    let model = AlignmentModel::load(&run.model).map_err(CliError::input)?;
    let records = read_records(&run.input)?;
    let pairs: Vec<(String, TrainPair)> = records
        .iter()
        .map(|r| TrainPair::from_record(r).map(|p| (record_id(r), p)))
        .collect::<std::result::Result<_, _>>()
        .map_err(CliError::input)?;
    let mut entries = run.parallelism.map(&pairs, |(id, p)| (id.clone(), model.encode_pocket(&p.pocket)))?;
    if !run.parallelism.deterministic {
        let order: HashMap<&str, usize> = pairs.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
        entries.sort_by_key(|(id, _)| order[id.as_str()]);
    }
    if entries.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(CliError::Numeric("non-finite pocket embedding".into()));
    }
    ensure_parent(&run.out)?;
    write_embedding_bank(&run.out, &entries).map_err(CliError::input)?;
    write_snapshot(&snapshot_path(&run.out), "embed", run)?;
    Ok(entries.len())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundRun {
    pub model: PathBuf,
    pub ligand_encoder: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub bound: BoundConfig,
    pub parallelism: Parallelism,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub batches: usize,
    pub pairs_checked: usize,
    pub l_t_min: f64,
    pub l_t_max: f64,
    /// Batches where some scale's perturbation broke the Lipschitz condition.
    pub condition_failures: usize,
    pub max_m1_under_condition: f64,
    pub max_m2_under_condition: f64,
    pub violations_under_condition: usize,
    pub reports: Vec<BoundReport>,
}

/// `count` batches of distinct indices in `0..n`, each of size `min(batch_size, n)`.
pub fn sample_batches(n: usize, batch_size: usize, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut b = sample(&mut rng, n, batch_size.min(n)).into_vec();
            b.sort_unstable();
            b
        })
        .collect()
}

/// Runs the verifier on each batch; batch `b` perturbs with seed `bound.seed + b`.
pub fn verify_batches(
    model: &AlignmentModel,
    t: &Array2<f64>,
    s: &Array2<f64>,
    batches: &[Vec<usize>],
    bound: &BoundConfig,
    parallelism: &Parallelism,
) -> Result<BoundSummary> {
    let indexed: Vec<(usize, &Vec<usize>)> = batches.iter().enumerate().collect();
    let mut reports = parallelism.map(&indexed, |&(b, idx)| {
        let tb = t.select(ndarray::Axis(0), idx);
        let sb = s.select(ndarray::Axis(0), idx);
        let cfg = BoundConfig {
            seed: bound.seed.wrapping_add(b as u64),
            ..bound.clone()
        };
        (b, verify_bound(&model.heads, &tb, &sb, &cfg))
    })?;
    reports.sort_by_key(|(b, _)| *b);
    let reports: Vec<BoundReport> = reports.into_iter().map(|(_, r)| r).collect();

    let finite = reports.iter().all(|r| {
        r.l_t_estimate.is_finite()
            && r.scales.iter().all(|s| s.pairs.iter().all(|p| p.loss_l1.is_finite() && p.loss_l2.is_finite()))
    });
    if !finite {
        return Err(CliError::Numeric("non-finite loss or Lipschitz estimate in bound verification".into()));
    }
    let held = || reports.iter().flat_map(|r| r.scales.iter().filter(|s| s.lipschitz_condition_ok));
    Ok(BoundSummary {
        batches: reports.len(),
        pairs_checked: reports.iter().flat_map(|r| &r.scales).map(|s| s.pairs.len()).sum(),
        l_t_min: reports.iter().map(|r| r.l_t_estimate).fold(f64::INFINITY, f64::min),
        l_t_max: reports.iter().map(|r| r.l_t_estimate).fold(0.0, f64::max),
        condition_failures: reports.iter().filter(|r| r.scales.iter().any(|s| !s.lipschitz_condition_ok)).count(),
        max_m1_under_condition: held().map(|s| s.m1).fold(0.0, f64::max),
        max_m2_under_condition: held().map(|s| s.m2).fold(0.0, f64::max),
        violations_under_condition: reports.iter().map(BoundReport::violations_under_condition).sum(),
        reports,
    })
}

pub fn cmd_verify_bound(run: &BoundRun) -> Result<BoundSummary> {
    let model = AlignmentModel::load(&run.model).map_err(CliError::input)?;
    let frozen = FrozenEncoder::from_params(EncoderParams::load(&run.ligand_encoder).map_err(CliError::input)?);
    let records = read_records(&run.input)?;
    if records.len() < 2 {
        return Err(CliError::Input("bound verification needs at least 2 records".into()));
    }
    let pairs: Vec<TrainPair> = records
        .iter()
        .map(TrainPair::from_record)
        .collect::<std::result::Result<_, _>>()
        .map_err(CliError::input)?;
    let encoded = run.parallelism.install(|| {
        pairs
            .par_iter()
            .map(|p| (frozen.encode(&p.ligand), model.encode_pocket(&p.pocket)))
            .collect::<Vec<_>>()
    })?;
    let t = embedding_matrix(encoded.iter().map(|e| e.0.clone()));
    let s = embedding_matrix(encoded.iter().map(|e| e.1.clone()));
    let batches = sample_batches(pairs.len(), run.batch_size, run.batches, run.seed);
    let summary = verify_batches(&model, &t, &s, &batches, &run.bound, &run.parallelism)?;
    ensure_parent(&run.out)?;
    write_json(&run.out, &summary)?;
    write_snapshot(&snapshot_path(&run.out), "verify-bound", run)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub bank: PathBuf,
    /// Pair list (id_a,id_b,label) for matching AUC.
    pub pairs: Option<PathBuf>,
    /// Labels (id,value) for leave-one-out KNN regression over the bank.
    pub labels: Option<PathBuf>,
    pub knn: KnnConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub bank_size: usize,
    pub matching_pairs: Option<usize>,
    pub matching_auc: Option<f64>,
    pub knn_queries: Option<usize>,
    pub knn: Option<RegressionMetrics>,
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    id: String,
    value: f64,
}

fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    csv::Reader::from_path(path)
        .and_then(|mut r| r.deserialize().collect::<std::result::Result<Vec<LabelRow>, _>>())
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Leave-one-out KNN predictions for every labelled id.
pub fn knn_leave_one_out(
    bank: &HashMap<String, Vec<f64>>,
    labels: &[(String, f64)],
    config: &KnnConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut entries = Vec::with_capacity(labels.len());
    for (id, y) in labels {
        let v = bank.get(id).ok_or_else(|| CliError::Input(format!("unknown id {id}")))?;
        entries.push((v.clone(), *y));
    }
    let mut pred = Vec::with_capacity(entries.len());
    for i in 0..entries.len() {
        let rest: Vec<(Vec<f64>, f64)> = entries.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, e)| e.clone()).collect();
        pred.push(knn_regress(&entries[i].0, &rest, config).map_err(CliError::input)?);
    }
    Ok((pred, entries.iter().map(|e| e.1).collect()))
}

pub fn cmd_eval(run: &EvalRun) -> Result<EvalSummary> {
    let bank: HashMap<String, Vec<f64>> = read_embedding_bank(&run.bank).map_err(CliError::input)?.into_iter().collect();
    let mut summary = EvalSummary {
        bank_size: bank.len(),
        matching_pairs: None,
        matching_auc: None,
        knn_queries: None,
        knn: None,
    };
    if let Some(path) = &run.pairs {
        let pairs = read_pair_list(path).map_err(CliError::input)?;
        let (scores, labels) = score_pairs(&bank, &pairs).map_err(CliError::input)?;
        summary.matching_pairs = Some(pairs.len());
        summary.matching_auc = Some(auc_roc(&scores, &labels).map_err(CliError::input)?);
    }
    if let Some(path) = &run.labels {
        let labels: Vec<(String, f64)> = read_labels(path)?.into_iter().map(|r| (r.id, r.value)).collect();
        let (pred, truth) = knn_leave_one_out(&bank, &labels, &run.knn)?;
        if pred.iter().any(|p| !p.is_finite()) {
            return Err(CliError::Numeric("non-finite KNN prediction".into()));
        }
        summary.knn_queries = Some(pred.len());
        summary.knn = Some(regression_metrics(&pred, &truth).map_err(CliError::input)?);
    }
    ensure_parent(&run.out)?;
    write_json(&run.out, &summary)?;
    write_snapshot(&snapshot_path(&run.out), "eval", run)?;
    Ok(summary)
}
