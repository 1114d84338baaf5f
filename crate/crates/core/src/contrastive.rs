//! Dual InfoNCE objective with in-batch negatives and the training loop for the pocket
//! encoder against a frozen ligand encoder.
//!
//! For a batch of aligned pairs the logit matrix is `logits[i][j] = g_T(t_i) · g_S(s_j)`.
//! The ligand-side term for pair `i` contrasts row `i` (all pockets), the pocket-side term
//! contrasts column `i` (all ligands).

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{logsumexp, Tape, Var};
use crate::encoder::{bind, encode, encode_on_tape, EncoderConfig, EncoderError, EncoderParams, FrozenEncoder, Heads, Mlp, TokenSeq};
use crate::fragment_forge::ComplexRecord;
use crate::optim::{Adam, LrSchedule};
use crate::tensor_io::{TensorFile, TensorIoError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        /// Parameters before the failing step.
        last_good: Box<AlignmentModel>,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("frozen encoder parameters changed during training")]
    FrozenEncoderModified,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Left-to-right dot product; the single definition used by every logit computation
/// outside the tape.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Logit matrix from projected ligand rows `gt` and projected pocket rows `gs`.
pub fn logit_matrix(gt: &Array2<f64>, gs: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let (n, m) = (gt.nrows(), gs.nrows());
    Array2::from_shape_fn((n, m), |(i, j)| {
        let a = gt.row(i);
        let b = gs.row(j);
        dot(a.as_slice().expect("contiguous"), b.as_slice().expect("contiguous")) / temperature
    })
}

/// Per-pair ligand-side losses: `-logits[i][i] + logsumexp_j logits[i][j]`.
pub fn l1_terms(logits: &Array2<f64>) -> Vec<f64> {
    (0..logits.nrows())
        .map(|i| -logits[[i, i]] + logsumexp(logits.row(i).iter().copied()))
        .collect()
}

/// Per-pair pocket-side losses: `-logits[i][i] + logsumexp_j logits[j][i]`.
pub fn l2_terms(logits: &Array2<f64>) -> Vec<f64> {
    (0..logits.ncols())
        .map(|i| -logits[[i, i]] + logsumexp(logits.column(i).iter().copied()))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Projects raw ligand (`t`) and pocket (`s`) embeddings through the heads.
pub fn project(t: &Array2<f64>, s: &Array2<f64>, heads: &Heads) -> (Array2<f64>, Array2<f64>) {
    (heads.g_t.forward(t), heads.g_s.forward(s))
}

pub fn loss_l1(t: &Array2<f64>, s: &Array2<f64>, heads: &Heads) -> f64 {
    let (gt, gs) = project(t, s, heads);
    mean(&l1_terms(&logit_matrix(&gt, &gs, 1.0)))
}

pub fn loss_l2(t: &Array2<f64>, s: &Array2<f64>, heads: &Heads) -> f64 {
    let (gt, gs) = project(t, s, heads);
    mean(&l2_terms(&logit_matrix(&gt, &gs, 1.0)))
}

pub fn loss_total(t: &Array2<f64>, s: &Array2<f64>, heads: &Heads) -> f64 {
    loss_l1(t, s, heads) + loss_l2(t, s, heads)
}

/// Fraction of pockets whose highest-logit ligand is their own (ties count as misses).
pub fn top1_accuracy(logits: &Array2<f64>) -> f64 {
    let n = logits.ncols();
    let hits = (0..n)
        .filter(|&j| {
            let own = logits[[j, j]];
            (0..logits.nrows()).all(|i| i == j || logits[[i, j]] < own)
        })
        .count();
    hits as f64 / n as f64
}

/// Trainable part: pocket encoder plus both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub pocket: EncoderParams,
    pub heads: Heads,
}

impl AlignmentModel {
    pub fn init(config: EncoderConfig, ligand_dim: usize, head_hidden: usize, proj_dim: usize, seed: u64) -> Result<Self, EncoderError> {
        let out = config.out_dim;
        Ok(Self {
            pocket: EncoderParams::init(config, seed)?,
            heads: Heads::init(ligand_dim, out, head_hidden, proj_dim, seed.wrapping_add(0x5eed)),
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.pocket.tensors.iter().chain(&self.heads.g_t.tensors).chain(&self.heads.g_s.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.pocket
            .tensors
            .iter_mut()
            .chain(&mut self.heads.g_t.tensors)
            .chain(&mut self.heads.g_s.tensors)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.pocket.config.layout().into_iter().map(|(n, _)| format!("pocket.{n}")).collect();
        names.extend(self.heads.g_t.names("g_t"));
        names.extend(self.heads.g_s.names("g_s"));
        names
    }

    pub fn encode_pocket(&self, tokens: &TokenSeq) -> Vec<f64> {
        encode(tokens, &self.pocket)
    }

    pub fn to_file(&self) -> TensorFile {
        let meta = serde_json::json!({
            "kind": "alignment_model",
            "config": self.pocket.config,
            "g_t_dims": self.heads.g_t.dims,
            "g_s_dims": self.heads.g_s.dims,
        });
        TensorFile::new(meta, self.names().into_iter().zip(self.tensors().cloned()).collect())
    }

    pub fn from_file(file: &TensorFile) -> Result<Self, EncoderError> {
        let bad = |_| EncoderError::InvalidConfig("checkpoint metadata incomplete");
        let config: EncoderConfig = serde_json::from_value(file.metadata["config"].clone()).map_err(bad)?;
        let gt_dims: Vec<usize> = serde_json::from_value(file.metadata["g_t_dims"].clone()).map_err(bad)?;
        let gs_dims: Vec<usize> = serde_json::from_value(file.metadata["g_s_dims"].clone()).map_err(bad)?;
        let mut model = Self {
            pocket: EncoderParams::init(config, 0)?,
            heads: Heads {
                g_t: Mlp::init(&gt_dims, false, 0),
                g_s: Mlp::init(&gs_dims, true, 0),
            },
        };
        let names = model.names();
        let arrays = file.arrays()?;
        if arrays.len() != names.len() {
            return Err(TensorIoError::Layout(format!("{} tensors", arrays.len())).into());
        }
        for ((slot, name), (got, t)) in model.tensors_mut().zip(&names).zip(arrays) {
            if *name != got || slot.dim() != t.dim() {
                return Err(TensorIoError::Layout(got).into());
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        Ok(self.to_file().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_file(&TensorFile::read(path)?)
    }
}

/// One aligned training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub pocket: TokenSeq,
    pub ligand: TokenSeq,
}

impl TrainPair {
    pub fn from_record(record: &ComplexRecord) -> Result<Self, EncoderError> {
        Ok(Self {
            pocket: TokenSeq::from_atoms(&record.pocket.atoms)?,
            ligand: TokenSeq::from_atoms(&record.ligand.atoms)?,
        })
    }
}

/// Tape handles for the batch objective.
pub struct BatchGraph {
    pub params: Vec<Var>,
    pub l1: Var,
    pub l2: Var,
    pub total: Var,
    pub logits: Var,
}

/// Records the batch objective. `ligand_embeddings` are frozen-encoder outputs (B × d_t).
pub fn batch_graph(
    tape: &mut Tape,
    model: &AlignmentModel,
    pockets: &[&TokenSeq],
    ligand_embeddings: &Array2<f64>,
    temperature: f64,
    trainable: bool,
) -> BatchGraph {
    let params = bind(tape, &model.tensors().cloned().collect::<Vec<_>>(), trainable);
    let n_enc = model.pocket.tensors.len();
    let n_gt = model.heads.g_t.tensors.len();
    let enc_vars = &params[..n_enc];
    let gt_vars = &params[n_enc..n_enc + n_gt];
    let gs_vars = &params[n_enc + n_gt..];

    let rows: Vec<Var> = pockets
        .iter()
        .map(|p| encode_on_tape(tape, enc_vars, &model.pocket.config, p))
        .collect();
    let s = tape.concat_rows(&rows);
    let gs = model.heads.g_s.forward_on_tape(tape, gs_vars, s);
    let t = tape.constant(ligand_embeddings.clone());
    let gt = model.heads.g_t.forward_on_tape(tape, gt_vars, t);
    let raw = tape.matmul_t(gt, gs);
    let logits = if temperature == 1.0 { raw } else { tape.scale(raw, 1.0 / temperature) };
    let diag = tape.diag(logits);
    let row_lse = tape.logsumexp_rows(logits);
    let tr = tape.transpose(logits);
    let col_lse = tape.logsumexp_rows(tr);
    let l1_terms = tape.sub(row_lse, diag);
    let l2_terms = tape.sub(col_lse, diag);
    let l1 = tape.mean_all(l1_terms);
    let l2 = tape.mean_all(l2_terms);
    let total = tape.add(l1, l2);
    BatchGraph {
        params,
        l1,
        l2,
        total,
        logits,
    }
}

/// Value and parameter gradients of the batch objective.
pub fn batch_loss_and_grad(
    model: &AlignmentModel,
    pockets: &[&TokenSeq],
    ligand_embeddings: &Array2<f64>,
    temperature: f64,
) -> (f64, f64, f64, Array2<f64>, Vec<Array2<f64>>) {
    let mut tape = Tape::new();
    let g = batch_graph(&mut tape, model, pockets, ligand_embeddings, temperature, true);
    let mut grads = tape.backward(g.total);
    let grad_list = g
        .params
        .iter()
        .zip(model.tensors())
        .map(|(&v, t)| grads.take_or_zeros(v, t.dim()))
        .collect();
    (tape.scalar(g.l1), tape.scalar(g.l2), tape.scalar(g.total), tape.value(g.logits).clone(), grad_list)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub warmup_ratio: f64,
    /// Epochs without validation improvement before stopping; `None` disables.
    pub early_stop_patience: Option<usize>,
    pub validation_fraction: f64,
    pub seed: u64,
    pub temperature: f64,
    /// Stop once the post-epoch in-batch top-1 reaches this value.
    pub target_top1: Option<f64>,
    pub smoothing_window: usize,
    pub monotone_window: usize,
    /// Fixed normalisation of the frozen ligand embeddings, estimated on the training split
    /// and folded into the first layer of `g_t` (see `input_norm_timing`).
    pub ligand_input_norm: InputNorm,
    /// Rescale the gradient so its global L2 norm is at most this value.
    pub grad_clip_norm: Option<f64>,
    /// Eigenvalue floor for whitening, relative to the largest eigenvalue.
    pub whiten_floor: f64,
    /// Whitening scales eigen-direction k by `λ_k^(-exponent/2)`; 1 is full whitening, 0 only centres.
    pub whiten_exponent: f64,
    /// When the normalisation enters `g_t`.
    pub input_norm_timing: NormTiming,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            max_epochs: 100,
            warmup_ratio: 0.06,
            early_stop_patience: Some(20),
            validation_fraction: 0.0,
            seed: 0,
            temperature: 1.0,
            target_top1: None,
            smoothing_window: 5,
            monotone_window: 20,
            ligand_input_norm: InputNorm::Whiten,
            whiten_floor: WHITEN_FLOOR,
            whiten_exponent: 1.0,
            grad_clip_norm: Some(1.0),
            input_norm_timing: NormTiming::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 2"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::InvalidConfig("validation_fraction must lie in [0, 1)"));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::InvalidConfig("temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    /// In-batch top-1 after the epoch's updates, over the epoch's batches.
    pub top1: f64,
    pub lr: f64,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AlignmentModel,
    pub history: Vec<EpochStats>,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
    /// Set when the smoothed loss rose across some window of `monotone_window` epochs.
    pub loss_curve_flagged: bool,
    pub stopped_early: bool,
}

pub fn write_history_csv(history: &[EpochStats], out: impl Write) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "L1", "L2", "total", "top1", "lr"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.l1.to_string(),
            h.l2.to_string(),
            h.total.to_string(),
            h.top1.to_string(),
            h.lr.to_string(),
        ])?;
    }
    w.flush()
}

/// Whether the moving average of `losses` (window `smooth`) ever increases across `window` epochs.
pub fn loss_curve_rises(losses: &[f64], smooth: usize, window: usize) -> bool {
    let smooth = smooth.max(1);
    let smoothed: Vec<f64> = (0..losses.len())
        .map(|e| {
            let lo = (e + 1).saturating_sub(smooth);
            mean(&losses[lo..=e])
        })
        .collect();
    (window..smoothed.len()).any(|e| smoothed[e] > smoothed[e - window] + 1e-12)
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    order.chunks(size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Mean losses and top-1 of `model` over the given batches, without updating.
pub fn evaluate_batches(
    model: &AlignmentModel,
    data: &[TrainPair],
    ligand_embs: &[Vec<f64>],
    batch_list: &[Vec<usize>],
    temperature: f64,
) -> (f64, f64, f64) {
    let (mut l1, mut l2, mut top1) = (0.0, 0.0, 0.0);
    for b in batch_list {
        let s = embedding_matrix(b.iter().map(|&i| model.encode_pocket(&data[i].pocket)));
        let t = embedding_matrix(b.iter().map(|&i| ligand_embs[i].clone()));
        let (gt, gs) = project(&t, &s, &model.heads);
        let logits = logit_matrix(&gt, &gs, temperature);
        l1 += mean(&l1_terms(&logits));
        l2 += mean(&l2_terms(&logits));
        top1 += top1_accuracy(&logits);
    }
    let n = batch_list.len().max(1) as f64;
    (l1 / n, l2 / n, top1 / n)
}

/// Scales all gradients by a common factor so their joint L2 norm does not exceed
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * k));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    None,
    /// Per-feature zero mean and unit variance.
    Standardize,
    /// Symmetric (ZCA) whitening; identity covariance at exponent 1.
    #[default]
    Whiten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormTiming {
    /// Fold into the first layer before the first step; optimisation runs in raw coordinates.
    FoldAtInit,
    /// Train on normalised embeddings and fold afterwards, so Adam sees normalised inputs.
    #[default]
    FoldAfterTraining,
}

/// Relative eigenvalue floor used when whitening rank-deficient inputs.
pub const WHITEN_FLOOR: f64 = 1e-4;

/// Mean and projection `p` such that `(x - mean) · p` normalises the rows as requested.
pub fn input_transform<'a>(
    rows: impl Iterator<Item = &'a Vec<f64>>,
    norm: InputNorm,
    floor: f64,
    exponent: f64,
) -> Option<(Vec<f64>, Array2<f64>)> {
    let x = embedding_matrix(rows.cloned());
    let (n, d) = x.dim();
    if norm == InputNorm::None || n == 0 {
        return None;
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centred = &x - &mean.view().insert_axis(ndarray::Axis(0));
    let cov = centred.t().dot(&centred) / n as f64;
    let p = match norm {
        InputNorm::Standardize => Array2::from_diag(&cov.diag().mapv(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })),
        _ => {
            let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
            let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let floor = (floor * top).max(f64::MIN_POSITIVE);
            let v = &eig.eigenvectors;
            let scale: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(floor).powf(-0.5 * exponent)).collect();
            Array2::from_shape_fn((d, d), |(i, j)| (0..d).map(|k| v[(i, k)] * scale[k] * v[(j, k)]).sum())
        }
    };
    Some((mean.to_vec(), p))
}

pub fn embedding_matrix(rows: impl IntoIterator<Item = Vec<f64>>) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = rows.into_iter().collect();
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// Adam training of the pocket encoder and heads; the ligand encoder is only read.
pub fn train(
    data: &[TrainPair],
    model: AlignmentModel,
    frozen: &FrozenEncoder,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.len() < 2 {
        return Err(TrainError::EmptyDataset);
    }
    let checksum_before = frozen.current_checksum();
    let mut ligand_embs: Vec<Vec<f64>> = data.iter().map(|p| frozen.encode(&p.ligand)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(&mut rng);
    let n_val = ((data.len() as f64) * config.validation_fraction).round() as usize;
    let n_val = if n_val == 1 { 2 } else { n_val }.min(data.len() - 2);
    let (val_idx, train_idx) = indices.split_at(n_val);
    let val_batches = batches(val_idx, config.batch_size);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();

    let steps_per_epoch = batches(&train_idx, config.batch_size).len().max(1);
    let schedule = LrSchedule::new(config.learning_rate, steps_per_epoch * config.max_epochs, config.warmup_ratio);
    let mut model = model;
    let transform = input_transform(train_idx.iter().map(|&i| &ligand_embs[i]), config.ligand_input_norm, config.whiten_floor, config.whiten_exponent);
    let mut pending = None;
    if let Some((mean, p)) = transform {
        match config.input_norm_timing {
            NormTiming::FoldAtInit => model.heads.g_t.fold_input_transform(&mean, &p),
            NormTiming::FoldAfterTraining => {
                for row in &mut ligand_embs {
                    let centred = Array1::from_iter(row.iter().zip(&mean).map(|(v, m)| v - m));
                    *row = centred.dot(&p).to_vec();
                }
                pending = Some((mean, p));
            }
        }
    }
    let finish = |mut model: AlignmentModel| {
        if let Some((mean, p)) = &pending {
            model.heads.g_t.fold_input_transform(mean, p);
        }
        model
    };
    let mut adam = Adam::new(model.tensors());
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        train_idx.shuffle(&mut rng);
        let epoch_batches = batches(&train_idx, config.batch_size);
        let (mut l1_sum, mut l2_sum, mut lr) = (0.0, 0.0, 0.0);
        for b in &epoch_batches {
            let pockets: Vec<&TokenSeq> = b.iter().map(|&i| &data[i].pocket).collect();
            let t = embedding_matrix(b.iter().map(|&i| ligand_embs[i].clone()));
            let (l1, l2, total, _, grads) = batch_loss_and_grad(&model, &pockets, &t, config.temperature);
            if !total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    last_good: Box::new(finish(model)),
                });
            }
            let mut grads = grads;
            if let Some(max_norm) = config.grad_clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            lr = schedule.at(step);
            adam.step(model.tensors_mut(), &grads, lr);
            l1_sum += l1;
            l2_sum += l2;
            step += 1;
        }
        let nb = epoch_batches.len().max(1) as f64;
        let (_, _, top1) = evaluate_batches(&model, data, &ligand_embs, &epoch_batches, config.temperature);
        let val_total = (!val_batches.is_empty()).then(|| {
            let (a, b, _) = evaluate_batches(&model, data, &ligand_embs, &val_batches, config.temperature);
            a + b
        });
        let stats = EpochStats {
            epoch,
            l1: l1_sum / nb,
            l2: l2_sum / nb,
            total: (l1_sum + l2_sum) / nb,
            top1,
            lr,
            val_total,
        };
        let monitored = stats.val_total.unwrap_or(stats.total);
        history.push(stats);

        if config.target_top1.is_some_and(|target| top1 >= target) {
            stopped_early = epoch + 1 < config.max_epochs;
            break;
        }
        if monitored < best_val {
            best_val = monitored;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.early_stop_patience.is_some_and(|p| since_best >= p) {
            stopped_early = true;
            break;
        }
    }

    let checksum_after = frozen.current_checksum();
    if checksum_after != checksum_before {
        return Err(TrainError::FrozenEncoderModified);
    }
    let losses: Vec<f64> = history.iter().map(|h| h.total).collect();
    Ok(TrainOutcome {
        model: finish(model),
        loss_curve_flagged: loss_curve_rises(&losses, config.smoothing_window, config.monotone_window),
        history,
        frozen_checksum_before: checksum_before,
        frozen_checksum_after: checksum_after,
        stopped_early,
    })
}

/// Largest relative disagreement between backprop and central differences over every
/// model parameter. Per component: `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    model: &AlignmentModel,
    pockets: &[&TokenSeq],
    ligand_embeddings: &Array2<f64>,
    step: f64,
    floor: f64,
) -> f64 {
    let (_, _, _, _, grads) = batch_loss_and_grad(model, pockets, ligand_embeddings, 1.0);
    let eval = |m: &AlignmentModel| {
        let s = embedding_matrix(pockets.iter().map(|p| m.encode_pocket(p)));
        loss_total(ligand_embeddings, &s, &m.heads)
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (n, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let original = model.tensors().nth(n).expect("tensor").as_slice().expect("contiguous")[k];
            let set = |m: &mut AlignmentModel, v: f64| {
                m.tensors_mut().nth(n).expect("tensor").as_slice_mut().expect("contiguous")[k] = v;
            };
            set(&mut probe, original + step);
            let plus = eval(&probe);
            set(&mut probe, original - step);
            let minus = eval(&probe);
            set(&mut probe, original);
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = g.as_slice().expect("contiguous")[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::tests::random_matrix;
    use rand::Rng;

    fn identity_heads(d: usize) -> Heads {
        let mut g_t = Mlp::init(&[d, d], false, 0);
        g_t.tensors[0] = Array2::eye(d);
        let mut g_s = Mlp::init(&[d, d], false, 0);
        g_s.tensors[0] = Array2::eye(d);
        Heads { g_t, g_s }
    }

    #[test]
    fn whitening_gives_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mix = crate::autograd::tests::random_matrix(&mut rng, 3, 3);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let z = crate::autograd::tests::random_matrix(&mut rng, 1, 3);
                (z.dot(&mix) + 5.0).row(0).to_vec()
            })
            .collect();
        let (mean, p) = input_transform(rows.iter(), InputNorm::Whiten, 0.0, 1.0).unwrap();
        let x = embedding_matrix(rows.iter().cloned());
        let m = Array2::from_shape_vec((1, 3), mean).unwrap();
        let z = (&x - &m).dot(&p);
        let cov = z.t().dot(&z) / 400.0;
        for i in 0..3 {
            assert!(z.column(i).sum().abs() < 1e-9);
            for j in 0..3 {
                assert!((cov[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9, "{cov:?}");
            }
        }
        assert!(input_transform(rows.iter(), InputNorm::None, 0.0, 1.0).is_none());
    }

    #[test]
    fn single_pair_batch_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = Heads::init(4, 4, 8, 4, 2);
        let (t, s) = (random_matrix(&mut rng, 1, 4), random_matrix(&mut rng, 1, 4));
        assert_eq!(loss_l1(&t, &s, &heads), 0.0);
        assert_eq!(loss_l2(&t, &s, &heads), 0.0);
        assert_eq!(loss_total(&t, &s, &heads), 0.0);
    }

    #[test]
    fn identical_embeddings_give_log_n() {
        let heads = Heads::init(3, 3, 5, 4, 3);
        let n = 7;
        let t = Array2::from_shape_fn((n, 3), |(_, j)| 0.2 + j as f64);
        let s = Array2::from_shape_fn((n, 3), |(_, j)| 0.5 - j as f64);
        let ln = (n as f64).ln();
        assert!((loss_l1(&t, &s, &heads) - ln).abs() < 1e-10);
        assert!((loss_l2(&t, &s, &heads) - ln).abs() < 1e-10);
        assert!((loss_total(&t, &s, &heads) - 2.0 * ln).abs() < 1e-10);
    }

    #[test]
    fn two_pair_closed_form() {
        // Positive logits 1 on the diagonal, negatives 0.
        let heads = identity_heads(2);
        let t = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((expect - 0.31326).abs() < 1e-5);
        assert!((loss_l1(&t, &t, &heads) - expect).abs() < 1e-12);
        assert!((loss_l2(&t, &t, &heads) - expect).abs() < 1e-12);
    }

    #[test]
    fn losses_are_nonnegative_and_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let heads = Heads::init(4, 4, 6, 3, 5);
        for _ in 0..20 {
            let n = rng.random_range(2..7);
            let t = random_matrix(&mut rng, n, 4);
            let s = random_matrix(&mut rng, n, 4);
            let (l1, l2) = (loss_l1(&t, &s, &heads), loss_l2(&t, &s, &heads));
            assert!(l1 >= 0.0 && l2 >= 0.0);
            assert_eq!(loss_total(&t, &s, &heads), l1 + l2);
            // Reordering the batch permutes negatives but leaves the mean unchanged.
            let perm: Vec<usize> = (0..n).rev().collect();
            let tp = t.select(ndarray::Axis(0), &perm);
            let sp = s.select(ndarray::Axis(0), &perm);
            assert!((loss_l1(&tp, &sp, &heads) - l1).abs() < 1e-12);
            assert!((loss_l2(&tp, &sp, &heads) - l2).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_objective_matches_plain_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = AlignmentModel::init(EncoderConfig::small(8, 2, 1), 8, 8, 4, 1).unwrap();
        let toks: Vec<TokenSeq> = (0..3)
            .map(|_| {
                let l = rng.random_range(2..6);
                TokenSeq::new(
                    (0..l).map(|_| rng.random_range(1..6)).collect(),
                    (0..l).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect(),
                )
                .unwrap()
            })
            .collect();
        let refs: Vec<&TokenSeq> = toks.iter().collect();
        let t = random_matrix(&mut rng, 3, 8);
        let s = embedding_matrix(toks.iter().map(|p| model.encode_pocket(p)));
        let (l1, l2, total, _, _) = batch_loss_and_grad(&model, &refs, &t, 1.0);
        assert!((l1 - loss_l1(&t, &s, &model.heads)).abs() < 1e-12);
        assert!((l2 - loss_l2(&t, &s, &model.heads)).abs() < 1e-12);
        assert!((total - loss_total(&t, &s, &model.heads)).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = AlignmentModel::init(EncoderConfig::small(8, 2, 2), 8, 8, 4, 12).unwrap();
        let toks: Vec<TokenSeq> = (0..3)
            .map(|_| {
                let l = rng.random_range(3..7);
                TokenSeq::new(
                    (0..l).map(|_| rng.random_range(1..6)).collect(),
                    (0..l).map(|_| std::array::from_fn(|_| rng.random_range(-4.0..4.0))).collect(),
                )
                .unwrap()
            })
            .collect();
        let refs: Vec<&TokenSeq> = toks.iter().collect();
        let t = random_matrix(&mut rng, 3, 8);
        let err = gradient_check(&model, &refs, &t, 1e-5, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn top1_counts_strict_winners() {
        let logits = Array2::from_shape_vec((3, 3), vec![2.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        // Column 0: 2 wins. Column 1: 1 > 0 wins. Column 2: tie with row 0 and row 1.
        assert!((top1_accuracy(&logits) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn curve_flag() {
        let falling: Vec<f64> = (0..60).map(|e| 1.0 / (1.0 + e as f64)).collect();
        assert!(!loss_curve_rises(&falling, 5, 20));
        let mut rising = falling.clone();
        for (e, v) in rising.iter_mut().enumerate().skip(30) {
            *v += 0.01 * e as f64;
        }
        assert!(loss_curve_rises(&rising, 5, 20));
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        write_history_csv(
            &[EpochStats {
                epoch: 0,
                l1: 1.0,
                l2: 2.0,
                total: 3.0,
                top1: 0.5,
                lr: 0.001,
                val_total: None,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,L1,L2,total,top1,lr\n0,1,2,3,0.5,0.001\n");
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = AlignmentModel::init(EncoderConfig::small(8, 2, 1), 8, 6, 4, 3).unwrap();
        model.save(&path).unwrap();
        assert_eq!(AlignmentModel::load(&path).unwrap(), model);
    }
}
