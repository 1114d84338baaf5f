//! Zero-shot and frozen-embedding evaluation: cosine matching with ROC AUC, KNN
//! regression, the linear matching loss, and a perceptron affinity head.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tape;
use crate::contrastive::{dot, embedding_matrix};
use crate::encoder::{bind, Mlp};
use crate::geometry::{dist_sq, Vec3};
use crate::optim::Adam;
use crate::structure_io::CleanChain;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding bank is empty")]
    EmptyBank,
    #[error("unknown id {0}")]
    UnknownId(String),
    #[error("label {0} is not 0 or 1")]
    BadLabel(i64),
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("need at least {0} samples")]
    TooFewSamples(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Cosine similarity in [-1, 1]; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Average (mid) ranks starting at 1.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC: (concordant + 0.5 · tied) / (positives · negatives).
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnnWeighting {
    /// Weights `1 / (s + eps)`: less similar neighbours count more, as literally specified.
    #[default]
    InverseSimilarity,
    /// Weights `max(s, 0) + eps`.
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub epsilon: f64,
    pub weighting: KnnWeighting,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 200,
            epsilon: 1e-8,
            weighting: KnnWeighting::InverseSimilarity,
        }
    }
}

/// Weighted mean label of the `k` most cosine-similar bank entries (ties by bank order).
pub fn knn_regress(query: &[f64], bank: &[(Vec<f64>, f64)], config: &KnnConfig) -> Result<f64, EvalError> {
    if config.k == 0 {
        return Err(EvalError::InvalidK);
    }
    if bank.is_empty() {
        return Err(EvalError::EmptyBank);
    }
    let mut sims: Vec<(f64, usize)> = bank.iter().enumerate().map(|(i, (v, _))| (cosine(query, v), i)).collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (mut num, mut den) = (0.0, 0.0);
    for &(s, i) in sims.iter().take(config.k) {
        let w = match config.weighting {
            KnnWeighting::InverseSimilarity => 1.0 / (s + config.epsilon),
            KnnWeighting::Similarity => s.max(0.0) + config.epsilon,
        };
        num += w * bank[i].1;
        den += w;
    }
    Ok(num / den)
}

/// `-y·p - (1-y)·(1-p)`, linear in the cosine `p`.
pub fn matching_loss(y: f64, p: f64) -> f64 {
    -y * p - (1.0 - y) * (1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub pearson: f64,
    pub spearman: f64,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// RMSE, Pearson r and Spearman ρ (Pearson of midranks). Correlations are NaN when either
/// side is constant.
pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<RegressionMetrics, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(EvalError::TooFewSamples(2));
    }
    let n = pred.len() as f64;
    let rmse = (pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt();
    Ok(RegressionMetrics {
        rmse,
        pearson: pearson(pred, truth),
        spearman: pearson(&midranks(pred), &midranks(truth)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbaConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for LbaConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            epochs: 500,
            learning_rate: 3e-3,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbaFit {
    /// Head on standardized targets; see [`LbaFit::predict`].
    pub head: Mlp,
    pub target_mean: f64,
    pub target_std: f64,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub test_metrics: RegressionMetrics,
    pub train_rmse: f64,
}

impl LbaFit {
    pub fn predict(&self, pocket: &[f64], ligand: &[f64]) -> f64 {
        let x: Vec<f64> = pocket.iter().chain(ligand).copied().collect();
        self.head.forward_vec(&x)[0] * self.target_std + self.target_mean
    }
}

/// Fits a perceptron on `[pocket ‖ ligand]` embeddings with full-batch Adam on MSE of
/// standardized targets, reporting metrics on a seeded held-out split.
pub fn lba_fit(pockets: &[Vec<f64>], ligands: &[Vec<f64>], affinities: &[f64], config: &LbaConfig) -> Result<LbaFit, EvalError> {
    let n = affinities.len();
    if pockets.len() != n || ligands.len() != n {
        return Err(EvalError::LengthMismatch(pockets.len().min(ligands.len()), n));
    }
    if n < 4 {
        return Err(EvalError::TooFewSamples(4));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_test = ((n as f64 * config.holdout_fraction).round() as usize).clamp(2, n - 2);
    let (test_idx, train_idx) = (order[..n_test].to_vec(), order[n_test..].to_vec());

    let features = |idx: &[usize]| embedding_matrix(idx.iter().map(|&i| pockets[i].iter().chain(&ligands[i]).copied().collect()));
    let train_y: Vec<f64> = train_idx.iter().map(|&i| affinities[i]).collect();
    let mean = train_y.iter().sum::<f64>() / train_y.len() as f64;
    let var = train_y.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / train_y.len() as f64;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let x = features(&train_idx);
    let y = Array2::from_shape_fn((train_y.len(), 1), |(i, _)| (train_y[i] - mean) / std);

    let mut dims = vec![x.ncols()];
    dims.extend(&config.hidden);
    dims.push(1);
    let mut head = Mlp::init(&dims, false, config.seed.wrapping_add(17)).zero_last_layer();
    let mut adam = Adam::new(&head.tensors);
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &head.tensors, true);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let out = head.forward_on_tape(&mut tape, &vars, xv);
        let diff = tape.sub(out, yv);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean_all(sq);
        if !tape.scalar(loss).is_finite() {
            return Err(EvalError::NonFiniteLoss(epoch));
        }
        let mut grads = tape.backward(loss);
        let g: Vec<Array2<f64>> = vars.iter().zip(&head.tensors).map(|(&v, t)| grads.take_or_zeros(v, t.dim())).collect();
        adam.step(head.tensors.iter_mut(), &g, config.learning_rate);
    }

    let predict = |idx: &[usize]| -> Vec<f64> { head.forward(&features(idx)).iter().map(|v| v * std + mean).collect() };
    let truth_test: Vec<f64> = test_idx.iter().map(|&i| affinities[i]).collect();
    let test_metrics = regression_metrics(&predict(&test_idx), &truth_test)?;
    let train_pred = predict(&train_idx);
    let train_rmse = (train_pred.iter().zip(&train_y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / train_y.len() as f64).sqrt();
    Ok(LbaFit {
        head,
        target_mean: mean,
        target_std: std,
        train_idx,
        test_idx,
        test_metrics,
        train_rmse,
    })
}

/// Residues with any heavy atom within `radius` Å of any ligand atom.
pub fn pocket_around_ligand(chain: &CleanChain, ligand: &[Vec3], radius: f64) -> BTreeSet<usize> {
    let r2 = radius * radius;
    chain
        .residues
        .iter()
        .enumerate()
        .filter(|(_, res)| res.heavy_atoms.iter().any(|a| ligand.iter().any(|l| dist_sq(a.pos, *l) < r2)))
        .map(|(i, _)| i)
        .collect()
}

/// Zero-shot pocket radius for matching benchmarks (Å).
pub const ZERO_SHOT_RADIUS: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub id_a: String,
    pub id_b: String,
    pub label: i64,
}

pub fn read_pair_list(path: &Path) -> Result<Vec<PairRow>, EvalError> {
    let rows: Vec<PairRow> = csv::Reader::from_path(path)?.deserialize().collect::<Result<_, _>>()?;
    if let Some(bad) = rows.iter().find(|r| r.label != 0 && r.label != 1) {
        return Err(EvalError::BadLabel(bad.label));
    }
    Ok(rows)
}

/// Cosine score and binary label per pair.
pub fn score_pairs(bank: &HashMap<String, Vec<f64>>, pairs: &[PairRow]) -> Result<(Vec<f64>, Vec<bool>), EvalError> {
    let lookup = |id: &str| bank.get(id).ok_or_else(|| EvalError::UnknownId(id.to_string()));
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        scores.push(cosine(lookup(&p.id_a)?, lookup(&p.id_b)?));
    }
    Ok((scores, pairs.iter().map(|p| p.label == 1).collect()))
}

/// AUC of cosine similarity for all unordered pairs, labelled by equal group id.
pub fn grouped_pair_auc(embeddings: &[Vec<f64>], groups: &[usize]) -> Result<f64, EvalError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            scores.push(cosine(&embeddings[i], &embeddings[j]));
            labels.push(groups[i] == groups[j]);
        }
    }
    auc_roc(&scores, &labels)
}
