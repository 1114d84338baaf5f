//! Stratified thinning of candidate complexes toward a reference distribution.
//!
//! Records are binned by (effective ligand size, pocket size). Each cell receives an
//! acceptance rate `p = min(1, c * target_mass / source_mass)` where `c` is the largest
//! scale whose expected yield stays within the budget. An optional second pass multiplies
//! in per-rBSA-bin weights that downsample over-represented burial fractions.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fragment_forge::ComplexRecord;

pub const LIGAND_BINS: usize = 8;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("budget {budget} exceeds the {available} available source records")]
    BudgetExceedsSource { budget: usize, available: usize },
    #[error("histogram bin layouts differ")]
    ShapeMismatch,
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Bin index for `value` over ascending `edges`; out-of-range values go to the edge bins.
fn bin_of(edges: &[f64], value: f64) -> usize {
    let bins = edges.len() - 1;
    match edges.iter().rposition(|&e| e <= value) {
        None => 0,
        Some(k) => k.min(bins - 1),
    }
}

fn uniform_edges(start: f64, width: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|k| start + width * k as f64).collect()
}

/// Joint (ligand size, pocket size) histogram. Ligand rows are sizes 1..=8 with larger
/// sizes folded into the last row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    pub pocket_edges: Vec<f64>,
    /// `counts[ligand_size - 1][pocket_bin]`.
    pub counts: Vec<Vec<f64>>,
}

impl Histogram2D {
    pub fn empty(pocket_edges: Vec<f64>) -> Self {
        assert!(pocket_edges.len() >= 2, "need at least one pocket bin");
        let cols = pocket_edges.len() - 1;
        Self {
            pocket_edges,
            counts: vec![vec![0.0; cols]; LIGAND_BINS],
        }
    }

    /// Width-5 pocket bins covering 0..100 residues.
    pub fn default_edges() -> Vec<f64> {
        uniform_edges(0.0, 5.0, 20)
    }

    pub fn cols(&self) -> usize {
        self.pocket_edges.len() - 1
    }

    pub fn cell(&self, ligand_size: usize, pocket_size: usize) -> (usize, usize) {
        let row = ligand_size.clamp(1, LIGAND_BINS) - 1;
        (row, bin_of(&self.pocket_edges, pocket_size as f64))
    }

    pub fn add(&mut self, ligand_size: usize, pocket_size: usize, weight: f64) {
        let (r, c) = self.cell(ligand_size, pocket_size);
        self.counts[r][c] += weight;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }

    pub fn mass(&self) -> Vec<Vec<f64>> {
        let total = self.total();
        self.counts
            .iter()
            .map(|row| row.iter().map(|&c| if total > 0.0 { c / total } else { 0.0 }).collect())
            .collect()
    }

    /// Associative merge of two histograms with the same layout.
    pub fn merge(&mut self, other: &Histogram2D) -> Result<(), SamplerError> {
        if self.pocket_edges != other.pocket_edges {
            return Err(SamplerError::ShapeMismatch);
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }

    /// Copy of `self` with cells zeroed wherever `support` has no count.
    pub fn restricted_to(&self, support: &Histogram2D) -> Result<Histogram2D, SamplerError> {
        if self.pocket_edges != support.pocket_edges {
            return Err(SamplerError::ShapeMismatch);
        }
        let mut out = self.clone();
        for (a, s) in out.counts.iter_mut().flatten().zip(support.counts.iter().flatten()) {
            if *s <= 0.0 {
                *a = 0.0;
            }
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SamplerError> {
        let mut w = csv::Writer::from_path(path)?;
        let mass = self.mass();
        for (r, row) in self.counts.iter().enumerate() {
            for (c, &count) in row.iter().enumerate() {
                w.serialize(JointRow {
                    ligand_size: r + 1,
                    pocket_bin_start: self.pocket_edges[c],
                    pocket_bin_end: self.pocket_edges[c + 1],
                    count,
                    mass: mass[r][c],
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the joint CSV layout. When every count is zero the `mass` column is used.
    pub fn read_csv(path: &Path) -> Result<Histogram2D, SamplerError> {
        let rows: Vec<JointRow> = csv::Reader::from_path(path)?
            .deserialize()
            .collect::<Result<_, _>>()?;
        let mut edges: Vec<f64> = rows.iter().flat_map(|r| [r.pocket_bin_start, r.pocket_bin_end]).collect();
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        if edges.len() < 2 {
            return Err(SamplerError::InvalidHistogram("no bins".into()));
        }
        let use_mass = rows.iter().all(|r| r.count == 0.0);
        let mut hist = Histogram2D::empty(edges);
        for row in &rows {
            if !(1..=LIGAND_BINS).contains(&row.ligand_size) {
                return Err(SamplerError::InvalidHistogram(format!("ligand_size {}", row.ligand_size)));
            }
            let value = if use_mass { row.mass } else { row.count };
            if !(value >= 0.0) {
                return Err(SamplerError::InvalidHistogram("negative or NaN count".into()));
            }
            let col = bin_of(&hist.pocket_edges, row.pocket_bin_start);
            hist.counts[row.ligand_size - 1][col] += value;
        }
        Ok(hist)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JointRow {
    ligand_size: usize,
    pocket_bin_start: f64,
    pocket_bin_end: f64,
    count: f64,
    mass: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BinRow {
    bin_start: f64,
    bin_end: f64,
    count: f64,
    mass: f64,
}

/// One-dimensional histogram over rBSA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram1D {
    pub edges: Vec<f64>,
    pub counts: Vec<f64>,
}

impl Histogram1D {
    pub fn empty(edges: Vec<f64>) -> Self {
        assert!(edges.len() >= 2, "need at least one bin");
        let n = edges.len() - 1;
        Self {
            edges,
            counts: vec![0.0; n],
        }
    }

    /// Width-0.05 bins over [0, 1].
    pub fn default_rbsa_edges() -> Vec<f64> {
        (0..=20).map(|k| k as f64 / 20.0).collect()
    }

    pub fn bin(&self, value: f64) -> usize {
        bin_of(&self.edges, value)
    }

    pub fn add(&mut self, value: f64, weight: f64) {
        let b = self.bin(value);
        self.counts[b] += weight;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn mass(&self) -> Vec<f64> {
        let total = self.total();
        self.counts.iter().map(|&c| if total > 0.0 { c / total } else { 0.0 }).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SamplerError> {
        let mut w = csv::Writer::from_path(path)?;
        let mass = self.mass();
        for (k, &count) in self.counts.iter().enumerate() {
            w.serialize(BinRow {
                bin_start: self.edges[k],
                bin_end: self.edges[k + 1],
                count,
                mass: mass[k],
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Histogram1D, SamplerError> {
        let rows: Vec<BinRow> = csv::Reader::from_path(path)?
            .deserialize()
            .collect::<Result<_, _>>()?;
        if rows.is_empty() {
            return Err(SamplerError::InvalidHistogram("no bins".into()));
        }
        let mut edges: Vec<f64> = rows.iter().map(|r| r.bin_start).collect();
        edges.push(rows[rows.len() - 1].bin_end);
        let use_mass = rows.iter().all(|r| r.count == 0.0);
        Ok(Histogram1D {
            edges,
            counts: rows.iter().map(|r| if use_mass { r.mass } else { r.count }).collect(),
        })
    }
}

pub fn joint_histogram(records: &[ComplexRecord], pocket_edges: &[f64]) -> Histogram2D {
    let mut hist = Histogram2D::empty(pocket_edges.to_vec());
    for r in records {
        hist.add(r.ligand_size, r.pocket_size, 1.0);
    }
    hist
}

pub fn rbsa_histogram(records: &[ComplexRecord], edges: &[f64]) -> Histogram1D {
    let mut hist = Histogram1D::empty(edges.to_vec());
    for r in records {
        hist.add(r.rbsa, 1.0);
    }
    hist
}

/// Half the L1 distance between the normalised masses.
pub fn total_variation(a: &Histogram2D, b: &Histogram2D) -> f64 {
    let (ma, mb) = (a.mass(), b.mass());
    0.5 * ma
        .iter()
        .flatten()
        .zip(mb.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleBudget {
    /// Expected yield with every supported cell fully accepted.
    pub max_expected: f64,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingTable {
    pub pocket_edges: Vec<f64>,
    /// `rates[ligand_size - 1][pocket_bin]`, each in [0, 1].
    pub rates: Vec<Vec<f64>>,
    pub rbsa_edges: Vec<f64>,
    pub rbsa_weights: Vec<f64>,
    pub seed: u64,
    pub scale: f64,
    pub expected_count: f64,
    /// Set when even full acceptance of the target support yields under half the budget.
    pub infeasible: Option<InfeasibleBudget>,
}

impl SamplingTable {
    /// Table that keeps every record.
    pub fn uniform(pocket_edges: Vec<f64>, rate: f64) -> Self {
        let cols = pocket_edges.len() - 1;
        Self {
            pocket_edges,
            rates: vec![vec![rate; cols]; LIGAND_BINS],
            rbsa_edges: Histogram1D::default_rbsa_edges(),
            rbsa_weights: vec![1.0; 20],
            seed: 0,
            scale: rate,
            expected_count: f64::NAN,
            infeasible: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn acceptance(&self, record: &ComplexRecord) -> f64 {
        let row = record.ligand_size.clamp(1, LIGAND_BINS) - 1;
        let col = bin_of(&self.pocket_edges, record.pocket_size as f64);
        let w = self.rbsa_weights[bin_of(&self.rbsa_edges, record.rbsa)];
        self.rates[row][col] * w
    }

    /// Second pass: per-rBSA-bin weights that move the expected post-thinning rBSA
    /// distribution toward `target` with the least downsampling (largest weight is 1).
    pub fn fit_rbsa_weights(&mut self, records: &[ComplexRecord], target: &Histogram1D) {
        self.rbsa_edges = target.edges.clone();
        let mut expected = Histogram1D::empty(target.edges.clone());
        for r in records {
            let row = r.ligand_size.clamp(1, LIGAND_BINS) - 1;
            let col = bin_of(&self.pocket_edges, r.pocket_size as f64);
            expected.add(r.rbsa, self.rates[row][col]);
        }
        let (em, tm) = (expected.mass(), target.mass());
        let ratios: Vec<Option<f64>> = em
            .iter()
            .zip(&tm)
            .map(|(&e, &t)| (e > 0.0).then(|| t / e))
            .collect();
        let max_ratio = ratios.iter().flatten().cloned().fold(0.0, f64::max);
        self.rbsa_weights = ratios
            .iter()
            .map(|r| match r {
                Some(r) if max_ratio > 0.0 => (r / max_ratio).min(1.0),
                Some(_) => 0.0,
                None => 1.0,
            })
            .collect();
    }
}

/// Importance-ratio acceptance rates with a budget-constrained global scale.
pub fn build_sampling_table(
    source: &Histogram2D,
    target: &Histogram2D,
    budget: usize,
) -> Result<SamplingTable, SamplerError> {
    if source.pocket_edges != target.pocket_edges {
        return Err(SamplerError::ShapeMismatch);
    }
    let available = source.total();
    if budget as f64 > available {
        return Err(SamplerError::BudgetExceedsSource {
            budget,
            available: available as usize,
        });
    }
    let (sm, tm) = (source.mass(), target.mass());
    // (ratio, source count) for cells on both supports.
    let mut cells = Vec::new();
    for r in 0..LIGAND_BINS {
        for c in 0..source.cols() {
            if sm[r][c] > 0.0 && tm[r][c] > 0.0 {
                cells.push((r, c, tm[r][c] / sm[r][c], source.counts[r][c]));
            }
        }
    }
    let expected = |scale: f64| -> f64 { cells.iter().map(|&(_, _, q, n)| (scale * q).min(1.0) * n).sum() };

    let full_scale = cells.iter().map(|&(_, _, q, _)| 1.0 / q).fold(0.0, f64::max);
    let max_expected = expected(full_scale);
    let budget_f = budget as f64;
    let scale = if max_expected <= budget_f {
        full_scale
    } else {
        let (mut lo, mut hi) = (0.0, full_scale);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if expected(mid) <= budget_f {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        lo
    };

    let mut rates = vec![vec![0.0; source.cols()]; LIGAND_BINS];
    for &(r, c, q, _) in &cells {
        rates[r][c] = (scale * q).min(1.0);
    }
    let n_rbsa = Histogram1D::default_rbsa_edges().len() - 1;
    Ok(SamplingTable {
        pocket_edges: source.pocket_edges.clone(),
        rates,
        rbsa_edges: Histogram1D::default_rbsa_edges(),
        rbsa_weights: vec![1.0; n_rbsa],
        seed: 0,
        scale,
        expected_count: expected(scale),
        infeasible: (max_expected < 0.5 * budget_f).then_some(InfeasibleBudget { max_expected, budget }),
    })
}

/// Uniform draw in [0, 1) keyed by (seed, source id, span); independent of record order.
pub fn keyed_uniform(seed: u64, source_id: &str, span: [usize; 2]) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((source_id.len() as u64).to_le_bytes());
    h.update(source_id.as_bytes());
    h.update((span[0] as u64).to_le_bytes());
    h.update((span[1] as u64).to_le_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(word) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn stratified_sample(records: &[ComplexRecord], table: &SamplingTable) -> Vec<ComplexRecord> {
    records
        .iter()
        .filter(|r| keyed_uniform(table.seed, &r.source_id, r.span) < table.acceptance(r))
        .cloned()
        .collect()
}

/// Writes `joint_hist.csv` and `rbsa_hist.csv` into `dir`.
pub fn export_stats(
    records: &[ComplexRecord],
    pocket_edges: &[f64],
    rbsa_edges: &[f64],
    dir: &Path,
) -> Result<(Histogram2D, Histogram1D), SamplerError> {
    let joint = joint_histogram(records, pocket_edges);
    let rbsa = rbsa_histogram(records, rbsa_edges);
    joint.write_csv(&dir.join("joint_hist.csv"))?;
    rbsa.write_csv(&dir.join("rbsa_hist.csv"))?;
    Ok((joint, rbsa))
}
