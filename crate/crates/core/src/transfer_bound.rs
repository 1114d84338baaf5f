//! Numerical check of the loss-transfer bound between pseudo-ligand embeddings `t` and
//! perturbed "real" ligand embeddings `t0 = t + delta`.
//!
//! The Lipschitz constant of `g_t` is estimated empirically, so it is a lower bound and
//! the condition `max_j |t_j - t0_j| < 1 / (2 l_t)` is necessary but not sufficient. The
//! mean-value intermediate point is replaced by the supremum of the loss over a grid on
//! the whole segment, which bounds it from above.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::logsumexp;
use crate::contrastive::dot;
use crate::encoder::{Heads, Mlp};

/// Absolute slack, scaled by `1 + |loss|`, granted to every inequality for rounding.
pub const BOUND_TOLERANCE: f64 = 1e-12;

/// `-u·candidates[positive] + logsumexp_k u·candidates[k]`, summed in candidate order.
pub fn loss_at_point_ordered(u: &[f64], candidates: &[&[f64]], positive: usize) -> f64 {
    if candidates.len() <= 1 {
        return 0.0;
    }
    let logits: Vec<f64> = candidates.iter().map(|c| dot(u, c)).collect();
    -logits[positive] + logsumexp(logits.iter().copied())
}

/// Ligand-side loss of prediction `u` against its pocket and the negative pockets.
pub fn loss_at_point(u: &[f64], positive: &[f64], negatives: &[&[f64]]) -> f64 {
    let mut candidates = vec![positive];
    candidates.extend_from_slice(negatives);
    loss_at_point_ordered(u, &candidates, 0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn ratio(head: &Mlp, a: &[f64], b: &[f64]) -> f64 {
    let dx: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let den = norm(&dx);
    if den == 0.0 {
        return 0.0;
    }
    let (fa, fb) = (head.forward_vec(a), head.forward_vec(b));
    let dy: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
    norm(&dy) / den
}

/// Top right singular vector of `m` by power iteration on `mᵀm`.
pub fn top_right_singular_vector(m: &Array2<f64>, iterations: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v = random_unit(rng, m.ncols());
    let mtm = m.t().dot(m);
    for _ in 0..iterations {
        let w: Vec<f64> = mtm.rows().into_iter().map(|r| dot(r.as_slice().unwrap_or(&r.to_vec()), &v)).collect();
        let n = norm(&w);
        if n == 0.0 {
            break;
        }
        v = w.iter().map(|x| x / n).collect();
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConfig {
    /// Random local pairs around the probes.
    pub pairs: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Steps along the local top singular direction of the Jacobian.
    pub directed_steps: Vec<f64>,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            pairs: 2000,
            min_scale: 1e-3,
            max_scale: 1.0,
            directed_steps: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            power_iterations: 100,
            seed: 0,
        }
    }
}

/// Lower bound on the Lipschitz constant of `head`: the largest output/input distance
/// ratio over random pairs at log-uniform scales around the probes, pairs of distinct
/// probes, and steps along each probe's top Jacobian singular direction.
pub fn estimate_lipschitz(head: &Mlp, probes: &[Vec<f64>], config: &LipschitzConfig) -> f64 {
    if probes.is_empty() {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = probes[0].len();
    let mut best: f64 = 0.0;
    let (lo, hi) = (config.min_scale.ln(), config.max_scale.ln());
    for _ in 0..config.pairs {
        let a = &probes[rng.random_range(0..probes.len())];
        let scale = if hi > lo { rng.random_range(lo..hi).exp() } else { config.max_scale };
        let dir = random_unit(&mut rng, d);
        let b: Vec<f64> = a.iter().zip(&dir).map(|(x, u)| x + scale * u).collect();
        best = best.max(ratio(head, a, &b));
    }
    for (i, a) in probes.iter().enumerate() {
        for b in probes.iter().skip(i + 1).take(config.pairs) {
            best = best.max(ratio(head, a, b));
        }
    }
    if !head.normalize_output {
        for a in probes {
            let v = top_right_singular_vector(&head.jacobian(a), config.power_iterations, &mut rng);
            for &h in &config.directed_steps {
                for sign in [1.0, -1.0] {
                    let b: Vec<f64> = a.iter().zip(&v).map(|(x, u)| x + sign * h * u).collect();
                    best = best.max(ratio(head, a, &b));
                }
            }
        }
    }
    best
}

fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `(M1, M2)` for positive pair `i` from projected rows: `gt = g_t(t)`, `gt0 = g_t(t0)`,
/// `gs = g_s(s)`. Maxima over an empty negative set are 0.
pub fn compute_m(gt: &Array2<f64>, gt0: &Array2<f64>, gs: &Array2<f64>, i: usize) -> (f64, f64) {
    let shift_i = diff(&row(gt, i), &row(gt0, i));
    let gs_i = row(gs, i);
    let mut m1: f64 = 0.0;
    for k in (0..gs.nrows()).filter(|&k| k != i) {
        m1 = m1.max(dot(&shift_i, &diff(&gs_i, &row(gs, k))).abs());
    }
    let mut m2: f64 = 0.0;
    for j in (0..gt.nrows()).filter(|&j| j != i) {
        let shift_j = diff(&row(gt, j), &row(gt0, j));
        m2 = m2.max(dot(&gs_i, &diff(&shift_i, &shift_j)).abs());
    }
    (m1, m2)
}

fn lerp_rows(a: &Array2<f64>, b: &Array2<f64>, alpha: f64) -> Array2<f64> {
    a * (1.0 - alpha) + &(b * alpha)
}

/// Ligand-side loss of pair `i` with all pockets as candidates.
fn l1_at(gt: &Array2<f64>, gs: &Array2<f64>, i: usize) -> f64 {
    let rows: Vec<Vec<f64>> = gs.rows().into_iter().map(|r| r.to_vec()).collect();
    let cands: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    loss_at_point_ordered(&row(gt, i), &cands, i)
}

/// Pocket-side loss of pair `i` with all ligands as candidates.
fn l2_at(gt: &Array2<f64>, gs: &Array2<f64>, i: usize) -> f64 {
    let rows: Vec<Vec<f64>> = gt.rows().into_iter().map(|r| r.to_vec()).collect();
    let cands: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    loss_at_point_ordered(&row(gs, i), &cands, i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBound {
    pub index: usize,
    pub m1: f64,
    pub m2: f64,
    pub loss_l1: f64,
    pub loss_l1_perturbed: f64,
    pub loss_l2: f64,
    pub loss_l2_perturbed: f64,
    pub raw_gap_l1: f64,
    pub raw_gap_l2: f64,
    pub segment_sup_l1: f64,
    pub segment_sup_l2: f64,
    /// `|gap_i| <= M_i · segment_sup_i` for i = 1, 2.
    pub bound_satisfied: [bool; 2],
    /// `L_i(t0) <= M_i^m · segment_sup_i + m · L_i(t)` for each requested `m`.
    pub corollary_satisfied: Vec<(usize, [bool; 2])>,
    /// Only meaningful when the Lipschitz condition holds: `M1 < 1` and `M2 < 1`.
    pub lemma_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    /// Perturbation norm as a multiple of `1 / (2 l_t)`.
    pub scale: f64,
    pub delta_norm: f64,
    pub max_shift: f64,
    pub lipschitz_condition_ok: bool,
    pub m1: f64,
    pub m2: f64,
    pub pairs: Vec<PairBound>,
    pub bound_violations: usize,
    pub corollary_violations: usize,
    /// Pairs where the condition held but `M1` or `M2` reached 1.
    pub lemma_violations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Empirical lower bound on the Lipschitz constant of `g_t`; the condition check built
    /// on it is necessary, not sufficient.
    pub l_t_estimate: f64,
    pub l_t_is_lower_bound: bool,
    pub grid_points: usize,
    pub scales: Vec<ScaleReport>,
}

impl BoundReport {
    /// Violations of either inequality or of the lemma at scales where the condition holds.
    pub fn violations_under_condition(&self) -> usize {
        self.scales
            .iter()
            .filter(|s| s.lipschitz_condition_ok)
            .map(|s| s.bound_violations + s.corollary_violations + s.lemma_violations.len())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub scales: Vec<f64>,
    pub m_values: Vec<usize>,
    pub grid_points: usize,
    pub lipschitz: LipschitzConfig,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.1, 0.5, 0.9, 1.5],
            m_values: vec![1],
            grid_points: 101,
            lipschitz: LipschitzConfig::default(),
            seed: 0,
        }
    }
}

fn within(lhs: f64, rhs: f64, magnitude: f64) -> bool {
    lhs <= rhs + BOUND_TOLERANCE * (1.0 + magnitude.abs())
}

/// Evaluates both per-pair inequalities at one perturbation (`t0` given explicitly).
pub fn evaluate_pairs(heads: &Heads, t: &Array2<f64>, t0: &Array2<f64>, s: &Array2<f64>, m_values: &[usize], grid_points: usize) -> Vec<PairBound> {
    let gt = heads.g_t.forward(t);
    let gt0 = heads.g_t.forward(t0);
    let gs = heads.g_s.forward(s);
    let grid: Vec<f64> = (0..grid_points.max(2)).map(|k| k as f64 / (grid_points.max(2) - 1) as f64).collect();
    let path: Vec<Array2<f64>> = grid.iter().map(|&a| lerp_rows(&gt, &gt0, a)).collect();
    (0..t.nrows())
        .map(|i| {
            let (m1, m2) = compute_m(&gt, &gt0, &gs, i);
            let (l1, l1p) = (l1_at(&gt, &gs, i), l1_at(&gt0, &gs, i));
            let (l2, l2p) = (l2_at(&gt, &gs, i), l2_at(&gt0, &gs, i));
            let sup1 = path.iter().map(|u| l1_at(u, &gs, i)).fold(f64::NEG_INFINITY, f64::max);
            let sup2 = path.iter().map(|u| l2_at(u, &gs, i)).fold(f64::NEG_INFINITY, f64::max);
            let (gap1, gap2) = ((l1p - l1).abs(), (l2p - l2).abs());
            let bound_satisfied = [within(gap1, m1 * sup1, sup1), within(gap2, m2 * sup2, sup2)];
            let corollary_satisfied = m_values
                .iter()
                .map(|&m| {
                    let k = m as f64;
                    (
                        m,
                        [
                            within(l1p, m1.powi(m as i32) * sup1 + k * l1, sup1 + k * l1),
                            within(l2p, m2.powi(m as i32) * sup2 + k * l2, sup2 + k * l2),
                        ],
                    )
                })
                .collect();
            PairBound {
                index: i,
                m1,
                m2,
                loss_l1: l1,
                loss_l1_perturbed: l1p,
                loss_l2: l2,
                loss_l2_perturbed: l2p,
                raw_gap_l1: gap1,
                raw_gap_l2: gap2,
                segment_sup_l1: sup1,
                segment_sup_l2: sup2,
                bound_satisfied,
                corollary_satisfied,
                lemma_ok: m1 < 1.0 && m2 < 1.0,
            }
        })
        .collect()
}

/// Perturbs every ligand embedding by an independent random direction of norm
/// `scale / (2 l_t)` for each configured scale, and checks the inequalities per pair.
pub fn verify_bound(heads: &Heads, t: &Array2<f64>, s: &Array2<f64>, config: &BoundConfig) -> BoundReport {
    let probes: Vec<Vec<f64>> = t.rows().into_iter().map(|r| r.to_vec()).collect();
    let l_t = estimate_lipschitz(&heads.g_t, &probes, &config.lipschitz);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scales = config
        .scales
        .iter()
        .map(|&scale| {
            let delta_norm = if l_t > 0.0 { scale / (2.0 * l_t) } else { 0.0 };
            let mut t0 = t.clone();
            for mut r in t0.axis_iter_mut(Axis(0)) {
                let dir = random_unit(&mut rng, r.len());
                r.iter_mut().zip(&dir).for_each(|(x, u)| *x += delta_norm * u);
            }
            let max_shift = (t - &t0).rows().into_iter().map(|r| norm(&r.to_vec())).fold(0.0, f64::max);
            let condition = l_t > 0.0 && max_shift < 1.0 / (2.0 * l_t);
            let pairs = evaluate_pairs(heads, t, &t0, s, &config.m_values, config.grid_points);
            ScaleReport {
                scale,
                delta_norm,
                max_shift,
                lipschitz_condition_ok: condition,
                m1: pairs.iter().map(|p| p.m1).fold(0.0, f64::max),
                m2: pairs.iter().map(|p| p.m2).fold(0.0, f64::max),
                bound_violations: pairs.iter().filter(|p| !p.bound_satisfied.iter().all(|&b| b)).count(),
                corollary_violations: pairs
                    .iter()
                    .filter(|p| p.corollary_satisfied.iter().any(|(_, ok)| !ok.iter().all(|&b| b)))
                    .count(),
                lemma_violations: if condition { pairs.iter().filter(|p| !p.lemma_ok).map(|p| p.index).collect() } else { Vec::new() },
                pairs,
            }
        })
        .collect();
    BoundReport {
        l_t_estimate: l_t,
        l_t_is_lower_bound: true,
        grid_points: config.grid_points,
        scales,
    }
}
