//! Invariant atom-level attention encoder with distance-derived pair bias, projection
//! heads, and the frozen reference encoder.
//!
//! Parameters live in flat tensor lists whose order is fixed by the configuration; names
//! for checkpoints are generated from the same layout.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::element::Element;
use crate::fragment_forge::SiteAtom;
use crate::geometry::{dist, Vec3};
use crate::tensor_io::{content_hash, TensorFile, TensorIoError};

pub const PAD: usize = 0;
/// PAD, C, N, O, S, other.
pub const VOCAB: usize = 6;
/// Unordered pairs of token types.
pub const PAIR_TYPES: usize = VOCAB * (VOCAB + 1) / 2;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("token code {0} outside the vocabulary")]
    BadToken(usize),
    #[error("coordinate count {coords} differs from token count {tokens}")]
    LengthMismatch { tokens: usize, coords: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
}

pub fn type_code(element: Element) -> usize {
    match element {
        Element::C => 1,
        Element::N => 2,
        Element::O => 3,
        Element::S => 4,
        _ => 5,
    }
}

pub fn pair_type(a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * VOCAB - a * (a.saturating_sub(1)) / 2 + (b - a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub atom_types: Vec<usize>,
    pub coords: Vec<Vec3>,
}

impl TokenSeq {
    pub fn new(atom_types: Vec<usize>, coords: Vec<Vec3>) -> Result<Self, EncoderError> {
        if atom_types.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if atom_types.len() != coords.len() {
            return Err(EncoderError::LengthMismatch {
                tokens: atom_types.len(),
                coords: coords.len(),
            });
        }
        if let Some(&bad) = atom_types.iter().find(|&&t| t >= VOCAB) {
            return Err(EncoderError::BadToken(bad));
        }
        Ok(Self { atom_types, coords })
    }

    pub fn from_atoms(atoms: &[SiteAtom]) -> Result<Self, EncoderError> {
        Self::new(atoms.iter().map(|a| type_code(a.el)).collect(), atoms.iter().map(SiteAtom::pos).collect())
    }

    pub fn len(&self) -> usize {
        self.atom_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atom_types.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    /// Softmax attention of a learned query over the tokens.
    LearnedQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub out_dim: usize,
    pub rbf_centers: usize,
    pub rbf_max: f64,
    pub rbf_gamma: f64,
    pub ffn: bool,
    pub ffn_mult: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 4,
            out_dim: 64,
            rbf_centers: 16,
            rbf_max: 12.0,
            rbf_gamma: 1.0,
            ffn: true,
            ffn_mult: 2,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn small(dim: usize, heads: usize, layers: usize) -> Self {
        Self {
            dim,
            heads,
            layers,
            out_dim: dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dim == 0 || self.heads == 0 || self.out_dim == 0 {
            return Err(EncoderError::InvalidConfig("dimensions must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(EncoderError::InvalidConfig("dim must be divisible by heads"));
        }
        if self.rbf_centers == 0 {
            return Err(EncoderError::InvalidConfig("need at least one RBF center"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Features per pair: the RBF values plus a constant column.
    fn pair_features(&self) -> usize {
        self.rbf_centers + 1
    }

    fn per_layer(&self) -> usize {
        if self.ffn {
            8
        } else {
            4
        }
    }

    pub fn rbf_mu(&self) -> Vec<f64> {
        let n = self.rbf_centers;
        (0..n)
            .map(|k| if n == 1 { 0.0 } else { self.rbf_max * k as f64 / (n - 1) as f64 })
            .collect()
    }

    /// Names and shapes of every tensor in layout order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let (d, f) = (self.dim, self.dim * self.ffn_mult);
        let mut out = vec![
            ("type_embedding".to_string(), (VOCAB, d)),
            ("pair_weight".to_string(), (PAIR_TYPES, self.heads * self.pair_features())),
        ];
        for l in 0..self.layers {
            for (n, shape) in [("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)), ("wo", (d, d))] {
                out.push((format!("layer{l}.{n}"), shape));
            }
            if self.ffn {
                for (n, shape) in [("ffn_w1", (d, f)), ("ffn_b1", (1, f)), ("ffn_w2", (f, d)), ("ffn_b2", (1, d))] {
                    out.push((format!("layer{l}.{n}"), shape));
                }
            }
        }
        if self.pooling == Pooling::LearnedQuery {
            out.push(("pool_query".to_string(), (1, d)));
        }
        out.push(("out_w".to_string(), (d, self.out_dim)));
        out.push(("out_b".to_string(), (1, self.out_dim)));
        out
    }

    fn layer_base(&self, l: usize) -> usize {
        2 + l * self.per_layer()
    }

    fn tail_base(&self) -> usize {
        2 + self.layers * self.per_layer()
    }
}

fn init_tensor(name: &str, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    let std = if name == "type_embedding" {
        1.0
    } else if name == "pair_weight" {
        0.1
    } else if name.contains("_b") {
        return Array2::zeros(shape);
    } else {
        1.0 / (shape.0 as f64).sqrt()
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn(shape, |_| normal.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tensors: Vec<Array2<f64>>,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .layout()
            .iter()
            .map(|(name, shape)| init_tensor(name, *shape, &mut rng))
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn named(&self) -> Vec<(String, Array2<f64>)> {
        self.config
            .layout()
            .into_iter()
            .zip(&self.tensors)
            .map(|((n, _), t)| (n, t.clone()))
            .collect()
    }

    pub fn checksum(&self) -> String {
        let layout = self.config.layout();
        content_hash(layout.iter().map(|(n, _)| n.as_str()).zip(&self.tensors))
    }

    pub fn to_file(&self) -> TensorFile {
        TensorFile::new(serde_json::json!({"kind": "encoder", "config": self.config}), self.named())
    }

    pub fn from_file(file: &TensorFile) -> Result<Self, EncoderError> {
        let config: EncoderConfig = serde_json::from_value(file.metadata["config"].clone())
            .map_err(|_| EncoderError::InvalidConfig("checkpoint lacks an encoder config"))?;
        config.validate()?;
        let arrays = file.arrays()?;
        let layout = config.layout();
        if arrays.len() != layout.len() {
            return Err(TensorIoError::Layout(format!("{} tensors", arrays.len())).into());
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, shape), (got_name, t)) in layout.iter().zip(arrays) {
            if *name != got_name || t.dim() != *shape {
                return Err(TensorIoError::Layout(got_name).into());
            }
            tensors.push(t);
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        Ok(self.to_file().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_file(&TensorFile::read(path)?)
    }
}

/// Fixed RBF expansion of every ordered pair distance (with a trailing constant column)
/// and the unordered type-pair index of each pair. Row `i·L + j` describes pair (i, j).
pub fn pair_features(tokens: &TokenSeq, config: &EncoderConfig) -> (Array2<f64>, Vec<usize>) {
    let l = tokens.len();
    let mu = config.rbf_mu();
    let k = config.pair_features();
    let mut feats = Array2::zeros((l * l, k));
    let mut types = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            let d = dist(tokens.coords[i], tokens.coords[j]);
            let row = i * l + j;
            for (c, m) in mu.iter().enumerate() {
                feats[[row, c]] = (-config.rbf_gamma * (d - m) * (d - m)).exp();
            }
            feats[[row, k - 1]] = 1.0;
            types.push(pair_type(tokens.atom_types[i], tokens.atom_types[j]));
        }
    }
    (feats, types)
}

/// Initial per-head L×L bias matrices, recorded on `tape`.
pub fn pairwise_bias_on_tape(tape: &mut Tape, pair_weight: Var, tokens: &TokenSeq, config: &EncoderConfig) -> Vec<Var> {
    let (feats, types) = pair_features(tokens, config);
    let flat = tape.pair_bias(pair_weight, feats, types, config.heads);
    (0..config.heads).map(|h| tape.column_square(flat, h)).collect()
}

/// Per-head bias matrices as plain values.
pub fn pairwise_bias(tokens: &TokenSeq, params: &EncoderParams) -> Vec<Array2<f64>> {
    let mut tape = Tape::new();
    let w = tape.constant(params.tensors[1].clone());
    pairwise_bias_on_tape(&mut tape, w, tokens, &params.config)
        .into_iter()
        .map(|v| tape.value(v).clone())
        .collect()
}

/// Tensor handles for one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn: Option<[Var; 4]>,
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub x: Var,
    /// Updated bias per head: `q + logits`.
    pub q: Vec<Var>,
    /// Scaled attention logits `Q Kᵀ / sqrt(d_head)` per head.
    pub logits: Vec<Var>,
}

pub fn attention_layer(tape: &mut Tape, x: Var, q: &[Var], layer: &LayerVars, config: &EncoderConfig) -> LayerOutput {
    let dh = config.head_dim();
    let inv = 1.0 / (dh as f64).sqrt();
    let qm = tape.matmul(x, layer.wq);
    let km = tape.matmul(x, layer.wk);
    let vm = tape.matmul(x, layer.wv);
    let mut heads = Vec::with_capacity(config.heads);
    let mut logits = Vec::with_capacity(config.heads);
    let mut q_next = Vec::with_capacity(config.heads);
    for (h, &bias) in q.iter().enumerate() {
        let qh = tape.slice_cols(qm, h * dh, dh);
        let kh = tape.slice_cols(km, h * dh, dh);
        let vh = tape.slice_cols(vm, h * dh, dh);
        let raw = tape.matmul_t(qh, kh);
        let scaled = tape.scale(raw, inv);
        let biased = tape.add(scaled, bias);
        let attn = tape.softmax_rows(biased);
        heads.push(tape.matmul(attn, vh));
        q_next.push(tape.add(bias, scaled));
        logits.push(scaled);
    }
    let cat = tape.concat_cols(&heads);
    let proj = tape.matmul(cat, layer.wo);
    let mut out = tape.add(x, proj);
    if let Some([w1, b1, w2, b2]) = layer.ffn {
        let h1 = tape.matmul(out, w1);
        let h1 = tape.add_row(h1, b1);
        let h1 = tape.silu(h1);
        let h2 = tape.matmul(h1, w2);
        let h2 = tape.add_row(h2, b2);
        out = tape.add(out, h2);
    }
    LayerOutput {
        x: out,
        q: q_next,
        logits,
    }
}

pub fn layer_vars(vars: &[Var], config: &EncoderConfig, l: usize) -> LayerVars {
    let b = config.layer_base(l);
    LayerVars {
        wq: vars[b],
        wk: vars[b + 1],
        wv: vars[b + 2],
        wo: vars[b + 3],
        ffn: config.ffn.then(|| [vars[b + 4], vars[b + 5], vars[b + 6], vars[b + 7]]),
    }
}

/// Registers the parameters on `tape`, trainable or constant.
pub fn bind(tape: &mut Tape, tensors: &[Array2<f64>], trainable: bool) -> Vec<Var> {
    tensors
        .iter()
        .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect()
}

/// Unit-norm 1×out_dim embedding of `tokens` with parameter handles `vars`.
pub fn encode_on_tape(tape: &mut Tape, vars: &[Var], config: &EncoderConfig, tokens: &TokenSeq) -> Var {
    let mut x = tape.gather(vars[0], &tokens.atom_types);
    let mut q = pairwise_bias_on_tape(tape, vars[1], tokens, config);
    for l in 0..config.layers {
        let out = attention_layer(tape, x, &q, &layer_vars(vars, config, l), config);
        x = out.x;
        q = out.q;
    }
    let tail = config.tail_base();
    let (pooled, tail) = match config.pooling {
        Pooling::Mean => (tape.mean_rows(x), tail),
        Pooling::LearnedQuery => {
            let scores = tape.matmul_t(vars[tail], x);
            let scores = tape.scale(scores, 1.0 / (config.dim as f64).sqrt());
            let w = tape.softmax_rows(scores);
            (tape.matmul(w, x), tail + 1)
        }
    };
    let y = tape.matmul(pooled, vars[tail]);
    let y = tape.add_row(y, vars[tail + 1]);
    tape.l2_normalize_rows(y)
}

pub fn encode(tokens: &TokenSeq, params: &EncoderParams) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &params.tensors, false);
    let out = encode_on_tape(&mut tape, &vars, &params.config, tokens);
    tape.value(out).iter().copied().collect()
}

/// Reference molecule encoder: parameters drawn once from a seed and never exposed mutably.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    params: EncoderParams,
    checksum: String,
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        Ok(Self::from_params(EncoderParams::init(config, seed)?))
    }

    pub fn from_params(params: EncoderParams) -> Self {
        let checksum = params.checksum();
        Self { params, checksum }
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    /// Checksum recorded at construction.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Checksum recomputed from the current parameter values.
    pub fn current_checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn encode(&self, tokens: &TokenSeq) -> Vec<f64> {
        encode(tokens, &self.params)
    }
}

/// Perceptron with SiLU hidden activations, optionally L2-normalising its output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub normalize_output: bool,
    /// `[w0, b0, w1, b1, ...]` with `w_k: dims[k] × dims[k+1]`, `b_k: 1 × dims[k+1]`.
    pub tensors: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn init(dims: &[usize], normalize_output: bool, seed: u64) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for w in dims.windows(2) {
            let normal = Normal::new(0.0, 1.0 / (w[0] as f64).sqrt()).expect("finite std");
            tensors.push(Array2::from_shape_fn((w[0], w[1]), |_| normal.sample(&mut rng)));
            tensors.push(Array2::zeros((1, w[1])));
        }
        Self {
            dims: dims.to_vec(),
            normalize_output,
            tensors,
        }
    }

    pub fn zero_last_layer(mut self) -> Self {
        let n = self.tensors.len();
        self.tensors[n - 2].fill(0.0);
        self.tensors[n - 1].fill(0.0);
        self
    }

    /// Folds a fixed input transform `x -> (x - mean) · p` into the first layer, leaving the
    /// function otherwise unchanged and fully trainable.
    pub fn fold_input_transform(&mut self, mean: &[f64], p: &Array2<f64>) {
        let w = p.dot(&self.tensors[0]);
        let m = Array2::from_shape_vec((1, mean.len()), mean.to_vec()).expect("row vector");
        self.tensors[1] -= &m.dot(&w);
        self.tensors[0] = w;
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        (0..self.dims.len() - 1)
            .flat_map(|k| [format!("{prefix}.w{k}"), format!("{prefix}.b{k}")])
            .collect()
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let layers = self.dims.len() - 1;
        let mut h = x;
        for k in 0..layers {
            h = tape.matmul(h, vars[2 * k]);
            h = tape.add_row(h, vars[2 * k + 1]);
            if k + 1 < layers {
                h = tape.silu(h);
            }
        }
        if self.normalize_output {
            h = tape.l2_normalize_rows(h);
        }
        h
    }

    /// Row-wise forward pass without a tape; same arithmetic as [`Mlp::forward_on_tape`].
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let layers = self.dims.len() - 1;
        let mut h = x.clone();
        for k in 0..layers {
            h = h.dot(&self.tensors[2 * k]) + &self.tensors[2 * k + 1];
            if k + 1 < layers {
                h.mapv_inplace(|v| v * (1.0 / (1.0 + (-v).exp())));
            }
        }
        if self.normalize_output {
            for mut row in h.rows_mut() {
                let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
                row /= n;
            }
        }
        h
    }

    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        let a = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        self.forward(&a).iter().copied().collect()
    }

    /// Jacobian (out × in) at `x`. Defined for heads without output normalisation.
    pub fn jacobian(&self, x: &[f64]) -> Array2<f64> {
        assert!(!self.normalize_output, "jacobian is implemented for unnormalised heads");
        let layers = self.dims.len() - 1;
        let mut h = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        // Accumulates d h / d x as (in × current width).
        let mut jac = Array2::eye(x.len());
        for k in 0..layers {
            let pre = h.dot(&self.tensors[2 * k]) + &self.tensors[2 * k + 1];
            jac = jac.dot(&self.tensors[2 * k]);
            if k + 1 < layers {
                for (c, &p) in pre.iter().enumerate() {
                    let s = 1.0 / (1.0 + (-p).exp());
                    let slope = s * (1.0 + p * (1.0 - s));
                    jac.column_mut(c).mapv_inplace(|v| v * slope);
                }
                h = pre.mapv(|v| v * (1.0 / (1.0 + (-v).exp())));
            } else {
                h = pre;
            }
        }
        jac.reversed_axes()
    }
}

/// Projection heads: `g_t` for ligand embeddings (unconstrained), `g_s` for pocket
/// embeddings (unit-norm output).
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub g_t: Mlp,
    pub g_s: Mlp,
}

impl Heads {
    pub fn init(ligand_dim: usize, pocket_dim: usize, hidden: usize, proj_dim: usize, seed: u64) -> Self {
        Self {
            g_t: Mlp::init(&[ligand_dim, hidden, proj_dim], false, seed),
            g_s: Mlp::init(&[pocket_dim, hidden, proj_dim], true, seed.wrapping_add(1)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::tests::{fd_check, random_matrix};
    use crate::geometry::{random_rotation, rigid_transform};
    use rand::Rng;

    fn random_tokens(rng: &mut impl Rng, l: usize) -> TokenSeq {
        TokenSeq::new(
            (0..l).map(|_| rng.random_range(1..VOCAB)).collect(),
            (0..l).map(|_| std::array::from_fn(|_| rng.random_range(-5.0..5.0))).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pair_type_indexing_is_a_bijection() {
        let mut seen = std::collections::BTreeSet::new();
        for a in 0..VOCAB {
            for b in a..VOCAB {
                assert_eq!(pair_type(a, b), pair_type(b, a));
                assert!(seen.insert(pair_type(a, b)));
            }
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), (0..PAIR_TYPES).collect::<Vec<_>>());
    }

    #[test]
    fn token_validation() {
        assert!(matches!(TokenSeq::new(vec![], vec![]), Err(EncoderError::EmptySequence)));
        assert!(matches!(TokenSeq::new(vec![6], vec![[0.0; 3]]), Err(EncoderError::BadToken(6))));
        assert!(matches!(TokenSeq::new(vec![1], vec![]), Err(EncoderError::LengthMismatch { .. })));
        assert!(EncoderConfig::small(6, 4, 1).validate().is_err());
    }

    #[test]
    fn bias_depends_only_on_distance_and_types() {
        let params = EncoderParams::init(EncoderConfig::small(8, 2, 1), 3).unwrap();
        let toks = TokenSeq::new(vec![1, 1, 1], vec![[0.0; 3], [0.0; 3], [0.0; 3]]).unwrap();
        let q = pairwise_bias(&toks, &params);
        for h in &q {
            assert!(h.iter().all(|&v| v == h[[0, 0]]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let toks = random_tokens(&mut rng, 6);
        let q = pairwise_bias(&toks, &params);
        let moved = TokenSeq::new(
            toks.atom_types.clone(),
            rigid_transform(&toks.coords, &random_rotation(&mut rng), [3.0, -1.0, 8.0]),
        )
        .unwrap();
        for (a, b) in q.iter().zip(pairwise_bias(&moved, &params)) {
            assert!((a - &b).iter().all(|v| v.abs() < 1e-12));
            assert!((a - &a.t()).iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn two_atom_bias_by_hand() {
        let mut cfg = EncoderConfig::small(4, 1, 1);
        cfg.rbf_centers = 1;
        let mut params = EncoderParams::init(cfg, 0).unwrap();
        // Pair (C, N): weight on the RBF and constant columns.
        let t = pair_type(1, 2);
        params.tensors[1].fill(0.0);
        params.tensors[1][[t, 0]] = 2.0;
        params.tensors[1][[t, 1]] = 0.5;
        let toks = TokenSeq::new(vec![1, 2], vec![[0.0; 3], [1.5, 0.0, 0.0]]).unwrap();
        let q = &pairwise_bias(&toks, &params)[0];
        let expect = 2.0 * (-1.0f64 * 1.5 * 1.5).exp() + 0.5;
        assert!((q[[0, 1]] - expect).abs() < 1e-15);
        assert_eq!(q[[1, 0]], q[[0, 1]]);
        assert_eq!(q[[0, 0]], 0.0);
    }

    fn layer_setup(cfg: &EncoderConfig, seed: u64) -> (Vec<Array2<f64>>, Array2<f64>, Vec<Array2<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::init(cfg.clone(), seed).unwrap();
        let b = cfg.layer_base(0);
        let layer = params.tensors[b..b + cfg.per_layer()].to_vec();
        let l = 3;
        let x = random_matrix(&mut rng, l, cfg.dim);
        let q = (0..cfg.heads).map(|_| random_matrix(&mut rng, l, l)).collect();
        (layer, x, q)
    }

    fn run_layer(tape: &mut Tape, cfg: &EncoderConfig, vars: &[Var]) -> LayerOutput {
        let per = cfg.per_layer();
        let lv = LayerVars {
            wq: vars[0],
            wk: vars[1],
            wv: vars[2],
            wo: vars[3],
            ffn: cfg.ffn.then(|| [vars[4], vars[5], vars[6], vars[7]]),
        };
        attention_layer(tape, vars[per], &vars[per + 1..], &lv, cfg)
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let mut cfg = EncoderConfig::small(4, 2, 1);
        cfg.ffn = false;
        let params = EncoderParams::init(cfg.clone(), 1).unwrap();
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params.tensors[2..6], false);
        let x = tape.constant(Array2::from_shape_vec((1, 4), vec![0.3, -0.2, 0.9, 0.1]).unwrap());
        let q: Vec<Var> = (0..2).map(|_| tape.constant(Array2::zeros((1, 1)))).collect();
        let lv = LayerVars {
            wq: vars[0],
            wk: vars[1],
            wv: vars[2],
            wo: vars[3],
            ffn: None,
        };
        let out = attention_layer(&mut tape, x, &q, &lv, &cfg);
        let xv = tape.value(x).clone();
        let expect = &xv + &xv.dot(&params.tensors[4]).dot(&params.tensors[5]);
        assert!((tape.value(out.x) - &expect).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn zero_bias_matches_plain_attention() {
        let mut cfg = EncoderConfig::small(4, 2, 1);
        cfg.ffn = false;
        let (layer, x, _) = layer_setup(&cfg, 5);
        let l = x.nrows();
        let mut tape = Tape::new();
        let mut inputs = layer.clone();
        inputs.push(x.clone());
        inputs.extend((0..2).map(|_| Array2::zeros((l, l))));
        let vars = bind(&mut tape, &inputs, false);
        let out = run_layer(&mut tape, &cfg, &vars);

        let (q, k, v) = (x.dot(&layer[0]), x.dot(&layer[1]), x.dot(&layer[2]));
        let mut cat = Array2::zeros((l, 4));
        for h in 0..2 {
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| (0..2).map(|c| q[[i, 2 * h + c]] * k[[j, 2 * h + c]]).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in 0..2 {
                    cat[[i, 2 * h + c]] = (0..l).map(|j| scores[j].exp() / z * v[[j, 2 * h + c]]).sum();
                }
            }
        }
        let expect = &x + &cat.dot(&layer[3]);
        assert!((tape.value(out.x) - &expect).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bias_update_is_exactly_additive() {
        let cfg = EncoderConfig::small(4, 2, 1);
        let (layer, x, q) = layer_setup(&cfg, 6);
        let mut tape = Tape::new();
        let mut inputs = layer;
        inputs.push(x);
        inputs.extend(q.iter().cloned());
        let vars = bind(&mut tape, &inputs, false);
        let out = run_layer(&mut tape, &cfg, &vars);
        for h in 0..2 {
            let recomputed = &q[h] + tape.value(out.logits[h]);
            assert_eq!(tape.value(out.q[h]), &recomputed);
        }
    }

    #[test]
    fn attention_layer_gradients_match_finite_differences() {
        let cfg = EncoderConfig::small(4, 2, 1);
        let (mut layer, x, q) = layer_setup(&cfg, 7);
        // Non-zero FFN biases so their gradients are exercised away from zero.
        layer[5].fill(0.1);
        layer[7].fill(-0.2);
        let mut inputs = layer;
        inputs.push(x);
        inputs.extend(q);
        let err = fd_check(&inputs, |t, v| {
            let out = run_layer(t, &cfg, v);
            let a = t.mean_all(out.x);
            let sq = t.mul(out.x, out.x);
            let b = t.mean_all(sq);
            let qs: Vec<Var> = out.q.iter().map(|&qh| t.mean_all(qh)).collect();
            let c = t.concat_rows(&qs);
            let c = t.mul(c, c);
            let c = t.mean_all(c);
            let ab = t.add(a, b);
            t.add(ab, c)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn embeddings_are_unit_norm_and_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for pooling in [Pooling::Mean, Pooling::LearnedQuery] {
            let mut cfg = EncoderConfig::small(16, 4, 2);
            cfg.pooling = pooling;
            let params = EncoderParams::init(cfg, 9).unwrap();
            for _ in 0..20 {
                let l = rng.random_range(1..12);
                let toks = random_tokens(&mut rng, l);
                let e = encode(&toks, &params);
                assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);

                let moved = TokenSeq::new(
                    toks.atom_types.clone(),
                    rigid_transform(&toks.coords, &random_rotation(&mut rng), [rng.random_range(-9.0..9.0), 1.0, 2.0]),
                )
                .unwrap();
                let mut order: Vec<usize> = (0..l).collect();
                order.reverse();
                order.rotate_left(l / 3);
                let permuted = TokenSeq::new(
                    order.iter().map(|&i| moved.atom_types[i]).collect(),
                    order.iter().map(|&i| moved.coords[i]).collect(),
                )
                .unwrap();
                let e2 = encode(&permuted, &params);
                assert!(e.iter().zip(&e2).all(|(a, b)| (a - b).abs() < 1e-10));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.json");
        let params = EncoderParams::init(EncoderConfig::small(8, 2, 2), 1).unwrap();
        params.save(&path).unwrap();
        let back = EncoderParams::load(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.checksum(), params.checksum());
    }

    #[test]
    fn frozen_encoder_is_stable() {
        let frozen = FrozenEncoder::new(EncoderConfig::small(16, 4, 2), 42).unwrap();
        let toks = TokenSeq::new(vec![1, 2, 3], vec![[0.0; 3], [1.4, 0.0, 0.0], [2.0, 1.1, 0.0]]).unwrap();
        assert_eq!(frozen.encode(&toks), frozen.encode(&toks));
        assert_eq!(frozen.checksum(), frozen.current_checksum());
        assert_eq!(frozen.checksum(), FrozenEncoder::new(EncoderConfig::small(16, 4, 2), 42).unwrap().checksum());
    }

    #[test]
    fn mlp_tape_and_plain_paths_agree() {
        let mlp = Mlp::init(&[5, 7, 3], true, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 4, 5);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &mlp.tensors, false);
        let xv = tape.constant(x.clone());
        let out = mlp.forward_on_tape(&mut tape, &vars, xv);
        assert_eq!(tape.value(out), &mlp.forward(&x));
    }

    #[test]
    fn folded_input_transform_matches_explicit() {
        let mut mlp = Mlp::init(&[3, 4, 2], false, 6);
        let plain = mlp.clone();
        let mean = [0.5, -1.0, 2.0];
        let p = ndarray::array![[2.0, 0.5, 0.0], [-1.0, 1.0, 0.3], [0.0, 0.2, 4.0]];
        mlp.fold_input_transform(&mean, &p);
        let x = [0.7, 0.2, 1.1];
        let z: Vec<f64> = (0..3).map(|j| (0..3).map(|i| (x[i] - mean[i]) * p[[i, j]]).sum()).collect();
        for (a, b) in mlp.forward_vec(&x).iter().zip(plain.forward_vec(&z)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_jacobian_matches_finite_differences() {
        let mlp = Mlp::init(&[4, 6, 3], false, 5);
        let x = [0.3, -0.7, 0.2, 0.9];
        let j = mlp.jacobian(&x);
        let h = 1e-6;
        for c in 0..4 {
            let mut p = x;
            let mut m = x;
            p[c] += h;
            m[c] -= h;
            let (fp, fm) = (mlp.forward_vec(&p), mlp.forward_vec(&m));
            for r in 0..3 {
                assert!(((fp[r] - fm[r]) / (2.0 * h) - j[[r, c]]).abs() < 1e-7);
            }
        }
    }
}
