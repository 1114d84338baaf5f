//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every value is a dense `Array2<f64>`; vectors are 1×n or n×1 matrices. A [`Tape`]
//! records operations in evaluation order and [`Tape::backward`] replays them in reverse.

use ndarray::{concatenate, s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    MeanAll(Var),
    L2NormalizeRows(Var),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Diag(Var),
    PairBias {
        weight: Var,
        features: Array2<f64>,
        pair_type: Vec<usize>,
    },
    ColumnSquare(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros of `shape` when no path reached it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads[v.0].take().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise log-sum-exp with max shift, n×m → n×1.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| logsumexp(x.row(i).iter().copied()));
        self.push(v, Op::LogSumExpRows(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Column means, n×m → 1×m.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).mean().expect("non-empty"));
        self.push(v, Op::MeanAll(a), &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row /= n;
        }
        self.push(v, Op::L2NormalizeRows(a), &[a])
    }

    /// Rows of `table` selected by `index`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Var {
        let t = self.value(table);
        let v = Array2::from_shape_fn((index.len(), t.ncols()), |(i, j)| t[[index[i], j]]);
        self.push(v, Op::Gather(table, index.to_vec()), &[table])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    /// Diagonal of a square matrix as an n×1 column.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| x[[i, i]]);
        self.push(v, Op::Diag(a), &[a])
    }

    /// Per-pair typed affine map of fixed features:
    /// `out[p, h] = Σ_k weight[pair_type[p], h·K + k] · features[p, k]` with `K = features.ncols()`.
    pub fn pair_bias(&mut self, weight: Var, features: Array2<f64>, pair_type: Vec<usize>, heads: usize) -> Var {
        let w = self.value(weight);
        let k = features.ncols();
        assert_eq!(w.ncols(), heads * k, "pair weight width must be heads × features");
        let v = Array2::from_shape_fn((features.nrows(), heads), |(p, h)| {
            let row = w.row(pair_type[p]);
            (0..k).map(|c| row[h * k + c] * features[[p, c]]).sum()
        });
        self.push(
            v,
            Op::PairBias {
                weight,
                features,
                pair_type,
            },
            &[weight],
        )
    }

    /// Reshapes column `col` of an (L²)×h matrix into an L×L matrix.
    pub fn column_square(&mut self, a: Var, col: usize) -> Var {
        let x = self.value(a);
        let n = (x.nrows() as f64).sqrt().round() as usize;
        assert_eq!(n * n, x.nrows(), "row count must be a square");
        let v = Array2::from_shape_fn((n, n), |(i, j)| x[[i * n + j, col]]);
        self.push(v, Op::ColumnSquare(a, col), &[a])
    }

    /// Reverse sweep from the scalar `loss` (a 1×1 node).
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g * *f),
            Op::Silu(a) => {
                let x = self.value(*a);
                let mut gx = g.clone();
                gx.zip_mut_with(x, |gi, &xi| {
                    let s = sigmoid(xi);
                    *gi *= s * (1.0 + xi * (1.0 - s));
                });
                self.accumulate(grads, *a, gx);
            }
            Op::SoftmaxRows(a) => {
                let mut gx = g * y;
                for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yrow, |r, &yi| *r -= yi * dot);
                }
                self.accumulate(grads, *a, gx);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let gx = Array2::from_shape_fn(x.raw_dim(), |(i, j)| g[[i, 0]] * (x[[i, j]] - y[[i, 0]]).exp());
                self.accumulate(grads, *a, gx);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut gx = Array2::zeros(x.raw_dim());
                gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    self.accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    self.accumulate(grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                    offset += h;
                }
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = x.nrows() as f64;
                let gx = Array2::from_shape_fn(x.raw_dim(), |(_, j)| g[[0, j]] / n);
                self.accumulate(grads, *a, gx);
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let gx = Array2::from_elem(x.raw_dim(), g[[0, 0]] / x.len() as f64);
                self.accumulate(grads, *a, gx);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let mut gx = g.clone();
                for ((mut grow, yrow), xrow) in gx.rows_mut().into_iter().zip(y.rows()).zip(x.rows()) {
                    let n = xrow.dot(&xrow).sqrt().max(f64::MIN_POSITIVE);
                    let proj = grow.dot(&yrow);
                    grow.zip_mut_with(&yrow, |gi, &yi| *gi = (*gi - yi * proj) / n);
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Gather(table, index) => {
                let mut gt = Array2::zeros(self.value(*table).raw_dim());
                for (i, &r) in index.iter().enumerate() {
                    let mut row = gt.row_mut(r);
                    row += &g.row(i);
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Diag(a) => {
                let x = self.value(*a);
                let mut gx = Array2::zeros(x.raw_dim());
                for i in 0..x.nrows() {
                    gx[[i, i]] = g[[i, 0]];
                }
                self.accumulate(grads, *a, gx);
            }
            Op::PairBias {
                weight,
                features,
                pair_type,
            } => {
                let k = features.ncols();
                let mut gw = Array2::zeros(self.value(*weight).raw_dim());
                for (p, &t) in pair_type.iter().enumerate() {
                    for h in 0..g.ncols() {
                        let gp = g[[p, h]];
                        if gp == 0.0 {
                            continue;
                        }
                        for c in 0..k {
                            gw[[t, h * k + c]] += gp * features[[p, c]];
                        }
                    }
                }
                self.accumulate(grads, *weight, gw);
            }
            Op::ColumnSquare(a, col) => {
                let x = self.value(*a);
                let n = g.nrows();
                let mut gx = Array2::zeros(x.raw_dim());
                for i in 0..n {
                    for j in 0..n {
                        gx[[i * n + j, *col]] = g[[i, j]];
                    }
                }
                self.accumulate(grads, *a, gx);
            }
        }
    }
}

/// Max-shifted log-sum-exp; `-inf` for an empty sequence.
pub fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` at `inputs`; returns the max relative error.
    pub(crate) fn fd_check(inputs: &[Array2<f64>], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (n, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[n]).cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim()));
            for idx in 0..x.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[n].as_slice_mut().unwrap()[idx] += h;
                minus[n].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let c = random_matrix(&mut rng, 3, 4);
        let row = random_matrix(&mut rng, 1, 4);
        let err = fd_check(&[a, b, c, row], |t, v| {
            let ab = t.matmul(v[0], v[1]);
            let act = t.silu(ab);
            let sm = t.softmax_rows(act);
            let abt = t.matmul_t(v[0], v[2]);
            let lse = t.logsumexp_rows(abt);
            let sum = t.add_row(v[2], v[3]);
            let prod = t.mul(sum, v[0]);
            let n = t.l2_normalize_rows(prod);
            let sl = t.slice_cols(n, 1, 2);
            let cat = t.concat_cols(&[sl, sm]);
            let tr = t.transpose(cat);
            let m = t.mean_rows(tr);
            let d = t.diag(abt);
            let diff = t.sub(d, lse);
            let stacked = t.concat_rows(&[diff, d]);
            let sq = t.mul(stacked, stacked);
            let x = t.mean_all(sq);
            let y = t.mean_all(m);
            let z = t.add(x, y);
            t.scale(z, 1.7)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_and_pair_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = random_matrix(&mut rng, 5, 3);
        let weight = random_matrix(&mut rng, 3, 2 * 4);
        let features = random_matrix(&mut rng, 9, 4);
        let err = fd_check(&[table, weight], |t, v| {
            let g = t.gather(v[0], &[4, 0, 4]);
            let pb = t.pair_bias(v[1], features.clone(), vec![0, 1, 2, 1, 0, 2, 2, 2, 1], 2);
            let sq = t.column_square(pb, 1);
            let gsq = t.matmul(sq, g);
            let a = t.silu(gsq);
            t.mean_all(a)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Array2::ones((2, 2)));
        let b = t.param(Array2::ones((2, 2)));
        let c = t.mul(a, b);
        let l = t.mean_all(c);
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &Array2::from_elem((2, 2), 0.25));
    }

    #[test]
    fn logsumexp_is_shift_stable() {
        let v = [1000.0, 1000.0];
        assert!((logsumexp(v.iter().copied()) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(std::iter::empty()), f64::NEG_INFINITY);
    }
}
