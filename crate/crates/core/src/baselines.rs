//! Data-driven reference models: ridge-stabilized linear regression, CART
//! regression trees and bagged random forests, all with two joint outputs.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::NUM_TARGETS;

pub type Target = [f64; NUM_TARGETS];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("empty training set")]
    Empty,
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("row {row} has {found} features, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("{0} and {1} rows in X and Y")]
    Mismatch(usize, usize),
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("normal equations are singular")]
    Singular,
}

fn check(x: &[Vec<f64>], y: &[Target]) -> Result<usize, BaselineError> {
    if x.is_empty() {
        return Err(BaselineError::Empty);
    }
    if x.len() != y.len() {
        return Err(BaselineError::Mismatch(x.len(), y.len()));
    }
    let p = x[0].len();
    for (row, (xi, yi)) in x.iter().zip(y).enumerate() {
        if xi.len() != p {
            return Err(BaselineError::Ragged {
                row,
                expected: p,
                found: xi.len(),
            });
        }
        if xi.iter().chain(yi).any(|v| !v.is_finite()) {
            return Err(BaselineError::NonFinite { row });
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `weights[k][j]`: coefficient of feature `j` for output `k`.
    pub weights: Vec<Vec<f64>>,
    pub intercept: Target,
    pub jitter: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> Target {
        let mut out = self.intercept;
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }
}

/// Least squares for `A = [X | 1]` through the jittered normal equations
/// `(AᵀA + µI)W = AᵀY`, followed by two iterated-Tikhonov refinement steps
/// `W ← W + (AᵀA + µI)⁻¹(AᵀY − AᵀA·W)` that cancel the first-order bias of
/// the jitter. The system is rescaled to unit diagonal before factoring.
pub fn linreg_fit(x: &[Vec<f64>], y: &[Target], jitter: f64) -> Result<LinearModel, BaselineError> {
    let p = check(x, y)?;
    if !(jitter >= 0.0) {
        return Err(BaselineError::Hyper(format!("jitter {jitter}")));
    }
    let a = DMatrix::from_fn(x.len(), p + 1, |i, j| if j < p { x[i][j] } else { 1.0 });
    let yy = DMatrix::from_fn(y.len(), NUM_TARGETS, |i, k| y[i][k]);
    let gram = a.transpose() * &a + DMatrix::identity(p + 1, p + 1) * jitter;
    let d: Vec<f64> = (0..=p)
        .map(|j| {
            let g = gram[(j, j)];
            if g > 0.0 {
                1.0 / g.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(p + 1, p + 1, |i, j| gram[(i, j)] * d[i] * d[j]);
    let rhs = a.transpose() * yy;
    let rhs = DMatrix::from_fn(p + 1, NUM_TARGETS, |i, k| rhs[(i, k)] * d[i]);
    let solve = |r: &DMatrix<f64>| -> Result<DMatrix<f64>, BaselineError> {
        match scaled.clone().cholesky() {
            Some(c) => Ok(c.solve(r)),
            None => scaled.clone().lu().solve(r).ok_or(BaselineError::Singular),
        }
    };
    // scaled system without the jitter, for the refinement residual
    let plain = DMatrix::from_fn(p + 1, p + 1, |i, j| {
        scaled[(i, j)] - if i == j { jitter * d[i] * d[i] } else { 0.0 }
    });
    let mut v = solve(&rhs)?;
    for _ in 0..2 {
        let r = &rhs - &plain * &v;
        v += solve(&r)?;
    }
    let mut weights = vec![vec![0.0; p]; NUM_TARGETS];
    let mut intercept = [0.0; NUM_TARGETS];
    for k in 0..NUM_TARGETS {
        for j in 0..p {
            weights[k][j] = v[(j, k)] * d[j];
        }
        intercept[k] = v[(p, k)] * d[p];
    }
    if weights.iter().flatten().chain(&intercept).any(|v| !v.is_finite()) {
        return Err(BaselineError::Singular);
    }
    Ok(LinearModel {
        weights,
        intercept,
        jitter,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TreeNode {
    Leaf {
        value: Target,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl TreeModel {
    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { .. } => return i,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Target {
        match self.nodes[self.leaf_index(x)] {
            TreeNode::Leaf { value } => value,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn rec(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + rec(nodes, left).max(rec(nodes, right)),
            }
        }
        rec(&self.nodes, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 8,
            min_leaf: 1,
        }
    }
}

// Rows of one tree fit: sample `s` refers to data row `rows[s]`; for every
// feature, `order[f]` holds sample ids sorted by that feature, and each node
// owns the same range `lo..hi` in all of them.
struct Builder<'a, R: Rng> {
    x: &'a [Vec<f64>],
    y: &'a [Target],
    rows: Vec<usize>,
    order: Vec<Vec<u32>>,
    scratch: Vec<u32>,
    go_left: Vec<bool>,
    params: TreeParams,
    features_per_split: usize,
    rng: Option<R>,
    nodes: Vec<TreeNode>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    n_left: usize,
    gain: f64,
}

impl<'a, R: Rng> Builder<'a, R> {
    fn new(x: &'a [Vec<f64>], y: &'a [Target], rows: Vec<usize>, params: TreeParams, m: usize, rng: Option<R>) -> Self {
        let p = x[0].len();
        let order = (0..p)
            .map(|f| {
                let mut o: Vec<u32> = (0..rows.len() as u32).collect();
                o.sort_by(|&a, &b| x[rows[a as usize]][f].total_cmp(&x[rows[b as usize]][f]));
                o
            })
            .collect();
        let n = rows.len();
        Builder {
            x,
            y,
            rows,
            order,
            scratch: Vec::with_capacity(n),
            go_left: vec![false; n],
            params,
            features_per_split: m,
            rng,
            nodes: Vec::new(),
        }
    }

    fn xv(&self, s: u32, f: usize) -> f64 {
        self.x[self.rows[s as usize]][f]
    }

    fn yv(&self, s: u32) -> &Target {
        &self.y[self.rows[s as usize]]
    }

    fn build(&mut self, lo: usize, hi: usize, depth: usize) -> usize {
        let id = self.nodes.len();
        let n = (hi - lo) as f64;
        let ids = &self.order[0][lo..hi];
        let mut mean = [0.0; NUM_TARGETS];
        for &s in ids {
            for (m, v) in mean.iter_mut().zip(self.yv(s)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        self.nodes.push(TreeNode::Leaf { value: mean });
        if depth >= self.params.max_depth || hi - lo < 2 * self.params.min_leaf.max(1) {
            return id;
        }
        let first = *self.yv(ids[0]);
        if ids.iter().all(|&s| *self.yv(s) == first) {
            return id;
        }
        let Some(best) = self.best_split(lo, hi, &mean) else {
            return id;
        };
        // stable partition of every feature order around the chosen split
        for &s in &self.order[best.feature][lo..lo + best.n_left] {
            self.go_left[s as usize] = true;
        }
        for f in 0..self.order.len() {
            self.scratch.clear();
            let ord = &mut self.order[f];
            let mut w = lo;
            for k in lo..hi {
                let s = ord[k];
                if self.go_left[s as usize] {
                    ord[w] = s;
                    w += 1;
                } else {
                    self.scratch.push(s);
                }
            }
            ord[w..hi].copy_from_slice(&self.scratch);
        }
        for &s in &self.order[0][lo..lo + best.n_left] {
            self.go_left[s as usize] = false;
        }
        let mid = lo + best.n_left;
        let left = self.build(lo, mid, depth + 1);
        let right = self.build(mid, hi, depth + 1);
        self.nodes[id] = TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let p = self.order.len();
        match self.rng.as_mut() {
            Some(rng) if self.features_per_split < p => {
                let mut f = sample(rng, p, self.features_per_split).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p).collect(),
        }
    }

    /// Lowest-SSE split; ties keep the lowest feature, then lowest threshold.
    fn best_split(&mut self, lo: usize, hi: usize, mean: &Target) -> Option<BestSplit> {
        let n = hi - lo;
        let min_leaf = self.params.min_leaf.max(1);
        // SSE of a child from sums of targets centered at the parent mean
        let sse = |s: &Target, q: &Target, c: f64| -> f64 { (0..NUM_TARGETS).map(|k| q[k] - s[k] * s[k] / c).sum() };
        let mut total_s = [0.0; NUM_TARGETS];
        let mut total_q = [0.0; NUM_TARGETS];
        for &s in &self.order[0][lo..hi] {
            let y = self.yv(s);
            for k in 0..NUM_TARGETS {
                let d = y[k] - mean[k];
                total_s[k] += d;
                total_q[k] += d * d;
            }
        }
        let parent = sse(&total_s, &total_q, n as f64);
        let floor = 1e-12 * parent.max(f64::MIN_POSITIVE);
        let mut best: Option<BestSplit> = None;
        for f in self.candidate_features() {
            let ord = &self.order[f][lo..hi];
            let mut ls = [0.0; NUM_TARGETS];
            let mut lq = [0.0; NUM_TARGETS];
            for i in 0..n - 1 {
                let s = ord[i];
                let y = self.yv(s);
                for k in 0..NUM_TARGETS {
                    let d = y[k] - mean[k];
                    ls[k] += d;
                    lq[k] += d * d;
                }
                let nl = i + 1;
                if nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let (a, b) = (self.xv(s, f), self.xv(ord[i + 1], f));
                if a == b {
                    continue;
                }
                let rs: Target = std::array::from_fn(|k| total_s[k] - ls[k]);
                let rq: Target = std::array::from_fn(|k| total_q[k] - lq[k]);
                let gain = parent - sse(&ls, &lq, nl as f64) - sse(&rs, &rq, (n - nl) as f64);
                if gain > floor && best.as_ref().map_or(true, |b| gain > b.gain) {
                    let mut threshold = a + (b - a) / 2.0;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        n_left: nl,
                        gain,
                    });
                }
            }
        }
        best
    }
}

/// CART regression tree minimizing the summed SSE of both outputs.
pub fn tree_fit(x: &[Vec<f64>], y: &[Target], params: TreeParams) -> Result<TreeModel, BaselineError> {
    let p = check(x, y)?;
    fit_rows(x, y, (0..x.len()).collect(), params, p, None::<ChaCha8Rng>)
}

fn fit_rows<R: Rng>(
    x: &[Vec<f64>],
    y: &[Target],
    rows: Vec<usize>,
    params: TreeParams,
    m: usize,
    rng: Option<R>,
) -> Result<TreeModel, BaselineError> {
    let n = rows.len();
    let mut b = Builder::new(x, y, rows, params, m, rng);
    b.build(0, n, 0);
    Ok(TreeModel {
        nodes: b.nodes,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features drawn per split.
    pub features_per_split: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub tree_seeds: Vec<u64>,
    pub params: ForestParams,
}

impl ForestModel {
    pub fn predict(&self, x: &[f64]) -> Target {
        let mut out = [0.0; NUM_TARGETS];
        for t in &self.trees {
            for (o, v) in out.iter_mut().zip(t.predict(x)) {
                *o += v;
            }
        }
        out.map(|v| v / self.trees.len() as f64)
    }
}

/// Bagged trees with per-split feature subsampling. Tree `i` uses its own
/// RNG seeded from the `i`-th draw of the forest seed stream, so the result
/// does not depend on how trees are scheduled across threads.
pub fn forest_fit(x: &[Vec<f64>], y: &[Target], params: ForestParams) -> Result<ForestModel, BaselineError> {
    let p = check(x, y)?;
    if params.n_trees == 0 {
        return Err(BaselineError::Hyper("n_trees must be at least 1".into()));
    }
    if params.features_per_split == 0 || params.features_per_split > p {
        return Err(BaselineError::Hyper(format!(
            "features per split {} outside 1..={p}",
            params.features_per_split
        )));
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(params.seed);
    let tree_seeds: Vec<u64> = (0..params.n_trees).map(|_| seeder.gen()).collect();
    let tp = TreeParams {
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
    };
    let n = x.len();
    let trees = tree_seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let rows = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_rows(x, y, rows, tp, params.features_per_split, Some(rng))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ForestModel {
        trees,
        tree_seeds,
        params,
    })
}

/// Any fitted baseline, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum BaselineModel {
    Linear(LinearModel),
    Tree(TreeModel),
    Forest(ForestModel),
}

impl BaselineModel {
    pub fn predict(&self, x: &[f64]) -> Target {
        match self {
            BaselineModel::Linear(m) => m.predict(x),
            BaselineModel::Tree(m) => m.predict(x),
            BaselineModel::Forest(m) => m.predict(x),
        }
    }
}

/// Mean over samples of the squared error summed over both outputs.
pub fn mse_u(pred: &[Target], y: &[Target]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(y)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    s / y.len() as f64
}

/// Candidate hyperparameters for validation-based selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineGrid {
    pub max_depth: Vec<usize>,
    pub n_trees: Vec<usize>,
    pub features_per_split: Vec<usize>,
    pub min_leaf: usize,
}

impl Default for BaselineGrid {
    fn default() -> Self {
        BaselineGrid {
            max_depth: vec![4, 8, 12],
            n_trees: vec![50, 100],
            features_per_split: vec![4, 8, 12],
            min_leaf: 1,
        }
    }
}

/// A selected model with its validation score and every grid score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection<P> {
    pub best: P,
    pub val_mse: f64,
    pub scores: Vec<(P, f64)>,
}

fn predict_all(f: impl Fn(&[f64]) -> Target + Sync, x: &[Vec<f64>]) -> Vec<Target> {
    x.iter().map(|r| f(r)).collect()
}

/// Tree depth chosen by validation MSE_u; ties keep the earlier grid entry.
pub fn select_tree(
    x: &[Vec<f64>],
    y: &[Target],
    xv: &[Vec<f64>],
    yv: &[Target],
    grid: &BaselineGrid,
) -> Result<(TreeModel, Selection<TreeParams>), BaselineError> {
    let mut best: Option<(TreeModel, TreeParams, f64)> = None;
    let mut scores = Vec::new();
    for &max_depth in &grid.max_depth {
        let p = TreeParams {
            max_depth,
            min_leaf: grid.min_leaf,
        };
        let m = tree_fit(x, y, p)?;
        let s = mse_u(&predict_all(|r| m.predict(r), xv), yv);
        scores.push((p, s));
        if best.as_ref().map_or(true, |b| s < b.2) {
            best = Some((m, p, s));
        }
    }
    let (m, p, s) = best.ok_or_else(|| BaselineError::Hyper("empty depth grid".into()))?;
    Ok((
        m,
        Selection {
            best: p,
            val_mse: s,
            scores,
        },
    ))
}

/// Forest hyperparameters chosen by validation MSE_u over the full grid.
pub fn select_forest(
    x: &[Vec<f64>],
    y: &[Target],
    xv: &[Vec<f64>],
    yv: &[Target],
    grid: &BaselineGrid,
    seed: u64,
) -> Result<(ForestModel, Selection<ForestParams>), BaselineError> {
    let p = x.first().map_or(0, |r| r.len());
    let mut best: Option<(ForestModel, f64)> = None;
    let mut scores = Vec::new();
    for &max_depth in &grid.max_depth {
        for &n_trees in &grid.n_trees {
            for &m in &grid.features_per_split {
                let params = ForestParams {
                    n_trees,
                    max_depth,
                    min_leaf: grid.min_leaf,
                    features_per_split: m.min(p),
                    bootstrap: true,
                    seed,
                };
                let f = forest_fit(x, y, params)?;
                let s = mse_u(&predict_all(|r| f.predict(r), xv), yv);
                scores.push((params, s));
                if best.as_ref().map_or(true, |b| s < b.1) {
                    best = Some((f, s));
                }
            }
        }
    }
    let (f, s) = best.ok_or_else(|| BaselineError::Hyper("empty forest grid".into()))?;
    Ok((
        f.clone(),
        Selection {
            best: f.params,
            val_mse: s,
            scores,
        },
    ))
}
