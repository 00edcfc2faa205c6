//! Classical classifiers on the aggregated feature vectors, feature
//! selection and stratified 10-fold cross-validation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, Confusion};
use crate::signal_io::Label;

pub const N_FOLDS: usize = 10;
const LOGISTIC_TOL: f64 = 1e-6;
const LOGISTIC_MAX_ITER: usize = 10_000;
const SVM_EPOCHS: usize = 200;
const NB_SD_FLOOR: f64 = 1e-6;
const STANDARDIZE_SD_GUARD: f64 = 1e-12;
const STEPWISE_MIN_GAIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub normal: f64,
    pub abnormal: f64,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights {
        normal: 1.0,
        abnormal: 1.0,
    };

    /// Abnormal errors weighted by `#normal / #abnormal`.
    pub fn balanced(y: &[Label]) -> Self {
        let abnormal = y.iter().filter(|l| l.is_abnormal()).count();
        let normal = y.len() - abnormal;
        ClassWeights {
            normal: 1.0,
            abnormal: if abnormal == 0 {
                1.0
            } else {
                normal as f64 / abnormal as f64
            },
        }
    }

    pub fn of(&self, label: Label) -> f64 {
        match label {
            Label::Normal => self.normal,
            Label::Abnormal => self.abnormal,
        }
    }
}

/// Per-column zero mean, unit population SD, fit on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let p = check_matrix(x)?;
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let sd = (0..p)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let s = v.sqrt();
                if s < STANDARDIZE_SD_GUARD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer { mean, sd })
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn transform(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter().map(|r| self.transform_row(r)).collect()
    }
}

fn check_matrix(x: &[Vec<f64>]) -> Result<usize> {
    let p = x.first().map_or(0, Vec::len);
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::Shape("ragged feature matrix".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    Ok(p)
}

fn check_xy(x: &[Vec<f64>], y: &[Label]) -> Result<usize> {
    let p = check_matrix(x)?;
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.len(), y.len())));
    }
    Ok(p)
}

fn target(label: Label) -> f64 {
    label.index() as f64
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Logistic,
    LinearSvm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: LinearKind,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Columns of the full feature vector the weights apply to.
    pub feature_subset: Vec<usize>,
}

impl LinearModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(&self.feature_subset)
                .map(|(w, &j)| w * x[j])
                .sum::<f64>()
    }

    /// Abnormal probability (logistic) or raw margin (SVM).
    pub fn score(&self, x: &[f64]) -> f64 {
        match self.kind {
            LinearKind::Logistic => sigmoid(self.decision(x)),
            LinearKind::LinearSvm => self.decision(x),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        if self.decision(x) > 0.0 {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }

    pub fn nonzero_features(&self) -> Vec<usize> {
        self.weights
            .iter()
            .zip(&self.feature_subset)
            .filter(|(w, _)| **w != 0.0)
            .map(|(_, &j)| j)
            .collect()
    }
}

/// Weighted-mean cross-entropy plus `l2 |w|^2` (smooth part) and its
/// gradient; the bias is the last coordinate and is not penalized.
struct LogisticProblem<'a> {
    x: &'a [Vec<f64>],
    t: Vec<f64>,
    c: Vec<f64>,
    total_weight: f64,
    l2: f64,
}

impl LogisticProblem<'_> {
    fn margins(&self, theta: &[f64]) -> Vec<f64> {
        let p = theta.len() - 1;
        self.x
            .iter()
            .map(|r| theta[p] + r.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    fn smooth_value(&self, theta: &[f64]) -> f64 {
        let p = theta.len() - 1;
        let ce: f64 = self
            .margins(theta)
            .iter()
            .zip(self.t.iter().zip(&self.c))
            .map(|(&z, (&t, &c))| c * (softplus(z) - t * z))
            .sum();
        ce / self.total_weight + self.l2 * theta[..p].iter().map(|w| w * w).sum::<f64>()
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let p = theta.len() - 1;
        let mut g = vec![0.0; p + 1];
        for ((r, z), (&t, &c)) in self.x.iter().zip(self.margins(theta)).zip(self.t.iter().zip(&self.c)) {
            let resid = c * (sigmoid(z) - t);
            for (gj, xj) in g.iter_mut().zip(r) {
                *gj += resid * xj;
            }
            g[p] += resid;
        }
        for (j, gj) in g.iter_mut().enumerate() {
            *gj /= self.total_weight;
            if j < p {
                *gj += 2.0 * self.l2 * theta[j];
            }
        }
        g
    }

    /// Upper bound on the gradient's Lipschitz constant from the largest
    /// eigenvalue of the weighted second-moment matrix (power iteration).
    fn lipschitz(&self) -> f64 {
        let p = self.x[0].len() + 1;
        let mut v = vec![1.0 / (p as f64).sqrt(); p];
        let mut lambda = 0.0;
        for _ in 0..100 {
            let mut mv = vec![0.0; p];
            for (r, &c) in self.x.iter().zip(&self.c) {
                let dot = v[p - 1] + r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
                for (m, xj) in mv.iter_mut().zip(r) {
                    *m += c * dot * xj;
                }
                mv[p - 1] += c * dot;
            }
            mv.iter_mut().for_each(|m| *m /= self.total_weight);
            let norm = mv.iter().map(|m| m * m).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            lambda = norm;
            v = mv.iter().map(|m| m / norm).collect();
        }
        (0.25 * lambda * 1.05 + 2.0 * self.l2).max(1e-12)
    }
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Proximal-gradient logistic regression. Uses accelerated steps with
/// restart whenever the objective rises; stops when the max-norm of the
/// proximal gradient mapping drops below 1e-6 or after 10,000 iterations.
pub fn train_logistic(
    x: &[Vec<f64>],
    y: &[Label],
    l1: f64,
    l2: f64,
    weights: ClassWeights,
) -> Result<LinearModel> {
    let p = check_xy(x, y)?;
    if !(l1 >= 0.0 && l2 >= 0.0) {
        return Err(Error::InvalidArgument("penalties must be non-negative".into()));
    }
    let c: Vec<f64> = y.iter().map(|&l| weights.of(l)).collect();
    let problem = LogisticProblem {
        x,
        t: y.iter().map(|&l| target(l)).collect(),
        total_weight: c.iter().sum(),
        c,
        l2,
    };
    let step = 1.0 / problem.lipschitz();
    let prox = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(j, &vj)| if j < p { soft_threshold(vj, step * l1) } else { vj })
            .collect()
    };
    let objective = |theta: &[f64]| problem.smooth_value(theta) + l1 * theta[..p].iter().map(|w| w.abs()).sum::<f64>();

    let mut theta = vec![0.0; p + 1];
    let mut momentum_point = theta.clone();
    let mut t_k = 1.0f64;
    let mut f_theta = objective(&theta);
    for _ in 0..LOGISTIC_MAX_ITER {
        let g = problem.gradient(&momentum_point);
        let stepped: Vec<f64> = momentum_point.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let next = prox(&stepped);
        let mapping = momentum_point
            .iter()
            .zip(&next)
            .map(|(a, b)| ((a - b) / step).abs())
            .fold(0.0, f64::max);
        let f_next = objective(&next);
        if f_next > f_theta {
            // Restart from a plain proximal step at the current iterate.
            momentum_point = theta.clone();
            t_k = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        let beta = (t_k - 1.0) / t_next;
        momentum_point = next.iter().zip(&theta).map(|(n, o)| n + beta * (n - o)).collect();
        theta = next;
        f_theta = f_next;
        t_k = t_next;
        if mapping < LOGISTIC_TOL {
            break;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic regression parameters".into()));
    }
    Ok(LinearModel {
        kind: LinearKind::Logistic,
        bias: theta[p],
        weights: theta[..p].to_vec(),
        feature_subset: (0..p).collect(),
    })
}

/// Linear SVM by deterministic full-batch subgradient descent on
/// `lambda/2 |(w, b)|^2 + (1/W) sum c_i hinge_i` with `lambda = 1/(C W)`,
/// `W` the total example weight; equivalent to `1/2 |w|^2 + C sum c_i
/// hinge_i`. Steps are `1/(lambda t)`; the bias is an extra constant
/// feature. Returns the mean of the second half of the iterates.
pub fn train_linear_svm(
    x: &[Vec<f64>],
    y: &[Label],
    cost: f64,
    weights: ClassWeights,
) -> Result<LinearModel> {
    let p = check_xy(x, y)?;
    if !(cost >= 0.0) || !cost.is_finite() {
        return Err(Error::InvalidArgument(format!("SVM cost must be non-negative, got {cost}")));
    }
    let mut model = LinearModel {
        kind: LinearKind::LinearSvm,
        weights: vec![0.0; p],
        bias: 0.0,
        feature_subset: (0..p).collect(),
    };
    if cost == 0.0 {
        return Ok(model);
    }
    let c: Vec<f64> = y.iter().map(|&l| weights.of(l)).collect();
    let total: f64 = c.iter().sum();
    let lambda = 1.0 / (cost * total);
    let sign: Vec<f64> = y.iter().map(|&l| 2.0 * target(l) - 1.0).collect();
    let mut theta = vec![0.0; p + 1];
    let mut avg = vec![0.0; p + 1];
    let burn_in = SVM_EPOCHS / 2;
    for t in 1..=SVM_EPOCHS {
        let mut sub = vec![0.0; p + 1];
        for ((r, &s), &ci) in x.iter().zip(&sign).zip(&c) {
            let margin = s * (theta[p] + r.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>());
            if margin < 1.0 {
                for (sj, xj) in sub.iter_mut().zip(r) {
                    *sj += ci * s * xj;
                }
                sub[p] += ci * s;
            }
        }
        let eta = 1.0 / (lambda * t as f64);
        for (th, sj) in theta.iter_mut().zip(&sub) {
            *th = (1.0 - eta * lambda) * *th + eta * sj / total;
        }
        if t > burn_in {
            for (a, th) in avg.iter_mut().zip(&theta) {
                *a += th / (SVM_EPOCHS - burn_in) as f64;
            }
        }
    }
    model.bias = avg[p];
    model.weights = avg[..p].to_vec();
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbModel {
    /// Indexed by class: Normal, Abnormal.
    pub mean: [Vec<f64>; 2],
    pub sd: [Vec<f64>; 2],
    pub log_prior: [f64; 2],
}

fn class_rows(y: &[Label], class: Label) -> Vec<usize> {
    (0..y.len()).filter(|&i| y[i] == class).collect()
}

pub fn train_gaussian_nb(x: &[Vec<f64>], y: &[Label], weights: ClassWeights) -> Result<NbModel> {
    let p = check_xy(x, y)?;
    let mut mean: [Vec<f64>; 2] = Default::default();
    let mut sd: [Vec<f64>; 2] = Default::default();
    let mut mass = [0.0; 2];
    for class in [Label::Normal, Label::Abnormal] {
        let rows = class_rows(y, class);
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!("no {class} training rows")));
        }
        let n = rows.len() as f64;
        let k = class.index();
        mean[k] = (0..p).map(|j| rows.iter().map(|&i| x[i][j]).sum::<f64>() / n).collect();
        sd[k] = (0..p)
            .map(|j| {
                let v = rows.iter().map(|&i| (x[i][j] - mean[k][j]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(NB_SD_FLOOR)
            })
            .collect();
        mass[k] = n * weights.of(class);
    }
    let total = mass[0] + mass[1];
    Ok(NbModel {
        mean,
        sd,
        log_prior: [(mass[0] / total).ln(), (mass[1] / total).ln()],
    })
}

impl NbModel {
    fn log_joint(&self, x: &[f64], k: usize) -> f64 {
        self.log_prior[k]
            + x.iter()
                .zip(self.mean[k].iter().zip(&self.sd[k]))
                .map(|(v, (m, s))| {
                    let z = (v - m) / s;
                    -0.5 * z * z - s.ln()
                })
                .sum::<f64>()
    }

    /// Posterior probability of Abnormal.
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.log_joint(x, 1) - self.log_joint(x, 0))
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        if self.log_joint(x, 1) > self.log_joint(x, 0) {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Label>,
    pub k: usize,
}

pub fn train_knn(x: &[Vec<f64>], y: &[Label], k: usize) -> Result<KnnModel> {
    check_xy(x, y)?;
    if k == 0 || k > x.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} needs 1..={} training rows",
            x.len()
        )));
    }
    Ok(KnnModel {
        x: x.to_vec(),
        y: y.to_vec(),
        k,
    })
}

impl KnnModel {
    /// Fraction of Abnormal among the `k` nearest rows (Euclidean; equal
    /// distances keep the earlier row).
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut d: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let abnormal = d[..self.k].iter().filter(|(_, i)| self.y[*i].is_abnormal()).count();
        abnormal as f64 / self.k as f64
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        if self.score(x) > 0.5 {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }
}

pub fn predict_knn(model: &KnnModel, x: &[f64], k: usize) -> Result<Label> {
    let m = KnnModel {
        k,
        ..train_knn(&model.x, &model.y, k)?
    };
    Ok(m.predict(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        counts: [f64; 2],
    },
    Split {
        feature: usize,
        threshold: f64,
        counts: [f64; 2],
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    fn leaf_counts(&self, x: &[f64]) -> [f64; 2] {
        match self {
            TreeNode::Leaf { counts } => *counts,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                if x[*feature] <= *threshold {
                    left.leaf_counts(x)
                } else {
                    right.leaf_counts(x)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub root: TreeNode,
    pub max_depth: usize,
}

impl TreeModel {
    /// Weighted Abnormal fraction at the reached leaf.
    pub fn score(&self, x: &[f64]) -> f64 {
        let c = self.root.leaf_counts(x);
        c[1] / (c[0] + c[1])
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        let c = self.root.leaf_counts(x);
        if c[1] > c[0] {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }
}

fn gini(c: [f64; 2]) -> f64 {
    let t = c[0] + c[1];
    if t <= 0.0 {
        0.0
    } else {
        1.0 - (c[0] / t).powi(2) - (c[1] / t).powi(2)
    }
}

/// Chooses which features a split may consider.
trait FeatureSampler {
    fn features(&mut self, p: usize) -> Vec<usize>;
}

struct AllFeatures;

impl FeatureSampler for AllFeatures {
    fn features(&mut self, p: usize) -> Vec<usize> {
        (0..p).collect()
    }
}

struct RandomFeatures {
    rng: ChaCha8Rng,
    count: usize,
}

impl FeatureSampler for RandomFeatures {
    fn features(&mut self, p: usize) -> Vec<usize> {
        if self.count >= p {
            return (0..p).collect();
        }
        let mut all: Vec<usize> = (0..p).collect();
        let (chosen, _) = all.partial_shuffle(&mut self.rng, self.count);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        chosen
    }
}

struct TreeBuilder<'a, S> {
    x: &'a [Vec<f64>],
    y: &'a [Label],
    w: &'a [f64],
    max_depth: usize,
    sampler: S,
}

impl<S: FeatureSampler> TreeBuilder<'_, S> {
    fn counts(&self, rows: &[usize]) -> [f64; 2] {
        let mut c = [0.0; 2];
        for &i in rows {
            c[self.y[i].index()] += self.w[i];
        }
        c
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize) -> TreeNode {
        let counts = self.counts(&rows);
        if depth >= self.max_depth || counts[0] == 0.0 || counts[1] == 0.0 || rows.len() < 2 {
            return TreeNode::Leaf { counts };
        }
        let total = counts[0] + counts[1];
        let parent = gini(counts);
        let p = self.x[0].len();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in self.sampler.features(p) {
            let mut sorted = rows.clone();
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = [0.0; 2];
            for k in 0..sorted.len() - 1 {
                let i = sorted[k];
                left[self.y[i].index()] += self.w[i];
                let (v, next) = (self.x[i][f], self.x[sorted[k + 1]][f]);
                if v == next {
                    continue;
                }
                let right = [counts[0] - left[0], counts[1] - left[1]];
                let wl = left[0] + left[1];
                let child = (wl * gini(left) + (total - wl) * gini(right)) / total;
                let gain = parent - child;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g + 1e-12) {
                    best = Some((gain, f, 0.5 * (v + next)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return TreeNode::Leaf { counts };
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
        TreeNode::Split {
            feature,
            threshold,
            counts,
            left: Box::new(self.build(l, depth + 1)),
            right: Box::new(self.build(r, depth + 1)),
        }
    }
}

/// CART with weighted Gini impurity, greedy best split (features and
/// thresholds in ascending order, strict improvement) and midpoint
/// thresholds.
pub fn train_decision_tree(
    x: &[Vec<f64>],
    y: &[Label],
    max_depth: usize,
    weights: ClassWeights,
) -> Result<TreeModel> {
    check_xy(x, y)?;
    let w: Vec<f64> = y.iter().map(|&l| weights.of(l)).collect();
    let mut builder = TreeBuilder {
        x,
        y,
        w: &w,
        max_depth,
        sampler: AllFeatures,
    };
    Ok(TreeModel {
        root: builder.build((0..x.len()).collect(), 0),
        max_depth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    /// Features drawn per split; values at or above the feature count mean
    /// all features.
    pub max_features: usize,
    pub max_depth: usize,
    pub bootstrap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub params: ForestParams,
    pub seed: u64,
}

/// Bootstrap rows (as multiplicities) and per-split feature subsampling,
/// one RNG stream per tree.
pub fn train_random_forest(
    x: &[Vec<f64>],
    y: &[Label],
    params: ForestParams,
    weights: ClassWeights,
    seed: u64,
) -> Result<ForestModel> {
    check_xy(x, y)?;
    if params.n_estimators == 0 || params.max_features == 0 {
        return Err(Error::InvalidArgument(
            "forest needs at least one tree and one feature per split".into(),
        ));
    }
    let n = x.len();
    let trees = (0..params.n_estimators)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut mult = vec![1.0; n];
            if params.bootstrap {
                mult = vec![0.0; n];
                for _ in 0..n {
                    mult[rng.gen_range(0..n)] += 1.0;
                }
            }
            let rows: Vec<usize> = (0..n).filter(|&i| mult[i] > 0.0).collect();
            let w: Vec<f64> = (0..n).map(|i| mult[i] * weights.of(y[i])).collect();
            let mut builder = TreeBuilder {
                x,
                y,
                w: &w,
                max_depth: params.max_depth,
                sampler: RandomFeatures {
                    rng,
                    count: params.max_features,
                },
            };
            TreeModel {
                root: builder.build(rows, 0),
                max_depth: params.max_depth,
            }
        })
        .collect();
    Ok(ForestModel { trees, params, seed })
}

impl ForestModel {
    /// Fraction of trees voting Abnormal.
    pub fn score(&self, x: &[f64]) -> f64 {
        let votes = self.trees.iter().filter(|t| t.predict(x).is_abnormal()).count();
        votes as f64 / self.trees.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        if self.score(x) > 0.5 {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }
}

/// A learner with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    Logistic { l1: f64, l2: f64 },
    LinearSvm { cost: f64 },
    GaussianNb,
    Knn { k: usize },
    Tree { max_depth: usize },
    Forest(ForestParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Model {
    Linear(LinearModel),
    GaussianNb(NbModel),
    Knn(KnnModel),
    Tree(TreeModel),
    Forest(ForestModel),
}

impl Model {
    pub fn score(&self, x: &[f64]) -> f64 {
        match self {
            Model::Linear(m) => m.score(x),
            Model::GaussianNb(m) => m.score(x),
            Model::Knn(m) => m.score(x),
            Model::Tree(m) => m.score(x),
            Model::Forest(m) => m.score(x),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        match self {
            Model::Linear(m) => m.predict(x),
            Model::GaussianNb(m) => m.predict(x),
            Model::Knn(m) => m.predict(x),
            Model::Tree(m) => m.predict(x),
            Model::Forest(m) => m.predict(x),
        }
    }
}

pub fn train(
    spec: &LearnerSpec,
    x: &[Vec<f64>],
    y: &[Label],
    weights: ClassWeights,
    seed: u64,
) -> Result<Model> {
    Ok(match *spec {
        LearnerSpec::Logistic { l1, l2 } => Model::Linear(train_logistic(x, y, l1, l2, weights)?),
        LearnerSpec::LinearSvm { cost } => Model::Linear(train_linear_svm(x, y, cost, weights)?),
        LearnerSpec::GaussianNb => Model::GaussianNb(train_gaussian_nb(x, y, weights)?),
        LearnerSpec::Knn { k } => Model::Knn(train_knn(x, y, k)?),
        LearnerSpec::Tree { max_depth } => Model::Tree(train_decision_tree(x, y, max_depth, weights)?),
        LearnerSpec::Forest(params) => Model::Forest(train_random_forest(x, y, params, weights, seed)?),
    })
}

fn select_columns(x: &[Vec<f64>], cols: &[usize]) -> Vec<Vec<f64>> {
    x.iter().map(|r| cols.iter().map(|&j| r[j]).collect()).collect()
}

/// Standardization, column subset and model fit together on training rows;
/// the unit that is cross-validated and checkpointed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub spec: LearnerSpec,
    pub subset: Vec<usize>,
    pub standardizer: Standardizer,
    pub weights: ClassWeights,
    pub model: Model,
}

impl Pipeline {
    /// Fits with class weights balanced on `y` unless given.
    pub fn fit(
        spec: &LearnerSpec,
        x: &[Vec<f64>],
        y: &[Label],
        subset: Option<&[usize]>,
        weights: Option<ClassWeights>,
        seed: u64,
    ) -> Result<Self> {
        let p = check_xy(x, y)?;
        let subset: Vec<usize> = subset.map_or_else(|| (0..p).collect(), <[usize]>::to_vec);
        if let Some(&bad) = subset.iter().find(|&&j| j >= p) {
            return Err(Error::InvalidArgument(format!("feature index {bad} out of range")));
        }
        let xs = select_columns(x, &subset);
        let (standardizer, xs) = if subset.is_empty() {
            let s = Standardizer {
                mean: Vec::new(),
                sd: Vec::new(),
            };
            (s, vec![Vec::new(); x.len()])
        } else {
            let s = Standardizer::fit(&xs)?;
            let t = s.transform(&xs);
            (s, t)
        };
        let weights = weights.unwrap_or_else(|| ClassWeights::balanced(y));
        let model = train(spec, &xs, y, weights, seed)?;
        Ok(Pipeline {
            spec: *spec,
            subset,
            standardizer,
            weights,
            model,
        })
    }

    fn prepare(&self, row: &[f64]) -> Vec<f64> {
        let picked: Vec<f64> = self.subset.iter().map(|&j| row[j]).collect();
        self.standardizer.transform_row(&picked)
    }

    pub fn score(&self, row: &[f64]) -> f64 {
        self.model.score(&self.prepare(row))
    }

    pub fn predict(&self, row: &[f64]) -> Label {
        self.model.predict(&self.prepare(row))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Fold index per row: each class is shuffled and dealt round-robin, the
/// second class continuing where the first stopped.
pub fn stratified_folds(y: &[Label], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut fold = vec![0; y.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0;
    for class in [Label::Normal, Label::Abnormal] {
        let mut rows = class_rows(y, class);
        if rows.len() < k {
            return Err(Error::InvalidArgument(format!(
                "{} {class} rows cannot fill {k} stratified folds",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        for i in rows {
            fold[i] = next % k;
            next += 1;
        }
    }
    Ok(fold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub auc: Option<f64>,
}

impl FoldMetrics {
    fn mean(folds: &[FoldMetrics]) -> FoldMetrics {
        fn avg(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
            let present: Vec<f64> = v.flatten().collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        }
        FoldMetrics {
            accuracy: folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64,
            sensitivity: avg(folds.iter().map(|f| f.sensitivity)),
            specificity: avg(folds.iter().map(|f| f.specificity)),
            ppv: avg(folds.iter().map(|f| f.ppv)),
            auc: avg(folds.iter().map(|f| f.auc)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub chosen: LearnerSpec,
    pub subset: Vec<usize>,
    pub folds: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
    /// Mean accuracy of every grid point, in grid order.
    pub grid_accuracy: Vec<f64>,
}

impl CvReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Per-fold metrics of one learner on a fixed fold assignment.
fn run_folds(
    spec: &LearnerSpec,
    x: &[Vec<f64>],
    y: &[Label],
    subset: &[usize],
    folds: &[usize],
    seed: u64,
) -> Result<Vec<FoldMetrics>> {
    (0..N_FOLDS)
        .into_par_iter()
        .map(|f| {
            let (train_rows, test_rows): (Vec<usize>, Vec<usize>) = (0..x.len()).partition(|&i| folds[i] != f);
            let pick = |rows: &[usize]| -> (Vec<Vec<f64>>, Vec<Label>) {
                (rows.iter().map(|&i| x[i].clone()).collect(), rows.iter().map(|&i| y[i]).collect())
            };
            let (tx, ty) = pick(&train_rows);
            let (vx, vy) = pick(&test_rows);
            let pipe = Pipeline::fit(spec, &tx, &ty, Some(subset), None, seed)?;
            let predicted: Vec<Label> = vx.iter().map(|r| pipe.predict(r)).collect();
            let scores: Vec<f64> = vx.iter().map(|r| pipe.score(r)).collect();
            let m = metrics::evaluate(&predicted, &scores, &vy)?;
            Ok(FoldMetrics {
                accuracy: m.accuracy,
                sensitivity: m.sensitivity,
                specificity: m.specificity,
                ppv: m.ppv,
                auc: m.auc,
            })
        })
        .collect()
}

fn cv_accuracy(
    spec: &LearnerSpec,
    x: &[Vec<f64>],
    y: &[Label],
    subset: &[usize],
    folds: &[usize],
    seed: u64,
) -> Result<f64> {
    Ok(FoldMetrics::mean(&run_folds(spec, x, y, subset, folds, seed)?).accuracy)
}

/// Stratified 10-fold CV of every grid point; the grid point with the best
/// mean accuracy is chosen (ties keep the earlier one) and its fold metrics
/// are reported.
pub fn cross_validate(
    grid: &[LearnerSpec],
    x: &[Vec<f64>],
    y: &[Label],
    subset: Option<&[usize]>,
    seed: u64,
) -> Result<CvReport> {
    let p = check_xy(x, y)?;
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let subset: Vec<usize> = subset.map_or_else(|| (0..p).collect(), <[usize]>::to_vec);
    let folds = stratified_folds(y, N_FOLDS, seed)?;
    let mut best: Option<(usize, Vec<FoldMetrics>, f64)> = None;
    let mut grid_accuracy = Vec::with_capacity(grid.len());
    for (g, spec) in grid.iter().enumerate() {
        let per_fold = run_folds(spec, x, y, &subset, &folds, seed)?;
        let acc = FoldMetrics::mean(&per_fold).accuracy;
        grid_accuracy.push(acc);
        if best.as_ref().is_none_or(|(_, _, a)| acc > *a) {
            best = Some((g, per_fold, acc));
        }
    }
    let (g, folds, _) = best.expect("non-empty grid");
    Ok(CvReport {
        chosen: grid[g],
        subset,
        mean: FoldMetrics::mean(&folds),
        folds,
        grid_accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Greedy stepwise selection scored by 10-fold CV accuracy. Each step takes
/// the best single addition (or removal), lower feature index on ties, and
/// only if it improves accuracy by more than 1e-4.
pub fn stepwise_select(
    direction: Direction,
    learner: &LearnerSpec,
    x: &[Vec<f64>],
    y: &[Label],
    seed: u64,
) -> Result<Vec<usize>> {
    let p = check_xy(x, y)?;
    if p < 2 {
        return Err(Error::InvalidArgument("stepwise selection needs at least two features".into()));
    }
    let folds = stratified_folds(y, N_FOLDS, seed)?;
    let mut current: Vec<usize> = match direction {
        Direction::Forward => Vec::new(),
        Direction::Backward => (0..p).collect(),
    };
    let mut score = cv_accuracy(learner, x, y, &current, &folds, seed)?;
    loop {
        let candidates: Vec<(usize, Vec<usize>)> = match direction {
            Direction::Forward => (0..p)
                .filter(|j| !current.contains(j))
                .map(|j| {
                    let mut s = current.clone();
                    s.push(j);
                    s.sort_unstable();
                    (j, s)
                })
                .collect(),
            Direction::Backward if current.len() > 1 => current
                .iter()
                .map(|&j| (j, current.iter().copied().filter(|&c| c != j).collect()))
                .collect(),
            Direction::Backward => Vec::new(),
        };
        let mut best: Option<(f64, Vec<usize>)> = None;
        for (_, subset) in candidates {
            let acc = cv_accuracy(learner, x, y, &subset, &folds, seed)?;
            if best.as_ref().is_none_or(|(a, _)| acc > *a) {
                best = Some((acc, subset));
            }
        }
        match best {
            Some((acc, subset)) if acc > score + STEPWISE_MIN_GAIN => {
                current = subset;
                score = acc;
            }
            _ => return Ok(current),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSelection {
    pub subset: Vec<usize>,
    pub lambda: f64,
    /// CV misclassification rate per grid value, in grid order.
    pub cv_error: Vec<f64>,
}

/// L1-logistic path over `lambda_grid`; picks the value with the lowest
/// 10-fold CV misclassification (ties keep the larger lambda) and returns the
/// features with nonzero weight when refit on all rows.
pub fn lasso_select(
    x: &[Vec<f64>],
    y: &[Label],
    lambda_grid: &[f64],
    seed: u64,
) -> Result<LassoSelection> {
    let p = check_xy(x, y)?;
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    let all: Vec<usize> = (0..p).collect();
    let folds = stratified_folds(y, N_FOLDS, seed)?;
    let mut cv_error = Vec::with_capacity(lambda_grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in lambda_grid {
        let spec = LearnerSpec::Logistic { l1: lambda, l2: 0.0 };
        let err = 1.0 - cv_accuracy(&spec, x, y, &all, &folds, seed)?;
        cv_error.push(err);
        let better = match best {
            None => true,
            Some((e, l)) => err < e - 1e-12 || ((err - e).abs() <= 1e-12 && lambda > l),
        };
        if better {
            best = Some((err, lambda));
        }
    }
    let (_, lambda) = best.expect("non-empty grid");
    let pipe = Pipeline::fit(&LearnerSpec::Logistic { l1: lambda, l2: 0.0 }, x, y, None, None, seed)?;
    let subset = match &pipe.model {
        Model::Linear(m) => m.nonzero_features(),
        _ => unreachable!("lasso refit is linear"),
    };
    Ok(LassoSelection {
        subset,
        lambda,
        cv_error,
    })
}

/// Confusion counts of a fitted pipeline on labelled rows.
pub fn confusion_of(pipe: &Pipeline, x: &[Vec<f64>], y: &[Label]) -> Confusion {
    let predicted: Vec<Label> = x.iter().map(|r| pipe.predict(r)).collect();
    Confusion::from_labels(&predicted, y)
}
