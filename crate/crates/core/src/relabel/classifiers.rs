//! The seven hard-voting classifiers of the relabeling ensemble.
//!
//! Each follows the usual library defaults of its family. Labels are `0`
//! (normal) and `1` (malicious); every classifier emits a hard label for
//! every row, so seven voters never tie.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{derive_seed, rng_from_seed};

pub trait BinaryClassifier {
    fn name(&self) -> &'static str;
    fn fit(&mut self, x: &Array2<f64>, y: &[u8]);
    fn predict(&self, x: &Array2<f64>) -> Vec<u8>;
}

/// Solves `a z = b` for symmetric positive definite `a`, adding diagonal
/// jitter until the factorization succeeds.
pub(crate) fn spd_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0, f64::max).max(1e-12);
    let mut jitter = 0.0;
    loop {
        if let Some(l) = cholesky(a, jitter) {
            let mut y = Array1::zeros(n);
            for i in 0..n {
                let s: f64 = (0..i).map(|k| l[[i, k]] * y[k]).sum();
                y[i] = (b[i] - s) / l[[i, i]];
            }
            let mut z = Array1::zeros(n);
            for i in (0..n).rev() {
                let s: f64 = (i + 1..n).map(|k| l[[k, i]] * z[k]).sum();
                z[i] = (y[i] - s) / l[[i, i]];
            }
            return z;
        }
        jitter = if jitter == 0.0 { 1e-10 * scale } else { jitter * 10.0 };
    }
}

fn cholesky(a: &Array2<f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let v = a[[i, i]] + jitter - s;
                if v <= 0.0 || !v.is_finite() {
                    return None;
                }
                l[[i, j]] = v.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    Some(l)
}

fn class_rows(x: &Array2<f64>, y: &[u8], class: u8) -> Array2<f64> {
    let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
    x.select(Axis(0), &idx)
}

// ---------------------------------------------------------------- LDA

/// Linear discriminant analysis with a pooled covariance.
#[derive(Debug, Default, Clone)]
pub struct LinearDiscriminant {
    w: Array1<f64>,
    b: f64,
}

impl BinaryClassifier for LinearDiscriminant {
    fn name(&self) -> &'static str {
        "linear_discriminant"
    }

    fn fit(&mut self, x: &Array2<f64>, y: &[u8]) {
        let (n, d) = x.dim();
        let x0 = class_rows(x, y, 0);
        let x1 = class_rows(x, y, 1);
        let m0 = x0.mean_axis(Axis(0)).unwrap();
        let m1 = x1.mean_axis(Axis(0)).unwrap();
        let c0 = &x0 - &m0;
        let c1 = &x1 - &m1;
        let dof = (n as f64 - 2.0).max(1.0);
        let mut cov = (c0.t().dot(&c0) + c1.t().dot(&c1)) / dof;
        let tr = (0..d).map(|i| cov[[i, i]]).sum::<f64>() / d as f64;
        for i in 0..d {
            cov[[i, i]] += 1e-6 * tr.max(1e-12);
        }
        let diff = &m1 - &m0;
        let w = spd_solve(&cov, &diff);
        let prior = (x1.nrows() as f64 / x0.nrows() as f64).ln();
        self.b = -0.5 * w.dot(&(&m0 + &m1)) + prior;
        self.w = w;
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        x.dot(&self.w).iter().map(|s| u8::from(s + self.b > 0.0)).collect()
    }
}

// ---------------------------------------------------------------- AdaBoost

#[derive(Debug, Clone, Copy)]
struct Stump {
    feature: usize,
    threshold: f64,
    /// Label predicted when `x[feature] <= threshold`.
    left: u8,
}

impl Stump {
    fn predict(&self, row: ArrayView1<f64>) -> u8 {
        if row[self.feature] <= self.threshold {
            self.left
        } else {
            1 - self.left
        }
    }
}

fn best_stump(x: &Array2<f64>, y: &[u8], w: &[f64]) -> (Stump, f64) {
    let (n, d) = x.dim();
    let total: f64 = w.iter().sum();
    let total1: f64 = (0..n).filter(|&i| y[i] == 1).map(|i| w[i]).sum();
    let mut best = (Stump { feature: 0, threshold: f64::INFINITY, left: u8::from(total1 > total - total1) }, f64::INFINITY);
    best.1 = total1.min(total - total1);
    let mut order: Vec<usize> = (0..n).collect();
    for f in 0..d {
        order.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
        let (mut left0, mut left1) = (0.0, 0.0);
        for k in 0..n - 1 {
            let i = order[k];
            if y[i] == 1 { left1 += w[i] } else { left0 += w[i] }
            let (a, b) = (x[[i, f]], x[[order[k + 1], f]]);
            if a == b {
                continue;
            }
            let right1 = total1 - left1;
            let right0 = total - total1 - left0;
            // left predicts 0: errors are left1 + right0
            let err_left0 = left1 + right0;
            let err_left1 = left0 + right1;
            let threshold = 0.5 * (a + b);
            if err_left0 < best.1 {
                best = (Stump { feature: f, threshold, left: 0 }, err_left0);
            }
            if err_left1 < best.1 {
                best = (Stump { feature: f, threshold, left: 1 }, err_left1);
            }
        }
    }
    (best.0, best.1 / total)
}

/// Discrete AdaBoost over decision stumps (50 rounds, unit learning rate).
#[derive(Debug, Clone)]
pub struct AdaBoost {
    rounds: usize,
    stumps: Vec<(Stump, f64)>,
}

impl Default for AdaBoost {
    fn default() -> Self {
        Self { rounds: 50, stumps: Vec::new() }
    }
}

impl BinaryClassifier for AdaBoost {
    fn name(&self) -> &'static str {
        "adaboost"
    }

    fn fit(&mut self, x: &Array2<f64>, y: &[u8]) {
        let n = x.nrows();
        let mut w = vec![1.0 / n as f64; n];
        self.stumps.clear();
        for _ in 0..self.rounds {
            let (stump, err) = best_stump(x, y, &w);
            if err <= 1e-12 {
                self.stumps.push((stump, 10.0));
                break;
            }
            if err >= 0.5 {
                if self.stumps.is_empty() {
                    self.stumps.push((stump, 1.0));
                }
                break;
            }
            let alpha = ((1.0 - err) / err).ln();
            for i in 0..n {
                if stump.predict(x.row(i)) != y[i] {
                    w[i] *= alpha.exp();
                }
            }
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            self.stumps.push((stump, alpha));
        }
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        x.outer_iter()
            .map(|row| {
                let score: f64 = self
                    .stumps
                    .iter()
                    .map(|(s, a)| if s.predict(row) == 1 { *a } else { -*a })
                    .sum();
                u8::from(score > 0.0)
            })
            .collect()
    }
}

// ---------------------------------------------------------------- trees

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn eval(&self, row: ArrayView1<f64>) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split { feature, threshold, left, right } => {
                if row[*feature] <= *threshold {
                    left.eval(row)
                } else {
                    right.eval(row)
                }
            }
        }
    }
}

/// Gini CART grown to purity on a bootstrap sample; leaves hold the
/// malicious fraction.
fn grow_gini(x: &Array2<f64>, y: &[u8], idx: &mut [usize], max_features: usize, rng: &mut ChaCha8Rng) -> Node {
    let n = idx.len();
    let ones = idx.iter().filter(|&&i| y[i] == 1).count();
    if ones == 0 || ones == n || n < 2 {
        return Node::Leaf(ones as f64 / n.max(1) as f64);
    }
    let d = x.ncols();
    let features: Vec<usize> = (0..d).collect::<Vec<_>>().choose_multiple(rng, max_features).copied().collect();
    let gini = |c1: f64, c: f64| if c == 0.0 { 0.0 } else { 1.0 - (c1 / c).powi(2) - (1.0 - c1 / c).powi(2) };
    let mut best: Option<(f64, usize, f64)> = None;
    let mut sorted = idx.to_vec();
    for &f in &features {
        sorted.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
        let mut left1 = 0.0;
        for k in 0..n - 1 {
            if y[sorted[k]] == 1 {
                left1 += 1.0;
            }
            let (a, b) = (x[[sorted[k], f]], x[[sorted[k + 1], f]]);
            if a == b {
                continue;
            }
            let nl = (k + 1) as f64;
            let nr = n as f64 - nl;
            let right1 = ones as f64 - left1;
            let impurity = nl * gini(left1, nl) + nr * gini(right1, nr);
            if best.is_none_or(|(bi, _, _)| impurity < bi) {
                best = Some((impurity, f, 0.5 * (a + b)));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return Node::Leaf(ones as f64 / n as f64);
    };
    let split = partition(idx, |i| x[[i, feature]] <= threshold);
    let (l, r) = idx.split_at_mut(split);
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow_gini(x, y, l, max_features, rng)),
        right: Box::new(grow_gini(x, y, r, max_features, rng)),
    }
}

fn partition(idx: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut left: Vec<usize> = Vec::with_capacity(idx.len());
    let mut right: Vec<usize> = Vec::new();
    for &i in idx.iter() {
        if pred(i) { left.push(i) } else { right.push(i) }
    }
    let split = left.len();
    left.extend(right);
    idx.copy_from_slice(&left);
    split
}

/// Bagged Gini trees with `sqrt(d)` candidate features per split.
#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: usize,
    seed: u64,
    forest: Vec<Node>,
}

impl RandomForest {
    pub fn new(seed: u64) -> Self {
        Self { trees: 100, seed, forest: Vec::new() }
    }
}

impl BinaryClassifier for RandomForest {
    fn name(&self) -> &'static str {
        "random_forest"
    }

    fn fit(&mut self, x: &Array2<f64>, y: &[u8]) {
        let (n, d) = x.dim();
        let max_features = ((d as f64).sqrt().floor() as usize).max(1);
        let mut rng = rng_from_seed(self.seed);
        self.forest = (0..self.trees)
            .map(|_| {
                let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                grow_gini(x, y, &mut idx, max_features, &mut rng)
            })
            .collect();
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        x.outer_iter()
            .map(|row| {
                let p = self.forest.iter().map(|t| t.eval(row)).sum::<f64>() / self.forest.len() as f64;
                u8::from(p > 0.5)
            })
            .collect()
    }
}

// ---------------------------------------------------------------- logistic

/// L2-regularized logistic regression (`C = 1`) solved by Newton steps.
#[derive(Debug, Clone, Default)]
pub struct LogisticRegression {
    w: Array1<f64>,
    b: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl BinaryClassifier for LogisticRegression {
    fn name(&self) -> &'static str {
        "logistic_regression"
    }

    fn fit(&mut self, x: &Array2<f64>, y: &[u8]) {
        let (n, d) = x.dim();
        // augmented design [x, 1]; the intercept is not penalized
        let mut theta = Array1::<f64>::zeros(d + 1);
        for _ in 0..100 {
            let mut grad = Array1::<f64>::zeros(d + 1);
            let mut hess = Array2::<f64>::zeros((d + 1, d + 1));
            for i in 0..n {
                let row = x.row(i);
                let z = row.dot(&theta.slice(ndarray::s![..d])) + theta[d];
                let p = sigmoid(z);
                let r = p - y[i] as f64;
                let wgt = (p * (1.0 - p)).max(1e-12);
                for a in 0..=d {
                    let xa = if a < d { row[a] } else { 1.0 };
                    grad[a] += r * xa;
                    for b in 0..=a {
                        let xb = if b < d { row[b] } else { 1.0 };
                        hess[[a, b]] += wgt * xa * xb;
                    }
                }
            }
            for a in 0..=d {
                for b in 0..a {
                    hess[[b, a]] = hess[[a, b]];
                }
            }
            for a in 0..d {
                grad[a] += theta[a];
                hess[[a, a]] += 1.0;
            }
            let step = spd_solve(&hess, &grad);
            theta -= &step;
            if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-8 {
                break;
            }
        }
        self.w = theta.slice(ndarray::s![..d]).to_owned();
        self.b = theta[d];
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        x.dot(&self.w).iter().map(|z| u8::from(z + self.b > 0.0)).collect()
    }
}

// ---------------------------------------------------------------- naive Bayes

/// Gaussian naive Bayes with variance smoothing `1e-9 * max variance`.
#[derive(Debug, Clone, Default)]
pub struct GaussianNaiveBayes {
    means: [Array1<f64>; 2],
    vars: [Array1<f64>; 2],
    log_priors: [f64; 2],
}

impl BinaryClassifier for GaussianNaiveBayes {
    fn name(&self) -> &'static str {
        "gaussian_naive_bayes"
    }

    fn fit(&mut self, x: &Array2<f64>, y: &[u8]) {
        let eps = 1e-9 * x.var_axis(Axis(0), 0.0).iter().cloned().fold(0.0, f64::max);
        for c in 0..2u8 {
            let rows = class_rows(x, y, c);
            self.means[c as usize] = rows.mean_axis(Axis(0)).unwrap();
            self.vars[c as usize] = rows.var_axis(Axis(0), 0.0).mapv(|v| v + eps.max(1e-300));
            self.log_priors[c as usize] = (rows.nrows() as f64 / y.len() as f64).ln();
        }
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        x.outer_iter()
            .map(|row| {
                let ll = |c: usize| {
                    self.log_priors[c]
                        + row
                            .iter()
                            .zip(self.means[c].iter().zip(self.vars[c].iter()))
                            .map(|(&v, (&m, &s))| -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (v - m).powi(2) / s))
                            .sum::<f64>()
                };
                u8::from(ll(1) > ll(0))
            })
            .collect()
    }
}

// ---------------------------------------------------------------- SVC

/// RBF-kernel support vector classifier (`C = 1`, `gamma = 1 / (d var(X))`)
/// trained by SMO with second-order working-set selection.
#[derive(Debug, Clone)]
pub struct SupportVectorClassifier {
    c: f64,
    tol: f64,
    gamma: f64,
    support: Array2<f64>,
    coef: Vec<f64>,
    bias: f64,
}

impl Default for SupportVectorClassifier {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-3,
            gamma: 1.0,
            support: Array2::zeros((0, 0)),
            coef: Vec::new(),
            bias: 0.0,
        }
    }
}

impl SupportVectorClassifier {
    fn kernel(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        (-self.gamma * d2).exp()
    }
}

impl BinaryClassifier for SupportVectorClassifier {
    fn name(&self) -> &'static str {
        "support_vector_classifier"
    }

    fn fit(&mut self, x: &Array2<f64>, y: &[u8]) {
        let (n, d) = x.dim();
        let var = x.var(0.0);
        self.gamma = if var > 0.0 { 1.0 / (d as f64 * var) } else { 1.0 };
        let yy: Vec<f64> = y.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect();
        let k = Array2::from_shape_fn((n, n), |(i, j)| self.kernel(x.row(i), x.row(j)));
        let c = self.c;
        let mut alpha = vec![0.0; n];
        // gradient of the dual objective 0.5 a'Qa - e'a
        let mut grad = vec![-1.0; n];
        let q = |i: usize, j: usize| yy[i] * yy[j] * k[[i, j]];
        let in_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
        let in_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);
        for _ in 0..(100 * n).max(10_000) {
            // i: maximal violating index from the "up" set
            let mut gmax = f64::NEG_INFINITY;
            let mut i_sel = usize::MAX;
            for t in 0..n {
                if in_up(alpha[t], yy[t]) {
                    let v = -yy[t] * grad[t];
                    if v > gmax {
                        gmax = v;
                        i_sel = t;
                    }
                }
            }
            let mut gmin = f64::INFINITY;
            let mut j_sel = usize::MAX;
            let mut best_obj = f64::INFINITY;
            for t in 0..n {
                if in_low(alpha[t], yy[t]) {
                    let v = -yy[t] * grad[t];
                    gmin = gmin.min(v);
                    if i_sel != usize::MAX && v < gmax {
                        let b = gmax - v;
                        let a = (k[[i_sel, i_sel]] + k[[t, t]] - 2.0 * k[[i_sel, t]]).max(1e-12);
                        let obj = -(b * b) / a;
                        if obj < best_obj {
                            best_obj = obj;
                            j_sel = t;
                        }
                    }
                }
            }
            if i_sel == usize::MAX || j_sel == usize::MAX || gmax - gmin < self.tol {
                break;
            }
            let (i, j) = (i_sel, j_sel);
            let (ai_old, aj_old) = (alpha[i], alpha[j]);
            let quad = (k[[i, i]] + k[[j, j]] - 2.0 * k[[i, j]]).max(1e-12);
            if yy[i] != yy[j] {
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let delta = (grad[i] - grad[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let (di, dj) = (alpha[i] - ai_old, alpha[j] - aj_old);
            for t in 0..n {
                grad[t] += q(t, i) * di + q(t, j) * dj;
            }
        }
        // bias from free support vectors, or the midpoint of the bounds
        let mut free_sum = 0.0;
        let mut free = 0usize;
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..n {
            let yg = yy[t] * grad[t];
            if alpha[t] > 0.0 && alpha[t] < c {
                free_sum += yg;
                free += 1;
            } else if (alpha[t] == 0.0 && yy[t] > 0.0) || (alpha[t] == c && yy[t] < 0.0) {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        }
        let rho = if free > 0 { free_sum / free as f64 } else { 0.5 * (ub + lb) };
        self.bias = -rho;
        let sv: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
        self.support = x.select(Axis(0), &sv);
        self.coef = sv.iter().map(|&t| alpha[t] * yy[t]).collect();
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        x.outer_iter()
            .map(|row| {
                let s: f64 = self
                    .support
                    .outer_iter()
                    .zip(&self.coef)
                    .map(|(sv, &c)| c * self.kernel(sv, row))
                    .sum();
                u8::from(s + self.bias > 0.0)
            })
            .collect()
    }
}

// ---------------------------------------------------------------- boosting

/// Second-order gradient-boosted trees on the logistic loss
/// (100 rounds, depth 6, eta 0.3, lambda 1, min child weight 1).
#[derive(Debug, Clone)]
pub struct GradientBoostedTrees {
    rounds: usize,
    max_depth: usize,
    eta: f64,
    lambda: f64,
    min_child_weight: f64,
    trees: Vec<Node>,
}

impl Default for GradientBoostedTrees {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 6,
            eta: 0.3,
            lambda: 1.0,
            min_child_weight: 1.0,
            trees: Vec::new(),
        }
    }
}

impl GradientBoostedTrees {
    fn grow(&self, x: &Array2<f64>, g: &[f64], h: &[f64], idx: &mut [usize], depth: usize) -> Node {
        let gs: f64 = idx.iter().map(|&i| g[i]).sum();
        let hs: f64 = idx.iter().map(|&i| h[i]).sum();
        let leaf = Node::Leaf(-gs / (hs + self.lambda) * self.eta);
        if depth >= self.max_depth || idx.len() < 2 {
            return leaf;
        }
        let score = |g: f64, h: f64| g * g / (h + self.lambda);
        let parent = score(gs, hs);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = idx.to_vec();
        for f in 0..x.ncols() {
            sorted.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..sorted.len() - 1 {
                gl += g[sorted[k]];
                hl += h[sorted[k]];
                let (a, b) = (x[[sorted[k], f]], x[[sorted[k + 1], f]]);
                if a == b || hl < self.min_child_weight || hs - hl < self.min_child_weight {
                    continue;
                }
                let gain = score(gl, hl) + score(gs - gl, hs - hl) - parent;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, 0.5 * (a + b)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return leaf };
        let split = partition(idx, |i| x[[i, feature]] <= threshold);
        let (l, r) = idx.split_at_mut(split);
        Node::Split {
            feature,
            threshold,
            left: Box::new(self.grow(x, g, h, l, depth + 1)),
            right: Box::new(self.grow(x, g, h, r, depth + 1)),
        }
    }

    fn margin(&self, row: ArrayView1<f64>) -> f64 {
        self.trees.iter().map(|t| t.eval(row)).sum()
    }
}

impl BinaryClassifier for GradientBoostedTrees {
    fn name(&self) -> &'static str {
        "gradient_boosted_trees"
    }

    fn fit(&mut self, x: &Array2<f64>, y: &[u8]) {
        let n = x.nrows();
        self.trees.clear();
        let mut margin = vec![0.0; n];
        for _ in 0..self.rounds {
            let p: Vec<f64> = margin.iter().map(|&m| sigmoid(m)).collect();
            let g: Vec<f64> = (0..n).map(|i| p[i] - y[i] as f64).collect();
            let h: Vec<f64> = p.iter().map(|&pi| (pi * (1.0 - pi)).max(1e-16)).collect();
            let mut idx: Vec<usize> = (0..n).collect();
            let tree = self.grow(x, &g, &h, &mut idx, 0);
            for i in 0..n {
                margin[i] += tree.eval(x.row(i));
            }
            self.trees.push(tree);
        }
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        x.outer_iter().map(|row| u8::from(self.margin(row) > 0.0)).collect()
    }
}

/// The seven ensemble members, in a fixed order.
pub fn ensemble_members(seed: u64) -> Vec<Box<dyn BinaryClassifier>> {
    vec![
        Box::new(LinearDiscriminant::default()),
        Box::new(AdaBoost::default()),
        Box::new(RandomForest::new(derive_seed(seed, 3))),
        Box::new(LogisticRegression::default()),
        Box::new(GaussianNaiveBayes::default()),
        Box::new(SupportVectorClassifier::default()),
        Box::new(GradientBoostedTrees::default()),
    ]
}

/// Fits all seven members and returns per-row majority votes together with
/// each member's votes.
pub fn majority_vote(train_x: &Array2<f64>, train_y: &[u8], x: &Array2<f64>, seed: u64) -> (Vec<u8>, Vec<Vec<u8>>) {
    let mut votes = Vec::new();
    for mut clf in ensemble_members(seed) {
        clf.fit(train_x, train_y);
        votes.push(clf.predict(x));
    }
    let labels = (0..x.nrows())
        .map(|r| {
            let ones = votes.iter().filter(|v| v[r] == 1).count();
            u8::from(2 * ones > votes.len())
        })
        .collect();
    (labels, votes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    /// Two Gaussian blobs in 3-D, centers at -1.5 and +1.5 on every axis.
    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
        let mut rng = rng_from_seed(seed);
        let mut x = Array2::zeros((2 * n, 3));
        let mut y = Vec::new();
        for i in 0..2 * n {
            let c = (i % 2) as u8;
            let center = if c == 1 { 1.5 } else { -1.5 };
            for j in 0..3 {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[[i, j]] = center + 0.8 * z;
            }
            y.push(c);
        }
        (x, y)
    }

    fn accuracy(pred: &[u8], y: &[u8]) -> f64 {
        pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
    }

    #[test]
    fn every_member_separates_blobs() {
        let (xtr, ytr) = blobs(100, 1);
        let (xte, yte) = blobs(100, 2);
        for mut clf in ensemble_members(5) {
            clf.fit(&xtr, &ytr);
            let acc = accuracy(&clf.predict(&xte), &yte);
            assert!(acc > 0.95, "{} accuracy {acc}", clf.name());
        }
    }

    #[test]
    fn every_member_learns_a_nonaxis_boundary() {
        // label = x0 > x1, shifted away from the origin
        let mut rng = rng_from_seed(3);
        let x = Array2::from_shape_simple_fn((300, 2), || rng.random_range(-2.0..2.0) + 5.0);
        let y: Vec<u8> = x.outer_iter().map(|r| u8::from(r[0] > r[1])).collect();
        for mut clf in ensemble_members(1) {
            clf.fit(&x, &y);
            let acc = accuracy(&clf.predict(&x), &y);
            assert!(acc > 0.85, "{} train accuracy {acc}", clf.name());
        }
    }

    #[test]
    fn svc_handles_xor() {
        let x = ndarray::array![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let y = vec![0, 1, 1, 0];
        let mut svc = SupportVectorClassifier { c: 100.0, ..Default::default() };
        svc.fit(&x, &y);
        assert_eq!(svc.predict(&x), y);
    }

    #[test]
    fn seven_voters_never_tie() {
        let (xtr, ytr) = blobs(30, 4);
        let (xte, _) = blobs(30, 5);
        let (labels, votes) = majority_vote(&xtr, &ytr, &xte, 9);
        assert_eq!(votes.len(), 7);
        for (r, &l) in labels.iter().enumerate() {
            let ones = votes.iter().filter(|v| v[r] == 1).count();
            assert_ne!(2 * ones, 7);
            assert_eq!(l == 1, ones >= 4);
        }
    }

    #[test]
    fn spd_solver_recovers_solution() {
        let a = ndarray::array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let z = ndarray::array![1.0, -2.0, 0.5];
        let b = a.dot(&z);
        let sol = spd_solve(&a, &b);
        for (s, t) in sol.iter().zip(z.iter()) {
            assert!((s - t).abs() < 1e-10);
        }
    }
}
