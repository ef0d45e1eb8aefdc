//! Two-peer co-teaching MLP detector.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::features::{FeatureVector, Prediction};
use crate::flows::Label;
use crate::nn::{derive_seed, rng_from_seed, Activation, Adam, Mlp};
use crate::{Error, Result};

pub const DEFAULT_FORGET_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgetSchedule {
    pub rate: f64,
    pub ramp_epochs: usize,
}

impl Default for ForgetSchedule {
    fn default() -> Self {
        Self { rate: DEFAULT_FORGET_RATE, ramp_epochs: 10 }
    }
}

impl ForgetSchedule {
    pub fn new(rate: f64, ramp_epochs: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("forget rate {rate} must lie in [0, 1)")));
        }
        Ok(Self { rate, ramp_epochs })
    }

    /// Forget rate at 0-based epoch `t`.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 {
            return self.rate;
        }
        self.rate * (epoch as f64 / self.ramp_epochs as f64).min(1.0)
    }

    /// Samples each peer keeps out of a batch of `batch` at rate `rate`.
    pub fn kept(rate: f64, batch: usize) -> usize {
        let exact = (1.0 - rate) * batch as f64;
        ((exact - 1e-9).ceil().max(0.0) as usize).min(batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: ForgetSchedule,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            schedule: ForgetSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorHistory {
    /// Mean loss of each peer on its kept subset, per epoch.
    pub peer_a: Vec<f64>,
    pub peer_b: Vec<f64>,
    pub forget_rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub peers: [Mlp; 2],
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub config: DetectorConfig,
    pub seed: u64,
    pub history: DetectorHistory,
}

fn per_sample_loss(net: &Mlp, x: &Array2<f64>, y: &[usize]) -> Vec<f64> {
    let g = Graph::new();
    let vars = net.bind_frozen(&g);
    let logp = net.forward(&vars, g.constant(x.clone())).log_softmax();
    let v = logp.value();
    y.iter().enumerate().map(|(i, &c)| -v[[i, c]]).collect()
}

/// Indices of the `keep` smallest losses, ties by position.
pub fn small_loss_selection(losses: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// One gradient step of `net` on rows `subset`; returns the mean loss.
fn step_on(net: &mut Mlp, adam: &mut Adam, x: &Array2<f64>, y: &[usize], subset: &[usize]) -> f64 {
    if subset.is_empty() {
        return 0.0;
    }
    let xs = x.select(Axis(0), subset);
    let ys: Vec<usize> = subset.iter().map(|&i| y[i]).collect();
    let g = Graph::new();
    let vars = net.bind(&g);
    let loss = net.forward(&vars, g.constant(xs)).log_softmax().pick(ys).mean().neg();
    g.backward(loss);
    let grads: Vec<_> = vars.iter().map(|v| g.grad(*v)).collect();
    adam.step(&mut net.params, &grads);
    loss.scalar()
}

/// Co-teaching update on one batch. Each peer picks its small-loss subset
/// before either peer moves; the subset chosen by one peer trains the other.
/// Returns `(picked_by_a, picked_by_b, loss_a, loss_b)`.
pub fn coteach_step(
    peers: &mut [Mlp; 2],
    adams: &mut [Adam; 2],
    x: &Array2<f64>,
    y: &[usize],
    keep: usize,
) -> (Vec<usize>, Vec<usize>, f64, f64) {
    let by_a = small_loss_selection(&per_sample_loss(&peers[0], x, y), keep);
    let by_b = small_loss_selection(&per_sample_loss(&peers[1], x, y), keep);
    let [pa, pb] = peers;
    let [aa, ab] = adams;
    let loss_a = step_on(pa, aa, x, y, &by_b);
    let loss_b = step_on(pb, ab, x, y, &by_a);
    (by_a, by_b, loss_a, loss_b)
}

fn standardization(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap();
    let std = x.std_axis(Axis(0), 0.0);
    let scale = std.iter().map(|&s| if s > 1e-8 { s } else { 1.0 }).collect();
    (mean.to_vec(), scale)
}

impl DetectorModel {
    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.shift[j]) / self.scale[j];
            }
        }
        out
    }

    /// Malicious-class probability from peer A for every row.
    pub fn scores(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.ncols() });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let g = Graph::new();
        let vars = self.peers[0].bind_frozen(&g);
        let logp = self.peers[0].forward(&vars, g.constant(self.normalize(x))).log_softmax();
        Ok(logp.value().column(1).iter().map(|l| l.exp().clamp(0.0, 1.0)).collect())
    }

    pub fn predict(&self, ids: &[u64], x: &[FeatureVector]) -> Result<Vec<Prediction>> {
        if ids.len() != x.len() {
            return Err(Error::IdMismatch(format!("{} ids for {} vectors", ids.len(), x.len())));
        }
        if x.is_empty() {
            return Ok(Vec::new());
        }
        for v in x {
            if v.dim() != self.dim() {
                return Err(Error::DimensionMismatch { expected: self.dim(), got: v.dim() });
            }
        }
        let m = crate::features::to_matrix(x)?;
        Ok(ids
            .iter()
            .zip(self.scores(&m)?)
            .map(|(&id, score)| Prediction { id, score, label: label_for_score(score) })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn label_for_score(score: f64) -> Label {
    if score >= 0.5 {
        Label::Malicious
    } else {
        Label::Normal
    }
}

pub fn init_peers(dim: usize, hidden: &[usize], seed: u64) -> [Mlp; 2] {
    let mut sizes = vec![dim];
    sizes.extend_from_slice(hidden);
    sizes.push(2);
    let mk = |tag| Mlp::new(&sizes, Activation::Relu, Activation::Identity, &mut rng_from_seed(derive_seed(seed, tag)));
    [mk(1), mk(2)]
}

pub fn train_detector(x: &Array2<f64>, labels: &[Label], cfg: &DetectorConfig, seed: u64) -> Result<DetectorModel> {
    if x.nrows() != labels.len() {
        return Err(Error::IdMismatch(format!("{} rows for {} labels", x.nrows(), labels.len())));
    }
    if x.nrows() == 0 {
        return Err(Error::Empty("detector training set"));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let ones = labels.iter().filter(|l| l.is_malicious()).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::SingleClass);
    }
    let schedule = ForgetSchedule::new(cfg.schedule.rate, cfg.schedule.ramp_epochs)?;
    let (shift, scale) = standardization(x);
    let mut model = DetectorModel {
        peers: init_peers(x.ncols(), &cfg.hidden, seed),
        shift,
        scale,
        config: cfg.clone(),
        seed,
        history: DetectorHistory::default(),
    };
    let xn = model.normalize(x);
    let y: Vec<usize> = labels.iter().map(|l| l.as_u8() as usize).collect();
    let mut adams = [
        Adam::new(cfg.learning_rate, &model.peers[0].params),
        Adam::new(cfg.learning_rate, &model.peers[1].params),
    ];
    let mut rng = rng_from_seed(derive_seed(seed, 3));
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for epoch in 0..cfg.epochs {
        let rate = schedule.rate_at(epoch);
        order.shuffle(&mut rng);
        let (mut sa, mut sb, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = xn.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let keep = ForgetSchedule::kept(rate, chunk.len());
            let (_, _, la, lb) = coteach_step(&mut model.peers, &mut adams, &xb, &yb, keep);
            sa += la;
            sb += lb;
            batches += 1;
        }
        model.history.peer_a.push(sa / batches as f64);
        model.history.peer_b.push(sb / batches as f64);
        model.history.forget_rate.push(rate);
    }
    Ok(model)
}
