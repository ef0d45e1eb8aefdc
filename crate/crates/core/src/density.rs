//! Masked autoregressive density estimation with Gaussian-mixture
//! conditionals.
//!
//! A masked feed-forward network maps `x` to, for every variable `i`, the
//! parameters of a `K`-component mixture over `x_i`. Connectivity masks
//! guarantee that variable `i`'s parameters only see variables earlier in
//! the ordering, so `log p(x) = sum_i log p(x_i | x_<i)` is a normalized
//! density.
//!
//! Inputs are standardized with training statistics before the network;
//! [`MadeModel::conditionals`] reports mixture parameters back in input
//! units, so densities are always densities of the raw vectors.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::nn::{derive_seed, minibatches, rng_from_seed, uniform, Adam};

pub const SCALE_FLOOR: f64 = 1e-3;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MadeConfig {
    /// Mixture components per conditional (`K`).
    pub components: usize,
    /// Hidden layer width as a multiple of the input dimension.
    pub hidden_multiplier: usize,
    pub hidden_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for MadeConfig {
    fn default() -> Self {
        Self {
            components: 10,
            hidden_multiplier: 8,
            hidden_layers: 2,
            epochs: 60,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

/// Mixture parameters of one conditional, in input units.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Conditional {
    pub fn log_pdf(&self, x: f64) -> f64 {
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                let z = (x - self.means[k]) / self.scales[k];
                self.weights[k].ln() - 0.5 * z * z - self.scales[k].ln() - 0.5 * LN_2PI
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityScore {
    /// Natural-log density.
    pub log_density: f64,
}

/// Variables `(conditional, input)` whose autoregressive independence was
/// violated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskReport {
    pub violations: Vec<(usize, usize)>,
}

impl MaskReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadeModel {
    pub dim: usize,
    /// `ordering[r]` is the variable conditioned at rank `r`.
    pub ordering: Vec<usize>,
    pub components: usize,
    pub hidden: Vec<usize>,
    /// Per-layer 0/1 connectivity, same shapes as the weight matrices.
    pub masks: Vec<Array2<f64>>,
    /// `[w0, b0, w1, b1, ..., w_out, b_out]`.
    pub params: Vec<Array2<f64>>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    pub warnings: Vec<String>,
}

impl MadeModel {
    /// Untrained model with natural ordering and identity standardization.
    pub fn init(dim: usize, config: &MadeConfig, seed: u64) -> Result<Self> {
        if dim == 0 || config.components == 0 {
            return Err(Error::InvalidArgument("density model needs d >= 1 and K >= 1".into()));
        }
        let width = (config.hidden_multiplier * dim).max(1);
        let hidden = vec![width; config.hidden_layers];
        let ordering: Vec<usize> = (0..dim).collect();
        let mut rng = rng_from_seed(seed);

        // rank-based degrees: input variable at rank r has degree r + 1
        let mut input_degree = vec![0usize; dim];
        for (rank, &var) in ordering.iter().enumerate() {
            input_degree[var] = rank + 1;
        }
        let span = dim.saturating_sub(1).max(1);
        let mut degrees: Vec<Vec<usize>> = vec![input_degree.clone()];
        for &w in &hidden {
            degrees.push((0..w).map(|k| k % span + 1).collect());
        }
        let k = config.components;
        let out_width = 3 * k * dim;
        // output column (block, var, comp) = block*dim*K + var*K + comp
        let out_degree: Vec<usize> = (0..out_width).map(|c| input_degree[(c % (dim * k)) / k]).collect();

        let mut masks = Vec::new();
        let mut params = Vec::new();
        let mut sizes = vec![dim];
        sizes.extend(&hidden);
        for l in 0..hidden.len() {
            let (fin, fout) = (sizes[l], sizes[l + 1]);
            let mask = Array2::from_shape_fn((fin, fout), |(a, b)| {
                if degrees[l + 1][b] >= degrees[l][a] { 1.0 } else { 0.0 }
            });
            masks.push(mask);
            params.push(uniform(&mut rng, (fin, fout), (1.0 / fin as f64).sqrt()));
            params.push(Array2::zeros((1, fout)));
        }
        let last = *sizes.last().unwrap();
        let last_deg = degrees.last().unwrap();
        masks.push(Array2::from_shape_fn((last, out_width), |(a, b)| {
            if out_degree[b] > last_deg[a] { 1.0 } else { 0.0 }
        }));
        params.push(uniform(&mut rng, (last, out_width), 0.1 / (last as f64).sqrt()));
        let mut out_bias = Array2::zeros((1, out_width));
        // spread initial means so components start distinct
        for var in 0..dim {
            for comp in 0..k {
                let c = dim * k + var * k + comp;
                out_bias[[0, c]] = if k > 1 { -1.0 + 2.0 * comp as f64 / (k - 1) as f64 } else { 0.0 };
            }
        }
        params.push(out_bias);
        Ok(Self {
            dim,
            ordering,
            components: k,
            hidden,
            masks,
            params,
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            seed,
            loss_history: Vec::new(),
            warnings: Vec::new(),
        })
    }

    fn layer_count(&self) -> usize {
        self.masks.len()
    }

    /// Raw network output `n x 3Kd` for standardized input.
    fn network<'g>(&self, vars: &[Var<'g>], masks: &[Var<'g>], z: Var<'g>) -> Var<'g> {
        let layers = self.layer_count();
        let mut h = z;
        for l in 0..layers {
            let w = vars[2 * l].mul(masks[l]);
            h = h.matmul(w).add(vars[2 * l + 1]);
            if l + 1 < layers {
                h = h.relu();
            }
        }
        h
    }

    fn standardize<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        let shift = g.constant(Array2::from_shape_vec((1, self.dim), self.shift.clone()).unwrap());
        let scale = g.constant(Array2::from_shape_vec((1, self.dim), self.scale.clone()).unwrap());
        x.sub(shift).div(scale)
    }

    fn log_scale_sum(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }

    /// Per-sample log-density `n x 1` of raw inputs `x` on a graph.
    pub fn log_density_graph<'g>(&self, vars: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        let (n, d, k) = (x.shape().0, self.dim, self.components);
        let masks: Vec<Var> = self.masks.iter().map(|m| g.constant(m.clone())).collect();
        let z = self.standardize(x);
        let out = self.network(vars, &masks, z);
        let logits = out.slice_cols(0, d * k).reshape(n * d, k);
        let means = out.slice_cols(d * k, 2 * d * k).reshape(n * d, k);
        let log_scales = out
            .slice_cols(2 * d * k, 3 * d * k)
            .reshape(n * d, k)
            .clamp_min(SCALE_FLOOR.ln());
        let target = z.reshape(n * d, 1);
        let diff = target.sub(means).div(log_scales.exp());
        let log_norm = diff.square().scale(-0.5).sub(log_scales).add_scalar(-0.5 * LN_2PI);
        let per_var = logits.log_softmax().add(log_norm).logsumexp().reshape(n, d);
        per_var.sum_cols().add_scalar(-self.log_scale_sum())
    }

    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(())
    }

    /// Log-densities of every row of `x`.
    pub fn log_density_matrix(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        for row in x.outer_iter() {
            self.check_row(row.as_slice().unwrap_or(&row.to_vec()))?;
        }
        let mut out = Vec::with_capacity(x.nrows());
        for start in (0..x.nrows()).step_by(512) {
            let end = (start + 512).min(x.nrows());
            let g = Graph::new();
            let vars = self.bind_frozen(&g);
            let chunk = g.constant(x.slice(ndarray::s![start..end, ..]).to_owned());
            out.extend(self.log_density_graph(&vars, chunk).value().iter().copied());
        }
        Ok(out)
    }

    pub fn log_density(&self, x: &FeatureVector) -> Result<DensityScore> {
        self.check_row(&x.0)?;
        let m = Array2::from_shape_vec((1, self.dim), x.0.clone()).unwrap();
        Ok(DensityScore { log_density: self.log_density_matrix(&m)?[0] })
    }

    pub fn log_density_batch(&self, xs: &[FeatureVector]) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        self.log_density_matrix(&crate::features::to_matrix(xs)?)
    }

    /// Raw network output for one input, `3Kd` values.
    fn raw_output(&self, x: &[f64]) -> Vec<f64> {
        let g = Graph::new();
        let vars = self.bind_frozen(&g);
        let masks: Vec<Var> = self.masks.iter().map(|m| g.constant(m.clone())).collect();
        let row = Array2::from_shape_vec((1, self.dim), x.to_vec()).unwrap();
        let z = self.standardize(g.constant(row));
        self.network(&vars, &masks, z).value().iter().copied().collect()
    }

    /// Mixture parameters `zeta_i` of every conditional at `x`, in input units.
    pub fn conditionals(&self, x: &[f64]) -> Result<Vec<Conditional>> {
        self.check_row(x)?;
        let out = self.raw_output(x);
        let (d, k) = (self.dim, self.components);
        Ok((0..d)
            .map(|i| {
                let logits = &out[i * k..(i + 1) * k];
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let total: f64 = e.iter().sum();
                Conditional {
                    weights: e.iter().map(|v| v / total).collect(),
                    means: (0..k).map(|c| self.shift[i] + self.scale[i] * out[d * k + i * k + c]).collect(),
                    scales: (0..k)
                        .map(|c| self.scale[i] * out[2 * d * k + i * k + c].max(SCALE_FLOOR.ln()).exp())
                        .collect(),
                }
            })
            .collect())
    }

    /// Perturbs each input in turn and confirms that no conditional at the
    /// same or an earlier rank moves, bit for bit.
    pub fn mask_check(&self) -> MaskReport {
        let (d, k) = (self.dim, self.components);
        let mut rank = vec![0usize; d];
        for (r, &v) in self.ordering.iter().enumerate() {
            rank[v] = r;
        }
        let probes: Vec<Vec<f64>> = (0..3)
            .map(|p| (0..d).map(|j| 0.37 * (p as f64 + 1.0) * ((j as f64 * 1.3).sin() + 0.5)).collect())
            .collect();
        let mut violations = Vec::new();
        for base in &probes {
            let reference = self.raw_output(base);
            for j in 0..d {
                let mut moved = base.clone();
                moved[j] += 1.75;
                let out = self.raw_output(&moved);
                for i in 0..d {
                    if rank[j] < rank[i] || violations.contains(&(i, j)) {
                        continue;
                    }
                    let changed = (0..3).any(|block| {
                        (0..k).any(|c| {
                            let col = block * d * k + i * k + c;
                            out[col].to_bits() != reference[col].to_bits()
                        })
                    });
                    if changed {
                        violations.push((i, j));
                    }
                }
            }
        }
        violations.sort_unstable();
        MaskReport { violations }
    }

    /// Overwrites one connectivity entry. Only useful to build negative
    /// controls for [`MadeModel::mask_check`].
    pub fn set_mask_entry(&mut self, layer: usize, from: usize, to: usize, value: f64) {
        self.masks[layer][[from, to]] = value;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Fits a density model by maximum likelihood on the rows of `x`.
pub fn fit_density(x: &Array2<f64>, config: &MadeConfig, seed: u64) -> Result<MadeModel> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("density fit needs at least 2 samples, got {n}")));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut model = MadeModel::init(d, config, seed)?;
    let mean: Array1<f64> = x.mean_axis(Axis(0)).unwrap();
    let std: Array1<f64> = x.std_axis(Axis(0), 0.0);
    let mut degenerate = 0;
    for j in 0..d {
        model.shift[j] = mean[j];
        model.scale[j] = if std[j] >= SCALE_FLOOR {
            std[j]
        } else {
            degenerate += 1;
            1.0
        };
    }
    if degenerate == d {
        let msg = "all training vectors are identical; scale floor bounds the density".to_string();
        log::warn!("{msg}");
        model.warnings.push(msg);
    } else if degenerate > 0 {
        let msg = format!("{degenerate} constant feature(s); scale floor applies");
        log::warn!("{msg}");
        model.warnings.push(msg);
    }

    let mut rng = rng_from_seed(derive_seed(seed, 7));
    let mut opt = Adam::new(config.learning_rate, &model.params).with_clip(10.0);
    for _ in 0..config.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in minibatches(&mut rng, n, config.batch_size) {
            let xb = x.select(Axis(0), &batch);
            let g = Graph::new();
            let vars: Vec<Var> = model.params.iter().map(|p| g.param(p.clone())).collect();
            let nll = model.log_density_graph(&vars, g.constant(xb)).mean().neg();
            g.backward(nll);
            let grads: Vec<_> = vars.iter().map(|v| g.grad(*v)).collect();
            opt.step(&mut model.params, &grads);
            sum += nll.scalar() * batch.len() as f64;
            count += batch.len();
        }
        model.loss_history.push(sum / count as f64);
    }
    Ok(model)
}

pub fn fit_density_vectors(x: &[FeatureVector], config: &MadeConfig, seed: u64) -> Result<MadeModel> {
    fit_density(&crate::features::to_matrix(x)?, config, seed)
}
