//! Density-targeted augmentation: three generators per GAN instance, each
//! steered into one low-density region of the feature space.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::density::MadeModel;
use crate::features::{FeatureRecord, FeatureVector};
use crate::flows::Label;
use crate::nn::{derive_seed, rng_from_seed, Activation, Adam, Mlp};
use crate::{Error, Result};

/// Lower clamp applied before every log in the discriminator objective.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Malicious boundary: near, but outside, the normal bulk.
    MaliciousBoundary,
    /// Malicious outlier: far from everything normal.
    MaliciousOutlier,
    /// Normal boundary: the thin outer shell of the normal class.
    NormalBoundary,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::MaliciousBoundary, Region::MaliciousOutlier, Region::NormalBoundary];

    pub fn label(self) -> Label {
        match self {
            Region::MaliciousBoundary | Region::MaliciousOutlier => Label::Malicious,
            Region::NormalBoundary => Label::Normal,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::MaliciousBoundary => "M_B",
            Region::MaliciousOutlier => "M_O",
            Region::NormalBoundary => "N_B",
        })
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M_B" => Ok(Region::MaliciousBoundary),
            "M_O" => Ok(Region::MaliciousOutlier),
            "N_B" => Ok(Region::NormalBoundary),
            other => Err(Error::InvalidArgument(format!("unknown region {other:?}"))),
        }
    }
}

/// Log-density cutoffs: `gamma` on the malicious model, `omega` on the
/// normal model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionThresholds {
    pub gamma: f64,
    pub omega: [f64; 3],
}

impl RegionThresholds {
    /// Normal-model band `[lower, upper)` of a region.
    pub fn band(&self, region: Region) -> (f64, f64) {
        match region {
            Region::MaliciousBoundary => (self.omega[0], self.omega[1]),
            Region::MaliciousOutlier => (f64::NEG_INFINITY, self.omega[0]),
            Region::NormalBoundary => (self.omega[1], self.omega[2]),
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.omega[0] < self.omega[1] && self.omega[1] < self.omega[2]
    }
}

/// Nearest-rank quantile: the value at 1-based rank `ceil(p * n)`.
pub fn nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

pub fn resolve_thresholds(
    normal_model: &MadeModel,
    malicious_model: &MadeModel,
    normal: &Array2<f64>,
    malicious: &Array2<f64>,
    gamma_pct: f64,
    omega_pcts: [f64; 3],
) -> Result<RegionThresholds> {
    if normal.nrows() == 0 {
        return Err(Error::Empty("normal class"));
    }
    if malicious.nrows() == 0 {
        return Err(Error::Empty("malicious class"));
    }
    let lm = malicious_model.log_density_matrix(malicious)?;
    let ln = normal_model.log_density_matrix(normal)?;
    let t = RegionThresholds {
        gamma: nearest_rank(&lm, gamma_pct)?,
        omega: [
            nearest_rank(&ln, omega_pcts[0])?,
            nearest_rank(&ln, omega_pcts[1])?,
            nearest_rank(&ln, omega_pcts[2])?,
        ],
    };
    if !t.is_ordered() {
        log::warn!("normal-model cutoffs are not strictly increasing: {:?}", t.omega);
    }
    Ok(t)
}

/// Region from precomputed log-densities.
pub fn region_of_scores(normal_log_density: f64, malicious_log_density: f64, t: &RegionThresholds) -> Option<Region> {
    if !(malicious_log_density < t.gamma) {
        return None;
    }
    Region::ALL.into_iter().find(|&r| {
        let (lo, hi) = t.band(r);
        normal_log_density >= lo && normal_log_density < hi
    })
}

pub fn region_of(
    x: &FeatureVector,
    normal_model: &MadeModel,
    malicious_model: &MadeModel,
    t: &RegionThresholds,
) -> Result<Option<Region>> {
    let pn = normal_model.log_density(x)?.log_density;
    let pm = malicious_model.log_density(x)?.log_density;
    Ok(region_of_scores(pn, pm, t))
}

/// Regions of every row of `x`.
pub fn regions_of_matrix(
    x: &Array2<f64>,
    normal_model: &MadeModel,
    malicious_model: &MadeModel,
    t: &RegionThresholds,
) -> Result<Vec<Option<Region>>> {
    let pn = normal_model.log_density_matrix(x)?;
    let pm = malicious_model.log_density_matrix(x)?;
    Ok(pn.iter().zip(&pm).map(|(&a, &b)| region_of_scores(a, b, t)).collect())
}

/// Mean squared cosine similarity over ordered pairs of distinct rows.
pub fn pull_away_graph(f: Var<'_>) -> Var<'_> {
    let g = f.graph();
    let n = f.shape().0;
    if n < 2 {
        return g.constant(Array2::zeros((1, 1)));
    }
    let norms = f.square().sum_cols().clamp_min(1e-24).sqrt();
    let unit = f.div(norms);
    let all = unit.matmul(unit.t()).square().sum();
    let diag = unit.square().sum_cols().square().sum();
    all.sub(diag).scale(1.0 / (n * (n - 1)) as f64)
}

pub fn pull_away(f: &Array2<f64>) -> f64 {
    let g = Graph::new();
    pull_away_graph(g.constant(f.clone())).scalar()
}

fn masked_mean<'g>(values: Var<'g>, mask: &[bool]) -> Var<'g> {
    let g = values.graph();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return g.constant(Array2::zeros((1, 1)));
    }
    let m = Array2::from_shape_fn((mask.len(), 1), |(i, _)| if mask[i] { 1.0 } else { 0.0 });
    values.mul(g.constant(m)).sum().scale(1.0 / count as f64)
}

/// Frozen models the generator objective is evaluated against.
pub struct Critics<'a> {
    pub normal_model: &'a MadeModel,
    pub malicious_model: &'a MadeModel,
    pub thresholds: RegionThresholds,
    pub discriminator: &'a Mlp,
}

/// Individual terms of the generator objective, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTerms {
    pub pull_away: f64,
    pub malicious_excess: f64,
    pub normal_deficit: f64,
    pub normal_excess: f64,
    pub feature_match: f64,
    pub total: f64,
}

fn generator_loss_graph<'g>(
    batch: Var<'g>,
    critics: &Critics<'_>,
    region: Region,
    target_features: Option<&Array2<f64>>,
) -> (Var<'g>, GeneratorTerms) {
    let g = batch.graph();
    let pn_vars = critics.normal_model.bind_frozen(g);
    let pm_vars = critics.malicious_model.bind_frozen(g);
    let lp_n = critics.normal_model.log_density_graph(&pn_vars, batch);
    let lp_m = critics.malicious_model.log_density_graph(&pm_vars, batch);
    let (vn, vm) = (lp_n.value(), lp_m.value());
    let t = &critics.thresholds;
    let (lo, hi) = t.band(region);
    let n = batch.shape().0;
    let too_malicious: Vec<bool> = (0..n).map(|i| vm[[i, 0]] >= t.gamma).collect();
    let too_sparse: Vec<bool> = (0..n).map(|i| vm[[i, 0]] < t.gamma && vn[[i, 0]] < lo).collect();
    let too_dense: Vec<bool> = (0..n).map(|i| vm[[i, 0]] < t.gamma && vn[[i, 0]] >= hi).collect();

    let pt = pull_away_graph(batch);
    let a = masked_mean(lp_m, &too_malicious);
    let b = masked_mean(lp_n, &too_sparse);
    let c = masked_mean(lp_n, &too_dense);
    let kl = pt.neg().add(a).sub(b).add(c);

    let fm = match target_features {
        Some(target) => {
            let d_vars = critics.discriminator.bind_frozen(g);
            let (_, hidden) = critics.discriminator.forward_with_hidden(&d_vars, batch);
            let diff = hidden[0].mean_rows().sub(g.constant(target.clone()));
            diff.square().sum().add_scalar(1e-12).sqrt()
        }
        None => g.constant(Array2::zeros((1, 1))),
    };
    let total = kl.add(fm);
    let terms = GeneratorTerms {
        pull_away: pt.scalar(),
        malicious_excess: a.scalar(),
        normal_deficit: b.scalar(),
        normal_excess: c.scalar(),
        feature_match: fm.scalar(),
        total: total.scalar(),
    };
    (total, terms)
}

/// Mean first-layer discriminator activation over `x`, `1 x h`.
pub fn first_layer_mean(discriminator: &Mlp, x: &Array2<f64>) -> Option<Array2<f64>> {
    if x.nrows() == 0 {
        return None;
    }
    let g = Graph::new();
    let vars = discriminator.bind_frozen(&g);
    let (_, hidden) = discriminator.forward_with_hidden(&vars, g.constant(x.clone()));
    let mean = (*hidden[0].mean_rows().value()).clone();
    Some(mean)
}

/// Generator objective of one region for a fixed batch. `in_region` holds
/// the real samples already inside that region; when it is empty the
/// feature-matching term is zero.
pub fn generator_loss(
    batch: &Array2<f64>,
    critics: &Critics<'_>,
    region: Region,
    in_region: &Array2<f64>,
) -> Result<GeneratorTerms> {
    if batch.nrows() == 0 {
        return Err(Error::Empty("generated batch"));
    }
    let target = first_layer_mean(critics.discriminator, in_region);
    if target.is_none() {
        log::warn!("no real samples in region {region}; feature matching disabled");
    }
    let g = Graph::new();
    Ok(generator_loss_graph(g.constant(batch.clone()), critics, region, target.as_ref()).1)
}

fn log_clamped<'g>(p: Var<'g>) -> Var<'g> {
    p.clamp_min(LOG_EPS).ln().mean()
}

/// Discriminator inputs: real classes and the three generated batches.
pub struct DiscriminatorBatch<'a> {
    pub normal: &'a Array2<f64>,
    pub malicious: &'a Array2<f64>,
    pub malicious_boundary: &'a Array2<f64>,
    pub malicious_outlier: &'a Array2<f64>,
    pub normal_boundary: &'a Array2<f64>,
}

fn discriminator_objective_graph<'g>(g: &'g Graph, vars: &[Var<'g>], disc: &Mlp, b: &DiscriminatorBatch<'_>) -> Var<'g> {
    let out = |x: &Array2<f64>| disc.forward(vars, g.constant(x.clone()));
    let high = |x: &Array2<f64>| log_clamped(out(x));
    let low = |x: &Array2<f64>| log_clamped(out(x).rsub_scalar(1.0));
    high(b.normal)
        .add(low(b.malicious))
        .add(low(b.malicious_boundary))
        .add(low(b.malicious_outlier))
        .add(high(b.normal_boundary))
}

/// Discriminator objective; training maximizes it.
pub fn discriminator_loss(b: &DiscriminatorBatch<'_>, discriminator: &Mlp) -> f64 {
    let g = Graph::new();
    let vars = discriminator.bind_frozen(&g);
    discriminator_objective_graph(&g, &vars, discriminator, b).scalar()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma_pct: f64,
    pub omega_pcts: [f64; 3],
    pub instances: usize,
    /// Samples per region per instance; `None` means a third of the mean
    /// class size.
    pub per_region: Option<usize>,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: 64,
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-4,
            gamma_pct: 0.05,
            omega_pcts: [0.1, 0.2, 0.3],
            instances: 5,
            per_region: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GanHistory {
    pub discriminator: Vec<f64>,
    pub generators: [Vec<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanInstance {
    pub generators: [Mlp; 3],
    pub discriminator: Mlp,
    pub latent_dim: usize,
    pub seed: u64,
    pub thresholds: RegionThresholds,
    pub history: GanHistory,
    pub warnings: Vec<String>,
}

impl GanInstance {
    pub fn init(dim: usize, cfg: &GanConfig, thresholds: RegionThresholds, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut generator = || {
            Mlp::new(
                &[cfg.latent_dim, cfg.hidden, cfg.hidden, dim],
                Activation::LeakyRelu,
                Activation::Identity,
                &mut rng,
            )
        };
        let generators = [generator(), generator(), generator()];
        let discriminator = Mlp::new(&[dim, cfg.hidden, cfg.hidden, 1], Activation::LeakyRelu, Activation::Sigmoid, &mut rng);
        Self {
            generators,
            discriminator,
            latent_dim: cfg.latent_dim,
            seed,
            thresholds,
            history: GanHistory::default(),
            warnings: Vec::new(),
        }
    }

    pub fn generate(&self, region: Region, count: usize, rng: &mut impl Rng) -> Array2<f64> {
        let z = latent(rng, count, self.latent_dim);
        if count == 0 {
            return Array2::zeros((0, self.discriminator.input_dim()));
        }
        self.generators[region.index()].eval(&z)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn latent(rng: &mut impl Rng, n: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, dim), || rng.sample(StandardNormal))
}

fn rows(x: &Array2<f64>, rng: &mut impl Rng, n: usize) -> Array2<f64> {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..x.nrows())).collect();
    x.select(Axis(0), &idx)
}

/// Trains one GAN instance on the corrected classes.
pub fn train_gan(
    normal: &Array2<f64>,
    malicious: &Array2<f64>,
    normal_model: &MadeModel,
    malicious_model: &MadeModel,
    thresholds: RegionThresholds,
    cfg: &GanConfig,
    seed: u64,
) -> Result<GanInstance> {
    if normal.nrows() == 0 {
        return Err(Error::Empty("normal class"));
    }
    if malicious.nrows() == 0 {
        return Err(Error::Empty("malicious class"));
    }
    let dim = normal.ncols();
    if malicious.ncols() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: malicious.ncols() });
    }
    let mut gan = GanInstance::init(dim, cfg, thresholds, seed);
    let mut rng = rng_from_seed(derive_seed(seed, 7));

    // real samples already in each region anchor feature matching
    let pool = concatenate(Axis(0), &[normal.view(), malicious.view()]).expect("same width");
    let regions = regions_of_matrix(&pool, normal_model, malicious_model, &thresholds)?;
    let in_region: Vec<Array2<f64>> = Region::ALL
        .iter()
        .map(|&r| {
            let idx: Vec<usize> = (0..pool.nrows()).filter(|&i| regions[i] == Some(r)).collect();
            pool.select(Axis(0), &idx)
        })
        .collect();
    if !thresholds.is_ordered() {
        gan.warnings.push(format!("normal-model cutoffs not strictly increasing: {:?}", thresholds.omega));
    }
    if regions.iter().all(|r| r.is_none()) {
        gan.warnings
            .push("no real sample falls below the malicious cutoff; region penalties may be vacuous".into());
    }
    for (r, x) in Region::ALL.iter().zip(&in_region) {
        if x.nrows() == 0 {
            gan.warnings.push(format!("no real samples in region {r}; feature matching disabled"));
        }
    }
    for w in &gan.warnings {
        log::warn!("gan seed {seed}: {w}");
    }

    let mut adam_d = Adam::new(cfg.learning_rate, &gan.discriminator.params).with_clip(10.0);
    let mut adam_g: Vec<Adam> = gan
        .generators
        .iter()
        .map(|g| Adam::new(cfg.learning_rate, &g.params).with_clip(10.0))
        .collect();

    let bs = cfg.batch_size.max(1);
    let record = |gan: &mut GanInstance, rng: &mut rand_chacha::ChaCha8Rng| {
        let fakes: Vec<Array2<f64>> = Region::ALL.iter().map(|&r| gan.generate(r, bs, rng)).collect();
        let (nb, mb) = (rows(normal, rng, bs), rows(malicious, rng, bs));
        let batch = DiscriminatorBatch {
            normal: &nb,
            malicious: &mb,
            malicious_boundary: &fakes[0],
            malicious_outlier: &fakes[1],
            normal_boundary: &fakes[2],
        };
        let d = discriminator_loss(&batch, &gan.discriminator);
        gan.history.discriminator.push(d);
        for (k, &r) in Region::ALL.iter().enumerate() {
            let critics = Critics {
                normal_model,
                malicious_model,
                thresholds,
                discriminator: &gan.discriminator,
            };
            let target = first_layer_mean(&gan.discriminator, &in_region[k]);
            let g = Graph::new();
            let (_, terms) = generator_loss_graph(g.constant(fakes[k].clone()), &critics, r, target.as_ref());
            gan.history.generators[k].push(terms.total);
        }
    };
    record(&mut gan, &mut rng);

    for _ in 0..cfg.steps {
        // discriminator ascent
        let fakes: Vec<Array2<f64>> = Region::ALL.iter().map(|&r| gan.generate(r, bs, &mut rng)).collect();
        let (nb, mb) = (rows(normal, &mut rng, bs), rows(malicious, &mut rng, bs));
        let batch = DiscriminatorBatch {
            normal: &nb,
            malicious: &mb,
            malicious_boundary: &fakes[0],
            malicious_outlier: &fakes[1],
            normal_boundary: &fakes[2],
        };
        let g = Graph::new();
        let vars = gan.discriminator.bind(&g);
        let objective = discriminator_objective_graph(&g, &vars, &gan.discriminator, &batch);
        g.backward(objective.neg());
        let grads: Vec<_> = vars.iter().map(|v| g.grad(*v)).collect();
        adam_d.step(&mut gan.discriminator.params, &grads);
        gan.history.discriminator.push(objective.scalar());

        // generator descent
        for (k, &r) in Region::ALL.iter().enumerate() {
            let target = first_layer_mean(&gan.discriminator, &in_region[k]);
            let critics = Critics {
                normal_model,
                malicious_model,
                thresholds,
                discriminator: &gan.discriminator,
            };
            let z = latent(&mut rng, bs, cfg.latent_dim);
            let gen = &gan.generators[k];
            let g = Graph::new();
            let vars = gen.bind(&g);
            let out = gen.forward(&vars, g.constant(z));
            let (loss, terms) = generator_loss_graph(out, &critics, r, target.as_ref());
            g.backward(loss);
            let grads: Vec<_> = vars.iter().map(|v| g.grad(*v)).collect();
            adam_g[k].step(&mut gan.generators[k].params, &grads);
            gan.history.generators[k].push(terms.total);
        }
    }
    Ok(gan)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBatch {
    pub vectors: Vec<FeatureVector>,
    pub labels: Vec<Label>,
    pub regions: Vec<Region>,
}

impl SyntheticBatch {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Feature records with ids `first_id, first_id + 1, ...`.
    pub fn records(&self, first_id: u64) -> Vec<FeatureRecord> {
        self.vectors
            .iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (v, &label))| FeatureRecord {
                id: first_id + i as u64,
                label,
                features: v.clone(),
            })
            .collect()
    }
}

pub fn default_per_region(normal: usize, malicious: usize) -> usize {
    (normal + malicious) / 2 / 3
}

/// Trains `cfg.instances` independent GANs on derived seeds and draws the
/// same number of samples per region from each.
pub fn synthesize(
    normal: &Array2<f64>,
    malicious: &Array2<f64>,
    normal_model: &MadeModel,
    malicious_model: &MadeModel,
    thresholds: RegionThresholds,
    cfg: &GanConfig,
    seed: u64,
) -> Result<(SyntheticBatch, Vec<GanInstance>)> {
    if cfg.instances == 0 {
        return Err(Error::InvalidArgument("at least one GAN instance is required".into()));
    }
    let m = cfg
        .per_region
        .unwrap_or_else(|| default_per_region(normal.nrows(), malicious.nrows()));
    let mut batch = SyntheticBatch::default();
    let mut instances = Vec::with_capacity(cfg.instances);
    if m == 0 {
        return Ok((batch, instances));
    }
    for i in 0..cfg.instances {
        let inst_seed = derive_seed(seed, 100 + i as u64);
        let gan = train_gan(normal, malicious, normal_model, malicious_model, thresholds, cfg, inst_seed)?;
        let mut rng = rng_from_seed(derive_seed(inst_seed, 9));
        for r in Region::ALL {
            for row in gan.generate(r, m, &mut rng).outer_iter() {
                batch.vectors.push(FeatureVector(row.to_vec()));
                batch.labels.push(r.label());
                batch.regions.push(r);
            }
        }
        log::info!("gan instance {i} trained ({} steps)", cfg.steps);
        instances.push(gan);
    }
    Ok((batch, instances))
}

/// Feature-store lines with a trailing `source_region` column.
pub fn save_synthetic_batch(batch: &SyntheticBatch, first_id: u64, path: &Path, header: &[String]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for h in header {
        writeln!(w, "# {h}")?;
    }
    for (rec, region) in batch.records(first_id).iter().zip(&batch.regions) {
        let values: Vec<String> = rec.features.0.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{},{},{}", rec.id, rec.label, values.join(" "), region)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_synthetic_batch(path: &Path) -> Result<SyntheticBatch> {
    let records = crate::features::load_feature_store(path)?;
    let text = std::fs::read_to_string(path)?;
    let mut regions = Vec::with_capacity(records.len());
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let field = line
            .rsplit(',')
            .next()
            .filter(|_| line.split(',').count() == 4)
            .ok_or_else(|| Error::parse(path, no + 1, "missing source_region column"))?;
        regions.push(field.parse()?);
    }
    Ok(SyntheticBatch {
        vectors: records.iter().map(|r| r.features.clone()).collect(),
        labels: records.iter().map(|r| r.label).collect(),
        regions,
    })
}
