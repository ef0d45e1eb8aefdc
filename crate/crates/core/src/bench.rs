//! Desk-scale evaluation harness: template corpus, label noise, metrics and
//! experiment grids.

use std::collections::HashMap;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::features::{FeatureVector, Prediction};
use crate::flows::{Flow, FlowKey, Label, Protocol};
use crate::nn::{derive_seed, rng_from_seed};
use crate::config::PipelineConfig;
use crate::pipeline;
use crate::relabel::{CorrectionReport, LabeledSample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub normal_templates: usize,
    /// Per-position length jitter of normal flows, in bytes.
    pub normal_jitter: u32,
    pub malicious_templates: usize,
    pub malicious_jitter: u32,
    /// Malicious templates that only appear in the test split.
    pub drift_templates: usize,
    /// Share of test malicious flows drawn from drift templates.
    pub drift_fraction: f64,
    /// Drift templates imitate a normal template, shifting each position by
    /// between half and all of this many bytes. `0` draws independent
    /// prototypes instead.
    pub drift_offset: u32,
    pub drift_jitter: u32,
    pub max_packets: usize,
    pub max_len: u32,
    pub train_normal: usize,
    pub train_malicious: usize,
    pub test_normal: usize,
    pub test_malicious: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            normal_templates: 3,
            normal_jitter: 8,
            malicious_templates: 12,
            malicious_jitter: 120,
            drift_templates: 4,
            drift_fraction: 0.5,
            drift_offset: 16,
            drift_jitter: 8,
            max_packets: 50,
            max_len: 1500,
            train_normal: 500,
            train_malicious: 500,
            test_normal: 1000,
            test_malicious: 100,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("corpus: {what}")));
        if self.normal_templates == 0 || self.malicious_templates == 0 {
            return bad("template counts must be at least 1");
        }
        if self.drift_templates == 0 && self.drift_fraction > 0.0 {
            return bad("drift_fraction > 0 needs at least one drift template");
        }
        if !(0.0..=1.0).contains(&self.drift_fraction) {
            return bad("drift_fraction must lie in [0, 1]");
        }
        if self.max_packets < 2 || self.max_len < 2 {
            return bad("max_packets and max_len must be at least 2");
        }
        if self.train_normal + self.train_malicious == 0 {
            return bad("empty training split");
        }
        Ok(())
    }
}

/// Length-sequence prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: usize,
    pub label: Label,
    pub drift: bool,
    pub base: Vec<u32>,
    pub jitter: u32,
    /// Maximum deviation of the packet count from `base.len()`.
    pub count_jitter: usize,
}

impl Template {
    fn sample(&self, rng: &mut impl Rng, max_packets: usize, max_len: u32) -> Vec<u32> {
        let lo = self.base.len().saturating_sub(self.count_jitter).max(2);
        let hi = (self.base.len() + self.count_jitter).min(max_packets).max(lo);
        let count = rng.random_range(lo..=hi);
        let j = self.jitter as i64;
        (0..count)
            .map(|i| {
                let b = self.base[i % self.base.len()] as i64;
                let v = b + if j > 0 { rng.random_range(-j..=j) } else { 0 };
                v.clamp(1, max_len as i64) as u32
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub id: u64,
    pub flow: Flow,
    pub label: Label,
    pub template: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub templates: Vec<Template>,
    pub train: Vec<BenchSample>,
    pub test: Vec<BenchSample>,
}

fn make_templates(cfg: &CorpusConfig, rng: &mut impl Rng) -> Vec<Template> {
    let mut out = Vec::new();
    let n = cfg.max_packets;
    let mut push = |label: Label, drift: bool, jitter: u32, rng: &mut dyn rand::RngCore| {
        let (count, count_jitter) = match label {
            Label::Normal => (rng.random_range((n * 3 / 5).max(2)..=n), 1),
            Label::Malicious => (rng.random_range((n * 3 / 10).max(2)..=n), (n / 5).max(1)),
        };
        let base = (0..count).map(|_| rng.random_range(40..=cfg.max_len.max(41))).collect();
        out.push(Template {
            id: out.len(),
            label,
            drift,
            base,
            jitter,
            count_jitter,
        });
    };
    for _ in 0..cfg.normal_templates {
        push(Label::Normal, false, cfg.normal_jitter, rng);
    }
    for _ in 0..cfg.malicious_templates {
        push(Label::Malicious, false, cfg.malicious_jitter, rng);
    }
    if cfg.drift_offset == 0 {
        for _ in 0..cfg.drift_templates {
            push(Label::Malicious, true, cfg.drift_jitter, rng);
        }
        return out;
    }
    let off = cfg.drift_offset as i64;
    for k in 0..cfg.drift_templates {
        let parent = &out[k % cfg.normal_templates];
        let base = parent
            .base
            .iter()
            .map(|&b| {
                let shift = rng.random_range((off + 1) / 2..=off) * if rng.random_bool(0.5) { 1 } else { -1 };
                (b as i64 + shift).clamp(1, cfg.max_len as i64) as u32
            })
            .collect();
        let count_jitter = parent.count_jitter;
        out.push(Template {
            id: out.len(),
            label: Label::Malicious,
            drift: true,
            base,
            jitter: cfg.drift_jitter,
            count_jitter,
        });
    }
    out
}

fn flow_for(id: u64, lengths: Vec<u32>, first_ts: f64) -> Flow {
    let b = id.to_be_bytes();
    Flow {
        key: FlowKey {
            src_ip: IpAddr::V4(Ipv4Addr::new(10, b[5], b[6], b[7])),
            dst_ip: IpAddr::V4(Ipv4Addr::new(192, 168, b[6], b[7])),
            src_port: 1024 + (id % 60000) as u16,
            dst_port: 443,
            protocol: Protocol::Tcp,
        },
        first_ts,
        lengths,
    }
}

/// Generates train and test splits. Training flows precede every test flow
/// in time; drift templates appear only in the test split.
pub fn synth_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let templates = make_templates(cfg, &mut rng_from_seed(derive_seed(seed, 1)));
    let normal: Vec<&Template> = templates.iter().filter(|t| t.label == Label::Normal).collect();
    let known: Vec<&Template> = templates.iter().filter(|t| t.label == Label::Malicious && !t.drift).collect();
    let drift: Vec<&Template> = templates.iter().filter(|t| t.drift).collect();
    let mut rng = rng_from_seed(derive_seed(seed, 2));
    let mut next_id = 0u64;

    let mut split = |plan: Vec<(Label, bool)>, t0: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<BenchSample> {
        let step = 1000.0 / plan.len().max(1) as f64;
        plan.into_iter()
            .enumerate()
            .map(|(i, (label, drifted))| {
                let pool = match (label, drifted) {
                    (Label::Normal, _) => &normal,
                    (Label::Malicious, false) => &known,
                    (Label::Malicious, true) => &drift,
                };
                let t = pool.choose(rng).expect("non-empty template pool");
                let id = next_id;
                next_id += 1;
                BenchSample {
                    id,
                    flow: flow_for(id, t.sample(rng, cfg.max_packets, cfg.max_len), t0 + i as f64 * step),
                    label,
                    template: t.id,
                }
            })
            .collect()
    };

    let mut train_plan: Vec<(Label, bool)> = vec![(Label::Normal, false); cfg.train_normal];
    train_plan.extend(vec![(Label::Malicious, false); cfg.train_malicious]);
    train_plan.shuffle(&mut rng);
    let drifted = (cfg.drift_fraction * cfg.test_malicious as f64).round() as usize;
    let mut test_plan: Vec<(Label, bool)> = vec![(Label::Normal, false); cfg.test_normal];
    test_plan.extend((0..cfg.test_malicious).map(|i| (Label::Malicious, i < drifted)));
    test_plan.shuffle(&mut rng);

    let train = split(train_plan, 0.0, &mut rng);
    let test = split(test_plan, 1000.0, &mut rng);
    Ok(Corpus { templates, train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Symmetric,
    Template,
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::Symmetric => "symmetric",
            NoiseMode::Template => "template",
        })
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "symmetric" => Ok(NoiseMode::Symmetric),
            "template" => Ok(NoiseMode::Template),
            other => Err(Error::InvalidArgument(format!("unknown noise mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub ratio: f64,
    /// Template ids flipped in template mode.
    pub withheld: Vec<usize>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { mode: NoiseMode::Symmetric, ratio: 0.0, withheld: Vec::new() }
    }
}

fn floor_count(ratio: f64, count: usize) -> usize {
    ((ratio * count as f64) + 1e-9).floor() as usize
}

/// Returns the noisy labels. Symmetric mode flips exactly
/// `floor(ratio * class count)` labels in each class; template mode flips
/// the samples of the withheld templates in order until
/// `floor(ratio * len)` flips are spent.
pub fn inject_noise(truth: &[Label], templates: &[usize], spec: &NoiseSpec, seed: u64) -> Result<Vec<Label>> {
    if !(0.0..0.5).contains(&spec.ratio) {
        return Err(Error::NoiseRatio(spec.ratio));
    }
    if templates.len() != truth.len() {
        return Err(Error::IdMismatch(format!("{} templates for {} labels", templates.len(), truth.len())));
    }
    let mut noisy = truth.to_vec();
    match spec.mode {
        NoiseMode::Symmetric => {
            let mut rng = rng_from_seed(derive_seed(seed, 11));
            for class in [Label::Normal, Label::Malicious] {
                let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
                let k = floor_count(spec.ratio, idx.len());
                for &i in idx.choose_multiple(&mut rng, k) {
                    noisy[i] = class.flipped();
                }
            }
        }
        NoiseMode::Template => {
            let mut budget = floor_count(spec.ratio, truth.len());
            for &t in &spec.withheld {
                for i in 0..truth.len() {
                    if budget == 0 {
                        break;
                    }
                    if templates[i] == t {
                        noisy[i] = truth[i].flipped();
                        budget -= 1;
                    }
                }
            }
        }
    }
    Ok(noisy)
}

/// Flips the labels at `idx`; applying it twice is the identity.
pub fn flip_at(labels: &mut [Label], idx: &[usize]) {
    for &i in idx {
        labels[i] = labels[i].flipped();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { tp, fp, fn_, tn, precision, recall, f1 }
    }
}

pub fn metrics_from_labels(predicted: &[Label], truth: &[Label]) -> MetricsReport {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (p, t) in predicted.iter().zip(truth) {
        match (p.is_malicious(), t.is_malicious()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    MetricsReport::from_counts(tp, fp, fn_, tn)
}

/// Confusion counts of `predictions` against `truth`, matched by id.
pub fn compute_metrics(predictions: &[Prediction], truth: &[(u64, Label)]) -> Result<MetricsReport> {
    if predictions.len() != truth.len() {
        return Err(Error::IdMismatch(format!(
            "{} predictions for {} labeled samples",
            predictions.len(),
            truth.len()
        )));
    }
    let by_id: HashMap<u64, Label> = truth.iter().copied().collect();
    if by_id.len() != truth.len() {
        return Err(Error::IdMismatch("duplicate ids in ground truth".into()));
    }
    let mut pred = Vec::with_capacity(predictions.len());
    let mut gold = Vec::with_capacity(predictions.len());
    for p in predictions {
        let t = by_id
            .get(&p.id)
            .ok_or_else(|| Error::IdMismatch(format!("prediction for unknown sample {}", p.id)))?;
        pred.push(p.label);
        gold.push(*t);
    }
    Ok(metrics_from_labels(&pred, &gold))
}

/// Feature-space corpus: normal samples from one tight Gaussian cluster,
/// malicious samples scattered uniformly over a wide box.
pub fn cluster_scatter(per_class: usize, dim: usize, noise: f64, seed: u64) -> Result<Vec<LabeledSample>> {
    let truth: Vec<Label> = (0..2 * per_class)
        .map(|i| if i < per_class { Label::Normal } else { Label::Malicious })
        .collect();
    let noisy = inject_noise(
        &truth,
        &vec![0; truth.len()],
        &NoiseSpec { mode: NoiseMode::Symmetric, ratio: noise, withheld: Vec::new() },
        seed,
    )?;
    let mut rng = rng_from_seed(derive_seed(seed, 21));
    let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    Ok(truth
        .iter()
        .zip(noisy)
        .enumerate()
        .map(|(i, (&t, n))| {
            let v = (0..dim)
                .map(|j| match t {
                    Label::Normal => {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        center[j] + 0.1 * z
                    }
                    Label::Malicious => rng.random_range(-2.0..2.0),
                })
                .collect();
            LabeledSample {
                id: i as u64,
                features: FeatureVector(v),
                noisy_label: n,
                true_label: Some(t),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    /// Training samples per class.
    pub sizes: Vec<usize>,
    pub ratios: Vec<f64>,
    pub modes: Vec<NoiseMode>,
    pub seeds: Vec<u64>,
    pub plain_control: bool,
    pub augment: bool,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            sizes: vec![500],
            ratios: vec![0.2, 0.3, 0.4, 0.45],
            modes: vec![NoiseMode::Symmetric],
            seeds: vec![1, 2, 3, 4, 5],
            plain_control: true,
            augment: true,
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.ratios.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument("experiment grid has an empty axis".into()));
        }
        if let Some(&r) = self.ratios.iter().find(|r| !(0.0..0.5).contains(*r)) {
            return Err(Error::NoiseRatio(r));
        }
        if self.sizes.contains(&0) {
            return Err(Error::InvalidArgument("training size 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub size: usize,
    pub ratio: f64,
    pub mode: NoiseMode,
    pub seed: u64,
}

impl fmt::Display for CellParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "size={} ratio={:.2} mode={} seed={}", self.size, self.ratio, self.mode, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub params: CellParams,
    pub pipeline: MetricsReport,
    pub control: Option<MetricsReport>,
    pub correction: Option<CorrectionReport>,
    pub synthetic: usize,
}

/// Default withheld templates for template-mode noise: the first normal and
/// the first malicious training template.
pub fn default_withheld(corpus: &Corpus) -> Vec<usize> {
    let first = |label| corpus.templates.iter().find(|t| t.label == label && !t.drift).map(|t| t.id);
    [first(Label::Malicious), first(Label::Normal)].into_iter().flatten().collect()
}

/// Runs every cell of the grid. The autoencoder is label-free, so it is
/// trained once per (seed, size) and shared by that corpus's cells.
pub fn run_experiment(
    grid: &ExperimentGrid,
    cfg: &PipelineConfig,
    mut on_cell: impl FnMut(&CellResult),
) -> Result<Vec<CellResult>> {
    grid.validate()?;
    let mut results = Vec::new();
    for &size in &grid.sizes {
        for &seed in &grid.seeds {
            let corpus_cfg = CorpusConfig { train_normal: size, train_malicious: size, ..cfg.corpus.clone() };
            let cell_err = |ratio: f64, mode: NoiseMode, e: Error| Error::Cell {
                cell: CellParams { size, ratio, mode, seed }.to_string(),
                source: Box::new(e),
            };
            let first = (grid.ratios[0], grid.modes[0]);
            let corpus = synth_corpus(&corpus_cfg, seed).map_err(|e| cell_err(first.0, first.1, e))?;
            let feats = pipeline::featurize(&corpus, cfg, seed).map_err(|e| cell_err(first.0, first.1, e))?;
            for &mode in &grid.modes {
                for &ratio in &grid.ratios {
                    let params = CellParams { size, ratio, mode, seed };
                    let spec = NoiseSpec {
                        mode,
                        ratio,
                        withheld: if cfg.noise.withheld.is_empty() { default_withheld(&corpus) } else { cfg.noise.withheld.clone() },
                    };
                    let result = pipeline::run_cell(&corpus, &feats, &spec, cfg, grid, seed)
                        .map(|(pipeline, control, correction, synthetic)| CellResult {
                            params: params.clone(),
                            pipeline,
                            control,
                            correction,
                            synthetic,
                        })
                        .map_err(|e| cell_err(ratio, mode, e))?;
                    log::info!("cell {params}: f1 {:.4}", result.pipeline.f1);
                    on_cell(&result);
                    results.push(result);
                }
            }
        }
    }
    Ok(results)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const TABLE_HEADER: &str = "size,ratio,mode,seed,precision,recall,f1,control_precision,control_recall,control_f1,remaining_noise_ratio,corrected_noise_proportion,synthetic";

/// Comma-separated result table: one row per cell, then one aggregate row
/// (`mean±std` across seeds) per (size, ratio, mode).
pub fn format_table(results: &[CellResult]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for r in results {
        let p = &r.params;
        out.push_str(&format!(
            "{},{:.2},{},{},{:.4},{:.4},{:.4},{},{},{},{},{},{}\n",
            p.size,
            p.ratio,
            p.mode,
            p.seed,
            r.pipeline.precision,
            r.pipeline.recall,
            r.pipeline.f1,
            opt(r.control.map(|c| c.precision)),
            opt(r.control.map(|c| c.recall)),
            opt(r.control.map(|c| c.f1)),
            opt(r.correction.map(|c| c.remaining_noise_ratio)),
            opt(r.correction.map(|c| c.corrected_noise_proportion)),
            r.synthetic,
        ));
    }
    let mut groups: Vec<(usize, u64, NoiseMode)> = Vec::new();
    for r in results {
        let key = (r.params.size, r.params.ratio.to_bits(), r.params.mode);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for (size, ratio_bits, mode) in groups {
        let cells: Vec<&CellResult> = results
            .iter()
            .filter(|r| r.params.size == size && r.params.ratio.to_bits() == ratio_bits && r.params.mode == mode)
            .collect();
        let agg = |f: &dyn Fn(&CellResult) -> Option<f64>| {
            let v: Vec<f64> = cells.iter().filter_map(|c| f(c)).collect();
            if v.is_empty() {
                return "-".to_string();
            }
            let (m, s) = mean_std(&v);
            format!("{m:.4}±{s:.4}")
        };
        out.push_str(&format!(
            "{},{:.2},{},mean±std,{},{},{},{},{},{},{},{},{}\n",
            size,
            f64::from_bits(ratio_bits),
            mode,
            agg(&|c| Some(c.pipeline.precision)),
            agg(&|c| Some(c.pipeline.recall)),
            agg(&|c| Some(c.pipeline.f1)),
            agg(&|c| c.control.map(|m| m.precision)),
            agg(&|c| c.control.map(|m| m.recall)),
            agg(&|c| c.control.map(|m| m.f1)),
            agg(&|c| c.correction.map(|m| m.remaining_noise_ratio)),
            agg(&|c| c.correction.map(|m| m.corrected_noise_proportion)),
            agg(&|c| Some(c.synthetic as f64)),
        ));
    }
    out
}
