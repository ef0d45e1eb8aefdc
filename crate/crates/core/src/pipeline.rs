//! Stage composition over in-memory data, provenance records and
//! checkpoint envelopes.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{resolve_thresholds, synthesize, GanInstance, RegionThresholds, SyntheticBatch};
use crate::autoencoder::{train_ae, AeModel};
use crate::bench::{inject_noise, metrics_from_labels, BenchSample, Corpus, ExperimentGrid, MetricsReport, NoiseSpec};
use crate::density::fit_density;
use crate::detector::{label_for_score, train_detector, DetectorModel};
use crate::features::{to_matrix, FeatureVector};
use crate::flows::{tokenize, Flow, Label, LengthSequence};
use crate::nn::derive_seed;
use crate::relabel::{correct_labels, correction_report, CorrectionReport, CorrectionResult, LabeledSample};
use crate::{Error, Result};

pub use crate::config::PipelineConfig;

pub const TAG_AUTOENCODER: u64 = 0xAE;
pub const TAG_CORRECTION: u64 = 0xC0;
pub const TAG_NORMAL_DENSITY: u64 = 0xD1;
pub const TAG_MALICIOUS_DENSITY: u64 = 0xD2;
pub const TAG_GAN: u64 = 0x6A;
pub const TAG_DETECTOR: u64 = 0xDE;
pub const TAG_NOISE: u64 = 0x40;

pub fn sequences(flows: &[Flow], cfg: &PipelineConfig) -> Vec<LengthSequence> {
    flows.iter().map(|f| tokenize(f, cfg.flows.n, cfg.flows.max_len)).collect()
}

/// Autoencoder trained on the training flows, with features of both splits.
#[derive(Debug, Clone)]
pub struct Features {
    pub autoencoder: AeModel,
    pub train: Vec<FeatureVector>,
    pub test: Vec<FeatureVector>,
}

pub fn featurize(corpus: &Corpus, cfg: &PipelineConfig, seed: u64) -> Result<Features> {
    let flows = |s: &[BenchSample]| s.iter().map(|b| b.flow.clone()).collect::<Vec<_>>();
    let train_seqs = sequences(&flows(&corpus.train), cfg);
    let test_seqs = sequences(&flows(&corpus.test), cfg);
    let autoencoder = train_ae(&train_seqs, &cfg.ae_config(), derive_seed(seed, TAG_AUTOENCODER))?;
    Ok(Features {
        train: autoencoder.encode_batch(&train_seqs)?,
        test: autoencoder.encode_batch(&test_seqs)?,
        autoencoder,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub correct: bool,
    pub augment: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { correct: true, augment: true }
    }
}

#[derive(Debug, Clone)]
pub struct Augmentation {
    pub batch: SyntheticBatch,
    pub instances: Vec<GanInstance>,
    pub thresholds: RegionThresholds,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub correction: Option<CorrectionResult>,
    pub report: Option<CorrectionReport>,
    /// Labels the detector saw for the original samples.
    pub labels: Vec<Label>,
    pub augmentation: Option<Augmentation>,
    pub detector: DetectorModel,
}

/// Density models on each class, thresholds and synthetic samples.
pub fn augment_features(x: &Array2<f64>, labels: &[Label], cfg: &PipelineConfig, seed: u64) -> Result<Augmentation> {
    let rows = |class: Label| -> Vec<usize> { (0..labels.len()).filter(|&i| labels[i] == class).collect() };
    let normal = x.select(Axis(0), &rows(Label::Normal));
    let malicious = x.select(Axis(0), &rows(Label::Malicious));
    if normal.nrows() < 2 || malicious.nrows() < 2 {
        return Err(Error::SingleClass);
    }
    let pn = fit_density(&normal, &cfg.density, derive_seed(seed, TAG_NORMAL_DENSITY))?;
    let pm = fit_density(&malicious, &cfg.density, derive_seed(seed, TAG_MALICIOUS_DENSITY))?;
    let gan = cfg.gan_config();
    let thresholds = resolve_thresholds(&pn, &pm, &normal, &malicious, gan.gamma_pct, gan.omega_pcts)?;
    let (batch, instances) = synthesize(&normal, &malicious, &pn, &pm, thresholds, &gan, derive_seed(seed, TAG_GAN))?;
    Ok(Augmentation { batch, instances, thresholds })
}

/// Correction, augmentation and detector training on feature vectors.
/// The detector's forget rate falls back to the measured remaining noise
/// when every sample carries a true label.
pub fn train_pipeline(samples: &[LabeledSample], cfg: &PipelineConfig, opts: RunOptions, seed: u64) -> Result<Outcome> {
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let (correction, report, labels) = if opts.correct {
        let result = correct_labels(samples, &cfg.correction_config(), &cfg.density, derive_seed(seed, TAG_CORRECTION))?;
        let report = if samples.iter().all(|s| s.true_label.is_some()) {
            Some(correction_report(&result, samples)?)
        } else {
            None
        };
        let labels = result.entries.iter().map(|e| e.corrected_label).collect();
        (Some(result), report, labels)
    } else {
        (None, None, samples.iter().map(|s| s.noisy_label).collect::<Vec<_>>())
    };
    let vectors: Vec<FeatureVector> = samples.iter().map(|s| s.features.clone()).collect();
    let x = to_matrix(&vectors)?;

    let augmentation = if opts.augment {
        match augment_features(&x, &labels, cfg, seed) {
            Ok(a) => Some(a),
            Err(Error::SingleClass) => {
                log::warn!("augmentation skipped: a corrected class has fewer than two samples");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let (train_x, train_y) = match &augmentation {
        Some(a) if !a.batch.is_empty() => {
            let syn = to_matrix(&a.batch.vectors)?;
            let x_all = ndarray::concatenate(Axis(0), &[x.view(), syn.view()]).map_err(|_| Error::DimensionMismatch {
                expected: x.ncols(),
                got: syn.ncols(),
            })?;
            let mut y = labels.clone();
            y.extend(&a.batch.labels);
            (x_all, y)
        }
        _ => (x, labels.clone()),
    };
    let estimate = report.map(|r| r.remaining_noise_ratio);
    let detector = train_detector(&train_x, &train_y, &cfg.detector_config(estimate), derive_seed(seed, TAG_DETECTOR))?;
    Ok(Outcome { correction, report, labels, augmentation, detector })
}

/// Plain control: the same detector trained directly on the noisy labels
/// without sample selection.
pub fn train_control(samples: &[LabeledSample], cfg: &PipelineConfig, seed: u64) -> Result<DetectorModel> {
    let vectors: Vec<FeatureVector> = samples.iter().map(|s| s.features.clone()).collect();
    let x = to_matrix(&vectors)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.noisy_label).collect();
    let mut dcfg = cfg.detector_config(None);
    dcfg.schedule.rate = 0.0;
    train_detector(&x, &labels, &dcfg, derive_seed(seed, TAG_DETECTOR))
}

pub fn evaluate(detector: &DetectorModel, test: &[FeatureVector], truth: &[Label]) -> Result<MetricsReport> {
    let scores = detector.scores(&to_matrix(test)?)?;
    let predicted: Vec<Label> = scores.into_iter().map(label_for_score).collect();
    Ok(metrics_from_labels(&predicted, truth))
}

pub fn labeled_samples(corpus: &Corpus, feats: &Features, noisy: &[Label]) -> Vec<LabeledSample> {
    corpus
        .train
        .iter()
        .zip(&feats.train)
        .zip(noisy)
        .map(|((s, f), &n)| LabeledSample {
            id: s.id,
            features: f.clone(),
            noisy_label: n,
            true_label: Some(s.label),
        })
        .collect()
}

/// One grid cell on precomputed features: returns pipeline metrics, control
/// metrics, correction report and synthetic sample count.
pub fn run_cell(
    corpus: &Corpus,
    feats: &Features,
    spec: &NoiseSpec,
    cfg: &PipelineConfig,
    grid: &ExperimentGrid,
    seed: u64,
) -> Result<(MetricsReport, Option<MetricsReport>, Option<CorrectionReport>, usize)> {
    let truth: Vec<Label> = corpus.train.iter().map(|s| s.label).collect();
    let templates: Vec<usize> = corpus.train.iter().map(|s| s.template).collect();
    let noisy = inject_noise(&truth, &templates, spec, derive_seed(seed, TAG_NOISE))?;
    let samples = labeled_samples(corpus, feats, &noisy);
    let test_truth: Vec<Label> = corpus.test.iter().map(|s| s.label).collect();

    let opts = RunOptions { correct: true, augment: grid.augment };
    let outcome = train_pipeline(&samples, cfg, opts, seed)?;
    let metrics = evaluate(&outcome.detector, &feats.test, &test_truth)?;
    let control = if grid.plain_control {
        Some(evaluate(&train_control(&samples, cfg, seed)?, &feats.test, &test_truth)?)
    } else {
        None
    };
    let synthetic = outcome.augmentation.as_ref().map_or(0, |a| a.batch.len());
    Ok((metrics, control, outcome.report, synthetic))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// What produced an artifact: enough to rerun the stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// `(file name, sha256)` of every input artifact.
    pub inputs: Vec<(String, String)>,
}

impl Provenance {
    pub fn new(stage: &str, cfg: &PipelineConfig, seed: u64, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
                hash_file(p).map(|h| (name, h))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seed,
            inputs,
        })
    }

    /// `#`-comment header lines for text artifacts.
    pub fn header(&self) -> Vec<String> {
        let mut out = vec![
            format!("stage = {}", self.stage),
            format!("tool_version = {}", self.tool_version),
            format!("config_sha256 = {}", self.config_hash),
            format!("seed = {}", self.seed),
        ];
        out.extend(self.inputs.iter().map(|(n, h)| format!("input {n} sha256 = {h}")));
        out
    }

    /// Reads a header written by [`Provenance::header`] back from a text
    /// artifact.
    pub fn from_text(text: &str) -> Option<Self> {
        let mut p = Provenance {
            stage: String::new(),
            tool_version: String::new(),
            config_hash: String::new(),
            seed: 0,
            inputs: Vec::new(),
        };
        let mut seen = false;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            let Some((k, v)) = body.split_once(" = ") else { continue };
            match k {
                "stage" => {
                    p.stage = v.to_string();
                    seen = true;
                }
                "tool_version" => p.tool_version = v.to_string(),
                "config_sha256" => p.config_hash = v.to_string(),
                "seed" => p.seed = v.parse().ok()?,
                _ => {
                    if let Some(name) = k.strip_prefix("input ").and_then(|r| r.strip_suffix(" sha256")) {
                        p.inputs.push((name.to_string(), v.to_string()));
                    }
                }
            }
        }
        seen.then_some(p)
    }
}

/// JSON checkpoint: a model together with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub provenance: Provenance,
    pub model: T,
}

impl<T: Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// One structured log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub timestamp: f64,
    pub stage: String,
    pub level: String,
    pub message: String,
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}
