//! Label-noise correction: density-selected seed sets plus ensemble voting.

pub mod classifiers;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::density::{fit_density, MadeConfig};
use crate::features::{to_matrix, FeatureVector};
use crate::flows::Label;
use crate::nn::derive_seed;
use crate::{Error, Result};

pub const MIN_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: u64,
    pub features: FeatureVector,
    pub noisy_label: Label,
    pub true_label: Option<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub alpha: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    NormalSeed,
    MaliciousSeed,
    Inferred,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::NormalSeed => "normal_seed",
            Provenance::MaliciousSeed => "malicious_seed",
            Provenance::Inferred => "inferred",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "normal_seed" => Ok(Provenance::NormalSeed),
            "malicious_seed" => Ok(Provenance::MaliciousSeed),
            "inferred" => Ok(Provenance::Inferred),
            other => Err(Error::InvalidArgument(format!("unknown provenance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedEntry {
    pub id: u64,
    pub noisy_label: Label,
    pub corrected_label: Label,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    /// One entry per input sample, in input order.
    pub entries: Vec<CorrectedEntry>,
    pub high_density_size: usize,
    pub normal_seed_size: usize,
    pub malicious_seed_size: usize,
}

impl CorrectionResult {
    pub fn labels(&self) -> HashMap<u64, Label> {
        self.entries.iter().map(|e| (e.id, e.corrected_label)).collect()
    }

    pub fn ids_with(&self, provenance: Provenance) -> Vec<u64> {
        self.entries.iter().filter(|e| e.provenance == provenance).map(|e| e.id).collect()
    }
}

/// Candidates intermediate to the selection, exposed for inspection.
#[derive(Debug, Clone)]
pub struct Selection {
    /// Indices into the input, ordered by decreasing log-density.
    pub high_density: Vec<usize>,
    pub normal_seeds: Vec<usize>,
    pub malicious_seeds: Vec<usize>,
    pub log_densities: Vec<f64>,
}

fn mean_distances(x: &Array2<f64>, from: &[usize], to: &[usize], exclude_self: bool) -> Vec<f64> {
    from.iter()
        .map(|&i| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for &j in to {
                if exclude_self && i == j {
                    continue;
                }
                let diff = &x.row(i) - &x.row(j);
                sum += diff.dot(&diff).sqrt();
                count += 1;
            }
            if count == 0 { 0.0 } else { sum / count as f64 }
        })
        .collect()
}

/// Runs the density fit and the three selection steps.
pub fn select_seeds(
    samples: &[LabeledSample],
    cfg: &CorrectionConfig,
    density: &MadeConfig,
    seed: u64,
) -> Result<Selection> {
    cfg.validate()?;
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let vectors: Vec<FeatureVector> = samples.iter().map(|s| s.features.clone()).collect();
    let x = to_matrix(&vectors)?;
    // fit on normal-labeled rows in id order, so input order does not matter
    let mut normal: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].noisy_label == Label::Normal).collect();
    if normal.is_empty() {
        return Err(Error::NoNormalSamples);
    }
    normal.sort_by_key(|&i| samples[i].id);
    let model = fit_density(&x.select(Axis(0), &normal), density, derive_seed(seed, 1))?;
    let log_densities = model.log_density_matrix(&x)?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        log_densities[b]
            .total_cmp(&log_densities[a])
            .then(samples[a].id.cmp(&samples[b].id))
    });
    let h = ((cfg.alpha * samples.len() as f64).ceil() as usize).min(samples.len());
    let high_density: Vec<usize> = order[..h].to_vec();

    let ns = h / 2;
    if ns == 0 {
        return Err(Error::AlphaTooSmall);
    }
    let within = mean_distances(&x, &high_density, &high_density, true);
    let mut by_closeness: Vec<usize> = (0..h).collect();
    by_closeness.sort_by(|&a, &b| {
        within[a]
            .total_cmp(&within[b])
            .then(samples[high_density[a]].id.cmp(&samples[high_density[b]].id))
    });
    let normal_seeds: Vec<usize> = by_closeness[..ns].iter().map(|&k| high_density[k]).collect();

    let in_seed: HashSet<usize> = normal_seeds.iter().copied().collect();
    let rest: Vec<usize> = (0..samples.len()).filter(|i| !in_seed.contains(i)).collect();
    let far = mean_distances(&x, &rest, &normal_seeds, false);
    let mut by_farness: Vec<usize> = (0..rest.len()).collect();
    by_farness.sort_by(|&a, &b| far[b].total_cmp(&far[a]).then(samples[rest[a]].id.cmp(&samples[rest[b]].id)));
    let malicious_seeds: Vec<usize> = by_farness[..ns.min(rest.len())].iter().map(|&k| rest[k]).collect();

    Ok(Selection {
        high_density,
        normal_seeds,
        malicious_seeds,
        log_densities,
    })
}

/// Full correction: seed selection followed by majority-vote relabeling of
/// everything outside the seed sets.
pub fn correct_labels(
    samples: &[LabeledSample],
    cfg: &CorrectionConfig,
    density: &MadeConfig,
    seed: u64,
) -> Result<CorrectionResult> {
    let sel = select_seeds(samples, cfg, density, seed)?;
    let vectors: Vec<FeatureVector> = samples.iter().map(|s| s.features.clone()).collect();
    let x = to_matrix(&vectors)?;

    let mut provenance = vec![Provenance::Inferred; samples.len()];
    let mut labels = vec![Label::Normal; samples.len()];
    for &i in &sel.normal_seeds {
        provenance[i] = Provenance::NormalSeed;
    }
    for &i in &sel.malicious_seeds {
        provenance[i] = Provenance::MaliciousSeed;
        labels[i] = Label::Malicious;
    }
    let inferred: Vec<usize> = (0..samples.len()).filter(|&i| provenance[i] == Provenance::Inferred).collect();
    if !inferred.is_empty() {
        let train: Vec<usize> = sel.normal_seeds.iter().chain(&sel.malicious_seeds).copied().collect();
        let train_y: Vec<u8> = train.iter().map(|&i| labels[i].as_u8()).collect();
        let (votes, _) = classifiers::majority_vote(
            &x.select(Axis(0), &train),
            &train_y,
            &x.select(Axis(0), &inferred),
            derive_seed(seed, 2),
        );
        for (&i, &v) in inferred.iter().zip(&votes) {
            labels[i] = if v == 1 { Label::Malicious } else { Label::Normal };
        }
    }
    log::info!(
        "relabel: |H|={} |N_s|={} |M_s|={} inferred={}",
        sel.high_density.len(),
        sel.normal_seeds.len(),
        sel.malicious_seeds.len(),
        inferred.len()
    );
    let entries = samples
        .iter()
        .enumerate()
        .map(|(i, s)| CorrectedEntry {
            id: s.id,
            noisy_label: s.noisy_label,
            corrected_label: labels[i],
            provenance: provenance[i],
        })
        .collect();
    Ok(CorrectionResult {
        entries,
        high_density_size: sel.high_density.len(),
        normal_seed_size: sel.normal_seeds.len(),
        malicious_seed_size: sel.malicious_seeds.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub remaining_noise_ratio: f64,
    /// Fraction of originally wrong labels that were fixed; `1.0` when no
    /// label was wrong to begin with.
    pub corrected_noise_proportion: f64,
    pub original_noise_ratio: f64,
}

pub fn correction_report(result: &CorrectionResult, samples: &[LabeledSample]) -> Result<CorrectionReport> {
    let truth: HashMap<u64, &LabeledSample> = samples.iter().map(|s| (s.id, s)).collect();
    if result.entries.is_empty() {
        return Err(Error::Empty("correction result"));
    }
    let (mut remaining, mut wrong, mut fixed) = (0usize, 0usize, 0usize);
    for e in &result.entries {
        let s = truth
            .get(&e.id)
            .ok_or_else(|| Error::IdMismatch(format!("sample {} not in the labeled set", e.id)))?;
        let t = s.true_label.ok_or(Error::MissingTrueLabel(e.id))?;
        if e.corrected_label != t {
            remaining += 1;
        }
        if e.noisy_label != t {
            wrong += 1;
            if e.corrected_label == t {
                fixed += 1;
            }
        }
    }
    let n = result.entries.len() as f64;
    Ok(CorrectionReport {
        remaining_noise_ratio: remaining as f64 / n,
        corrected_noise_proportion: if wrong == 0 { 1.0 } else { fixed as f64 / wrong as f64 },
        original_noise_ratio: wrong as f64 / n,
    })
}

pub fn save_correction_report(
    result: &CorrectionResult,
    report: Option<&CorrectionReport>,
    path: &Path,
    header: &[String],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for h in header {
        writeln!(out, "# {h}")?;
    }
    writeln!(out, "# sample_id,noisy_label,corrected_label,provenance")?;
    for e in &result.entries {
        writeln!(out, "{},{},{},{}", e.id, e.noisy_label.as_u8(), e.corrected_label.as_u8(), e.provenance)?;
    }
    writeln!(out, "# summary")?;
    writeln!(out, "# high_density_size = {}", result.high_density_size)?;
    writeln!(out, "# normal_seed_size = {}", result.normal_seed_size)?;
    writeln!(out, "# malicious_seed_size = {}", result.malicious_seed_size)?;
    if let Some(r) = report {
        writeln!(out, "# original_noise_ratio = {:.4}", r.original_noise_ratio)?;
        writeln!(out, "# remaining_noise_ratio = {:.4}", r.remaining_noise_ratio)?;
        writeln!(out, "# corrected_noise_proportion = {:.4}", r.corrected_noise_proportion)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the per-sample lines of a correction report.
pub fn load_correction_report(path: &Path) -> Result<Vec<CorrectedEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::parse(path, k + 1, format!("expected 4 fields, got {}", f.len())));
        }
        let label = |s: &str| -> Result<Label> { s.trim().parse().map_err(|_| Error::parse(path, k + 1, format!("bad label {s:?}"))) };
        out.push(CorrectedEntry {
            id: f[0].trim().parse().map_err(|_| Error::parse(path, k + 1, "bad sample id"))?,
            noisy_label: label(f[1])?,
            corrected_label: label(f[2])?,
            provenance: f[3].parse()?,
        });
    }
    Ok(out)
}
