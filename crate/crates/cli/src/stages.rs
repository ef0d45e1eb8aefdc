//! One function per subcommand. Every stage hashes its inputs first, so a
//! missing artifact fails before any work is done.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowdet::augment::save_synthetic_batch;
use flowdet::autoencoder::{train_ae, AeModel};
use flowdet::bench::{
    compute_metrics, default_withheld, format_table, inject_noise, run_experiment, synth_corpus, BenchSample,
    NoiseMode,
};
use flowdet::density::{fit_density_vectors, MadeModel};
use flowdet::detector::{train_detector, DetectorModel};
use flowdet::features::{
    load_feature_store, load_predictions, save_density_report, save_feature_store, save_predictions, to_matrix,
    FeatureRecord, FeatureVector,
};
use flowdet::flows::{
    assemble_flows, load_flow_file, load_labeled_flow_file, load_packet_file, save_flow_file, save_labeled_flow_file,
    Flow, Label, LabeledFlow,
};
use flowdet::nn::derive_seed;
use flowdet::pipeline::{
    augment_features, sequences, Checkpoint, PipelineConfig, Provenance, TAG_AUTOENCODER, TAG_CORRECTION,
    TAG_DETECTOR, TAG_NOISE,
};
use flowdet::relabel::{correct_labels, correction_report, save_correction_report, LabeledSample};

pub struct Ctx {
    pub config: PipelineConfig,
    pub seed: u64,
}

impl Ctx {
    fn provenance(&self, stage: &str, inputs: &[&Path]) -> Result<Provenance> {
        Ok(Provenance::new(stage, &self.config, self.seed, inputs)?)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// `id,label,template` for every training flow.
pub fn save_truth(samples: &[BenchSample], path: &Path, header: &[String]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for h in header {
        writeln!(w, "# {h}")?;
    }
    writeln!(w, "# sample_id,true_label,template")?;
    for (i, s) in samples.iter().enumerate() {
        writeln!(w, "{i},{},{}", s.label, s.template)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_truth(path: &Path) -> Result<HashMap<u64, Label>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for (no, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 2 {
            bail!("{}:{}: expected `id,label[,template]`", path.display(), no + 1);
        }
        let id: u64 = f[0].trim().parse().with_context(|| format!("{}:{}: bad id", path.display(), no + 1))?;
        let label: Label = f[1].parse().map_err(|e: String| anyhow::anyhow!("{}:{}: {e}", path.display(), no + 1))?;
        out.insert(id, label);
    }
    Ok(out)
}

/// Writes `train.flows` (labels after noise injection), `train.truth` and
/// `test.flows` (true labels) into `out_dir`.
pub fn synth(ctx: &Ctx, out_dir: &Path) -> Result<()> {
    let cfg = &ctx.config;
    let corpus = synth_corpus(&cfg.corpus, ctx.seed)?;
    let truth: Vec<Label> = corpus.train.iter().map(|s| s.label).collect();
    let templates: Vec<usize> = corpus.train.iter().map(|s| s.template).collect();
    let mut spec = cfg.noise.clone();
    if spec.mode == NoiseMode::Template && spec.withheld.is_empty() {
        spec.withheld = default_withheld(&corpus);
    }
    let noisy = inject_noise(&truth, &templates, &spec, derive_seed(ctx.seed, TAG_NOISE))?;
    let flipped = truth.iter().zip(&noisy).filter(|(a, b)| a != b).count();
    log::info!(
        "synthesized {} train and {} test flows; {flipped} training labels flipped ({} noise, ratio {})",
        corpus.train.len(),
        corpus.test.len(),
        spec.mode,
        spec.ratio
    );

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let header = ctx.provenance("synth", &[])?.header();
    let labeled = |s: &[BenchSample], labels: &[Label]| -> Vec<LabeledFlow> {
        s.iter().zip(labels).map(|(b, &l)| LabeledFlow { flow: b.flow.clone(), label: l }).collect()
    };
    save_labeled_flow_file(&labeled(&corpus.train, &noisy), &out_dir.join("train.flows"), &header)?;
    save_truth(&corpus.train, &out_dir.join("train.truth"), &header)?;
    let test_truth: Vec<Label> = corpus.test.iter().map(|s| s.label).collect();
    save_labeled_flow_file(&labeled(&corpus.test, &test_truth), &out_dir.join("test.flows"), &header)?;
    Ok(())
}

pub fn ingest(ctx: &Ctx, packets: &Path, out: &Path) -> Result<()> {
    let header = ctx.provenance("ingest", &[packets])?.header();
    let records = load_packet_file(packets)?;
    let flows = assemble_flows(&records)?;
    log::info!("{} packets grouped into {} flows", records.len(), flows.len());
    ensure_parent(out)?;
    save_flow_file(&flows, out, &header)?;
    Ok(())
}

/// Labeled flow files keep their labels; unlabeled ones are stored as
/// normal (label 0).
fn read_flows(path: &Path) -> Result<(Vec<Flow>, Vec<Label>)> {
    match load_labeled_flow_file(path) {
        Ok(l) => Ok(l.into_iter().map(|f| (f.flow, f.label)).unzip()),
        Err(_) => {
            let flows = load_flow_file(path)?;
            log::warn!("{} has no label column; storing label 0", path.display());
            let n = flows.len();
            Ok((flows, vec![Label::Normal; n]))
        }
    }
}

pub fn extract(ctx: &Ctx, flows: &Path, out: &Path, model: &Path, fit: bool) -> Result<()> {
    let (flow_list, labels) = read_flows(flows)?;
    let seqs = sequences(&flow_list, &ctx.config);
    let (ae, provenance) = if fit {
        let prov = ctx.provenance("extract", &[flows])?;
        let ae = train_ae(&seqs, &ctx.config.ae_config(), derive_seed(ctx.seed, TAG_AUTOENCODER))?;
        log::info!(
            "autoencoder trained: loss {:.4} -> {:.4}",
            ae.loss_history.first().copied().unwrap_or(f64::NAN),
            ae.loss_history.last().copied().unwrap_or(f64::NAN)
        );
        ensure_parent(model)?;
        Checkpoint { provenance: prov.clone(), model: ae.clone() }.save(model)?;
        (ae, prov)
    } else {
        let prov = ctx.provenance("extract", &[flows, model])?;
        (Checkpoint::<AeModel>::load(model)?.model, prov)
    };
    let vectors = ae.encode_batch(&seqs)?;
    let records: Vec<FeatureRecord> = vectors
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (features, label))| FeatureRecord { id: i as u64, label, features })
        .collect();
    log::info!("encoded {} flows into {}-dimensional features", records.len(), ae.feature_dim());
    ensure_parent(out)?;
    save_feature_store(&records, out, &provenance.header())?;
    Ok(())
}

pub fn correct(ctx: &Ctx, features: &Path, out: &Path, report: &Path, truth: Option<&Path>) -> Result<()> {
    let mut inputs = vec![features];
    inputs.extend(truth);
    let header = ctx.provenance("correct", &inputs)?.header();
    let records = load_feature_store(features)?;
    let truth = truth.map(load_truth).transpose()?;
    let samples: Vec<LabeledSample> = records
        .iter()
        .map(|r| LabeledSample {
            id: r.id,
            features: r.features.clone(),
            noisy_label: r.label,
            true_label: truth.as_ref().and_then(|t| t.get(&r.id).copied()),
        })
        .collect();
    let result = correct_labels(
        &samples,
        &ctx.config.correction_config(),
        &ctx.config.density,
        derive_seed(ctx.seed, TAG_CORRECTION),
    )?;
    let summary = if truth.is_some() { Some(correction_report(&result, &samples)?) } else { None };
    if let Some(s) = &summary {
        log::info!(
            "noise ratio {:.4} -> {:.4}; corrected {:.4} of the wrong labels",
            s.original_noise_ratio,
            s.remaining_noise_ratio,
            s.corrected_noise_proportion
        );
    }
    let corrected: Vec<FeatureRecord> = records
        .iter()
        .zip(&result.entries)
        .map(|(r, e)| FeatureRecord { id: r.id, label: e.corrected_label, features: r.features.clone() })
        .collect();
    ensure_parent(out)?;
    ensure_parent(report)?;
    save_feature_store(&corrected, out, &header)?;
    save_correction_report(&result, summary.as_ref(), report, &header)?;
    Ok(())
}

fn to_vectors(records: &[FeatureRecord]) -> Vec<FeatureVector> {
    records.iter().map(|r| r.features.clone()).collect()
}

pub fn augment(ctx: &Ctx, features: &Path, out: &Path, checkpoints: Option<&Path>) -> Result<()> {
    let prov = ctx.provenance("augment", &[features])?;
    let records = load_feature_store(features)?;
    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    let x = to_matrix(&to_vectors(&records))?;
    let aug = augment_features(&x, &labels, &ctx.config, ctx.seed)?;
    log::info!("{} synthetic samples from {} GAN instances", aug.batch.len(), aug.instances.len());
    let first_id = records.iter().map(|r| r.id).max().map_or(0, |m| m + 1);
    ensure_parent(out)?;
    save_synthetic_batch(&aug.batch, first_id, out, &prov.header())?;
    if let Some(dir) = checkpoints {
        fs::create_dir_all(dir)?;
        for (i, gan) in aug.instances.iter().enumerate() {
            Checkpoint { provenance: prov.clone(), model: gan.clone() }.save(&dir.join(format!("gan_{i}.json")))?;
        }
        fs::write(dir.join("thresholds.json"), serde_json::to_vec_pretty(&aug.thresholds)?)?;
    }
    Ok(())
}

/// Reads `remaining_noise_ratio` from a correction report summary.
fn noise_estimate(report: &Path) -> Result<Option<f64>> {
    let text = fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.strip_prefix("# remaining_noise_ratio = "))
        .find_map(|v| v.trim().parse().ok()))
}

pub fn train(ctx: &Ctx, features: &[PathBuf], model: &Path, report: Option<&Path>) -> Result<()> {
    let mut inputs: Vec<&Path> = features.iter().map(PathBuf::as_path).collect();
    inputs.extend(report);
    let prov = ctx.provenance("train", &inputs)?;
    let mut records = Vec::new();
    for f in features {
        records.extend(load_feature_store(f)?);
    }
    let estimate = report.map(noise_estimate).transpose()?.flatten();
    let cfg = ctx.config.detector_config(estimate);
    log::info!("training on {} samples, forget rate {:.3}", records.len(), cfg.schedule.rate);
    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    let detector = train_detector(&to_matrix(&to_vectors(&records))?, &labels, &cfg, derive_seed(ctx.seed, TAG_DETECTOR))?;
    ensure_parent(model)?;
    Checkpoint { provenance: prov, model: detector }.save(model)?;
    Ok(())
}

pub fn predict(ctx: &Ctx, model: &Path, features: &Path, out: &Path) -> Result<()> {
    let header = ctx.provenance("predict", &[model, features])?.header();
    let detector = Checkpoint::<DetectorModel>::load(model)?.model;
    let records = load_feature_store(features)?;
    let ids: Vec<u64> = records.iter().map(|r| r.id).collect();
    let preds = detector.predict(&ids, &to_vectors(&records))?;
    log::info!("{} of {} samples flagged malicious", preds.iter().filter(|p| p.label.is_malicious()).count(), preds.len());
    ensure_parent(out)?;
    save_predictions(&preds, out, &header)?;
    Ok(())
}

pub fn evaluate(ctx: &Ctx, predictions: &Path, truth: &Path, out: Option<&Path>) -> Result<()> {
    let header = ctx.provenance("evaluate", &[predictions, truth])?.header();
    let preds = load_predictions(predictions)?;
    let gold: Vec<(u64, Label)> = load_feature_store(truth)?.into_iter().map(|r| (r.id, r.label)).collect();
    let m = compute_metrics(&preds, &gold)?;
    let mut text = String::new();
    for h in &header {
        text += &format!("# {h}\n");
    }
    text += "tp,fp,fn,tn,precision,recall,f1\n";
    text += &format!("{},{},{},{},{:.4},{:.4},{:.4}\n", m.tp, m.fp, m.fn_, m.tn, m.precision, m.recall, m.f1);
    match out {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn experiment(ctx: &Ctx, out: &Path) -> Result<()> {
    let header = ctx.provenance("experiment", &[])?.header();
    let results = run_experiment(&ctx.config.experiment, &ctx.config, |_| {})?;
    let mut text = String::new();
    for h in &header {
        text += &format!("# {h}\n");
    }
    text += &format_table(&results);
    ensure_parent(out)?;
    fs::write(out, text)?;
    Ok(())
}

/// Fits the density model on normal-labeled rows and scores every row.
pub fn density_report(ctx: &Ctx, features: &Path, out: &Path, model: Option<&Path>) -> Result<()> {
    let prov = ctx.provenance("density-report", &[features])?;
    let records = load_feature_store(features)?;
    let normal: Vec<FeatureVector> =
        records.iter().filter(|r| r.label == Label::Normal).map(|r| r.features.clone()).collect();
    if normal.len() < 2 {
        bail!("{} has fewer than two normal-labeled samples", features.display());
    }
    let made: MadeModel = fit_density_vectors(&normal, &ctx.config.density, derive_seed(ctx.seed, 1))?;
    let mask = made.mask_check();
    if !mask.is_clean() {
        bail!("density model violates the autoregressive mask: {:?}", mask.violations);
    }
    let scores = made.log_density_batch(&to_vectors(&records))?;
    let rows: Vec<(u64, f64)> = records.iter().map(|r| r.id).zip(scores).collect();
    ensure_parent(out)?;
    save_density_report(&rows, out, &prov.header())?;
    if let Some(p) = model {
        ensure_parent(p)?;
        Checkpoint { provenance: prov, model: made }.save(p)?;
    }
    Ok(())
}
