use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use flowdet::bench::{cluster_scatter, synth_corpus, MetricsReport, NoiseMode, NoiseSpec};
use flowdet::flows::Label;
use flowdet::pipeline::{evaluate, featurize, labeled_samples, run_cell, sequences, train_pipeline, RunOptions};
use flowdet::relabel::{correct_labels, correction_report};

use crate::{desk, desk_text, median, Verdict};

const RATIOS: [f64; 4] = [0.2, 0.3, 0.4, 0.45];
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn criterion_1() -> Verdict {
    let cfg = desk();
    let mut pass = true;
    let mut parts = Vec::new();
    for ratio in RATIOS {
        let t = Instant::now();
        let mut remaining = Vec::new();
        let mut corrected = Vec::new();
        for seed in SEEDS {
            let samples = cluster_scatter(500, cfg.feature_dim(), ratio, seed).expect("corpus");
            let result = correct_labels(&samples, &cfg.correction_config(), &cfg.density, seed).expect("correction");
            let report = correction_report(&result, &samples).expect("report");
            remaining.push(report.remaining_noise_ratio);
            corrected.push(report.corrected_noise_proportion);
        }
        let secs = t.elapsed().as_secs_f64();
        let (r, c) = (median(&remaining), median(&corrected));
        pass &= r <= 0.15 && c >= 0.6 && secs <= 300.0;
        parts.push(format!("{:.0}%: remaining {r:.3} corrected {c:.3} in {secs:.0} s", ratio * 100.0));
    }
    Verdict::new(pass, parts.join("; "))
}

/// Per-seed results of the desk grid, shared by criteria 2 to 4.
pub struct DeskGrid {
    /// `[ratio][seed]`
    pipeline: Vec<Vec<MetricsReport>>,
    control: Vec<Vec<MetricsReport>>,
    /// Clean labels, without and with augmentation, per seed, on the
    /// drifted-template test split.
    clean: Vec<(MetricsReport, MetricsReport)>,
    /// The same detectors on the standard split, where half the malicious
    /// flows come from training templates.
    clean_mixed: Vec<(MetricsReport, MetricsReport)>,
}

pub fn run_desk_grid() -> DeskGrid {
    let cfg = desk();
    let mut pipeline = vec![Vec::new(); RATIOS.len()];
    let mut control = vec![Vec::new(); RATIOS.len()];
    let mut clean = Vec::new();
    let mut clean_mixed = Vec::new();
    let mut drift_cfg = cfg.corpus.clone();
    drift_cfg.drift_fraction = 1.0;
    for seed in SEEDS {
        let corpus = synth_corpus(&cfg.corpus, seed).expect("corpus");
        let feats = featurize(&corpus, &cfg, seed).expect("features");
        for (k, &ratio) in RATIOS.iter().enumerate() {
            let spec = NoiseSpec { mode: NoiseMode::Symmetric, ratio, withheld: Vec::new() };
            let (m, c, _, _) = run_cell(&corpus, &feats, &spec, &cfg, &cfg.experiment, seed).expect("cell");
            pipeline[k].push(m);
            control[k].push(c.expect("control enabled"));
        }
        let truth: Vec<Label> = corpus.train.iter().map(|s| s.label).collect();
        let test_truth: Vec<Label> = corpus.test.iter().map(|s| s.label).collect();
        let samples = labeled_samples(&corpus, &feats, &truth);

        let drifted = synth_corpus(&drift_cfg, seed).expect("drift corpus");
        assert_eq!(drifted.train, corpus.train, "training split must not depend on the drift share");
        let drift_flows: Vec<_> = drifted.test.iter().map(|s| s.flow.clone()).collect();
        let drift_feats = feats.autoencoder.encode_batch(&sequences(&drift_flows, &cfg)).expect("encode");
        let drift_truth: Vec<Label> = drifted.test.iter().map(|s| s.label).collect();

        let run = |augment: bool| {
            let out = train_pipeline(&samples, &cfg, RunOptions { correct: false, augment }, seed).expect("train");
            (
                evaluate(&out.detector, &drift_feats, &drift_truth).expect("evaluate"),
                evaluate(&out.detector, &feats.test, &test_truth).expect("evaluate"),
            )
        };
        let (plain, augmented) = (run(false), run(true));
        clean.push((plain.0, augmented.0));
        clean_mixed.push((plain.1, augmented.1));
    }
    DeskGrid { pipeline, control, clean, clean_mixed }
}

fn f1s(cells: &[MetricsReport]) -> Vec<f64> {
    cells.iter().map(|m| m.f1).collect()
}

fn fluctuation(per_ratio: &[Vec<MetricsReport>]) -> (f64, Vec<f64>) {
    let medians: Vec<f64> = per_ratio.iter().map(|c| median(&f1s(c))).collect();
    let max = medians.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = medians.iter().cloned().fold(f64::INFINITY, f64::min);
    (max - min, medians)
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

impl DeskGrid {
    pub fn criterion_2(&self) -> Verdict {
        let (p, pm) = fluctuation(&self.pipeline);
        let (c, cm) = fluctuation(&self.control);
        Verdict::new(
            p <= 0.10 && c > 0.10,
            format!("pipeline F1 medians {} fluctuation {p:.3}; control {} fluctuation {c:.3}", fmt(&pm), fmt(&cm)),
        )
    }

    pub fn criterion_3(&self) -> Verdict {
        let k = RATIOS.iter().position(|&r| r == 0.3).expect("30% in grid");
        let pipe = f1s(&self.pipeline[k]);
        let ctrl = f1s(&self.control[k]);
        let paired: Vec<f64> = pipe.iter().zip(&ctrl).map(|(a, b)| a - b).collect();
        let of_medians = median(&pipe) - median(&ctrl);
        let paired_median = median(&paired);
        Verdict::new(
            of_medians >= 0.15 && paired_median >= 0.15,
            format!(
                "F1 pipeline {} control {}; median uplift {paired_median:.3}, difference of medians {of_medians:.3}",
                fmt(&pipe),
                fmt(&ctrl)
            ),
        )
    }

    pub fn criterion_4(&self) -> Verdict {
        let recall_gain: Vec<f64> = self.clean.iter().map(|(a, b)| b.recall - a.recall).collect();
        let precision_drop: Vec<f64> = self.clean.iter().map(|(a, b)| a.precision - b.precision).collect();
        let (g, d) = (median(&recall_gain), median(&precision_drop));
        let mixed_gain: Vec<f64> = self.clean_mixed.iter().map(|(a, b)| b.recall - a.recall).collect();
        let mixed_drop: Vec<f64> = self.clean_mixed.iter().map(|(a, b)| a.precision - b.precision).collect();
        Verdict::new(
            g >= 0.05 && d <= 0.05,
            format!(
                "drifted split: recall gain {} median {g:.3}, precision drop {} median {d:.3}; \
                 standard split: recall gain median {:.3}, precision drop median {:.3}",
                fmt(&recall_gain),
                fmt(&precision_drop),
                median(&mixed_gain),
                median(&mixed_drop)
            ),
        )
    }
}

fn flowdet(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_flowdet"))
        .args(args)
        .args(["--config", "desk.toml", "--seed", "1", "--log", "log.jsonl"])
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("flowdet {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn desk_chain(dir: &Path) -> Result<(), String> {
    fs::write(dir.join("desk.toml"), desk_text()).map_err(|e| e.to_string())?;
    for args in [
        &["synth", "corpus"][..],
        &["extract", "corpus/train.flows", "train.features", "--model", "ae.json", "--fit"],
        &["extract", "corpus/test.flows", "test.features", "--model", "ae.json"],
        &["correct", "train.features", "corrected.features", "--report", "correction.txt", "--truth", "corpus/train.truth"],
        &["augment", "corrected.features", "synthetic.features", "--checkpoints", "gans"],
        &["train", "corrected.features", "synthetic.features", "--model", "detector.json", "--report", "correction.txt"],
        &["predict", "detector.json", "test.features", "predictions.csv"],
        &["evaluate", "predictions.csv", "test.features", "--out", "metrics.csv"],
    ] {
        flowdet(dir, args)?;
    }
    Ok(())
}

pub fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let one_cell = desk_text().replace(
        "ratios = [0.2, 0.3, 0.4, 0.45]\nseeds = [1, 2, 3, 4, 5]",
        "ratios = [0.3]\nseeds = [1]",
    );
    assert!(one_cell.contains("seeds = [1]\n"), "desk config layout changed");
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let cfg = dir.path().join("one_cell.toml");
        fs::write(&cfg, &one_cell).map_err(|e| e.to_string())?;
        let out = Command::new(env!("CARGO_BIN_EXE_flowdet"))
            .args(["experiment", name, "--config", "one_cell.toml", "--seed", "1", "--log", "exp.jsonl"])
            .current_dir(dir.path())
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        fs::read(dir.path().join(name)).map_err(|e| e.to_string())
    };
    let tables = run("first.csv").and_then(|a| run("second.csv").map(|b| (a, b)));
    let (identical, table_note) = match &tables {
        Ok((a, b)) => (a == b, format!("tables {} bytes, identical {}", a.len(), a == b)),
        Err(e) => (false, format!("experiment failed: {e}")),
    };

    let t = Instant::now();
    let chain = desk_chain(dir.path());
    let secs = t.elapsed().as_secs_f64();
    let chain_note = match &chain {
        Ok(()) => {
            let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap_or_default();
            let last = metrics.lines().last().unwrap_or("").to_string();
            format!("desk pipeline {secs:.0} s (tp,fp,fn,tn,p,r,f1 = {last})")
        }
        Err(e) => format!("desk pipeline failed: {e}"),
    };
    Verdict::new(identical && chain.is_ok() && secs <= 1200.0, format!("{table_note}; {chain_note}"))
}
