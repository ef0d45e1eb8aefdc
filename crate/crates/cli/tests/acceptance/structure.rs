use flowdet::autoencoder::{AeConfig, AeModel};
use flowdet::bench::{cluster_scatter, inject_noise, metrics_from_labels, MetricsReport, NoiseMode, NoiseSpec};
use flowdet::config::PipelineConfig;
use flowdet::density::MadeConfig;
use flowdet::flows::{Label, LengthSequence};
use flowdet::nn::rng_from_seed;
use flowdet::relabel::{select_seeds, CorrectionConfig};
use rand::Rng;

use crate::Verdict;

fn feature_dims(failures: &mut Vec<String>) {
    let mut rng = rng_from_seed(61);
    for _ in 0..5 {
        let b: usize = rng.random_range(1..=3);
        let h: usize = rng.random_range(1..=12);
        let cfg = AeConfig { layers: b, hidden: h, vocab: 40, embed_dim: 4, seq_len: 6, ..AeConfig::default() };
        let model = AeModel::init(cfg, rng.random()).expect("init");
        let seq = LengthSequence { tokens: vec![3, 17, 39, 1, 0, 0], true_len: 4 };
        let got = model.encode(&seq).expect("encode").0.len();
        let mut pc = PipelineConfig::default();
        pc.autoencoder.layers = b;
        pc.autoencoder.hidden = h;
        if got != 2 * b * h || pc.feature_dim() != 2 * b * h {
            failures.push(format!("B={b} H={h}: encoded {got}, configured {}", pc.feature_dim()));
        }
    }
}

fn size_laws(failures: &mut Vec<String>) {
    let made = MadeConfig { components: 2, hidden_multiplier: 2, epochs: 2, ..MadeConfig::default() };
    for total in [100usize, 1000] {
        let samples = cluster_scatter(total / 2, 4, 0.3, 7).expect("corpus");
        for tenths in [4usize, 5, 6] {
            let alpha = tenths as f64 / 10.0;
            let sel = select_seeds(&samples, &CorrectionConfig { alpha }, &made, 1).expect("selection");
            let h = (tenths * total).div_ceil(10);
            let ns = h / 2;
            let got = (sel.high_density.len(), sel.normal_seeds.len(), sel.malicious_seeds.len());
            let seeds_inside = sel.normal_seeds.iter().all(|i| sel.high_density.contains(i));
            let disjoint = sel.malicious_seeds.iter().all(|i| !sel.normal_seeds.contains(i));
            if got != (h, ns, ns) || !seeds_inside || !disjoint {
                failures.push(format!("|D|={total} alpha={alpha}: sizes {got:?}, want ({h}, {ns}, {ns})"));
            }
        }
    }
}

fn flip_counts(failures: &mut Vec<String>) {
    for (normal, malicious) in [(500usize, 500usize), (333, 667), (1, 9), (50, 0)] {
        let truth: Vec<Label> = (0..normal + malicious)
            .map(|i| if i < normal { Label::Normal } else { Label::Malicious })
            .collect();
        for pct in [0usize, 20, 30, 40, 45, 49] {
            let spec = NoiseSpec { mode: NoiseMode::Symmetric, ratio: pct as f64 / 100.0, withheld: Vec::new() };
            let noisy = inject_noise(&truth, &vec![0; truth.len()], &spec, pct as u64 + 3).expect("noise");
            let flipped = |class: Label| truth.iter().zip(&noisy).filter(|(t, n)| **t == class && t != n).count();
            let want = (pct * normal / 100, pct * malicious / 100);
            let got = (flipped(Label::Normal), flipped(Label::Malicious));
            if got != want {
                failures.push(format!("{normal}+{malicious} at {pct}%: flipped {got:?}, want {want:?}"));
            }
        }
    }
}

fn metrics_tables(failures: &mut Vec<String>) {
    // (tp, fp, fn, tn) with precision, recall and F1 worked out by hand
    let tables: [((usize, usize, usize, usize), (f64, f64, f64)); 6] = [
        ((3, 1, 1, 5), (0.75, 0.75, 0.75)),
        ((1, 1, 3, 0), (0.5, 0.25, 1.0 / 3.0)),
        ((0, 0, 5, 5), (0.0, 0.0, 0.0)),
        ((0, 4, 0, 6), (0.0, 0.0, 0.0)),
        ((8, 0, 0, 2), (1.0, 1.0, 1.0)),
        ((1, 3, 0, 0), (0.25, 1.0, 0.4)),
    ];
    for ((tp, fp, fn_, tn), (p, r, f1)) in tables {
        let from_counts = MetricsReport::from_counts(tp, fp, fn_, tn);
        let mut predicted = Vec::new();
        let mut truth = Vec::new();
        for (count, pred, gold) in [
            (tp, Label::Malicious, Label::Malicious),
            (fp, Label::Malicious, Label::Normal),
            (fn_, Label::Normal, Label::Malicious),
            (tn, Label::Normal, Label::Normal),
        ] {
            predicted.extend(std::iter::repeat_n(pred, count));
            truth.extend(std::iter::repeat_n(gold, count));
        }
        let from_labels = metrics_from_labels(&predicted, &truth);
        for m in [from_counts, from_labels] {
            let exact = (m.tp, m.fp, m.fn_, m.tn) == (tp, fp, fn_, tn)
                && m.precision.to_bits() == p.to_bits()
                && m.recall.to_bits() == r.to_bits()
                && m.f1.to_bits() == f1.to_bits();
            if !exact {
                failures.push(format!("table {:?}: got {m:?}", (tp, fp, fn_, tn)));
            }
        }
    }
}

pub fn criterion_6() -> Verdict {
    let mut failures = Vec::new();
    feature_dims(&mut failures);
    size_laws(&mut failures);
    flip_counts(&mut failures);
    metrics_tables(&mut failures);
    if failures.is_empty() {
        Verdict::new(true, "dims, size laws, flip counts and metric tables all exact")
    } else {
        Verdict::new(false, failures.join("; "))
    }
}
