use flowdet::bench::{cluster_scatter, flip_at, inject_noise, metrics_from_labels, NoiseMode, NoiseSpec};
use flowdet::density::MadeConfig;
use flowdet::detector::ForgetSchedule;
use flowdet::flows::Label;
use flowdet::relabel::{correct_labels, select_seeds, CorrectionConfig, Provenance};
use proptest::prelude::*;

fn labels(normal: usize, malicious: usize) -> Vec<Label> {
    (0..normal + malicious).map(|i| if i < normal { Label::Normal } else { Label::Malicious }).collect()
}

fn quick_density() -> MadeConfig {
    MadeConfig { components: 2, hidden_multiplier: 2, epochs: 1, ..MadeConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_flips_are_exact_and_involutive(normal in 0usize..300, malicious in 0usize..300, pct in 0usize..50, seed in any::<u64>()) {
        let truth = labels(normal, malicious);
        let spec = NoiseSpec { mode: NoiseMode::Symmetric, ratio: pct as f64 / 100.0, withheld: Vec::new() };
        let noisy = inject_noise(&truth, &vec![0; truth.len()], &spec, seed).unwrap();
        let flipped: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] != noisy[i]).collect();
        let per_class = |c: Label| flipped.iter().filter(|&&i| truth[i] == c).count();
        prop_assert_eq!(per_class(Label::Normal), pct * normal / 100);
        prop_assert_eq!(per_class(Label::Malicious), pct * malicious / 100);
        let mut restored = noisy.clone();
        flip_at(&mut restored, &flipped);
        prop_assert_eq!(restored, truth);
    }

    #[test]
    fn confusion_counts_partition_the_samples(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
        let to = |b: bool| if b { Label::Malicious } else { Label::Normal };
        let predicted: Vec<Label> = pairs.iter().map(|p| to(p.0)).collect();
        let truth: Vec<Label> = pairs.iter().map(|p| to(p.1)).collect();
        let m = metrics_from_labels(&predicted, &truth);
        prop_assert_eq!(m.tp + m.fp + m.fn_ + m.tn, pairs.len());
        prop_assert_eq!(m.tp, pairs.iter().filter(|p| p.0 && p.1).count());
        prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall));
        if m.f1 > 0.0 {
            prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-15 && m.f1 <= m.precision.max(m.recall) + 1e-15);
        }
    }

    #[test]
    fn kept_count_is_the_exact_ceiling(pct in 0usize..100, batch in 1usize..512) {
        let want = ((100 - pct) * batch).div_ceil(100);
        prop_assert_eq!(ForgetSchedule::kept(pct as f64 / 100.0, batch), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn seed_sets_follow_the_size_laws(per_class in 10usize..60, tenths in 1usize..10, seed in 0u64..1000) {
        let samples = cluster_scatter(per_class, 3, 0.3, seed).unwrap();
        let total = 2 * per_class;
        let alpha = tenths as f64 / 10.0;
        let sel = select_seeds(&samples, &CorrectionConfig { alpha }, &quick_density(), seed).unwrap();
        let h = (tenths * total).div_ceil(10);
        prop_assert_eq!(sel.high_density.len(), h);
        prop_assert_eq!(sel.normal_seeds.len(), h / 2);
        prop_assert_eq!(sel.malicious_seeds.len(), h / 2);
        prop_assert!(sel.malicious_seeds.iter().all(|i| !sel.normal_seeds.contains(i)));
    }

    #[test]
    fn seeds_keep_their_forced_labels(per_class in 15usize..40, seed in 0u64..1000) {
        let samples = cluster_scatter(per_class, 3, 0.4, seed).unwrap();
        let result = correct_labels(&samples, &CorrectionConfig::default(), &quick_density(), seed).unwrap();
        prop_assert_eq!(result.entries.len(), samples.len());
        for e in &result.entries {
            match e.provenance {
                Provenance::NormalSeed => prop_assert_eq!(e.corrected_label, Label::Normal),
                Provenance::MaliciousSeed => prop_assert_eq!(e.corrected_label, Label::Malicious),
                _ => {}
            }
        }
    }
}
