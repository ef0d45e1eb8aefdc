use flowdet::augment::{
    discriminator_loss, generator_loss, pull_away, region_of, region_of_scores, regions_of_matrix, resolve_thresholds,
    train_gan, Critics, DiscriminatorBatch, GanConfig, GanInstance, Region, RegionThresholds, LOG_EPS,
};
use flowdet::density::{fit_density, MadeConfig, MadeModel};
use flowdet::features::FeatureVector;
use flowdet::nn::{rng_from_seed, Activation, Mlp};
use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::oracles::{made_log_density, mlp_forward, pull_away as pull_away_oracle, rows};
use crate::Verdict;

const TOL: f64 = 1e-6;

fn normal_matrix(rng: &mut impl Rng, n: usize, d: usize, spread: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || spread * rng.sample::<f64, _>(StandardNormal))
}

fn random_made(d: usize, seed: u64) -> MadeModel {
    let mut m = MadeModel::init(d, &MadeConfig { components: 3, hidden_multiplier: 3, ..MadeConfig::default() }, seed)
        .expect("init");
    let mut rng = rng_from_seed(seed ^ 0x55);
    for p in &mut m.params {
        p.mapv_inplace(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    m.shift = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    m.scale = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    m
}

/// Cut points halfway between sorted values, so no score sits on a boundary.
fn midpoints(values: &[f64], fractions: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    fractions
        .iter()
        .map(|f| {
            let k = ((f * v.len() as f64) as usize).clamp(1, v.len() - 1);
            0.5 * (v[k - 1] + v[k])
        })
        .collect()
}

fn masked_mean(values: &[f64], mask: &[bool]) -> f64 {
    let picked: Vec<f64> = values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    if picked.is_empty() { 0.0 } else { picked.iter().sum::<f64>() / picked.len() as f64 }
}

fn mean_hidden(disc: &Mlp, x: &Array2<f64>) -> Vec<f64> {
    let hs: Vec<Vec<f64>> = rows(x).iter().map(|r| mlp_forward(disc, r).1).collect();
    (0..hs[0].len()).map(|j| hs.iter().map(|h| h[j]).sum::<f64>() / hs.len() as f64).collect()
}

fn generator_case(case: u64, failures: &mut Vec<String>) {
    let d = 3;
    let mut rng = rng_from_seed(100 + case);
    let pn = random_made(d, 2 * case + 1);
    let pm = random_made(d, 2 * case + 2);
    let disc = Mlp::new(&[d, 6, 5, 1], Activation::LeakyRelu, Activation::Sigmoid, &mut rng);
    let batch = normal_matrix(&mut rng, 8 + case as usize, d, 1.5);
    let region = Region::ALL[case as usize % 3];

    let ln: Vec<f64> = rows(&batch).iter().map(|r| made_log_density(&pn, r)).collect();
    let lm: Vec<f64> = rows(&batch).iter().map(|r| made_log_density(&pm, r)).collect();
    let gamma = midpoints(&lm, &[0.6])[0];
    let om = midpoints(&ln, &[0.2, 0.45, 0.7]);
    let thresholds = RegionThresholds { gamma, omega: [om[0], om[1], om[2]] };
    let in_region = if case % 2 == 0 { normal_matrix(&mut rng, 4, d, 1.0) } else { Array2::zeros((0, d)) };

    let (lo, hi) = match region {
        Region::MaliciousBoundary => (om[0], om[1]),
        Region::MaliciousOutlier => (f64::NEG_INFINITY, om[0]),
        Region::NormalBoundary => (om[1], om[2]),
    };
    let too_malicious: Vec<bool> = lm.iter().map(|&m| m >= gamma).collect();
    let too_sparse: Vec<bool> = lm.iter().zip(&ln).map(|(&m, &n)| m < gamma && n < lo).collect();
    let too_dense: Vec<bool> = lm.iter().zip(&ln).map(|(&m, &n)| m < gamma && n >= hi).collect();
    let pt = pull_away_oracle(&batch);
    let a = masked_mean(&lm, &too_malicious);
    let b = masked_mean(&ln, &too_sparse);
    let c = masked_mean(&ln, &too_dense);
    let fm = if in_region.nrows() == 0 {
        0.0
    } else {
        let (gen, real) = (mean_hidden(&disc, &batch), mean_hidden(&disc, &in_region));
        gen.iter().zip(&real).map(|(g, r)| (g - r).powi(2)).sum::<f64>().sqrt()
    };
    let total = -pt + a - b + c + fm;

    let critics = Critics { normal_model: &pn, malicious_model: &pm, thresholds, discriminator: &disc };
    let got = generator_loss(&batch, &critics, region, &in_region).expect("generator loss");
    for (name, g, w) in [
        ("pull-away", got.pull_away, pt),
        ("malicious excess", got.malicious_excess, a),
        ("normal deficit", got.normal_deficit, b),
        ("normal excess", got.normal_excess, c),
        ("feature matching", got.feature_match, fm),
        ("total", got.total, total),
    ] {
        if (g - w).abs() > TOL {
            failures.push(format!("generator case {case} {name}: {g} vs oracle {w}"));
        }
    }
}

fn discriminator_case(case: u64, failures: &mut Vec<String>) {
    let d = 3;
    let mut rng = rng_from_seed(200 + case);
    let disc = Mlp::new(&[d, 7, 7, 1], Activation::LeakyRelu, Activation::Sigmoid, &mut rng);
    let sizes = [5 + case as usize, 6, 3 + case as usize % 4, 4, 2 + case as usize];
    // large spreads push some outputs into the clamped tails
    let spread = 1.0 + case as f64;
    let parts: Vec<Array2<f64>> = sizes.iter().map(|&n| normal_matrix(&mut rng, n, d, spread)).collect();
    let high = |x: &Array2<f64>| {
        rows(x).iter().map(|r| mlp_forward(&disc, r).0[0].max(LOG_EPS).ln()).sum::<f64>() / x.nrows() as f64
    };
    let low = |x: &Array2<f64>| {
        rows(x).iter().map(|r| (1.0 - mlp_forward(&disc, r).0[0]).max(LOG_EPS).ln()).sum::<f64>() / x.nrows() as f64
    };
    let want = high(&parts[0]) + low(&parts[1]) + low(&parts[2]) + low(&parts[3]) + high(&parts[4]);
    let batch = DiscriminatorBatch {
        normal: &parts[0],
        malicious: &parts[1],
        malicious_boundary: &parts[2],
        malicious_outlier: &parts[3],
        normal_boundary: &parts[4],
    };
    let got = discriminator_loss(&batch, &disc);
    if (got - want).abs() > TOL {
        failures.push(format!("discriminator case {case}: {got} vs oracle {want}"));
    }
}

pub fn criterion_7() -> Verdict {
    let mut failures = Vec::new();
    for case in 0..10 {
        generator_case(case, &mut failures);
        discriminator_case(case, &mut failures);
    }
    let exact = [
        (array![[1.0, 0.0], [0.0, 1.0]], 0.0),
        (array![[0.0, 2.5, 0.0], [-3.0, 0.0, 0.0], [0.0, 0.0, 0.5]], 0.0),
        (array![[1.0, 0.0], [1.0, 0.0]], 1.0),
        (array![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]], 1.0),
    ];
    for (x, want) in &exact {
        let got = pull_away(x);
        if got != *want {
            failures.push(format!("pull-away of {x:?}: {got}, want exactly {want}"));
        }
    }
    if failures.is_empty() {
        Verdict::new(true, "10 generator and 10 discriminator batches within 1e-6; pull-away exact")
    } else {
        Verdict::new(false, failures.join("; "))
    }
}

fn grid_disjointness(failures: &mut Vec<String>) -> usize {
    let pn_grid: Vec<f64> = (0..100).map(|i| -6.0 + 0.08 * i as f64).collect();
    let pm_grid: Vec<f64> = (0..100).map(|i| -4.0 + 0.08 * i as f64).collect();
    let threshold_sets = [
        RegionThresholds { gamma: pm_grid[50], omega: [pn_grid[20], pn_grid[50], pn_grid[80]] },
        RegionThresholds { gamma: 0.013, omega: [-3.3, -1.7, 0.9] },
        // degenerate: equal cutoffs leave empty bands
        RegionThresholds { gamma: pm_grid[99], omega: [pn_grid[40], pn_grid[40], pn_grid[60]] },
    ];
    let mut checked = 0;
    for t in &threshold_sets {
        for &pn in &pn_grid {
            for &pm in &pm_grid {
                let below = pm < t.gamma;
                let member = [
                    below && pn >= t.omega[0] && pn < t.omega[1],
                    below && pn < t.omega[0],
                    below && pn >= t.omega[1] && pn < t.omega[2],
                ];
                let count = member.iter().filter(|&&m| m).count();
                let want = member.iter().position(|&m| m).map(|k| Region::ALL[k]);
                let got = region_of_scores(pn, pm, t);
                if count > 1 || got != want {
                    failures.push(format!("({pn}, {pm}) under {t:?}: {count} regions, got {got:?}"));
                }
                checked += 1;
            }
        }
    }
    checked
}

/// Dense normal blob inside a malicious ring.
fn toy() -> (Array2<f64>, Array2<f64>) {
    let mut rng = rng_from_seed(1);
    let normal = normal_matrix(&mut rng, 300, 2, 0.3);
    let mut malicious = Array2::zeros((300, 2));
    for (i, mut row) in malicious.outer_iter_mut().enumerate() {
        let a = i as f64 / 300.0 * std::f64::consts::TAU;
        row[0] = 3.0 * a.cos() + 0.2 * rng.sample::<f64, _>(StandardNormal);
        row[1] = 3.0 * a.sin() + 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    (normal, malicious)
}

fn hit_rates(gan: &GanInstance, pn: &MadeModel, pm: &MadeModel) -> [f64; 3] {
    let mut rng = rng_from_seed(77);
    let per = 500;
    Region::ALL.map(|r| {
        let x = gan.generate(r, per, &mut rng);
        let regions = regions_of_matrix(&x, pn, pm, &gan.thresholds).expect("regions");
        regions.iter().filter(|&&got| got == Some(r)).count() as f64 / per as f64
    })
}

pub fn criterion_8() -> Verdict {
    let mut failures = Vec::new();
    let checked = grid_disjointness(&mut failures);

    let (n, m) = toy();
    let made = MadeConfig { components: 5, hidden_multiplier: 16, epochs: 300, learning_rate: 5e-3, ..MadeConfig::default() };
    let pn = fit_density(&n, &made, 1).expect("normal model");
    let pm = fit_density(&m, &made, 2).expect("malicious model");
    let t = resolve_thresholds(&pn, &pm, &n, &m, 0.05, [0.1, 0.2, 0.3]).expect("thresholds");

    // per-point lookup agrees with the batched path on a spatial grid
    let mut spatial = Array2::zeros((400, 2));
    for i in 0..20 {
        for j in 0..20 {
            spatial[[i * 20 + j, 0]] = -4.0 + 0.4 * i as f64;
            spatial[[i * 20 + j, 1]] = -4.0 + 0.4 * j as f64;
        }
    }
    let batched = regions_of_matrix(&spatial, &pn, &pm, &t).expect("regions");
    for (row, want) in spatial.outer_iter().zip(&batched) {
        let got = region_of(&FeatureVector(row.to_vec()), &pn, &pm, &t).expect("region");
        if got != *want {
            failures.push(format!("region_of {row} = {got:?}, batched {want:?}"));
        }
    }

    let cfg = GanConfig { steps: 2000, batch_size: 64, hidden: 32, learning_rate: 1e-3, ..GanConfig::default() };
    let untrained = GanInstance::init(2, &cfg, t, 2);
    let trained = train_gan(&n, &m, &pn, &pm, t, &cfg, 2).expect("gan");
    let (before, after) = (hit_rates(&untrained, &pn, &pm), hit_rates(&trained, &pn, &pm));
    for (k, r) in Region::ALL.iter().enumerate() {
        if after[k] < 0.6 || after[k] <= before[k] {
            failures.push(format!("generator {r}: hit rate {:.3}, untrained {:.3}", after[k], before[k]));
        }
    }
    let detail = format!(
        "{checked} grid points disjoint; hit rates trained {:?} untrained {:?}",
        after.map(|v| (v * 1000.0).round() / 1000.0),
        before.map(|v| (v * 1000.0).round() / 1000.0)
    );
    if failures.is_empty() {
        Verdict::new(true, detail)
    } else {
        Verdict::new(false, format!("{detail}; {}", failures.join("; ")))
    }
}
