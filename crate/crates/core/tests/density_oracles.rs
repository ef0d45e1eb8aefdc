use flowdet::density::{fit_density, MadeConfig, MadeModel};
use flowdet::features::FeatureVector;
use flowdet::nn::rng_from_seed;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
}

fn config() -> MadeConfig {
    MadeConfig {
        components: 5,
        epochs: 150,
        ..MadeConfig::default()
    }
}

/// Midpoint-rule integral of exp(log p) over `[lo, hi]^2`.
fn quadrature(model: &MadeModel, lo: (f64, f64), hi: (f64, f64), steps: usize) -> f64 {
    let hx = (hi.0 - lo.0) / steps as f64;
    let hy = (hi.1 - lo.1) / steps as f64;
    let mut grid = Array2::zeros((steps * steps, 2));
    for i in 0..steps {
        for j in 0..steps {
            grid[[i * steps + j, 0]] = lo.0 + (i as f64 + 0.5) * hx;
            grid[[i * steps + j, 1]] = lo.1 + (j as f64 + 0.5) * hy;
        }
    }
    let lp = model.log_density_matrix(&grid).unwrap();
    lp.iter().map(|l| l.exp()).sum::<f64>() * hx * hy
}

#[test]
fn standard_normal_held_out_likelihood() {
    let train = gaussian(500, 2, 1);
    let model = fit_density(&train, &config(), 3).unwrap();
    let held_out = gaussian(2000, 2, 2);
    let fitted = model.log_density_matrix(&held_out).unwrap();
    let mean_fit = fitted.iter().sum::<f64>() / fitted.len() as f64;
    // closed form: log N(x; 0, I) = -log(2 pi) - |x|^2 / 2
    let mean_true = held_out
        .outer_iter()
        .map(|r| -(2.0 * std::f64::consts::PI).ln() - 0.5 * r.dot(&r))
        .sum::<f64>()
        / held_out.nrows() as f64;
    assert!((mean_fit - mean_true).abs() < 0.3, "fit {mean_fit} vs true {mean_true}");
}

#[test]
fn two_dimensional_density_integrates_to_one() {
    let mut rng = rng_from_seed(5);
    // a skewed, correlated 2-D sample
    let train = Array2::from_shape_fn((400, 2), |(_, _)| 0.0);
    let train = {
        let mut t = train;
        for mut row in t.outer_iter_mut() {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            row[0] = 0.5 * a + 1.0;
            row[1] = 0.8 * a + 0.3 * b * b;
        }
        t
    };
    let model = fit_density(&train, &config(), 4).unwrap();
    let (sx, sy) = (model.scale[0], model.scale[1]);
    let (mx, my) = (model.shift[0], model.shift[1]);
    let mass = quadrature(&model, (mx - 8.0 * sx, my - 8.0 * sy), (mx + 8.0 * sx, my + 8.0 * sy), 400);
    assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
}

#[test]
fn cluster_members_outscore_scatter() {
    let mut rng = rng_from_seed(9);
    let d = 4;
    let cluster: Vec<Vec<f64>> = (0..150)
        .map(|_| (0..d).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 0.05 * z }).collect())
        .collect();
    let scatter: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let mut all = Array2::zeros((200, d));
    for (i, row) in cluster.iter().chain(&scatter).enumerate() {
        for j in 0..d {
            all[[i, j]] = row[j];
        }
    }
    let model = fit_density(&all, &MadeConfig { components: 5, epochs: 60, ..MadeConfig::default() }, 2).unwrap();
    let mean = |rows: &[Vec<f64>]| {
        rows.iter()
            .map(|r| model.log_density(&FeatureVector(r.clone())).unwrap().log_density)
            .sum::<f64>()
            / rows.len() as f64
    };
    assert!(mean(&cluster) > mean(&scatter));
}
