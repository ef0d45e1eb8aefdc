use flowdet::density::{fit_density, MadeConfig, MadeModel};
use flowdet::nn::rng_from_seed;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::oracles::made_log_density;
use crate::Verdict;

fn correlated(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    let mut x = Array2::zeros((n, d));
    for mut row in x.outer_iter_mut() {
        let shared: f64 = rng.sample(StandardNormal);
        for j in 0..d {
            let own: f64 = rng.sample(StandardNormal);
            row[j] = 2.0 + 0.7 * shared * (j as f64 + 1.0) + 0.5 * own * own;
        }
    }
    x
}

fn quadrature(model: &MadeModel, steps: usize) -> f64 {
    let lo: Vec<f64> = (0..2).map(|j| model.shift[j] - 8.0 * model.scale[j]).collect();
    let h: Vec<f64> = (0..2).map(|j| 16.0 * model.scale[j] / steps as f64).collect();
    let mut grid = Array2::zeros((steps * steps, 2));
    for i in 0..steps {
        for j in 0..steps {
            grid[[i * steps + j, 0]] = lo[0] + (i as f64 + 0.5) * h[0];
            grid[[i * steps + j, 1]] = lo[1] + (j as f64 + 0.5) * h[1];
        }
    }
    let lp = model.log_density_matrix(&grid).expect("grid scores");
    lp.iter().map(|l| l.exp()).sum::<f64>() * h[0] * h[1]
}

pub fn criterion_5() -> Verdict {
    let d = 6;
    let train = correlated(400, d, 1);
    let cfg = MadeConfig { components: 3, epochs: 20, ..MadeConfig::default() };
    let model = fit_density(&train, &cfg, 2).expect("fit");

    let mut rng = rng_from_seed(3);
    let inputs = Array2::from_shape_fn((100, d), |(_, j)| {
        let z: f64 = rng.sample(StandardNormal);
        model.shift[j] + 2.0 * model.scale[j] * z
    });
    let fitted = model.log_density_matrix(&inputs).expect("scores");
    let mut worst_oracle = 0.0f64;
    let mut worst_conditionals = 0.0f64;
    for (row, &got) in inputs.outer_iter().zip(&fitted) {
        let x = row.to_vec();
        let want = made_log_density(&model, &x);
        worst_oracle = worst_oracle.max((got - want).abs() / want.abs());
        let via: f64 = model
            .conditionals(&x)
            .expect("conditionals")
            .iter()
            .zip(&x)
            .map(|(c, &v)| c.log_pdf(v))
            .sum();
        worst_conditionals = worst_conditionals.max((got - via).abs() / via.abs());
    }

    let mut rng = rng_from_seed(5);
    let mut planar = Array2::zeros((400, 2));
    for mut row in planar.outer_iter_mut() {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        row[0] = 0.5 * a + 1.0;
        row[1] = 0.8 * a + 0.3 * b * b;
    }
    let two_d = fit_density(&planar, &MadeConfig { components: 5, epochs: 150, ..MadeConfig::default() }, 4).expect("fit 2-d");
    let mass = quadrature(&two_d, 400);

    let masks = model.mask_check();
    let masks_2d = two_d.mask_check();
    let violations = masks.violations.len() + masks_2d.violations.len();

    let pass = worst_oracle <= 1e-6 && worst_conditionals <= 1e-6 && (mass - 1.0).abs() <= 0.02 && violations == 0;
    Verdict::new(
        pass,
        format!(
            "max rel err vs plain loop {worst_oracle:.2e}, vs conditionals {worst_conditionals:.2e}; \
             2-D mass {mass:.4}; mask violations {violations}"
        ),
    )
}
