//! Plain-loop reimplementations used as oracles. They read model
//! parameters directly and never touch the autodiff graph.

use flowdet::density::MadeModel;
use flowdet::nn::{Activation, Mlp};
use ndarray::Array2;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const SCALE_FLOOR_LN: f64 = -6.907_755_278_982_137; // ln(1e-3)

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Masked network output for one standardized row.
fn made_output(model: &MadeModel, z: &[f64]) -> Vec<f64> {
    let layers = model.masks.len();
    let mut h = z.to_vec();
    for l in 0..layers {
        let (w, b, m) = (&model.params[2 * l], &model.params[2 * l + 1], &model.masks[l]);
        let mut next = vec![0.0; w.ncols()];
        for (j, out) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (a, &ha) in h.iter().enumerate() {
                acc += ha * (w[[a, j]] * m[[a, j]]);
            }
            *out = acc + b[[0, j]];
            if l + 1 < layers {
                *out = out.max(0.0);
            }
        }
        h = next;
    }
    h
}

/// Log-density of `x` as a sum of per-variable mixture log-likelihoods.
pub fn made_log_density(model: &MadeModel, x: &[f64]) -> f64 {
    let (d, k) = (model.dim, model.components);
    let z: Vec<f64> = (0..d).map(|j| (x[j] - model.shift[j]) / model.scale[j]).collect();
    let out = made_output(model, &z);
    let mut total = 0.0;
    for i in 0..d {
        let logits = &out[i * k..(i + 1) * k];
        let norm = logsumexp(logits);
        let terms: Vec<f64> = (0..k)
            .map(|c| {
                let mean = out[d * k + i * k + c];
                let log_scale = out[2 * d * k + i * k + c].max(SCALE_FLOOR_LN);
                let u = (z[i] - mean) / log_scale.exp();
                (logits[c] - norm) - 0.5 * u * u - log_scale - 0.5 * LN_2PI
            })
            .collect();
        total += logsumexp(&terms);
    }
    total - model.scale.iter().map(|s| s.ln()).sum::<f64>()
}

fn activate(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Identity => v,
        Activation::Relu => v.max(0.0),
        Activation::LeakyRelu => {
            if v > 0.0 {
                v
            } else {
                0.2 * v
            }
        }
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
    }
}

/// Output and first hidden layer of an MLP for one row.
pub fn mlp_forward(net: &Mlp, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let layers = net.sizes.len() - 1;
    let mut h = x.to_vec();
    let mut first = Vec::new();
    for l in 0..layers {
        let (w, b) = (&net.params[2 * l], &net.params[2 * l + 1]);
        let act = if l + 1 == layers { net.output_activation } else { net.hidden_activation };
        h = (0..w.ncols())
            .map(|j| activate(act, (0..h.len()).map(|a| h[a] * w[[a, j]]).sum::<f64>() + b[[0, j]]))
            .collect();
        if l == 0 {
            first = h.clone();
        }
    }
    (h, first)
}

/// Mean squared cosine similarity over ordered pairs of distinct rows.
pub fn pull_away(x: &Array2<f64>) -> f64 {
    let n = x.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (a, b) = (x.row(i), x.row(j));
            let cos = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
            acc += cos * cos;
        }
    }
    acc / (n * (n - 1)) as f64
}

pub fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.outer_iter().map(|r| r.to_vec()).collect()
}
