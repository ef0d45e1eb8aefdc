//! Shared neural-network plumbing: parameter initialization, dense stacks
//! and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed (splitmix64 of `seed ^ tag`).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Glorot-uniform weight matrix of shape `fan_in x fan_out`.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, (fan_in, fan_out), limit)
}

pub fn uniform(rng: &mut impl Rng, shape: (usize, usize), limit: f64) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(0.2),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

/// Fully connected stack: `sizes[0] -> sizes[1] -> ... -> sizes[k]`.
///
/// Parameters are stored flat as `[w0, b0, w1, b1, ...]` so they can be
/// handed to [`Adam`] directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub params: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(
        sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for w in sizes.windows(2) {
            params.push(glorot(rng, w[0], w[1]));
            params.push(Array2::zeros((1, w[1])));
        }
        Self {
            sizes: sizes.to_vec(),
            hidden_activation,
            output_activation,
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Puts every parameter on the graph as trainable.
    pub fn bind<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Puts every parameter on the graph as a constant.
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Forward pass; also returns the post-activation output of every
    /// hidden layer.
    pub fn forward_with_hidden<'g>(&self, vars: &[Var<'g>], x: Var<'g>) -> (Var<'g>, Vec<Var<'g>>) {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        let mut hidden = Vec::with_capacity(layers - 1);
        for l in 0..layers {
            let z = h.matmul(vars[2 * l]).add(vars[2 * l + 1]);
            if l + 1 == layers {
                h = self.output_activation.apply(z);
            } else {
                h = self.hidden_activation.apply(z);
                hidden.push(h);
            }
        }
        (h, hidden)
    }

    pub fn forward<'g>(&self, vars: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        self.forward_with_hidden(vars, x).0
    }

    /// Graph-free evaluation.
    pub fn eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let g = Graph::new();
        let vars = self.bind_frozen(&g);
        let out = self.forward(&vars, g.constant(x.clone()));
        (*out.value()).clone()
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: &[Array2<f64>]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            t: 0,
        }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max && norm.is_finite() {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g * scale;
                    if !g.is_finite() {
                        return;
                    }
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

/// Shuffled mini-batch index lists covering `0..n`.
pub fn minibatches(rng: &mut impl Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}
