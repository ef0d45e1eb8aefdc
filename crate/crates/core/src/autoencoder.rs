//! Unsupervised sequence autoencoder over packet-length tokens.
//!
//! Tokens are embedded through a learnable `L x V` table and encoded by `B`
//! stacked bidirectional GRU layers. The feature vector concatenates, per
//! layer, the forward state at the last step and the backward state at the
//! first step, giving `d = 2BH`. The decoder mirrors the encoder; its first
//! layer receives the feature vector at every step, and a two-layer head
//! maps the top decoder states to token log-probabilities.
//!
//! Training minimizes cross-entropy over non-padding positions only. No
//! label ever enters this module.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_cols, concat_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::flows::LengthSequence;
use crate::nn::{minibatches, rng_from_seed, uniform, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    /// Vocabulary size `L` (max_len + 1).
    pub vocab: usize,
    /// Embedding dimension `V`.
    pub embed_dim: usize,
    /// Hidden size per direction `H`.
    pub hidden: usize,
    /// Stacked bidirectional layers `B`.
    pub layers: usize,
    /// Sequence length `n`.
    pub seq_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            vocab: 1501,
            embed_dim: 32,
            hidden: 8,
            layers: 2,
            seq_len: 50,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
        }
    }
}

impl AeConfig {
    pub fn feature_dim(&self) -> usize {
        2 * self.layers * self.hidden
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.embed_dim == 0 || self.hidden == 0 || self.layers == 0 || self.seq_len == 0 {
            return Err(Error::InvalidArgument(format!("degenerate autoencoder shape {self:?}")));
        }
        Ok(())
    }
}

/// One GRU direction: input weights `in x 3H`, recurrent weights `H x 3H`
/// and their biases, gate order `[reset, update, candidate]`.
#[derive(Debug, Clone, Copy)]
struct GruSlots {
    w: usize,
    u: usize,
    bw: usize,
    bu: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeModel {
    pub config: AeConfig,
    pub seed: u64,
    /// Embedding table, encoder and decoder GRUs, reconstruction head.
    pub params: Vec<Array2<f64>>,
    /// Mean reconstruction loss of each epoch.
    pub loss_history: Vec<f64>,
}

const HEAD_SLOTS: usize = 4;

impl AeModel {
    /// Freshly initialized, untrained model.
    pub fn init(config: AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let (l, v, h, b) = (config.vocab, config.embed_dim, config.hidden, config.layers);
        let d = config.feature_dim();
        let mut params = Vec::new();
        params.push(Array2::from_shape_simple_fn((l, v), || {
            let x: f64 = rng.random::<f64>() * 2.0 - 1.0;
            x * 0.5
        }));
        let k = 1.0 / (h as f64).sqrt();
        let gru = |params: &mut Vec<Array2<f64>>, input: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            params.push(uniform(rng, (input, 3 * h), k));
            params.push(uniform(rng, (h, 3 * h), k));
            params.push(uniform(rng, (1, 3 * h), k));
            params.push(uniform(rng, (1, 3 * h), k));
        };
        for stage_input in [v, d] {
            for layer in 0..b {
                let input = if layer == 0 { stage_input } else { 2 * h };
                for _dir in 0..2 {
                    gru(&mut params, input, &mut rng);
                }
            }
        }
        let head = 4 * h;
        params.push(uniform(&mut rng, (2 * h, head), 1.0 / ((2 * h) as f64).sqrt()));
        params.push(Array2::zeros((1, head)));
        params.push(uniform(&mut rng, (head, l), 1.0 / (head as f64).sqrt()));
        params.push(Array2::zeros((1, l)));
        Ok(Self {
            config,
            seed,
            params,
            loss_history: Vec::new(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn gru_slots(&self, decoder: bool, layer: usize, backward: bool) -> GruSlots {
        let per_stage = self.config.layers * 2;
        let idx = (decoder as usize) * per_stage + layer * 2 + backward as usize;
        let base = 1 + 4 * idx;
        GruSlots {
            w: base,
            u: base + 1,
            bw: base + 2,
            bu: base + 3,
        }
    }

    fn head_base(&self) -> usize {
        self.params.len() - HEAD_SLOTS
    }

    pub fn check_sequence(&self, seq: &LengthSequence) -> Result<()> {
        if seq.n() != self.config.seq_len {
            return Err(Error::DimensionMismatch {
                expected: self.config.seq_len,
                got: seq.n(),
            });
        }
        if seq.true_len > seq.n() {
            return Err(Error::InvalidArgument(format!(
                "true_len {} exceeds sequence length {}",
                seq.true_len,
                seq.n()
            )));
        }
        for (position, &token) in seq.tokens.iter().enumerate() {
            if token as usize >= self.config.vocab {
                return Err(Error::TokenOutOfRange {
                    token,
                    position,
                    vocab: self.config.vocab,
                });
            }
        }
        Ok(())
    }

    /// Runs one GRU direction over time-major input `(n*batch) x in`.
    /// Returns the per-step states in time order.
    fn run_direction<'g>(
        &self,
        vars: &[Var<'g>],
        slots: GruSlots,
        input: Var<'g>,
        batch: usize,
        backward: bool,
    ) -> Vec<Var<'g>> {
        let g = vars[0].graph();
        let h_size = self.config.hidden;
        let n = self.config.seq_len;
        let xp = input.matmul(vars[slots.w]).add(vars[slots.bw]);
        let mut h = g.constant(Array2::zeros((batch, h_size)));
        let mut states: Vec<Option<Var<'g>>> = vec![None; n];
        let order: Box<dyn Iterator<Item = usize>> = if backward {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            let x_t = xp.slice_rows(t * batch, (t + 1) * batch);
            let hp = h.matmul(vars[slots.u]).add(vars[slots.bu]);
            let r = x_t.slice_cols(0, h_size).add(hp.slice_cols(0, h_size)).sigmoid();
            let z = x_t
                .slice_cols(h_size, 2 * h_size)
                .add(hp.slice_cols(h_size, 2 * h_size))
                .sigmoid();
            let cand = x_t
                .slice_cols(2 * h_size, 3 * h_size)
                .add(r.mul(hp.slice_cols(2 * h_size, 3 * h_size)))
                .tanh();
            // h' = (1 - z) * cand + z * h
            h = cand.add(z.mul(h.sub(cand)));
            states[t] = Some(h);
        }
        states.into_iter().map(|s| s.expect("every step visited")).collect()
    }

    /// Bidirectional layer: per-step `[fwd, bwd]` outputs plus the final
    /// forward and initial backward states.
    fn bi_layer<'g>(
        &self,
        vars: &[Var<'g>],
        decoder: bool,
        layer: usize,
        input: Var<'g>,
        batch: usize,
    ) -> (Var<'g>, Var<'g>, Var<'g>) {
        let fwd = self.run_direction(vars, self.gru_slots(decoder, layer, false), input, batch, false);
        let bwd = self.run_direction(vars, self.gru_slots(decoder, layer, true), input, batch, true);
        let n = fwd.len();
        let out = concat_cols(&[concat_rows(&fwd), concat_rows(&bwd)]);
        (out, fwd[n - 1], bwd[0])
    }

    fn encode_graph<'g>(&self, vars: &[Var<'g>], seqs: &[&LengthSequence]) -> Var<'g> {
        let batch = seqs.len();
        let n = self.config.seq_len;
        let mut idx = Vec::with_capacity(n * batch);
        for t in 0..n {
            for s in seqs {
                idx.push(s.tokens[t] as usize);
            }
        }
        let mut input = vars[0].gather_rows(idx);
        let mut finals = Vec::with_capacity(2 * self.config.layers);
        for layer in 0..self.config.layers {
            let (out, last_fwd, first_bwd) = self.bi_layer(vars, false, layer, input, batch);
            finals.push(last_fwd);
            finals.push(first_bwd);
            input = out;
        }
        concat_cols(&finals)
    }

    /// Top decoder states, time-major `(n*batch) x 2H`.
    fn decode_graph<'g>(&self, vars: &[Var<'g>], features: Var<'g>, batch: usize) -> Var<'g> {
        let n = self.config.seq_len;
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..batch).collect();
        let mut input = features.gather_rows(idx);
        for layer in 0..self.config.layers {
            input = self.bi_layer(vars, true, layer, input, batch).0;
        }
        input
    }

    fn head_graph<'g>(&self, vars: &[Var<'g>], states: Var<'g>) -> Var<'g> {
        let hb = self.head_base();
        states
            .matmul(vars[hb])
            .add(vars[hb + 1])
            .tanh()
            .matmul(vars[hb + 2])
            .add(vars[hb + 3])
            .log_softmax()
    }

    /// Mean cross-entropy over the non-padding positions of a batch.
    fn loss_graph<'g>(&self, vars: &[Var<'g>], seqs: &[&LengthSequence]) -> Option<Var<'g>> {
        let batch = seqs.len();
        let features = self.encode_graph(vars, seqs);
        let states = self.decode_graph(vars, features, batch);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for t in 0..self.config.seq_len {
            for (b, s) in seqs.iter().enumerate() {
                if t < s.true_len {
                    rows.push(t * batch + b);
                    targets.push(s.tokens[t] as usize);
                }
            }
        }
        if rows.is_empty() {
            return None;
        }
        let logp = self.head_graph(vars, states.gather_rows(rows));
        Some(logp.pick(targets).mean().neg())
    }

    /// Mean reconstruction loss over `seqs` without training.
    pub fn reconstruction_loss(&self, seqs: &[LengthSequence]) -> Result<f64> {
        for s in seqs {
            self.check_sequence(s)?;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in seqs.chunks(256) {
            let refs: Vec<&LengthSequence> = chunk.iter().collect();
            let positions: usize = chunk.iter().map(|s| s.true_len).sum();
            let g = Graph::new();
            let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
            if let Some(loss) = self.loss_graph(&vars, &refs) {
                total += loss.scalar() * positions as f64;
                count += positions;
            }
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Feature vectors for many sequences at once.
    pub fn encode_batch(&self, seqs: &[LengthSequence]) -> Result<Vec<FeatureVector>> {
        for s in seqs {
            self.check_sequence(s)?;
        }
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(256) {
            let refs: Vec<&LengthSequence> = chunk.iter().collect();
            let g = Graph::new();
            let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
            let f = self.encode_graph(&vars, &refs);
            out.extend(f.value().outer_iter().map(|r| FeatureVector(r.to_vec())));
        }
        Ok(out)
    }

    pub fn encode(&self, seq: &LengthSequence) -> Result<FeatureVector> {
        Ok(self.encode_batch(std::slice::from_ref(seq))?.remove(0))
    }

    /// Token distribution at each of the `n` positions.
    pub fn reconstruct(&self, seq: &LengthSequence) -> Result<Vec<Vec<f64>>> {
        self.check_sequence(seq)?;
        let g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let f = self.encode_graph(&vars, &[seq]);
        let states = self.decode_graph(&vars, f, 1);
        let logp = self.head_graph(&vars, states);
        Ok(logp
            .value()
            .outer_iter()
            .map(|row| row.iter().map(|x| x.exp()).collect())
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_slice(&fs::read(path)?)?;
        Ok(model)
    }
}

/// Trains the autoencoder on unlabeled sequences.
pub fn train_ae(sequences: &[LengthSequence], config: &AeConfig, seed: u64) -> Result<AeModel> {
    if sequences.is_empty() {
        return Err(Error::Empty("no sequences to train on"));
    }
    let mut model = AeModel::init(config.clone(), seed)?;
    for s in sequences {
        model.check_sequence(s)?;
    }
    let mut rng = rng_from_seed(crate::nn::derive_seed(seed, 1));
    let mut opt = Adam::new(config.learning_rate, &model.params).with_clip(5.0);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in minibatches(&mut rng, sequences.len(), config.batch_size) {
            let refs: Vec<&LengthSequence> = batch.iter().map(|&i| &sequences[i]).collect();
            let g = Graph::new();
            let vars: Vec<Var> = model.params.iter().map(|p| g.param(p.clone())).collect();
            let Some(loss) = model.loss_graph(&vars, &refs) else { continue };
            g.backward(loss);
            let grads: Vec<_> = vars.iter().map(|v| g.grad(*v)).collect();
            opt.step(&mut model.params, &grads);
            sum += loss.scalar();
            batches += 1;
        }
        let mean = if batches == 0 { 0.0 } else { sum / batches as f64 };
        log::debug!("autoencoder epoch {epoch}: loss {mean:.4}");
        model.loss_history.push(mean);
    }
    Ok(model)
}
