//! Deterministic toy decoder-only transformer.
//!
//! Each layer is pre-norm causal multi-head attention followed by a
//! ReLU feedforward block, both with residual connections. Normalisation is a
//! parameter-free RMS norm. There is no positional encoding: positions enter
//! only through the causal mask.
//!
//! Weights come from ChaCha8 (a counter-based stream cipher generator, via
//! `rand_chacha`) seeded with `ModelConfig::seed`, drawn uniformly from
//! `[-1/sqrt(hidden_dim), 1/sqrt(hidden_dim)]` in a fixed order: embedding,
//! then per layer `wq, wk, wv, wo, w1, w2`, then the output projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CompressedCacheSet, HeadKV, LayerKV};
use crate::error::{invalid, Result};
use crate::numerics::{dot, softmax_prefix, TensorView};

const NORM_EPS: f32 = 1e-6;
const FFN_MULT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_seq_len() -> usize {
    512
}

impl ModelConfig {
    pub fn hidden_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return invalid("n_layers, n_heads and head_dim must all be >= 1");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return invalid("vocab_size and max_seq_len must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: TensorView,
    wk: TensorView,
    wv: TensorView,
    wo: TensorView,
    w1: TensorView,
    w2: TensorView,
}

/// Immutable after [`init_model`]; prefill and decode only read it.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ModelConfig,
    embed: TensorView,
    layers: Vec<LayerWeights>,
    unembed: TensorView,
}

/// Per-head capture from prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrace {
    pub q: TensorView,
    pub k: TensorView,
    pub v: TensorView,
    /// Column sums of the causal softmax attention over all query rows.
    pub attn_col_sums: Vec<f64>,
    /// Attention distribution of the final query row.
    pub last_row_attn: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillTrace {
    pub tokens: Vec<u32>,
    pub head_dim: usize,
    /// Indexed `[layer][head]`.
    pub layers: Vec<Vec<HeadTrace>>,
    /// Residual stream entering each layer, plus the final stream (`n_layers + 1` entries).
    pub hidden: Vec<TensorView>,
    /// Logits at the final position.
    pub last_logits: Vec<f32>,
}

impl PrefillTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadTrace {
        &self.layers[layer][head]
    }

    pub fn layer_kv(&self, layer: usize) -> LayerKV {
        let heads = self.layers[layer]
            .iter()
            .map(|h| HeadKV {
                k: h.k.clone(),
                v: h.v.clone(),
            })
            .collect();
        LayerKV::new(layer, heads).expect("prefill heads share one shape")
    }

    /// The uncompressed cache left behind by prefill.
    pub fn full_cache(&self) -> CompressedCacheSet {
        CompressedCacheSet {
            layers: (0..self.n_layers()).map(|l| self.layer_kv(l)).collect(),
        }
    }
}

fn fill(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> TensorView {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    TensorView::new(rows, cols, data).expect("uniform draws are finite")
}

pub fn init_model(config: ModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let hidden = config.hidden_dim();
    let ffn = FFN_MULT * hidden;
    let bound = 1.0 / (hidden as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let embed = fill(&mut rng, config.vocab_size, hidden, bound);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            wq: fill(&mut rng, hidden, hidden, bound),
            wk: fill(&mut rng, hidden, hidden, bound),
            wv: fill(&mut rng, hidden, hidden, bound),
            wo: fill(&mut rng, hidden, hidden, bound),
            w1: fill(&mut rng, ffn, hidden, bound),
            w2: fill(&mut rng, hidden, ffn, bound),
        })
        .collect();
    let unembed = fill(&mut rng, config.vocab_size, hidden, bound);
    Ok(ToyModel {
        config,
        embed,
        layers,
        unembed,
    })
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + NORM_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

/// `out[i] = w.row(i) · x` for rows `start..end` of `w`.
fn project_rows(w: &TensorView, x: &[f32], start: usize, end: usize) -> Vec<f32> {
    (start..end).map(|i| dot(w.row(i), x)).collect()
}

/// One query row against the first `visible` keys. Returns the attention
/// output and the probability row (length `k.rows()`).
fn attend(
    q: &[f32],
    k: &TensorView,
    v: &TensorView,
    visible: usize,
    scale: f32,
) -> (Vec<f32>, Vec<f32>) {
    let scores: Vec<f32> = (0..visible).map(|j| dot(q, k.row(j)) * scale).collect();
    let probs = softmax_prefix(&scores, visible).expect("visible >= 1 and finite scores");
    let mut out = vec![0.0f32; v.cols()];
    for (j, &p) in probs.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(v.row(j)) {
            *o += p * x;
        }
    }
    let mut full = probs;
    full.resize(k.rows(), 0.0);
    (out, full)
}

impl ToyModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Sum of every weight, for regression fingerprints.
    pub fn weight_checksum(&self) -> f64 {
        let mut total = self.embed.sum();
        for l in &self.layers {
            total += l.wq.sum() + l.wk.sum() + l.wv.sum() + l.wo.sum() + l.w1.sum() + l.w2.sum();
        }
        total + self.unembed.sum()
    }

    fn check_token(&self, t: u32) -> Result<()> {
        if t as usize >= self.config.vocab_size {
            return invalid(format!(
                "token id {t} >= vocab_size {}",
                self.config.vocab_size
            ));
        }
        Ok(())
    }

    fn scale(&self) -> f32 {
        1.0 / (self.config.head_dim as f32).sqrt()
    }

    /// Attention output projection plus the feedforward block, applied to
    /// one residual vector in place.
    fn finish_block(&self, w: &LayerWeights, x: &mut [f32], heads_out: &[f32]) {
        let hidden = x.len();
        let attn = project_rows(&w.wo, heads_out, 0, hidden);
        for (xi, a) in x.iter_mut().zip(&attn) {
            *xi += a;
        }
        let h2 = rms_norm(x);
        let f: Vec<f32> = project_rows(&w.w1, &h2, 0, w.w1.rows())
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let ff = project_rows(&w.w2, &f, 0, hidden);
        for (xi, a) in x.iter_mut().zip(&ff) {
            *xi += a;
        }
    }

    fn logits(&self, x: &[f32]) -> Vec<f32> {
        let h = rms_norm(x);
        project_rows(&self.unembed, &h, 0, self.config.vocab_size)
    }

    pub fn prefill(&self, tokens: &[u32]) -> Result<PrefillTrace> {
        let t_len = tokens.len();
        if t_len == 0 || t_len > self.config.max_seq_len {
            return invalid(format!(
                "prompt length {t_len} outside 1..={}",
                self.config.max_seq_len
            ));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let hidden = self.config.hidden_dim();
        let d = self.config.head_dim;
        let n_heads = self.config.n_heads;
        let scale = self.scale();

        let mut x: Vec<Vec<f32>> = tokens
            .iter()
            .map(|&t| self.embed.row(t as usize).to_vec())
            .collect();
        let mut hidden_states = Vec::with_capacity(self.layers.len() + 1);
        let mut layer_traces = Vec::with_capacity(self.layers.len());

        for w in &self.layers {
            hidden_states.push(TensorView::from_rows(&x)?);
            let normed: Vec<Vec<f32>> = x.iter().map(|r| rms_norm(r)).collect();

            let mut heads = Vec::with_capacity(n_heads);
            let mut heads_out = vec![vec![0.0f32; hidden]; t_len];
            for hd in 0..n_heads {
                let (lo, hi) = (hd * d, (hd + 1) * d);
                let proj = |m: &TensorView| -> Result<TensorView> {
                    let rows: Vec<Vec<f32>> =
                        normed.iter().map(|h| project_rows(m, h, lo, hi)).collect();
                    TensorView::from_rows(&rows)
                };
                let (q, k, v) = (proj(&w.wq)?, proj(&w.wk)?, proj(&w.wv)?);
                let mut col_sums = vec![0.0f64; t_len];
                let mut last_row = Vec::new();
                for (t, out_row) in heads_out.iter_mut().enumerate() {
                    let (out, probs) = attend(q.row(t), &k, &v, t + 1, scale);
                    out_row[lo..hi].copy_from_slice(&out);
                    for (acc, &p) in col_sums.iter_mut().zip(&probs) {
                        *acc += f64::from(p);
                    }
                    if t + 1 == t_len {
                        last_row = probs;
                    }
                }
                heads.push(HeadTrace {
                    q,
                    k,
                    v,
                    attn_col_sums: col_sums,
                    last_row_attn: last_row,
                });
            }
            for (xt, ho) in x.iter_mut().zip(&heads_out) {
                self.finish_block(w, xt, ho);
            }
            layer_traces.push(heads);
        }
        hidden_states.push(TensorView::from_rows(&x)?);
        let last_logits = self.logits(&x[t_len - 1]);

        Ok(PrefillTrace {
            tokens: tokens.to_vec(),
            head_dim: d,
            layers: layer_traces,
            hidden: hidden_states,
            last_logits,
        })
    }

    /// Runs one token through the model against `cache`, appending that
    /// token's key and value to every (layer, head). Returns the logits and
    /// the extended cache.
    pub fn decode_step(
        &self,
        mut cache: CompressedCacheSet,
        next_token: u32,
    ) -> Result<(Vec<f32>, CompressedCacheSet)> {
        if cache.n_layers() != self.layers.len() {
            return invalid(format!(
                "cache has {} layers, model has {}",
                cache.n_layers(),
                self.layers.len()
            ));
        }
        self.check_token(next_token)?;
        let hidden = self.config.hidden_dim();
        let d = self.config.head_dim;
        let n_heads = self.config.n_heads;
        let scale = self.scale();

        let mut x = self.embed.row(next_token as usize).to_vec();
        for (w, layer) in self.layers.iter().zip(cache.layers.iter_mut()) {
            if layer.n_heads() != n_heads {
                return invalid(format!(
                    "cache layer {} has {} heads, model has {n_heads}",
                    layer.layer(),
                    layer.n_heads()
                ));
            }
            let h = rms_norm(&x);
            let mut keys = Vec::with_capacity(n_heads);
            let mut values = Vec::with_capacity(n_heads);
            let mut queries = Vec::with_capacity(n_heads);
            for hd in 0..n_heads {
                let (lo, hi) = (hd * d, (hd + 1) * d);
                queries.push(project_rows(&w.wq, &h, lo, hi));
                keys.push(project_rows(&w.wk, &h, lo, hi));
                values.push(project_rows(&w.wv, &h, lo, hi));
            }
            layer.push(&keys, &values)?;
            let mut heads_out = vec![0.0f32; hidden];
            for (hd, head) in layer.heads().iter().enumerate() {
                let (out, _) = attend(&queries[hd], &head.k, &head.v, head.k.rows(), scale);
                heads_out[hd * d..(hd + 1) * d].copy_from_slice(&out);
            }
            self.finish_block(w, &mut x, &heads_out);
        }
        Ok((self.logits(&x), cache))
    }
}

/// Convenience wrapper over [`ToyModel::prefill`].
pub fn prefill(model: &ToyModel, tokens: &[u32]) -> Result<PrefillTrace> {
    model.prefill(tokens)
}

/// Convenience wrapper over [`ToyModel::decode_step`].
pub fn decode_step(
    model: &ToyModel,
    cache: CompressedCacheSet,
    next_token: u32,
) -> Result<(Vec<f32>, CompressedCacheSet)> {
    model.decode_step(cache, next_token)
}

/// Uniformly random token ids from a seeded ChaCha8 stream.
pub fn random_tokens(len: usize, vocab_size: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| rng.random_range(0..vocab_size as u32))
        .collect()
}
