//! KV containers, the KV memory model and budget bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::TensorView;

/// Keys and values of one head, both `seq_len × head_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadKV {
    pub k: TensorView,
    pub v: TensorView,
}

/// Per-head key/value matrices of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKV {
    layer: usize,
    seq_len: usize,
    heads: Vec<HeadKV>,
}

impl LayerKV {
    pub fn new(layer: usize, heads: Vec<HeadKV>) -> Result<Self> {
        let seq_len = heads.first().map_or(0, |h| h.k.rows());
        for (i, h) in heads.iter().enumerate() {
            if h.k.rows() != h.v.rows() || h.k.cols() != h.v.cols() {
                return invalid(format!("layer {layer} head {i}: K and V shapes differ"));
            }
            if h.k.rows() != seq_len {
                return invalid(format!(
                    "layer {layer} head {i}: seq_len {} differs from {seq_len}",
                    h.k.rows()
                ));
            }
        }
        Ok(Self {
            layer,
            seq_len,
            heads,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn heads(&self) -> &[HeadKV] {
        &self.heads
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Appends one key row and one value row to every head.
    pub fn push(&mut self, keys: &[Vec<f32>], values: &[Vec<f32>]) -> Result<()> {
        if keys.len() != self.heads.len() || values.len() != self.heads.len() {
            return invalid("push: head count mismatch");
        }
        for ((h, k), v) in self.heads.iter_mut().zip(keys).zip(values) {
            h.k.push_row(k)?;
            h.v.push_row(v)?;
        }
        self.seq_len += 1;
        Ok(())
    }
}

/// One `LayerKV` per model layer: the cache a decode step reads and extends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedCacheSet {
    pub layers: Vec<LayerKV>,
}

impl CompressedCacheSet {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Applies per-layer, per-head kept sets.
    pub fn compress(&self, kept: &[Vec<KeptIndices>]) -> Result<Self> {
        if kept.len() != self.layers.len() {
            return invalid(format!(
                "kept sets for {} layers, cache has {}",
                kept.len(),
                self.layers.len()
            ));
        }
        let layers = self
            .layers
            .iter()
            .zip(kept)
            .map(|(kv, per_head)| apply_kept_per_head(kv, per_head))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Strictly increasing token positions retained for one (layer, head).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeptIndices(Vec<usize>);

impl KeptIndices {
    /// Accepts positions that are already strictly increasing and `< seq_len`.
    pub fn from_sorted(positions: Vec<usize>, seq_len: usize) -> Result<Self> {
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("kept positions must be strictly increasing");
        }
        if let Some(&last) = positions.last() {
            if last >= seq_len {
                return invalid(format!("kept position {last} >= seq_len {seq_len}"));
            }
        }
        Ok(Self(positions))
    }

    /// Sorts and deduplicates arbitrary positions.
    pub fn from_unsorted(mut positions: Vec<usize>, seq_len: usize) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        Self::from_sorted(positions, seq_len)
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self(
            mask.iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
        )
    }

    pub fn all(seq_len: usize) -> Self {
        Self((0..seq_len).collect())
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn positions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.0.binary_search(&pos).is_ok()
    }

    pub fn is_superset_of(&self, other: &Self) -> bool {
        other.0.iter().all(|&p| self.contains(p))
    }

    /// Size of the intersection, by merging the two sorted lists.
    pub fn intersection_len(&self, other: &Self) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// Shape of a KV cache for the memory model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryParams {
    pub batch: u64,
    pub seq_len: u64,
    pub layers: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub bytes_per_scalar: u64,
}

/// Bytes held by a KV cache: `2 · B · S · L · N · D · bytes_per_scalar`.
/// The leading 2 counts keys and values.
pub fn memory_bytes(p: &MemoryParams) -> Result<u64> {
    let fields = [
        ("batch", p.batch),
        ("seq_len", p.seq_len),
        ("layers", p.layers),
        ("heads", p.heads),
        ("head_dim", p.head_dim),
        ("bytes_per_scalar", p.bytes_per_scalar),
    ];
    let mut total: u64 = 2;
    for (name, v) in fields {
        if v == 0 {
            return invalid(format!("{name} must be >= 1"));
        }
        total = total
            .checked_mul(v)
            .ok_or_else(|| Error::Overflow(format!("KV memory exceeds u64 at {name}")))?;
    }
    Ok(total)
}

/// Gathers the kept rows of every head's K and V.
pub fn apply_kept(kv: &LayerKV, kept: &KeptIndices) -> Result<LayerKV> {
    apply_kept_per_head(kv, &vec![kept.clone(); kv.n_heads()])
}

/// Like [`apply_kept`] with a separate kept set per head.
///
/// Heads may then disagree on sequence length; the result carries the
/// length of head 0.
pub fn apply_kept_per_head(kv: &LayerKV, kept: &[KeptIndices]) -> Result<LayerKV> {
    if kept.len() != kv.n_heads() {
        return invalid(format!(
            "{} kept sets for {} heads",
            kept.len(),
            kv.n_heads()
        ));
    }
    let mut heads = Vec::with_capacity(kv.n_heads());
    for (h, idx) in kv.heads.iter().zip(kept) {
        if let Some(&last) = idx.positions().last() {
            if last >= kv.seq_len {
                return invalid(format!(
                    "kept position {last} out of range for seq_len {}",
                    kv.seq_len
                ));
            }
        }
        heads.push(HeadKV {
            k: h.k.select_rows(idx.positions())?,
            v: h.v.select_rows(idx.positions())?,
        });
    }
    Ok(LayerKV {
        layer: kv.layer,
        seq_len: kept.first().map_or(0, KeptIndices::len),
        heads,
    })
}

/// Fraction of positions retained.
pub fn compression_ratio(kept: &KeptIndices, seq_len: usize) -> f64 {
    if seq_len == 0 {
        return 0.0;
    }
    kept.len() as f64 / seq_len as f64
}

/// How the cache length limit is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetLimit {
    /// Absolute number of retained positions.
    MaxLen(usize),
    /// Fraction of the prompt length in `(0, 1]`.
    Ratio(f64),
}

/// Cache budget: length limit, observe window `w` and chunk size `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub limit: BudgetLimit,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
}

pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_CHUNK_SIZE: usize = 10;

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_chunk_size() -> usize {
    DEFAULT_CHUNK_SIZE
}

impl Default for BudgetSpec {
    /// Keeps everything.
    fn default() -> Self {
        Self::ratio(1.0, DEFAULT_WINDOW, DEFAULT_CHUNK_SIZE)
    }
}

impl BudgetSpec {
    pub fn max_len(max_len: usize, window: usize, chunk_size: usize) -> Self {
        Self {
            limit: BudgetLimit::MaxLen(max_len),
            window,
            chunk_size,
        }
    }

    pub fn ratio(ratio: f64, window: usize, chunk_size: usize) -> Self {
        Self {
            limit: BudgetLimit::Ratio(ratio),
            window,
            chunk_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return invalid("chunk_size must be >= 1");
        }
        match self.limit {
            BudgetLimit::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                invalid(format!("ratio {r} outside (0, 1]"))
            }
            BudgetLimit::MaxLen(l) if l < self.window => {
                invalid(format!("max_len {l} smaller than window {}", self.window))
            }
            _ => Ok(()),
        }
    }

    /// Resolves the limit against a prompt of `seq_len` tokens.
    ///
    /// A ratio resolves to `max(w + c, floor(r · T))`.
    pub fn resolve(&self, seq_len: usize) -> Result<usize> {
        self.validate()?;
        Ok(match self.limit {
            BudgetLimit::MaxLen(l) => l,
            BudgetLimit::Ratio(r) => {
                // the epsilon absorbs representation error such as 0.29 * 100
                let floored = (r * seq_len as f64 + 1e-9).floor() as usize;
                floored.max(self.window + self.chunk_size)
            }
        })
    }
}
