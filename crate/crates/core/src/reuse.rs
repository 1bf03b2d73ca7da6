//! Layer-wise index reuse, cross-layer similarity of kept sets, and the
//! analytic speedup model for reuse.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::{apply_kept_per_head, KeptIndices, LayerKV};
use crate::error::{invalid, Error, Result};
use crate::policies::{compress_layer, PolicySpec, ScoreSource};

/// Groups of `n_reuse` consecutive layers share the indices computed on the
/// group's first (anchor) layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReusePlan {
    pub n_layers: usize,
    pub n_reuse: usize,
}

impl ReusePlan {
    pub fn new(n_layers: usize, n_reuse: usize) -> Result<Self> {
        let plan = Self { n_layers, n_reuse };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_reuse == 0 || self.n_reuse > self.n_layers {
            return invalid(format!(
                "n_reuse {} outside 1..={}",
                self.n_reuse, self.n_layers
            ));
        }
        Ok(())
    }

    /// `floor(l / n_reuse) * n_reuse`.
    pub fn anchor(&self, layer: usize) -> usize {
        layer / self.n_reuse * self.n_reuse
    }

    pub fn is_anchor(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.n_reuse)
    }

    pub fn anchor_count(&self) -> usize {
        self.n_layers.div_ceil(self.n_reuse)
    }
}

/// `|a ∩ b| / |a ∪ b|`, and 1.0 for two empty sets.
pub fn jaccard(a: &KeptIndices, b: &KeptIndices) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Runs `spec` on anchor layers only; every other layer copies its anchor's
/// per-head indices (head `h` reuses head `h`). Indexed `[layer][head]`.
pub fn run_with_reuse<S: ScoreSource + ?Sized>(
    src: &S,
    spec: &PolicySpec,
    plan: &ReusePlan,
) -> Result<Vec<Vec<KeptIndices>>> {
    plan.validate()?;
    if plan.n_layers != src.n_layers() {
        return invalid(format!(
            "plan covers {} layers, source has {}",
            plan.n_layers,
            src.n_layers()
        ));
    }
    let mut by_anchor: BTreeMap<usize, Vec<KeptIndices>> = BTreeMap::new();
    let mut out = Vec::with_capacity(plan.n_layers);
    for l in 0..plan.n_layers {
        if plan.is_anchor(l) {
            by_anchor.insert(l, compress_layer(src, l, spec)?);
        }
        let kept = by_anchor
            .get(&plan.anchor(l))
            .ok_or_else(|| Error::Internal(format!("no indices for anchor of layer {l}")))?;
        out.push(kept.clone());
    }
    Ok(out)
}

/// Wall-clock split of one compression pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReuseTiming {
    /// Per anchor layer: scoring, selection and gather.
    pub compress: Vec<Duration>,
    /// Per non-anchor layer: index lookup and gather.
    pub select: Vec<Duration>,
    pub total: Duration,
}

/// [`run_with_reuse`] that also gathers each layer's cache and times the
/// anchor and non-anchor work separately.
pub fn compress_cache_timed<S: ScoreSource + ?Sized>(
    src: &S,
    layers: &[LayerKV],
    spec: &PolicySpec,
    plan: &ReusePlan,
) -> Result<(Vec<LayerKV>, ReuseTiming)> {
    plan.validate()?;
    if layers.len() != plan.n_layers || src.n_layers() != plan.n_layers {
        return invalid("layer count mismatch between plan, cache and scores");
    }
    let mut timing = ReuseTiming::default();
    let mut by_anchor: BTreeMap<usize, Vec<KeptIndices>> = BTreeMap::new();
    let mut out = Vec::with_capacity(layers.len());
    let start = Instant::now();
    for (l, kv) in layers.iter().enumerate() {
        let t0 = Instant::now();
        if plan.is_anchor(l) {
            let kept = compress_layer(src, l, spec)?;
            out.push(apply_kept_per_head(kv, &kept)?);
            by_anchor.insert(l, kept);
            timing.compress.push(t0.elapsed());
        } else {
            let kept = by_anchor
                .get(&plan.anchor(l))
                .ok_or_else(|| Error::Internal(format!("no indices for anchor of layer {l}")))?;
            out.push(apply_kept_per_head(kv, kept)?);
            timing.select.push(t0.elapsed());
        }
    }
    timing.total = start.elapsed();
    Ok((out, timing))
}

/// Mean Jaccard similarity of consecutive layers.
pub fn adjacent_similarity(per_layer: &[KeptIndices]) -> Result<f64> {
    if per_layer.len() < 2 {
        return invalid("adjacent similarity needs at least two layers");
    }
    let total: f64 = per_layer.windows(2).map(|w| jaccard(&w[0], &w[1])).sum();
    Ok(total / (per_layer.len() - 1) as f64)
}

/// Picks head `head` out of `[layer][head]` kept sets.
pub fn head_slice(per_layer: &[Vec<KeptIndices>], head: usize) -> Vec<KeptIndices> {
    per_layer.iter().map(|heads| heads[head].clone()).collect()
}

/// [`adjacent_similarity`] averaged over every head.
pub fn adjacent_similarity_all_heads(per_layer: &[Vec<KeptIndices>]) -> Result<f64> {
    let n_heads = per_layer.first().map_or(0, Vec::len);
    if n_heads == 0 {
        return invalid("no heads");
    }
    let mut total = 0.0;
    for h in 0..n_heads {
        total += adjacent_similarity(&head_slice(per_layer, h))?;
    }
    Ok(total / n_heads as f64)
}

/// Pairwise Jaccard similarity between layers: symmetric, unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub entries: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }
}

pub fn similarity_matrix(per_layer: &[KeptIndices]) -> Result<SimilarityMatrix> {
    let n = per_layer.len();
    if n == 0 {
        return invalid("similarity matrix needs at least one layer");
    }
    let mut entries = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = jaccard(&per_layer[i], &per_layer[j]);
            entries[i][j] = s;
            entries[j][i] = s;
        }
    }
    Ok(SimilarityMatrix { n, entries })
}

/// Analytic compression-phase speedup of reuse:
///
/// ```text
/// L · t_c / ((L / R) · t_c + (L - L / R) · t_s)
/// ```
///
/// with `L / R` taken as a real number when `R` does not divide `L`.
pub fn speedup_estimate(
    n_layers: usize,
    n_reuse: usize,
    t_compress: f64,
    t_select: f64,
) -> Result<f64> {
    if n_layers == 0 || n_reuse == 0 {
        return invalid("n_layers and n_reuse must be >= 1");
    }
    if t_compress.is_nan() || t_compress <= 0.0 || t_select.is_nan() || t_select < 0.0 {
        return invalid(format!(
            "need t_compress > 0 and t_select >= 0, got {t_compress} and {t_select}"
        ));
    }
    let layers = n_layers as f64;
    let anchors = layers / n_reuse as f64;
    let denom = anchors * t_compress + (layers - anchors) * t_select;
    if denom <= 0.0 || !denom.is_finite() {
        return invalid("speedup denominator is zero");
    }
    Ok(layers * t_compress / denom)
}
