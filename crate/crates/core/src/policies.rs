//! Eviction policies behind one interface.
//!
//! Every policy maps scores for one (layer, head) to a [`KeptIndices`]. The
//! shared rules:
//!
//! * the budget `L_max` is resolved per layer from [`BudgetSpec`] and the
//!   observe window `w` counts against it for every policy;
//! * the final `w` positions are always kept;
//! * score ties go to the earlier index (earlier chunk, earlier token).
//!
//! ChunkKV follows the mask-based formulation: `k = min((L_max - w) / c, C)`
//! whole chunks are marked, the recent window is OR-ed in, and the mask is
//! read back as sorted positions. When a selected chunk overlaps the recent
//! window the result is shorter than `L_max`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cache::{BudgetSpec, KeptIndices};
use crate::error::{invalid, Result};
use crate::model::PrefillTrace;
use crate::numerics::{causal_softmax_rows, matmul_transposed, TensorView};

/// Normalisation of the observe-window scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Scaled logits `Q Kᵀ / sqrt(D)`.
    Raw,
    /// Causal softmax of the scaled logits, per query row.
    #[default]
    Softmax,
}

fn default_pooling() -> usize {
    3
}

fn one() -> usize {
    1
}

/// Policy family plus its family-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PolicyKind {
    FullKV,
    /// Whole chunks of `budget.chunk_size` tokens ranked by summed score.
    ChunkKV,
    /// Observe-window token scores, max-pooled over `pooling` neighbours.
    SnapKVStyle {
        #[serde(default = "default_pooling")]
        pooling: usize,
    },
    /// Cumulative attention mass over every prefill query row. Always uses
    /// softmax attention, whatever the spec's `score_mode`.
    H2OStyle,
    /// `sinks` initial tokens plus the most recent ones.
    StreamingStyle {
        #[serde(default)]
        sinks: usize,
    },
    /// Observe-window token selection with budgets decaying linearly over
    /// depth. A stand-in schedule, not a port of any published allocator.
    PyramidStyle {
        skew: f64,
        #[serde(default = "one")]
        pooling: usize,
    },
    /// `bottom` on layers `0..split`, `top` on the rest, same budget.
    Hybrid {
        split: usize,
        bottom: Box<PolicyKind>,
        top: Box<PolicyKind>,
    },
}

impl PolicyKind {
    pub fn slug(&self) -> &'static str {
        match self {
            Self::FullKV => "fullkv",
            Self::ChunkKV => "chunkkv",
            Self::SnapKVStyle { .. } => "snapkv",
            Self::H2OStyle => "h2o",
            Self::StreamingStyle { .. } => "streaming",
            Self::PyramidStyle { .. } => "pyramid",
            Self::Hybrid { .. } => "hybrid",
        }
    }

    fn validate(&self, nested: bool) -> Result<()> {
        match self {
            Self::SnapKVStyle { pooling } | Self::PyramidStyle { pooling, .. }
                if *pooling == 0 || pooling % 2 == 0 =>
            {
                invalid(format!("pooling width must be odd and >= 1, got {pooling}"))
            }
            Self::PyramidStyle { skew, .. } if !(0.0..1.0).contains(skew) => {
                invalid(format!("pyramid skew {skew} outside [0, 1)"))
            }
            Self::Hybrid { .. } if nested => invalid("hybrid policies cannot be nested"),
            Self::Hybrid { split, bottom, top } => {
                if *split == 0 {
                    return invalid("hybrid split must be >= 1");
                }
                bottom.validate(true)?;
                top.validate(true)
            }
            _ => Ok(()),
        }
    }
}

/// One eviction policy with its budget and scoring options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    /// Label used in reports and file names; defaults to the kind's slug.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: PolicyKind,
    #[serde(default)]
    pub budget: BudgetSpec,
    #[serde(default)]
    pub score_mode: ScoreMode,
    /// Mean-pool scores across heads so every head of a layer keeps the
    /// same positions.
    #[serde(default)]
    pub head_pooling: bool,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind, budget: BudgetSpec) -> Self {
        Self {
            name: None,
            kind,
            budget,
            score_mode: ScoreMode::default(),
            head_pooling: false,
        }
    }

    pub fn with_score_mode(mut self, mode: ScoreMode) -> Self {
        self.score_mode = mode;
        self
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.kind.slug().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        self.kind.validate(false)
    }
}

/// Anything that can score token positions for a (layer, head).
pub trait ScoreSource {
    fn seq_len(&self) -> usize;
    fn n_layers(&self) -> usize;
    fn n_heads(&self) -> usize;
    /// `window × seq_len` scores of the last `window` queries.
    fn observe_scores(
        &self,
        layer: usize,
        head: usize,
        window: usize,
        mode: ScoreMode,
    ) -> Result<TensorView>;
    /// Accumulated softmax attention each position received from all queries.
    fn cumulative_scores(&self, layer: usize, head: usize) -> Result<Vec<f64>>;
}

/// Scores of the last `w` queries against every key of one head:
/// `Q[T-w..T] Kᵀ / sqrt(D)`, optionally causal-softmaxed.
pub fn observe_scores(
    trace: &PrefillTrace,
    layer: usize,
    head: usize,
    w: usize,
    mode: ScoreMode,
) -> Result<TensorView> {
    if layer >= trace.n_layers() || head >= trace.n_heads() {
        return invalid(format!("no head ({layer}, {head}) in trace"));
    }
    let t_q = trace.seq_len();
    if w == 0 || w > t_q {
        return invalid(format!("observe window {w} outside 1..={t_q}"));
    }
    let h = trace.head(layer, head);
    let q = h.q.slice_rows(t_q - w, t_q)?;
    let raw = matmul_transposed(&q, &h.k)?.scale(1.0 / (trace.head_dim as f32).sqrt())?;
    match mode {
        ScoreMode::Raw => Ok(raw),
        ScoreMode::Softmax => causal_softmax_rows(&raw, t_q - w),
    }
}

impl ScoreSource for PrefillTrace {
    fn seq_len(&self) -> usize {
        PrefillTrace::seq_len(self)
    }

    fn n_layers(&self) -> usize {
        PrefillTrace::n_layers(self)
    }

    fn n_heads(&self) -> usize {
        PrefillTrace::n_heads(self)
    }

    fn observe_scores(
        &self,
        layer: usize,
        head: usize,
        window: usize,
        mode: ScoreMode,
    ) -> Result<TensorView> {
        observe_scores(self, layer, head, window, mode)
    }

    fn cumulative_scores(&self, layer: usize, head: usize) -> Result<Vec<f64>> {
        if layer >= self.n_layers() || head >= self.n_heads() {
            return invalid(format!("no head ({layer}, {head}) in trace"));
        }
        Ok(self.head(layer, head).attn_col_sums.clone())
    }
}

/// Summed score per chunk of `chunk_size` consecutive positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkScoreTable {
    pub chunk_size: usize,
    pub seq_len: usize,
    pub scores: Vec<f64>,
    /// Half-open `[start, end)` per chunk; the last one may be short.
    pub boundaries: Vec<(usize, usize)>,
}

impl ChunkScoreTable {
    pub fn chunk_count(&self) -> usize {
        self.scores.len()
    }
}

/// Chunk scores from per-position scores.
pub fn chunk_scores_from_columns(column_scores: &[f64], c: usize) -> Result<ChunkScoreTable> {
    if c == 0 {
        return invalid("chunk size must be >= 1");
    }
    let t = column_scores.len();
    let boundaries: Vec<(usize, usize)> = (0..t.div_ceil(c))
        .map(|i| (i * c, ((i + 1) * c).min(t)))
        .collect();
    let scores = boundaries
        .iter()
        .map(|&(s, e)| column_scores[s..e].iter().sum())
        .collect();
    Ok(ChunkScoreTable {
        chunk_size: c,
        seq_len: t,
        scores,
        boundaries,
    })
}

/// `A_i` = sum of `a` over all rows and the columns of chunk `i`.
pub fn chunk_scores(a: &TensorView, c: usize) -> Result<ChunkScoreTable> {
    chunk_scores_from_columns(&a.column_sums(), c)
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    |&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// The `k` highest-scoring chunks in ascending chunk order.
pub fn select_chunks(table: &ChunkScoreTable, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..table.chunk_count()).collect();
    order.sort_by(by_score_then_index(&table.scores));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Top `k` positions among `candidates` by score, returned ascending.
pub fn top_k_positions(scores: &[f64], k: usize, candidates: std::ops::Range<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.collect();
    order.sort_by(by_score_then_index(scores));
    order.truncate(k);
    order.sort_unstable();
    order
}

fn check_window(w: usize, l_max: usize) -> Result<()> {
    if w > l_max {
        return invalid(format!("observe window {w} exceeds budget {l_max}"));
    }
    Ok(())
}

/// ChunkKV selection from a chunk score table.
pub fn chunkkv_from_table(table: &ChunkScoreTable, w: usize, l_max: usize) -> Result<KeptIndices> {
    check_window(w, l_max)?;
    let t = table.seq_len;
    if l_max >= t {
        return Ok(KeptIndices::all(t));
    }
    let k = ((l_max - w) / table.chunk_size).min(table.chunk_count());
    let mut mask = vec![false; t];
    for i in select_chunks(table, k) {
        let (s, e) = table.boundaries[i];
        mask[s..e].fill(true);
    }
    mask[t.saturating_sub(w)..].fill(true);
    Ok(KeptIndices::from_mask(&mask))
}

/// ChunkKV selection straight from an observe-window score matrix.
pub fn chunkkv_select(
    scores: &TensorView,
    c: usize,
    w: usize,
    l_max: usize,
) -> Result<KeptIndices> {
    chunkkv_from_table(&chunk_scores(scores, c)?, w, l_max)
}

/// Top `l_max - w` positions outside the recent window plus the last `w`.
pub fn token_select(scores: &[f64], w: usize, l_max: usize) -> Result<KeptIndices> {
    check_window(w, l_max)?;
    let t = scores.len();
    if l_max >= t {
        return Ok(KeptIndices::all(t));
    }
    let recent = t.saturating_sub(w);
    let mut kept = top_k_positions(scores, l_max - w, 0..recent);
    kept.extend(recent..t);
    KeptIndices::from_sorted(kept, t)
}

/// Centered 1-D max pool of width `p` (odd), clipped at the edges.
pub fn max_pool(scores: &[f64], p: usize) -> Result<Vec<f64>> {
    if p == 0 || p.is_multiple_of(2) {
        return invalid(format!("pooling width must be odd and >= 1, got {p}"));
    }
    let half = p / 2;
    let n = scores.len();
    Ok((0..n)
        .map(|i| {
            scores[i.saturating_sub(half)..(i + half + 1).min(n)]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Sink tokens `0..a` plus the most recent `l_max - a` tokens.
pub fn streaming_compress(
    seq_len: usize,
    sinks: usize,
    w: usize,
    l_max: usize,
) -> Result<KeptIndices> {
    if sinks > l_max {
        return invalid(format!("{sinks} sink tokens exceed budget {l_max}"));
    }
    if sinks + w > l_max {
        return invalid(format!(
            "{sinks} sinks plus window {w} exceed budget {l_max}"
        ));
    }
    if seq_len <= l_max {
        return Ok(KeptIndices::all(seq_len));
    }
    let recent_from = seq_len - (l_max - sinks);
    let kept = (0..sinks).chain(recent_from..seq_len).collect();
    KeptIndices::from_sorted(kept, seq_len)
}

/// Per-layer budgets decaying linearly from `(1+β)·b` at layer 0 to
/// `(1-β)·b` at the last layer. Rounded by largest remainder so the total is
/// exactly `n_layers · b`; remainder ties go to the earlier layer.
pub fn pyramid_budgets(
    per_layer: usize,
    n_layers: usize,
    skew: f64,
    min_budget: usize,
) -> Result<Vec<usize>> {
    if n_layers == 0 {
        return invalid("n_layers must be >= 1");
    }
    if !(0.0..1.0).contains(&skew) {
        return invalid(format!("pyramid skew {skew} outside [0, 1)"));
    }
    let b = per_layer as f64;
    let exact: Vec<f64> = (0..n_layers)
        .map(|l| {
            if n_layers == 1 {
                b
            } else {
                b * (1.0 + skew - 2.0 * skew * l as f64 / (n_layers - 1) as f64)
            }
        })
        .map(|x| {
            if (x - x.round()).abs() < 1e-9 {
                x.round()
            } else {
                x
            }
        })
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let target = n_layers * per_layer;
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..n_layers).collect();
    let frac: Vec<f64> = exact.iter().map(|x| x - x.floor()).collect();
    order.sort_by(by_score_then_index(&frac));
    for &l in order.iter().take(target.saturating_sub(assigned)) {
        out[l] += 1;
    }
    if let Some(&lo) = out.iter().min() {
        if lo < min_budget {
            return invalid(format!(
                "pyramid budget {lo} falls below the floor {min_budget}"
            ));
        }
    }
    Ok(out)
}

/// Resolved `L_max` for `layer`; differs across layers only for pyramid
/// policies.
pub fn layer_budget<S: ScoreSource + ?Sized>(
    src: &S,
    layer: usize,
    spec: &PolicySpec,
) -> Result<usize> {
    let base = spec.budget.resolve(src.seq_len())?;
    let kind = match &spec.kind {
        PolicyKind::Hybrid { split, bottom, top } => {
            if layer < *split {
                bottom.as_ref()
            } else {
                top.as_ref()
            }
        }
        k => k,
    };
    match kind {
        PolicyKind::PyramidStyle { skew, .. } => {
            let floor = spec.budget.window + spec.budget.chunk_size;
            Ok(pyramid_budgets(base, src.n_layers(), *skew, floor)?[layer])
        }
        _ => Ok(base),
    }
}

fn scoring_window(spec: &PolicySpec) -> usize {
    // with w = 0 nothing is reserved, but the final query still scores
    spec.budget.window.max(1)
}

fn observe_matrix<S: ScoreSource + ?Sized>(
    src: &S,
    layer: usize,
    head: usize,
    spec: &PolicySpec,
) -> Result<TensorView> {
    let w = scoring_window(spec);
    if !spec.head_pooling {
        return src.observe_scores(layer, head, w, spec.score_mode);
    }
    let n = src.n_heads();
    let first = src.observe_scores(layer, 0, w, spec.score_mode)?;
    let mut acc = first.data().to_vec();
    for h in 1..n {
        let m = src.observe_scores(layer, h, w, spec.score_mode)?;
        for (a, x) in acc.iter_mut().zip(m.data()) {
            *a += x;
        }
    }
    let inv = 1.0 / n as f32;
    TensorView::new(
        first.rows(),
        first.cols(),
        acc.into_iter().map(|x| x * inv).collect(),
    )
}

fn cumulative<S: ScoreSource + ?Sized>(
    src: &S,
    layer: usize,
    head: usize,
    spec: &PolicySpec,
) -> Result<Vec<f64>> {
    if !spec.head_pooling {
        return src.cumulative_scores(layer, head);
    }
    let n = src.n_heads();
    let mut acc = src.cumulative_scores(layer, 0)?;
    for h in 1..n {
        for (a, x) in acc.iter_mut().zip(src.cumulative_scores(layer, h)?) {
            *a += x;
        }
    }
    Ok(acc.into_iter().map(|x| x / n as f64).collect())
}

fn check_trace_budget(spec: &PolicySpec, l_max: usize) -> Result<()> {
    check_window(spec.budget.window, l_max)
}

pub fn chunkkv_compress<S: ScoreSource + ?Sized>(
    src: &S,
    layer: usize,
    head: usize,
    spec: &PolicySpec,
) -> Result<KeptIndices> {
    let l_max = layer_budget(src, layer, spec)?;
    check_trace_budget(spec, l_max)?;
    if l_max >= src.seq_len() {
        return Ok(KeptIndices::all(src.seq_len()));
    }
    let scores = observe_matrix(src, layer, head, spec)?;
    chunkkv_select(&scores, spec.budget.chunk_size, spec.budget.window, l_max)
}

pub fn snapkv_compress<S: ScoreSource + ?Sized>(
    src: &S,
    layer: usize,
    head: usize,
    spec: &PolicySpec,
) -> Result<KeptIndices> {
    let pooling = match spec.kind {
        PolicyKind::SnapKVStyle { pooling } | PolicyKind::PyramidStyle { pooling, .. } => pooling,
        _ => 1,
    };
    snapkv_with_pooling(src, layer, head, spec, pooling)
}

fn snapkv_with_pooling<S: ScoreSource + ?Sized>(
    src: &S,
    layer: usize,
    head: usize,
    spec: &PolicySpec,
    pooling: usize,
) -> Result<KeptIndices> {
    let l_max = layer_budget(src, layer, spec)?;
    check_trace_budget(spec, l_max)?;
    if l_max >= src.seq_len() {
        return Ok(KeptIndices::all(src.seq_len()));
    }
    let cols = observe_matrix(src, layer, head, spec)?.column_sums();
    token_select(&max_pool(&cols, pooling)?, spec.budget.window, l_max)
}

pub fn h2o_compress<S: ScoreSource + ?Sized>(
    src: &S,
    layer: usize,
    head: usize,
    spec: &PolicySpec,
) -> Result<KeptIndices> {
    let l_max = layer_budget(src, layer, spec)?;
    check_trace_budget(spec, l_max)?;
    if l_max >= src.seq_len() {
        return Ok(KeptIndices::all(src.seq_len()));
    }
    token_select(
        &cumulative(src, layer, head, spec)?,
        spec.budget.window,
        l_max,
    )
}

fn compress_kind<S: ScoreSource + ?Sized>(
    src: &S,
    layer: usize,
    head: usize,
    spec: &PolicySpec,
    kind: &PolicyKind,
) -> Result<KeptIndices> {
    let t = src.seq_len();
    match kind {
        PolicyKind::FullKV => Ok(KeptIndices::all(t)),
        PolicyKind::ChunkKV => chunkkv_compress(src, layer, head, spec),
        PolicyKind::SnapKVStyle { pooling } | PolicyKind::PyramidStyle { pooling, .. } => {
            snapkv_with_pooling(src, layer, head, spec, *pooling)
        }
        PolicyKind::H2OStyle => h2o_compress(src, layer, head, spec),
        PolicyKind::StreamingStyle { sinks } => {
            let l_max = layer_budget(src, layer, spec)?;
            streaming_compress(t, *sinks, spec.budget.window, l_max)
        }
        PolicyKind::Hybrid { split, bottom, top } => {
            let inner = if layer < *split { bottom } else { top };
            compress_kind(src, layer, head, spec, inner)
        }
    }
}

/// Kept positions for one (layer, head) under `spec`.
pub fn compress_head<S: ScoreSource + ?Sized>(
    src: &S,
    layer: usize,
    head: usize,
    spec: &PolicySpec,
) -> Result<KeptIndices> {
    spec.validate()?;
    if let PolicyKind::Hybrid { split, .. } = spec.kind {
        if split > src.n_layers() {
            return invalid(format!(
                "hybrid split {split} beyond {} layers",
                src.n_layers()
            ));
        }
    }
    if layer >= src.n_layers() || head >= src.n_heads() {
        return invalid(format!("no head ({layer}, {head})"));
    }
    compress_kind(src, layer, head, spec, &spec.kind)
}

/// Kept positions for every head of one layer.
pub fn compress_layer<S: ScoreSource + ?Sized>(
    src: &S,
    layer: usize,
    spec: &PolicySpec,
) -> Result<Vec<KeptIndices>> {
    if spec.head_pooling {
        // every head sees the same pooled scores
        let kept = compress_head(src, layer, 0, spec)?;
        return Ok(vec![kept; src.n_heads()]);
    }
    (0..src.n_heads())
        .map(|h| compress_head(src, layer, h, spec))
        .collect()
}

/// Kept positions indexed `[layer][head]`.
pub fn compress_all<S: ScoreSource + ?Sized>(
    src: &S,
    spec: &PolicySpec,
) -> Result<Vec<Vec<KeptIndices>>> {
    (0..src.n_layers())
        .map(|l| compress_layer(src, l, spec))
        .collect()
}

/// Depth-split composition: layers below `split` use the bottom policy,
/// the rest the top policy.
pub fn hybrid_compress<S: ScoreSource + ?Sized>(
    src: &S,
    spec: &PolicySpec,
) -> Result<Vec<Vec<KeptIndices>>> {
    if !matches!(spec.kind, PolicyKind::Hybrid { .. }) {
        return invalid("hybrid_compress needs a Hybrid policy");
    }
    compress_all(src, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::BudgetLimit;
    use crate::model::{init_model, random_tokens, ModelConfig};

    fn cols_matrix(cols: &[f32]) -> TensorView {
        TensorView::new(1, cols.len(), cols.to_vec()).unwrap()
    }

    fn trace(seed: u64, t: usize) -> PrefillTrace {
        let cfg = ModelConfig {
            n_layers: 4,
            n_heads: 2,
            head_dim: 8,
            vocab_size: 64,
            max_seq_len: 256,
            seed,
        };
        init_model(cfg)
            .unwrap()
            .prefill(&random_tokens(t, 64, seed + 1))
            .unwrap()
    }

    #[test]
    fn chunk_boundaries_with_short_tail() {
        let t = chunk_scores_from_columns(&[1.0; 25], 10).unwrap();
        assert_eq!(t.chunk_count(), 3);
        assert_eq!(t.boundaries, vec![(0, 10), (10, 20), (20, 25)]);
        assert_eq!(t.scores, vec![10.0, 10.0, 5.0]);
    }

    #[test]
    fn uniform_chunk_scores() {
        let a = TensorView::new(2, 6, vec![1.0; 12]).unwrap();
        assert_eq!(chunk_scores(&a, 2).unwrap().scores, vec![4.0; 3]);
    }

    #[test]
    fn chunk_scores_against_naive_sums() {
        let a = cols_matrix(&[0.1, 0.1, 0.5, 0.4, 0.05, 0.05, 0.9, 0.9]);
        let t = chunk_scores(&a, 2).unwrap();
        for (got, want) in t.scores.iter().zip([0.2, 0.9, 0.1, 1.8]) {
            assert!((got - want).abs() < 1e-6);
        }
        assert_eq!(select_chunks(&t, 2), vec![1, 3]);
        assert_eq!(select_chunks(&t, 4), vec![0, 1, 2, 3]);
        assert!(select_chunks(&t, 0).is_empty());
    }

    #[test]
    fn chunkkv_worked_example() {
        let a = cols_matrix(&[0.1, 0.1, 0.5, 0.4, 0.05, 0.05, 0.9, 0.9]);
        let kept = chunkkv_select(&a, 2, 2, 6).unwrap();
        assert_eq!(kept.positions(), &[2, 3, 6, 7]);
        assert_eq!(chunkkv_select(&a, 2, 2, 8).unwrap(), KeptIndices::all(8));
        assert!(chunkkv_select(&a, 2, 5, 4).is_err());
    }

    #[test]
    fn chunkkv_tie_break_prefers_earlier_chunks() {
        let a = cols_matrix(&[1.0; 9]);
        let kept = chunkkv_select(&a, 3, 0, 6).unwrap();
        assert_eq!(kept.positions(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn score_shift_invariance_with_equal_chunks() {
        // dyadic values keep the sums exact, including the tie between chunks 0 and 2
        let base = [0.25f32, 0.125, 0.75, 0.5, 0.375, 0.0, 1.0, 0.0625];
        let shifted: Vec<f32> = base.iter().map(|x| x + 4.0).collect();
        for k in 0..=4 {
            let a = chunk_scores(&cols_matrix(&base), 2).unwrap();
            let b = chunk_scores(&cols_matrix(&shifted), 2).unwrap();
            assert_eq!(select_chunks(&a, k), select_chunks(&b, k));
        }
    }

    #[test]
    fn score_shift_can_flip_selection_with_short_tail() {
        // chunks (0..2), (2..4), (4..5): the short tail wins before the shift
        let base = [0.0f32, 0.0, 0.1, 0.1, 1.0];
        let shifted: Vec<f32> = base.iter().map(|x| x + 1.0).collect();
        let a = chunk_scores(&cols_matrix(&base), 2).unwrap();
        let b = chunk_scores(&cols_matrix(&shifted), 2).unwrap();
        assert_eq!(select_chunks(&a, 1), vec![2]);
        assert_eq!(select_chunks(&b, 1), vec![1]);
    }

    #[test]
    fn snapkv_pooling_example() {
        let pooled = max_pool(&[0.0, 5.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(pooled, vec![5.0, 5.0, 5.0, 0.0]);
        let kept = token_select(&pooled, 0, 2).unwrap();
        assert_eq!(kept.positions(), &[0, 1]);
        assert_eq!(max_pool(&[1.0, 3.0, 2.0], 1).unwrap(), vec![1.0, 3.0, 2.0]);
        assert!(max_pool(&[1.0], 2).is_err());
    }

    #[test]
    fn token_select_keeps_recent_window() {
        let scores = [9.0, 0.0, 8.0, 0.0, 0.0, 7.0];
        let kept = token_select(&scores, 2, 4).unwrap();
        assert_eq!(kept.positions(), &[0, 2, 4, 5]);
    }

    #[test]
    fn streaming_examples() {
        assert_eq!(
            streaming_compress(6, 2, 0, 4).unwrap().positions(),
            &[0, 1, 4, 5]
        );
        assert_eq!(
            streaming_compress(6, 0, 0, 3).unwrap().positions(),
            &[3, 4, 5]
        );
        assert_eq!(streaming_compress(4, 2, 0, 4).unwrap(), KeptIndices::all(4));
        assert!(streaming_compress(6, 5, 0, 4).is_err());
        assert!(streaming_compress(6, 3, 2, 4).is_err());
    }

    #[test]
    fn pyramid_examples() {
        assert_eq!(pyramid_budgets(100, 4, 0.0, 0).unwrap(), vec![100; 4]);
        assert_eq!(pyramid_budgets(100, 2, 0.5, 0).unwrap(), vec![150, 50]);
        let b = pyramid_budgets(100, 5, 0.4, 0).unwrap();
        assert_eq!(b.iter().sum::<usize>(), 500);
        assert_eq!(b, vec![140, 120, 100, 80, 60]);
        assert!(pyramid_budgets(100, 2, 0.5, 60).is_err());
        assert!(pyramid_budgets(100, 2, 1.0, 0).is_err());
    }

    #[test]
    fn pyramid_largest_remainder() {
        // exact budgets 13.33.., 10, 6.66..: floors 13, 10, 6 leave one unit,
        // which goes to the largest fractional part (layer 2)
        let b = pyramid_budgets(10, 3, 1.0 / 3.0, 0).unwrap();
        assert_eq!(b, vec![13, 10, 7]);
    }

    #[test]
    fn observe_scores_raw_and_softmax() {
        let tr = trace(3, 20);
        let raw = observe_scores(&tr, 1, 0, 4, ScoreMode::Raw).unwrap();
        let h = tr.head(1, 0);
        let scale = 1.0 / (8.0f32).sqrt();
        for i in 0..4 {
            for j in 0..20 {
                let mut acc = 0.0f32;
                for d in 0..8 {
                    acc += h.q.get(16 + i, d) * h.k.get(j, d);
                }
                assert_eq!(raw.get(i, j).to_bits(), (acc * scale).to_bits());
            }
        }
        let sm = observe_scores(&tr, 1, 0, 4, ScoreMode::Softmax).unwrap();
        for (i, row) in sm.row_iter().enumerate() {
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-5);
            assert!(row[17 + i..].iter().all(|&x| x == 0.0));
        }
        assert!(observe_scores(&tr, 1, 0, 21, ScoreMode::Raw).is_err());
        assert!(observe_scores(&tr, 1, 0, 0, ScoreMode::Raw).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"kind":"Hybrid","split":2,"bottom":{"kind":"ChunkKV"},
            "top":{"kind":"SnapKVStyle","pooling":5},
            "budget":{"limit":{"max_len":40},"window":4,"chunk_size":5}}"#;
        let spec: PolicySpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.score_mode, ScoreMode::Softmax);
        assert_eq!(spec.budget.limit, BudgetLimit::MaxLen(40));
        let back: PolicySpec =
            serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        spec.validate().unwrap();
    }

    #[test]
    fn invalid_specs() {
        let b = BudgetSpec::max_len(20, 4, 4);
        let nested = PolicyKind::Hybrid {
            split: 1,
            bottom: Box::new(PolicyKind::Hybrid {
                split: 1,
                bottom: Box::new(PolicyKind::FullKV),
                top: Box::new(PolicyKind::FullKV),
            }),
            top: Box::new(PolicyKind::ChunkKV),
        };
        assert!(PolicySpec::new(nested, b).validate().is_err());
        assert!(PolicySpec::new(PolicyKind::SnapKVStyle { pooling: 4 }, b)
            .validate()
            .is_err());
        assert!(PolicySpec::new(
            PolicyKind::PyramidStyle {
                skew: 1.2,
                pooling: 1
            },
            b
        )
        .validate()
        .is_err());
    }

    #[test]
    fn budget_equal_to_length_keeps_everything() {
        let tr = trace(5, 40);
        let b = BudgetSpec::max_len(40, 4, 5);
        for kind in [
            PolicyKind::ChunkKV,
            PolicyKind::H2OStyle,
            PolicyKind::SnapKVStyle { pooling: 3 },
            PolicyKind::StreamingStyle { sinks: 2 },
        ] {
            let kept = compress_head(&tr, 2, 1, &PolicySpec::new(kind, b)).unwrap();
            assert_eq!(kept, KeptIndices::all(40));
        }
    }

    #[test]
    fn h2o_matches_sort_oracle() {
        let tr = trace(11, 48);
        let spec = PolicySpec::new(PolicyKind::H2OStyle, BudgetSpec::max_len(16, 4, 4));
        let kept = compress_head(&tr, 0, 1, &spec).unwrap();
        // oracle: rank prefix positions by cumulative mass, earlier wins ties
        let scores = &tr.head(0, 1).attn_col_sums;
        let mut pairs: Vec<(f64, usize)> = scores[..44].iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut want: Vec<usize> = pairs[..12].iter().map(|p| p.1).collect();
        want.extend(44..48);
        want.sort_unstable();
        assert_eq!(kept.positions(), &want[..]);
    }

    #[test]
    fn h2o_keeps_dominant_column() {
        struct Dominant;
        impl ScoreSource for Dominant {
            fn seq_len(&self) -> usize {
                10
            }
            fn n_layers(&self) -> usize {
                1
            }
            fn n_heads(&self) -> usize {
                1
            }
            fn observe_scores(
                &self,
                _: usize,
                _: usize,
                _: usize,
                _: ScoreMode,
            ) -> Result<TensorView> {
                unreachable!()
            }
            fn cumulative_scores(&self, _: usize, _: usize) -> Result<Vec<f64>> {
                let mut v = vec![0.1; 10];
                v[3] = 9.0;
                Ok(v)
            }
        }
        let spec = PolicySpec::new(PolicyKind::H2OStyle, BudgetSpec::max_len(3, 2, 1));
        assert!(compress_head(&Dominant, 0, 0, &spec).unwrap().contains(3));
    }

    #[test]
    fn snapkv_pooling_one_is_plain_topk() {
        let tr = trace(2, 60);
        let b = BudgetSpec::max_len(20, 4, 5);
        let spec = PolicySpec::new(PolicyKind::SnapKVStyle { pooling: 1 }, b);
        let kept = compress_head(&tr, 3, 0, &spec).unwrap();
        let cols = observe_scores(&tr, 3, 0, 4, ScoreMode::Softmax)
            .unwrap()
            .column_sums();
        assert_eq!(kept, token_select(&cols, 4, 20).unwrap());
    }

    #[test]
    fn hybrid_composition() {
        let tr = trace(4, 80);
        let b = BudgetSpec::ratio(0.25, 4, 5);
        let chunk = PolicySpec::new(PolicyKind::ChunkKV, b);
        let snap = PolicySpec::new(PolicyKind::SnapKVStyle { pooling: 3 }, b);
        let hybrid = |split| {
            PolicySpec::new(
                PolicyKind::Hybrid {
                    split,
                    bottom: Box::new(PolicyKind::ChunkKV),
                    top: Box::new(PolicyKind::SnapKVStyle { pooling: 3 }),
                },
                b,
            )
        };
        let c_all = compress_all(&tr, &chunk).unwrap();
        let s_all = compress_all(&tr, &snap).unwrap();

        let half = hybrid_compress(&tr, &hybrid(2)).unwrap();
        assert_eq!(&half[..2], &c_all[..2]);
        assert_eq!(&half[2..], &s_all[2..]);
        assert_eq!(hybrid_compress(&tr, &hybrid(4)).unwrap(), c_all);

        let same = PolicySpec::new(
            PolicyKind::Hybrid {
                split: 1,
                bottom: Box::new(PolicyKind::ChunkKV),
                top: Box::new(PolicyKind::ChunkKV),
            },
            b,
        );
        assert_eq!(hybrid_compress(&tr, &same).unwrap(), c_all);
        assert!(hybrid_compress(&tr, &hybrid(5)).is_err());
        assert!(hybrid_compress(&tr, &hybrid(0)).is_err());
        assert!(hybrid_compress(&tr, &chunk).is_err());
    }

    #[test]
    fn pyramid_policy_uses_layer_budgets() {
        let tr = trace(6, 100);
        let spec = PolicySpec::new(
            PolicyKind::PyramidStyle {
                skew: 0.5,
                pooling: 1,
            },
            BudgetSpec::max_len(30, 4, 5),
        );
        let all = compress_all(&tr, &spec).unwrap();
        let budgets = pyramid_budgets(30, 4, 0.5, 9).unwrap();
        for (l, heads) in all.iter().enumerate() {
            for kept in heads {
                assert_eq!(kept.len(), budgets[l]);
            }
        }
    }

    #[test]
    fn head_pooling_shares_indices() {
        let tr = trace(8, 64);
        let mut spec = PolicySpec::new(PolicyKind::ChunkKV, BudgetSpec::max_len(20, 4, 4));
        spec.head_pooling = true;
        let layer = compress_layer(&tr, 1, &spec).unwrap();
        assert_eq!(layer[0], layer[1]);
    }
}
