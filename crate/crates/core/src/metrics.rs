//! Fidelity of a compressed cache against the full one, and a synthetic
//! needle probe for chunk fragmentation.
//!
//! Both fidelity metrics are this crate's own operationalisation and are only
//! meant for comparing policies against each other:
//!
//! * KV L1 loss: mean absolute value of the evicted K and V entries over all
//!   entries of the full cache, i.e. the mass lost by treating evicted rows
//!   as zero.
//! * attention cosine: cosine between the final query's full attention
//!   distribution and the same distribution with evicted positions zeroed
//!   (not renormalised). For a zero-masked copy this reduces to
//!   `sqrt(Σ_kept p²) / sqrt(Σ p²)`, which is how it is computed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cache::{KeptIndices, LayerKV};
use crate::error::{invalid, Result};
use crate::model::PrefillTrace;
use crate::numerics::{causal_softmax_rows, TensorView};
use crate::policies::{ScoreMode, ScoreSource};

/// Per-layer and overall fidelity of a set of kept indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub kv_l1: f64,
    pub attn_cos: f64,
    pub per_layer_kv_l1: Vec<f64>,
    pub per_layer_attn_cos: Vec<f64>,
}

/// [`kv_l1_loss`] with one kept set per head.
pub fn kv_l1_loss_per_head(full: &LayerKV, kept: &[KeptIndices]) -> Result<f64> {
    if kept.len() != full.n_heads() {
        return invalid(format!(
            "{} kept sets for {} heads",
            kept.len(),
            full.n_heads()
        ));
    }
    let mut evicted_mass = 0.0f64;
    let mut entries = 0usize;
    for (head, idx) in full.heads().iter().zip(kept) {
        if idx.positions().last().is_some_and(|&p| p >= full.seq_len()) {
            return invalid("kept position out of range");
        }
        for m in [&head.k, &head.v] {
            entries += m.data().len();
            for (t, row) in m.row_iter().enumerate() {
                if !idx.contains(t) {
                    for &x in row {
                        evicted_mass += f64::from(x.abs());
                    }
                }
            }
        }
    }
    if entries == 0 {
        return Ok(0.0);
    }
    Ok(evicted_mass / entries as f64)
}

/// Evicted K/V mass over the total entry count of the full cache.
pub fn kv_l1_loss(full: &LayerKV, kept: &KeptIndices) -> Result<f64> {
    kv_l1_loss_per_head(full, &vec![kept.clone(); full.n_heads()])
}

/// Cosine between `full_attn_row` and its copy with evicted positions zeroed.
/// Returns 0.0 when nothing with nonzero mass is kept.
pub fn attention_cosine(full_attn_row: &[f32], kept: &KeptIndices) -> f64 {
    let mut total = 0.0f64;
    let mut retained = 0.0f64;
    for (j, &p) in full_attn_row.iter().enumerate() {
        let sq = f64::from(p) * f64::from(p);
        total += sq;
        if kept.contains(j) {
            retained += sq;
        }
    }
    if retained == 0.0 || total == 0.0 {
        return 0.0;
    }
    (retained.sqrt() / total.sqrt()).min(1.0)
}

/// Fidelity of `[layer][head]` kept sets against the trace's full cache.
/// Layer values average over heads; overall values average over layers.
pub fn fidelity(trace: &PrefillTrace, kept: &[Vec<KeptIndices>]) -> Result<FidelityReport> {
    if kept.len() != trace.n_layers() {
        return invalid(format!(
            "kept sets for {} layers, trace has {}",
            kept.len(),
            trace.n_layers()
        ));
    }
    let mut per_layer_kv_l1 = Vec::with_capacity(kept.len());
    let mut per_layer_attn_cos = Vec::with_capacity(kept.len());
    for (l, heads) in kept.iter().enumerate() {
        per_layer_kv_l1.push(kv_l1_loss_per_head(&trace.layer_kv(l), heads)?);
        let cos: f64 = heads
            .iter()
            .enumerate()
            .map(|(h, idx)| attention_cosine(&trace.head(l, h).last_row_attn, idx))
            .sum();
        per_layer_attn_cos.push(cos / heads.len().max(1) as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(FidelityReport {
        kv_l1: mean(&per_layer_kv_l1),
        attn_cos: mean(&per_layer_attn_cos),
        per_layer_kv_l1,
        per_layer_attn_cos,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    /// Uniform in `[0, 1)`.
    #[default]
    Uniform,
    /// Normal with mean 0.5 and standard deviation 0.25.
    Gaussian,
}

fn default_rows() -> usize {
    8
}

/// A planted answer span inside distractor positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleCase {
    pub seq_len: usize,
    pub span_start: usize,
    pub span_len: usize,
    pub signal: f64,
    #[serde(default)]
    pub seed: u64,
    /// Observe-window rows to synthesise.
    #[serde(default = "default_rows")]
    pub rows: usize,
    #[serde(default)]
    pub noise: NoiseModel,
}

impl NeedleCase {
    pub fn validate(&self) -> Result<()> {
        if self.span_len == 0 || self.span_start + self.span_len > self.seq_len {
            return invalid(format!(
                "needle span {}..{} not inside 0..{}",
                self.span_start,
                self.span_start + self.span_len,
                self.seq_len
            ));
        }
        if !self.signal.is_finite() || self.signal < 0.0 {
            return invalid(format!(
                "needle signal {} must be finite and >= 0",
                self.signal
            ));
        }
        if self.rows == 0 {
            return invalid("needle case needs at least one observe row");
        }
        Ok(())
    }

    pub fn span(&self) -> std::ops::Range<usize> {
        self.span_start..self.span_start + self.span_len
    }
}

/// Synthetic observe-window scores standing in for one (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScores {
    scores: TensorView,
}

impl SyntheticScores {
    pub fn new(scores: TensorView) -> Self {
        Self { scores }
    }

    pub fn scores(&self) -> &TensorView {
        &self.scores
    }

    /// Overwrites every row's entry in column `col`.
    pub fn with_column(&self, col: usize, value: f32) -> Result<Self> {
        if col >= self.scores.cols() {
            return invalid(format!("column {col} out of range"));
        }
        let mut data = self.scores.data().to_vec();
        for r in 0..self.scores.rows() {
            data[r * self.scores.cols() + col] = value;
        }
        Ok(Self::new(TensorView::new(
            self.scores.rows(),
            self.scores.cols(),
            data,
        )?))
    }
}

impl ScoreSource for SyntheticScores {
    fn seq_len(&self) -> usize {
        self.scores.cols()
    }

    fn n_layers(&self) -> usize {
        1
    }

    fn n_heads(&self) -> usize {
        1
    }

    fn observe_scores(
        &self,
        layer: usize,
        head: usize,
        window: usize,
        mode: ScoreMode,
    ) -> Result<TensorView> {
        if layer != 0 || head != 0 {
            return invalid("synthetic scores have a single (layer, head)");
        }
        let rows = self.scores.rows();
        if window == 0 || window > rows {
            return invalid(format!("observe window {window} outside 1..={rows}"));
        }
        let last = self.scores.slice_rows(rows - window, rows)?;
        match mode {
            ScoreMode::Raw => Ok(last),
            ScoreMode::Softmax => causal_softmax_rows(&last, self.seq_len() - window),
        }
    }

    fn cumulative_scores(&self, layer: usize, head: usize) -> Result<Vec<f64>> {
        if layer != 0 || head != 0 {
            return invalid("synthetic scores have a single (layer, head)");
        }
        Ok(self.scores.column_sums())
    }
}

/// Noise everywhere, plus `signal` on the needle columns.
pub fn make_needle_case(case: &NeedleCase) -> Result<SyntheticScores> {
    case.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let normal = Normal::new(0.5f32, 0.25).expect("valid normal parameters");
    let span = case.span();
    let mut data = Vec::with_capacity(case.rows * case.seq_len);
    for _ in 0..case.rows {
        for j in 0..case.seq_len {
            let noise = match case.noise {
                NoiseModel::Uniform => rng.random::<f32>(),
                NoiseModel::Gaussian => normal.sample(&mut rng),
            };
            let bump = if span.contains(&j) {
                case.signal as f32
            } else {
                0.0
            };
            data.push(noise + bump);
        }
    }
    Ok(SyntheticScores::new(TensorView::new(
        case.rows,
        case.seq_len,
        data,
    )?))
}

/// Fraction of the needle span kept, and whether all of it was kept.
pub fn needle_retention(kept: &KeptIndices, case: &NeedleCase) -> (f64, bool) {
    let hit = case.span().filter(|&p| kept.contains(p)).count();
    let fraction = hit as f64 / case.span_len.max(1) as f64;
    (fraction, hit == case.span_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::HeadKV;

    fn ones_layer(t: usize, heads: usize) -> LayerKV {
        let hk = (0..heads)
            .map(|_| HeadKV {
                k: TensorView::new(t, 2, vec![1.0; 2 * t]).unwrap(),
                v: TensorView::new(t, 2, vec![1.0; 2 * t]).unwrap(),
            })
            .collect();
        LayerKV::new(0, hk).unwrap()
    }

    fn case(seed: u64) -> NeedleCase {
        NeedleCase {
            seq_len: 64,
            span_start: 20,
            span_len: 5,
            signal: 64.0,
            seed,
            rows: 4,
            noise: NoiseModel::Uniform,
        }
    }

    #[test]
    fn l1_extremes() {
        let kv = ones_layer(5, 2);
        assert_eq!(kv_l1_loss(&kv, &KeptIndices::all(5)).unwrap(), 0.0);
        assert_eq!(kv_l1_loss(&kv, &KeptIndices::empty()).unwrap(), 1.0);
        let two = KeptIndices::from_sorted(vec![0, 3], 5).unwrap();
        assert!((kv_l1_loss(&kv, &two).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let row = [0.25f32; 4];
        assert_eq!(attention_cosine(&row, &KeptIndices::all(4)), 1.0);
        let half = KeptIndices::from_sorted(vec![0, 2], 4).unwrap();
        assert!((attention_cosine(&row, &half) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        let peaked = [0.0f32, 1.0, 0.0];
        let just = KeptIndices::from_sorted(vec![1], 3).unwrap();
        assert_eq!(attention_cosine(&peaked, &just), 1.0);
        assert_eq!(attention_cosine(&peaked, &KeptIndices::empty()), 0.0);
    }

    #[test]
    fn retention_examples() {
        let c = NeedleCase {
            seq_len: 10,
            span_start: 4,
            span_len: 4,
            ..case(0)
        };
        assert_eq!(needle_retention(&KeptIndices::all(10), &c), (1.0, true));
        assert_eq!(needle_retention(&KeptIndices::empty(), &c), (0.0, false));
        let some = KeptIndices::from_sorted(vec![5, 6], 10).unwrap();
        assert_eq!(needle_retention(&some, &c), (0.5, false));
    }

    #[test]
    fn needle_generation_is_deterministic() {
        assert_eq!(
            make_needle_case(&case(3)).unwrap(),
            make_needle_case(&case(3)).unwrap()
        );
        assert_ne!(
            make_needle_case(&case(3)).unwrap(),
            make_needle_case(&case(4)).unwrap()
        );
        let g = NeedleCase {
            noise: NoiseModel::Gaussian,
            ..case(3)
        };
        assert_eq!(make_needle_case(&g).unwrap(), make_needle_case(&g).unwrap());
    }

    #[test]
    fn strong_signal_dominates() {
        let s = make_needle_case(&case(9)).unwrap();
        let cols = s.scores().column_sums();
        let min_in = cols[20..25].iter().copied().fold(f64::INFINITY, f64::min);
        let max_out = cols
            .iter()
            .enumerate()
            .filter(|(j, _)| !(20..25).contains(j))
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_in > max_out);
    }

    #[test]
    fn null_signal_is_pure_noise() {
        let c = NeedleCase {
            signal: 0.0,
            ..case(5)
        };
        let s = make_needle_case(&c).unwrap();
        assert!(s.scores().data().iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn invalid_cases() {
        assert!(make_needle_case(&NeedleCase {
            span_len: 0,
            ..case(0)
        })
        .is_err());
        assert!(make_needle_case(&NeedleCase {
            span_start: 62,
            ..case(0)
        })
        .is_err());
        assert!(make_needle_case(&NeedleCase {
            signal: -1.0,
            ..case(0)
        })
        .is_err());
    }
}
