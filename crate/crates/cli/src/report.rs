//! Deterministic report documents. Nothing in here holds wall-clock data;
//! timings go to a separate file.

use chunkkv::metrics::{FidelityReport, NeedleCase};
use chunkkv::{KeptIndices, SimilarityMatrix};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const ARTIFACT: &str = "chunkkv";
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub layer: usize,
    pub head: usize,
    pub retained: usize,
    pub ratio: f64,
    /// First 16 hex digits of SHA-256 over the kept positions as
    /// little-endian u64s.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleReport {
    pub case: NeedleCase,
    pub fraction: f64,
    pub intact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub n_layers: usize,
    pub n_reuse: usize,
    /// Analytic speedup with free index lookups on non-anchor layers.
    pub analytic_select_free: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub label: String,
    pub kind: String,
    pub heads: Vec<HeadReport>,
    pub mean_ratio: f64,
    /// Mean Jaccard of consecutive layers on the analysis head.
    pub adjacent_jaccard: Option<f64>,
    pub adjacent_jaccard_all_heads: Option<f64>,
    pub similarity: Option<SimilarityMatrix>,
    pub fidelity: Option<FidelityReport>,
    pub needle: NeedleReport,
    pub speedup: Option<SpeedupReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub artifact: String,
    pub artifact_version: String,
    pub config: ExperimentConfig,
    pub seq_len: usize,
    pub policies: Vec<PolicyReport>,
}

pub fn digest(kept: &KeptIndices) -> String {
    let mut h = Sha256::new();
    for &p in kept.positions() {
        h.update((p as u64).to_le_bytes());
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn head_reports(kept: &[Vec<KeptIndices>], seq_len: usize) -> Vec<HeadReport> {
    let mut out = Vec::new();
    for (layer, heads) in kept.iter().enumerate() {
        for (head, k) in heads.iter().enumerate() {
            out.push(HeadReport {
                layer,
                head,
                retained: k.len(),
                ratio: chunkkv::compression_ratio(k, seq_len),
                digest: digest(k),
            });
        }
    }
    out
}

pub const SWEEP_HEADER: [&str; 11] = [
    "policy",
    "c",
    "ratio",
    "n_reuse",
    "seed",
    "adjacent_jaccard",
    "kv_l1",
    "attn_cos",
    "needle_fraction",
    "needle_intact",
    "micros_compress",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub policy: String,
    pub c: usize,
    pub ratio: f64,
    pub n_reuse: usize,
    pub seed: u64,
    pub adjacent_jaccard: f64,
    pub kv_l1: f64,
    pub attn_cos: f64,
    pub needle_fraction: f64,
    pub needle_intact: bool,
    pub micros_compress: f64,
}

impl SweepRow {
    pub fn record(&self) -> [String; 11] {
        [
            self.policy.clone(),
            self.c.to_string(),
            self.ratio.to_string(),
            self.n_reuse.to_string(),
            self.seed.to_string(),
            format!("{:.6}", self.adjacent_jaccard),
            format!("{:.6}", self.kv_l1),
            format!("{:.6}", self.attn_cos),
            format!("{:.6}", self.needle_fraction),
            self.needle_intact.to_string(),
            format!("{:.3}", self.micros_compress),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_positions_only() {
        let a = KeptIndices::from_sorted(vec![1, 2, 3], 10).unwrap();
        let b = KeptIndices::from_sorted(vec![1, 2, 3], 50).unwrap();
        let c = KeptIndices::from_sorted(vec![1, 2, 4], 10).unwrap();
        assert_eq!(digest(&a), digest(&b));
        assert_ne!(digest(&a), digest(&c));
        assert_eq!(digest(&a).len(), 16);
    }

    #[test]
    fn empty_digest_is_sha256_of_nothing() {
        // SHA-256("") = e3b0c442 98fc1c14 ...
        assert_eq!(digest(&KeptIndices::empty()), "e3b0c44298fc1c14");
    }

    #[test]
    fn sweep_record_matches_header_width() {
        let row = SweepRow {
            policy: "chunkkv".into(),
            c: 10,
            ratio: 0.1,
            n_reuse: 1,
            seed: 0,
            adjacent_jaccard: 0.5,
            kv_l1: 0.25,
            attn_cos: 0.9,
            needle_fraction: 1.0,
            needle_intact: true,
            micros_compress: 12.0,
        };
        let rec = row.record();
        assert_eq!(rec.len(), SWEEP_HEADER.len());
        assert_eq!(rec[2], "0.1");
        assert_eq!(rec[10], "12.000");
    }
}
