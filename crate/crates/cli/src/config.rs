//! Experiment configuration document.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chunkkv::metrics::{NeedleCase, NoiseModel};
use chunkkv::model::{random_tokens, ModelConfig};
use chunkkv::{PolicySpec, ReusePlan};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    Random { len: usize, seed: u64 },
    Tokens(Vec<u32>),
    Needle(NeedleCase),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub chunk_sizes: Vec<usize>,
    pub ratios: Vec<f64>,
    #[serde(default = "one_reuse")]
    pub n_reuse: Vec<usize>,
    pub seeds: Vec<u64>,
}

fn one_reuse() -> Vec<usize> {
    vec![1]
}

/// Fixed per-layer costs, in microseconds, for the modeled
/// `micros_compress` column. When absent the sweep calibrates them on the
/// machine, which makes that one column wall-clock dependent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCosts {
    pub compress_us: f64,
    pub select_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub model: ModelConfig,
    pub prompt: Prompt,
    pub policies: Vec<PolicySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reuse: Option<ReusePlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
    /// Needle probe used alongside a model prompt; sweeps fall back to
    /// [`ExperimentConfig::default_probe`] when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle: Option<NeedleCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_costs: Option<LayerCosts>,
    /// Head whose per-layer kept sets feed the similarity statistics.
    #[serde(default)]
    pub analysis_head: usize,
    #[serde(default)]
    pub dump_trace: bool,
    /// Not echoed into reports: where a run writes must not change what it
    /// writes.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| bad(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(bad(format!(
                "unsupported schema {}, expected {SCHEMA_VERSION}",
                self.schema
            )));
        }
        self.model.validate()?;
        if self.policies.is_empty() {
            return Err(bad("at least one policy is required"));
        }
        let mut labels = BTreeSet::new();
        for p in &self.policies {
            p.validate()?;
            if !labels.insert(p.label()) {
                return Err(bad(format!("duplicate policy label {:?}", p.label())));
            }
        }
        match &self.prompt {
            Prompt::Random { len, .. } if *len == 0 => {
                return Err(bad("prompt length must be >= 1"))
            }
            Prompt::Tokens(t) if t.is_empty() => return Err(bad("prompt token list is empty")),
            Prompt::Needle(case) => case.validate()?,
            _ => {}
        }
        if let Some(plan) = &self.reuse {
            plan.validate()?;
            if plan.n_layers != self.n_layers() {
                return Err(bad(format!(
                    "reuse plan covers {} layers, the experiment has {}",
                    plan.n_layers,
                    self.n_layers()
                )));
            }
        }
        if let Some(axes) = &self.sweep {
            if axes.chunk_sizes.is_empty()
                || axes.ratios.is_empty()
                || axes.n_reuse.is_empty()
                || axes.seeds.is_empty()
            {
                return Err(bad("sweep axes must all be non-empty"));
            }
            if axes.chunk_sizes.contains(&0) {
                return Err(bad("sweep chunk sizes must be >= 1"));
            }
            if axes.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
                return Err(bad("sweep ratios must lie in (0, 1]"));
            }
            for &n in &axes.n_reuse {
                ReusePlan::new(self.model.n_layers, n)?;
            }
        }
        if let Some(case) = &self.needle {
            case.validate()?;
        }
        if let Some(costs) = &self.layer_costs {
            let ok = |x: f64| x.is_finite() && x >= 0.0;
            if !ok(costs.compress_us) || !ok(costs.select_us) {
                return Err(bad("layer costs must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Layers seen by the policies: the model's, or one for a needle prompt.
    pub fn n_layers(&self) -> usize {
        match self.prompt {
            Prompt::Needle(_) => 1,
            _ => self.model.n_layers,
        }
    }

    /// Replaces every seed in the document: model, prompt, needle and sweep.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        match &mut self.prompt {
            Prompt::Random { seed: s, .. } => *s = seed,
            Prompt::Needle(case) => case.seed = seed,
            Prompt::Tokens(_) => {}
        }
        if let Some(case) = &mut self.needle {
            case.seed = seed;
        }
        if let Some(axes) = &mut self.sweep {
            axes.seeds = vec![seed];
        }
    }

    /// Prompt tokens; `None` for a needle prompt.
    pub fn tokens(&self) -> Option<Vec<u32>> {
        match &self.prompt {
            Prompt::Random { len, seed } => Some(random_tokens(*len, self.model.vocab_size, *seed)),
            Prompt::Tokens(t) => Some(t.clone()),
            Prompt::Needle(_) => None,
        }
    }

    /// Needle probe for a model prompt of `seq_len` tokens when none is
    /// configured: an 8-token span a third of the way in, unit signal.
    pub fn default_probe(seq_len: usize, seed: u64) -> NeedleCase {
        let span_len = 8.min(seq_len);
        NeedleCase {
            seq_len,
            span_start: (seq_len / 3).min(seq_len - span_len),
            span_len,
            signal: 1.0,
            seed,
            rows: 8,
            noise: NoiseModel::Uniform,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema": 1,
        "model": {"n_layers": 2, "n_heads": 1, "head_dim": 4, "vocab_size": 16},
        "prompt": {"random": {"len": 32, "seed": 1}},
        "policies": [{"kind": "ChunkKV", "budget": {"limit": {"ratio": 0.5}, "window": 2, "chunk_size": 4}}]
    }"#;

    #[test]
    fn minimal_document_parses_with_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert_eq!(cfg.analysis_head, 0);
        assert_eq!(cfg.tokens().unwrap().len(), 32);
    }

    #[test]
    fn schema_is_mandatory() {
        let text = MINIMAL.replace("\"schema\": 1,", "");
        assert!(matches!(
            ExperimentConfig::parse(&text),
            Err(CliError::Config(_))
        ));
        let text = MINIMAL.replace("\"schema\": 1", "\"schema\": 2");
        assert!(matches!(
            ExperimentConfig::parse(&text),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn unknown_fields_and_duplicates_are_rejected() {
        let text = MINIMAL.replace("\"schema\": 1,", "\"schema\": 1, \"polices\": [],");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = MINIMAL.replace("\"policies\": [", "\"policies\": [{\"kind\": \"ChunkKV\"},");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn empty_sweep_axis_is_rejected() {
        let text = MINIMAL.replace(
            "\"schema\": 1,",
            "\"schema\": 1, \"sweep\": {\"chunk_sizes\": [], \"ratios\": [0.1], \"seeds\": [0]},",
        );
        assert!(matches!(
            ExperimentConfig::parse(&text),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.override_seed(42);
        assert_eq!(cfg.model.seed, 42);
        assert_eq!(cfg.prompt, Prompt::Random { len: 32, seed: 42 });
    }

    #[test]
    fn default_probe_fits_short_prompts() {
        let p = ExperimentConfig::default_probe(5, 0);
        assert!(p.validate().is_ok());
        assert_eq!(p.span(), 0..5);
        let p = ExperimentConfig::default_probe(256, 0);
        assert_eq!(p.span(), 85..93);
    }
}
