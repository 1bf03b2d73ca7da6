//! Subcommand implementations. Each returns `Ok(())` or a [`CliError`]
//! carrying its exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chunkkv::metrics::{fidelity, make_needle_case, needle_retention, NeedleCase};
use chunkkv::model::{init_model, PrefillTrace};
use chunkkv::policies::compress_all;
use chunkkv::reuse::{
    adjacent_similarity, adjacent_similarity_all_heads, compress_cache_timed, head_slice,
    run_with_reuse, similarity_matrix, speedup_estimate,
};
use chunkkv::{
    memory_bytes, BudgetLimit, KeptIndices, MemoryParams, PolicySpec, ReusePlan, ScoreSource,
    TensorView,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, LayerCosts, Prompt};
use crate::error::{CliError, CliResult};
use crate::heatmap;
use crate::report::{
    head_reports, ExperimentReport, NeedleReport, PolicyReport, SpeedupReport, SweepRow, ARTIFACT,
    ARTIFACT_VERSION, SWEEP_HEADER,
};

/// Options shared by every config-driven subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

pub fn load_config(path: &Path, opts: &RunOptions) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = opts.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> CliResult<&Path> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| {
        CliError::Internal(format!("cannot create {}: {e}", cfg.output_dir.display()))
    })?;
    Ok(&cfg.output_dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// File-name-safe form of a policy label.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Where the policies get their scores from.
pub enum Workload {
    Model(PrefillTrace),
    Needle(chunkkv::metrics::SyntheticScores),
}

impl Workload {
    pub fn source(&self) -> &dyn ScoreSource {
        match self {
            Self::Model(t) => t,
            Self::Needle(s) => s,
        }
    }

    pub fn trace(&self) -> Option<&PrefillTrace> {
        match self {
            Self::Model(t) => Some(t),
            Self::Needle(_) => None,
        }
    }
}

pub fn build_workload(cfg: &ExperimentConfig) -> CliResult<Workload> {
    match &cfg.prompt {
        Prompt::Needle(case) => Ok(Workload::Needle(make_needle_case(case)?)),
        _ => {
            let model = init_model(cfg.model)?;
            let tokens = cfg.tokens().unwrap_or_default();
            Ok(Workload::Model(model.prefill(&tokens)?))
        }
    }
}

/// Kept indices `[layer][head]` for one policy, with reuse when planned.
pub fn run_policy(
    src: &dyn ScoreSource,
    spec: &PolicySpec,
    plan: Option<&ReusePlan>,
) -> CliResult<Vec<Vec<KeptIndices>>> {
    Ok(match plan {
        Some(plan) if src.n_layers() == plan.n_layers => run_with_reuse(src, spec, plan)?,
        _ => compress_all(src, spec)?,
    })
}

fn probe_case(cfg: &ExperimentConfig, seq_len: usize) -> NeedleCase {
    match (&cfg.prompt, &cfg.needle) {
        (Prompt::Needle(case), _) | (_, Some(case)) => *case,
        _ => ExperimentConfig::default_probe(seq_len, cfg.model.seed),
    }
}

fn needle_probe(case: &NeedleCase, spec: &PolicySpec) -> CliResult<NeedleReport> {
    let src = make_needle_case(case)?;
    let kept = compress_all(&src, spec)?;
    let (fraction, intact) = needle_retention(&kept[0][0], case);
    Ok(NeedleReport {
        case: *case,
        fraction,
        intact,
    })
}

fn check_analysis_head(cfg: &ExperimentConfig, src: &dyn ScoreSource) -> CliResult<()> {
    if cfg.analysis_head >= src.n_heads() {
        return Err(CliError::Config(format!(
            "analysis_head {} but only {} heads",
            cfg.analysis_head,
            src.n_heads()
        )));
    }
    Ok(())
}

pub fn build_report(cfg: &ExperimentConfig, work: &Workload) -> CliResult<ExperimentReport> {
    let src = work.source();
    check_analysis_head(cfg, src)?;
    let seq_len = src.seq_len();
    let probe = probe_case(cfg, seq_len);
    let mut policies = Vec::with_capacity(cfg.policies.len());
    for spec in &cfg.policies {
        let kept = run_policy(src, spec, cfg.reuse.as_ref())?;
        let heads = head_reports(&kept, seq_len);
        let mean_ratio = heads.iter().map(|h| h.ratio).sum::<f64>() / heads.len() as f64;
        let per_layer = head_slice(&kept, cfg.analysis_head);
        let multi = per_layer.len() >= 2;
        let needle = match work {
            Workload::Needle(_) => {
                let (fraction, intact) = needle_retention(&kept[0][0], &probe);
                NeedleReport {
                    case: probe,
                    fraction,
                    intact,
                }
            }
            Workload::Model(_) => needle_probe(&probe, spec)?,
        };
        policies.push(PolicyReport {
            label: spec.label(),
            kind: spec.kind.slug().to_string(),
            heads,
            mean_ratio,
            adjacent_jaccard: multi.then(|| adjacent_similarity(&per_layer)).transpose()?,
            adjacent_jaccard_all_heads: multi
                .then(|| adjacent_similarity_all_heads(&kept))
                .transpose()?,
            similarity: multi.then(|| similarity_matrix(&per_layer)).transpose()?,
            fidelity: work.trace().map(|t| fidelity(t, &kept)).transpose()?,
            needle,
            speedup: cfg
                .reuse
                .map(|p| -> CliResult<SpeedupReport> {
                    Ok(SpeedupReport {
                        n_layers: p.n_layers,
                        n_reuse: p.n_reuse,
                        analytic_select_free: speedup_estimate(p.n_layers, p.n_reuse, 1.0, 0.0)?,
                    })
                })
                .transpose()?,
        });
    }
    Ok(ExperimentReport {
        artifact: ARTIFACT.to_string(),
        artifact_version: ARTIFACT_VERSION.to_string(),
        config: cfg.clone(),
        seq_len,
        policies,
    })
}

fn nested(t: &TensorView) -> Vec<&[f32]> {
    t.row_iter().collect()
}

fn dump_trace(path: &Path, trace: &PrefillTrace) -> CliResult<()> {
    #[derive(Serialize)]
    struct HeadDump<'a> {
        q: Vec<&'a [f32]>,
        k: Vec<&'a [f32]>,
        v: Vec<&'a [f32]>,
        last_row_attn: &'a [f32],
    }
    #[derive(Serialize)]
    struct TraceDump<'a> {
        tokens: &'a [u32],
        layers: Vec<Vec<HeadDump<'a>>>,
        last_logits: &'a [f32],
    }
    let layers = trace
        .layers
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|h| HeadDump {
                    q: nested(&h.q),
                    k: nested(&h.k),
                    v: nested(&h.v),
                    last_row_attn: &h.last_row_attn,
                })
                .collect()
        })
        .collect();
    write_json(
        path,
        &TraceDump {
            tokens: &trace.tokens,
            layers,
            last_logits: &trace.last_logits,
        },
    )
}

#[derive(Serialize)]
struct Timings {
    command: &'static str,
    wall_micros: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    layer_costs: Vec<(String, LayerCosts)>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    reuse_bench: Vec<BenchRow>,
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> CliResult<ExperimentReport> {
    let start = Instant::now();
    let work = build_workload(cfg)?;
    let report = build_report(cfg, &work)?;
    let dir = output_dir(cfg)?;
    write_json(&dir.join("report.json"), &report)?;
    if cfg.dump_trace {
        if let Some(trace) = work.trace() {
            dump_trace(&dir.join("trace.json"), trace)?;
        }
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for p in &report.policies {
        let jac = p
            .adjacent_jaccard
            .map_or_else(|| "-".to_string(), |j| format!("{j:.4}"));
        writeln!(
            out,
            "{:<16} mean_ratio={:.4} adjacent_jaccard={jac} needle_intact={}",
            p.label, p.mean_ratio, p.needle.intact
        )?;
    }
    write_json(
        &dir.join("timings.json"),
        &Timings {
            command: "simulate",
            wall_micros: micros(start.elapsed()),
            layer_costs: Vec::new(),
            reuse_bench: Vec::new(),
        },
    )?;
    Ok(report)
}

pub fn cmd_needle(cfg: &ExperimentConfig) -> CliResult<ExperimentReport> {
    if !matches!(cfg.prompt, Prompt::Needle(_)) && cfg.needle.is_none() {
        return Err(CliError::Config(
            "needle needs a needle prompt or a needle probe in the config".into(),
        ));
    }
    let report = cmd_simulate(cfg)?;
    for p in &report.policies {
        println!(
            "needle {:<16} fraction={:.4} intact={}",
            p.label, p.needle.fraction, p.needle.intact
        );
    }
    Ok(report)
}

pub fn cmd_similarity(cfg: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    if cfg.n_layers() < 2 {
        return Err(CliError::Config(
            "similarity needs at least two layers".into(),
        ));
    }
    let work = build_workload(cfg)?;
    let src = work.source();
    check_analysis_head(cfg, src)?;
    let dir = output_dir(cfg)?;
    let mut written = Vec::new();
    for spec in &cfg.policies {
        let kept = run_policy(src, spec, cfg.reuse.as_ref())?;
        let m = similarity_matrix(&head_slice(&kept, cfg.analysis_head))?;
        let stem = file_stem(&spec.label());
        let csv = dir.join(format!("similarity_{stem}.csv"));
        let pgm = dir.join(format!("similarity_{stem}.pgm"));
        fs::write(&csv, heatmap::to_csv(&m))?;
        fs::write(&pgm, heatmap::to_pgm(&m))?;
        println!("{} -> {}, {}", spec.label(), csv.display(), pgm.display());
        written.push(csv);
        written.push(pgm);
    }
    Ok(written)
}

pub fn cmd_memory(p: &MemoryParams) -> CliResult<u64> {
    let bytes = memory_bytes(p)?;
    println!("{}", format_memory(bytes));
    Ok(bytes)
}

pub fn format_memory(bytes: u64) -> String {
    format!(
        "{bytes} bytes ({:.2} GiB)",
        bytes as f64 / f64::from(1u32 << 30)
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn mean_micros(ds: &[Duration]) -> Option<f64> {
    (!ds.is_empty()).then(|| ds.iter().map(|&d| micros(d)).sum::<f64>() / ds.len() as f64)
}

const CALIBRATION_REPS: usize = 5;

/// Per-layer cost of scoring on an anchor layer and of the index lookup on
/// a non-anchor layer, medians over a few timed passes.
fn calibrate(trace: &PrefillTrace, spec: &PolicySpec) -> CliResult<LayerCosts> {
    let n_layers = trace.n_layers();
    let plan = ReusePlan::new(n_layers, if n_layers >= 2 { 2 } else { 1 })?;
    let layers: Vec<_> = (0..n_layers).map(|l| trace.layer_kv(l)).collect();
    let mut tc = Vec::new();
    let mut ts = Vec::new();
    for _ in 0..CALIBRATION_REPS {
        let (_, timing) = compress_cache_timed(trace, &layers, spec, &plan)?;
        tc.push(mean_micros(&timing.compress).unwrap_or(0.0));
        ts.push(mean_micros(&timing.select).unwrap_or(0.0));
    }
    let compress_us = median(tc).max(f64::MIN_POSITIVE);
    // an index lookup never costs more than recomputing the indices
    let select_us = median(ts).min(compress_us);
    Ok(LayerCosts {
        compress_us,
        select_us,
    })
}

fn modeled_micros(plan: &ReusePlan, costs: &LayerCosts) -> f64 {
    let anchors = plan.anchor_count();
    anchors as f64 * costs.compress_us + (plan.n_layers - anchors) as f64 * costs.select_us
}

fn with_axes(spec: &PolicySpec, c: usize, ratio: f64) -> PolicySpec {
    let mut s = spec.clone();
    s.budget.chunk_size = c;
    s.budget.limit = BudgetLimit::Ratio(ratio);
    s
}

struct Cell {
    policy: usize,
    c: usize,
    ratio: f64,
    n_reuse: usize,
    seed_idx: usize,
}

fn sorted_dedup<T: Copy>(v: &[T], cmp: impl Fn(&T, &T) -> std::cmp::Ordering) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort_by(&cmp);
    v.dedup_by(|a, b| cmp(a, b).is_eq());
    v
}

fn thread_pool(workers: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be >= 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, workers: Option<usize>) -> CliResult<Vec<SweepRow>> {
    let start = Instant::now();
    let axes = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep needs sweep axes in the config".into()))?;
    if matches!(cfg.prompt, Prompt::Needle(_)) {
        return Err(CliError::Config("sweep needs a model prompt".into()));
    }
    let chunk_sizes = sorted_dedup(&axes.chunk_sizes, Ord::cmp);
    let ratios = sorted_dedup(&axes.ratios, f64::total_cmp);
    let reuse = sorted_dedup(&axes.n_reuse, Ord::cmp);
    let seeds = sorted_dedup(&axes.seeds, Ord::cmp);
    let pool = thread_pool(workers)?;

    let traces: Vec<Arc<PrefillTrace>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| -> CliResult<Arc<PrefillTrace>> {
                let mut c = cfg.clone();
                c.override_seed(seed);
                match build_workload(&c)? {
                    Workload::Model(t) => Ok(Arc::new(t)),
                    Workload::Needle(_) => {
                        Err(CliError::Internal("unexpected needle workload".into()))
                    }
                }
            })
            .collect::<CliResult<_>>()
    })?;
    check_analysis_head(cfg, traces[0].as_ref())?;

    let costs: Vec<LayerCosts> = match cfg.layer_costs {
        Some(c) => vec![c; cfg.policies.len()],
        None => cfg
            .policies
            .iter()
            .map(|p| calibrate(&traces[0], p))
            .collect::<CliResult<_>>()?,
    };

    let mut cells = Vec::new();
    for policy in 0..cfg.policies.len() {
        for &c in &chunk_sizes {
            for &ratio in &ratios {
                for &n_reuse in &reuse {
                    for seed_idx in 0..seeds.len() {
                        cells.push(Cell {
                            policy,
                            c,
                            ratio,
                            n_reuse,
                            seed_idx,
                        });
                    }
                }
            }
        }
    }

    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| -> CliResult<SweepRow> {
                let spec = with_axes(&cfg.policies[cell.policy], cell.c, cell.ratio);
                let trace = traces[cell.seed_idx].as_ref();
                let seed = seeds[cell.seed_idx];
                let plan = ReusePlan::new(trace.n_layers(), cell.n_reuse)?;
                let kept = run_with_reuse(trace, &spec, &plan)?;
                let per_layer = head_slice(&kept, cfg.analysis_head);
                let adjacent_jaccard = if per_layer.len() >= 2 {
                    adjacent_similarity(&per_layer)?
                } else {
                    1.0
                };
                let fid = fidelity(trace, &kept)?;
                let mut probe = probe_case(cfg, trace.seq_len());
                probe.seed = seed;
                let needle = needle_probe(&probe, &spec)?;
                Ok(SweepRow {
                    policy: spec.label(),
                    c: cell.c,
                    ratio: cell.ratio,
                    n_reuse: cell.n_reuse,
                    seed,
                    adjacent_jaccard,
                    kv_l1: fid.kv_l1,
                    attn_cos: fid.attn_cos,
                    needle_fraction: needle.fraction,
                    needle_intact: needle.intact,
                    micros_compress: modeled_micros(&plan, &costs[cell.policy]),
                })
            })
            .collect::<CliResult<_>>()
    })?;

    let dir = output_dir(cfg)?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record(SWEEP_HEADER)?;
    for r in &rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    println!(
        "{} rows ({} policies x {} chunk sizes x {} ratios x {} reuse x {} seeds) -> {}",
        rows.len(),
        cfg.policies.len(),
        chunk_sizes.len(),
        ratios.len(),
        reuse.len(),
        seeds.len(),
        dir.join("sweep.csv").display()
    );
    write_json(
        &dir.join("timings.json"),
        &Timings {
            command: "sweep",
            wall_micros: micros(start.elapsed()),
            layer_costs: cfg
                .policies
                .iter()
                .map(PolicySpec::label)
                .zip(costs)
                .collect(),
            reuse_bench: Vec::new(),
        },
    )?;
    Ok(rows)
}

/// One line of the reuse benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub policy: String,
    pub n_reuse: usize,
    /// Median per-layer cost of an anchor layer, microseconds.
    pub t_compress_us: f64,
    /// Median per-layer cost of a non-anchor layer, microseconds.
    pub t_select_us: f64,
    pub analytic: f64,
    pub analytic_select_free: f64,
    /// Median baseline total over median total at this `n_reuse`.
    pub measured: f64,
}

pub const BENCH_REPS: usize = 7;

pub fn cmd_reuse_bench(cfg: &ExperimentConfig) -> CliResult<Vec<BenchRow>> {
    let start = Instant::now();
    let plan = cfg
        .reuse
        .ok_or_else(|| CliError::Config("reuse-bench needs a reuse plan in the config".into()))?;
    let work = build_workload(cfg)?;
    let trace = work
        .trace()
        .ok_or_else(|| CliError::Config("reuse-bench needs a model prompt".into()))?;
    let n_layers = trace.n_layers();
    let mut values = vec![1, plan.n_reuse];
    if let Some(axes) = &cfg.sweep {
        values.extend(&axes.n_reuse);
    }
    let values = sorted_dedup(&values, Ord::cmp);
    let plans: Vec<ReusePlan> = values
        .iter()
        .map(|&n| ReusePlan::new(n_layers, n))
        .collect::<chunkkv::Result<_>>()?;
    let baseline = ReusePlan::new(n_layers, 1)?;
    let layers: Vec<_> = (0..n_layers).map(|l| trace.layer_kv(l)).collect();

    let mut rows = Vec::new();
    for spec in &cfg.policies {
        let mut base_totals = Vec::new();
        let mut totals = vec![Vec::new(); plans.len()];
        let mut tc = vec![Vec::new(); plans.len()];
        let mut ts = vec![Vec::new(); plans.len()];
        // interleave so drift hits every configuration alike
        for _ in 0..BENCH_REPS {
            let (_, t) = compress_cache_timed(trace, &layers, spec, &baseline)?;
            base_totals.push(micros(t.total));
            for (i, p) in plans.iter().enumerate() {
                let (_, t) = compress_cache_timed(trace, &layers, spec, p)?;
                totals[i].push(micros(t.total));
                if let Some(x) = mean_micros(&t.compress) {
                    tc[i].push(x);
                }
                if let Some(x) = mean_micros(&t.select) {
                    ts[i].push(x);
                }
            }
        }
        let base = median(base_totals);
        for (i, p) in plans.iter().enumerate() {
            let t_c = median(tc[i].clone()).max(f64::MIN_POSITIVE);
            let t_s = if ts[i].is_empty() {
                0.0
            } else {
                median(ts[i].clone())
            };
            let row = BenchRow {
                policy: spec.label(),
                n_reuse: p.n_reuse,
                t_compress_us: t_c,
                t_select_us: t_s,
                analytic: speedup_estimate(n_layers, p.n_reuse, t_c, t_s)?,
                analytic_select_free: speedup_estimate(n_layers, p.n_reuse, t_c, 0.0)?,
                measured: base / median(totals[i].clone()).max(f64::MIN_POSITIVE),
            };
            println!(
                "{:<16} n_reuse={:<3} t_c={:>10.2}us t_s={:>8.2}us analytic={:.3} analytic(t_s=0)={:.3} measured={:.3}",
                row.policy,
                row.n_reuse,
                row.t_compress_us,
                row.t_select_us,
                row.analytic,
                row.analytic_select_free,
                row.measured
            );
            rows.push(row);
        }
    }
    let dir = output_dir(cfg)?;
    write_json(
        &dir.join("timings.json"),
        &Timings {
            command: "reuse-bench",
            wall_micros: micros(start.elapsed()),
            layer_costs: Vec::new(),
            reuse_bench: rows.clone(),
        },
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_line_format() {
        assert_eq!(format_memory(1 << 30), "1073741824 bytes (1.00 GiB)");
        assert_eq!(format_memory(2), "2 bytes (0.00 GiB)");
    }

    #[test]
    fn file_stems_are_safe() {
        assert_eq!(file_stem("snap/kv p=3"), "snap_kv_p_3");
        assert_eq!(file_stem("chunk-kv_10"), "chunk-kv_10");
    }

    #[test]
    fn modeled_cost_falls_with_reuse() {
        let costs = LayerCosts {
            compress_us: 10.0,
            select_us: 1.0,
        };
        let mut last = f64::INFINITY;
        for n in [1, 2, 4, 8] {
            let m = modeled_micros(&ReusePlan::new(8, n).unwrap(), &costs);
            assert!(m <= last);
            // total cost ratio agrees with the analytic speedup
            let s = speedup_estimate(8, n, 10.0, 1.0).unwrap();
            assert!((80.0 / m - s).abs() < 1e-12);
            last = m;
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
