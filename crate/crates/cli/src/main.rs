use std::path::PathBuf;
use std::process::ExitCode;

use chunkkv::MemoryParams;
use chunkkv_cli::commands::{self, RunOptions};
use chunkkv_cli::CliResult;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "chunkkv",
    version,
    about = "KV-cache compression experiments on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweep cells.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            out: self.out.clone(),
            seed: self.seed,
            workers: self.workers,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Prefill, compress with every policy, write report.json.
    Simulate(Common),
    /// Cartesian sweep over chunk size, ratio, reuse and seed; writes sweep.csv.
    Sweep(Common),
    /// Layer-by-layer similarity matrices as CSV and plain graymap.
    Similarity(Common),
    /// KV-cache bytes for the given shape.
    Memory {
        #[arg(long)]
        batch: u64,
        #[arg(long)]
        seq_len: u64,
        #[arg(long)]
        layers: u64,
        #[arg(long)]
        heads: u64,
        #[arg(long)]
        head_dim: u64,
        /// Bytes per stored scalar (2 for fp16).
        #[arg(long)]
        bytes: u64,
    },
    /// Needle retention per policy.
    Needle(Common),
    /// Time compression with and without layer-wise index reuse.
    ReuseBench(Common),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Memory {
            batch,
            seq_len,
            layers,
            heads,
            head_dim,
            bytes,
        } => {
            commands::cmd_memory(&MemoryParams {
                batch,
                seq_len,
                layers,
                heads,
                head_dim,
                bytes_per_scalar: bytes,
            })?;
        }
        Command::Simulate(c) => {
            commands::cmd_simulate(&commands::load_config(&c.config, &c.options())?)?;
        }
        Command::Sweep(c) => {
            let cfg = commands::load_config(&c.config, &c.options())?;
            commands::cmd_sweep(&cfg, c.workers)?;
        }
        Command::Similarity(c) => {
            commands::cmd_similarity(&commands::load_config(&c.config, &c.options())?)?;
        }
        Command::Needle(c) => {
            commands::cmd_needle(&commands::load_config(&c.config, &c.options())?)?;
        }
        Command::ReuseBench(c) => {
            commands::cmd_reuse_bench(&commands::load_config(&c.config, &c.options())?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, matching the config-error code
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
