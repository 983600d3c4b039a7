use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use flashsvd_core::ExecMode;

#[derive(Debug, Parser)]
#[command(
    name = "flashsvd",
    version,
    about = "Low-rank encoder compression, verification and memory benchmarks"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command. Values given here override `--config`.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// RNG seed [default: 42]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (model file, CSV or JSON report depending on the command)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML file with defaults for any of these flags (snake_case keys)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Query/token tile rows
    #[arg(long, global = true)]
    pub tile_bm: Option<usize>,
    /// Rank tile width
    #[arg(long, global = true)]
    pub tile_br: Option<usize>,
    /// FFN hidden tile width
    #[arg(long, global = true)]
    pub tile_bdf: Option<usize>,
    /// On-chip budget in bytes for one tile working set
    #[arg(long, global = true)]
    pub sram_budget: Option<u64>,
    /// Execution mode(s), comma separated: dense, naive, flash-v1, flash-v2
    #[arg(long, global = true, value_delimiter = ',')]
    pub mode: Vec<ExecMode>,
    /// Rank(s), comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub rank: Vec<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// Head groups per attention projection (1 = single matrix, heads = per head)
    #[arg(long, global = true)]
    pub groups: Option<usize>,
    #[arg(long, global = true)]
    pub d_model: Option<usize>,
    #[arg(long, global = true)]
    pub d_ff: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Batch size(s), comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub batch: Vec<usize>,
    /// Sequence length(s), comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub seqlen: Vec<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Factorize a dense model (from a file or synthesized) into an FSVD1 file
    Compress {
        /// Dense FSVD1 model to factorize instead of a synthetic one
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run property suites; exits 1 if any check fails
    Verify {
        /// Suite(s) to run: attn, ffn, layer, tiling, meter, threshold, deltas, svd, analytics, format
        #[arg(long = "suite", value_delimiter = ',')]
        suites: Vec<String>,
        /// Randomized cases per equivalence check
        #[arg(long, default_value_t = 24)]
        cases: usize,
        /// Add one byte to the named closed-form formula, to check that the meter suite notices
        #[arg(long, value_name = "FORMULA")]
        inject_off_by_one: Option<String>,
    },
    /// Sweep batch x seqlen x rank x mode and write a CSV report
    Bench {
        /// Timed repetitions per row; wall_ms is their median [default: 3]
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Print thresholds, FLOP, I/O, roofline and decoder estimates
    Plan {
        /// Peak throughput in FLOP/s [default: 1e13]
        #[arg(long)]
        peak_flops: Option<f64>,
        /// Off-chip bandwidth in bytes/s [default: 1e12]
        #[arg(long)]
        beta: Option<f64>,
    },
}
