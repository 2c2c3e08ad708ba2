//! `tree-attn` command line: `verify`, `bench` and `report`.
//!
//! Exit codes: 0 success, 1 verification or tolerance failure, 2 I/O or
//! argument error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{compare, parse_records, render_report, run_sweep, write_csv, write_json, SweepSpec, DEFAULT_NUMERIC_LIMIT};
use crate::numerics::DType;
use crate::reduction::Strategy;
use crate::sim::{Algo, Topology};
use crate::verify::{run_verify, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tree-attn", version, about = "Exact distributed attention decoding: verification, modelled sweeps and reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the randomised property suites.
    Verify(VerifyArgs),
    /// Sweep sequence length and cluster size, writing one record per cell.
    Bench(BenchArgs),
    /// Compare tree and ring records produced by `bench`.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multiplier on cases per suite.
    #[arg(long, default_value_t = 1)]
    pub grid_size: usize,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgoChoice {
    Tree,
    Ring,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F64,
    F32,
    Bf16,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F64 => DType::F64,
            DTypeArg::F32 => DType::F32,
            DTypeArg::Bf16 => DType::Bf16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Tree,
    Ring,
    Hier,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Tree => Strategy::TreeBinary,
            StrategyArg::Ring => Strategy::Ring,
            StrategyArg::Hier => Strategy::Hierarchical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sequence length; repeat for a sweep.
    #[arg(long = "seq-len", required = true)]
    pub seq_lens: Vec<usize>,
    /// Treat `--seq-len` as positions per worker.
    #[arg(long)]
    pub per_device: bool,
    /// Node counts; repeat for a sweep.
    #[arg(long, default_values_t = [1])]
    pub nodes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub gpus_per_node: usize,
    #[arg(long, default_value_t = 16)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = DTypeArg::Bf16)]
    pub dtype: DTypeArg,
    #[arg(long, value_enum, default_value_t = AlgoChoice::Both)]
    pub algo: AlgoChoice,
    #[arg(long, value_enum, default_value_t = StrategyArg::Hier)]
    pub allreduce: StrategyArg,
    /// Topology file supplying link parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cells with more K elements than this skip the numeric check.
    #[arg(long, default_value_t = DEFAULT_NUMERIC_LIMIT)]
    pub numeric_limit: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// CSV or JSON file written by `bench`.
    pub input: PathBuf,
}

/// Parses `std::env::args` and runs the command against stdout/stderr.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(cli.command, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run<O: Write, E: Write>(command: Command, out: &mut O, err: &mut E) -> i32 {
    match command {
        Command::Verify(a) => cmd_verify(&a, out, err),
        Command::Bench(a) => cmd_bench(&a, out, err),
        Command::Report(a) => cmd_report(&a.input, out, err),
    }
}

pub fn cmd_verify<O: Write, E: Write>(args: &VerifyArgs, out: &mut O, err: &mut E) -> i32 {
    let opts = VerifyOptions { seed: args.seed, grid_size: args.grid_size, inject_fault: args.inject_fault };
    match run_verify(&opts, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}

fn sweep_spec(args: &BenchArgs) -> crate::Result<SweepSpec> {
    let links = match &args.config {
        Some(path) => Topology::from_config_file(path)?,
        None => Topology::default(),
    };
    let algorithms = match args.algo {
        AlgoChoice::Tree => vec![Algo::Tree],
        AlgoChoice::Ring => vec![Algo::Ring],
        AlgoChoice::Both => vec![Algo::Tree, Algo::Ring],
    };
    let spec = SweepSpec {
        seq_lens: args.seq_lens.clone(),
        per_device: args.per_device,
        cluster_sizes: args.nodes.iter().map(|&n| (n, args.gpus_per_node)).collect(),
        batch: args.batch,
        heads: args.heads,
        head_dim: args.head_dim,
        dtype: args.dtype.into(),
        algorithms,
        allreduce: args.allreduce.into(),
        seed: args.seed,
        links,
        numeric_limit: args.numeric_limit,
    };
    spec.validate()?;
    Ok(spec)
}

/// Sidecar metadata path for JSON output: `<out>.meta.json`.
pub fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn cmd_bench<O: Write, E: Write>(args: &BenchArgs, out: &mut O, err: &mut E) -> i32 {
    let spec = match sweep_spec(args) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let outcome = match run_sweep(&spec) {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let meta = spec.metadata();
    let mut buf = Vec::new();
    let written = match args.format {
        FormatArg::Csv => write_csv(&outcome.records, &meta, &mut buf),
        FormatArg::Json => write_json(&outcome.records, &mut buf),
    };
    let written = written.and_then(|()| match &args.out {
        Some(path) => {
            fs::write(path, &buf)?;
            if args.format == FormatArg::Json {
                let sidecar = serde_json::json!({ "metadata": meta, "seed": spec.seed });
                fs::write(meta_path(path), format!("{sidecar:#}\n"))?;
            }
            Ok(())
        }
        None => out.write_all(&buf).and_then(|()| out.flush()),
    });
    if let Err(e) = written {
        let _ = writeln!(err, "error: cannot write output: {e}");
        return EXIT_USAGE;
    }
    for f in &outcome.failures {
        let _ = writeln!(err, "tolerance failure: {f}");
    }
    if outcome.failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

pub fn cmd_report<O: Write, E: Write>(input: &Path, out: &mut O, err: &mut E) -> i32 {
    let text = match fs::read_to_string(input) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "error: cannot read {}: {e}", input.display());
            return EXIT_USAGE;
        }
    };
    let records = match parse_records(&text) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", input.display());
            return EXIT_USAGE;
        }
    };
    match render_report(&compare(&records), &mut *out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}
