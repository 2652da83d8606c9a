//! Command-line driver: generate traces, run one policy, sweep, summarize.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use laser_kv::baselines::{PolicyHandle, PolicyKind};
use laser_kv::config::{validate_config, CompressionConfig, ModelShape};
use laser_kv::harness::{
    self, config_from_flat, format_summary, needle_retention, read_metrics_csv, run_experiment,
    spec_from_flat, summarize, write_csv, write_outcome, HarnessError, OracleRanking,
};
use laser_kv::pipeline::{run_pipeline, write_reports_jsonl};
use laser_kv::trace::{generate_trace, load_trace, save_trace, NeedleSpec};

#[derive(Parser)]
#[command(
    name = "laserkv",
    version,
    about = "Block-wise KV-cache compression experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace file.
    GenTrace(GenTraceArgs),
    /// Run one policy with one config over a trace file.
    Run(RunArgs),
    /// Run a sweep described by a flat key = value spec file.
    Sweep(SweepArgs),
    /// Aggregate metrics CSVs into a summary table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 4096)]
    tokens: usize,
    /// Needle as `position:cosine`; repeatable.
    #[arg(long = "needle")]
    needles: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigFlags {
    /// Flat key = value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    divisor: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    hash_rounds: Option<usize>,
    #[arg(long)]
    hash_bits: Option<usize>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    scoring_window: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    per_block_anchors: bool,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<CompressionConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                config_from_flat(&text)?
            }
            None => CompressionConfig::default(),
        };
        if let Some(v) = self.block_size {
            cfg.block_size = v;
        }
        if let Some(v) = self.ratio {
            cfg.compression_ratio = v;
        }
        if let Some(v) = self.divisor {
            cfg.protection_divisor = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.hash_rounds {
            cfg.hash_rounds = v;
        }
        if let Some(v) = self.hash_bits {
            cfg.hash_bits = v;
        }
        if self.lookback.is_some() {
            cfg.lookback = self.lookback;
        }
        if let Some(v) = self.scoring_window {
            cfg.scoring_window = v;
        }
        if let Some(v) = self.seed {
            cfg.rng_seed = v;
        }
        if self.per_block_anchors {
            cfg.per_block_anchors = true;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value = "laser")]
    policy: PolicyKind,
    /// Summary size for the recursive policy (defaults to the block budget).
    #[arg(long)]
    summary_size: Option<usize>,
    #[command(flatten)]
    config: ConfigFlags,
    /// JSON-lines block report output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV files to aggregate.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the summary as CSV as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit code 2 for configuration problems, 1 for everything else.
enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

fn gen_trace(args: GenTraceArgs) -> Result<(), Failure> {
    let needles = harness::parse_needles(&args.needles.join(","))
        .map_err(|e| Failure::Config(e.into()))?
        .into_iter()
        .map(|(p, c)| NeedleSpec::new(p, c))
        .collect::<Vec<_>>();
    let shape = ModelShape::new(args.layers, args.heads, args.head_dim);
    let trace = generate_trace(shape, args.tokens, &needles, args.seed)
        .map_err(|e| Failure::Config(e.into()))?;
    save_trace(&trace, &args.out)?;
    println!(
        "wrote {} tokens ({}x{}x{}) with {} needles to {}",
        trace.num_tokens(),
        shape.num_layers,
        shape.num_heads,
        shape.head_dim,
        trace.needles().len(),
        args.out.display()
    );
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let trace =
        load_trace(&args.trace).with_context(|| format!("loading {}", args.trace.display()))?;
    let cfg = args.config.resolve().map_err(Failure::Config)?;
    let v = validate_config(&cfg, trace.shape(), trace.num_tokens())
        .map_err(|e| Failure::Config(e.into()))?;
    let policy = PolicyHandle::from_kind(args.policy, args.summary_size);
    let out = run_pipeline(&trace, &v, &policy)?;
    if let Some(path) = &args.report {
        write_reports_jsonl(&out.reports, fs::File::create(path)?)?;
    }
    let positions: Vec<usize> = out.pool.entries().iter().map(|e| e.position).collect();
    let overlap = OracleRanking::new(&trace)?.overlap(&positions);
    println!("policy            {}", args.policy);
    println!(
        "budget per block  {} (anchor {}, local {}, recall {})",
        v.plan.total, v.plan.anchor, v.plan.local, v.plan.recall
    );
    println!("blocks            {}", out.reports.len());
    println!(
        "pool size         {} / {}",
        out.pool.len(),
        trace.num_tokens()
    );
    match needle_retention(&out.pool, &trace) {
        Some(r) => println!("needle retention  {r:.4} (proxy)"),
        None => println!("needle retention  - (no needles)"),
    }
    println!("oracle overlap    {overlap:.4} (proxy)");
    if args.policy == PolicyKind::RecursiveSummary {
        println!("note: recursive is a simplified re-pruning contrast arm");
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let spec = spec_from_flat(&text).map_err(|e| Failure::Config(e.into()))?;
    let outcome = match run_experiment(&spec) {
        Ok(o) => o,
        Err(e @ (HarnessError::InvalidConfig { .. } | HarnessError::InvalidSpec(_))) => {
            return Err(Failure::Config(e.into()))
        }
        Err(e) => return Err(e.into()),
    };
    write_outcome(&outcome, &args.out_dir)?;
    print!("{}", format_summary(&summarize(&outcome.rows)));
    println!(
        "{} runs, {} failed; metrics in {}",
        outcome.rows.len() + outcome.failures.len(),
        outcome.failures.len(),
        args.out_dir.display()
    );
    if !outcome.failures.is_empty() {
        for f in &outcome.failures {
            eprintln!(
                "run failed: policy {} config #{} repetition {}: {}",
                f.policy, f.config_index, f.repetition, f.message
            );
        }
        return Err(Failure::Run(anyhow::anyhow!(
            "{} runs failed",
            outcome.failures.len()
        )));
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for path in &args.inputs {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        rows.extend(read_metrics_csv(file)?);
    }
    let summary = summarize(&rows);
    print!("{}", format_summary(&summary));
    if let Some(out) = &args.out {
        write_csv(&summary, fs::File::create(out)?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("invalid config: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
