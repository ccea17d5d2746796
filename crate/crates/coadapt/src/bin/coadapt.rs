use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coadapt::commands::{self, AnalyzeArgs, DecideArgs, ReshardArgs};
use coadapt::config::{RunConfig, ENV_OUT};
use coadapt::formats::{self, parse_config, parse_strategy};
use coadapt::{CliError, Result};
use coadapt_core::orchestrator::OrchestratorConfig;
use coadapt_core::profile::{ConfigTuple, ParallelStrategy, ThroughputProfile};
use coadapt_core::reshard::LatencyModel;
use coadapt_core::sim::SampleTimes;

/// Goodput-driven co-adaptation of batch size and parallel strategy.
#[derive(Debug, Parser)]
#[command(name = "coadapt", version)]
struct Cli {
    /// Run configuration (JSON). The built-in eight-GPU scenario if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config and COADAPT_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// RNG seed; overrides the config and COADAPT_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write the configured synthetic throughput profile as CSV.
    ProfileSynth,
    /// Simulate every configured policy.
    Simulate,
    /// Run one decision against a profile.
    Decide(DecideCli),
    /// Plan a strategy change and estimate its latency.
    ReshardPlan(ReshardCli),
    /// Decision-space Goodput of recorded traces.
    Analyze(AnalyzeCli),
}

#[derive(Debug, Args)]
struct ProfileInput {
    /// Throughput profile CSV.
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, default_value = "unknown")]
    hardware_id: String,
    /// Per-GPU memory capacity in bytes.
    #[arg(long)]
    memory_capacity: Option<f64>,
}

impl ProfileInput {
    fn load(&self) -> Result<ThroughputProfile> {
        formats::load_profile(
            &self.profile,
            &self.hardware_id,
            self.memory_capacity.unwrap_or(f64::INFINITY),
        )
    }
}

#[derive(Debug, Args)]
struct DecideCli {
    #[command(flatten)]
    input: ProfileInput,
    /// Current noise scale; omit when no estimate is available yet.
    #[arg(long)]
    phi: Option<f64>,
    /// Running configuration, e.g. d2-t1-p4-bg16-bm1.
    #[arg(long, value_parser = parse_config_arg)]
    current: ConfigTuple,
    /// Wall-clock seconds since the job started.
    #[arg(long, default_value_t = 0.0)]
    elapsed: f64,
    /// Seconds of those spent training.
    #[arg(long, default_value_t = 0.0)]
    useful: f64,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    max_growth: Option<f64>,
    #[arg(long)]
    reconfig_cost: Option<f64>,
    #[arg(long)]
    reference_batch: Option<f64>,
}

#[derive(Debug, Args)]
struct ReshardCli {
    /// Model description (JSON); a ~2.5B-parameter transformer if omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Source strategy as d,t,p.
    #[arg(long, value_parser = parse_strategy_arg)]
    src: ParallelStrategy,
    /// Target strategy as d,t,p.
    #[arg(long, value_parser = parse_strategy_arg)]
    dst: ParallelStrategy,
    /// Device count both layouts must occupy; each layout's own world size
    /// if omitted.
    #[arg(long)]
    n_gpus: Option<u32>,
    /// Aggregate transfer bandwidth, bytes per second.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Fixed rebuild cost, seconds.
    #[arg(long)]
    overhead: Option<f64>,
}

#[derive(Debug, Args)]
struct AnalyzeCli {
    #[command(flatten)]
    input: ProfileInput,
    /// Trace providing the noise-scale readings.
    #[arg(long)]
    reference: PathBuf,
    /// `events` for the reference's own events, or a count of uniform samples.
    #[arg(long, default_value = "1000", value_parser = parse_samples)]
    samples: SampleTimes,
    #[arg(long, default_value_t = 16.0)]
    reference_batch: f64,
    /// Traces to compare against the reference.
    traces: Vec<PathBuf>,
}

fn parse_config_arg(s: &str) -> std::result::Result<ConfigTuple, String> {
    parse_config(s).map_err(|e| e.to_string())
}

fn parse_strategy_arg(s: &str) -> std::result::Result<ParallelStrategy, String> {
    parse_strategy(s).map_err(|e| e.to_string())
}

fn parse_samples(s: &str) -> std::result::Result<SampleTimes, String> {
    if s == "events" {
        return Ok(SampleTimes::ReferenceEvents);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(SampleTimes::Uniform(n)),
        _ => Err(format!("`{s}` is neither `events` nor a positive count")),
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::standard(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Output directory for commands that do not read a run configuration.
fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(ENV_OUT).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{s}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Cmd::ProfileSynth => {
            let path = commands::profile_synth(&run_config(&cli)?)?;
            println!("{}", path.display());
        }
        Cmd::Simulate => {
            let (summary, _) = commands::simulate(&run_config(&cli)?)?;
            print_json(&summary)?;
        }
        Cmd::Decide(a) => {
            let mut o = OrchestratorConfig::default();
            if let Some(v) = a.margin {
                o.margin = v;
            }
            if let Some(v) = a.max_growth {
                o.max_growth = v;
            }
            if let Some(v) = a.reconfig_cost {
                o.reconfig_cost = v;
            }
            if let Some(v) = a.reference_batch {
                o.reference_batch = v;
            }
            let out = commands::decide(&DecideArgs {
                profile: a.input.load()?,
                phi: a.phi,
                current: a.current,
                elapsed: a.elapsed,
                useful: a.useful,
                orchestrator: o,
            })?;
            print_json(&out)?;
        }
        Cmd::ReshardPlan(a) => {
            let mut latency = LatencyModel::default();
            if let Some(v) = a.bandwidth {
                latency.bandwidth_bytes_per_s = v;
            }
            if let Some(v) = a.overhead {
                latency.fixed_overhead_s = v;
            }
            let out = commands::reshard_plan(&ReshardArgs {
                model: a.model.clone(),
                src: a.src,
                dst: a.dst,
                n_gpus: a.n_gpus,
                latency,
                out_dir: out_dir(&cli),
            })?;
            print_json(&out)?;
        }
        Cmd::Analyze(a) => {
            let out = commands::analyze(&AnalyzeArgs {
                profile: a.input.load()?,
                reference: a.reference.clone(),
                traces: a.traces.clone(),
                samples: a.samples,
                reference_batch: a.reference_batch,
                out_dir: out_dir(&cli),
            })?;
            print_json(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors are input errors: exit 1, not clap's default 2.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
