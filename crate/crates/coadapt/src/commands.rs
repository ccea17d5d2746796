//! Subcommand implementations, separated from argument parsing so tests can
//! call them directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coadapt_core::orchestrator::{decide as decide_once, ClockState, OrchestratorConfig};
use coadapt_core::profile::{Candidate, ConfigTuple, ParallelStrategy, ThroughputProfile};
use coadapt_core::reshard::{layout_for, plan_transfers, LatencyModel, ModelSpec};
use coadapt_core::sim::scenario::toy_3b_model;
use coadapt_core::sim::{
    decision_space_goodput, dominance_fraction, run_sim, time_to_loss, GnsMode, SampleTimes, SimEvent,
    SimTrace,
};
use serde::Serialize;

use crate::config::{ProfileSource, RunConfig};
use crate::error::{CliError, Result};
use crate::formats::{self, PolicySummary, Summary, TraceRow};

/// Writes the configured synthetic profile to `<out_dir>/profile.csv`.
pub fn profile_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let ProfileSource::Synth(spec) = &cfg.profile else {
        return Err(CliError::Validation(
            "profile-synth needs a `synth` profile source".into(),
        ));
    };
    let profile = spec.build()?;
    let path = cfg.out_dir.join("profile.csv");
    formats::save_profile(&profile, &path)?;
    Ok(path)
}

pub fn summarize(trace: &SimTrace, targets: &[f64]) -> Result<PolicySummary> {
    let last = trace
        .final_event()
        .ok_or_else(|| CliError::Internal(format!("{}: empty trace", trace.policy)))?;
    Ok(PolicySummary {
        time_to_loss: targets
            .iter()
            .map(|&t| (t.to_string(), time_to_loss(trace, t)))
            .collect(),
        final_loss: last.loss,
        wall_time_s: last.time_s,
        steps: last.step,
        tokens: last.tokens,
        reconfigurations: trace.reconfig_events.len(),
        reconfig_latency_s: trace.total_reconfig_latency(),
    })
}

/// Runs every policy and writes traces, audit logs and `summary.json`.
///
/// Policies run on separate threads; results are merged in configuration
/// order so output does not depend on scheduling.
pub fn simulate(cfg: &RunConfig) -> Result<(Summary, Vec<SimTrace>)> {
    cfg.validate()?;
    let profile = cfg.profile.load()?;
    let policies = cfg.resolved_policies();
    let sim = cfg.sim_config();

    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = policies
            .iter()
            .map(|p| {
                let (profile, sim) = (&profile, &sim);
                scope.spawn(move || run_sim(profile, p, &cfg.loss, &cfg.gns, sim))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| CliError::Internal("simulation thread panicked".into())))
            .collect()
    });

    let mut traces = Vec::with_capacity(results.len());
    for r in results {
        traces.push(r??);
    }

    let out = &cfg.out_dir;
    let mut summary = Summary {
        targets: cfg.targets.clone(),
        policies: BTreeMap::new(),
    };
    for t in &traces {
        formats::save_trace(t, &out.join(format!("trace_{}.csv", t.policy)))?;
        if !t.decisions.is_empty() && t.policy == "goodput" {
            formats::save_audit(&t.decisions, &out.join(format!("audit_{}.csv", t.policy)))?;
        }
        if matches!(cfg.gns.mode, GnsMode::Stochastic { .. }) {
            formats::save_gns_trace(&t.gns_trace, &out.join(format!("gns_{}.csv", t.policy)))?;
        }
        summary.policies.insert(t.policy.clone(), summarize(t, &cfg.targets)?);
    }
    formats::save_json(&summary, &out.join("summary.json"))?;
    Ok((summary, traces))
}

/// Inputs to a one-off decision.
#[derive(Debug, Clone)]
pub struct DecideArgs {
    pub profile: ThroughputProfile,
    pub phi: Option<f64>,
    pub current: ConfigTuple,
    pub elapsed: f64,
    pub useful: f64,
    pub orchestrator: OrchestratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecideOutput {
    pub command: &'static str,
    /// Configuration to switch to; absent for `NoOp`.
    pub target: Option<String>,
    pub reason: Option<&'static str>,
    pub phi: Option<f64>,
    pub current: String,
    pub winner: String,
    pub current_score: Option<f64>,
    pub winner_score: Option<f64>,
    pub penalized: bool,
    pub reallocation_factor: f64,
}

pub fn decide(args: &DecideArgs) -> Result<DecideOutput> {
    args.orchestrator.validate()?;
    let throughput = args.profile.throughput(&args.current).ok_or_else(|| {
        CliError::Validation(format!("current configuration {} is not a feasible profile entry", args.current))
    })?;
    let clock = ClockState::new(args.elapsed, args.useful)?;
    let current = Candidate {
        config: args.current,
        throughput,
    };
    let d = decide_once(
        &args.profile.feasible_candidates(),
        args.phi,
        &current,
        &clock,
        &args.orchestrator,
    )?;
    let target = d.command.apply(d.current);
    Ok(DecideOutput {
        command: d.command.name(),
        target: (target != d.current).then(|| target.to_string()),
        reason: d.reason.map(|r| r.as_str()),
        phi: d.phi,
        current: d.current.to_string(),
        winner: d.winner.to_string(),
        current_score: d.current_score,
        winner_score: d.winner_score,
        penalized: d.penalized,
        reallocation_factor: clock.reallocation_factor(args.orchestrator.reconfig_cost),
    })
}

#[derive(Debug, Clone)]
pub struct ReshardArgs {
    /// JSON model description; the built-in ~2.5B transformer when absent.
    pub model: Option<PathBuf>,
    pub src: ParallelStrategy,
    pub dst: ParallelStrategy,
    /// When `None`, each layout spans its own `d * t * p` devices.
    pub n_gpus: Option<u32>,
    pub latency: LatencyModel,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReshardOutput {
    pub src: String,
    pub dst: String,
    pub moves: usize,
    pub total_bytes: u64,
    pub max_bytes_per_rank: u64,
    pub latency_s: f64,
    pub plan: PathBuf,
}

pub fn reshard_plan(args: &ReshardArgs) -> Result<ReshardOutput> {
    let model: ModelSpec = match &args.model {
        Some(p) => formats::load_json(p)?,
        None => toy_3b_model(),
    };
    let world = |s: ParallelStrategy| match args.n_gpus {
        Some(n) => Ok(n),
        None => u32::try_from(s.world_size()).map_err(|_| CliError::Validation(format!("{s} is too large"))),
    };
    let src = layout_for(&model, args.src, world(args.src)?)?;
    let dst = layout_for(&model, args.dst, world(args.dst)?)?;
    let plan = plan_transfers(&src, &dst)?;
    let latency_s = args.latency.estimate(&plan)?;
    let path = args.out_dir.join("plan.csv");
    formats::save_plan(&plan, &path)?;
    Ok(ReshardOutput {
        src: args.src.to_string(),
        dst: args.dst.to_string(),
        moves: plan.moves.len(),
        total_bytes: plan.total_bytes,
        max_bytes_per_rank: plan.max_bytes_per_rank,
        latency_s,
        plan: path,
    })
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub profile: ThroughputProfile,
    /// Trace whose noise-scale readings drive the evaluation.
    pub reference: PathBuf,
    pub traces: Vec<PathBuf>,
    pub samples: SampleTimes,
    pub reference_batch: f64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeOutput {
    pub reference: String,
    pub samples: usize,
    /// Fraction of sample times at which the reference policy's Goodput is
    /// at least every other policy's.
    pub dominance: f64,
    pub decomposition: PathBuf,
}

/// Policy name from a `trace_<name>.csv` file name.
pub fn policy_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_prefix("trace_").map(str::to_string).unwrap_or(stem)
}

/// Rebuilds a trace from its CSV, taking throughput from `profile`.
pub fn trace_from_rows(name: String, rows: &[TraceRow], profile: &ThroughputProfile) -> Result<SimTrace> {
    let events = rows
        .iter()
        .map(|r| {
            let throughput = profile.throughput(&r.config).ok_or_else(|| {
                CliError::Validation(format!("{name}: {} is not a feasible profile entry", r.config))
            })?;
            Ok(SimEvent {
                time_s: r.time_s,
                step: r.step,
                tokens: r.tokens,
                config: r.config,
                throughput,
                loss: r.loss,
                phi: r.phi,
                goodput: r.goodput,
                lr: 0.0,
                command: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SimTrace {
        policy: name,
        events,
        ..SimTrace::default()
    })
}

pub fn analyze(args: &AnalyzeArgs) -> Result<AnalyzeOutput> {
    let load = |p: &Path| trace_from_rows(policy_name(p), &formats::load_trace(p)?, &args.profile);
    let reference = load(&args.reference)?;
    let mut traces = vec![reference.clone()];
    for p in &args.traces {
        if p == &args.reference {
            continue;
        }
        let t = load(p)?;
        if traces.iter().any(|x| x.policy == t.policy) {
            return Err(CliError::Validation(format!("policy `{}` given twice", t.policy)));
        }
        traces.push(t);
    }
    let refs: Vec<&SimTrace> = traces.iter().collect();
    let series = decision_space_goodput(&refs, &reference, args.reference_batch, args.samples);
    let path = args.out_dir.join("decomposition.csv");
    formats::save_decomposition(&series, &path)?;
    Ok(AnalyzeOutput {
        reference: reference.policy.clone(),
        samples: series[0].points.len(),
        dominance: dominance_fraction(&series, 0),
        decomposition: path,
    })
}
