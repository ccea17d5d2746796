//! Deterministic training simulator.
//!
//! One optimizer step at `(S, B_g, B_m)` takes `B_g / T(S, B_g, B_m)`
//! seconds and adds `B_g * SE(B_g, phi) * sqrt(B_g / B_ref)` units of
//! effective progress `P`. Loss follows a power law in `P`. The noise scale
//! either follows its trajectory exactly (analytic mode) or is estimated
//! from synthetic micro-batch gradients whose true noise follows the
//! trajectory (stochastic mode).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::{pow, sqrt};
use thiserror::Error;

use crate::gns::{stats_from_micro_gradients, GnsState, GnsTraceRow, MicroGradientSource, StepStats};
use crate::goodput::{cbs_target, goodput_lr, lr_factor, lr_rescale, stat_eff, BatchDistance};
use crate::orchestrator::{AuditRecord, Command, Orchestrator, OrchestratorConfig, OrchestratorError};
use crate::profile::{Candidate, ConfigTuple, ParallelStrategy, ThroughputProfile};
use crate::reshard::{LatencyModel, ModelSpec, ReshardError};

pub mod scenario;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Reshard(#[from] ReshardError),
    #[error("estimator failure: {0}")]
    Gns(#[from] crate::gns::GnsError),
}

/// `L(P) = floor + (initial - floor) * (1 + P / progress_scale)^(-exponent)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossModel {
    pub initial_loss: f64,
    pub floor: f64,
    pub exponent: f64,
    /// Effective samples per unit of the power-law argument.
    pub progress_scale: f64,
    pub reference_batch: f64,
}

impl Default for LossModel {
    fn default() -> Self {
        Self {
            initial_loss: 11.0,
            floor: 1.5,
            exponent: 0.3,
            progress_scale: 1.0e4,
            reference_batch: 16.0,
        }
    }
}

impl LossModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.initial_loss > self.floor && self.floor >= 0.0) {
            return Err(SimError::Config("need initial_loss > floor >= 0".into()));
        }
        if !(self.exponent > 0.0 && self.progress_scale > 0.0 && self.reference_batch >= 1.0) {
            return Err(SimError::Config("loss model parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn loss(&self, progress: f64) -> f64 {
        self.floor
            + (self.initial_loss - self.floor) * pow(1.0 + progress / self.progress_scale, -self.exponent)
    }

    /// Progress of one step at `global_batch` under noise scale `phi`.
    pub fn step_progress(&self, global_batch: f64, phi: f64) -> f64 {
        global_batch * stat_eff(global_batch, phi) * lr_factor(global_batch, self.reference_batch)
    }
}

/// `phi(tokens) = phi0 * (1 + tokens / growth_tokens)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GnsTrajectory {
    pub phi0: f64,
    pub growth_tokens: f64,
}

impl GnsTrajectory {
    pub fn at(&self, tokens: f64) -> f64 {
        self.phi0 * (1.0 + tokens / self.growth_tokens)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.phi0 >= 0.0 && self.growth_tokens > 0.0) {
            return Err(SimError::Config("need phi0 >= 0 and growth_tokens > 0".into()));
        }
        Ok(())
    }
}

/// Where the policy's noise-scale readings come from.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields))]
pub enum GnsMode {
    /// Policies read the trajectory directly.
    Analytic,
    /// Policies read an online estimator fed with synthetic gradients.
    Stochastic {
        /// Gradient dimension of the synthetic source.
        dim: usize,
        estimator: GnsState,
    },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GnsSource {
    pub trajectory: GnsTrajectory,
    pub mode: GnsMode,
}

/// How long a strategy change pauses training.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum ReconfigLatency {
    Fixed { seconds: f64 },
    /// Plan the reshard of `model` and price it.
    Planned { model: ModelSpec, latency: LatencyModel },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum Policy {
    /// Goodput-maximizing co-adaptation of `(S, B_g, B_m)`.
    Goodput { orchestrator: OrchestratorConfig },
    /// Fixed `B_g` on its throughput-optimal strategy and micro-batch.
    StaticGbs { global_batch: u32 },
    /// `B_g` tracks the noise scale; strategy and micro-batch stay fixed.
    Cbs {
        strategy: ParallelStrategy,
        micro_batch: u32,
        #[cfg_attr(feature = "serde", serde(default = "default_interval"))]
        decision_interval: u64,
        #[cfg_attr(feature = "serde", serde(default = "default_growth"))]
        max_growth: f64,
        #[cfg_attr(feature = "serde", serde(default))]
        distance: BatchDistance,
    },
}

#[cfg(feature = "serde")]
fn default_interval() -> u64 {
    OrchestratorConfig::default().decision_interval
}
#[cfg(feature = "serde")]
fn default_growth() -> f64 {
    OrchestratorConfig::default().max_growth
}

impl Policy {
    pub fn cbs(strategy: ParallelStrategy, micro_batch: u32) -> Self {
        let o = OrchestratorConfig::default();
        Policy::Cbs {
            strategy,
            micro_batch,
            decision_interval: o.decision_interval,
            max_growth: o.max_growth,
            distance: BatchDistance::Log,
        }
    }

    /// Stable name used for file names and summaries.
    pub fn name(&self) -> String {
        match self {
            Policy::Goodput { .. } => "goodput".into(),
            Policy::StaticGbs { global_batch } => format!("static-gbs-{global_batch}"),
            Policy::Cbs {
                strategy,
                micro_batch,
                ..
            } => {
                format!("cbs-d{}t{}p{}-bm{}", strategy.d, strategy.t, strategy.p, micro_batch)
            }
        }
    }
}

/// Run-wide parameters shared by every policy.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SimConfig {
    pub token_budget: u64,
    pub seq_len: u64,
    /// Starting `B_g` for adaptive policies.
    pub initial_batch: u32,
    /// Learning rate at the loss model's reference batch.
    pub base_lr: f64,
    /// Linear ramp on progress over this many tokens; `None` disables it.
    #[cfg_attr(feature = "serde", serde(default))]
    pub warmup_tokens: Option<u64>,
    pub reconfig: ReconfigLatency,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
}

/// State after one optimizer step (step 0 is the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time_s: f64,
    pub step: u64,
    pub tokens: u64,
    pub config: ConfigTuple,
    pub throughput: f64,
    pub loss: f64,
    /// Noise scale the policy observed.
    pub phi: Option<f64>,
    /// LR-aware Goodput of the running configuration at `phi`.
    pub goodput: Option<f64>,
    pub lr: f64,
    /// Command applied right before this step.
    pub command: Option<Command>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconfigEvent {
    pub step: u64,
    /// Wall time at which the pause began.
    pub time_s: f64,
    pub from: ParallelStrategy,
    pub to: ParallelStrategy,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTrace {
    pub policy: String,
    pub events: Vec<SimEvent>,
    pub reconfig_events: Vec<ReconfigEvent>,
    pub decisions: Vec<AuditRecord>,
    /// Per-step estimator state; empty in analytic mode.
    pub gns_trace: Vec<GnsTraceRow>,
}

impl SimTrace {
    pub fn total_reconfig_latency(&self) -> f64 {
        self.reconfig_events.iter().fold(0.0, |acc, r| acc + r.latency_s)
    }

    pub fn final_event(&self) -> Option<&SimEvent> {
        self.events.last()
    }
}

struct Stochastic {
    source: MicroGradientSource,
    estimator: GnsState,
    dim: usize,
}

impl Stochastic {
    fn observe(
        &mut self,
        cfg: &ConfigTuple,
        true_phi: f64,
        tokens_this_step: u64,
    ) -> Result<StepStats, SimError> {
        // |G|^2 = 1, so tr(Sigma) equals the raw noise scale; the estimator's
        // calibration maps it back onto the trajectory.
        let per_comp = true_phi / self.estimator.calibration / self.dim as f64;
        self.source.set_sigma_diag(&vec![per_comp; self.dim]);
        let n = (cfg.grad_accum() * cfg.strategy.d) as usize;
        let grads = self.source.draw(cfg.micro_batch, n);
        let stats = stats_from_micro_gradients(&grads, cfg.strategy.d as usize, cfg.global_batch)?;
        self.estimator.update_ema(&stats, tokens_this_step);
        Ok(stats)
    }
}

fn runnable(profile: &ThroughputProfile, cfg: &ConfigTuple) -> Result<f64, SimError> {
    profile
        .throughput(cfg)
        .ok_or_else(|| SimError::Config(format!("{cfg} is not a feasible profile entry")))
}

fn best_config(profile: &ThroughputProfile, global_batch: u32) -> Result<ConfigTuple, SimError> {
    let s = profile
        .optimal_strategy(global_batch)
        .map_err(|e| SimError::Config(format!("{e}")))?;
    let (bm, _) = profile
        .best_micro_batch(s, global_batch)
        .map_err(|e| SimError::Config(format!("{e}")))?;
    Ok(ConfigTuple::new(s, global_batch, bm))
}

/// Plays `policy` until `token_budget` tokens have been consumed.
pub fn run_sim(
    profile: &ThroughputProfile,
    policy: &Policy,
    loss_model: &LossModel,
    gns: &GnsSource,
    sim: &SimConfig,
) -> Result<SimTrace, SimError> {
    loss_model.validate()?;
    gns.trajectory.validate()?;
    if sim.token_budget == 0 || sim.seq_len == 0 {
        return Err(SimError::Config("token_budget and seq_len must be positive".into()));
    }
    let reference = loss_model.reference_batch;

    let mut config = match policy {
        Policy::Goodput { orchestrator } => {
            orchestrator.validate()?;
            best_config(profile, sim.initial_batch)?
        }
        Policy::StaticGbs { global_batch } => best_config(profile, *global_batch)?,
        Policy::Cbs {
            strategy,
            micro_batch,
            decision_interval,
            max_growth,
            ..
        } => {
            if *decision_interval == 0 || !(*max_growth >= 1.0) {
                return Err(SimError::Config("CBS needs decision_interval >= 1 and max_growth >= 1".into()));
            }
            ConfigTuple::new(*strategy, sim.initial_batch, *micro_batch)
        }
    };
    let mut throughput = runnable(profile, &config)?;

    let mut orchestrator = match policy {
        Policy::Goodput { orchestrator } => Some(Orchestrator::new(*orchestrator)?),
        _ => None,
    };
    let candidates = profile.feasible_candidates();
    let cbs_batches: Vec<u32> = match policy {
        Policy::Cbs {
            strategy,
            micro_batch,
            ..
        } => profile
            .global_batches()
            .into_iter()
            .filter(|&b| profile.throughput(&ConfigTuple::new(*strategy, b, *micro_batch)).is_some())
            .collect(),
        _ => Vec::new(),
    };
    let interval = match policy {
        Policy::Goodput { orchestrator } => orchestrator.decision_interval,
        Policy::Cbs {
            decision_interval, ..
        } => *decision_interval,
        Policy::StaticGbs { .. } => u64::MAX,
    };

    let mut stochastic = match &gns.mode {
        GnsMode::Analytic => None,
        GnsMode::Stochastic { dim, estimator } => {
            estimator.validate()?;
            if *dim == 0 {
                return Err(SimError::Config("stochastic dim must be positive".into()));
            }
            let g = vec![1.0 / sqrt(*dim as f64); *dim];
            Some(Stochastic {
                source: MicroGradientSource::new(g, vec![0.0; *dim], sim.seed)?,
                estimator: estimator.clone(),
                dim: *dim,
            })
        }
    };

    let mut latency_cache: BTreeMap<(ParallelStrategy, ParallelStrategy), f64> = BTreeMap::new();
    let mut reconfig_latency = |from: ParallelStrategy, to: ParallelStrategy| -> Result<f64, SimError> {
        if let Some(l) = latency_cache.get(&(from, to)) {
            return Ok(*l);
        }
        let l = match &sim.reconfig {
            ReconfigLatency::Fixed { seconds } => *seconds,
            ReconfigLatency::Planned { model, latency } => {
                latency.transition(model, from, to, profile.n_gpus)?
            }
        };
        latency_cache.insert((from, to), l);
        Ok(l)
    };

    let observed_phi = |tokens: u64, st: &Option<Stochastic>| -> Option<f64> {
        match st {
            None => Some(gns.trajectory.at(tokens as f64)),
            Some(s) => s.estimator.gns().ok(),
        }
    };
    let goodput_at = |t: f64, cfg: &ConfigTuple, phi: Option<f64>| {
        phi.map(|p| goodput_lr(t, f64::from(cfg.global_batch), p, reference))
    };

    let mut trace = SimTrace {
        policy: policy.name(),
        ..Default::default()
    };
    let mut lr = lr_rescale(sim.base_lr, reference, f64::from(config.global_batch));
    let mut time = 0.0;
    let mut tokens: u64 = 0;
    let mut progress = 0.0;
    let mut step: u64 = 0;
    let phi0 = observed_phi(0, &stochastic);
    trace.events.push(SimEvent {
        time_s: 0.0,
        step: 0,
        tokens: 0,
        config,
        throughput,
        loss: loss_model.loss(0.0),
        phi: phi0,
        goodput: goodput_at(throughput, &config, phi0),
        lr,
        command: None,
    });

    while tokens < sim.token_budget {
        step += 1;
        let mut command = None;
        if (step - 1).is_multiple_of(interval) {
            let phi = observed_phi(tokens, &stochastic);
            match policy {
                Policy::Goodput { .. } => {
                    let orch = orchestrator.as_mut().expect("goodput policy has an orchestrator");
                    let current = Candidate { config, throughput };
                    let decision = orch.decide(&candidates, phi, &current)?;
                    trace.decisions.push(decision.audit(step, time));
                    if decision.command != Command::NoOp {
                        let next = decision.command.apply(config);
                        if next.strategy != config.strategy {
                            let latency = reconfig_latency(config.strategy, next.strategy)?;
                            trace.reconfig_events.push(ReconfigEvent {
                                step,
                                time_s: time,
                                from: config.strategy,
                                to: next.strategy,
                                latency_s: latency,
                            });
                            time += latency;
                            orch.record_reconfig(latency);
                        }
                        lr = lr_rescale(lr, f64::from(config.global_batch), f64::from(next.global_batch));
                        config = next;
                        throughput = runnable(profile, &config)?;
                        command = Some(decision.command);
                    }
                }
                Policy::Cbs {
                    max_growth,
                    distance,
                    ..
                } => {
                    if let Some(phi) = phi {
                        let cap = max_growth * f64::from(config.global_batch);
                        let allowed: Vec<u32> =
                            cbs_batches.iter().copied().filter(|&b| f64::from(b) <= cap).collect();
                        let target = cbs_target(phi, &allowed, *distance).unwrap_or(config.global_batch);
                        if target != config.global_batch {
                            let next = ConfigTuple::new(config.strategy, target, config.micro_batch);
                            lr = lr_rescale(lr, f64::from(config.global_batch), f64::from(target));
                            config = next;
                            throughput = runnable(profile, &config)?;
                            command = Some(Command::ScaleBs {
                                global_batch: target,
                                micro_batch: config.micro_batch,
                            });
                        }
                    }
                }
                Policy::StaticGbs { .. } => {}
            }
        }

        let batch = f64::from(config.global_batch);
        let dt = batch / throughput;
        time += dt;
        if let Some(o) = orchestrator.as_mut() {
            o.clock.advance(dt);
        }
        let true_phi = gns.trajectory.at(tokens as f64);
        let step_tokens = u64::from(config.global_batch) * sim.seq_len;
        if let Some(st) = stochastic.as_mut() {
            let stats = st.observe(&config, true_phi, step_tokens)?;
            trace.gns_trace.push(st.estimator.trace_row(step, &stats));
        }
        let mut dp = loss_model.step_progress(batch, true_phi);
        tokens += step_tokens;
        if let Some(w) = sim.warmup_tokens.filter(|&w| w > 0) {
            dp *= (tokens as f64 / w as f64).min(1.0);
        }
        progress += dp;
        let phi = observed_phi(tokens, &stochastic);
        trace.events.push(SimEvent {
            time_s: time,
            step,
            tokens,
            config,
            throughput,
            loss: loss_model.loss(progress),
            phi,
            goodput: goodput_at(throughput, &config, phi),
            lr,
            command,
        });
    }
    Ok(trace)
}

/// First time the loss reaches `target`, interpolating linearly between
/// events. `None` if it never does.
pub fn time_to_loss(trace: &SimTrace, target: f64) -> Option<f64> {
    let first = trace.events.first()?;
    if first.loss <= target {
        return Some(first.time_s);
    }
    for w in trace.events.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.loss <= target {
            let frac = (a.loss - target) / (a.loss - b.loss);
            return Some(a.time_s + frac * (b.time_s - a.time_s));
        }
    }
    None
}

/// Where to evaluate the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleTimes {
    /// Every reference event that carries a noise-scale reading.
    ReferenceEvents,
    /// `n` evenly spaced times across the reference's observed interval.
    Uniform(usize),
}

/// Decision-space Goodput of one policy at one time; `None` fields mean the
/// policy had already finished its budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionPoint {
    pub time_s: f64,
    pub phi: f64,
    pub throughput: Option<f64>,
    /// `SE(B_g, phi) * sqrt(B_g / B_ref)`; not clipped.
    pub efficiency: Option<f64>,
    pub goodput: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionSeries {
    pub policy: String,
    pub points: Vec<DecompositionPoint>,
}

/// Last event at or before `t`, or `None` past the end of the trace.
fn state_at(trace: &SimTrace, t: f64) -> Option<&SimEvent> {
    let last = trace.events.last()?;
    if t > last.time_s {
        return None;
    }
    let idx = trace.events.partition_point(|e| e.time_s <= t);
    idx.checked_sub(1).map(|i| &trace.events[i])
}

/// Evaluates every policy's `(T, B_g)` schedule against the reference
/// trace's noise-scale readings.
pub fn decision_space_goodput(
    traces: &[&SimTrace],
    reference: &SimTrace,
    reference_batch: f64,
    samples: SampleTimes,
) -> Vec<DecompositionSeries> {
    let observed: Vec<&SimEvent> = reference.events.iter().filter(|e| e.phi.is_some()).collect();
    let times: Vec<(f64, f64)> = match samples {
        SampleTimes::ReferenceEvents => observed.iter().map(|e| (e.time_s, e.phi.unwrap())).collect(),
        SampleTimes::Uniform(n) => match (observed.first(), observed.last()) {
            (Some(a), Some(b)) if n > 0 => (0..n)
                .filter_map(|i| {
                    let t = if n == 1 {
                        a.time_s
                    } else {
                        a.time_s + (b.time_s - a.time_s) * i as f64 / (n - 1) as f64
                    };
                    state_at(reference, t).and_then(|e| e.phi).map(|p| (t, p))
                })
                .collect(),
            _ => Vec::new(),
        },
    };
    traces
        .iter()
        .map(|tr| DecompositionSeries {
            policy: tr.policy.clone(),
            points: times
                .iter()
                .map(|&(t, phi)| {
                    let ev = state_at(tr, t);
                    let b = ev.map(|e| f64::from(e.config.global_batch));
                    DecompositionPoint {
                        time_s: t,
                        phi,
                        throughput: ev.map(|e| e.throughput),
                        efficiency: b.map(|b| stat_eff(b, phi) * lr_factor(b, reference_batch)),
                        goodput: ev.map(|e| {
                            goodput_lr(e.throughput, f64::from(e.config.global_batch), phi, reference_batch)
                        }),
                    }
                })
                .collect(),
        })
        .collect()
}

/// Fraction of sample times at which `series[reference]` is at least every
/// other series that still has a value there.
pub fn dominance_fraction(series: &[DecompositionSeries], reference: usize) -> f64 {
    let r = &series[reference];
    if r.points.is_empty() {
        return 0.0;
    }
    let mut wins = 0usize;
    for (i, p) in r.points.iter().enumerate() {
        let Some(g) = p.goodput else { continue };
        let beaten = series
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != reference)
            .any(|(_, s)| s.points[i].goodput.is_some_and(|o| o > g));
        if !beaten {
            wins += 1;
        }
    }
    wins as f64 / r.points.len() as f64
}
