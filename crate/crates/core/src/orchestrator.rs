//! Goodput decision loop.
//!
//! Every candidate `(S', B_g', B_m')` is scored with the LR-aware Goodput.
//! Candidates that need a different strategy are multiplied by the
//! reallocation factor `T_useful / (T_elapsed + c_reconfig)`. The best
//! candidate is adopted only if it beats the current configuration's
//! (unpenalized) score by the switching margin.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use thiserror::Error;

use crate::goodput::goodput_lr;
use crate::profile::{Candidate, ConfigTuple, ParallelStrategy};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OrchestratorConfig {
    /// Minimum relative improvement before acting.
    pub margin: f64,
    /// Largest allowed `B_g` multiplier per decision.
    pub max_growth: f64,
    /// Optimizer steps between decisions.
    pub decision_interval: u64,
    /// Expected cost of one strategy change, seconds.
    pub reconfig_cost: f64,
    pub reference_batch: f64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            margin: 0.10,
            max_growth: 2.0,
            decision_interval: 25,
            reconfig_cost: 45.0,
            reference_batch: 16.0,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if !(self.margin >= 0.0) {
            return Err(OrchestratorError::InvalidConfig("margin must be >= 0"));
        }
        if !(self.max_growth >= 1.0) {
            return Err(OrchestratorError::InvalidConfig("max_growth must be >= 1"));
        }
        if self.decision_interval == 0 {
            return Err(OrchestratorError::InvalidConfig("decision_interval must be >= 1"));
        }
        if !(self.reconfig_cost >= 0.0) {
            return Err(OrchestratorError::InvalidConfig("reconfig_cost must be >= 0"));
        }
        if !(self.reference_batch >= 1.0) {
            return Err(OrchestratorError::InvalidConfig("reference_batch must be >= 1"));
        }
        Ok(())
    }
}

/// Wall-clock bookkeeping used by the reallocation factor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClockState {
    pub elapsed: f64,
    /// Elapsed time minus reconfiguration pauses.
    pub useful: f64,
}

impl ClockState {
    pub fn new(elapsed: f64, useful: f64) -> Result<Self, OrchestratorError> {
        if !(0.0 <= useful && useful <= elapsed) {
            return Err(OrchestratorError::InvalidClock { elapsed, useful });
        }
        Ok(Self { elapsed, useful })
    }

    /// Training time: counts as both elapsed and useful.
    pub fn advance(&mut self, seconds: f64) {
        self.elapsed += seconds;
        self.useful += seconds;
    }

    /// `T_useful / (T_elapsed + c_reconfig)`, or 1 when both are zero.
    pub fn reallocation_factor(&self, reconfig_cost: f64) -> f64 {
        let denom = self.elapsed + reconfig_cost;
        if denom > 0.0 {
            self.useful / denom
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "command"))]
pub enum Command {
    NoOp,
    ScaleBs {
        global_batch: u32,
        micro_batch: u32,
    },
    Reconfigure {
        strategy: ParallelStrategy,
        global_batch: u32,
        micro_batch: u32,
    },
}

impl Command {
    /// Configuration in effect after applying the command to `current`.
    pub fn apply(&self, current: ConfigTuple) -> ConfigTuple {
        match *self {
            Command::NoOp => current,
            Command::ScaleBs {
                global_batch,
                micro_batch,
            } => ConfigTuple::new(current.strategy, global_batch, micro_batch),
            Command::Reconfigure {
                strategy,
                global_batch,
                micro_batch,
            } => ConfigTuple::new(strategy, global_batch, micro_batch),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::NoOp => "NoOp",
            Command::ScaleBs { .. } => "ScaleBS",
            Command::Reconfigure { .. } => "Reconfigure",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NoOpReason {
    GnsUnavailable,
    IncumbentBest,
    BelowMargin,
}

impl NoOpReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoOpReason::GnsUnavailable => "gns_unavailable",
            NoOpReason::IncumbentBest => "incumbent_best",
            NoOpReason::BelowMargin => "below_margin",
        }
    }
}

/// A command plus what it was decided from.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Decision {
    pub command: Command,
    pub reason: Option<NoOpReason>,
    pub phi: Option<f64>,
    pub current: ConfigTuple,
    pub winner: ConfigTuple,
    pub current_score: Option<f64>,
    /// Winner's score after the reconfiguration penalty, if any.
    pub winner_score: Option<f64>,
    pub penalized: bool,
}

impl Decision {
    fn no_op(reason: NoOpReason, phi: Option<f64>, current: ConfigTuple) -> Self {
        Self {
            command: Command::NoOp,
            reason: Some(reason),
            phi,
            current,
            winner: current,
            current_score: None,
            winner_score: None,
            penalized: false,
        }
    }

    /// Audit-log line with the given step and time.
    pub fn audit(&self, step: u64, time_s: f64) -> AuditRecord {
        AuditRecord {
            step,
            time_s,
            phi: self.phi,
            current_cfg: self.current,
            winner_cfg: self.winner,
            current_score: self.current_score,
            winner_score: self.winner_score,
            penalized: self.penalized,
            command: self.command.name(),
        }
    }
}

/// One row of the decision audit log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditRecord {
    pub step: u64,
    pub time_s: f64,
    pub phi: Option<f64>,
    pub current_cfg: ConfigTuple,
    pub winner_cfg: ConfigTuple,
    pub current_score: Option<f64>,
    pub winner_score: Option<f64>,
    pub penalized: bool,
    pub command: &'static str,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("no candidates to choose from")]
    NoCandidates,
    #[error("invalid orchestrator config: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid clock: elapsed={elapsed} useful={useful}")]
    InvalidClock { elapsed: f64, useful: f64 },
    #[error("current configuration has non-positive throughput")]
    CurrentNotRunnable,
    #[error("{0}")]
    Other(String),
}

struct Scored {
    config: ConfigTuple,
    score: f64,
    penalized: bool,
    is_current: bool,
}

/// `Greater` means `a` is preferred: higher score, then the incumbent, then
/// smaller `B_g`, then larger `d`.
fn preference(a: &Scored, b: &Scored) -> Ordering {
    a.score
        .partial_cmp(&b.score)
        .unwrap_or(Ordering::Equal)
        .then(a.is_current.cmp(&b.is_current))
        .then(b.config.global_batch.cmp(&a.config.global_batch))
        .then(a.config.strategy.d.cmp(&b.config.strategy.d))
}

/// One pass of the decision loop.
///
/// `current` carries the running configuration and its throughput; it need
/// not appear in `candidates`. `phi == None` means the noise-scale stream is
/// not ready yet and forces a `NoOp`.
pub fn decide(
    candidates: &[Candidate],
    phi: Option<f64>,
    current: &Candidate,
    clock: &ClockState,
    cfg: &OrchestratorConfig,
) -> Result<Decision, OrchestratorError> {
    if candidates.is_empty() {
        return Err(OrchestratorError::NoCandidates);
    }
    let Some(phi) = phi.filter(|p| p.is_finite() && *p >= 0.0) else {
        return Ok(Decision::no_op(NoOpReason::GnsUnavailable, None, current.config));
    };
    if !(current.throughput > 0.0) {
        return Err(OrchestratorError::CurrentNotRunnable);
    }

    let score = |c: &Candidate| {
        goodput_lr(
            c.throughput,
            f64::from(c.config.global_batch),
            phi,
            cfg.reference_batch,
        )
    };
    let current_score = score(current);
    let factor = clock.reallocation_factor(cfg.reconfig_cost);
    let growth_cap = cfg.max_growth * f64::from(current.config.global_batch);

    let mut best = Scored {
        config: current.config,
        score: current_score,
        penalized: false,
        is_current: true,
    };
    for c in candidates {
        if c.config == current.config || f64::from(c.config.global_batch) > growth_cap {
            continue;
        }
        let cross = c.config.strategy != current.config.strategy;
        let s = Scored {
            config: c.config,
            score: if cross { score(c) * factor } else { score(c) },
            penalized: cross,
            is_current: false,
        };
        if preference(&s, &best) == Ordering::Greater {
            best = s;
        }
    }

    let mut decision = Decision {
        command: Command::NoOp,
        reason: None,
        phi: Some(phi),
        current: current.config,
        winner: best.config,
        current_score: Some(current_score),
        winner_score: Some(best.score),
        penalized: best.penalized,
    };
    if best.is_current {
        decision.reason = Some(NoOpReason::IncumbentBest);
        return Ok(decision);
    }
    if (best.score - current_score) / current_score < cfg.margin {
        decision.reason = Some(NoOpReason::BelowMargin);
        return Ok(decision);
    }
    decision.command = if best.config.strategy == current.config.strategy {
        Command::ScaleBs {
            global_batch: best.config.global_batch,
            micro_batch: best.config.micro_batch,
        }
    } else {
        Command::Reconfigure {
            strategy: best.config.strategy,
            global_batch: best.config.global_batch,
            micro_batch: best.config.micro_batch,
        }
    };
    Ok(decision)
}

/// Stateful wrapper: config, clock and the history of observed
/// reconfiguration latencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Orchestrator {
    pub cfg: OrchestratorConfig,
    pub clock: ClockState,
    observed: Vec<f64>,
}

impl Orchestrator {
    pub fn new(cfg: OrchestratorConfig) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            clock: ClockState::default(),
            observed: Vec::new(),
        })
    }

    pub fn decide(
        &self,
        candidates: &[Candidate],
        phi: Option<f64>,
        current: &Candidate,
    ) -> Result<Decision, OrchestratorError> {
        decide(candidates, phi, current, &self.clock, &self.cfg)
    }

    /// Charges a reconfiguration pause and refreshes the cost estimate to
    /// the mean of all observed latencies.
    pub fn record_reconfig(&mut self, observed_latency: f64) {
        let latency = observed_latency.max(0.0);
        self.clock.elapsed += latency;
        self.observed.push(latency);
        self.cfg.reconfig_cost = self.observed.iter().sum::<f64>() / self.observed.len() as f64;
    }

    pub fn observed_latencies(&self) -> &[f64] {
        &self.observed
    }
}
