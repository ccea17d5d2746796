//! Goodput-driven co-adaptation of global batch size, micro-batch size and
//! 3D parallelism strategy for large-model training.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the pure
//! algorithmic pieces:
//!
//! * [`profile`] - the throughput lookup table over `(S, B_g, B_m)` and a
//!   synthetic saturating cost model for generating one.
//! * [`gns`] - online gradient-noise-scale estimation from per-micro-batch
//!   squared norms, valid under any `(d, t, p)` layout.
//! * [`goodput`] - statistical efficiency, Goodput and its learning-rate
//!   aware variant, plus the closed-form saturating analysis.
//! * [`orchestrator`] - the decision loop that turns a noise-scale estimate
//!   and a throughput table into `NoOp` / `ScaleBs` / `Reconfigure`.
//! * [`reshard`] - shard layouts for a toy model, overlap-based transfer
//!   planning and simulated in-memory execution.
//! * [`sim`] - a deterministic training simulator for the adaptive policy and
//!   the static / critical-batch baselines.
//!
//! File formats, configuration and the command-line driver live in the
//! companion `coadapt` crate.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod gns;
pub mod goodput;
pub mod orchestrator;
pub mod profile;
pub mod reshard;
pub mod sim;

pub use gns::{GnsError, GnsState, MeanGradient, StepAccumulator, StepStats};
pub use goodput::EfficiencyContext;
pub use orchestrator::{
    ClockState, Command, Decision, NoOpReason, Orchestrator, OrchestratorConfig,
    OrchestratorError,
};
pub use profile::{
    Candidate, ConfigTuple, CostModelParams, ParallelStrategy, ProfileError, SaturatingCurve,
    ThroughputEntry, ThroughputProfile,
};
pub use reshard::{ModelSpec, ReshardError, ShardDescriptor, ShardLayout, TransferPlan};
pub use sim::{GnsTrajectory, LossModel, Policy, SimError, SimTrace};
