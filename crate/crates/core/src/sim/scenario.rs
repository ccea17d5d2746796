//! The standard synthetic scenario: eight GPUs, a pipeline-heavy strategy
//! that wins at small batches and a pure data-parallel strategy that wins
//! at large ones, and a noise scale that grows through the crossing.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::{GnsMode, GnsSource, GnsTrajectory, LossModel, Policy, ReconfigLatency, SimConfig};
use crate::orchestrator::OrchestratorConfig;
use crate::profile::{
    pow2_grid, synth_profile, CostModelParams, MemoryModel, ParallelStrategy, ProfileError,
    SaturatingCurve, ThroughputProfile,
};
use crate::reshard::{LatencyModel, ModelSpec};

pub const PIPELINE_HEAVY: ParallelStrategy = ParallelStrategy::new(2, 1, 4);
pub const DATA_PARALLEL: ParallelStrategy = ParallelStrategy::new(8, 1, 1);

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub cost_model: CostModelParams,
    pub strategies: Vec<ParallelStrategy>,
    pub batch_grid: Vec<u32>,
    pub micro_grid: Vec<u32>,
    pub memory_capacity: f64,
    pub loss: LossModel,
    pub gns: GnsSource,
    pub sim: SimConfig,
    pub policies: Vec<Policy>,
}

/// Dense transformer with roughly 2.5B parameters.
pub fn toy_3b_model() -> ModelSpec {
    ModelSpec::transformer(32, 2560, 10240)
}

impl Scenario {
    pub fn standard() -> Self {
        let mut curves = BTreeMap::new();
        curves.insert(PIPELINE_HEAVY, SaturatingCurve { t_max: 16.0, b_hw: 8.0 });
        curves.insert(DATA_PARALLEL, SaturatingCurve { t_max: 24.0, b_hw: 96.0 });
        Self {
            cost_model: CostModelParams {
                curves,
                pipeline_bubble: true,
                memory: MemoryModel {
                    model_bytes: 40.0e9,
                    activation_bytes_per_sample: 6.0e9,
                },
            },
            strategies: vec![PIPELINE_HEAVY, DATA_PARALLEL],
            batch_grid: pow2_grid(16, 2048),
            micro_grid: vec![1, 2, 4, 8],
            memory_capacity: 80.0e9,
            loss: LossModel::default(),
            gns: GnsSource {
                trajectory: GnsTrajectory {
                    phi0: 8.0,
                    growth_tokens: 2.5e7,
                },
                mode: GnsMode::Analytic,
            },
            sim: SimConfig {
                token_budget: 5_000_000_000,
                seq_len: 2048,
                initial_batch: 16,
                base_lr: 2.0e-4,
                warmup_tokens: None,
                reconfig: ReconfigLatency::Planned {
                    model: toy_3b_model(),
                    latency: LatencyModel::default(),
                },
                seed: 0,
            },
            policies: Self::standard_policies(),
        }
    }

    /// The adaptive policy, five static batches and two critical-batch
    /// baselines pinned to either strategy.
    pub fn standard_policies() -> Vec<Policy> {
        let mut p = vec![Policy::Goodput {
            orchestrator: OrchestratorConfig::default(),
        }];
        p.extend([16, 32, 64, 128, 1024].map(|b| Policy::StaticGbs { global_batch: b }));
        p.push(Policy::cbs(PIPELINE_HEAVY, 1));
        p.push(Policy::cbs(DATA_PARALLEL, 1));
        p
    }

    pub fn profile(&self) -> Result<ThroughputProfile, ProfileError> {
        synth_profile(
            "synthetic-8gpu",
            &self.cost_model,
            &self.strategies,
            &self.batch_grid,
            &self.micro_grid,
            self.memory_capacity,
        )
    }

    /// Same dynamics on a single strategy whose throughput does not depend
    /// on the batch size.
    pub fn flat(&self) -> Self {
        let mut s = self.clone();
        let mut curves = BTreeMap::new();
        curves.insert(DATA_PARALLEL, SaturatingCurve { t_max: 40.0, b_hw: 1e-9 });
        s.cost_model.curves = curves;
        s.cost_model.pipeline_bubble = false;
        s.strategies = vec![DATA_PARALLEL];
        s.policies = vec![
            Policy::Goodput {
                orchestrator: OrchestratorConfig::default(),
            },
            Policy::cbs(DATA_PARALLEL, 1),
            Policy::cbs(DATA_PARALLEL, 2),
        ];
        s
    }
}
