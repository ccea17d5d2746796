//! Run configuration (JSON).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coadapt_core::goodput::BatchDistance;
use coadapt_core::orchestrator::OrchestratorConfig;
use coadapt_core::profile::{
    synth_profile, CostModelParams, MemoryModel, ParallelStrategy, SaturatingCurve, ThroughputProfile,
};
use coadapt_core::sim::scenario::Scenario;
use coadapt_core::sim::{GnsSource, LossModel, Policy, ReconfigLatency, SimConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats;

pub const ENV_OUT: &str = "COADAPT_OUT";
pub const ENV_SEED: &str = "COADAPT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyCurve {
    pub d: u32,
    pub t: u32,
    pub p: u32,
    pub t_max: f64,
    pub b_hw: f64,
}

/// Parameters of a synthetic profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub hardware_id: String,
    /// Checked against the strategies' world size when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_gpus: Option<u32>,
    pub strategies: Vec<StrategyCurve>,
    pub pipeline_bubble: bool,
    pub model_bytes: f64,
    pub activation_bytes_per_sample: f64,
    pub memory_capacity: f64,
    pub batch_grid: Vec<u32>,
    pub micro_grid: Vec<u32>,
}

impl SynthSpec {
    pub fn from_scenario(sc: &Scenario, hardware_id: &str) -> Self {
        Self {
            hardware_id: hardware_id.into(),
            n_gpus: None,
            strategies: sc
                .strategies
                .iter()
                .map(|s| {
                    let c = sc.cost_model.curves[s];
                    StrategyCurve {
                        d: s.d,
                        t: s.t,
                        p: s.p,
                        t_max: c.t_max,
                        b_hw: c.b_hw,
                    }
                })
                .collect(),
            pipeline_bubble: sc.cost_model.pipeline_bubble,
            model_bytes: sc.cost_model.memory.model_bytes,
            activation_bytes_per_sample: sc.cost_model.memory.activation_bytes_per_sample,
            memory_capacity: sc.memory_capacity,
            batch_grid: sc.batch_grid.clone(),
            micro_grid: sc.micro_grid.clone(),
        }
    }

    pub fn build(&self) -> Result<ThroughputProfile> {
        let strategies: Vec<ParallelStrategy> = self
            .strategies
            .iter()
            .map(|c| ParallelStrategy::new(c.d, c.t, c.p))
            .collect();
        let mut curves = BTreeMap::new();
        for (s, c) in strategies.iter().zip(&self.strategies) {
            if curves
                .insert(*s, SaturatingCurve { t_max: c.t_max, b_hw: c.b_hw })
                .is_some()
            {
                return Err(CliError::Validation(format!("strategy {s} listed twice")));
            }
        }
        let params = CostModelParams {
            curves,
            pipeline_bubble: self.pipeline_bubble,
            memory: MemoryModel {
                model_bytes: self.model_bytes,
                activation_bytes_per_sample: self.activation_bytes_per_sample,
            },
        };
        let profile = synth_profile(
            self.hardware_id.clone(),
            &params,
            &strategies,
            &self.batch_grid,
            &self.micro_grid,
            self.memory_capacity,
        )?;
        if let Some(n) = self.n_gpus.filter(|&n| n != profile.n_gpus) {
            return Err(CliError::Validation(format!(
                "n_gpus is {n} but the strategies occupy {} devices",
                profile.n_gpus
            )));
        }
        Ok(profile)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSource {
    Csv {
        path: PathBuf,
        hardware_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        memory_capacity: Option<f64>,
    },
    Synth(SynthSpec),
}

impl ProfileSource {
    pub fn load(&self) -> Result<ThroughputProfile> {
        match self {
            ProfileSource::Csv {
                path,
                hardware_id,
                memory_capacity,
            } => formats::load_profile(path, hardware_id, memory_capacity.unwrap_or(f64::INFINITY)),
            ProfileSource::Synth(s) => s.build(),
        }
    }
}

fn default_interval() -> u64 {
    OrchestratorConfig::default().decision_interval
}

fn default_growth() -> f64 {
    OrchestratorConfig::default().max_growth
}

/// A policy entry. `goodput` without its own settings uses the top-level
/// `orchestrator` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Goodput {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        orchestrator: Option<OrchestratorConfig>,
    },
    StaticGbs {
        global_batch: u32,
    },
    Cbs {
        strategy: ParallelStrategy,
        micro_batch: u32,
        #[serde(default = "default_interval")]
        decision_interval: u64,
        #[serde(default = "default_growth")]
        max_growth: f64,
        #[serde(default)]
        distance: BatchDistance,
    },
}

impl PolicySpec {
    pub fn resolve(&self, orchestrator: &OrchestratorConfig) -> Policy {
        match self {
            PolicySpec::Goodput { orchestrator: o } => Policy::Goodput {
                orchestrator: o.unwrap_or(*orchestrator),
            },
            PolicySpec::StaticGbs { global_batch } => Policy::StaticGbs {
                global_batch: *global_batch,
            },
            PolicySpec::Cbs {
                strategy,
                micro_batch,
                decision_interval,
                max_growth,
                distance,
            } => Policy::Cbs {
                strategy: *strategy,
                micro_batch: *micro_batch,
                decision_interval: *decision_interval,
                max_growth: *max_growth,
                distance: *distance,
            },
        }
    }

    fn from_policy(p: &Policy) -> Self {
        match p {
            Policy::Goodput { .. } => PolicySpec::Goodput { orchestrator: None },
            Policy::StaticGbs { global_batch } => PolicySpec::StaticGbs {
                global_batch: *global_batch,
            },
            Policy::Cbs {
                strategy,
                micro_batch,
                decision_interval,
                max_growth,
                distance,
            } => PolicySpec::Cbs {
                strategy: *strategy,
                micro_batch: *micro_batch,
                decision_interval: *decision_interval,
                max_growth: *max_growth,
                distance: *distance,
            },
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: ProfileSource,
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub orchestrator: OrchestratorConfig,
    #[serde(default)]
    pub loss: LossModel,
    pub gns: GnsSource,
    pub token_budget: u64,
    pub seq_len: u64,
    pub initial_batch: u32,
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_tokens: Option<u64>,
    pub reconfig: ReconfigLatency,
    /// Loss values reported in the summary's time-to-loss table.
    #[serde(default)]
    pub targets: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// The built-in eight-GPU scenario.
    pub fn standard() -> Self {
        let sc = Scenario::standard();
        Self {
            profile: ProfileSource::Synth(SynthSpec::from_scenario(&sc, "synthetic-8gpu")),
            policies: sc.policies.iter().map(PolicySpec::from_policy).collect(),
            orchestrator: OrchestratorConfig::default(),
            loss: sc.loss,
            gns: sc.gns,
            token_budget: sc.sim.token_budget,
            seq_len: sc.sim.seq_len,
            initial_batch: sc.sim.initial_batch,
            base_lr: sc.sim.base_lr,
            warmup_tokens: sc.sim.warmup_tokens,
            reconfig: sc.sim.reconfig,
            targets: vec![5.0, 4.0, 3.5],
            seed: sc.sim.seed,
            out_dir: default_out(),
        }
    }

    /// Reads `path`; relative paths inside are taken relative to its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = formats::load_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let ProfileSource::Csv { path: p, .. } = &mut cfg.profile {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    /// Applies `COADAPT_OUT` and `COADAPT_SEED` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(out) = lookup(ENV_OUT).filter(|v| !v.is_empty()) {
            self.out_dir = PathBuf::from(out);
        }
        if let Some(seed) = lookup(ENV_SEED).filter(|v| !v.is_empty()) {
            self.seed = seed
                .trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("{ENV_SEED}=`{seed}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            token_budget: self.token_budget,
            seq_len: self.seq_len,
            initial_batch: self.initial_batch,
            base_lr: self.base_lr,
            warmup_tokens: self.warmup_tokens,
            reconfig: self.reconfig.clone(),
            seed: self.seed,
        }
    }

    pub fn resolved_policies(&self) -> Vec<Policy> {
        self.policies.iter().map(|p| p.resolve(&self.orchestrator)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.orchestrator.validate()?;
        if self.policies.is_empty() {
            return Err(CliError::Validation("no policies configured".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in self.resolved_policies() {
            if let Policy::Goodput { orchestrator } = &p {
                orchestrator.validate()?;
            }
            let name = p.name();
            if !seen.insert(name.clone()) {
                return Err(CliError::Validation(format!("policy `{name}` listed twice")));
            }
        }
        if let Some(t) = self.targets.iter().find(|t| !t.is_finite()) {
            return Err(CliError::Validation(format!("target {t} is not finite")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_round_trips_through_json() {
        let cfg = RunConfig::standard();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn standard_policies_resolve_to_scenario() {
        let cfg = RunConfig::standard();
        assert_eq!(cfg.resolved_policies(), Scenario::standard().policies);
        assert_eq!(cfg.sim_config(), Scenario::standard().sim);
    }

    #[test]
    fn synth_spec_rebuilds_scenario_profile() {
        let sc = Scenario::standard();
        let a = SynthSpec::from_scenario(&sc, "synthetic-8gpu").build().unwrap();
        assert_eq!(a, sc.profile().unwrap());
    }

    #[test]
    fn env_overrides_only_out_and_seed() {
        let mut cfg = RunConfig::standard();
        let before = cfg.clone();
        cfg.apply_env(|k| match k {
            ENV_OUT => Some("/tmp/x".into()),
            ENV_SEED => Some("7".into()),
            _ => Some("junk".into()),
        })
        .unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.seed, 7);
        cfg.out_dir = before.out_dir.clone();
        cfg.seed = before.seed;
        assert_eq!(cfg, before);

        let err = cfg.apply_env(|k| (k == ENV_SEED).then(|| "-1".into()));
        assert!(err.is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(RunConfig::standard()).unwrap();
        v["mystery"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn duplicate_policies_rejected() {
        let mut cfg = RunConfig::standard();
        cfg.policies.push(PolicySpec::StaticGbs { global_batch: 16 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn n_gpus_mismatch_rejected() {
        let mut s = SynthSpec::from_scenario(&Scenario::standard(), "x");
        s.n_gpus = Some(4);
        assert!(s.build().is_err());
    }
}
