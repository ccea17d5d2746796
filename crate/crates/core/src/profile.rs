//! Throughput lookup table over `(S, B_g, B_m)`.
//!
//! A [`ThroughputProfile`] maps every valid configuration to a measured (or
//! synthesized) [`ThroughputEntry`]. Entries that ran out of memory stay in
//! the table flagged infeasible, so an absent key and a pruned key are
//! distinguishable.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

/// A 3D parallel layout: data, tensor and pipeline degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParallelStrategy {
    pub d: u32,
    pub t: u32,
    pub p: u32,
}

impl ParallelStrategy {
    pub const fn new(d: u32, t: u32, p: u32) -> Self {
        Self { d, t, p }
    }

    /// Number of devices the layout occupies.
    pub fn world_size(&self) -> u64 {
        u64::from(self.d) * u64::from(self.t) * u64::from(self.p)
    }

    pub fn validate(&self, n_gpus: u32) -> Result<(), ProfileError> {
        if self.d == 0 || self.t == 0 || self.p == 0 {
            return Err(ProfileError::ZeroDegree(*self));
        }
        if self.world_size() != u64::from(n_gpus) {
            return Err(ProfileError::WorldSizeMismatch {
                strategy: *self,
                n_gpus,
            });
        }
        Ok(())
    }
}

impl fmt::Display for ParallelStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DP{},TP{},PP{}", self.d, self.t, self.p)
    }
}

/// The decision variables `(S, B_g, B_m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfigTuple {
    pub strategy: ParallelStrategy,
    pub global_batch: u32,
    pub micro_batch: u32,
}

impl ConfigTuple {
    pub const fn new(strategy: ParallelStrategy, global_batch: u32, micro_batch: u32) -> Self {
        Self {
            strategy,
            global_batch,
            micro_batch,
        }
    }

    /// Gradient-accumulation steps `B_g / (d * B_m)`. Only meaningful once
    /// [`ConfigTuple::validate`] has passed.
    pub fn grad_accum(&self) -> u32 {
        self.global_batch / (self.strategy.d * self.micro_batch)
    }

    pub fn validate(&self, n_gpus: u32) -> Result<(), ProfileError> {
        self.strategy.validate(n_gpus)?;
        if self.micro_batch == 0 || self.global_batch == 0 {
            return Err(ProfileError::ZeroBatch(*self));
        }
        let per_step = u64::from(self.strategy.d) * u64::from(self.micro_batch);
        if u64::from(self.global_batch) % per_step != 0 {
            return Err(ProfileError::Indivisible(*self));
        }
        Ok(())
    }
}

impl fmt::Display for ConfigTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d{}-t{}-p{}-bg{}-bm{}",
            self.strategy.d, self.strategy.t, self.strategy.p, self.global_batch, self.micro_batch
        )
    }
}

/// One row of the lookup table.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThroughputEntry {
    /// Samples per second; zero is allowed for infeasible rows.
    pub samples_per_second: f64,
    /// Peak bytes per GPU.
    pub peak_memory: f64,
    pub feasible: bool,
}

impl ThroughputEntry {
    pub fn feasible(samples_per_second: f64, peak_memory: f64) -> Self {
        Self {
            samples_per_second,
            peak_memory,
            feasible: true,
        }
    }

    pub fn infeasible(peak_memory: f64) -> Self {
        Self {
            samples_per_second: 0.0,
            peak_memory,
            feasible: false,
        }
    }
}

/// A candidate handed to the orchestrator: the fastest `B_m` for some
/// `(S, B_g)` together with its throughput.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Candidate {
    pub config: ConfigTuple,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("strategy {0} has a zero degree")]
    ZeroDegree(ParallelStrategy),
    #[error("strategy {strategy}: d*t*p != n_gpus ({n_gpus})")]
    WorldSizeMismatch {
        strategy: ParallelStrategy,
        n_gpus: u32,
    },
    #[error("configuration {0} has a zero batch size")]
    ZeroBatch(ConfigTuple),
    #[error("configuration {0}: global batch not divisible by d * micro_batch")]
    Indivisible(ConfigTuple),
    #[error("duplicate configuration {0}")]
    DuplicateKey(ConfigTuple),
    #[error("configuration {0} is marked feasible but has non-positive throughput")]
    NonPositiveThroughput(ConfigTuple),
    #[error("no feasible entry for {strategy} at global batch {global_batch}")]
    NoFeasibleEntry {
        strategy: ParallelStrategy,
        global_batch: u32,
    },
    #[error("no feasible configuration at global batch {0}")]
    BatchNotProfiled(u32),
    #[error("no cost curve for strategy {0}")]
    MissingCurve(ParallelStrategy),
    #[error("invalid cost model: {0}")]
    InvalidCostModel(&'static str),
    #[error("empty grid: {0}")]
    EmptyGrid(&'static str),
}

/// The offline throughput table for one model/hardware pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputProfile {
    pub hardware_id: String,
    pub n_gpus: u32,
    /// Bytes per GPU. `f64::INFINITY` when unknown (e.g. loaded from a CSV
    /// without hardware metadata); feasibility flags still apply.
    pub memory_capacity: f64,
    entries: BTreeMap<ConfigTuple, ThroughputEntry>,
}

impl ThroughputProfile {
    pub fn new(hardware_id: impl Into<String>, n_gpus: u32, memory_capacity: f64) -> Self {
        Self {
            hardware_id: hardware_id.into(),
            n_gpus,
            memory_capacity,
            entries: BTreeMap::new(),
        }
    }

    /// Adds a row, validating the key and rejecting duplicates.
    pub fn insert(&mut self, key: ConfigTuple, entry: ThroughputEntry) -> Result<(), ProfileError> {
        key.validate(self.n_gpus)?;
        if entry.feasible && !(entry.samples_per_second > 0.0) {
            return Err(ProfileError::NonPositiveThroughput(key));
        }
        if self.entries.contains_key(&key) {
            return Err(ProfileError::DuplicateKey(key));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    /// `None` for a key that was never profiled; `Some` with
    /// `feasible == false` for a pruned one.
    pub fn get(&self, key: &ConfigTuple) -> Option<&ThroughputEntry> {
        self.entries.get(key)
    }

    /// Throughput of a usable entry.
    pub fn throughput(&self, key: &ConfigTuple) -> Option<f64> {
        self.get(key)
            .filter(|e| self.usable(e))
            .map(|e| e.samples_per_second)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ConfigTuple, &ThroughputEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn usable(&self, e: &ThroughputEntry) -> bool {
        e.feasible && e.peak_memory <= self.memory_capacity
    }

    /// Distinct strategies, sorted.
    pub fn strategies(&self) -> Vec<ParallelStrategy> {
        let mut s: Vec<_> = self.entries.keys().map(|k| k.strategy).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Distinct global batch sizes, ascending.
    pub fn global_batches(&self) -> Vec<u32> {
        let mut b: Vec<_> = self.entries.keys().map(|k| k.global_batch).collect();
        b.sort_unstable();
        b.dedup();
        b
    }

    /// Fastest micro-batch size for `(S, B_g)`; ties go to the smaller `B_m`.
    pub fn best_micro_batch(
        &self,
        strategy: ParallelStrategy,
        global_batch: u32,
    ) -> Result<(u32, ThroughputEntry), ProfileError> {
        let mut best: Option<(u32, ThroughputEntry)> = None;
        // BTreeMap order already visits B_m ascending within (S, B_g).
        for (k, e) in self.entries.iter() {
            if k.strategy != strategy || k.global_batch != global_batch || !self.usable(e) {
                continue;
            }
            match best {
                Some((_, b)) if e.samples_per_second <= b.samples_per_second => {}
                _ => best = Some((k.micro_batch, *e)),
            }
        }
        best.ok_or(ProfileError::NoFeasibleEntry {
            strategy,
            global_batch,
        })
    }

    /// Throughput-optimal strategy at `B_g`. Ties go to larger `d`, then
    /// larger `t`.
    pub fn optimal_strategy(&self, global_batch: u32) -> Result<ParallelStrategy, ProfileError> {
        let mut best: Option<(ParallelStrategy, f64)> = None;
        for s in self.strategies() {
            let Ok((_, e)) = self.best_micro_batch(s, global_batch) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((bs, bt)) => {
                    e.samples_per_second > bt
                        || (e.samples_per_second == bt && (s.d, s.t) > (bs.d, bs.t))
                }
            };
            if better {
                best = Some((s, e.samples_per_second));
            }
        }
        best.map(|(s, _)| s)
            .ok_or(ProfileError::BatchNotProfiled(global_batch))
    }

    /// One candidate per `(S, B_g)` with any usable entry, carrying the
    /// fastest `B_m`. Sorted by `B_g`, then `d`, `t`, `p`.
    pub fn feasible_candidates(&self) -> Vec<Candidate> {
        let mut best: BTreeMap<(u32, ParallelStrategy), Candidate> = BTreeMap::new();
        for (k, e) in self.entries.iter() {
            if !self.usable(e) {
                continue;
            }
            let slot = best.entry((k.global_batch, k.strategy)).or_insert(Candidate {
                config: *k,
                throughput: e.samples_per_second,
            });
            if e.samples_per_second > slot.throughput {
                *slot = Candidate {
                    config: *k,
                    throughput: e.samples_per_second,
                };
            }
        }
        best.into_values().collect()
    }
}

/// Saturating curve `T(B) = t_max * B / (B + b_hw)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SaturatingCurve {
    pub t_max: f64,
    pub b_hw: f64,
}

impl SaturatingCurve {
    pub fn at(&self, global_batch: f64) -> f64 {
        self.t_max * global_batch / (global_batch + self.b_hw)
    }
}

/// Affine per-GPU memory model: `model_bytes / (t * p) + activation_bytes_per_sample * B_m`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemoryModel {
    pub model_bytes: f64,
    pub activation_bytes_per_sample: f64,
}

impl MemoryModel {
    pub fn peak(&self, strategy: ParallelStrategy, micro_batch: u32) -> f64 {
        self.model_bytes / f64::from(strategy.t * strategy.p)
            + self.activation_bytes_per_sample * f64::from(micro_batch)
    }
}

/// Parameters of the synthetic cost model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostModelParams {
    pub curves: BTreeMap<ParallelStrategy, SaturatingCurve>,
    /// Multiply by `GA / (GA + p - 1)`.
    pub pipeline_bubble: bool,
    pub memory: MemoryModel,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<(), ProfileError> {
        for c in self.curves.values() {
            if !(c.t_max > 0.0) || !(c.b_hw > 0.0) {
                return Err(ProfileError::InvalidCostModel("t_max and b_hw must be positive"));
            }
        }
        if !(self.memory.model_bytes >= 0.0) || !(self.memory.activation_bytes_per_sample >= 0.0)
        {
            return Err(ProfileError::InvalidCostModel("memory terms must be non-negative"));
        }
        Ok(())
    }

    /// Modelled throughput of a valid configuration.
    pub fn throughput(&self, cfg: &ConfigTuple) -> Result<f64, ProfileError> {
        let curve = self
            .curves
            .get(&cfg.strategy)
            .ok_or(ProfileError::MissingCurve(cfg.strategy))?;
        let mut t = curve.at(f64::from(cfg.global_batch));
        if self.pipeline_bubble {
            t *= bubble_factor(cfg.grad_accum(), cfg.strategy.p);
        }
        Ok(t)
    }
}

/// Pipeline efficiency `GA / (GA + p - 1)`.
pub fn bubble_factor(grad_accum: u32, pipeline_stages: u32) -> f64 {
    let ga = f64::from(grad_accum);
    ga / (ga + f64::from(pipeline_stages) - 1.0)
}

/// Enumerates every valid `(S, B_g, B_m)` over the grids and evaluates the
/// cost model. Combinations violating divisibility are skipped; those over
/// `memory_capacity` are kept as infeasible rows.
pub fn synth_profile(
    hardware_id: impl Into<String>,
    params: &CostModelParams,
    strategies: &[ParallelStrategy],
    batch_grid: &[u32],
    micro_grid: &[u32],
    memory_capacity: f64,
) -> Result<ThroughputProfile, ProfileError> {
    if strategies.is_empty() {
        return Err(ProfileError::EmptyGrid("strategies"));
    }
    if batch_grid.is_empty() {
        return Err(ProfileError::EmptyGrid("global batch grid"));
    }
    if micro_grid.is_empty() {
        return Err(ProfileError::EmptyGrid("micro batch grid"));
    }
    params.validate()?;
    let first = strategies[0];
    if first.d == 0 || first.t == 0 || first.p == 0 {
        return Err(ProfileError::ZeroDegree(first));
    }
    let n_gpus = u32::try_from(first.world_size())
        .map_err(|_| ProfileError::InvalidCostModel("world size overflows u32"))?;
    for s in strategies {
        s.validate(n_gpus)?;
        if !params.curves.contains_key(s) {
            return Err(ProfileError::MissingCurve(*s));
        }
    }

    let mut profile = ThroughputProfile::new(hardware_id, n_gpus, memory_capacity);
    for &s in strategies {
        for &bg in batch_grid {
            for &bm in micro_grid {
                let key = ConfigTuple::new(s, bg, bm);
                if key.validate(n_gpus).is_err() {
                    continue;
                }
                let mem = params.memory.peak(s, bm);
                let entry = if mem > memory_capacity {
                    ThroughputEntry::infeasible(mem)
                } else {
                    ThroughputEntry::feasible(params.throughput(&key)?, mem)
                };
                profile.insert(key, entry)?;
            }
        }
    }
    Ok(profile)
}

/// Every `(d, t, p)` with `d * t * p == n_gpus`, in `(d, t, p)` order.
pub fn factorizations(n_gpus: u32) -> Vec<ParallelStrategy> {
    let mut out = Vec::new();
    for d in 1..=n_gpus {
        if !n_gpus.is_multiple_of(d) {
            continue;
        }
        let rest = n_gpus / d;
        for t in 1..=rest {
            if rest.is_multiple_of(t) {
                out.push(ParallelStrategy::new(d, t, rest / t));
            }
        }
    }
    out
}

/// Powers of two from `lo` to `hi` inclusive.
pub fn pow2_grid(lo: u32, hi: u32) -> Vec<u32> {
    let mut v = Vec::new();
    let mut x = lo.max(1);
    while x <= hi {
        v.push(x);
        match x.checked_mul(2) {
            Some(n) => x = n,
            None => break,
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const GB: f64 = 1e9;

    fn s(d: u32, t: u32, p: u32) -> ParallelStrategy {
        ParallelStrategy::new(d, t, p)
    }

    fn params(curves: &[(ParallelStrategy, f64, f64)], bubble: bool) -> CostModelParams {
        CostModelParams {
            curves: curves
                .iter()
                .map(|&(s, t_max, b_hw)| (s, SaturatingCurve { t_max, b_hw }))
                .collect(),
            pipeline_bubble: bubble,
            memory: MemoryModel {
                model_bytes: 40.0 * GB,
                activation_bytes_per_sample: 2.0 * GB,
            },
        }
    }

    #[test]
    fn saturating_curve_at_b_hw_is_half_peak() {
        let p = params(&[(s(8, 1, 1), 1000.0, 64.0)], false);
        let t = p.throughput(&ConfigTuple::new(s(8, 1, 1), 64, 1)).unwrap();
        assert_eq!(t, 500.0);
    }

    #[test]
    fn factorizations_of_eight() {
        let f = factorizations(8);
        assert_eq!(f.len(), 10);
        assert!(f.iter().all(|s| s.world_size() == 8));
        assert_eq!(factorizations(1), vec![ParallelStrategy::new(1, 1, 1)]);
    }

    #[test]
    fn bubble_factor_values() {
        assert_eq!(bubble_factor(1, 4), 0.25);
        assert_eq!(bubble_factor(16, 4), 16.0 / 19.0);
        assert_eq!(bubble_factor(7, 1), 1.0);
    }

    #[test]
    fn divisibility_rejected() {
        let cfg = ConfigTuple::new(s(2, 1, 4), 17, 2);
        assert_eq!(cfg.validate(8), Err(ProfileError::Indivisible(cfg)));
        assert_eq!(ConfigTuple::new(s(2, 1, 4), 16, 2).grad_accum(), 4);
    }

    #[test]
    fn world_size_rejected() {
        assert!(matches!(
            s(2, 2, 4).validate(8),
            Err(ProfileError::WorldSizeMismatch { .. })
        ));
        assert!(matches!(s(0, 1, 8).validate(8), Err(ProfileError::ZeroDegree(_))));
    }

    #[test]
    fn duplicate_and_absent_vs_infeasible() {
        let mut p = ThroughputProfile::new("h", 8, f64::INFINITY);
        let k = ConfigTuple::new(s(8, 1, 1), 16, 1);
        p.insert(k, ThroughputEntry::feasible(10.0, 1.0)).unwrap();
        assert_eq!(
            p.insert(k, ThroughputEntry::feasible(11.0, 1.0)),
            Err(ProfileError::DuplicateKey(k))
        );
        let k2 = ConfigTuple::new(s(8, 1, 1), 16, 2);
        p.insert(k2, ThroughputEntry::infeasible(1e12)).unwrap();
        assert!(p.get(&ConfigTuple::new(s(8, 1, 1), 32, 1)).is_none());
        assert!(!p.get(&k2).unwrap().feasible);
        assert_eq!(p.throughput(&k2), None);
    }

    #[test]
    fn feasible_row_needs_positive_throughput() {
        let mut p = ThroughputProfile::new("h", 8, f64::INFINITY);
        let k = ConfigTuple::new(s(8, 1, 1), 16, 1);
        assert!(p.insert(k, ThroughputEntry::feasible(0.0, 1.0)).is_err());
    }

    fn table(rows: &[(u32, f64, bool)]) -> ThroughputProfile {
        let mut p = ThroughputProfile::new("h", 8, f64::INFINITY);
        for &(bm, t, ok) in rows {
            let k = ConfigTuple::new(s(2, 1, 4), 16, bm);
            let e = if ok {
                ThroughputEntry::feasible(t, 1.0)
            } else {
                ThroughputEntry::infeasible(1.0)
            };
            p.insert(k, e).unwrap();
        }
        p
    }

    #[test]
    fn best_micro_batch_argmax() {
        let p = table(&[(1, 200.0, true), (2, 260.0, true), (4, 0.0, false)]);
        let (bm, e) = p.best_micro_batch(s(2, 1, 4), 16).unwrap();
        assert_eq!((bm, e.samples_per_second), (2, 260.0));
    }

    #[test]
    fn best_micro_batch_tie_prefers_smaller() {
        let p = table(&[(1, 200.0, true), (2, 200.0, true)]);
        assert_eq!(p.best_micro_batch(s(2, 1, 4), 16).unwrap().0, 1);
    }

    #[test]
    fn best_micro_batch_all_infeasible() {
        let p = table(&[(1, 0.0, false), (2, 0.0, false)]);
        assert!(matches!(
            p.best_micro_batch(s(2, 1, 4), 16),
            Err(ProfileError::NoFeasibleEntry { .. })
        ));
    }

    #[test]
    fn optimal_strategy_tie_prefers_larger_d_then_t() {
        let mut p = ThroughputProfile::new("h", 8, f64::INFINITY);
        for st in [s(2, 1, 4), s(4, 2, 1), s(4, 1, 2)] {
            p.insert(ConfigTuple::new(st, 32, 1), ThroughputEntry::feasible(100.0, 1.0))
                .unwrap();
        }
        assert_eq!(p.optimal_strategy(32).unwrap(), s(4, 2, 1));
        assert_eq!(p.optimal_strategy(64), Err(ProfileError::BatchNotProfiled(64)));
    }

    #[test]
    fn single_strategy_is_always_optimal() {
        let p = synth_profile(
            "h",
            &params(&[(s(8, 1, 1), 900.0, 100.0)], true),
            &[s(8, 1, 1)],
            &pow2_grid(16, 2048),
            &[1, 2, 4, 8],
            80.0 * GB,
        )
        .unwrap();
        for bg in p.global_batches() {
            assert_eq!(p.optimal_strategy(bg).unwrap(), s(8, 1, 1));
        }
    }

    #[test]
    fn candidates_count_and_pruning() {
        let prm = params(&[(s(8, 1, 1), 900.0, 100.0), (s(4, 1, 2), 600.0, 20.0)], false);
        let p = synth_profile("h", &prm, &[s(8, 1, 1), s(4, 1, 2)], &[16, 32, 64], &[1, 2], 80.0 * GB)
            .unwrap();
        let c = p.feasible_candidates();
        assert_eq!(c.len(), 6);
        // sorted by B_g then d,t,p
        let keys: Vec<_> = c.iter().map(|c| (c.config.global_batch, c.config.strategy)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);

        // 8*B_m*2GB + 40GB/1 > 45GB for every B_m with t*p = 1 -> that strategy vanishes
        let p = synth_profile("h", &prm, &[s(8, 1, 1), s(4, 1, 2)], &[16, 32, 64], &[1, 2], 41.0 * GB)
            .unwrap();
        let c = p.feasible_candidates();
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|c| c.config.strategy == s(4, 1, 2)));
        assert!(c
            .iter()
            .all(|c| p.get(&c.config).unwrap().peak_memory <= p.memory_capacity));
    }

    #[test]
    fn synth_skips_indivisible_micro_batches() {
        let prm = params(&[(s(8, 1, 1), 900.0, 100.0)], false);
        let p = synth_profile("h", &prm, &[s(8, 1, 1)], &[16], &[1, 2, 4], 1e15).unwrap();
        // 16 / (8 * 4) is not an integer
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn synth_rejects_bad_strategy() {
        let prm = params(&[(s(8, 1, 1), 900.0, 100.0), (s(2, 2, 4), 1.0, 1.0)], false);
        let err = synth_profile("h", &prm, &[s(8, 1, 1), s(2, 2, 4)], &[16], &[1], 1e15);
        assert!(matches!(err, Err(ProfileError::WorldSizeMismatch { .. })));
    }

    #[test]
    fn pow2_grid_default() {
        assert_eq!(pow2_grid(16, 2048), vec![16, 32, 64, 128, 256, 512, 1024, 2048]);
    }
}
