//! Online resharding of model and optimizer state between `(d, t, p)`
//! layouts.
//!
//! Every rank describes its local shards by key, global shape, global offset
//! and local shape. A transfer plan is the set of box intersections between
//! the destination shards and the canonical (DP replica 0) source shards.
//! Execution stages the canonical source in host memory, releases the
//! source layout, materializes the target layout and fills it from staging,
//! so no device ever holds both layouts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::profile::ParallelStrategy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReshardError {
    #[error("strategy {strategy}: d*t*p != n_gpus ({n_gpus})")]
    WorldSize {
        strategy: ParallelStrategy,
        n_gpus: u32,
    },
    #[error("{layers} layers cannot be split into {stages} pipeline stages")]
    LayersIndivisible { layers: usize, stages: u32 },
    #[error("tensor {name}: axis {axis} of length {len} cannot be split {t} ways")]
    AxisIndivisible {
        name: String,
        axis: usize,
        len: usize,
        t: u32,
    },
    #[error("tensor {0}: tensor-parallel axis out of range")]
    BadAxis(String),
    #[error("layouts describe different tensors: {0}")]
    LayoutMismatch(String),
    #[error("destination shard {key} on rank {rank} not fully covered by source shards")]
    Uncovered { key: String, rank: u32 },
    #[error("state is missing shard {key} on rank {rank}")]
    MissingState { key: String, rank: u32 },
    #[error("plan does not match layouts: {0}")]
    PlanMismatch(String),
    #[error("bandwidth must be positive")]
    NonPositiveBandwidth,
}

/// One parameter tensor per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Axis split across tensor-parallel ranks; `None` keeps the tensor whole
    /// on tensor-parallel rank 0.
    #[cfg_attr(feature = "serde", serde(default))]
    pub tp_axis: Option<usize>,
}

/// A toy layered model: `layers` copies of the same tensor set.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelSpec {
    pub layers: usize,
    pub tensors: Vec<TensorSpec>,
    /// Optimizer-state tensors per parameter tensor (2 for Adam).
    #[cfg_attr(feature = "serde", serde(default = "default_opt_mult"))]
    pub optimizer_state_multiplier: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_param_bytes"))]
    pub param_elem_bytes: u64,
    #[cfg_attr(feature = "serde", serde(default = "default_opt_bytes"))]
    pub optim_elem_bytes: u64,
}

#[cfg(feature = "serde")]
fn default_opt_mult() -> usize {
    2
}
#[cfg(feature = "serde")]
fn default_param_bytes() -> u64 {
    2
}
#[cfg(feature = "serde")]
fn default_opt_bytes() -> u64 {
    4
}

/// A concrete tensor of the model: a parameter or one of its optimizer
/// states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub key: String,
    pub layer: usize,
    pub shape: Vec<usize>,
    pub tp_axis: Option<usize>,
    pub elem_bytes: u64,
}

impl ModelSpec {
    /// Dense transformer block with column/row-split projections.
    pub fn transformer(layers: usize, hidden: usize, ffn: usize) -> Self {
        let t = |name: &str, shape: Vec<usize>, axis: Option<usize>| TensorSpec {
            name: name.into(),
            shape,
            tp_axis: axis,
        };
        Self {
            layers,
            tensors: vec![
                t("qkv", vec![hidden, 3 * hidden], Some(1)),
                t("proj", vec![hidden, hidden], Some(0)),
                t("fc1", vec![hidden, ffn], Some(1)),
                t("fc2", vec![ffn, hidden], Some(0)),
                t("norm", vec![hidden], None),
            ],
            optimizer_state_multiplier: 2,
            param_elem_bytes: 2,
            optim_elem_bytes: 4,
        }
    }

    /// Every tensor key, in layer order; optimizer states follow their
    /// parameter.
    pub fn tensors(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        for layer in 0..self.layers {
            for ts in &self.tensors {
                let base = format!("layer{layer}.{}", ts.name);
                out.push(TensorInfo {
                    key: base.clone(),
                    layer,
                    shape: ts.shape.clone(),
                    tp_axis: ts.tp_axis,
                    elem_bytes: self.param_elem_bytes,
                });
                for k in 0..self.optimizer_state_multiplier {
                    out.push(TensorInfo {
                        key: format!("{base}.opt{k}"),
                        layer,
                        shape: ts.shape.clone(),
                        tp_axis: ts.tp_axis,
                        elem_bytes: self.optim_elem_bytes,
                    });
                }
            }
        }
        out
    }

    pub fn total_bytes(&self) -> u64 {
        self.tensors()
            .iter()
            .map(|t| elements(&t.shape) * t.elem_bytes)
            .sum()
    }
}

fn elements(shape: &[usize]) -> u64 {
    shape.iter().map(|&x| x as u64).product()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardDescriptor {
    pub key: String,
    pub global_shape: Vec<usize>,
    pub global_offset: Vec<usize>,
    pub local_shape: Vec<usize>,
    pub owner: u32,
    /// DP replica the owner belongs to.
    pub replica: u32,
    pub elem_bytes: u64,
}

impl ShardDescriptor {
    pub fn elements(&self) -> u64 {
        elements(&self.local_shape)
    }

    pub fn bytes(&self) -> u64 {
        self.elements() * self.elem_bytes
    }

    pub fn region(&self) -> Region {
        Region {
            offset: self.global_offset.clone(),
            extent: self.local_shape.clone(),
        }
    }
}

/// Axis-aligned box in global coordinates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Region {
    pub offset: Vec<usize>,
    pub extent: Vec<usize>,
}

impl Region {
    pub fn elements(&self) -> u64 {
        elements(&self.extent)
    }

    /// Per-axis interval intersection; `None` when empty.
    pub fn intersect(&self, other: &Region) -> Option<Region> {
        let mut offset = Vec::with_capacity(self.offset.len());
        let mut extent = Vec::with_capacity(self.offset.len());
        for i in 0..self.offset.len() {
            let lo = self.offset[i].max(other.offset[i]);
            let hi = (self.offset[i] + self.extent[i]).min(other.offset[i] + other.extent[i]);
            if hi <= lo {
                return None;
            }
            offset.push(lo);
            extent.push(hi - lo);
        }
        Some(Region { offset, extent })
    }
}

/// Rank numbering: tensor-parallel fastest, then pipeline stage, then DP
/// replica.
pub fn rank_of(strategy: ParallelStrategy, replica: u32, stage: u32, tp_rank: u32) -> u32 {
    replica * strategy.t * strategy.p + stage * strategy.t + tp_rank
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardLayout {
    pub strategy: ParallelStrategy,
    pub shards: Vec<ShardDescriptor>,
    /// Ranks of each DP replica; replica 0 is the canonical transfer source.
    pub replica_groups: Vec<Vec<u32>>,
}

impl ShardLayout {
    pub fn canonical_shards(&self) -> impl Iterator<Item = &ShardDescriptor> {
        self.shards.iter().filter(|s| s.replica == 0)
    }

    /// Bytes resident across all ranks.
    pub fn footprint_bytes(&self) -> u64 {
        self.shards.iter().map(ShardDescriptor::bytes).sum()
    }

    pub fn rank_bytes(&self) -> BTreeMap<u32, u64> {
        let mut m = BTreeMap::new();
        for r in self.replica_groups.iter().flatten() {
            m.insert(*r, 0);
        }
        for s in &self.shards {
            *m.entry(s.owner).or_insert(0) += s.bytes();
        }
        m
    }

    pub fn find(&self, rank: u32, key: &str) -> Option<&ShardDescriptor> {
        self.shards.iter().find(|s| s.owner == rank && s.key == key)
    }

    /// Checks that, within every replica, each key's shards are pairwise
    /// disjoint and cover the global shape.
    pub fn check_tiling(&self) -> Result<(), String> {
        let mut by_key: BTreeMap<(u32, &str), Vec<&ShardDescriptor>> = BTreeMap::new();
        for s in &self.shards {
            for i in 0..s.global_shape.len() {
                if s.global_offset[i] + s.local_shape[i] > s.global_shape[i] {
                    return Err(format!("{} on rank {} exceeds bounds", s.key, s.owner));
                }
            }
            by_key.entry((s.replica, s.key.as_str())).or_default().push(s);
        }
        for ((replica, key), shards) in &by_key {
            let total: u64 = shards.iter().map(|s| s.elements()).sum();
            if total != elements(&shards[0].global_shape) {
                return Err(format!("{key} replica {replica}: element count mismatch"));
            }
            for (i, a) in shards.iter().enumerate() {
                for b in &shards[i + 1..] {
                    if a.region().intersect(&b.region()).is_some() {
                        return Err(format!("{key} replica {replica}: overlapping shards"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shard layout of `model` under `strategy`: contiguous layer blocks per
/// pipeline stage, equal contiguous chunks along the tensor-parallel axis,
/// full replication across DP replicas.
pub fn layout_for(
    model: &ModelSpec,
    strategy: ParallelStrategy,
    n_gpus: u32,
) -> Result<ShardLayout, ReshardError> {
    if strategy.d == 0 || strategy.t == 0 || strategy.p == 0 || strategy.world_size() != u64::from(n_gpus)
    {
        return Err(ReshardError::WorldSize { strategy, n_gpus });
    }
    let p = strategy.p as usize;
    if !model.layers.is_multiple_of(p) {
        return Err(ReshardError::LayersIndivisible {
            layers: model.layers,
            stages: strategy.p,
        });
    }
    for ts in &model.tensors {
        if let Some(axis) = ts.tp_axis {
            let len = *ts.shape.get(axis).ok_or_else(|| ReshardError::BadAxis(ts.name.clone()))?;
            if len % strategy.t as usize != 0 {
                return Err(ReshardError::AxisIndivisible {
                    name: ts.name.clone(),
                    axis,
                    len,
                    t: strategy.t,
                });
            }
        }
    }

    let layers_per_stage = model.layers / p;
    let mut shards = Vec::new();
    for replica in 0..strategy.d {
        for info in model.tensors() {
            let stage = (info.layer / layers_per_stage) as u32;
            match info.tp_axis {
                Some(axis) => {
                    let chunk = info.shape[axis] / strategy.t as usize;
                    for tp in 0..strategy.t {
                        let mut offset = vec![0; info.shape.len()];
                        let mut local = info.shape.clone();
                        offset[axis] = tp as usize * chunk;
                        local[axis] = chunk;
                        shards.push(ShardDescriptor {
                            key: info.key.clone(),
                            global_shape: info.shape.clone(),
                            global_offset: offset,
                            local_shape: local,
                            owner: rank_of(strategy, replica, stage, tp),
                            replica,
                            elem_bytes: info.elem_bytes,
                        });
                    }
                }
                None => shards.push(ShardDescriptor {
                    key: info.key.clone(),
                    global_shape: info.shape.clone(),
                    global_offset: vec![0; info.shape.len()],
                    local_shape: info.shape.clone(),
                    owner: rank_of(strategy, replica, stage, 0),
                    replica,
                    elem_bytes: info.elem_bytes,
                }),
            }
        }
    }
    let group = strategy.t * strategy.p;
    let replica_groups = (0..strategy.d)
        .map(|r| (r * group..(r + 1) * group).collect())
        .collect();
    Ok(ShardLayout {
        strategy,
        shards,
        replica_groups,
    })
}

/// A point-to-point copy of one box.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Move {
    pub key: String,
    pub src_rank: u32,
    pub dst_rank: u32,
    pub region: Region,
    pub bytes: u64,
    /// Source and destination on the same rank: no wire traffic.
    pub local: bool,
}

impl Move {
    pub fn wire_bytes(&self) -> u64 {
        if self.local {
            0
        } else {
            self.bytes
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferPlan {
    pub moves: Vec<Move>,
    /// Bytes crossing the wire.
    pub total_bytes: u64,
    /// Largest inbound wire bytes on any rank.
    pub max_bytes_per_rank: u64,
}

impl TransferPlan {
    pub fn from_moves(moves: Vec<Move>) -> Self {
        let mut inbound: BTreeMap<u32, u64> = BTreeMap::new();
        let mut total = 0;
        for m in &moves {
            total += m.wire_bytes();
            *inbound.entry(m.dst_rank).or_insert(0) += m.wire_bytes();
        }
        Self {
            moves,
            total_bytes: total,
            max_bytes_per_rank: inbound.values().copied().max().unwrap_or(0),
        }
    }
}

/// Intersects every destination shard with the canonical source shards of
/// the same key.
pub fn plan_transfers(src: &ShardLayout, dst: &ShardLayout) -> Result<TransferPlan, ReshardError> {
    let mut sources: BTreeMap<&str, Vec<&ShardDescriptor>> = BTreeMap::new();
    for s in src.canonical_shards() {
        sources.entry(s.key.as_str()).or_default().push(s);
    }
    let mut moves = Vec::new();
    for d in &dst.shards {
        let cands = sources
            .get(d.key.as_str())
            .ok_or_else(|| ReshardError::LayoutMismatch(format!("{} absent from source", d.key)))?;
        if cands[0].global_shape != d.global_shape {
            return Err(ReshardError::LayoutMismatch(format!("{} shape differs", d.key)));
        }
        let target = d.region();
        let mut covered = 0;
        for s in cands {
            if let Some(region) = s.region().intersect(&target) {
                covered += region.elements();
                moves.push(Move {
                    key: d.key.clone(),
                    src_rank: s.owner,
                    dst_rank: d.owner,
                    bytes: region.elements() * d.elem_bytes,
                    region,
                    local: s.owner == d.owner,
                });
            }
        }
        if covered != d.elements() {
            return Err(ReshardError::Uncovered {
                key: d.key.clone(),
                rank: d.owner,
            });
        }
    }
    if sources.len() != dst.canonical_shards().map(|s| &s.key).collect::<alloc::collections::BTreeSet<_>>().len()
    {
        return Err(ReshardError::LayoutMismatch("destination drops tensors".into()));
    }
    Ok(TransferPlan::from_moves(moves))
}

/// `fixed_overhead + wire_bytes / bandwidth`.
pub fn estimate_reconfig_latency(
    plan: &TransferPlan,
    bandwidth_bytes_per_s: f64,
    fixed_overhead_s: f64,
) -> Result<f64, ReshardError> {
    if !(bandwidth_bytes_per_s > 0.0) {
        return Err(ReshardError::NonPositiveBandwidth);
    }
    Ok(fixed_overhead_s + plan.total_bytes as f64 / bandwidth_bytes_per_s)
}

/// Bandwidth and fixed cost used to turn a plan into seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LatencyModel {
    pub bandwidth_bytes_per_s: f64,
    /// Teardown, process-group rebuild and model re-construction.
    pub fixed_overhead_s: f64,
}

impl Default for LatencyModel {
    /// Host-staged transfers at 5 GB/s aggregate plus 22 s of fixed
    /// rebuild cost.
    fn default() -> Self {
        Self {
            bandwidth_bytes_per_s: 5.0e9,
            fixed_overhead_s: 22.0,
        }
    }
}

impl LatencyModel {
    pub fn estimate(&self, plan: &TransferPlan) -> Result<f64, ReshardError> {
        estimate_reconfig_latency(plan, self.bandwidth_bytes_per_s, self.fixed_overhead_s)
    }

    /// Plans `src -> dst` on `model` and prices it.
    pub fn transition(
        &self,
        model: &ModelSpec,
        src: ParallelStrategy,
        dst: ParallelStrategy,
        n_gpus: u32,
    ) -> Result<f64, ReshardError> {
        let a = layout_for(model, src, n_gpus)?;
        let b = layout_for(model, dst, n_gpus)?;
        self.estimate(&plan_transfers(&a, &b)?)
    }
}

/// Row-major values of a whole tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Local shard buffers keyed by `(rank, tensor key)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShardedState {
    pub buffers: BTreeMap<(u32, String), Vec<f64>>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(src_index, dst_index)` for every element of `region`, with
/// indices linearized in the two buffers' own frames.
fn for_each_element(
    region: &Region,
    src_origin: &[usize],
    src_shape: &[usize],
    dst_origin: &[usize],
    dst_shape: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let n = region.extent.len();
    if region.extent.contains(&0) {
        return;
    }
    let ss = strides(src_shape);
    let ds = strides(dst_shape);
    let mut idx = vec![0usize; n];
    loop {
        let mut si = 0;
        let mut di = 0;
        for a in 0..n {
            let g = region.offset[a] + idx[a];
            si += (g - src_origin[a]) * ss[a];
            di += (g - dst_origin[a]) * ds[a];
        }
        f(si, di);
        // odometer
        let mut a = n;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < region.extent[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

impl ShardedState {
    /// Scatters whole tensors into every shard of `layout` (all replicas).
    pub fn from_global(
        layout: &ShardLayout,
        globals: &BTreeMap<String, GlobalTensor>,
    ) -> Result<Self, ReshardError> {
        let mut buffers = BTreeMap::new();
        for s in &layout.shards {
            let g = globals
                .get(&s.key)
                .ok_or_else(|| ReshardError::LayoutMismatch(format!("no values for {}", s.key)))?;
            let mut buf = vec![0.0; s.elements() as usize];
            let zero = vec![0; g.shape.len()];
            for_each_element(&s.region(), &zero, &g.shape, &s.global_offset, &s.local_shape, |si, di| {
                buf[di] = g.data[si];
            });
            buffers.insert((s.owner, s.key.clone()), buf);
        }
        Ok(Self { buffers })
    }

    /// Gathers a whole tensor from the canonical replica.
    pub fn to_global(&self, layout: &ShardLayout, key: &str) -> Result<GlobalTensor, ReshardError> {
        let mut out: Option<GlobalTensor> = None;
        for s in layout.canonical_shards().filter(|s| s.key == key) {
            let g = out.get_or_insert_with(|| GlobalTensor {
                shape: s.global_shape.clone(),
                data: vec![0.0; elements(&s.global_shape) as usize],
            });
            let buf = self
                .buffers
                .get(&(s.owner, s.key.clone()))
                .ok_or_else(|| ReshardError::MissingState {
                    key: s.key.clone(),
                    rank: s.owner,
                })?;
            let zero = vec![0; g.shape.len()];
            let shape = g.shape.clone();
            for_each_element(&s.region(), &s.global_offset, &s.local_shape, &zero, &shape, |si, di| {
                g.data[di] = buf[si];
            });
        }
        out.ok_or_else(|| ReshardError::LayoutMismatch(format!("unknown key {key}")))
    }
}

/// Simulated memory accounting for one reshard.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryReport {
    pub source_footprint: u64,
    pub target_footprint: u64,
    /// Host bytes holding the canonical source during the switch.
    pub staging_bytes: u64,
    /// Peak of device-resident plus staged bytes.
    pub peak_total: u64,
    /// Per rank: (peak device bytes, source bytes, target bytes).
    pub per_rank: BTreeMap<u32, (u64, u64, u64)>,
}

struct Ledger {
    device: BTreeMap<u32, u64>,
    peak_device: BTreeMap<u32, u64>,
    host: u64,
    peak_total: u64,
}

impl Ledger {
    fn total(&self) -> u64 {
        self.device.values().sum::<u64>() + self.host
    }

    fn touch(&mut self, rank: u32) {
        let cur = self.device.get(&rank).copied().unwrap_or(0);
        let p = self.peak_device.entry(rank).or_insert(0);
        *p = (*p).max(cur);
        self.peak_total = self.peak_total.max(self.total());
    }

    fn alloc(&mut self, rank: u32, bytes: u64) {
        *self.device.entry(rank).or_insert(0) += bytes;
        self.touch(rank);
    }

    fn free(&mut self, rank: u32, bytes: u64) {
        *self.device.entry(rank).or_insert(0) -= bytes;
        self.touch(rank);
    }

    fn stage(&mut self, bytes: u64) {
        self.host += bytes;
        self.peak_total = self.peak_total.max(self.total());
    }
}

/// Runs the plan with moves applied in their listed order.
pub fn execute_in_memory(
    state: &ShardedState,
    src: &ShardLayout,
    dst: &ShardLayout,
    plan: &TransferPlan,
) -> Result<(ShardedState, MemoryReport), ReshardError> {
    let order: Vec<usize> = (0..plan.moves.len()).collect();
    execute_in_order(state, src, dst, plan, &order)
}

/// Runs the plan applying moves in `order` (a permutation of move indices).
pub fn execute_in_order(
    state: &ShardedState,
    src: &ShardLayout,
    dst: &ShardLayout,
    plan: &TransferPlan,
    order: &[usize],
) -> Result<(ShardedState, MemoryReport), ReshardError> {
    if order.len() != plan.moves.len() {
        return Err(ReshardError::PlanMismatch("order is not a permutation".into()));
    }
    let src_index: BTreeMap<(u32, &str), &ShardDescriptor> = src
        .shards
        .iter()
        .map(|s| ((s.owner, s.key.as_str()), s))
        .collect();
    let dst_index: BTreeMap<(u32, &str), &ShardDescriptor> = dst
        .shards
        .iter()
        .map(|s| ((s.owner, s.key.as_str()), s))
        .collect();

    let mut ledger = Ledger {
        device: BTreeMap::new(),
        peak_device: BTreeMap::new(),
        host: 0,
        peak_total: 0,
    };
    for s in &src.shards {
        ledger.alloc(s.owner, s.bytes());
    }

    // Phases 1-2: stage the canonical source on the host, release devices.
    let mut staged: BTreeMap<(u32, &str), &Vec<f64>> = BTreeMap::new();
    let mut staging_bytes = 0;
    for s in src.canonical_shards() {
        let buf = state
            .buffers
            .get(&(s.owner, s.key.clone()))
            .filter(|b| b.len() as u64 == s.elements())
            .ok_or_else(|| ReshardError::MissingState {
                key: s.key.clone(),
                rank: s.owner,
            })?;
        staged.insert((s.owner, s.key.as_str()), buf);
        ledger.stage(s.bytes());
        staging_bytes += s.bytes();
    }
    for s in &src.shards {
        ledger.free(s.owner, s.bytes());
    }

    // Phases 3-4: rebuild under the target layout.
    let mut out = ShardedState::default();
    for d in &dst.shards {
        ledger.alloc(d.owner, d.bytes());
        out.buffers
            .insert((d.owner, d.key.clone()), vec![0.0; d.elements() as usize]);
    }

    // Phase 5: load staged state into the target shards.
    let mut written: BTreeMap<(u32, &str), u64> = BTreeMap::new();
    for &i in order {
        let m = plan
            .moves
            .get(i)
            .ok_or_else(|| ReshardError::PlanMismatch(format!("move index {i}")))?;
        let s = src_index
            .get(&(m.src_rank, m.key.as_str()))
            .ok_or_else(|| ReshardError::PlanMismatch(format!("{} not on source rank {}", m.key, m.src_rank)))?;
        let d = dst_index
            .get(&(m.dst_rank, m.key.as_str()))
            .ok_or_else(|| ReshardError::PlanMismatch(format!("{} not on target rank {}", m.key, m.dst_rank)))?;
        if s.region().intersect(&m.region).as_ref() != Some(&m.region)
            || d.region().intersect(&m.region).as_ref() != Some(&m.region)
        {
            return Err(ReshardError::PlanMismatch(format!("{} region out of bounds", m.key)));
        }
        let from = staged
            .get(&(m.src_rank, m.key.as_str()))
            .ok_or_else(|| ReshardError::PlanMismatch(format!("{} not staged", m.key)))?;
        let to = out
            .buffers
            .get_mut(&(m.dst_rank, m.key.clone()))
            .expect("allocated above");
        for_each_element(&m.region, &s.global_offset, &s.local_shape, &d.global_offset, &d.local_shape, |si, di| {
            to[di] = from[si];
        });
        *written.entry((m.dst_rank, m.key.as_str())).or_insert(0) += m.region.elements();
    }
    for d in &dst.shards {
        if written.get(&(d.owner, d.key.as_str())).copied().unwrap_or(0) != d.elements() {
            return Err(ReshardError::Uncovered {
                key: d.key.clone(),
                rank: d.owner,
            });
        }
    }
    ledger.host = 0;

    let src_ranks = src.rank_bytes();
    let dst_ranks = dst.rank_bytes();
    let per_rank = ledger
        .peak_device
        .iter()
        .map(|(&r, &peak)| {
            (
                r,
                (
                    peak,
                    src_ranks.get(&r).copied().unwrap_or(0),
                    dst_ranks.get(&r).copied().unwrap_or(0),
                ),
            )
        })
        .collect();
    Ok((
        out,
        MemoryReport {
            source_footprint: src.footprint_bytes(),
            target_footprint: dst.footprint_bytes(),
            staging_bytes,
            peak_total: ledger.peak_total,
            per_rank,
        },
    ))
}
