//! Statistical efficiency and Goodput.
//!
//! `SE(B) = (1 + phi) / (B + phi)` is the per-sample efficiency of a batch
//! of `B` samples given the (calibrated) noise scale `phi`. Goodput is
//! throughput times SE; the learning-rate-aware score additionally
//! multiplies by `sqrt(B / B_ref)` for square-root Adam LR scaling.

use libm::{fabs, log, sqrt};

/// Per-sample statistical efficiency.
pub fn stat_eff(global_batch: f64, phi: f64) -> f64 {
    (1.0 + phi) / (global_batch + phi)
}

pub fn goodput(throughput: f64, se: f64) -> f64 {
    throughput * se
}

/// `T * SE(B, phi) * sqrt(B / B_ref)`.
///
/// The reference batch only contributes a candidate-independent constant,
/// so rankings do not depend on it.
pub fn goodput_lr(throughput: f64, global_batch: f64, phi: f64, reference_batch: f64) -> f64 {
    throughput * stat_eff(global_batch, phi) * lr_factor(global_batch, reference_batch)
}

/// `sqrt(B / B_ref)`.
pub fn lr_factor(global_batch: f64, reference_batch: f64) -> f64 {
    sqrt(global_batch / reference_batch)
}

/// Square-root rule: `eta * sqrt(B_new / B_old)`.
pub fn lr_rescale(eta: f64, old_batch: f64, new_batch: f64) -> f64 {
    eta * sqrt(new_batch / old_batch)
}

/// Maximizer of `B / ((B + B_hw)(B + c*B_crit))`: the geometric mean of the
/// hardware saturation point and the scaled critical batch.
pub fn optimal_batch_continuous(b_hw: f64, b_crit_scaled: f64) -> f64 {
    sqrt(b_hw * b_crit_scaled)
}

/// Goodput of the saturating-throughput model up to `B`-independent
/// constants.
pub fn saturating_objective(global_batch: f64, b_hw: f64, b_crit_scaled: f64) -> f64 {
    global_batch / ((global_batch + b_hw) * (global_batch + b_crit_scaled))
}

/// How the critical-batch baseline measures closeness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BatchDistance {
    #[default]
    Log,
    Linear,
}

const TIE_EPS: f64 = 1e-12;

/// Candidate closest to the calibrated noise scale. Ties go to the smaller
/// batch. Returns `None` only for an empty candidate list.
pub fn cbs_target(phi: f64, candidates: &[u32], metric: BatchDistance) -> Option<u32> {
    let target = phi.max(1.0);
    let dist = |b: u32| -> f64 {
        let b = f64::from(b);
        match metric {
            BatchDistance::Log => fabs(log(b) - log(target)),
            BatchDistance::Linear => fabs(b - target),
        }
    };
    let mut best: Option<(u32, f64)> = None;
    for &b in candidates {
        let d = dist(b);
        best = match best {
            None => Some((b, d)),
            Some((bb, bd)) => {
                let scale = bd.abs().max(d.abs()).max(1.0);
                if fabs(d - bd) <= TIE_EPS * scale {
                    Some(if b < bb { (b, d) } else { (bb, bd) })
                } else if d < bd {
                    Some((b, d))
                } else {
                    Some((bb, bd))
                }
            }
        };
    }
    best.map(|(b, _)| b)
}

/// Inputs shared by every candidate evaluated at one decision point.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EfficiencyContext {
    pub phi: f64,
    pub reference_batch: f64,
    pub base_lr: f64,
}

impl EfficiencyContext {
    pub fn stat_eff(&self, global_batch: f64) -> f64 {
        stat_eff(global_batch, self.phi)
    }

    pub fn score(&self, throughput: f64, global_batch: f64) -> f64 {
        goodput_lr(throughput, global_batch, self.phi, self.reference_batch)
    }

    /// Learning rate at `global_batch` under the square-root rule.
    pub fn lr_at(&self, global_batch: f64) -> f64 {
        lr_rescale(self.base_lr, self.reference_batch, global_batch)
    }
}
