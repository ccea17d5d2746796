//! Gradient noise scale estimation under 3D parallelism.
//!
//! Micro-batches of gradient accumulation are the independent samples:
//! each one contributes its local squared gradient norm `s_m`, and the
//! synchronized mean gradient supplies `|g|^2`. With `N = M * D` samples
//!
//! ```text
//! s_bar  = sum(s_m) / N
//! signal = (N * |g|^2 - s_bar) / (N - 1)        // estimate of |G|^2
//! noise  = (s_bar - |g|^2) * B_g / (N - 1)      // estimate of tr(Sigma)
//! ```
//!
//! Both streams are smoothed by an EMA whose coefficient switches once a
//! token boundary is crossed, and the calibrated noise scale is
//! `phi = c * ema_noise / ema_signal`.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GnsError {
    #[error("squared norm must be finite and non-negative, got {0}")]
    NegativeNorm(f64),
    #[error("rank {rank} out of range for dp_size {dp_size}")]
    RankOutOfRange { rank: usize, dp_size: usize },
    #[error("need at least two samples per step, have {0}")]
    InsufficientSamples(usize),
    #[error("ranks recorded different micro-batch counts")]
    UnevenMicroBatches,
    #[error("noise scale unavailable: smoothed signal is not positive")]
    Unavailable,
    #[error("invalid estimator parameters: {0}")]
    InvalidParams(&'static str),
}

/// Per-step collection of micro-batch squared norms across all DP ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAccumulator {
    per_rank: Vec<Vec<f64>>,
    global_batch: u32,
}

impl StepAccumulator {
    pub fn new(dp_size: usize, global_batch: u32) -> Self {
        Self {
            per_rank: vec![Vec::new(); dp_size.max(1)],
            global_batch,
        }
    }

    pub fn dp_size(&self) -> usize {
        self.per_rank.len()
    }

    pub fn global_batch(&self) -> u32 {
        self.global_batch
    }

    /// Micro-batches recorded on the busiest rank.
    pub fn micro_count(&self) -> usize {
        self.per_rank.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Squared norms recorded on `rank`, in order.
    pub fn micro_squared_norms(&self, rank: usize) -> &[f64] {
        &self.per_rank[rank]
    }

    /// Total number of independent samples `N = M * D`.
    pub fn samples(&self) -> usize {
        self.per_rank.iter().map(Vec::len).sum()
    }

    pub fn record_micro_batch(&mut self, rank: usize, squared_norm: f64) -> Result<(), GnsError> {
        if !(squared_norm >= 0.0) || !squared_norm.is_finite() {
            return Err(GnsError::NegativeNorm(squared_norm));
        }
        let dp_size = self.per_rank.len();
        let slot = self
            .per_rank
            .get_mut(rank)
            .ok_or(GnsError::RankOutOfRange { rank, dp_size })?;
        slot.push(squared_norm);
        Ok(())
    }
}

/// The synchronized mean gradient, either as the full vector or already
/// reduced to its squared norm.
#[derive(Debug, Clone, Copy)]
pub enum MeanGradient<'a> {
    Vector(&'a [f64]),
    SquaredNorm(f64),
}

impl MeanGradient<'_> {
    fn squared_norm(&self) -> f64 {
        match *self {
            MeanGradient::Vector(v) => squared_norm(v),
            MeanGradient::SquaredNorm(x) => x,
        }
    }
}

/// Unsmoothed per-step estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// `|G|^2` estimate. May be negative.
    pub signal: f64,
    /// `tr(Sigma)` estimate clamped at zero.
    pub noise: f64,
    /// Unclamped noise, for diagnostics.
    pub noise_raw: f64,
    /// `|g|^2` of the mean gradient.
    pub mean_grad_sq: f64,
    /// Mean of the micro-batch squared norms.
    pub mean_sq_norm: f64,
}

pub fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Combines the accumulated local norms with the mean gradient.
pub fn finalize_step(acc: &StepAccumulator, mean: MeanGradient<'_>) -> Result<StepStats, GnsError> {
    let m = acc.micro_count();
    if acc.per_rank.iter().any(|r| r.len() != m) {
        return Err(GnsError::UnevenMicroBatches);
    }
    let n = acc.samples();
    if n < 2 {
        return Err(GnsError::InsufficientSamples(n));
    }
    let n_f = n as f64;
    let total: f64 = acc.per_rank.iter().flatten().sum();
    let s_bar = total / n_f;
    let g_sq = mean.squared_norm();
    let signal = (n_f * g_sq - s_bar) / (n_f - 1.0);
    let noise_raw = (s_bar - g_sq) * f64::from(acc.global_batch) / (n_f - 1.0);
    Ok(StepStats {
        signal,
        noise: noise_raw.max(0.0),
        noise_raw,
        mean_grad_sq: g_sq,
        mean_sq_norm: s_bar,
    })
}

/// Convenience for simulation: all micro-gradients are available, split
/// round-robin across `dp_size` ranks.
pub fn stats_from_micro_gradients(
    micro_grads: &[Vec<f64>],
    dp_size: usize,
    global_batch: u32,
) -> Result<StepStats, GnsError> {
    let mut acc = StepAccumulator::new(dp_size, global_batch);
    let dim = micro_grads.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for (i, g) in micro_grads.iter().enumerate() {
        acc.record_micro_batch(i % acc.dp_size(), squared_norm(g))?;
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x;
        }
    }
    let n = micro_grads.len().max(1) as f64;
    for m in &mut mean {
        *m /= n;
    }
    finalize_step(&acc, MeanGradient::Vector(&mean))
}

/// EMA-smoothed noise-scale estimator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct GnsState {
    pub ema_signal: f64,
    pub ema_noise: f64,
    pub alpha_early: f64,
    pub alpha_late: f64,
    pub phase_boundary_tokens: u64,
    pub tokens_seen: u64,
    pub calibration: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub updates: u64,
}

impl Default for GnsState {
    /// 0.95 for the first 8M tokens, 0.99 after; calibration 2.0.
    fn default() -> Self {
        Self::new(0.95, 0.99, 8_000_000, 2.0)
    }
}

impl GnsState {
    pub fn new(alpha_early: f64, alpha_late: f64, phase_boundary_tokens: u64, calibration: f64) -> Self {
        Self {
            ema_signal: 0.0,
            ema_noise: 0.0,
            alpha_early,
            alpha_late,
            phase_boundary_tokens,
            tokens_seen: 0,
            calibration,
            updates: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GnsError> {
        if !(0.0 < self.alpha_early && self.alpha_early <= self.alpha_late && self.alpha_late < 1.0)
        {
            return Err(GnsError::InvalidParams("need 0 < alpha_early <= alpha_late < 1"));
        }
        if !(self.calibration > 0.0) {
            return Err(GnsError::InvalidParams("calibration must be positive"));
        }
        Ok(())
    }

    /// Coefficient the next update will use.
    pub fn current_alpha(&self) -> f64 {
        if self.tokens_seen < self.phase_boundary_tokens {
            self.alpha_early
        } else {
            self.alpha_late
        }
    }

    /// Folds one step into the EMA. The first update seeds both streams
    /// with the raw values.
    pub fn update_ema(&mut self, stats: &StepStats, tokens_this_step: u64) {
        if self.updates == 0 {
            self.ema_signal = stats.signal;
            self.ema_noise = stats.noise;
        } else {
            let a = self.current_alpha();
            self.ema_signal = a * self.ema_signal + (1.0 - a) * stats.signal;
            self.ema_noise = (a * self.ema_noise + (1.0 - a) * stats.noise).max(0.0);
        }
        self.updates += 1;
        self.tokens_seen = self.tokens_seen.saturating_add(tokens_this_step);
    }

    /// Calibrated noise scale `c * ema_noise / ema_signal`.
    pub fn gns(&self) -> Result<f64, GnsError> {
        if self.updates == 0 || !(self.ema_signal > 0.0) {
            return Err(GnsError::Unavailable);
        }
        Ok(self.calibration * self.ema_noise / self.ema_signal)
    }

    pub fn trace_row(&self, step: u64, stats: &StepStats) -> GnsTraceRow {
        GnsTraceRow {
            step,
            tokens: self.tokens_seen,
            signal_raw: stats.signal,
            noise_raw: stats.noise_raw,
            ema_signal: self.ema_signal,
            ema_noise: self.ema_noise,
            phi: self.gns().ok(),
        }
    }
}

/// One line of the optional estimator trace.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GnsTraceRow {
    pub step: u64,
    pub tokens: u64,
    pub signal_raw: f64,
    pub noise_raw: f64,
    pub ema_signal: f64,
    pub ema_noise: f64,
    pub phi: Option<f64>,
}

/// Synthetic gradients: `G_true + zeta`, with independent components of
/// variance `sigma_diag[i] / micro_batch_samples`.
#[derive(Debug, Clone)]
pub struct MicroGradientSource {
    g_true: Vec<f64>,
    sigma_diag: Vec<f64>,
    rng: ChaCha8Rng,
}

impl MicroGradientSource {
    pub fn new(g_true: Vec<f64>, sigma_diag: Vec<f64>, seed: u64) -> Result<Self, GnsError> {
        if g_true.len() != sigma_diag.len() {
            return Err(GnsError::InvalidParams("g_true and sigma_diag differ in length"));
        }
        if sigma_diag.iter().any(|s| !(*s >= 0.0)) {
            return Err(GnsError::InvalidParams("sigma_diag must be non-negative"));
        }
        Ok(Self {
            g_true,
            sigma_diag,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `sum(sigma_diag) / |G_true|^2`.
    pub fn true_gns(&self) -> f64 {
        self.sigma_diag.iter().sum::<f64>() / squared_norm(&self.g_true)
    }

    pub fn set_sigma_diag(&mut self, sigma_diag: &[f64]) {
        self.sigma_diag.copy_from_slice(sigma_diag);
    }

    pub fn draw(&mut self, micro_batch_samples: u32, count: usize) -> Vec<Vec<f64>> {
        let b = f64::from(micro_batch_samples.max(1));
        let stds: Vec<f64> = self.sigma_diag.iter().map(|s| libm::sqrt(s / b)).collect();
        (0..count)
            .map(|_| {
                self.g_true
                    .iter()
                    .zip(&stds)
                    .map(|(g, sd)| {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        g + sd * z
                    })
                    .collect()
            })
            .collect()
    }
}

/// One-shot form of [`MicroGradientSource::draw`].
pub fn simulate_micro_gradients(
    g_true: &[f64],
    sigma_diag: &[f64],
    micro_batch_samples: u32,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, GnsError> {
    let mut src = MicroGradientSource::new(g_true.to_vec(), sigma_diag.to_vec(), seed)?;
    Ok(src.draw(micro_batch_samples, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_appends_in_order() {
        let mut acc = StepAccumulator::new(1, 4);
        acc.record_micro_batch(0, 4.0).unwrap();
        assert_eq!(acc.micro_squared_norms(0), &[4.0]);
        assert_eq!(acc.micro_count(), 1);
        acc.record_micro_batch(0, 1.0).unwrap();
        acc.record_micro_batch(0, 2.5).unwrap();
        assert_eq!(acc.micro_squared_norms(0), &[4.0, 1.0, 2.5]);
        assert_eq!(acc.micro_count(), 3);
    }

    #[test]
    fn record_rejects_negative_and_bad_rank() {
        let mut acc = StepAccumulator::new(2, 4);
        assert_eq!(acc.record_micro_batch(0, -1.0), Err(GnsError::NegativeNorm(-1.0)));
        assert!(acc.record_micro_batch(0, f64::NAN).is_err());
        assert!(matches!(
            acc.record_micro_batch(2, 1.0),
            Err(GnsError::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn hand_worked_step() {
        // g1 = (3, 0), g2 = (1, 0), B_g = 2
        let mut acc = StepAccumulator::new(1, 2);
        acc.record_micro_batch(0, 9.0).unwrap();
        acc.record_micro_batch(0, 1.0).unwrap();
        let st = finalize_step(&acc, MeanGradient::Vector(&[2.0, 0.0])).unwrap();
        assert_eq!(st.mean_sq_norm, 5.0);
        assert_eq!(st.mean_grad_sq, 4.0);
        assert_eq!(st.signal, 3.0);
        assert_eq!(st.noise, 2.0);
    }

    #[test]
    fn identical_micro_gradients_have_no_noise() {
        let g = [[1.5, -2.0, 0.5]; 4].map(|a| a.to_vec());
        let st = stats_from_micro_gradients(&g, 2, 8).unwrap();
        assert!(st.noise.abs() < 1e-12);
        assert!((st.signal - squared_norm(&g[0])).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let mut acc = StepAccumulator::new(1, 1);
        acc.record_micro_batch(0, 1.0).unwrap();
        assert_eq!(
            finalize_step(&acc, MeanGradient::SquaredNorm(1.0)),
            Err(GnsError::InsufficientSamples(1))
        );
    }

    #[test]
    fn uneven_ranks_rejected() {
        let mut acc = StepAccumulator::new(2, 4);
        acc.record_micro_batch(0, 1.0).unwrap();
        acc.record_micro_batch(0, 1.0).unwrap();
        acc.record_micro_batch(1, 1.0).unwrap();
        assert_eq!(
            finalize_step(&acc, MeanGradient::SquaredNorm(1.0)),
            Err(GnsError::UnevenMicroBatches)
        );
    }

    #[test]
    fn noise_is_clamped_but_raw_kept() {
        let mut acc = StepAccumulator::new(1, 2);
        acc.record_micro_batch(0, 1.0).unwrap();
        acc.record_micro_batch(0, 1.0).unwrap();
        let st = finalize_step(&acc, MeanGradient::SquaredNorm(2.0)).unwrap();
        assert_eq!(st.noise, 0.0);
        assert!(st.noise_raw < 0.0);
    }

    fn stats(signal: f64, noise: f64) -> StepStats {
        StepStats {
            signal,
            noise,
            noise_raw: noise,
            mean_grad_sq: 0.0,
            mean_sq_norm: 0.0,
        }
    }

    #[test]
    fn ema_initializes_then_smooths() {
        let mut g = GnsState::default();
        g.update_ema(&stats(3.0, 2.0), 10);
        assert_eq!((g.ema_signal, g.ema_noise), (3.0, 2.0));
        g.update_ema(&stats(5.0, 2.0), 10);
        assert!((g.ema_signal - 3.1).abs() < 1e-15);
    }

    #[test]
    fn ema_phase_switch() {
        let mut g = GnsState::new(0.95, 0.99, 100, 1.0);
        assert_eq!(g.current_alpha(), 0.95);
        g.update_ema(&stats(1.0, 1.0), 60);
        assert_eq!(g.current_alpha(), 0.95);
        g.update_ema(&stats(1.0, 1.0), 60);
        // 120 tokens seen: boundary crossed
        assert_eq!(g.current_alpha(), 0.99);
        g.update_ema(&stats(2.0, 1.0), 60);
        assert!((g.ema_signal - (0.99 + 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn gns_ratio_and_guards() {
        let mut g = GnsState::new(0.95, 0.99, 0, 2.0);
        assert_eq!(g.gns(), Err(GnsError::Unavailable));
        g.update_ema(&stats(3.0, 2.0), 1);
        assert!((g.gns().unwrap() - 4.0 / 3.0).abs() < 1e-15);
        let mut z = GnsState::new(0.95, 0.99, 0, 2.0);
        z.update_ema(&stats(3.0, 0.0), 1);
        assert_eq!(z.gns().unwrap(), 0.0);
        let mut neg = GnsState::new(0.95, 0.99, 0, 2.0);
        neg.update_ema(&stats(0.0, 1.0), 1);
        assert_eq!(neg.gns(), Err(GnsError::Unavailable));
    }

    #[test]
    fn alpha_validation() {
        assert!(GnsState::new(0.99, 0.95, 0, 1.0).validate().is_err());
        assert!(GnsState::new(0.9, 1.0, 0, 1.0).validate().is_err());
        assert!(GnsState::default().validate().is_ok());
    }

    #[test]
    fn noiseless_source_returns_truth() {
        let g = simulate_micro_gradients(&[1.0, 2.0], &[0.0, 0.0], 4, 5, 7).unwrap();
        assert!(g.iter().all(|v| v == &[1.0, 2.0]));
    }

    #[test]
    fn source_is_deterministic() {
        let a = simulate_micro_gradients(&[1.0, 2.0], &[1.0, 3.0], 4, 5, 7).unwrap();
        let b = simulate_micro_gradients(&[1.0, 2.0], &[1.0, 3.0], 4, 5, 7).unwrap();
        assert_eq!(a, b);
    }
}
