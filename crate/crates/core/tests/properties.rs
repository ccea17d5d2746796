use std::collections::BTreeMap;

use coadapt_core::gns::{stats_from_micro_gradients, simulate_micro_gradients, GnsState};
use coadapt_core::goodput::{
    cbs_target, goodput_lr, lr_rescale, optimal_batch_continuous, saturating_objective, stat_eff,
    BatchDistance,
};
use coadapt_core::orchestrator::{decide, ClockState, Command, OrchestratorConfig};
use coadapt_core::profile::{
    factorizations, pow2_grid, synth_profile, Candidate, CostModelParams, MemoryModel,
    ParallelStrategy, SaturatingCurve, ThroughputProfile,
};
use coadapt_core::reshard::{
    execute_in_order, layout_for, plan_transfers, GlobalTensor, ModelSpec, ShardedState, TensorSpec,
};
use coadapt_core::sim::{
    run_sim, GnsMode, GnsSource, GnsTrajectory, LossModel, Policy, ReconfigLatency, SimConfig,
};
use proptest::prelude::*;

fn profile_from(strats: &[(ParallelStrategy, f64, f64)], bubble: bool, hi: u32) -> ThroughputProfile {
    let mut curves = BTreeMap::new();
    for &(s, t_max, b_hw) in strats {
        curves.insert(s, SaturatingCurve { t_max, b_hw });
    }
    let ss: Vec<_> = strats.iter().map(|x| x.0).collect();
    synth_profile(
        "prop",
        &CostModelParams {
            curves,
            pipeline_bubble: bubble,
            memory: MemoryModel {
                model_bytes: 0.0,
                activation_bytes_per_sample: 0.0,
            },
        },
        &ss,
        &pow2_grid(16, hi),
        &[1, 2, 4],
        f64::INFINITY,
    )
    .unwrap()
}

fn arb_profile() -> impl Strategy<Value = ThroughputProfile> {
    let all = factorizations(8);
    (
        proptest::sample::subsequence(all, 1..=3),
        proptest::collection::vec((5.0f64..100.0, 1.0f64..500.0), 3),
        any::<bool>(),
    )
        .prop_map(|(ss, params, bubble)| {
            let v: Vec<_> = ss.iter().zip(params).map(|(s, (t, h))| (*s, t, h)).collect();
            profile_from(&v, bubble, 1024)
        })
}

proptest! {
    #[test]
    fn stat_eff_in_unit_interval(b in 1.0f64..1e5, phi in 0.0f64..1e6) {
        let se = stat_eff(b, phi);
        prop_assert!(se > 0.0 && se <= 1.0 + 1e-15);
    }

    #[test]
    fn continuous_optimum_beats_neighbours(b_hw in 0.1f64..1e4, bc in 0.1f64..1e4) {
        let b = optimal_batch_continuous(b_hw, bc);
        let f = saturating_objective(b, b_hw, bc);
        prop_assert!(f >= saturating_objective(b * 1.01, b_hw, bc));
        prop_assert!(f >= saturating_objective(b / 1.01, b_hw, bc));
    }

    #[test]
    fn lr_rescale_composes(a in 1.0f64..4096.0, b in 1.0f64..4096.0, c in 1.0f64..4096.0) {
        let direct = lr_rescale(1e-4, a, c);
        let chained = lr_rescale(lr_rescale(1e-4, a, b), b, c);
        prop_assert!((direct - chained).abs() <= 1e-12 * direct);
    }

    #[test]
    fn cbs_target_is_log_nearest(phi in 0.0f64..1e4) {
        let grid = pow2_grid(16, 2048);
        let t = cbs_target(phi, &grid, BatchDistance::Log).unwrap();
        let d = |b: u32| (f64::from(b).ln() - phi.max(1.0).ln()).abs();
        prop_assert!(grid.iter().all(|&b| d(t) <= d(b) + 1e-12));
    }

    #[test]
    fn noise_estimate_independent_of_dp_grouping(seed in any::<u64>(), sigma in 0.01f64..10.0) {
        let g = simulate_micro_gradients(&[1.0, -0.5, 0.25, 2.0], &[sigma; 4], 2, 8, seed).unwrap();
        let one = stats_from_micro_gradients(&g, 1, 16).unwrap();
        for dp in [2, 4, 8] {
            let s = stats_from_micro_gradients(&g, dp, 16).unwrap();
            prop_assert!((s.signal - one.signal).abs() <= 1e-9 * (1.0 + one.signal.abs()));
            prop_assert!((s.noise_raw - one.noise_raw).abs() <= 1e-9 * (1.0 + one.noise_raw.abs()));
        }
        prop_assert!(one.noise >= 0.0);
    }

    #[test]
    fn first_ema_update_is_raw(seed in any::<u64>()) {
        let g = simulate_micro_gradients(&[1.0, 1.0], &[1.0, 1.0], 1, 4, seed).unwrap();
        let s = stats_from_micro_gradients(&g, 2, 4).unwrap();
        let mut st = GnsState::default();
        st.update_ema(&s, 4);
        prop_assert_eq!(st.ema_signal, s.signal);
        prop_assert_eq!(st.ema_noise, s.noise);
    }

    #[test]
    fn decisions_are_idempotent_without_clamp(
        profile in arb_profile(),
        log_phi in 0.0f64..9.0,
        pick in any::<prop::sample::Index>(),
        elapsed in 0.0f64..1e5,
        frac in 0.0f64..=1.0,
        cost in 0.0f64..100.0,
    ) {
        let cands = profile.feasible_candidates();
        let current = *pick.get(&cands);
        let clock = ClockState::new(elapsed, elapsed * frac).unwrap();
        let cfg = OrchestratorConfig { max_growth: f64::INFINITY, reconfig_cost: cost, ..Default::default() };
        let phi = Some(log_phi.exp() - 1.0);
        let d = decide(&cands, phi, &current, &clock, &cfg).unwrap();
        if d.command != Command::NoOp {
            let next = d.command.apply(current.config);
            let now = Candidate { config: next, throughput: profile.throughput(&next).unwrap() };
            prop_assert!(cands.contains(&now));
            let again = decide(&cands, phi, &now, &clock, &cfg).unwrap();
            prop_assert_eq!(again.command, Command::NoOp);
        }
    }

    #[test]
    fn higher_reconfig_cost_never_creates_reconfigure(
        profile in arb_profile(),
        log_phi in 0.0f64..9.0,
        pick in any::<prop::sample::Index>(),
        elapsed in 1.0f64..1e5,
        c1 in 0.0f64..200.0,
        extra in 0.0f64..200.0,
    ) {
        let cands = profile.feasible_candidates();
        let current = *pick.get(&cands);
        let clock = ClockState::new(elapsed, elapsed).unwrap();
        let lo = OrchestratorConfig { reconfig_cost: c1, ..Default::default() };
        let hi = OrchestratorConfig { reconfig_cost: c1 + extra, ..Default::default() };
        let phi = Some(log_phi.exp());
        let a = decide(&cands, phi, &current, &clock, &lo).unwrap();
        let b = decide(&cands, phi, &current, &clock, &hi).unwrap();
        if a.command == Command::NoOp {
            let reconf = matches!(b.command, Command::Reconfigure { .. });
            prop_assert!(!reconf);
        }
    }

    #[test]
    fn uniform_throughput_scaling_keeps_decision(
        profile in arb_profile(),
        log_phi in 0.0f64..9.0,
        pick in any::<prop::sample::Index>(),
        k in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0, 1024.0]),
    ) {
        let cands = profile.feasible_candidates();
        let scaled: Vec<_> = cands.iter().map(|c| Candidate { config: c.config, throughput: c.throughput * k }).collect();
        let i = pick.index(cands.len());
        let clock = ClockState::new(500.0, 400.0).unwrap();
        let cfg = OrchestratorConfig::default();
        let phi = Some(log_phi.exp());
        let a = decide(&cands, phi, &cands[i], &clock, &cfg).unwrap();
        let b = decide(&scaled, phi, &scaled[i], &clock, &cfg).unwrap();
        prop_assert_eq!(a.command, b.command);
    }

    #[test]
    fn gns_scale_equivariance(seed in any::<u64>(), k in prop::sample::select(vec![0.5f64, 2.0, 4.0])) {
        let g = simulate_micro_gradients(&[1.0, 2.0, -1.0], &[3.0; 3], 1, 6, seed).unwrap();
        let scaled: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| x * k).collect()).collect();
        let a = stats_from_micro_gradients(&g, 2, 6).unwrap();
        let b = stats_from_micro_gradients(&scaled, 2, 6).unwrap();
        prop_assert!((b.signal - k * k * a.signal).abs() <= 1e-9 * (1.0 + a.signal.abs()) * k * k);
        prop_assert!((b.noise_raw - k * k * a.noise_raw).abs() <= 1e-9 * (1.0 + a.noise_raw.abs()) * k * k);
    }

    #[test]
    fn ema_stays_in_hull(seed in any::<u64>(), n in 1usize..60) {
        let mut st = GnsState::default();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            let g = simulate_micro_gradients(&[1.0, 1.0], &[2.0, 2.0], 1, 4, seed.wrapping_add(i as u64)).unwrap();
            let s = stats_from_micro_gradients(&g, 2, 4).unwrap();
            lo = lo.min(s.signal);
            hi = hi.max(s.signal);
            st.update_ema(&s, 1_000_000);
            prop_assert!(st.ema_signal >= lo - 1e-12 && st.ema_signal <= hi + 1e-12);
        }
    }

    #[test]
    fn commands_stay_inside_growth_cap(
        profile in arb_profile(),
        log_phi in 0.0f64..9.0,
        pick in any::<prop::sample::Index>(),
    ) {
        let cands = profile.feasible_candidates();
        let current = *pick.get(&cands);
        let cfg = OrchestratorConfig::default();
        let d = decide(&cands, Some(log_phi.exp()), &current, &ClockState::new(1e4, 1e4).unwrap(), &cfg).unwrap();
        let next = d.command.apply(current.config);
        prop_assert!(f64::from(next.global_batch) <= 2.0 * f64::from(current.config.global_batch));
        if let Command::ScaleBs { .. } = d.command {
            prop_assert_eq!(next.strategy, current.config.strategy);
        }
        if let Command::Reconfigure { .. } = d.command {
            prop_assert_ne!(next.strategy, current.config.strategy);
        }
    }
}

fn reshard_model(layers: usize, width: usize) -> ModelSpec {
    ModelSpec {
        layers,
        tensors: vec![
            TensorSpec { name: "w".into(), shape: vec![width, 2 * width], tp_axis: Some(1) },
            TensorSpec { name: "v".into(), shape: vec![width, width], tp_axis: Some(0) },
            TensorSpec { name: "n".into(), shape: vec![3], tp_axis: None },
        ],
        optimizer_state_multiplier: 1,
        param_elem_bytes: 2,
        optim_elem_bytes: 4,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reshard_round_trip(
        n in prop::sample::select(vec![1u32, 2, 4, 8]),
        ia in any::<prop::sample::Index>(),
        ib in any::<prop::sample::Index>(),
        seed in any::<u64>(),
        shuffle in any::<u64>(),
    ) {
        let m = reshard_model(8, 8);
        let fs = factorizations(n);
        let (a, b) = (*ia.get(&fs), *ib.get(&fs));
        let la = layout_for(&m, a, n).unwrap();
        let lb = layout_for(&m, b, n).unwrap();
        let mut globals = BTreeMap::new();
        let mut x = seed;
        for t in m.tensors() {
            let len: usize = t.shape.iter().product();
            let data = (0..len).map(|_| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (x >> 11) as f64 }).collect();
            globals.insert(t.key, GlobalTensor { shape: t.shape, data });
        }
        let st = ShardedState::from_global(&la, &globals).unwrap();
        let ab = plan_transfers(&la, &lb).unwrap();
        let mut order: Vec<usize> = (0..ab.moves.len()).collect();
        let mut y = shuffle | 1;
        for i in (1..order.len()).rev() {
            y ^= y << 13; y ^= y >> 7; y ^= y << 17;
            order.swap(i, (y % (i as u64 + 1)) as usize);
        }
        let (sb, rep) = execute_in_order(&st, &la, &lb, &ab, &order).unwrap();
        for (k, g) in &globals {
            prop_assert_eq!(&sb.to_global(&lb, k).unwrap(), g);
        }
        prop_assert!(rep.peak_total <= rep.source_footprint.max(rep.target_footprint) + rep.staging_bytes);
        let ba = plan_transfers(&lb, &la).unwrap();
        let (back, _) = execute_in_order(&sb, &lb, &la, &ba, &(0..ba.moves.len()).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(back, st);
    }
}

fn two_strategy_profile() -> ThroughputProfile {
    profile_from(
        &[
            (ParallelStrategy::new(2, 1, 4), 16.0, 8.0),
            (ParallelStrategy::new(8, 1, 1), 24.0, 96.0),
        ],
        true,
        1024,
    )
}

fn sim_config(budget: u64, latency: f64, seed: u64) -> SimConfig {
    SimConfig {
        token_budget: budget,
        seq_len: 4,
        initial_batch: 16,
        base_lr: 1e-4,
        warmup_tokens: None,
        reconfig: ReconfigLatency::Fixed { seconds: latency },
        seed,
    }
}

fn arb_policy() -> impl Strategy<Value = Policy> {
    prop_oneof![
        (0.0f64..0.3).prop_map(|m| Policy::Goodput {
            orchestrator: OrchestratorConfig { margin: m, decision_interval: 5, ..Default::default() }
        }),
        prop::sample::select(pow2_grid(16, 1024)).prop_map(|b| Policy::StaticGbs { global_batch: b }),
        prop::sample::select(vec![ParallelStrategy::new(2, 1, 4), ParallelStrategy::new(8, 1, 1)])
            .prop_map(|s| Policy::cbs(s, 1)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sim_accounting(
        policy in arb_policy(),
        phi0 in 1.0f64..64.0,
        tau in 1e3f64..1e6,
        budget in 10_000u64..400_000,
        latency in 0.0f64..60.0,
    ) {
        let p = two_strategy_profile();
        let gns = GnsSource { trajectory: GnsTrajectory { phi0, growth_tokens: tau }, mode: GnsMode::Analytic };
        let cfg = sim_config(budget, latency, 0);
        let t = run_sim(&p, &policy, &LossModel::default(), &gns, &cfg).unwrap();
        let last = t.final_event().unwrap();
        let step_tokens: u64 = last.config.global_batch as u64 * cfg.seq_len;
        let consumed: u64 = t.events[1..].iter().map(|e| e.config.global_batch as u64 * cfg.seq_len).sum();
        prop_assert_eq!(consumed, last.tokens);
        prop_assert!(last.tokens >= budget && last.tokens < budget + step_tokens);
        let steps: f64 = t.events[1..].iter().map(|e| f64::from(e.config.global_batch) / e.throughput).sum();
        let expect = steps + t.total_reconfig_latency();
        prop_assert!((last.time_s - expect).abs() <= 1e-9 * expect);
        prop_assert!(t.events.windows(2).all(|w| w[1].time_s > w[0].time_s));
        prop_assert!(t.events.windows(2).all(|w| w[1].tokens >= w[0].tokens));
        prop_assert!(t.events.windows(2).all(|w| w[1].loss <= w[0].loss));
        let again = run_sim(&p, &policy, &LossModel::default(), &gns, &cfg).unwrap();
        prop_assert_eq!(again, t);
    }

    #[test]
    fn flat_goodput_matches_cbs_without_margin(phi0 in 1.0f64..64.0, tau in 1e3f64..1e6) {
        let p = profile_from(&[(ParallelStrategy::new(8, 1, 1), 30.0, 1e-9)], false, 2048);
        let gns = GnsSource { trajectory: GnsTrajectory { phi0, growth_tokens: tau }, mode: GnsMode::Analytic };
        let cfg = sim_config(500_000, 0.0, 0);
        let interval = 5;
        let g = run_sim(&p, &Policy::Goodput {
            orchestrator: OrchestratorConfig { margin: 0.0, decision_interval: interval, ..Default::default() },
        }, &LossModel::default(), &gns, &cfg).unwrap();
        let c = run_sim(&p, &Policy::Cbs {
            strategy: ParallelStrategy::new(8, 1, 1),
            micro_batch: 1,
            decision_interval: interval,
            max_growth: 2.0,
            distance: BatchDistance::Log,
        }, &LossModel::default(), &gns, &cfg).unwrap();
        let bg = |t: &coadapt_core::SimTrace| t.events.iter().map(|e| e.config.global_batch).collect::<Vec<_>>();
        prop_assert_eq!(bg(&g), bg(&c));
    }
}

#[test]
fn stochastic_mode_is_seeded() {
    let p = two_strategy_profile();
    let gns = GnsSource {
        trajectory: GnsTrajectory { phi0: 8.0, growth_tokens: 1e5 },
        mode: GnsMode::Stochastic { dim: 16, estimator: GnsState::default() },
    };
    let pol = Policy::Goodput { orchestrator: OrchestratorConfig { decision_interval: 5, ..Default::default() } };
    let run = |seed| run_sim(&p, &pol, &LossModel::default(), &gns, &sim_config(200_000, 30.0, seed)).unwrap();
    let a = run(1);
    assert_eq!(a, run(1));
    assert_ne!(a, run(2));
    assert!(a.events[0].phi.is_none());
    assert!(a.events.last().unwrap().phi.is_some());
}

#[test]
fn recorded_goodput_matches_score() {
    let p = two_strategy_profile();
    let gns = GnsSource { trajectory: GnsTrajectory { phi0: 8.0, growth_tokens: 1e5 }, mode: GnsMode::Analytic };
    let pol = Policy::Goodput { orchestrator: OrchestratorConfig::default() };
    let t = run_sim(&p, &pol, &LossModel::default(), &gns, &sim_config(300_000, 30.0, 0)).unwrap();
    for e in &t.events {
        let g = goodput_lr(e.throughput, f64::from(e.config.global_batch), e.phi.unwrap(), 16.0);
        assert_eq!(e.goodput, Some(g));
    }
}
