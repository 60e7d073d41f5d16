use pdhloop::loopan::{self, Branch, LoopConfig};
use pdhloop::tfcore::{self, BodeTrace, GridSpec, Pid, TransferModel};
use pdhloop::tuner::{self, Axis, TuneOptions, Verdict};
use pdhloop::{presets, ExecMode};
use proptest::prelude::*;

/// α ≈ integrator(f_i)·delay(τ): unit discriminator, a cavity far above
/// the band and a proportional controller.
fn integrator_loop(f_i: f64, tau: f64) -> LoopConfig {
    let mut c = presets::tuner_plant();
    c.discriminator.delta_nu_c = 1e15;
    c.k_e_measured = Some(1.0);
    c.k_fast = Pid::new(1.0, 0.0, None);
    c.g_fast = TransferModel::integrator(f_i);
    c.tau_l = tau;
    c.grid = GridSpec::new(1e2, 1e8, 200);
    c
}

fn oracle_grid(cfg: &LoopConfig, opts: &TuneOptions) -> tuner::GridBest {
    let ax = |lo, hi| Axis { lo, hi, n: 20 };
    tuner::grid_search(cfg, ax(0.1, 1e3), ax(1e2, 1e6), ax(1e4, 1e8), opts, ExecMode::Parallel)
        .unwrap()
        .expect("the oracle finds an admissible point")
}

#[test]
fn integrator_loop_is_stable() {
    assert_eq!(tuner::oscillation_test(&integrator_loop(1e5, 0.0)).unwrap(), Verdict::Stable);
}

#[test]
fn integrator_with_delay_oscillates_at_phase_crossover() {
    let tau = 100e-9;
    assert_eq!(tuner::oscillation_test(&integrator_loop(2e6, tau)).unwrap(), Verdict::Stable);
    match tuner::oscillation_test(&integrator_loop(3e6, tau)).unwrap() {
        Verdict::Oscillating { f: Some(f) } => assert!((f / (1.0 / (4.0 * tau)) - 1.0).abs() < 1e-3, "{f}"),
        v => panic!("{v:?}"),
    }
}

#[test]
fn reference_configurations_are_stable() {
    for n in 1..=3u8 {
        assert_eq!(tuner::oscillation_test(&presets::config(n).unwrap()).unwrap(), Verdict::Stable);
    }
}

#[test]
fn autotune_matches_grid_oracle() {
    let cfg = presets::tuner_plant();
    assert_eq!(cfg.discriminator.delta_nu_c, 45.7e3);
    let opts = TuneOptions::default();
    let r = tuner::autotune(&cfg, &opts).unwrap();
    assert!(r.is_feasible(), "{:?}", r.infeasible);
    let best = oracle_grid(&cfg, &opts);
    let (fa, fg) = (r.margins.f_ug.unwrap(), best.margins.f_ug.unwrap());
    assert!(fa >= 0.9 * fg, "autotune {fa} vs grid {fg}");
    let pm = r.margins.phi_m.unwrap();
    assert!(pm > 30.0 && pm < 60.0);
}

#[test]
fn autotune_satisfies_goals_unless_infeasible() {
    let mut plants = vec![presets::tuner_plant(), presets::infeasible_plant()];
    for n in 1..=3u8 {
        plants.push(presets::config(n).unwrap());
    }
    for tau in [20e-9, 80e-9, 200e-9] {
        let mut p = presets::tuner_plant();
        p.tau_l = tau;
        plants.push(p);
    }
    let opts = TuneOptions::default();
    for (i, p) in plants.iter().enumerate() {
        let r = tuner::autotune(p, &opts).unwrap();
        if r.is_feasible() {
            let m = &r.margins;
            assert!(opts.admits(m), "plant {i}: {m:?}");
            assert!(m.goals.phase_margin && m.goals.low_frequency_phase, "plant {i}");
            assert!(!m.is_oscillating());
        }
    }
}

#[test]
fn delay_dominated_plant_is_infeasible() {
    let r = tuner::autotune(&presets::infeasible_plant(), &TuneOptions::default()).unwrap();
    let why = r.infeasible.expect("infeasible");
    assert!(!why.binding_constraint.is_empty());
    assert!(!r.converged);
}

#[test]
fn autotune_is_deterministic_and_replayable() {
    let cfg = presets::tuner_plant();
    let opts = TuneOptions::default();
    let a = tuner::autotune(&cfg, &opts).unwrap();
    let b = tuner::autotune(&cfg, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(tuner::replay(&cfg, &a).unwrap());
    let mut tampered = a.clone();
    tampered.k_fast.k_p *= 2.0;
    assert!(!tuner::replay(&cfg, &tampered).unwrap());
}

#[test]
fn fast_only_tuning_leaves_slow_branch_alone() {
    let cfg = presets::config(3).unwrap();
    let r = tuner::autotune_fast(&cfg, &TuneOptions::default()).unwrap();
    assert_eq!(r.f_i_slow, None);
    assert!(r.trace.iter().all(|s| s.param != Some(tuner::Param::FISlow)));
}

#[test]
fn bad_tuning_steps_are_rejected() {
    let cfg = presets::tuner_plant();
    for o in [
        TuneOptions { step: 1.0, ..Default::default() },
        TuneOptions { backoff: 1.5, ..Default::default() },
        TuneOptions { final_step: 0.9, ..Default::default() },
    ] {
        assert!(tuner::autotune(&cfg, &o).is_err());
    }
}

#[test]
fn grid_search_modes_agree() {
    let cfg = presets::tuner_plant();
    let ax = |lo, hi| Axis { lo, hi, n: 6 };
    let o = TuneOptions::default();
    let a = tuner::grid_search(&cfg, ax(0.1, 1e3), ax(1e2, 1e6), ax(1e4, 1e8), &o, ExecMode::Sequential).unwrap();
    let b = tuner::grid_search(&cfg, ax(0.1, 1e3), ax(1e2, 1e6), ax(1e4, 1e8), &o, ExecMode::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn configuration_three_phase_budget() {
    let cfg = presets::config(3).unwrap();
    let b = tuner::phase_budget(&tuner::loop_components(&cfg).unwrap(), presets::F_REF, presets::MEASURED_ALPHA_PHASE_DEG).unwrap();
    let expect = [40.0, -52.0, -89.0, -9.0, -15.0];
    for (e, x) in b.entries.iter().zip(expect) {
        assert!((e.phase_deg - x).abs() < 1.0, "{}: {}", e.name, e.phase_deg);
    }
    assert!((b.sum_deg + 125.0).abs() < 1.0, "{}", b.sum_deg);
    assert!(b.residual_deg.abs() < 5.0);
}

#[test]
fn identity_budget_is_zero() {
    let parts = vec![("a".to_string(), TransferModel::Identity), ("b".to_string(), TransferModel::gain(3.0))];
    let b = tuner::phase_budget(&parts, 1e6, 0.0).unwrap();
    assert_eq!(b.sum_deg, 0.0);
}

fn component() -> impl Strategy<Value = TransferModel> {
    prop_oneof![
        (1u32..9, 1e4f64..1e8).prop_map(|(n, f0)| TransferModel::lowpass(n, f0)),
        (1.0f64..1e5).prop_map(TransferModel::highpass),
        (0.0f64..2e-7).prop_map(TransferModel::delay),
        (1e3f64..1e6).prop_map(TransferModel::cavity),
        (0.1f64..10.0, 1.0f64..1e5, 1e5f64..1e8).prop_map(|(k, i, d)| TransferModel::Pid(Pid::new(k, i, Some(d)))),
    ]
}

proptest! {
    #[test]
    fn budget_sum_equals_composed_phase(parts in prop::collection::vec(component(), 1..6), f_ref in 1e4f64..5e6) {
        let named: Vec<_> = parts.iter().enumerate().map(|(i, m)| (format!("c{i}"), m.clone())).collect();
        let b = tuner::phase_budget(&named, f_ref, 0.0).unwrap();
        let whole = tfcore::compose(parts).unwrap().eval(f_ref).unwrap().arg().to_degrees();
        let d = (b.sum_deg - whole).rem_euclid(360.0);
        prop_assert!(d < 1e-9 || 360.0 - d < 1e-9, "{} vs {}", b.sum_deg, whole);
    }
}

#[test]
fn cavity_advice() {
    let a = tuner::cavity_advisor(1e6, 1e4).unwrap();
    assert!((a.delta_nu_c_min - 63.2e3).abs() < 0.1e3);
    assert!((a.delta_nu_c_max - 632e3).abs() < 1e3);
    assert!((a.delta_nu_c_max / 2.0 - 316e3).abs() < 1e3);
    assert!(!a.empty);
    assert!(tuner::cavity_advisor(1e6, 1e5).unwrap().empty);
    let b = tuner::cavity_advisor(2e6, 1e4).unwrap();
    assert!((b.delta_nu_c_max / a.delta_nu_c_max - 2.0).abs() < 1e-12);
    assert_eq!(b.delta_nu_c_min, a.delta_nu_c_min);
}

fn flat_closed(freqs: &[f64], gain: impl Fn(f64) -> f64) -> BodeTrace {
    let g = freqs.iter().map(|&f| gain(f)).collect();
    BodeTrace::from_gain_phase("y5/m6", freqs.to_vec(), g, vec![0.0; freqs.len()]).unwrap()
}

#[test]
fn low_frequency_check_passes_on_high_gain_loop() {
    let freqs = tfcore::log_grid(10.0, 1e7, 100).unwrap();
    let closed = flat_closed(&freqs, |_| 0.0);
    assert!(tuner::low_freq_excess_check(&closed, 2e6).unwrap().pass);
}

#[test]
fn low_frequency_check_finds_coverage_gap() {
    let freqs = tfcore::log_grid(10.0, 1e7, 100).unwrap();
    // an open loop that dips below unity between the slow and fast ranges
    let alpha: Vec<_> = freqs
        .iter()
        .map(|&f| {
            let dip = if (3e4..6e4).contains(&f) { 0.5 } else { 100.0 };
            num_complex::Complex64::new(dip, 0.0)
        })
        .collect();
    let open = BodeTrace::from_complex("α", freqs.clone(), &alpha).unwrap();
    let closed = loopan::closed_trace_from_open(&open).unwrap();
    let r = tuner::low_freq_excess_check(&closed, 2e6).unwrap();
    assert!(!r.pass);
    let (a, b) = r.offending.unwrap();
    assert!(a >= 3e4 && b < 6e4, "{a}..{b}");
    assert!(r.worst_gain_db < -3.0);
}

#[test]
fn low_frequency_check_on_reference_configurations() {
    for n in 1..=3u8 {
        let cfg = presets::config(n).unwrap();
        let open = loopan::open_loop_trace(&cfg, Branch::Both, ExecMode::Sequential).unwrap();
        let f_180 = loopan::margins(&open).f_180.unwrap();
        let closed = loopan::closed_trace_from_open(&open).unwrap();
        assert!(tuner::low_freq_excess_check(&closed, f_180).unwrap().pass, "config {n}");
    }
}

#[test]
fn low_frequency_check_needs_coverage() {
    let freqs = tfcore::log_grid(1e5, 1e7, 10).unwrap();
    let closed = flat_closed(&freqs, |_| 0.0);
    assert!(tuner::low_freq_excess_check(&closed, 2e6).is_err());
}
