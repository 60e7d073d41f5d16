use std::f64::consts::PI;

use num_complex::Complex64;
use pdhloop::tfcore::{self, BodeTrace, GridSpec, Pid, Tabulated, TransferModel};
use pdhloop::{presets, ExecMode};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn pid_integral_and_derivative_cancel_at_geometric_mean() {
    let k = tfcore::eval_pid(1.0, 100.0, Some(1e6), 10e3).unwrap();
    let oracle = Complex64::new(1.0, -100.0 / 10e3 + 10e3 / 1e6);
    assert!((k - oracle).norm() < 1e-15);
    assert!(k.arg().abs() < 1e-12);
}

#[test]
fn pid_proportional_only() {
    for f in [1.0, 1e3, 1e7] {
        assert_eq!(tfcore::eval_pid(1.0, 0.0, None, f).unwrap(), Complex64::new(1.0, 0.0));
    }
}

#[test]
fn pid_integral_region_lags_ninety_and_falls_twenty_db_per_decade() {
    let p = Pid::new(1.0, 1e5, None);
    let a = p.eval(10.0).unwrap();
    let b = p.eval(100.0).unwrap();
    assert!(close(a.arg().to_degrees(), -90.0, 0.01));
    assert!(close(tfcore::gain_db(a) - tfcore::gain_db(b), 20.0, 0.01));
}

#[test]
fn pid_rejects_bad_parameters() {
    assert!(tfcore::eval_pid(0.0, 1.0, None, 1.0).is_err());
    assert!(tfcore::eval_pid(1.0, -1.0, None, 1.0).is_err());
    assert!(tfcore::eval_pid(1.0, 1.0, Some(0.0), 1.0).is_err());
    assert!(tfcore::eval_pid(1.0, 1.0, None, 0.0).is_err());
}

#[test]
fn butterworth_first_order_corner() {
    let h = tfcore::eval_lowpass_butterworth(1, 1e6, 1e6).unwrap();
    assert!(close(tfcore::gain_db(h), -3.0103, 1e-4));
    assert!(close(h.arg().to_degrees(), -45.0, 1e-9));
}

#[test]
fn butterworth_eighth_order_demodulation_filter() {
    let stop = tfcore::eval_lowpass_butterworth(8, 9e6, 20e6).unwrap();
    assert!(tfcore::gain_db(stop) <= -55.0, "{}", tfcore::gain_db(stop));
    let pass = tfcore::eval_lowpass_butterworth(8, 9e6, 1e6).unwrap();
    assert!(close(pass.arg().to_degrees(), -33.0, 1.0), "{}", pass.arg().to_degrees());
    // the arctan rule of thumb is far off at this order
    assert!(close(tfcore::lowpass_arctan_phase_deg(8, 9e6, 1e6), -50.7, 0.5));
}

#[test]
fn butterworth_magnitude_matches_closed_form() {
    for n in 1..=10u32 {
        for x in [0.01, 0.3, 1.0, 2.2, 50.0] {
            let h = tfcore::eval_lowpass_butterworth(n, 1.0, x).unwrap();
            let oracle = 1.0 / (1.0 + x.powi(2 * n as i32)).sqrt();
            assert!(close(h.norm(), oracle, 1e-12 * oracle.max(1e-300) + 1e-15), "n={n} x={x}");
        }
    }
}

#[test]
fn delay_phases() {
    assert_eq!(tfcore::eval_delay(0.0, 1e6).unwrap(), Complex64::new(1.0, 0.0));
    let coax = tfcore::path_delay(0.0, 0.0, 10.0);
    assert!(close(coax, 50.5e-9, 0.1e-9));
    let ph = tfcore::eval_delay(coax, 1e6).unwrap().arg().to_degrees();
    assert!(close(ph, -18.0, 0.5), "{ph}");
    let tau = presets::tau_config3();
    assert!(close(tau, 39.6e-9, 0.1e-9), "{tau}");
    let ph = tfcore::eval_delay(tau, 1.06e6).unwrap().arg().to_degrees();
    assert!(close(ph, -15.0, 0.5), "{ph}");
}

#[test]
fn cavity_pole() {
    let h = tfcore::eval_cavity(100e3, 50e3).unwrap();
    assert!(close(tfcore::gain_db(h), -3.0103, 1e-4));
    assert!(close(h.arg().to_degrees(), -45.0, 1e-9));
    let ph = tfcore::eval_cavity(45.7e3, 1.06e6).unwrap().arg().to_degrees();
    assert!(close(ph, -89.0, 0.3), "{ph}");
    let h = tfcore::eval_cavity(100e3, 1e3).unwrap();
    assert!(close(h.arg(), -(0.02f64).atan(), 1e-15));
    assert!(close(h.arg().to_degrees(), -1.15, 0.01));
}

#[test]
fn lockin_phase() {
    let a = tfcore::pd_lockin_phase(3, 200e6, 20e6, 1e6).to_degrees();
    assert!(close(a, -0.9, 0.1), "{a}");
    let b = tfcore::pd_lockin_phase(3, 5e6, 5e6, 1e6).to_degrees();
    assert!(close(b, -17.0, 0.5), "{b}");
    assert!(tfcore::pd_lockin_phase(3, 5e6, 5e6, 1e-6).abs() < 1e-9);
    assert!(tfcore::eval_pd_lockin(3, 5e6, 5e6, 6e6).is_err());
}

#[test]
fn compose_gains_and_phases() {
    let m = tfcore::compose(vec![TransferModel::gain(2.0), TransferModel::gain(3.0)]).unwrap();
    assert_eq!(m.eval(123.0).unwrap(), Complex64::new(6.0, 0.0));
    let m = tfcore::compose(vec![TransferModel::cavity(45.7e3), TransferModel::delay(1e-7)]).unwrap();
    for f in [1e3, 1e5, 1e6] {
        let sum = TransferModel::cavity(45.7e3).eval(f).unwrap().arg() + TransferModel::delay(1e-7).eval(f).unwrap().arg();
        let got = m.eval(f).unwrap().arg();
        let d = (got - sum).rem_euclid(2.0 * PI);
        assert!(d < 1e-12 || 2.0 * PI - d < 1e-12);
    }
    assert!(tfcore::compose(vec![]).is_err());
    assert!(tfcore::sum(vec![]).is_err());
}

#[test]
fn discriminator_chain_matches_pointwise_product() {
    let cfg = presets::config(3).unwrap();
    let parts = vec![cfg.demod.clone(), cfg.pd.clone(), TransferModel::gain(cfg.k_e().unwrap()), cfg.cavity()];
    let chain = tfcore::compose(parts.clone()).unwrap();
    let freqs = tfcore::log_grid(1e3, 1e7, 50).unwrap();
    assert_eq!(freqs.len(), 201);
    let got = tfcore::evaluate(&chain, &freqs, ExecMode::Sequential).unwrap();
    for (i, &f) in freqs.iter().enumerate() {
        let mut p = Complex64::new(1.0, 0.0);
        for m in &parts {
            p *= m.eval(f).unwrap();
        }
        assert!((got[i] - p).norm() <= 1e-12 * p.norm());
    }
}

#[test]
fn long_delay_unwraps_to_linear_phase() {
    let t = tfcore::bode_grid(&TransferModel::delay(1e-6), &GridSpec::new(1e4, 1e7, 200), ExecMode::Sequential).unwrap();
    let ph = t.phase_deg();
    assert!(close(*ph.last().unwrap(), -3600.0, 1e-6));
    for (i, &f) in t.freqs().iter().enumerate() {
        assert!(close(ph[i], -360.0 * f * 1e-6, 1e-6));
    }
}

#[test]
fn unit_gain_is_flat() {
    let t = tfcore::bode_grid(&TransferModel::gain(1.0), &GridSpec::new(1.0, 1e8, 10), ExecMode::Sequential).unwrap();
    assert!(t.gain_db().iter().all(|g| *g == 0.0));
    assert!(t.phase_deg().iter().all(|p| *p == 0.0));
}

#[test]
fn loop_filter_example_shape() {
    let m = tfcore::compose(vec![
        TransferModel::Pid(Pid::new(1.0, 100.0, Some(1e6))),
        TransferModel::lowpass(1, 20e6),
        TransferModel::delay(10e-9),
    ])
    .unwrap();
    let t = tfcore::bode_grid(&m, &GridSpec::new(1.0, 1e8, 100), ExecMode::Sequential).unwrap();
    let (imin, _) = t.gain_db().iter().enumerate().fold((0, f64::INFINITY), |a, (i, g)| if *g < a.1 { (i, *g) } else { a });
    let f_min = t.freqs()[imin];
    assert!(f_min > 5e3 && f_min < 20e3, "{f_min}");
    let lead = Tabulated::new(t.clone()).interp(3e6).unwrap().1;
    assert!(lead > 45.0, "{lead}");
}

#[test]
fn parallel_and_sequential_grids_agree() {
    let cfg = presets::config(3).unwrap();
    let m = pdhloop::loopan::assemble_open_loop(&cfg, pdhloop::loopan::Branch::Both).unwrap();
    let g = GridSpec::new(1e2, 1e7, 300);
    let a = tfcore::bode_grid(&m, &g, ExecMode::Sequential).unwrap();
    let b = tfcore::bode_grid(&m, &g, ExecMode::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tabulated_round_trip_and_range() {
    let m = TransferModel::lowpass(2, 1e5);
    let t = tfcore::bode_grid(&m, &GridSpec::new(1e3, 1e7, 400), ExecMode::Sequential).unwrap();
    let tab = Tabulated::new(t);
    for f in [2e3, 5e4, 1e5, 3e6] {
        let a = m.eval(f).unwrap();
        let b = tab.eval(f).unwrap();
        assert!((a - b).norm() < 1e-3 * a.norm(), "{f}");
    }
    assert!(tab.eval(10.0).is_err());
    assert!(tab.eval(2e7).is_err());
}

#[test]
fn bode_trace_rejects_bad_grids() {
    assert!(BodeTrace::from_gain_phase("x", vec![1.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]).is_err());
    assert!(BodeTrace::from_gain_phase("x", vec![2.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]).is_err());
    assert!(BodeTrace::from_gain_phase("x", vec![1.0], vec![0.0, 0.0], vec![0.0]).is_err());
    assert!(tfcore::log_grid(0.0, 1.0, 10).is_err());
}

fn factor() -> impl Strategy<Value = TransferModel> {
    prop_oneof![
        (0.1f64..10.0).prop_map(TransferModel::gain),
        (1u32..9, 1e3f64..1e8).prop_map(|(n, f0)| TransferModel::lowpass(n, f0)),
        (1.0f64..1e6).prop_map(TransferModel::highpass),
        (0.0f64..1e-6).prop_map(TransferModel::delay),
        (1e3f64..1e6).prop_map(TransferModel::cavity),
        (1.0f64..1e6).prop_map(TransferModel::integrator),
        (0.1f64..10.0, 0.0f64..1e6, 1e4f64..1e8).prop_map(|(k, i, d)| TransferModel::Pid(Pid::new(k, i, Some(d)))),
    ]
}

proptest! {
    #[test]
    fn phase_adds_under_composition(parts in prop::collection::vec(factor(), 1..6), f in 1.0f64..1e7) {
        let composed = tfcore::compose(parts.clone()).unwrap().eval(f).unwrap();
        let mut sum = 0.0;
        let mut mag = 1.0;
        for p in &parts {
            let z = p.eval(f).unwrap();
            sum += z.arg();
            mag *= z.norm();
        }
        let d = (composed.arg() - sum).rem_euclid(2.0 * PI);
        prop_assert!(d < 1e-9 || 2.0 * PI - d < 1e-9);
        prop_assert!((composed.norm() - mag).abs() <= 1e-9 * mag);
    }

    #[test]
    fn first_order_butterworth_is_single_pole(f0 in 1.0f64..1e8, x in 1e-4f64..1e4) {
        let f = f0 * x;
        let h = tfcore::eval_lowpass_butterworth(1, f0, f).unwrap();
        let l1 = Complex64::new(1.0, 0.0) / Complex64::new(1.0, f / f0);
        prop_assert!((h - l1).norm() < 1e-12);
    }

    #[test]
    fn butterworth_three_db_at_corner(n in 1u32..12, f0 in 1.0f64..1e8) {
        let h = tfcore::eval_lowpass_butterworth(n, f0, f0).unwrap();
        prop_assert!((tfcore::gain_db(h) + 3.0103).abs() < 1e-4);
    }

    #[test]
    fn delay_has_unit_magnitude(tau in 0.0f64..1e-3, f in 1e-3f64..1e9) {
        prop_assert!((tfcore::eval_delay(tau, f).unwrap().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lockin_phase_is_odd(n in 1u32..6, f_pd in 1e6f64..1e9, om in 1e6f64..1e8, x in 0.0f64..0.99) {
        let f = x * om;
        let a = tfcore::pd_lockin_phase(n, f_pd, om, f);
        let b = tfcore::pd_lockin_phase(n, f_pd, om, -f);
        prop_assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn tabulated_reproduces_its_own_points(parts in prop::collection::vec(factor(), 1..4)) {
        let m = tfcore::compose(parts).unwrap();
        let t = tfcore::bode_grid(&m, &GridSpec::new(10.0, 1e7, 20), ExecMode::Sequential).unwrap();
        let tab = Tabulated::new(t.clone());
        for i in 0..t.len() {
            let (g, p) = tab.interp(t.freqs()[i]).unwrap();
            prop_assert!((g - t.gain_db()[i]).abs() < 1e-9);
            prop_assert!((p - t.phase_deg()[i]).abs() < 1e-9);
        }
    }
}
