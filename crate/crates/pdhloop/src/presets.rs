//! Reference setups: the three configurations of the example ECDL lock
//! (built from component models), a generic plant for exercising the
//! autotuner, and synthetic measurement recipes.

use crate::ingest::RingdownSynth;
use crate::linewidth::NoiseModel;
use crate::loopan::LoopConfig;
use crate::pdh::{DetectorConfig, DiscriminatorConfig, ModulationConfig};
use crate::tfcore::{path_delay, GridSpec, Pid, TransferModel};

/// Measured discriminator slope of the example lock, V/Hz.
pub const K_E_MEASURED: f64 = 2.69e-6;
/// Cavity linewidth of the example lock (from its ring-down), Hz.
pub const DELTA_NU_C: f64 = 45.7e3;
/// Unity-gain frequency of configuration 3, where the phase budget is taken.
pub const F_REF: f64 = 1.06e6;
/// Measured open-loop phase of configuration 3 at [`F_REF`], degrees.
pub const MEASURED_ALPHA_PHASE_DEG: f64 = -126.0;
pub const OMEGA_OVER_2PI: f64 = 20e6;
pub const BETA: f64 = 1.082;

/// Loop delay of configuration 3: 2.1 m free space, 4.9 m fiber, 1.7 m coax.
pub fn tau_config3() -> f64 {
    path_delay(2.1, 4.9, 1.7)
}

/// Configuration 1 adds 6.8 m of coax to the configuration 3 path.
pub fn tau_config1() -> f64 {
    tau_config3() + path_delay(0.0, 0.0, 6.8)
}

/// Fast (current) actuator: AC-coupled, two poles.
pub fn g_fast() -> TransferModel {
    TransferModel::Product {
        factors: vec![
            TransferModel::gain(2e7),
            TransferModel::highpass(10.0),
            TransferModel::lowpass(1, 1.33e6),
            TransferModel::lowpass(1, 4.47e6),
        ],
    }
}

/// Slow (PZT) actuator.
pub fn g_slow() -> TransferModel {
    TransferModel::Product { factors: vec![TransferModel::gain(1e6), TransferModel::lowpass(1, 3e3)] }
}

fn detector(nep: f64, f_pd: f64) -> DetectorConfig {
    DetectorConfig { responsivity: 1.0, g_tr: 5e3, nep, f_pd, order: 3 }
}

fn discriminator(det: DetectorConfig, p_pd: f64) -> DiscriminatorConfig {
    DiscriminatorConfig {
        modulation: ModulationConfig { beta: BETA, omega_over_2pi: OMEGA_OVER_2PI },
        detector: det,
        delta_nu_c: DELTA_NU_C,
        p_pd,
        f_m: 9e6,
        lp_order: 8,
        offset: 0.0,
    }
}

/// Demodulation low-pass of configurations 1 and 2.
pub fn demod_lb8() -> TransferModel {
    TransferModel::Product { factors: vec![TransferModel::lowpass(8, 14e6), TransferModel::lowpass(1, 57.3e6)] }
}

/// One of the three configurations (1, 2 or 3) of the example lock.
pub fn config(n: u8) -> Option<LoopConfig> {
    let (det, p_pd, demod, tau, pid) = match n {
        1 => (detector(39e-12, 20e6), 650e-6, demod_lb8(), tau_config1(), Pid::new(0.42, 20e3, Some(2.07e6))),
        2 => (detector(6.3e-12, 150e6), 430e-6, demod_lb8(), tau_config3(), Pid::new(0.60, 20e3, Some(1.45e6))),
        3 => (
            detector(10e-12, 150e6),
            650e-6,
            TransferModel::lowpass(1, 7.7e6),
            tau_config3(),
            Pid::new(0.84, 20e3, Some(1.12e6)),
        ),
        _ => return None,
    };
    let pd = TransferModel::pd_lockin(det.order, det.f_pd, OMEGA_OVER_2PI);
    Some(LoopConfig {
        discriminator: discriminator(det, p_pd),
        k_e_measured: Some(K_E_MEASURED),
        k_fast: pid,
        k_fast_rolloff: TransferModel::lowpass(1, 20e6),
        f_i_slow: Some(2e3),
        g_fast: g_fast(),
        g_slow: Some(g_slow()),
        tau_l: tau,
        demod,
        pd,
        grid: GridSpec::default(),
    })
}

/// Generic plant for tuner tests: a second-order actuator and 40 ns of
/// delay behind a unit-slope discriminator with δν_c = 45.7 kHz.
pub fn tuner_plant() -> LoopConfig {
    LoopConfig {
        discriminator: discriminator(detector(10e-12, 150e6), 650e-6),
        k_e_measured: Some(1.0),
        k_fast: Pid::new(1.0, 0.0, None),
        k_fast_rolloff: TransferModel::Identity,
        f_i_slow: None,
        g_fast: TransferModel::lowpass(2, 10e6),
        g_slow: None,
        tau_l: 40e-9,
        demod: TransferModel::Identity,
        pd: TransferModel::Identity,
        grid: GridSpec::new(100.0, 10f64.powf(8.5), 50),
    }
}

/// A delay-dominated plant (10 µs) with so much actuator gain that even the
/// weakest starting lock oscillates.
pub fn infeasible_plant() -> LoopConfig {
    let mut c = tuner_plant();
    c.g_fast = TransferModel::Product { factors: vec![TransferModel::gain(1e3), TransferModel::lowpass(2, 10e6)] };
    c.tau_l = 10e-6;
    c
}

/// Free-running noise of the example laser.
pub fn laser_noise() -> NoiseModel {
    NoiseModel { h_minus1: 5e8, h0: 2e3, f_low: 10.0 }
}

/// Discriminator (detector) noise at the error-signal output, V²/Hz.
pub const S_N4: f64 = 4e-16;
/// Detector noise floor of the RF spectrum, V²/Hz.
pub const S_Y4_BASELINE: f64 = 1e-14;

/// Averaged ring-down of the example cavity: τ = 3.482 µs, 1 % per-shot
/// noise, 256 averages.
pub fn ringdown() -> RingdownSynth {
    RingdownSynth { tau: 3.482e-6, v0: 1.0, v_off: 0.01, dt: 20e-9, samples: 2000, noise_rel: 0.01, averages: 256 }
}

/// Parts of the configuration 2 demodulation chain as measured one at a
/// time: splitter, demodulation low-pass, cable, and photodetector.
pub fn lockin_chain_parts() -> Vec<(String, TransferModel)> {
    vec![
        ("splitter".into(), TransferModel::lowpass(1, 40.5e6)),
        ("demod_lowpass".into(), TransferModel::lowpass(8, 14e6)),
        ("cable".into(), TransferModel::delay(path_delay(0.0, 0.0, 3.6))),
        ("photodetector".into(), TransferModel::pd_lockin(3, 150e6, OMEGA_OVER_2PI)),
    ]
}

/// The assembled chain lags its parts by a further ~0.9° at 1.06 MHz.
pub fn lockin_chain_true() -> TransferModel {
    let mut f: Vec<TransferModel> = lockin_chain_parts().into_iter().map(|(_, m)| m).collect();
    f.push(TransferModel::lowpass(1, 67.5e6));
    TransferModel::Product { factors: f }
}

/// Up-conversion mixer response used to calibrate the chain measurement.
pub fn mx1_calibration() -> TransferModel {
    TransferModel::Product { factors: vec![TransferModel::gain(0.5), TransferModel::lowpass(1, 25e6)] }
}

/// Fiber delay in the chain measurement: 5 m.
pub fn chain_fiber_delay() -> f64 {
    path_delay(0.0, 5.0, 0.0)
}
