//! PDH discriminator: modulation depth, error signal, slope and the
//! photodetection noise budget.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{j0, j1, j2};

/// Elementary charge, C.
pub const ELECTRON_CHARGE: f64 = 1.602_176_634e-19;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationConfig {
    #[serde(rename = "beta_rad")]
    pub beta: f64,
    #[serde(rename = "omega_over_2pi_Hz")]
    pub omega_over_2pi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(rename = "responsivity_A_per_W")]
    pub responsivity: f64,
    #[serde(rename = "transimpedance_V_per_A")]
    pub g_tr: f64,
    #[serde(rename = "nep_W_per_rtHz")]
    pub nep: f64,
    #[serde(rename = "f_pd_Hz")]
    pub f_pd: f64,
    pub order: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub modulation: ModulationConfig,
    pub detector: DetectorConfig,
    #[serde(rename = "delta_nu_c_Hz")]
    pub delta_nu_c: f64,
    #[serde(rename = "p_pd_W")]
    pub p_pd: f64,
    /// Corner of the post-mixer low-pass.
    #[serde(rename = "f_m_Hz")]
    pub f_m: f64,
    pub lp_order: u32,
    /// Additive error-signal offset (RAM, electronics). Zero when nulled.
    #[serde(rename = "offset_V", default)]
    pub offset: f64,
}

/// Product J₀(β)J₁(β), proportional to the discriminator slope.
pub fn slope_factor(beta: f64) -> f64 {
    j0(beta) * j1(beta)
}

/// Modulation depth that maximises J₀J₁, by golden-section search.
pub fn optimal_beta() -> f64 {
    golden_max(slope_factor, 0.5, 1.6, 1e-12)
}

/// Golden-section maximisation of a unimodal function on [a, b].
pub fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidebandRatio {
    /// Weight of the Ω component, 4J₀J₁.
    pub q: f64,
    /// Weight of the 2Ω component, 2J₁² + 4J₀J₂.
    pub p: f64,
    /// Filter attenuation at Ω needed to reach the target ratio, negative dB.
    #[serde(rename = "attenuation_dB")]
    pub attenuation_db: f64,
}

pub fn sideband_ratio(beta: f64, snr_target: f64) -> Result<SidebandRatio> {
    if !(beta > 0.0) {
        return Err(Error::domain("modulation depth must be positive"));
    }
    if !(snr_target > 0.0) {
        return Err(Error::domain("target ratio must be positive"));
    }
    let (a0, a1, a2) = (j0(beta), j1(beta), j2(beta));
    let q = 4.0 * a0 * a1;
    let p = 2.0 * a1 * a1 + 4.0 * a0 * a2;
    Ok(SidebandRatio { q, p, attenuation_db: -20.0 * (snr_target / (q / p)).log10() })
}

/// Corner frequency at which an n-th order Butterworth reaches
/// `attenuation_db` (negative) at Ω/2π, using the -20n dB/decade asymptote.
pub fn demod_filter_requirement(omega_over_2pi: f64, attenuation_db: f64, n: u32) -> Result<f64> {
    if n == 0 {
        return Err(Error::domain("filter order must be at least 1"));
    }
    if !(omega_over_2pi > 0.0) {
        return Err(Error::domain("modulation frequency must be positive"));
    }
    Ok(omega_over_2pi * 10f64.powf(attenuation_db / (20.0 * n as f64)))
}

fn check_config(cfg: &DiscriminatorConfig) -> Result<()> {
    let d = &cfg.detector;
    let positive = [
        ("beta_rad", cfg.modulation.beta),
        ("omega_over_2pi_Hz", cfg.modulation.omega_over_2pi),
        ("delta_nu_c_Hz", cfg.delta_nu_c),
        ("responsivity_A_per_W", d.responsivity),
        ("transimpedance_V_per_A", d.g_tr),
    ];
    for (name, v) in positive {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::domain(format!("{name} must be positive, got {v}")));
        }
    }
    if !(cfg.p_pd >= 0.0) {
        return Err(Error::domain("p_pd_W must be non-negative"));
    }
    Ok(())
}

/// Slope at the lock point, 8J₀J₁·P·R·g_tr/δν_c, in V/Hz.
pub fn ke_slope(cfg: &DiscriminatorConfig) -> Result<f64> {
    check_config(cfg)?;
    let b = cfg.modulation.beta;
    Ok(8.0 * slope_factor(b) * cfg.p_pd * cfg.detector.responsivity * cfg.detector.g_tr / cfg.delta_nu_c)
}

/// Reflection coefficient of a lossless high-finesse cavity at detuning Δ,
/// normalised so F(0) = 0 and F(±∞) = 1.
fn reflection(detuning: f64, hwhm: f64) -> Complex64 {
    let x = Complex64::new(0.0, detuning);
    x / (hwhm + x)
}

/// Demodulated PDH error signal in volts at laser detuning Δ (Hz).
///
/// Carrier and first-order sidebands only, phase chosen to maximise the
/// dispersive quadrature. Positive slope at Δ = 0, equal to [`ke_slope`].
pub fn error_signal(cfg: &DiscriminatorConfig, detuning: f64) -> Result<f64> {
    check_config(cfg)?;
    let b = cfg.modulation.beta;
    let om = cfg.modulation.omega_over_2pi;
    let g = 0.5 * cfg.delta_nu_c;
    let pc = j0(b).powi(2) * cfg.p_pd;
    let ps = j1(b).powi(2) * cfg.p_pd;
    let f0 = reflection(detuning, g);
    let fp = reflection(detuning + om, g);
    let fm = reflection(detuning - om, g);
    let cross = f0 * fp.conj() - f0.conj() * fm;
    Ok(2.0 * (pc * ps).sqrt() * cross.im * cfg.detector.responsivity * cfg.detector.g_tr + cfg.offset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBudget {
    /// Power at which shot noise equals the detector's electronic noise.
    #[serde(rename = "p_eq_W")]
    pub p_eq: f64,
    /// Signal-to-noise ratio with P_PD = P_eq.
    pub snr_at_p_eq: f64,
    /// Signal-to-noise ratio at the configured P_PD.
    pub snr_at_p_pd: f64,
    pub shot_limited: bool,
    /// Noise bandwidth, twice the post-mixer corner.
    #[serde(rename = "bandwidth_Hz")]
    pub bandwidth: f64,
}

/// Electronic vs shot-noise budget of the photodetector over the band
/// Ω/2π ± f_M.
pub fn pd_noise_budget(det: &DetectorConfig, beta: f64, p_pd: f64, f_m: f64) -> Result<NoiseBudget> {
    if !(det.responsivity > 0.0) || !(det.nep >= 0.0) || !(f_m > 0.0) || !(beta > 0.0) {
        return Err(Error::domain("noise budget needs positive responsivity, f_M and β, and NEP >= 0"));
    }
    if !(p_pd >= 0.0) {
        return Err(Error::domain("p_pd_W must be non-negative"));
    }
    let r = det.responsivity;
    let e = ELECTRON_CHARGE;
    let a1 = j1(beta);
    let delta = 2.0 * f_m;
    let p_eq = det.nep * det.nep * r / (4.0 * e * a1 * a1);
    let snr = |p: f64| {
        let electronic = det.nep * r * delta.sqrt();
        let shot = (4.0 * e * r * a1 * a1 * p).sqrt() * delta.sqrt();
        p * r / (electronic + shot)
    };
    Ok(NoiseBudget {
        p_eq,
        snr_at_p_eq: snr(p_eq),
        snr_at_p_pd: snr(p_pd),
        shot_limited: p_pd > p_eq,
        bandwidth: delta,
    })
}
