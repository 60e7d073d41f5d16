//! Loop assembly and closed-loop analysis.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linewidth::PsdTrace;
use crate::par::{self, ExecMode};
use crate::pdh::{self, DiscriminatorConfig};
use crate::tfcore::{self, BodeTrace, GridSpec, Pid, TransferModel};

/// Below this |1+α| (or |1-t|) the closed-loop relation is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Everything needed to build the open loop of a two-branch PDH lock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub discriminator: DiscriminatorConfig,
    /// Measured slope; overrides the value computed from the detector chain.
    #[serde(rename = "k_e_V_per_Hz", default, skip_serializing_if = "Option::is_none")]
    pub k_e_measured: Option<f64>,
    pub k_fast: Pid,
    /// Parasitic roll-off of the loop-filter electronics, part of K_fast.
    #[serde(default = "default_rolloff")]
    pub k_fast_rolloff: TransferModel,
    /// Slow-branch integrator, K_slow = -j f_I,slow / f.
    #[serde(rename = "f_i_slow_Hz", default, skip_serializing_if = "Option::is_none")]
    pub f_i_slow: Option<f64>,
    pub g_fast: TransferModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_slow: Option<TransferModel>,
    /// Total loop propagation delay.
    #[serde(rename = "tau_l_s")]
    pub tau_l: f64,
    pub demod: TransferModel,
    pub pd: TransferModel,
    #[serde(default)]
    pub grid: GridSpec,
}

fn default_rolloff() -> TransferModel {
    TransferModel::lowpass(1, DEFAULT_ROLLOFF_HZ)
}

/// Corner of the default loop-filter roll-off.
pub const DEFAULT_ROLLOFF_HZ: f64 = 20e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Fast,
    Slow,
    Both,
}

/// Component values of the loop at one frequency.
#[derive(Debug, Clone, Copy)]
pub struct LoopParts {
    /// Discriminator D·P·k_e·C.
    pub h: Complex64,
    pub t: Complex64,
    pub k_fast: Complex64,
    pub g_fast: Complex64,
    pub k_slow: Complex64,
    pub g_slow: Complex64,
}

impl LoopParts {
    pub fn alpha_fast(&self) -> Complex64 {
        self.h * self.k_fast * self.g_fast * self.t
    }
    pub fn alpha_slow(&self) -> Complex64 {
        self.h * self.k_slow * self.g_slow * self.t
    }
    pub fn alpha(&self) -> Complex64 {
        self.alpha_fast() + self.alpha_slow()
    }
}

impl LoopConfig {
    pub fn k_e(&self) -> Result<f64> {
        match self.k_e_measured {
            Some(k) => Ok(k),
            None => pdh::ke_slope(&self.discriminator),
        }
    }

    pub fn cavity(&self) -> TransferModel {
        TransferModel::cavity(self.discriminator.delta_nu_c)
    }

    /// Discriminator transfer D·P·k_e·C, in V/Hz.
    pub fn discriminator_model(&self) -> Result<TransferModel> {
        tfcore::compose(vec![
            self.demod.clone(),
            self.pd.clone(),
            TransferModel::gain(self.k_e()?),
            self.cavity(),
        ])
    }

    /// Fast controller including its roll-off.
    pub fn k_fast_model(&self) -> TransferModel {
        TransferModel::Product { factors: vec![TransferModel::Pid(self.k_fast), self.k_fast_rolloff.clone()] }
    }

    pub fn has_slow_branch(&self) -> bool {
        self.f_i_slow.is_some() && self.g_slow.is_some()
    }

    pub fn fast_branch(&self) -> Result<TransferModel> {
        tfcore::compose(vec![
            self.discriminator_model()?,
            self.k_fast_model(),
            self.g_fast.clone(),
            TransferModel::delay(self.tau_l),
        ])
    }

    pub fn slow_branch(&self) -> Result<Option<TransferModel>> {
        match (self.f_i_slow, &self.g_slow) {
            (Some(fi), Some(g)) => Ok(Some(tfcore::compose(vec![
                self.discriminator_model()?,
                TransferModel::integrator(fi),
                g.clone(),
                TransferModel::delay(self.tau_l),
            ])?)),
            _ => Ok(None),
        }
    }

    pub fn parts_at(&self, f: f64) -> Result<LoopParts> {
        let zero = Complex64::new(0.0, 0.0);
        let (k_slow, g_slow) = match (self.f_i_slow, &self.g_slow) {
            (Some(fi), Some(g)) => (tfcore::eval_integrator(fi, f)?, g.eval(f)?),
            _ => (zero, zero),
        };
        Ok(LoopParts {
            h: self.discriminator_model()?.eval(f)?,
            t: tfcore::eval_delay(self.tau_l, f)?,
            k_fast: self.k_fast.eval(f)? * self.k_fast_rolloff.eval(f)?,
            g_fast: self.g_fast.eval(f)?,
            k_slow,
            g_slow,
        })
    }
}

/// Open-loop transfer α for the chosen branch. `Both` sums the branches
/// pointwise; without a slow branch it is the fast branch alone.
pub fn assemble_open_loop(cfg: &LoopConfig, branch: Branch) -> Result<TransferModel> {
    match branch {
        Branch::Fast => cfg.fast_branch(),
        Branch::Slow => cfg
            .slow_branch()?
            .ok_or_else(|| Error::domain("configuration has no slow branch")),
        Branch::Both => match cfg.slow_branch()? {
            Some(s) => tfcore::sum(vec![cfg.fast_branch()?, s]),
            None => cfg.fast_branch(),
        },
    }
}

/// α on the configuration's analysis grid.
pub fn open_loop_trace(cfg: &LoopConfig, branch: Branch, mode: ExecMode) -> Result<BodeTrace> {
    let m = assemble_open_loop(cfg, branch)?;
    let mut t = tfcore::bode_grid(&m, &cfg.grid, mode)?;
    t.label = "open loop".into();
    Ok(t)
}

/// α/(1+α), the response y5/m6.
pub fn closed_loop_from_open(alpha: Complex64) -> Result<Complex64> {
    let d = 1.0 + alpha;
    if d.norm() < SINGULAR_TOL {
        return Err(Error::Singular(format!("|1+α| < {SINGULAR_TOL:e}")));
    }
    Ok(alpha / d)
}

/// t/(1-t), recovering α from a closed-loop measurement.
pub fn closed_to_open(t: Complex64) -> Result<Complex64> {
    let d = 1.0 - t;
    if d.norm() < SINGULAR_TOL {
        return Err(Error::Singular(format!("|1-t| < {SINGULAR_TOL:e}")));
    }
    Ok(t / d)
}

pub fn closed_trace_from_open(open: &BodeTrace) -> Result<BodeTrace> {
    open.map("closed loop", |f, a| {
        closed_loop_from_open(a).map_err(|_| Error::Singular(format!("|1+α| vanishes at {f} Hz")))
    })
}

pub fn open_trace_from_closed(closed: &BodeTrace) -> Result<BodeTrace> {
    closed.map("open loop", |f, t| {
        closed_to_open(t).map_err(|_| Error::Singular(format!("|1-t| vanishes at {f} Hz")))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalFlags {
    /// 30° < φ_m < 60°.
    pub phase_margin: bool,
    /// ∠α > -120° over the band below f_UG/√10.
    pub low_frequency_phase: bool,
    /// Bandwidth has no pass/fail threshold; reported for reference.
    #[serde(rename = "f_ug_Hz_advisory")]
    pub f_ug_advisory: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginsReport {
    #[serde(rename = "f_ug_Hz")]
    pub f_ug: Option<f64>,
    #[serde(rename = "phi_m_deg")]
    pub phi_m: Option<f64>,
    #[serde(rename = "f_180_Hz")]
    pub f_180: Option<f64>,
    pub g_m: Option<f64>,
    #[serde(rename = "f_bump_Hz")]
    pub f_bump: Option<f64>,
    /// Number of |α| = 1 crossings on the grid.
    pub unity_gain_crossings: usize,
    pub goals: GoalFlags,
    pub warnings: Vec<String>,
}

impl MarginsReport {
    /// Margin-based instability: φ_m ≤ 0 or g_m ≤ 1.
    pub fn is_oscillating(&self) -> bool {
        self.phi_m.is_some_and(|p| p <= 0.0) || self.g_m.is_some_and(|g| g <= 1.0)
    }

    /// Frequency at which the loop would ring, if it is unstable: the
    /// phase crossover, or f_UG when the phase never reaches -180°.
    pub fn oscillation_frequency(&self) -> Option<f64> {
        if self.is_oscillating() {
            self.f_180.or(self.f_ug)
        } else {
            None
        }
    }
}

struct Crossing {
    f: f64,
    t: f64,
    i: usize,
}

fn crossings(freqs: &[f64], y: &[f64], level: f64) -> Vec<Crossing> {
    let mut out = Vec::new();
    for i in 0..y.len().saturating_sub(1) {
        let (a, b) = (y[i] - level, y[i + 1] - level);
        if (a >= 0.0) != (b >= 0.0) {
            let t = a / (a - b);
            let lf = freqs[i].ln() + t * (freqs[i + 1].ln() - freqs[i].ln());
            out.push(Crossing { f: lf.exp(), t, i });
        }
    }
    out
}

fn lerp(y: &[f64], i: usize, t: f64) -> f64 {
    y[i] + t * (y[i + 1] - y[i])
}

/// Unity-gain point, margins and servo bump of an open-loop trace.
///
/// Crossings are bracketed on the grid and refined by log-linear
/// interpolation. With several unity-gain crossings the highest one is
/// reported. The phase crossover is the first -180° crossing at or above
/// f_UG (the first overall if there is no f_UG).
pub fn margins(alpha: &BodeTrace) -> MarginsReport {
    let f = alpha.freqs();
    let g = alpha.gain_db();
    let p = alpha.phase_deg();
    let mut warnings = Vec::new();

    let ug = crossings(f, g, 0.0);
    if ug.len() > 1 {
        warnings.push(format!("{} unity-gain crossings; reporting the highest", ug.len()));
    }
    let ug_last = ug.last();
    if let Some(c) = ug_last {
        if g[c.i + 1] > g[c.i] {
            warnings.push("|α| rises through unity at f_UG".into());
        }
    }
    let f_ug = ug_last.map(|c| c.f);
    let phi_m = ug_last.map(|c| 180.0 + lerp(p, c.i, c.t));

    let pc = crossings(f, p, -180.0);
    let chosen = match f_ug {
        Some(fu) => pc.iter().find(|c| c.f >= fu).or(pc.first()),
        None => pc.first(),
    };
    let f_180 = chosen.map(|c| c.f);
    let g_m = chosen.map(|c| 10f64.powf(-lerp(g, c.i, c.t) / 20.0));

    let f_bump = servo_bump(alpha);
    if f_bump.is_none() {
        warnings.push("|1+α|² has no interior minimum on the grid".into());
    }

    let low_frequency_phase = match f_ug {
        Some(fu) => {
            let lim = fu / 10f64.sqrt();
            f.iter().zip(p).filter(|(fi, _)| **fi < lim).all(|(_, ph)| *ph > -120.0)
        }
        None => false,
    };
    MarginsReport {
        f_ug,
        phi_m,
        f_180,
        g_m,
        f_bump,
        unity_gain_crossings: ug.len(),
        goals: GoalFlags {
            phase_margin: phi_m.is_some_and(|pm| pm > 30.0 && pm < 60.0),
            low_frequency_phase,
            f_ug_advisory: f_ug,
        },
        warnings,
    }
}

/// argmin over the grid of |1+α|², refined by a parabola through the
/// neighbouring points in log-frequency. `None` if the minimum sits on the
/// edge of the grid.
pub fn servo_bump(alpha: &BodeTrace) -> Option<f64> {
    let f = alpha.freqs();
    let m: Vec<f64> = alpha.responses().iter().map(|a| (1.0 + a).norm_sqr()).collect();
    let (k, _) = m
        .iter()
        .enumerate()
        .fold((0usize, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    if k == 0 || k + 1 >= m.len() {
        return None;
    }
    let (x0, x1, x2) = (f[k - 1].ln(), f[k].ln(), f[k + 1].ln());
    let (y0, y1, y2) = (m[k - 1], m[k], m[k + 1]);
    let den = (x0 - x1) * (x0 - x2) * (x1 - x2);
    let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / den;
    let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / den;
    if a > 0.0 {
        let xv = (-b / (2.0 * a)).clamp(x0, x2);
        Some(xv.exp())
    } else {
        Some(f[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stimulus {
    M2,
    M6,
    M8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observable {
    Y5,
    Y6,
    Y8,
}

/// Closed-loop response matrix at `f`; rows (y5, y6, y8), columns
/// (m2, m6, m8).
///
/// The delay is lumped with the discriminator in the m2 column, so H
/// there means D·P·k_e·C·T.
pub fn loop_matrix(cfg: &LoopConfig, f: f64) -> Result<[[Complex64; 3]; 3]> {
    let p = cfg.parts_at(f)?;
    let alpha = p.alpha();
    let d = 1.0 + alpha;
    if d.norm() < SINGULAR_TOL {
        return Err(Error::Singular(format!("|1+α| vanishes at {f} Hz")));
    }
    let h = p.h * p.t;
    let af_over_k = h * p.g_fast;
    let af_over_g = h * p.k_fast;
    let one = Complex64::new(1.0, 0.0);
    let m = [
        [h, alpha, af_over_k],
        [-h, one, -af_over_k],
        [-af_over_g, p.k_fast, one + p.alpha_slow()],
    ];
    Ok(m.map(|row| row.map(|x| x / d)))
}

pub fn loop_matrix_response(cfg: &LoopConfig, stim: Stimulus, obs: Observable, f: f64) -> Result<Complex64> {
    let m = loop_matrix(cfg, f)?;
    let r = match obs {
        Observable::Y5 => 0,
        Observable::Y6 => 1,
        Observable::Y8 => 2,
    };
    let c = match stim {
        Stimulus::M2 => 0,
        Stimulus::M6 => 1,
        Stimulus::M8 => 2,
    };
    Ok(m[r][c])
}

/// In-loop frequency-noise PSD of the laser,
/// S_y1 = S_n1/|1+α|² + |α|²/|1+α|² · S_n4/(k_e²|C|²).
pub fn closed_loop_psd(
    alpha: &BodeTrace,
    s_n1: &(dyn Fn(f64) -> f64 + Sync),
    s_n4: &(dyn Fn(f64) -> f64 + Sync),
    k_e: f64,
    cavity: &TransferModel,
    mode: ExecMode,
) -> Result<PsdTrace> {
    let f = alpha.freqs();
    let vals: Result<Vec<f64>> = par::map_indexed(alpha.len(), mode, |i| {
        psd_point(alpha.response(i), f[i], s_n1(f[i]), s_n4(f[i]), k_e, cavity)
    })
    .into_iter()
    .collect();
    PsdTrace::new(f.to_vec(), vals?, None)
}

/// [`closed_loop_psd`] with both noise inputs given as traces on the loop grid.
pub fn closed_loop_psd_traces(
    alpha: &BodeTrace,
    s_n1: &PsdTrace,
    s_n4: &PsdTrace,
    k_e: f64,
    cavity: &TransferModel,
) -> Result<PsdTrace> {
    if s_n1.freqs() != alpha.freqs() || s_n4.freqs() != alpha.freqs() {
        return Err(Error::GridMismatch("noise traces must share the loop trace grid".into()));
    }
    let f = alpha.freqs();
    let mut vals = Vec::with_capacity(f.len());
    for (i, &fi) in f.iter().enumerate() {
        vals.push(psd_point(alpha.response(i), fi, s_n1.values()[i], s_n4.values()[i], k_e, cavity)?);
    }
    PsdTrace::new(f.to_vec(), vals, None)
}

fn psd_point(a: Complex64, f: f64, n1: f64, n4: f64, k_e: f64, cavity: &TransferModel) -> Result<f64> {
    let d2 = (1.0 + a).norm_sqr();
    if d2.sqrt() < SINGULAR_TOL {
        return Err(Error::Singular(format!("|1+α| vanishes at {f} Hz")));
    }
    let c2 = cavity.eval(f)?.norm_sqr();
    Ok(n1 / d2 + a.norm_sqr() / d2 * n4 / (k_e * k_e * c2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tfcore::GridSpec;

    fn trace(m: &TransferModel, lo: f64, hi: f64, ppd: u32) -> BodeTrace {
        tfcore::bode_grid(m, &GridSpec::new(lo, hi, ppd), ExecMode::Sequential).unwrap()
    }

    #[test]
    fn closed_loop_examples() {
        let big = closed_loop_from_open(Complex64::new(1e12, 0.0)).unwrap();
        assert!((big - 1.0).norm() < 1e-11);
        assert_eq!(closed_loop_from_open(Complex64::new(0.0, 0.0)).unwrap(), Complex64::new(0.0, 0.0));
        let a = Complex64::from_polar(1.0, (-120f64).to_radians());
        let t = closed_loop_from_open(a).unwrap();
        assert!((t.norm() - 1.0).abs() < 1e-12);
        assert!((t.arg().to_degrees() + 60.0).abs() < 1e-9);
        assert!(closed_loop_from_open(Complex64::new(-1.0, 0.0)).is_err());
        let o = closed_to_open(Complex64::new(0.5, 0.0)).unwrap();
        assert!((o - 1.0).norm() < 1e-15);
        assert!(closed_to_open(Complex64::new(1.0, 0.0)).is_err());
    }

    #[test]
    fn pure_integrator_margins() {
        let m = margins(&trace(&TransferModel::integrator(1e5), 1e3, 1e7, 100));
        assert!((m.f_ug.unwrap() / 1e5 - 1.0).abs() < 1e-9);
        assert!((m.phi_m.unwrap() - 90.0).abs() < 1e-9);
        assert!(m.f_180.is_none());
        assert!(m.g_m.is_none());
        assert!(!m.is_oscillating());
    }

    #[test]
    fn integrator_with_delay() {
        let m = tfcore::compose(vec![TransferModel::integrator(1e6), TransferModel::delay(100e-9)]).unwrap();
        let r = margins(&trace(&m, 1e4, 1e8, 200));
        assert!((r.f_ug.unwrap() / 1e6 - 1.0).abs() < 1e-3);
        assert!((r.phi_m.unwrap() - 54.0).abs() < 0.05);
        assert!((r.f_180.unwrap() / 2.5e6 - 1.0).abs() < 1e-3);
        assert!((r.g_m.unwrap() - 2.5).abs() < 0.01);
        let fb = r.f_bump.unwrap();
        assert!(fb > r.f_ug.unwrap() && fb < r.f_180.unwrap());
    }

    #[test]
    fn no_crossing_is_reported_absent() {
        let r = margins(&trace(&TransferModel::gain(0.5), 1e3, 1e6, 10));
        assert!(r.f_ug.is_none() && r.phi_m.is_none() && r.f_180.is_none());
        assert!(!r.goals.phase_margin);
    }
}
