//! Complex frequency-response primitives and their composition.
//!
//! Conventions: s = j2πf, frequencies in Hz, phase in radians inside the
//! crate and in degrees wherever a value crosses an I/O boundary
//! ([`BodeTrace`], reports, CSV).

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const COAX_VELOCITY_FACTOR: f64 = 0.66;
pub const FIBER_GROUP_INDEX: f64 = 1.468;

const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Propagation delay of a mixed free-space / fiber / coax path.
pub fn path_delay(free_space_m: f64, fiber_m: f64, coax_m: f64) -> f64 {
    (free_space_m + fiber_m * FIBER_GROUP_INDEX + coax_m / COAX_VELOCITY_FACTOR) / SPEED_OF_LIGHT
}

pub fn gain_db(z: Complex64) -> f64 {
    20.0 * z.norm().log10()
}

fn check_freq(f: f64) -> Result<()> {
    if f > 0.0 && f.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("frequency must be positive and finite, got {f}")))
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive, got {v}")))
    }
}

/// K_P (1 - j f_I/f + j f/f_D); the derivative term is dropped when
/// `f_d` is `None`.
pub fn eval_pid(kp: f64, f_i: f64, f_d: Option<f64>, f: f64) -> Result<Complex64> {
    check_freq(f)?;
    check_positive("K_P", kp)?;
    if !(f_i >= 0.0) {
        return Err(Error::domain(format!("f_I must be non-negative, got {f_i}")));
    }
    let mut im = -f_i / f;
    if let Some(fd) = f_d {
        check_positive("f_D", fd)?;
        im += f / fd;
    }
    Ok(Complex64::new(kp, kp * im))
}

/// Exact n-th order Butterworth low-pass from its pole product.
///
/// Poles sit at exp(jπ(2k+n-1)/(2n)), k = 1..n, on the unit circle of the
/// normalised variable s/ω₀; H = Π (-p_k)/(s/ω₀ - p_k).
pub fn eval_lowpass_butterworth(n: u32, f0: f64, f: f64) -> Result<Complex64> {
    check_freq(f)?;
    if n == 0 {
        return Err(Error::domain("Butterworth order must be at least 1"));
    }
    check_positive("corner frequency", f0)?;
    let s = Complex64::new(0.0, f / f0);
    let nf = n as f64;
    let mut h = Complex64::new(1.0, 0.0);
    for k in 1..=n {
        let p = Complex64::from_polar(1.0, PI * (2.0 * k as f64 + nf - 1.0) / (2.0 * nf));
        h *= -p / (s - p);
    }
    Ok(h)
}

/// The -n·atan(f/f₀) phase rule of thumb, in degrees.
///
/// Only exact for n = 1; kept for comparison with the pole-product
/// response, which is what every model uses.
pub fn lowpass_arctan_phase_deg(n: u32, f0: f64, f: f64) -> f64 {
    -(n as f64) * (f / f0).atan().to_degrees()
}

/// First-order high-pass jf/f_hp / (1 + jf/f_hp).
pub fn eval_highpass(f_hp: f64, f: f64) -> Result<Complex64> {
    check_freq(f)?;
    check_positive("high-pass corner", f_hp)?;
    let x = J * (f / f_hp);
    Ok(x / (1.0 + x))
}

/// Pure integrator -j f_I/f.
pub fn eval_integrator(f_i: f64, f: f64) -> Result<Complex64> {
    check_freq(f)?;
    check_positive("f_I", f_i)?;
    Ok(Complex64::new(0.0, -f_i / f))
}

/// exp(-j2πfτ).
pub fn eval_delay(tau: f64, f: f64) -> Result<Complex64> {
    check_freq(f)?;
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!("delay must be non-negative, got {tau}")));
    }
    Ok(Complex64::from_polar(1.0, -2.0 * PI * f * tau))
}

/// Cavity low-pass 1/(1 + 2jf/δν_c); the pole sits at half the linewidth.
pub fn eval_cavity(delta_nu_c: f64, f: f64) -> Result<Complex64> {
    check_freq(f)?;
    check_positive("cavity linewidth", delta_nu_c)?;
    Ok(1.0 / (1.0 + J * (2.0 * f / delta_nu_c)))
}

/// Demodulated photodetector phase in radians.
///
/// The detector is modelled as an n-pole roll-off with phase
/// -n·atan(x/f_PD); after mixing down from Ω the two sidebands at Ω±f
/// contribute half their phase difference. Defined for |f| < Ω/2π and odd
/// in f.
pub fn pd_lockin_phase(n: u32, f_pd: f64, omega_over_2pi: f64, f: f64) -> f64 {
    let lpd = |x: f64| -(n as f64) * (x / f_pd).atan();
    0.5 * (lpd(omega_over_2pi + f) - lpd(omega_over_2pi - f))
}

/// Unit-magnitude lock-in response of the photodetector. Its gain is
/// folded into the discriminator slope.
pub fn eval_pd_lockin(n: u32, f_pd: f64, omega_over_2pi: f64, f: f64) -> Result<Complex64> {
    check_freq(f)?;
    if n == 0 {
        return Err(Error::domain("photodetector order must be at least 1"));
    }
    check_positive("f_PD", f_pd)?;
    check_positive("modulation frequency", omega_over_2pi)?;
    if f >= omega_over_2pi {
        return Err(Error::domain(format!(
            "lock-in model needs f < Ω/2π ({f} Hz >= {omega_over_2pi} Hz)"
        )));
    }
    Ok(Complex64::from_polar(1.0, pd_lockin_phase(n, f_pd, omega_over_2pi, f)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pid {
    pub k_p: f64,
    #[serde(rename = "f_i_Hz")]
    pub f_i: f64,
    /// `None` disables the derivative term.
    #[serde(rename = "f_d_Hz", default, skip_serializing_if = "Option::is_none")]
    pub f_d: Option<f64>,
}

impl Pid {
    pub fn new(k_p: f64, f_i: f64, f_d: Option<f64>) -> Self {
        Pid { k_p, f_i, f_d }
    }

    pub fn eval(&self, f: f64) -> Result<Complex64> {
        eval_pid(self.k_p, self.f_i, self.f_d, f)
    }
}

/// A composable frequency-response node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransferModel {
    Identity,
    /// Real gain; may carry units, e.g. V/Hz for the discriminator slope.
    Gain { k: f64 },
    Pid(Pid),
    Integrator {
        #[serde(rename = "f_i_Hz")]
        f_i: f64,
    },
    Lowpass {
        order: u32,
        #[serde(rename = "f0_Hz")]
        f0: f64,
    },
    Highpass {
        #[serde(rename = "f_hp_Hz")]
        f_hp: f64,
    },
    Delay {
        #[serde(rename = "tau_s")]
        tau: f64,
    },
    Cavity {
        #[serde(rename = "delta_nu_c_Hz")]
        delta_nu_c: f64,
    },
    PdLockin {
        order: u32,
        #[serde(rename = "f_pd_Hz")]
        f_pd: f64,
        #[serde(rename = "omega_over_2pi_Hz")]
        omega_over_2pi: f64,
    },
    Product { factors: Vec<TransferModel> },
    /// Pointwise sum, used for the two actuator branches.
    Sum { terms: Vec<TransferModel> },
    Tabulated(Tabulated),
}

impl TransferModel {
    pub fn gain(k: f64) -> Self {
        TransferModel::Gain { k }
    }
    pub fn lowpass(order: u32, f0: f64) -> Self {
        TransferModel::Lowpass { order, f0 }
    }
    pub fn highpass(f_hp: f64) -> Self {
        TransferModel::Highpass { f_hp }
    }
    pub fn delay(tau: f64) -> Self {
        TransferModel::Delay { tau }
    }
    pub fn cavity(delta_nu_c: f64) -> Self {
        TransferModel::Cavity { delta_nu_c }
    }
    pub fn integrator(f_i: f64) -> Self {
        TransferModel::Integrator { f_i }
    }
    pub fn pd_lockin(order: u32, f_pd: f64, omega_over_2pi: f64) -> Self {
        TransferModel::PdLockin { order, f_pd, omega_over_2pi }
    }

    pub fn eval(&self, f: f64) -> Result<Complex64> {
        check_freq(f)?;
        self.eval_unchecked(f)
    }

    fn eval_unchecked(&self, f: f64) -> Result<Complex64> {
        use TransferModel::*;
        match self {
            Identity => Ok(Complex64::new(1.0, 0.0)),
            Gain { k } => {
                if k.is_finite() {
                    Ok(Complex64::new(*k, 0.0))
                } else {
                    Err(Error::domain("gain must be finite"))
                }
            }
            Pid(p) => p.eval(f),
            Integrator { f_i } => eval_integrator(*f_i, f),
            Lowpass { order, f0 } => eval_lowpass_butterworth(*order, *f0, f),
            Highpass { f_hp } => eval_highpass(*f_hp, f),
            Delay { tau } => eval_delay(*tau, f),
            Cavity { delta_nu_c } => eval_cavity(*delta_nu_c, f),
            PdLockin { order, f_pd, omega_over_2pi } => {
                eval_pd_lockin(*order, *f_pd, *omega_over_2pi, f)
            }
            Product { factors } => {
                let mut acc = Complex64::new(1.0, 0.0);
                for m in factors {
                    acc *= m.eval_unchecked(f)?;
                }
                Ok(acc)
            }
            Sum { terms } => {
                let mut acc = Complex64::new(0.0, 0.0);
                for m in terms {
                    acc += m.eval_unchecked(f)?;
                }
                Ok(acc)
            }
            Tabulated(t) => t.eval(f),
        }
    }

    /// Phase in degrees at `f`, principal value.
    pub fn phase_deg(&self, f: f64) -> Result<f64> {
        Ok(self.eval(f)?.arg().to_degrees())
    }

    /// Lowest frequency the model accepts, if it is bounded (tabulated data).
    pub fn valid_range(&self) -> (f64, f64) {
        use TransferModel::*;
        match self {
            Tabulated(t) => (t.f_min(), t.f_max()),
            PdLockin { omega_over_2pi, .. } => (0.0, *omega_over_2pi),
            Product { factors } => intersect(factors),
            Sum { terms } => intersect(terms),
            _ => (0.0, f64::INFINITY),
        }
    }
}

fn intersect(models: &[TransferModel]) -> (f64, f64) {
    models.iter().fold((0.0, f64::INFINITY), |(lo, hi), m| {
        let (a, b) = m.valid_range();
        (lo.max(a), hi.min(b))
    })
}

/// Product node of the given models.
pub fn compose(models: Vec<TransferModel>) -> Result<TransferModel> {
    if models.is_empty() {
        return Err(Error::domain("cannot compose an empty list of models"));
    }
    Ok(TransferModel::Product { factors: models })
}

/// Sum node of the given models.
pub fn sum(models: Vec<TransferModel>) -> Result<TransferModel> {
    if models.is_empty() {
        return Err(Error::domain("cannot sum an empty list of models"));
    }
    Ok(TransferModel::Sum { terms: models })
}

/// Log-spaced evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(rename = "f_min_Hz")]
    pub f_min: f64,
    #[serde(rename = "f_max_Hz")]
    pub f_max: f64,
    pub points_per_decade: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { f_min: 10.0, f_max: 1e7, points_per_decade: 100 }
    }
}

impl GridSpec {
    pub fn new(f_min: f64, f_max: f64, points_per_decade: u32) -> Self {
        GridSpec { f_min, f_max, points_per_decade }
    }

    pub fn freqs(&self) -> Result<Vec<f64>> {
        log_grid(self.f_min, self.f_max, self.points_per_decade)
    }
}

/// Log-spaced, strictly increasing grid from `f_min` to `f_max` inclusive.
pub fn log_grid(f_min: f64, f_max: f64, points_per_decade: u32) -> Result<Vec<f64>> {
    if !(f_min > 0.0 && f_max > f_min && f_max.is_finite()) {
        return Err(Error::domain(format!("invalid frequency range [{f_min}, {f_max}]")));
    }
    if points_per_decade == 0 {
        return Err(Error::domain("points per decade must be at least 1"));
    }
    let decades = (f_max / f_min).log10();
    let n = ((decades * points_per_decade as f64).round() as usize).max(1) + 1;
    let step = decades / (n - 1) as f64;
    let mut out: Vec<f64> = (0..n).map(|i| f_min * 10f64.powf(step * i as f64)).collect();
    out[0] = f_min;
    out[n - 1] = f_max;
    Ok(out)
}

/// Continue a phase sequence (radians) so adjacent points never jump by
/// more than π. The first point keeps its principal value.
pub fn unwrap_phase(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let two_pi = 2.0 * PI;
    for (i, &p) in phase.iter().enumerate() {
        if i == 0 {
            out.push(p);
        } else {
            let prev = out[i - 1];
            let k = ((p - prev) / two_pi).round();
            out.push(p - k * two_pi);
        }
    }
    out
}

/// A sampled frequency response.
///
/// Stored the way it is exchanged: gain in dB and unwrapped phase in
/// degrees. Complex values are rebuilt on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BodeTraceDoc", into = "BodeTraceDoc")]
pub struct BodeTrace {
    pub label: String,
    freqs: Vec<f64>,
    gain_db: Vec<f64>,
    phase_deg: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BodeTraceDoc {
    #[serde(default)]
    label: String,
    #[serde(rename = "frequency_Hz")]
    frequency: Vec<f64>,
    #[serde(rename = "gain_dB")]
    gain_db: Vec<f64>,
    phase_deg: Vec<f64>,
}

impl TryFrom<BodeTraceDoc> for BodeTrace {
    type Error = Error;
    fn try_from(d: BodeTraceDoc) -> Result<Self> {
        BodeTrace::from_gain_phase(d.label, d.frequency, d.gain_db, d.phase_deg)
    }
}

impl From<BodeTrace> for BodeTraceDoc {
    fn from(t: BodeTrace) -> Self {
        BodeTraceDoc { label: t.label, frequency: t.freqs, gain_db: t.gain_db, phase_deg: t.phase_deg }
    }
}

fn check_grid(freqs: &[f64]) -> Result<()> {
    if freqs.is_empty() {
        return Err(Error::GridMismatch("trace has no points".into()));
    }
    for (i, &f) in freqs.iter().enumerate() {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::domain(format!("frequency #{i} is not positive: {f}")));
        }
        if i > 0 && f <= freqs[i - 1] {
            return Err(Error::domain(format!(
                "frequencies must be strictly increasing (#{i}: {f} after {})",
                freqs[i - 1]
            )));
        }
    }
    Ok(())
}

impl BodeTrace {
    /// Build from complex samples; phase is unwrapped from the lowest
    /// frequency upwards.
    pub fn from_complex(label: impl Into<String>, freqs: Vec<f64>, response: &[Complex64]) -> Result<Self> {
        check_grid(&freqs)?;
        if response.len() != freqs.len() {
            return Err(Error::GridMismatch(format!(
                "{} frequencies but {} responses",
                freqs.len(),
                response.len()
            )));
        }
        let raw: Vec<f64> = response.iter().map(|z| z.arg()).collect();
        let phase_deg = unwrap_phase(&raw).into_iter().map(f64::to_degrees).collect();
        let gain_db = response.iter().map(|z| gain_db(*z)).collect();
        Ok(BodeTrace { label: label.into(), freqs, gain_db, phase_deg })
    }

    /// Build from gain/phase columns. The phase is re-unwrapped so a
    /// column wrapped at ±180° comes out continuous; an already continuous
    /// column is returned unchanged.
    pub fn from_gain_phase(
        label: impl Into<String>,
        freqs: Vec<f64>,
        gain_db: Vec<f64>,
        phase_deg: Vec<f64>,
    ) -> Result<Self> {
        check_grid(&freqs)?;
        if gain_db.len() != freqs.len() || phase_deg.len() != freqs.len() {
            return Err(Error::GridMismatch("gain, phase and frequency columns differ in length".into()));
        }
        if gain_db.iter().chain(phase_deg.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("gain and phase must be finite"));
        }
        let mut unwrapped = Vec::with_capacity(phase_deg.len());
        for (i, &p) in phase_deg.iter().enumerate() {
            if i == 0 {
                unwrapped.push(p);
            } else {
                let prev: f64 = unwrapped[i - 1];
                let k = ((p - prev) / 360.0).round();
                unwrapped.push(if k == 0.0 { p } else { p - 360.0 * k });
            }
        }
        Ok(BodeTrace { label: label.into(), freqs, gain_db, phase_deg: unwrapped })
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn gain_db(&self) -> &[f64] {
        &self.gain_db
    }

    pub fn phase_deg(&self) -> &[f64] {
        &self.phase_deg
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        10f64.powf(self.gain_db[i] / 20.0)
    }

    pub fn response(&self, i: usize) -> Complex64 {
        Complex64::from_polar(self.magnitude(i), self.phase_deg[i].to_radians())
    }

    pub fn responses(&self) -> Vec<Complex64> {
        (0..self.len()).map(|i| self.response(i)).collect()
    }

    /// Apply a pointwise map to the complex samples, keeping the grid.
    pub fn map<F>(&self, label: impl Into<String>, f: F) -> Result<BodeTrace>
    where
        F: Fn(f64, Complex64) -> Result<Complex64>,
    {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            out.push(f(self.freqs[i], self.response(i))?);
        }
        BodeTrace::from_complex(label, self.freqs.clone(), &out)
    }

    pub fn same_grid(&self, other: &BodeTrace) -> bool {
        self.freqs == other.freqs
    }
}

/// Evaluate a model on explicit frequencies. The first failing frequency
/// (in grid order) determines the error.
pub fn evaluate(model: &TransferModel, freqs: &[f64], mode: ExecMode) -> Result<Vec<Complex64>> {
    par::map_slice(freqs, mode, |&f| model.eval(f)).into_iter().collect()
}

pub fn bode_grid(model: &TransferModel, grid: &GridSpec, mode: ExecMode) -> Result<BodeTrace> {
    let freqs = grid.freqs()?;
    bode_on(model, freqs, mode)
}

pub fn bode_on(model: &TransferModel, freqs: Vec<f64>, mode: ExecMode) -> Result<BodeTrace> {
    let resp = evaluate(model, &freqs, mode)?;
    BodeTrace::from_complex("model", freqs, &resp)
}

/// Measured or computed response used as a model node. Interpolates
/// linearly in log-frequency on gain (dB) and unwrapped phase; refuses to
/// extrapolate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BodeTrace", into = "BodeTrace")]
pub struct Tabulated {
    trace: BodeTrace,
    log_f: Vec<f64>,
}

impl TryFrom<BodeTrace> for Tabulated {
    type Error = Error;
    fn try_from(t: BodeTrace) -> Result<Self> {
        Ok(Tabulated::new(t))
    }
}

impl From<Tabulated> for BodeTrace {
    fn from(t: Tabulated) -> Self {
        t.trace
    }
}

impl Tabulated {
    pub fn new(trace: BodeTrace) -> Self {
        let log_f = trace.freqs.iter().map(|f| f.ln()).collect();
        Tabulated { trace, log_f }
    }

    pub fn trace(&self) -> &BodeTrace {
        &self.trace
    }

    pub fn f_min(&self) -> f64 {
        self.trace.freqs[0]
    }

    pub fn f_max(&self) -> f64 {
        *self.trace.freqs.last().expect("non-empty trace")
    }

    pub fn eval(&self, f: f64) -> Result<Complex64> {
        let (gain, phase) = self.interp(f)?;
        Ok(Complex64::from_polar(10f64.powf(gain / 20.0), phase.to_radians()))
    }

    /// Interpolated (gain dB, phase deg).
    pub fn interp(&self, f: f64) -> Result<(f64, f64)> {
        let fr = &self.trace.freqs;
        let (lo, hi) = (self.f_min(), self.f_max());
        if !(f >= lo && f <= hi) {
            return Err(Error::Extrapolation { f_hz: f, lo_hz: lo, hi_hz: hi });
        }
        match fr.binary_search_by(|x| x.partial_cmp(&f).expect("finite grid")) {
            Ok(i) => Ok((self.trace.gain_db[i], self.trace.phase_deg[i])),
            Err(i) => {
                let (a, b) = (i - 1, i);
                let t = (f.ln() - self.log_f[a]) / (self.log_f[b] - self.log_f[a]);
                let g = &self.trace.gain_db;
                let p = &self.trace.phase_deg;
                Ok((g[a] + t * (g[b] - g[a]), p[a] + t * (p[b] - p[a])))
            }
        }
    }
}
