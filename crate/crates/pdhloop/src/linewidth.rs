//! Laser frequency-noise models, β-separation linewidth, and conversion of
//! the photodetector RF spectrum to in-loop frequency noise.
//!
//! All PSDs are single-sided.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tfcore::{log_grid, TransferModel};

/// Points per decade used for the β-separation integral.
pub const BETA_SEP_PPD: u32 = 400;

/// Free-running laser noise S(f) = h₋₁/f + h₀.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    #[serde(rename = "h_minus1_Hz2")]
    pub h_minus1: f64,
    #[serde(rename = "h0_Hz2_per_Hz")]
    pub h0: f64,
    /// Lower observation cutoff for the linewidth integral.
    #[serde(rename = "f_low_Hz", default = "default_f_low")]
    pub f_low: f64,
}

fn default_f_low() -> f64 {
    10.0
}

impl NoiseModel {
    pub fn psd(&self, f: f64) -> Result<f64> {
        noise_model_psd(self, f)
    }
}

pub fn noise_model_psd(m: &NoiseModel, f: f64) -> Result<f64> {
    if !(f > 0.0) {
        return Err(Error::domain(format!("frequency must be positive, got {f}")));
    }
    Ok(m.h_minus1 / f + m.h0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PsdDoc", into = "PsdDoc")]
pub struct PsdTrace {
    freqs: Vec<f64>,
    values: Vec<f64>,
    rbw: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PsdDoc {
    #[serde(rename = "frequency_Hz")]
    frequency: Vec<f64>,
    psd: Vec<f64>,
    #[serde(rename = "rbw_Hz", default, skip_serializing_if = "Option::is_none")]
    rbw: Option<f64>,
}

impl TryFrom<PsdDoc> for PsdTrace {
    type Error = Error;
    fn try_from(d: PsdDoc) -> Result<Self> {
        PsdTrace::new(d.frequency, d.psd, d.rbw)
    }
}

impl From<PsdTrace> for PsdDoc {
    fn from(t: PsdTrace) -> Self {
        PsdDoc { frequency: t.freqs, psd: t.values, rbw: t.rbw }
    }
}

impl PsdTrace {
    pub fn new(freqs: Vec<f64>, values: Vec<f64>, rbw: Option<f64>) -> Result<Self> {
        if freqs.len() != values.len() {
            return Err(Error::GridMismatch("frequency and PSD columns differ in length".into()));
        }
        for (i, w) in freqs.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::domain(format!("frequencies must be strictly increasing at #{}", i + 1)));
            }
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::domain(format!("PSD values must be finite and non-negative, got {v}")));
        }
        Ok(PsdTrace { freqs, values, rbw })
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rbw(&self) -> Option<f64> {
        self.rbw
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    /// Linear interpolation in frequency; `None` outside the trace.
    pub fn interp(&self, f: f64) -> Option<f64> {
        let fr = &self.freqs;
        if fr.is_empty() || f < fr[0] || f > fr[fr.len() - 1] {
            return None;
        }
        let i = fr.partition_point(|x| *x < f);
        if fr[i] == f {
            return Some(self.values[i]);
        }
        let t = (f - fr[i - 1]) / (fr[i] - fr[i - 1]);
        Some(self.values[i - 1] + t * (self.values[i] - self.values[i - 1]))
    }
}

/// The β-separation line 8ln2·f/π².
pub fn beta_line(f: f64) -> f64 {
    8.0 * LN_2 * f / (PI * PI)
}

pub enum PsdSource<'a> {
    Model(&'a NoiseModel),
    Trace(&'a PsdTrace),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinewidthReport {
    #[serde(rename = "fwhm_Hz")]
    pub fwhm: f64,
    /// Area of the PSD above the β-separation line.
    #[serde(rename = "area_Hz2")]
    pub area: f64,
    #[serde(rename = "f_low_Hz")]
    pub f_low: f64,
    #[serde(rename = "f_high_Hz")]
    pub f_high: f64,
    /// Set when no part of the PSD lies above the line.
    pub empty_region: bool,
}

/// FWHM = √(8ln2·A), A the area of S(f) where it exceeds the β-separation
/// line within [f_low, f_high].
///
/// Trapezoid rule; cells that straddle the line are cut at the linearly
/// interpolated crossing. An empty region gives πh₀ for a model (its white
/// part alone is Lorentzian) and 0 for a trace, with `empty_region` set.
pub fn beta_separation_linewidth(src: PsdSource, f_low: f64, f_high: f64) -> Result<LinewidthReport> {
    if !(f_low > 0.0 && f_high > f_low) {
        return Err(Error::domain(format!("need 0 < f_low < f_high, got [{f_low}, {f_high}]")));
    }
    let (f, s): (Vec<f64>, Vec<f64>) = match &src {
        PsdSource::Model(m) => {
            let f = log_grid(f_low, f_high, BETA_SEP_PPD)?;
            let s = f.iter().map(|&x| m.h_minus1 / x + m.h0).collect();
            (f, s)
        }
        PsdSource::Trace(t) => {
            let mut f = Vec::new();
            let mut s = Vec::new();
            for (x, v) in t.freqs().iter().zip(t.values()) {
                if *x >= f_low && *x <= f_high {
                    f.push(*x);
                    s.push(*v);
                }
            }
            (f, s)
        }
    };
    let mut area = 0.0;
    for i in 0..f.len().saturating_sub(1) {
        let (xa, xb) = (f[i], f[i + 1]);
        let (da, db) = (s[i] - beta_line(xa), s[i + 1] - beta_line(xb));
        if da > 0.0 && db > 0.0 {
            area += 0.5 * (xb - xa) * (s[i] + s[i + 1]);
        } else if da > 0.0 || db > 0.0 {
            let t = da / (da - db);
            let xc = xa + t * (xb - xa);
            let sc = s[i] + t * (s[i + 1] - s[i]);
            if da > 0.0 {
                area += 0.5 * (xc - xa) * (s[i] + sc);
            } else {
                area += 0.5 * (xb - xc) * (sc + s[i + 1]);
            }
        }
    }
    if area > 0.0 {
        return Ok(LinewidthReport { fwhm: (8.0 * LN_2 * area).sqrt(), area, f_low, f_high, empty_region: false });
    }
    let fwhm = match src {
        PsdSource::Model(m) => PI * m.h0,
        PsdSource::Trace(_) => 0.0,
    };
    Ok(LinewidthReport { fwhm, area: 0.0, f_low, f_high, empty_region: true })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sy1Result {
    pub psd: PsdTrace,
    /// Bins that went negative after baseline subtraction and were set to 0.
    pub clamped: usize,
}

/// Recover S_y1 from the RF spectrum S_y4 of the photodetector.
///
/// Subtracts the detector baseline, moves the axis down by Ω/2π, folds the
/// two sidebands onto positive offsets and divides by |P·k_e·C|². The
/// spectrum is taken ahead of the demodulator, so D does not enter.
/// Output offsets are the S_y4 bins above Ω/2π whose mirror image is
/// still inside the trace.
pub fn sy4_to_sy1(
    s_y4: &PsdTrace,
    baseline: &PsdTrace,
    omega_over_2pi: f64,
    k_e: f64,
    pd: &TransferModel,
    cavity: &TransferModel,
) -> Result<Sy1Result> {
    if s_y4.freqs() != baseline.freqs() {
        return Err(Error::GridMismatch("baseline must share the S_y4 grid".into()));
    }
    let mut clamped = 0;
    let diff: Vec<f64> = s_y4
        .values()
        .iter()
        .zip(baseline.values())
        .map(|(s, b)| {
            let d = s - b;
            if d < 0.0 {
                clamped += 1;
                0.0
            } else {
                d
            }
        })
        .collect();
    let diff = PsdTrace::new(s_y4.freqs().to_vec(), diff, s_y4.rbw())?;
    let mut out_f = Vec::new();
    let mut out_v = Vec::new();
    for (&f, &upper) in diff.freqs().iter().zip(diff.values()) {
        let off = f - omega_over_2pi;
        if off <= 0.0 {
            continue;
        }
        let Some(lower) = diff.interp(omega_over_2pi - off) else {
            continue;
        };
        let h = pd.eval(off)? * k_e * cavity.eval(off)?;
        out_f.push(off);
        out_v.push((upper + lower) / h.norm_sqr());
    }
    if out_f.is_empty() {
        return Err(Error::GridMismatch("S_y4 does not cover both sidebands of Ω/2π".into()));
    }
    Ok(Sy1Result { psd: PsdTrace::new(out_f, out_v, s_y4.rbw())?, clamped })
}

/// Forward model: the S_y4 spectrum produced by in-loop noise S_y1, half of
/// it in each sideband, plus a detector baseline. Returns the S_y4 trace
/// and the baseline on a grid symmetric about Ω/2π.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_sy4(
    s_y1: &dyn Fn(f64) -> f64,
    baseline: &dyn Fn(f64) -> f64,
    offsets: &[f64],
    omega_over_2pi: f64,
    k_e: f64,
    pd: &TransferModel,
    cavity: &TransferModel,
    rbw: Option<f64>,
) -> Result<(PsdTrace, PsdTrace)> {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(2 * offsets.len());
    for &off in offsets {
        let h = pd.eval(off)? * k_e * cavity.eval(off)?;
        let half = 0.5 * h.norm_sqr() * s_y1(off);
        pts.push((omega_over_2pi - off, half));
        pts.push((omega_over_2pi + off, half));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let f: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let b: Vec<f64> = f.iter().map(|&x| baseline(x)).collect();
    let s: Vec<f64> = pts.iter().zip(&b).map(|(p, bv)| p.1 + bv).collect();
    Ok((PsdTrace::new(f.clone(), s, rbw)?, PsdTrace::new(f, b, rbw)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_values() {
        let m = NoiseModel { h_minus1: 5e8, h0: 2e3, f_low: 10.0 };
        assert_eq!(noise_model_psd(&m, 1.0).unwrap(), 5.00002e8);
        assert!(noise_model_psd(&m, 0.0).is_err());
        let crossover = m.h_minus1 / m.h0;
        assert!((m.h_minus1 / crossover - m.h0).abs() < 1e-12);
    }

    #[test]
    fn white_noise_gives_lorentzian_width() {
        let m = NoiseModel { h_minus1: 0.0, h0: 2e3, f_low: 1e-3 };
        let r = beta_separation_linewidth(PsdSource::Model(&m), 1e-3, 1e6).unwrap();
        assert!((r.fwhm / (PI * 2e3) - 1.0).abs() < 1e-3, "{}", r.fwhm);
    }

    #[test]
    fn empty_region_fallbacks() {
        let m = NoiseModel { h_minus1: 0.0, h0: 1e-3, f_low: 10.0 };
        let r = beta_separation_linewidth(PsdSource::Model(&m), 10.0, 1e3).unwrap();
        assert!(r.empty_region);
        assert_eq!(r.fwhm, PI * 1e-3);
        let t = PsdTrace::new(vec![10.0, 100.0], vec![0.0, 0.0], None).unwrap();
        let r = beta_separation_linewidth(PsdSource::Trace(&t), 10.0, 100.0).unwrap();
        assert!(r.empty_region);
        assert_eq!(r.fwhm, 0.0);
    }

    #[test]
    fn negative_psd_rejected() {
        assert!(PsdTrace::new(vec![1.0, 2.0], vec![1.0, -1.0], None).is_err());
        assert!(PsdTrace::new(vec![2.0, 1.0], vec![1.0, 1.0], None).is_err());
    }
}
