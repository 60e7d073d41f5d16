//! Measurement ingestion: VNA traces, cavity ring-downs, and the
//! compensation steps that turn raw chain measurements into component
//! responses.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linewidth::PsdTrace;
use crate::par::{self, ExecMode};
use crate::pdh::golden_max;
use crate::tfcore::{self, BodeTrace, Tabulated, TransferModel};

pub const BODE_HEADER: [&str; 3] = ["frequency_Hz", "gain_dB", "phase_deg"];
pub const RINGDOWN_HEADER: [&str; 2] = ["time_s", "voltage_V"];
pub const PSD_HEADER: [&str; 2] = ["frequency_Hz", "psd_Hz2_per_Hz"];

struct Table {
    rows: Vec<(u64, Vec<f64>)>,
    meta: Vec<(String, String)>,
}

fn read_table<R: Read>(mut src: R, header: &[&str]) -> Result<Table> {
    let mut text = String::new();
    src.read_to_string(&mut text)?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
    let meta = text
        .lines()
        .filter_map(|l| l.trim().strip_prefix('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let got = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    let header_line = got.position().map_or(1, |p| p.line());
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::Parse {
            line: header_line,
            msg: format!("expected header `{}`, found `{}`", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Parse { line, msg: format!("expected {} fields, found {}", header.len(), rec.len()) });
        }
        let mut vals = Vec::with_capacity(rec.len());
        for (field, name) in rec.iter().zip(header) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("{name}: `{field}` is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("{name}: value must be finite") });
            }
            vals.push(v);
        }
        rows.push((line, vals));
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: header_line, msg: "no data rows".into() });
    }
    Ok(Table { rows, meta })
}

fn check_increasing(rows: &[(u64, Vec<f64>)], what: &str) -> Result<()> {
    for w in rows.windows(2) {
        let (a, b) = (w[0].1[0], w[1].1[0]);
        if b == a {
            return Err(Error::Parse { line: w[1].0, msg: format!("duplicate {what} {b}") });
        }
        if b < a {
            return Err(Error::Parse { line: w[1].0, msg: format!("{what} {b} is below the previous row ({a})") });
        }
    }
    Ok(())
}

/// Bode CSV with header `frequency_Hz,gain_dB,phase_deg`; `#` lines are
/// comments. Phase wrapped at ±180° is unwrapped on the way in.
pub fn parse_bode_csv<R: Read>(src: R) -> Result<BodeTrace> {
    let t = read_table(src, &BODE_HEADER)?;
    check_increasing(&t.rows, "frequency")?;
    if let Some((line, _)) = t.rows.iter().find(|(_, r)| r[0] <= 0.0) {
        return Err(Error::Parse { line: *line, msg: "frequency must be positive".into() });
    }
    let label = t.meta.iter().find(|(k, _)| k == "label").map(|(_, v)| v.clone()).unwrap_or_default();
    let col = |i: usize| t.rows.iter().map(|(_, r)| r[i]).collect::<Vec<_>>();
    BodeTrace::from_gain_phase(label, col(0), col(1), col(2))
}

pub fn read_bode_file(path: impl AsRef<std::path::Path>) -> Result<BodeTrace> {
    parse_bode_csv(std::fs::File::open(path)?)
}

fn write_rows<W: Write>(out: W, comments: &[String], header: &[&str], cols: &[&[f64]]) -> Result<()> {
    let mut out = out;
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for i in 0..cols[0].len() {
        w.write_record(cols.iter().map(|c| c[i].to_string())).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bode_csv<W: Write>(trace: &BodeTrace, out: W) -> Result<()> {
    let comments = if trace.label.is_empty() { vec![] } else { vec![format!("label={}", trace.label)] };
    write_rows(out, &comments, &BODE_HEADER, &[trace.freqs(), trace.gain_db(), trace.phase_deg()])
}

/// PSD CSV with header `frequency_Hz,psd_Hz2_per_Hz` and an optional
/// `# rbw_Hz=<value>` comment.
pub fn parse_psd_csv<R: Read>(src: R) -> Result<PsdTrace> {
    let t = read_table(src, &PSD_HEADER)?;
    check_increasing(&t.rows, "frequency")?;
    let rbw = match t.meta.iter().find(|(k, _)| k == "rbw_Hz") {
        Some((_, v)) => Some(v.parse::<f64>().map_err(|_| Error::Parse { line: 1, msg: format!("bad rbw_Hz `{v}`") })?),
        None => None,
    };
    if let Some((line, r)) = t.rows.iter().find(|(_, r)| r[1] < 0.0) {
        return Err(Error::Parse { line: *line, msg: format!("negative PSD value {}", r[1]) });
    }
    PsdTrace::new(t.rows.iter().map(|(_, r)| r[0]).collect(), t.rows.iter().map(|(_, r)| r[1]).collect(), rbw)
}

pub fn write_psd_csv<W: Write>(psd: &PsdTrace, out: W) -> Result<()> {
    let comments = psd.rbw().map(|r| vec![format!("rbw_Hz={r}")]).unwrap_or_default();
    write_rows(out, &comments, &PSD_HEADER, &[psd.freqs(), psd.values()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingdownTrace {
    #[serde(rename = "time_s")]
    times: Vec<f64>,
    #[serde(rename = "voltage_V")]
    voltages: Vec<f64>,
    pub averages: u32,
}

impl RingdownTrace {
    /// Times must increase with a constant step (to 1 ppm of the step).
    pub fn new(times: Vec<f64>, voltages: Vec<f64>, averages: u32) -> Result<Self> {
        if times.len() != voltages.len() {
            return Err(Error::GridMismatch("time and voltage columns differ in length".into()));
        }
        if times.len() < 2 {
            return Err(Error::domain("ring-down needs at least two samples"));
        }
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        if !(dt > 0.0) {
            return Err(Error::domain("times must increase"));
        }
        for (i, w) in times.windows(2).enumerate() {
            if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt {
                return Err(Error::domain(format!("sample {} breaks uniform spacing", i + 1)));
            }
        }
        Ok(RingdownTrace { times, voltages, averages: averages.max(1) })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn voltages(&self) -> &[f64] {
        &self.voltages
    }

    pub fn dt(&self) -> f64 {
        (self.times[self.times.len() - 1] - self.times[0]) / (self.times.len() - 1) as f64
    }

    pub fn scaled(&self, c: f64) -> RingdownTrace {
        RingdownTrace { voltages: self.voltages.iter().map(|v| v * c).collect(), ..self.clone() }
    }
}

/// Ring-down CSV with header `time_s,voltage_V` and `# averages=<n>`.
pub fn parse_ringdown_csv<R: Read>(src: R) -> Result<RingdownTrace> {
    let t = read_table(src, &RINGDOWN_HEADER)?;
    check_increasing(&t.rows, "time")?;
    let averages = match t.meta.iter().find(|(k, _)| k == "averages") {
        Some((_, v)) => v.parse().map_err(|_| Error::Parse { line: 1, msg: format!("bad averages `{v}`") })?,
        None => 1,
    };
    RingdownTrace::new(t.rows.iter().map(|(_, r)| r[0]).collect(), t.rows.iter().map(|(_, r)| r[1]).collect(), averages)
}

pub fn write_ringdown_csv<W: Write>(tr: &RingdownTrace, out: W) -> Result<()> {
    write_rows(out, &[format!("averages={}", tr.averages)], &RINGDOWN_HEADER, &[&tr.times, &tr.voltages])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub value: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingdownFit {
    #[serde(rename = "delta_nu_c_Hz")]
    pub delta_nu_c: FitParam,
    #[serde(rename = "tau_s")]
    pub tau: FitParam,
    /// Amplitude at the first fitted sample.
    #[serde(rename = "v0_V")]
    pub v0: FitParam,
    #[serde(rename = "v_off_V")]
    pub v_off: FitParam,
    #[serde(rename = "residual_rms_V")]
    pub residual_rms: f64,
    pub samples_used: usize,
    #[serde(rename = "excluded_s")]
    pub excluded: f64,
    pub iterations: usize,
    pub note: String,
}

/// Least-squares fit of V(t) = V₀·exp(-t/τ) + V_off after dropping the
/// first `exclude_initial` seconds (default: three sample periods).
///
/// A log-linear fit seeds Gauss-Newton on (V₀, 1/τ, V_off) with step
/// halving. δν_c = 1/(2πτ), τ being the 1/e time of the intensity.
/// Uncertainties come from the residual variance and (JᵀJ)⁻¹.
pub fn fit_ringdown(trace: &RingdownTrace, exclude_initial: Option<f64>) -> Result<RingdownFit> {
    let dt = trace.dt();
    let excl = exclude_initial.unwrap_or(3.0 * dt);
    if !(excl >= 0.0) {
        return Err(Error::domain("exclusion window must be non-negative"));
    }
    let t0 = trace.times[0];
    let first = trace.times.iter().position(|&t| t - t0 >= excl - 1e-9 * dt).unwrap_or(trace.times.len());
    let t_start = trace.times.get(first).copied().unwrap_or(t0);
    let ts: Vec<f64> = trace.times[first..].iter().map(|t| t - t_start).collect();
    let vs = &trace.voltages[first..];
    let n = ts.len();
    if n < 50 {
        return Err(Error::FitFailure(format!("{n} samples after exclusion, need at least 50")));
    }

    // log-linear seed
    let tail = (n / 10).max(5);
    let off0 = vs[n - tail..].iter().sum::<f64>() / tail as f64;
    let ymax = vs.iter().map(|v| v - off0).fold(f64::NEG_INFINITY, f64::max);
    if !(ymax > 0.0) {
        return Err(Error::FitFailure("no decay above the baseline".into()));
    }
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(vs)
        .take_while(|(_, v)| *v - off0 > 0.2 * ymax)
        .map(|(t, v)| (*t, (v - off0).ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::FitFailure("decay too short to seed the fit".into()));
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::FitFailure("trace does not decay".into()));
    }
    let mut p = Vector3::new((my - slope * mx).exp(), -slope, off0);

    let ssr = |p: &Vector3<f64>| -> f64 {
        ts.iter().zip(vs).map(|(t, v)| (v - (p[0] * (-p[1] * t).exp() + p[2])).powi(2)).sum()
    };
    let normal = |p: &Vector3<f64>| -> (Matrix3<f64>, Vector3<f64>) {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (t, v) in ts.iter().zip(vs) {
            let e = (-p[1] * t).exp();
            let j = Vector3::new(e, -p[0] * t * e, 1.0);
            let r = v - (p[0] * e + p[2]);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        (jtj, jtr)
    };

    let mut cur = ssr(&p);
    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        let (jtj, jtr) = normal(&p);
        let Some(step) = jtj.lu().solve(&jtr) else {
            return Err(Error::FitFailure("singular normal equations".into()));
        };
        let mut lambda = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = p + step * lambda;
            let s = ssr(&cand);
            if cand[1] > 0.0 && s < cur {
                let gain = (cur - s) / cur.max(f64::MIN_POSITIVE);
                p = cand;
                cur = s;
                moved = gain > 1e-15;
                break;
            }
            lambda *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if !(p[1] > 0.0 && p[1].is_finite()) {
        return Err(Error::FitFailure("fitted decay time is not positive".into()));
    }
    let (jtj, _) = normal(&p);
    let dof = (n - 3) as f64;
    let s2 = cur / dof;
    let cov = jtj
        .try_inverse()
        .ok_or_else(|| Error::FitFailure("covariance is singular".into()))?
        * s2;
    let sig = |i: usize| cov[(i, i)].max(0.0).sqrt();
    let k = p[1];
    Ok(RingdownFit {
        delta_nu_c: FitParam { value: k / (2.0 * PI), sigma: sig(1) / (2.0 * PI) },
        tau: FitParam { value: 1.0 / k, sigma: sig(1) / (k * k) },
        v0: FitParam { value: p[0], sigma: sig(0) },
        v_off: FitParam { value: p[2], sigma: sig(2) },
        residual_rms: (cur / n as f64).sqrt(),
        samples_used: n,
        excluded: t_start - t0,
        iterations,
        note: format!("first {} samples ({:.3e} s) excluded as initial transient", first, t_start - t0),
    })
}

/// Parameters of a synthetic averaged ring-down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingdownSynth {
    #[serde(rename = "tau_s")]
    pub tau: f64,
    #[serde(rename = "v0_V")]
    pub v0: f64,
    #[serde(rename = "v_off_V")]
    pub v_off: f64,
    #[serde(rename = "dt_s")]
    pub dt: f64,
    pub samples: usize,
    /// Per-shot white noise, relative to V₀.
    pub noise_rel: f64,
    pub averages: u32,
}

impl RingdownSynth {
    pub fn generate(&self, seed: u64) -> Result<RingdownTrace> {
        let sigma = self.noise_rel * self.v0 / (self.averages.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::domain(e.to_string()))?;
        let times: Vec<f64> = (0..self.samples).map(|i| i as f64 * self.dt).collect();
        let volts = times
            .iter()
            .map(|t| self.v0 * (-t / self.tau).exp() + self.v_off + noise.sample(&mut rng))
            .collect();
        RingdownTrace::new(times, volts, self.averages)
    }
}

/// Fitted τ for `trials` independent synthetic traces; trial i uses seed
/// `seed + i`, so results do not depend on the execution mode.
pub fn monte_carlo_ringdown(synth: &RingdownSynth, trials: usize, seed: u64, mode: ExecMode) -> Result<Vec<f64>> {
    par::map_indexed(trials, mode, |i| {
        let tr = synth.generate(seed.wrapping_add(i as u64))?;
        Ok(fit_ringdown(&tr, None)?.tau.value)
    })
    .into_iter()
    .collect()
}

fn divide_on_grid(
    measured: &BodeTrace,
    label: &str,
    divisor: impl Fn(f64) -> Result<Complex64>,
) -> Result<(BodeTrace, Vec<f64>)> {
    let f = measured.freqs();
    let mut keep_f = Vec::new();
    let mut keep = Vec::new();
    let mut flagged = Vec::new();
    let mut divs = Vec::with_capacity(f.len());
    for &x in f {
        divs.push(divisor(x)?);
    }
    let peak = divs.iter().map(|d| d.norm()).fold(0.0, f64::max);
    for (i, d) in divs.iter().enumerate() {
        if d.norm() <= 1e-9 * peak || d.norm() == 0.0 {
            flagged.push(f[i]);
        } else {
            keep_f.push(f[i]);
            keep.push(measured.response(i) / d);
        }
    }
    if keep.is_empty() {
        return Err(Error::domain("every bin has a vanishing divisor"));
    }
    Ok((BodeTrace::from_complex(label, keep_f, &keep)?, flagged))
}

/// Strip the up-conversion mixer calibration and the fiber delay from a
/// demodulation-chain measurement, leaving D·P.
pub fn fit_lockin_chain(measured: &BodeTrace, mx1_cal: &BodeTrace, fiber_delay: f64) -> Result<Tabulated> {
    let cal = Tabulated::new(mx1_cal.clone());
    let (lo, hi) = (cal.f_min(), cal.f_max());
    let f = measured.freqs();
    if f[0] < lo || f[f.len() - 1] > hi {
        return Err(Error::GridMismatch(format!(
            "measurement spans [{}, {}] Hz but the mixer calibration covers [{lo}, {hi}] Hz",
            f[0],
            f[f.len() - 1]
        )));
    }
    let (t, _) = divide_on_grid(measured, "DP", |x| Ok(cal.eval(x)? * tfcore::eval_delay(fiber_delay, x)?))?;
    Ok(Tabulated::new(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfastResult {
    pub model: Tabulated,
    /// Bins dropped because the discriminator response nearly vanished.
    #[serde(rename = "flagged_Hz")]
    pub flagged: Vec<f64>,
}

/// Laser fast-branch response from a measurement of discriminator·G·delay.
pub fn derive_gfast(measured: &BodeTrace, discriminator: &TransferModel, tau_l: f64) -> Result<GfastResult> {
    let (t, flagged) = divide_on_grid(measured, "G_fast", |x| Ok(discriminator.eval(x)? * tfcore::eval_delay(tau_l, x)?))?;
    Ok(GfastResult { model: Tabulated::new(t), flagged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdOrderFit {
    pub order: u32,
    #[serde(rename = "f_pd_Hz")]
    pub f_pd: f64,
    pub rms_residual_deg: f64,
}

/// Fit -n·atan(f/f_PD) to a measured photodetector phase for each order in
/// `orders`, returning the best corner and the RMS phase residual per order.
pub fn fit_pd_order(l_pd: &BodeTrace, orders: &[u32], mode: ExecMode) -> Result<Vec<PdOrderFit>> {
    if orders.contains(&0) {
        return Err(Error::domain("orders must be at least 1"));
    }
    let f = l_pd.freqs().to_vec();
    let ph = l_pd.phase_deg().to_vec();
    let (lo, hi) = ((f[0] / 100.0).ln(), (f[f.len() - 1] * 100.0).ln());
    Ok(par::map_slice(orders, mode, |&n| {
        let rss = |lf: f64| -> f64 {
            let fp = lf.exp();
            f.iter().zip(&ph).map(|(x, p)| (p - tfcore::lowpass_arctan_phase_deg(n, fp, *x)).powi(2)).sum()
        };
        let best = golden_max(|lf| -rss(lf), lo, hi, 1e-10);
        PdOrderFit { order: n, f_pd: best.exp(), rms_residual_deg: (rss(best) / f.len() as f64).sqrt() }
    }))
}
