//! The bench tuning workflow run against a loop model: oscillation test,
//! PID autotune, design-goal checks, phase-budget audit and the cavity
//! linewidth advisor.

use std::collections::HashSet;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loopan::{self, LoopConfig, MarginsReport};
use crate::par::{self, ExecMode};
use crate::tfcore::{self, BodeTrace, Pid, TransferModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Oscillating {
        #[serde(rename = "f_Hz")]
        f: Option<f64>,
    },
}

impl Verdict {
    pub fn is_oscillating(&self) -> bool {
        matches!(self, Verdict::Oscillating { .. })
    }

    fn of(m: &MarginsReport) -> Verdict {
        if m.is_oscillating() {
            Verdict::Oscillating { f: m.oscillation_frequency() }
        } else {
            Verdict::Stable
        }
    }
}

/// Loop responses with the controller factored out, sampled once on the
/// analysis grid so that trying new PID settings only re-evaluates K.
pub struct LoopEvaluator {
    freqs: Vec<f64>,
    disc: Vec<Complex64>,
    /// Loop-filter roll-off times the fast actuator.
    g_fast: Vec<Complex64>,
    delay: Vec<Complex64>,
    g_slow: Option<Vec<Complex64>>,
}

impl LoopEvaluator {
    pub fn new(cfg: &LoopConfig, mode: ExecMode) -> Result<Self> {
        let freqs = cfg.grid.freqs()?;
        let disc = tfcore::evaluate(&cfg.discriminator_model()?, &freqs, mode)?;
        let plant = tfcore::compose(vec![cfg.k_fast_rolloff.clone(), cfg.g_fast.clone()])?;
        let g_fast = tfcore::evaluate(&plant, &freqs, mode)?;
        let delay = tfcore::evaluate(&TransferModel::delay(cfg.tau_l), &freqs, mode)?;
        let g_slow = match &cfg.g_slow {
            Some(g) => Some(tfcore::evaluate(g, &freqs, mode)?),
            None => None,
        };
        Ok(LoopEvaluator { freqs, disc, g_fast, delay, g_slow })
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Open loop for the given controller settings. The slow branch only
    /// contributes when both `f_i_slow` and a slow actuator are present.
    pub fn alpha(&self, pid: &Pid, f_i_slow: Option<f64>) -> Result<BodeTrace> {
        let mut out = Vec::with_capacity(self.freqs.len());
        for (i, &f) in self.freqs.iter().enumerate() {
            let mut a = self.disc[i] * pid.eval(f)? * self.g_fast[i] * self.delay[i];
            if let (Some(fi), Some(gs)) = (f_i_slow, &self.g_slow) {
                a += self.disc[i] * tfcore::eval_integrator(fi, f)? * gs[i] * self.delay[i];
            }
            out.push(a);
        }
        BodeTrace::from_complex("open loop", self.freqs.clone(), &out)
    }

    pub fn margins(&self, pid: &Pid, f_i_slow: Option<f64>) -> Result<MarginsReport> {
        Ok(loopan::margins(&self.alpha(pid, f_i_slow)?))
    }
}

/// Stable, or oscillating at the reported frequency: φ_m ≤ 0 or g_m ≤ 1
/// on the assembled open loop.
pub fn oscillation_test(cfg: &LoopConfig) -> Result<Verdict> {
    let ev = LoopEvaluator::new(cfg, ExecMode::Sequential)?;
    Ok(Verdict::of(&ev.margins(&cfg.k_fast, cfg.f_i_slow)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneOptions {
    /// Multiplicative step while searching for oscillation.
    pub step: f64,
    /// Factor applied to K_P and f_I after oscillation is found.
    pub backoff: f64,
    /// Factor applied to f_D after oscillation is found.
    pub derivative_backoff: f64,
    /// Step of the final K_P raise.
    pub final_step: f64,
    /// A sweep that moves no parameter by more than this fraction ends the loop.
    pub converge_tol: f64,
    /// Candidates whose reachable bandwidth is within this fraction of the
    /// best so far are still taken.
    pub tie_tol: f64,
    pub max_sweeps: usize,
    pub max_steps: usize,
    /// Weak-lock starting point; also the smallest admissible K_P.
    pub kp_start: f64,
    #[serde(rename = "f_i_start_Hz")]
    pub fi_start: f64,
    #[serde(rename = "f_i_slow_start_Hz")]
    pub fi_slow_start: f64,
    #[serde(rename = "phi_m_min_deg")]
    pub pm_min: f64,
    #[serde(rename = "phi_m_max_deg")]
    pub pm_max: f64,
    /// Also hold ∠α > -120° below f_UG/√10 wherever the phase margin is
    /// checked; f_I is halved until the band passes.
    pub require_low_frequency_phase: bool,
    /// Only loops whose gain falls through unity once count; this rules out
    /// settings that keep |α| near 1 over a wide band.
    pub require_single_crossing: bool,
    pub tune_slow: bool,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            step: 1.25,
            backoff: 0.5,
            derivative_backoff: 1.5,
            final_step: 1.1,
            converge_tol: 0.05,
            tie_tol: 0.02,
            max_sweeps: 60,
            max_steps: 400,
            kp_start: 1e-2,
            fi_start: 10.0,
            fi_slow_start: 1.0,
            pm_min: 30.0,
            pm_max: 60.0,
            require_low_frequency_phase: true,
            require_single_crossing: true,
            tune_slow: true,
        }
    }
}

impl TuneOptions {
    /// Stable, with the structural goals this policy asks for. The phase
    /// margin is checked separately.
    fn structurally_ok(&self, m: &MarginsReport) -> bool {
        !m.is_oscillating()
            && m.f_ug.is_some()
            && (!self.require_low_frequency_phase || m.goals.low_frequency_phase)
            && (!self.require_single_crossing || m.unity_gain_crossings == 1)
    }

    /// A setting the tuner may return: structurally ok with
    /// `pm_min < φ_m < pm_max`. The grid-search oracle uses the same test.
    pub fn admits(&self, m: &MarginsReport) -> bool {
        self.structurally_ok(m) && m.phi_m.is_some_and(|p| p > self.pm_min && p < self.pm_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    KP,
    FI,
    FD,
    FISlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Start,
    /// One step towards oscillation.
    Increase,
    /// Retreat after oscillation was detected.
    Backoff,
    /// The back-off point itself oscillated; the last stable value is kept.
    Fallback,
    /// The step limit was reached without oscillation.
    Limit,
    /// Small K_P raise after the prepare phase.
    Raise,
    EnableDerivative,
    Accept,
    Reject,
    FinalRaise,
    /// Step taken while pulling φ_m back under its upper bound.
    Trim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub k_fast: Pid,
    #[serde(rename = "f_i_slow_Hz")]
    pub f_i_slow: Option<f64>,
}

impl Setting {
    fn get(&self, p: Param) -> f64 {
        match p {
            Param::KP => self.k_fast.k_p,
            Param::FI => self.k_fast.f_i,
            Param::FD => self.k_fast.f_d.unwrap_or(f64::INFINITY),
            Param::FISlow => self.f_i_slow.unwrap_or(0.0),
        }
    }

    fn with(&self, p: Param, v: f64) -> Setting {
        let mut s = *self;
        match p {
            Param::KP => s.k_fast.k_p = v,
            Param::FI => s.k_fast.f_i = v,
            Param::FD => s.k_fast.f_d = Some(v),
            Param::FISlow => s.f_i_slow = Some(v),
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Steps of one search towards oscillation share a run number.
    pub run: usize,
    pub kind: StepKind,
    pub param: Option<Param>,
    pub setting: Setting,
    pub verdict: Verdict,
    /// Bandwidth reachable from this setting by raising K_P (accept/reject steps).
    #[serde(rename = "reachable_f_ug_Hz", default, skip_serializing_if = "Option::is_none")]
    pub reachable_f_ug: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infeasibility {
    pub binding_constraint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub k_fast: Pid,
    #[serde(rename = "f_i_slow_Hz")]
    pub f_i_slow: Option<f64>,
    pub margins: MarginsReport,
    /// Completed K_P/f_I/f_D sweeps.
    pub iterations: usize,
    pub converged: bool,
    pub infeasible: Option<Infeasibility>,
    pub trace: Vec<TraceStep>,
}

impl TuneResult {
    pub fn is_feasible(&self) -> bool {
        self.infeasible.is_none()
    }
}

struct Session<'a> {
    ev: &'a LoopEvaluator,
    opts: TuneOptions,
    trace: Vec<TraceStep>,
    run: usize,
}

impl Session<'_> {
    fn margins(&self, s: &Setting) -> Result<MarginsReport> {
        self.ev.margins(&s.k_fast, s.f_i_slow)
    }

    fn verdict(&self, s: &Setting) -> Result<Verdict> {
        Ok(Verdict::of(&self.margins(s)?))
    }

    fn push(&mut self, kind: StepKind, param: Option<Param>, setting: Setting, verdict: Verdict, reach: Option<f64>) {
        self.trace.push(TraceStep { run: self.run, kind, param, setting, verdict, reachable_f_ug: reach });
    }

    /// Multiply `param` by `factor` until the loop oscillates, then apply
    /// `back` to the oscillating value.
    fn search(&mut self, base: Setting, param: Param, factor: f64, back: f64) -> Result<Setting> {
        self.run += 1;
        let mut v = base.get(param);
        for _ in 0..self.opts.max_steps {
            let nv = v * factor;
            let cand = base.with(param, nv);
            let verdict = self.verdict(&cand)?;
            self.push(StepKind::Increase, Some(param), cand, verdict, None);
            if verdict.is_oscillating() {
                let b = base.with(param, nv * back);
                let vb = self.verdict(&b)?;
                self.push(StepKind::Backoff, Some(param), b, vb, None);
                if vb.is_oscillating() {
                    let s = base.with(param, v);
                    let vs = self.verdict(&s)?;
                    self.push(StepKind::Fallback, Some(param), s, vs, None);
                    return Ok(s);
                }
                return Ok(b);
            }
            v = nv;
        }
        let s = base.with(param, v);
        let vs = self.verdict(&s)?;
        self.push(StepKind::Limit, Some(param), s, vs, None);
        Ok(s)
    }

    /// Stable with at least the minimum phase margin.
    fn acceptable(&self, s: &Setting) -> Result<bool> {
        let m = self.margins(s)?;
        Ok(self.opts.structurally_ok(&m) && m.phi_m.is_some_and(|p| p >= self.opts.pm_min))
    }

    /// Halve f_I until the low-frequency phase goal holds (when required).
    fn settle_integrator(&mut self, mut s: Setting) -> Result<Setting> {
        if !self.opts.require_low_frequency_phase {
            return Ok(s);
        }
        for _ in 0..self.opts.max_steps {
            let m = self.margins(&s)?;
            if m.f_ug.is_none() || m.goals.low_frequency_phase {
                break;
            }
            s = s.with(Param::FI, s.get(Param::FI) * self.opts.backoff);
            let v = self.verdict(&s)?;
            self.push(StepKind::Backoff, Some(Param::FI), s, v, None);
        }
        Ok(s)
    }

    /// Highest acceptable K_P for the other parameters of `s`: a coarse
    /// ladder in `final_step` factors (down first if `s` is not acceptable,
    /// never below `kp_start`) followed by bisection on the boundary.
    fn fit_kp(&self, s: &Setting) -> Result<Option<Setting>> {
        let f = self.opts.final_step;
        let mut lo = s.k_fast.k_p;
        let mut steps = 0;
        while !self.acceptable(&s.with(Param::KP, lo))? {
            lo /= f;
            steps += 1;
            if lo < self.opts.kp_start || steps > self.opts.max_steps {
                return Ok(None);
            }
        }
        for _ in 0..self.opts.max_steps {
            if self.acceptable(&s.with(Param::KP, lo * f))? {
                lo *= f;
            } else {
                break;
            }
        }
        let mut hi = lo * f;
        for _ in 0..30 {
            let mid = (lo * hi).sqrt();
            if self.acceptable(&s.with(Param::KP, mid))? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Some(s.with(Param::KP, lo)))
    }

    /// f_UG at [`Session::fit_kp`]; zero if no K_P is acceptable.
    fn reachable(&self, s: &Setting) -> Result<f64> {
        Ok(match self.fit_kp(s)? {
            Some(t) => self.margins(&t)?.f_ug.unwrap_or(0.0),
            None => 0.0,
        })
    }
}

fn infeasible(ev: &LoopEvaluator, s: Setting, trace: Vec<TraceStep>, why: &str) -> Result<TuneResult> {
    Ok(TuneResult {
        k_fast: s.k_fast,
        f_i_slow: s.f_i_slow,
        margins: ev.margins(&s.k_fast, s.f_i_slow)?,
        iterations: 0,
        converged: false,
        infeasible: Some(Infeasibility { binding_constraint: why.into() }),
        trace,
    })
}

fn key(s: &Setting) -> [i64; 3] {
    let q = |v: f64| (v.ln() * 1e4).round() as i64;
    [q(s.k_fast.k_p), q(s.k_fast.f_i), q(s.k_fast.f_d.unwrap_or(1.0))]
}

fn rel_change(a: &Setting, b: &Setting) -> f64 {
    [Param::KP, Param::FI, Param::FD]
        .iter()
        .map(|&p| (a.get(p) / b.get(p) - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Tune the fast PID against the loop model, then the slow integrator.
///
/// Prepare: from a weak lock (small K_P and f_I, no derivative) raise K_P
/// until oscillation and halve it, then the same for f_I, then a small K_P
/// raise. The derivative is switched on three decades above f_UG.
///
/// Optimize: sweeps of f_D (lowered until oscillation, then raised by
/// 50%), K_P and f_I (raised until oscillation, then halved). Each sweep
/// result is a candidate; it is kept when the bandwidth reachable from it
/// by a final K_P raise (bounded by the minimum phase margin) is at least
/// as good as the best so far, within `tie_tol`. Sweeping stops when no
/// parameter moved by more than `converge_tol`, the reachable bandwidth
/// stopped improving, or a setting repeats.
///
/// Finish: raise K_P in `final_step` increments while the loop stays
/// stable with φ_m ≥ `pm_min`, and trim if φ_m is still above `pm_max`.
pub fn autotune(cfg: &LoopConfig, opts: &TuneOptions) -> Result<TuneResult> {
    if !(opts.step > 1.0 && opts.backoff > 0.0 && opts.backoff < 1.0 && opts.final_step > 1.0) {
        return Err(Error::domain("tuning steps must satisfy step > 1, 0 < backoff < 1, final_step > 1"));
    }
    let ev = LoopEvaluator::new(cfg, ExecMode::Sequential)?;
    let mut ss = Session { ev: &ev, opts: *opts, trace: Vec::new(), run: 0 };

    let start = Setting { k_fast: Pid::new(opts.kp_start, opts.fi_start, None), f_i_slow: None };
    let v0 = ss.verdict(&start)?;
    ss.push(StepKind::Start, None, start, v0, None);
    if v0.is_oscillating() {
        return infeasible(&ev, start, ss.trace, "the weak lock at the minimum K_P already oscillates");
    }

    let mut s = ss.search(start, Param::KP, opts.step, opts.backoff)?;
    s = ss.search(s, Param::FI, opts.step, opts.backoff)?;
    s = ss.settle_integrator(s)?;
    let raised = s.with(Param::KP, s.k_fast.k_p * opts.final_step);
    let vr = ss.verdict(&raised)?;
    if !vr.is_oscillating() {
        s = raised;
        ss.push(StepKind::Raise, Some(Param::KP), s, vr, None);
    }
    let Some(f_ug) = ss.margins(&s)?.f_ug else {
        return infeasible(&ev, s, ss.trace, "no unity-gain crossing inside the analysis grid");
    };
    s = s.with(Param::FD, 1e3 * f_ug);
    let vd = ss.verdict(&s)?;
    ss.push(StepKind::EnableDerivative, Some(Param::FD), s, vd, None);

    let mut best = ss.reachable(&s)?;
    let mut seen = HashSet::new();
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_sweeps {
        iterations += 1;
        let before = s;
        let mut improved = false;
        for p in [Param::FD, Param::KP, Param::FI] {
            let cand = match p {
                Param::FD => ss.search(s, p, 1.0 / opts.step, opts.derivative_backoff)?,
                Param::FI => {
                    let c = ss.search(s, p, opts.step, opts.backoff)?;
                    ss.settle_integrator(c)?
                }
                _ => ss.search(s, p, opts.step, opts.backoff)?,
            };
            let reach = ss.reachable(&cand)?;
            let take = reach > 0.0 && reach >= best * (1.0 - opts.tie_tol);
            let verdict = ss.verdict(&cand)?;
            ss.push(if take { StepKind::Accept } else { StepKind::Reject }, Some(p), cand, verdict, Some(reach));
            if take {
                improved |= reach > best * (1.0 + 1e-3);
                best = best.max(reach);
                s = cand;
            }
        }
        if rel_change(&s, &before) <= opts.converge_tol || !improved {
            converged = true;
            break;
        }
        if !seen.insert(key(&s)) {
            break;
        }
    }

    // final K_P raise, after stepping down if the sweeps left K_P too high
    ss.run += 1;
    for _ in 0..opts.max_steps {
        if ss.acceptable(&s)? || s.k_fast.k_p / opts.final_step < opts.kp_start {
            break;
        }
        s = s.with(Param::KP, s.k_fast.k_p / opts.final_step);
        let v = ss.verdict(&s)?;
        ss.push(StepKind::Backoff, Some(Param::KP), s, v, None);
    }
    loop {
        let cand = s.with(Param::KP, s.k_fast.k_p * opts.final_step);
        if !ss.acceptable(&cand)? {
            break;
        }
        s = cand;
        let v = ss.verdict(&s)?;
        ss.push(StepKind::FinalRaise, Some(Param::KP), s, v, None);
    }
    let trim = 1.0 + (opts.final_step - 1.0) / 5.0;
    for _ in 0..opts.max_steps {
        let m = ss.margins(&s)?;
        if !m.phi_m.is_some_and(|p| p >= opts.pm_max) {
            break;
        }
        let cand = s.with(Param::KP, s.k_fast.k_p * trim);
        if !ss.acceptable(&cand)? {
            break;
        }
        s = cand;
        let v = ss.verdict(&s)?;
        ss.push(StepKind::Trim, Some(Param::KP), s, v, None);
    }

    if opts.tune_slow && cfg.has_slow_branch() {
        s = tune_slow(&mut ss, s)?;
    }

    let margins = ss.margins(&s)?;
    let in_window = margins.phi_m.is_some_and(|p| p > opts.pm_min && p < opts.pm_max);
    let why = if margins.is_oscillating() {
        Some("no stable setting found".to_string())
    } else if margins.f_ug.is_none() {
        Some("no unity-gain crossing inside the analysis grid".into())
    } else if !in_window {
        Some(format!("phase margin window ({}°, {}°) not reachable", opts.pm_min, opts.pm_max))
    } else if opts.require_low_frequency_phase && !margins.goals.low_frequency_phase {
        Some("∠α > -120° below f_UG/√10 not reachable".into())
    } else if opts.require_single_crossing && margins.unity_gain_crossings != 1 {
        Some("no setting with a single unity-gain crossing".into())
    } else {
        None
    };
    debug_assert!(why.is_some() || opts.admits(&margins));
    let infeasible = why.map(|binding_constraint| Infeasibility { binding_constraint });
    Ok(TuneResult {
        k_fast: s.k_fast,
        f_i_slow: s.f_i_slow,
        margins,
        iterations,
        converged,
        infeasible,
        trace: ss.trace,
    })
}

/// Slow integrator after the fast loop is set: raise until the combined
/// loop oscillates, halve, then halve further while the combined margins
/// leave the phase-margin window.
fn tune_slow(ss: &mut Session, s: Setting) -> Result<Setting> {
    let opts = ss.opts;
    let start = s.with(Param::FISlow, opts.fi_slow_start);
    let mut t = ss.search(start, Param::FISlow, opts.step, opts.backoff)?;
    ss.run += 1;
    for _ in 0..60 {
        let m = ss.margins(&t)?;
        if opts.admits(&m) {
            break;
        }
        t = t.with(Param::FISlow, t.get(Param::FISlow) * opts.backoff);
        let v = ss.verdict(&t)?;
        ss.push(StepKind::Backoff, Some(Param::FISlow), t, v, None);
    }
    Ok(t)
}

/// [`autotune`] on the fast branch only; the slow branch is left untouched.
pub fn autotune_fast(cfg: &LoopConfig, opts: &TuneOptions) -> Result<TuneResult> {
    autotune(cfg, &TuneOptions { tune_slow: false, ..*opts })
}

/// Re-evaluate every recorded step; true if all verdicts are reproduced.
pub fn replay(cfg: &LoopConfig, result: &TuneResult) -> Result<bool> {
    let ev = LoopEvaluator::new(cfg, ExecMode::Sequential)?;
    for step in &result.trace {
        let v = Verdict::of(&ev.margins(&step.setting.k_fast, step.setting.f_i_slow)?);
        if v != step.verdict {
            return Ok(false);
        }
    }
    let last = ev.margins(&result.k_fast, result.f_i_slow)?;
    Ok(last == result.margins)
}

/// Log-spaced axis for the exhaustive search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.lo];
        }
        let r = (self.hi / self.lo).ln();
        (0..self.n).map(|i| self.lo * (r * i as f64 / (self.n - 1) as f64).exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBest {
    pub k_fast: Pid,
    pub margins: MarginsReport,
    pub evaluated: usize,
}

/// Exhaustive search over (K_P, f_I, f_D) for the highest f_UG among the
/// settings `policy` admits (see [`TuneOptions::admits`]).
/// Ties keep the first point in (K_P, f_I, f_D) order, so both execution
/// modes pick the same point.
pub fn grid_search(
    cfg: &LoopConfig,
    kp: Axis,
    fi: Axis,
    fd: Axis,
    policy: &TuneOptions,
    mode: ExecMode,
) -> Result<Option<GridBest>> {
    let ev = LoopEvaluator::new(cfg, mode)?;
    let (kv, iv, dv) = (kp.values(), fi.values(), fd.values());
    let n = kv.len() * iv.len() * dv.len();
    let results = par::map_indexed(n, mode, |idx| {
        let (a, rest) = (idx / (iv.len() * dv.len()), idx % (iv.len() * dv.len()));
        let pid = Pid::new(kv[a], iv[rest / dv.len()], Some(dv[rest % dv.len()]));
        ev.margins(&pid, None).map(|m| (pid, m))
    });
    let mut best: Option<GridBest> = None;
    for r in results {
        let (pid, m) = r?;
        let Some(fu) = m.f_ug.filter(|_| policy.admits(&m)) else { continue };
        if best.as_ref().is_none_or(|b| fu > b.margins.f_ug.unwrap_or(0.0)) {
            best = Some(GridBest { k_fast: pid, margins: m, evaluated: n });
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub name: String,
    pub phase_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseBudget {
    #[serde(rename = "f_ref_Hz")]
    pub f_ref: f64,
    pub entries: Vec<BudgetEntry>,
    pub sum_deg: f64,
    pub measured_deg: f64,
    /// measured - sum.
    pub residual_deg: f64,
}

impl PhaseBudget {
    pub fn from_entries(entries: Vec<BudgetEntry>, f_ref: f64, measured_deg: f64) -> Self {
        let sum_deg = entries.iter().map(|e| e.phase_deg).sum();
        PhaseBudget { f_ref, entries, sum_deg, measured_deg, residual_deg: measured_deg - sum_deg }
    }
}

/// Phase of one component at `f_ref`, continued from three decades below
/// (or from the bottom of a tabulated range) so that long delays are not
/// folded back into (-180°, 180°].
pub fn component_phase_deg(model: &TransferModel, f_ref: f64) -> Result<f64> {
    if !(f_ref > 0.0) {
        return Err(Error::domain("reference frequency must be positive"));
    }
    let (lo, _) = model.valid_range();
    let start = (f_ref * 1e-3).max(lo);
    if start >= f_ref {
        return Ok(model.eval(f_ref)?.arg().to_degrees());
    }
    let t = tfcore::bode_on(model, tfcore::log_grid(start, f_ref, 50)?, ExecMode::Sequential)?;
    Ok(*t.phase_deg().last().expect("non-empty grid"))
}

pub fn phase_budget(components: &[(String, TransferModel)], f_ref: f64, measured_deg: f64) -> Result<PhaseBudget> {
    let mut entries = Vec::with_capacity(components.len());
    for (name, m) in components {
        entries.push(BudgetEntry { name: name.clone(), phase_deg: component_phase_deg(m, f_ref)? });
    }
    Ok(PhaseBudget::from_entries(entries, f_ref, measured_deg))
}

/// The fast-branch components of a loop, in the order they are usually
/// tabulated. k_e is a positive real gain and contributes no phase.
pub fn loop_components(cfg: &LoopConfig) -> Result<Vec<(String, TransferModel)>> {
    Ok(vec![
        ("K_fast".into(), cfg.k_fast_model()),
        ("G_fast".into(), cfg.g_fast.clone()),
        ("C".into(), cfg.cavity()),
        ("DP".into(), tfcore::compose(vec![cfg.demod.clone(), cfg.pd.clone()])?),
        ("T".into(), TransferModel::delay(cfg.tau_l)),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowFreqCheck {
    pub pass: bool,
    #[serde(rename = "band_Hz")]
    pub band: (f64, f64),
    /// Span of the points that broke the tolerance.
    #[serde(rename = "offending_band_Hz")]
    pub offending: Option<(f64, f64)>,
    #[serde(rename = "worst_gain_dB")]
    pub worst_gain_db: f64,
    pub worst_phase_deg: f64,
}

pub const LOW_FREQ_GAIN_TOL_DB: f64 = 3.0;
pub const LOW_FREQ_PHASE_TOL_DEG: f64 = 30.0;

/// y5/m6 should be ≈ 1 over the decade below f_180/10: gain within ±3 dB
/// and phase within ±30°.
pub fn low_freq_excess_check(closed: &BodeTrace, f_180cl: f64) -> Result<LowFreqCheck> {
    if !(f_180cl > 0.0) {
        return Err(Error::domain("f_180 must be positive"));
    }
    let band = (f_180cl / 100.0, f_180cl / 10.0);
    let f = closed.freqs();
    if f[0] > band.0 || f[f.len() - 1] < band.1 {
        return Err(Error::GridMismatch(format!(
            "trace [{}, {}] Hz does not cover [{}, {}] Hz",
            f[0],
            f[f.len() - 1],
            band.0,
            band.1
        )));
    }
    let mut offending: Option<(f64, f64)> = None;
    let (mut wg, mut wp) = (0.0f64, 0.0f64);
    for (i, &fi) in f.iter().enumerate() {
        if fi < band.0 || fi > band.1 {
            continue;
        }
        let (g, p) = (closed.gain_db()[i], closed.phase_deg()[i]);
        if g.abs() > wg.abs() {
            wg = g;
        }
        if p.abs() > wp.abs() {
            wp = p;
        }
        if g.abs() > LOW_FREQ_GAIN_TOL_DB || p.abs() > LOW_FREQ_PHASE_TOL_DEG {
            offending = Some(match offending {
                None => (fi, fi),
                Some((a, _)) => (a, fi),
            });
        }
    }
    Ok(LowFreqCheck { pass: offending.is_none(), band, offending, worst_gain_db: wg, worst_phase_deg: wp })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavityAdvice {
    #[serde(rename = "delta_nu_c_min_Hz")]
    pub delta_nu_c_min: f64,
    #[serde(rename = "delta_nu_c_max_Hz")]
    pub delta_nu_c_max: f64,
    pub empty: bool,
    pub rationale: String,
}

/// Linewidth range that keeps the cavity pole δν_c/2 half a decade above
/// the slow unity-gain point and half a decade below the fast one.
pub fn cavity_advisor(f_ug_fast: f64, f_ug_slow: f64) -> Result<CavityAdvice> {
    if !(f_ug_slow > 0.0) || !(f_ug_fast > 0.0) {
        return Err(Error::domain("unity-gain frequencies must be positive"));
    }
    if f_ug_slow >= f_ug_fast {
        return Err(Error::domain("the slow unity-gain frequency must be below the fast one"));
    }
    let r = 10f64.sqrt();
    let lo = 2.0 * r * f_ug_slow;
    let hi = 2.0 * f_ug_fast / r;
    let empty = hi - lo <= 1e-12 * hi;
    let mut rationale = String::from(
        "With the cavity pole below the fast unity-gain point the cavity acts as an extra \
         integrator inside the fast loop and raises its low-frequency gain. Keeping the pole \
         above the slow unity-gain point stops the cavity lag from eating the slow loop's \
         phase margin. A narrower cavity also gives a steeper discriminator slope.",
    );
    if empty {
        rationale.push_str(" The two unity-gain points are less than a decade apart, so no linewidth satisfies both.");
    }
    Ok(CavityAdvice { delta_nu_c_min: lo, delta_nu_c_max: hi, empty, rationale })
}
