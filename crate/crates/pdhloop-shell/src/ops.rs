//! Operations behind both the CLI subcommands and the HTTP endpoints.

use pdhloop::ingest::{self, RingdownFit};
use pdhloop::linewidth::{self, LinewidthReport, PsdSource, PsdTrace, Sy1Result};
use pdhloop::loopan::{self, Branch, MarginsReport};
use pdhloop::tfcore::{BodeTrace, Tabulated};
use pdhloop::tuner::{self, PhaseBudget, TuneOptions, TuneResult};
use pdhloop::ExecMode;
use serde::{Deserialize, Serialize};

use crate::config::{self, ProjectConfig};
use crate::error::{ShellError, ShellResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub open_loop: BodeTrace,
    /// y5/m6 = α/(1+α).
    pub closed_loop: BodeTrace,
    pub margins: MarginsReport,
    #[serde(rename = "k_e_V_per_Hz")]
    pub k_e: f64,
    /// In-loop laser frequency noise S_y1, when a noise model is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psd: Option<PsdTrace>,
    /// β-separation linewidth of the locked laser over the analysis grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linewidth: Option<LinewidthReport>,
    /// Linewidth of the free-running noise model over the same band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linewidth_free_running: Option<LinewidthReport>,
}

pub fn evaluate(cfg: &ProjectConfig, mode: ExecMode) -> ShellResult<EvaluateResponse> {
    let lc = &cfg.loop_cfg;
    let open_loop = loopan::open_loop_trace(lc, Branch::Both, mode)?;
    let closed_loop = loopan::closed_trace_from_open(&open_loop)?;
    let margins = loopan::margins(&open_loop);
    let k_e = lc.k_e()?;
    let (mut psd, mut linewidth, mut free) = (None, None, None);
    if let Some(noise) = &cfg.noise {
        let s_n4 = cfg.s_n4.unwrap_or(0.0);
        let n = *noise;
        let s = loopan::closed_loop_psd(
            &open_loop,
            &move |f| n.h_minus1 / f + n.h0,
            &move |_| s_n4,
            k_e,
            &lc.cavity(),
            mode,
        )?;
        let (lo, hi) = (noise.f_low.max(lc.grid.f_min), lc.grid.f_max);
        if lo < hi {
            linewidth = Some(linewidth::beta_separation_linewidth(PsdSource::Trace(&s), lo, hi)?);
            free = Some(linewidth::beta_separation_linewidth(PsdSource::Model(noise), lo, hi)?);
        }
        psd = Some(s);
    }
    Ok(EvaluateResponse { open_loop, closed_loop, margins, k_e, psd, linewidth, linewidth_free_running: free })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneRequest {
    pub config: ProjectConfig,
    #[serde(default)]
    pub options: TuneOptions,
}

pub fn tune(cfg: &ProjectConfig, opts: &TuneOptions) -> ShellResult<TuneResult> {
    config::check_offset_nulled(&cfg.loop_cfg, "loop")?;
    validate_tune_options(opts)?;
    Ok(tuner::autotune(&cfg.loop_cfg, opts)?)
}

fn validate_tune_options(o: &TuneOptions) -> ShellResult<()> {
    let gt1 = [("options.step", o.step), ("options.derivative_backoff", o.derivative_backoff), ("options.final_step", o.final_step)];
    for (p, v) in gt1 {
        if !(v > 1.0 && v.is_finite()) {
            return Err(ShellError::invalid(p, format!("must be a finite factor above 1, got {v}")));
        }
    }
    if !(o.backoff > 0.0 && o.backoff < 1.0) {
        return Err(ShellError::invalid("options.backoff", "must lie in (0, 1)"));
    }
    if !(o.kp_start > 0.0) || !(o.fi_start > 0.0) || !(o.fi_slow_start > 0.0) {
        return Err(ShellError::invalid("options.kp_start", "starting values must be positive"));
    }
    if !(o.pm_min < o.pm_max) {
        return Err(ShellError::invalid("options.phi_m_max_deg", "must exceed phi_m_min_deg"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    /// The trace is α itself.
    #[default]
    Open,
    /// The trace is y5/m6 and is converted with t/(1-t).
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestBodeResponse {
    pub trace: BodeTrace,
    pub open_loop: BodeTrace,
    pub margins: MarginsReport,
}

pub fn ingest_bode(csv: &str, kind: TraceKind) -> ShellResult<IngestBodeResponse> {
    let trace = ingest::parse_bode_csv(csv.as_bytes())?;
    let open_loop = match kind {
        TraceKind::Open => trace.clone(),
        TraceKind::Closed => loopan::open_trace_from_closed(&trace)?,
    };
    let margins = loopan::margins(&open_loop);
    Ok(IngestBodeResponse { trace, open_loop, margins })
}

pub fn ingest_ringdown(csv: &str, exclude_s: Option<f64>) -> ShellResult<RingdownFit> {
    if let Some(e) = exclude_s {
        if !(e >= 0.0 && e.is_finite()) {
            return Err(ShellError::invalid("exclude_s", "must be non-negative"));
        }
    }
    let tr = ingest::parse_ringdown_csv(csv.as_bytes())?;
    Ok(ingest::fit_ringdown(&tr, exclude_s)?)
}

/// Phase budget of the fast branch at `f_ref`, against the measured open-loop
/// phase. Without an explicit reference the unity-gain point of the measured
/// loop is used.
pub fn budget(cfg: &ProjectConfig, measured_open: Option<&BodeTrace>, f_ref: Option<f64>, measured_deg: Option<f64>) -> ShellResult<PhaseBudget> {
    let f_ref = match (f_ref, measured_open) {
        (Some(f), _) => f,
        (None, Some(t)) => loopan::margins(t)
            .f_ug
            .ok_or_else(|| ShellError::invalid("measured.closed_loop_bode", "measured loop has no unity-gain crossing"))?,
        (None, None) => return Err(ShellError::invalid("f_ref_Hz", "give a reference frequency or a measured trace")),
    };
    if !(f_ref > 0.0) {
        return Err(ShellError::invalid("f_ref_Hz", "must be positive"));
    }
    let measured = match (measured_deg, measured_open) {
        (Some(p), _) => p,
        (None, Some(t)) => Tabulated::new(t.clone()).interp(f_ref)?.1,
        (None, None) => return Err(ShellError::invalid("measured_phase_deg", "give the measured phase or a measured trace")),
    };
    Ok(tuner::phase_budget(&tuner::loop_components(&cfg.loop_cfg)?, f_ref, measured)?)
}

pub fn sy1_from_sy4(cfg: &ProjectConfig, s_y4: &PsdTrace, baseline: &PsdTrace) -> ShellResult<Sy1Result> {
    let lc = &cfg.loop_cfg;
    Ok(linewidth::sy4_to_sy1(
        s_y4,
        baseline,
        lc.discriminator.modulation.omega_over_2pi,
        lc.k_e()?,
        &lc.pd,
        &lc.cavity(),
    )?)
}
