//! Project configuration documents and their validation.

use std::path::{Path, PathBuf};

use pdhloop::linewidth::NoiseModel;
use pdhloop::loopan::LoopConfig;
use pdhloop::tfcore::{Pid, TransferModel};
use serde::{Deserialize, Serialize};

use crate::error::{ShellError, ShellResult};
use crate::json;

pub const SCHEMA_VERSION: u32 = 1;

/// Largest evaluation grid accepted from a document.
pub const MAX_GRID_POINTS: usize = 200_000;

/// Files with measured traces, relative to the configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredFiles {
    /// VNA trace of y5/m6.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_loop_bode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ringdown: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_y4: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_y4_baseline: Option<String>,
    /// Response of discriminator, fast actuator and delay measured together.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_fast_bode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lockin_chain_bode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mx1_calibration_bode: Option<String>,
}

impl MeasuredFiles {
    pub fn is_empty(&self) -> bool {
        *self == MeasuredFiles::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    /// Free-running laser noise; enables the PSD and linewidth outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseModel>,
    /// Discriminator noise at the error signal, V²/Hz.
    #[serde(rename = "s_n4_V2_per_Hz", default, skip_serializing_if = "Option::is_none")]
    pub s_n4: Option<f64>,
    #[serde(default, skip_serializing_if = "MeasuredFiles::is_empty")]
    pub measured: MeasuredFiles,
}

impl ProjectConfig {
    pub fn new(loop_cfg: LoopConfig) -> Self {
        ProjectConfig {
            schema_version: SCHEMA_VERSION,
            label: None,
            loop_cfg,
            noise: None,
            s_n4: None,
            measured: MeasuredFiles::default(),
        }
    }

    pub fn parse(text: &str) -> ShellResult<Self> {
        let cfg: ProjectConfig = json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> ShellResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ShellError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> ShellResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ShellError::invalid(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        validate_loop(&self.loop_cfg, "loop")?;
        if let Some(n) = &self.noise {
            nonneg("noise.h_minus1_Hz2", n.h_minus1)?;
            nonneg("noise.h0_Hz2_per_Hz", n.h0)?;
            positive("noise.f_low_Hz", n.f_low)?;
        }
        if let Some(s) = self.s_n4 {
            nonneg("s_n4_V2_per_Hz", s)?;
        }
        Ok(())
    }
}

/// Resolve a measured-file reference against the configuration's directory.
pub fn resolve(config_path: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn positive(path: &str, v: f64) -> ShellResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ShellError::invalid(path, format!("must be positive and finite, got {v}")))
    }
}

fn nonneg(path: &str, v: f64) -> ShellResult<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ShellError::invalid(path, format!("must be non-negative and finite, got {v}")))
    }
}

fn order(path: &str, n: u32) -> ShellResult<()> {
    if (1..=64).contains(&n) {
        Ok(())
    } else {
        Err(ShellError::invalid(path, format!("order must be in 1..=64, got {n}")))
    }
}

pub fn validate_pid(p: &Pid, path: &str) -> ShellResult<()> {
    positive(&format!("{path}.k_p"), p.k_p)?;
    nonneg(&format!("{path}.f_i_Hz"), p.f_i)?;
    if let Some(d) = p.f_d {
        positive(&format!("{path}.f_d_Hz"), d)?;
    }
    Ok(())
}

pub fn validate_model(m: &TransferModel, path: &str) -> ShellResult<()> {
    use TransferModel::*;
    match m {
        Identity => Ok(()),
        Gain { k } => {
            if k.is_finite() {
                Ok(())
            } else {
                Err(ShellError::invalid(format!("{path}.k"), "must be finite"))
            }
        }
        Pid(p) => validate_pid(p, path),
        Integrator { f_i } => positive(&format!("{path}.f_i_Hz"), *f_i),
        Lowpass { order: n, f0 } => {
            order(&format!("{path}.order"), *n)?;
            positive(&format!("{path}.f0_Hz"), *f0)
        }
        Highpass { f_hp } => positive(&format!("{path}.f_hp_Hz"), *f_hp),
        Delay { tau } => nonneg(&format!("{path}.tau_s"), *tau),
        Cavity { delta_nu_c } => positive(&format!("{path}.delta_nu_c_Hz"), *delta_nu_c),
        PdLockin { order: n, f_pd, omega_over_2pi } => {
            order(&format!("{path}.order"), *n)?;
            positive(&format!("{path}.f_pd_Hz"), *f_pd)?;
            positive(&format!("{path}.omega_over_2pi_Hz"), *omega_over_2pi)
        }
        Product { factors } => {
            for (i, f) in factors.iter().enumerate() {
                validate_model(f, &format!("{path}.factors[{i}]"))?;
            }
            Ok(())
        }
        Sum { terms } => {
            if terms.is_empty() {
                return Err(ShellError::invalid(format!("{path}.terms"), "must not be empty"));
            }
            for (i, t) in terms.iter().enumerate() {
                validate_model(t, &format!("{path}.terms[{i}]"))?;
            }
            Ok(())
        }
        Tabulated(_) => Ok(()),
    }
}

pub fn validate_loop(c: &LoopConfig, path: &str) -> ShellResult<()> {
    let d = &c.discriminator;
    let dp = format!("{path}.discriminator");
    positive(&format!("{dp}.modulation.beta_rad"), d.modulation.beta)?;
    positive(&format!("{dp}.modulation.omega_over_2pi_Hz"), d.modulation.omega_over_2pi)?;
    positive(&format!("{dp}.detector.responsivity_A_per_W"), d.detector.responsivity)?;
    positive(&format!("{dp}.detector.transimpedance_V_per_A"), d.detector.g_tr)?;
    nonneg(&format!("{dp}.detector.nep_W_per_rtHz"), d.detector.nep)?;
    positive(&format!("{dp}.detector.f_pd_Hz"), d.detector.f_pd)?;
    order(&format!("{dp}.detector.order"), d.detector.order)?;
    positive(&format!("{dp}.delta_nu_c_Hz"), d.delta_nu_c)?;
    nonneg(&format!("{dp}.p_pd_W"), d.p_pd)?;
    positive(&format!("{dp}.f_m_Hz"), d.f_m)?;
    order(&format!("{dp}.lp_order"), d.lp_order)?;
    if !d.offset.is_finite() {
        return Err(ShellError::invalid(format!("{dp}.offset_V"), "must be finite"));
    }
    if let Some(k) = c.k_e_measured {
        positive(&format!("{path}.k_e_V_per_Hz"), k)?;
    } else if d.p_pd == 0.0 {
        return Err(ShellError::invalid(
            format!("{dp}.p_pd_W"),
            "zero power gives no discriminator slope; set p_pd_W or k_e_V_per_Hz",
        ));
    }
    validate_pid(&c.k_fast, &format!("{path}.k_fast"))?;
    validate_model(&c.k_fast_rolloff, &format!("{path}.k_fast_rolloff"))?;
    if let Some(f) = c.f_i_slow {
        positive(&format!("{path}.f_i_slow_Hz"), f)?;
    }
    validate_model(&c.g_fast, &format!("{path}.g_fast"))?;
    if let Some(g) = &c.g_slow {
        validate_model(g, &format!("{path}.g_slow"))?;
    }
    nonneg(&format!("{path}.tau_l_s"), c.tau_l)?;
    validate_model(&c.demod, &format!("{path}.demod"))?;
    validate_model(&c.pd, &format!("{path}.pd"))?;
    let g = &c.grid;
    positive(&format!("{path}.grid.f_min_Hz"), g.f_min)?;
    positive(&format!("{path}.grid.f_max_Hz"), g.f_max)?;
    if g.f_max <= g.f_min {
        return Err(ShellError::invalid(format!("{path}.grid.f_max_Hz"), "must exceed f_min_Hz"));
    }
    if g.points_per_decade == 0 {
        return Err(ShellError::invalid(format!("{path}.grid.points_per_decade"), "must be at least 1"));
    }
    let n = (g.f_max / g.f_min).log10() * g.points_per_decade as f64;
    if n > MAX_GRID_POINTS as f64 {
        return Err(ShellError::invalid(
            format!("{path}.grid.points_per_decade"),
            format!("grid would have {n:.0} points, limit is {MAX_GRID_POINTS}"),
        ));
    }
    Ok(())
}

/// Tuning starts from a nulled error signal: |offset| must stay below 1 %
/// of the swing at the edge of the linear region, k_e·δν_c/2.
pub fn check_offset_nulled(c: &LoopConfig, path: &str) -> ShellResult<()> {
    let k_e = c.k_e()?;
    let limit = 0.01 * k_e * c.discriminator.delta_nu_c / 2.0;
    if c.discriminator.offset.abs() > limit {
        return Err(ShellError::invalid(
            format!("{path}.discriminator.offset_V"),
            format!("error-signal offset {} V exceeds {limit:.3e} V; null it before tuning", c.discriminator.offset),
        ));
    }
    Ok(())
}
