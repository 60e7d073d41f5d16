//! Synthetic measurement fixtures for the reference configurations.
//!
//! Everything here is generated from component models, so the files are
//! reproducible bit for bit; `gen-fixtures` writes them and the tests check
//! the shipped copies against a fresh generation.

use std::path::Path;

use pdhloop::ingest::{self, RingdownTrace};
use pdhloop::linewidth::{self, PsdTrace};
use pdhloop::loopan::{self, Branch};
use pdhloop::tfcore::{self, BodeTrace, GridSpec, TransferModel};
use pdhloop::{presets, ExecMode};

use crate::config::{MeasuredFiles, ProjectConfig};
use crate::error::ShellResult;
use crate::json;

pub const RINGDOWN_SEED: u64 = 256;
/// Resolution bandwidth recorded with the synthetic RF spectra.
pub const SPECTRUM_RBW_HZ: f64 = 1e3;

fn bode_csv(t: &BodeTrace) -> ShellResult<String> {
    let mut buf = Vec::new();
    ingest::write_bode_csv(t, &mut buf)?;
    Ok(String::from_utf8(buf).expect("utf-8"))
}

fn psd_csv(t: &PsdTrace) -> ShellResult<String> {
    let mut buf = Vec::new();
    ingest::write_psd_csv(t, &mut buf)?;
    Ok(String::from_utf8(buf).expect("utf-8"))
}

fn ringdown_csv(t: &RingdownTrace) -> ShellResult<String> {
    let mut buf = Vec::new();
    ingest::write_ringdown_csv(t, &mut buf)?;
    Ok(String::from_utf8(buf).expect("utf-8"))
}

fn trace(model: &TransferModel, label: &str, lo: f64, hi: f64, ppd: u32) -> ShellResult<BodeTrace> {
    let mut t = tfcore::bode_grid(model, &GridSpec::new(lo, hi, ppd), ExecMode::Sequential)?;
    t.label = label.into();
    Ok(t)
}

pub fn project(n: u8) -> ProjectConfig {
    let mut p = ProjectConfig::new(presets::config(n).expect("configurations 1-3"));
    p.label = Some(format!("configuration {n}"));
    p.noise = Some(presets::laser_noise());
    p.s_n4 = Some(presets::S_N4);
    p.measured.closed_loop_bode = Some(format!("config{n}_closed_loop.csv"));
    if n == 3 {
        p.measured = MeasuredFiles {
            closed_loop_bode: Some("config3_closed_loop.csv".into()),
            ringdown: Some("ringdown.csv".into()),
            s_y4: Some("s_y4.csv".into()),
            s_y4_baseline: Some("s_y4_baseline.csv".into()),
            g_fast_bode: Some("g_fast_measured.csv".into()),
            lockin_chain_bode: Some("lockin_chain_measured.csv".into()),
            mx1_calibration_bode: Some("mx1_calibration.csv".into()),
        };
    }
    p
}

/// y5/m6 of configuration `n` on its analysis grid.
pub fn closed_loop(n: u8) -> ShellResult<BodeTrace> {
    let cfg = presets::config(n).expect("configurations 1-3");
    let open = loopan::open_loop_trace(&cfg, Branch::Both, ExecMode::Sequential)?;
    let mut t = loopan::closed_trace_from_open(&open)?;
    t.label = format!("y5/m6 configuration {n}");
    Ok(t)
}

/// In-loop S_y1 of configuration 3 and the RF spectrum it produces.
pub fn spectra() -> ShellResult<(PsdTrace, PsdTrace, PsdTrace)> {
    let cfg = presets::config(3).expect("configuration 3");
    let offsets = tfcore::log_grid(1e3, 1e7, 50)?;
    let alpha = tfcore::bode_on(&loopan::assemble_open_loop(&cfg, Branch::Both)?, offsets.clone(), ExecMode::Sequential)?;
    let noise = presets::laser_noise();
    let k_e = cfg.k_e()?;
    let s_y1 = loopan::closed_loop_psd(
        &alpha,
        &move |f| noise.h_minus1 / f + noise.h0,
        &|_| presets::S_N4,
        k_e,
        &cfg.cavity(),
        ExecMode::Sequential,
    )?;
    let lookup = |f: f64| s_y1.interp(f).expect("offset on grid");
    let (s_y4, base) = linewidth::synthesize_sy4(
        &lookup,
        &|_| presets::S_Y4_BASELINE,
        &offsets,
        presets::OMEGA_OVER_2PI,
        k_e,
        &cfg.pd,
        &cfg.cavity(),
        Some(SPECTRUM_RBW_HZ),
    )?;
    Ok((s_y1, s_y4, base))
}

/// Photodetector response for the order fit: three poles at 150 MHz and a
/// weak parasitic pole at 2 GHz.
pub fn pd_response_model() -> TransferModel {
    let mut f = vec![TransferModel::lowpass(1, 150e6); 3];
    f.push(TransferModel::lowpass(1, 2e9));
    TransferModel::Product { factors: f }
}

/// File name and contents of every fixture.
pub fn all() -> ShellResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for n in 1..=3u8 {
        out.push((format!("config{n}.json"), json::to_string(&project(n))));
        out.push((format!("config{n}_closed_loop.csv"), bode_csv(&closed_loop(n)?)?));
    }
    let mut plant = ProjectConfig::new(presets::tuner_plant());
    plant.label = Some("tuner test plant".into());
    out.push(("tuner_plant.json".into(), json::to_string(&plant)));
    let mut bad = ProjectConfig::new(presets::infeasible_plant());
    bad.label = Some("delay-dominated plant".into());
    out.push(("infeasible_plant.json".into(), json::to_string(&bad)));

    out.push(("ringdown.csv".into(), ringdown_csv(&presets::ringdown().generate(RINGDOWN_SEED)?)?));

    let (_, s_y4, base) = spectra()?;
    out.push(("s_y4.csv".into(), psd_csv(&s_y4)?));
    out.push(("s_y4_baseline.csv".into(), psd_csv(&base)?));

    let cfg = presets::config(3).expect("configuration 3");
    let gm = tfcore::compose(vec![cfg.discriminator_model()?, cfg.g_fast.clone(), TransferModel::delay(cfg.tau_l)])?;
    out.push(("g_fast_measured.csv".into(), bode_csv(&trace(&gm, "discriminator x G_fast x delay", 1e3, 1e7, 100)?)?));

    let chain = tfcore::compose(vec![
        presets::mx1_calibration(),
        TransferModel::delay(presets::chain_fiber_delay()),
        presets::lockin_chain_true(),
    ])?;
    out.push(("lockin_chain_measured.csv".into(), bode_csv(&trace(&chain, "demodulation chain", 1e4, 1e7, 100)?)?));
    out.push(("mx1_calibration.csv".into(), bode_csv(&trace(&presets::mx1_calibration(), "MX1", 1e3, 3e7, 100)?)?));
    for (name, m) in presets::lockin_chain_parts() {
        out.push((format!("lockin_part_{name}.csv"), bode_csv(&trace(&m, &name, 1e4, 1e7, 100)?)?));
    }
    out.push(("pd_response.csv".into(), bode_csv(&trace(&pd_response_model(), "photodetector", 1e6, 3e8, 50)?)?));
    Ok(out)
}

pub fn write_all(dir: &Path) -> ShellResult<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (name, text) in all()? {
        std::fs::write(dir.join(&name), text)?;
        names.push(name);
    }
    Ok(names)
}
