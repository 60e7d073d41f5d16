//! Command-line front end.

use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pdhloop::ingest;
use pdhloop::linewidth::{self, NoiseModel, PsdSource};
use pdhloop::loopan::{self, Branch};
use pdhloop::tfcore::{self, BodeTrace, GridSpec, TransferModel};
use pdhloop::tuner::{self, TuneOptions};
use pdhloop::ExecMode;
use serde::Serialize;
use serde_json::Value;

use crate::config::{self, ProjectConfig};
use crate::error::{ShellError, ShellResult};
use crate::json;
use crate::ops;

#[derive(Parser, Debug)]
#[command(name = "pdhloop", version, about = "Model, analyze and tune PDH laser-lock feedback loops")]
pub struct Cli {
    /// Emit JSON documents instead of human-readable tables.
    #[arg(long, global = true)]
    pub json: bool,
    /// Evaluate on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Frequency response of a model or of a configured loop, as CSV.
    Bode(BodeArgs),
    /// Stability margins of a loop configuration or a measured trace.
    Margins(MarginsArgs),
    /// Convert a measured y5/m6 trace to the open loop α.
    #[command(name = "closed2open")]
    Closed2Open(Closed2OpenArgs),
    /// Run the autotuner on a configuration.
    Tune(TuneArgs),
    /// Phase budget of the fast branch against the measured open-loop phase.
    Budget(BudgetArgs),
    /// Fit a cavity ring-down trace.
    Ringdown(RingdownArgs),
    /// Convert an RF spectrum S_y4 into frequency noise S_y1.
    Psd(PsdArgs),
    /// β-separation linewidth of a PSD trace or noise model.
    Linewidth(LinewidthArgs),
    /// Cavity linewidth range that suits the branch bandwidths.
    AdviseCavity(AdviseArgs),
    /// Run the local HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long, default_value_t = 10.0)]
    pub f_min: f64,
    #[arg(long, default_value_t = 1e7)]
    pub f_max: f64,
    #[arg(long, default_value_t = 100)]
    pub ppd: u32,
}

#[derive(Args, Debug)]
pub struct BodeArgs {
    /// `identity`, inline JSON, or a path to a JSON transfer model.
    #[arg(long, conflicts_with = "config")]
    pub model: Option<String>,
    /// Loop configuration; the open loop is evaluated on its grid.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BranchArg::Both)]
    pub branch: BranchArg,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum BranchArg {
    Fast,
    Slow,
    Both,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Fast => Branch::Fast,
            BranchArg::Slow => Branch::Slow,
            BranchArg::Both => Branch::Both,
        }
    }
}

#[derive(Args, Debug)]
pub struct MarginsArgs {
    #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
    pub config: Option<PathBuf>,
    /// Bode CSV of the open loop (or of y5/m6 with --closed).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, requires = "trace")]
    pub closed: bool,
}

#[derive(Args, Debug)]
pub struct Closed2OpenArgs {
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    pub config: PathBuf,
    /// JSON file with tuning options.
    #[arg(long)]
    pub options: Option<PathBuf>,
    /// Leave the slow branch as configured.
    #[arg(long)]
    pub fast_only: bool,
}

#[derive(Args, Debug)]
pub struct BudgetArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub f_ref: Option<f64>,
    /// Measured ∠α at the reference; otherwise read from measured.closed_loop_bode.
    #[arg(long, allow_negative_numbers = true)]
    pub measured_phase_deg: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RingdownArgs {
    pub input: PathBuf,
    /// Length of the initial transient to skip, seconds.
    #[arg(long)]
    pub exclude_s: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PsdArgs {
    pub s_y4: PathBuf,
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LinewidthArgs {
    #[arg(long, conflicts_with_all = ["h_minus1", "h0", "config"])]
    pub psd: Option<PathBuf>,
    /// Take the noise model from a configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub h_minus1: Option<f64>,
    #[arg(long)]
    pub h0: Option<f64>,
    #[arg(long)]
    pub f_low: Option<f64>,
    #[arg(long)]
    pub f_high: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AdviseArgs {
    #[arg(long)]
    pub f_ug_fast: f64,
    #[arg(long)]
    pub f_ug_slow: f64,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8731)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
    /// Directory for named session documents.
    #[arg(long, default_value = "pdhloop-sessions")]
    pub workdir: PathBuf,
}

fn read(path: &Path) -> ShellResult<String> {
    std::fs::read_to_string(path).map_err(|e| ShellError::Io(format!("{}: {e}", path.display())))
}

fn read_bode(path: &Path) -> ShellResult<BodeTrace> {
    ingest::parse_bode_csv(read(path)?.as_bytes()).map_err(|e| ShellError::Io(format!("{}: {e}", path.display())))
}

fn parse_model(spec: &str) -> ShellResult<TransferModel> {
    let text = match spec.trim() {
        "identity" => return Ok(TransferModel::Identity),
        s if s.starts_with('{') => s.to_string(),
        s => read(Path::new(s))?,
    };
    let m: TransferModel = json::from_str(&text)?;
    config::validate_model(&m, "model")?;
    Ok(m)
}

fn emit_csv(out: &mut dyn Write, dest: &Option<PathBuf>, write: impl Fn(&mut Vec<u8>) -> pdhloop::Result<()>) -> ShellResult<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    match dest {
        Some(p) => std::fs::write(p, buf).map_err(|e| ShellError::Io(format!("{}: {e}", p.display()))),
        None => out.write_all(&buf).map_err(Into::into),
    }
}

/// Six significant digits, fixed or scientific by magnitude.
fn short(x: f64) -> String {
    if x == 0.0 || (1e-3..1e7).contains(&x.abs()) {
        let digits = if x == 0.0 { 0 } else { (5 - x.abs().log10().floor() as i32).max(0) as usize };
        let s = format!("{x:.digits$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

/// Flatten a JSON document into `key: value` lines; long arrays are summarised.
fn human(v: &Value) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, x, out);
                }
            }
            Value::Array(a) if a.len() > 8 => out.push((prefix.into(), format!("[{} values]", a.len()))),
            Value::Array(a) if a.iter().any(|x| x.is_object()) => {
                for (i, x) in a.iter().enumerate() {
                    walk(&format!("{prefix}[{i}]"), x, out);
                }
            }
            Value::Number(n) => out.push((prefix.into(), match n.as_f64() {
                Some(x) if n.is_f64() => short(x),
                _ => n.to_string(),
            })),
            Value::String(s) => out.push((prefix.into(), s.clone())),
            Value::Null => out.push((prefix.into(), "-".into())),
            other => out.push((prefix.into(), other.to_string())),
        }
    }
    let mut rows = Vec::new();
    walk("", v, &mut rows);
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
}

fn emit<T: Serialize>(out: &mut dyn Write, as_json: bool, v: &T) -> ShellResult<()> {
    let text = if as_json {
        json::to_string(v)
    } else {
        human(&serde_json::to_value(v).expect("documents serialize"))
    };
    out.write_all(text.as_bytes()).map_err(Into::into)
}

fn load_config(path: &Path) -> ShellResult<ProjectConfig> {
    ProjectConfig::load(path)
}

/// Run one command, writing its output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> ShellResult<()> {
    let mode = if cli.sequential { ExecMode::Sequential } else { ExecMode::default() };
    match &cli.command {
        Command::Bode(a) => {
            let trace = match (&a.model, &a.config) {
                (_, Some(c)) => {
                    let cfg = load_config(c)?;
                    loopan::open_loop_trace(&cfg.loop_cfg, a.branch.into(), mode)?
                }
                (Some(m), None) => {
                    let grid = GridSpec::new(a.grid.f_min, a.grid.f_max, a.grid.ppd);
                    let mut t = tfcore::bode_grid(&parse_model(m)?, &grid, mode)?;
                    t.label = "model".into();
                    t
                }
                (None, None) => return Err(ShellError::invalid("model", "give --model or --config")),
            };
            if cli.json {
                emit(out, true, &trace)
            } else {
                emit_csv(out, &a.out, |w| ingest::write_bode_csv(&trace, w))
            }
        }
        Command::Margins(a) => {
            let alpha = match (&a.config, &a.trace) {
                (Some(c), _) => loopan::open_loop_trace(&load_config(c)?.loop_cfg, Branch::Both, mode)?,
                (None, Some(t)) => {
                    let tr = read_bode(t)?;
                    if a.closed {
                        loopan::open_trace_from_closed(&tr)?
                    } else {
                        tr
                    }
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            emit(out, cli.json, &loopan::margins(&alpha))
        }
        Command::Closed2Open(a) => {
            let open = loopan::open_trace_from_closed(&read_bode(&a.input)?)?;
            if cli.json {
                emit(out, true, &open)
            } else {
                emit_csv(out, &a.out, |w| ingest::write_bode_csv(&open, w))
            }
        }
        Command::Tune(a) => {
            let cfg = load_config(&a.config)?;
            let mut opts: TuneOptions = match &a.options {
                Some(p) => json::from_str(&read(p)?)?,
                None => TuneOptions::default(),
            };
            if a.fast_only {
                opts.tune_slow = false;
            }
            emit(out, cli.json, &ops::tune(&cfg, &opts)?)
        }
        Command::Budget(a) => {
            let cfg = load_config(&a.config)?;
            let measured = match &cfg.measured.closed_loop_bode {
                Some(f) if a.measured_phase_deg.is_none() || a.f_ref.is_none() => {
                    Some(loopan::open_trace_from_closed(&read_bode(&config::resolve(&a.config, f))?)?)
                }
                _ => None,
            };
            emit(out, cli.json, &ops::budget(&cfg, measured.as_ref(), a.f_ref, a.measured_phase_deg)?)
        }
        Command::Ringdown(a) => emit(out, cli.json, &ops::ingest_ringdown(&read(&a.input)?, a.exclude_s)?),
        Command::Psd(a) => {
            let cfg = load_config(&a.config)?;
            let s = ingest::parse_psd_csv(read(&a.s_y4)?.as_bytes())?;
            let b = ingest::parse_psd_csv(read(&a.baseline)?.as_bytes())?;
            let r = ops::sy1_from_sy4(&cfg, &s, &b)?;
            if r.clamped > 0 {
                eprintln!("warning: {} bins fell below the baseline and were set to zero", r.clamped);
            }
            if cli.json {
                emit(out, true, &r)
            } else {
                emit_csv(out, &a.out, |w| ingest::write_psd_csv(&r.psd, w))
            }
        }
        Command::Linewidth(a) => {
            let report = if let Some(p) = &a.psd {
                let psd = ingest::parse_psd_csv(read(p)?.as_bytes())?;
                let f = psd.freqs();
                let lo = a.f_low.unwrap_or(f[0]);
                let hi = a.f_high.unwrap_or(f[f.len() - 1]);
                linewidth::beta_separation_linewidth(PsdSource::Trace(&psd), lo, hi)?
            } else {
                let model = match (&a.config, a.h_minus1, a.h0) {
                    (Some(c), _, _) => load_config(c)?
                        .noise
                        .ok_or_else(|| ShellError::invalid("noise", "configuration has no noise model"))?,
                    (None, h1, Some(h0)) => NoiseModel { h_minus1: h1.unwrap_or(0.0), h0, f_low: a.f_low.unwrap_or(10.0) },
                    _ => return Err(ShellError::invalid("h0", "give --psd, --config, or --h0 [--h-minus1]")),
                };
                if !(model.h_minus1 >= 0.0) || !(model.h0 >= 0.0) {
                    return Err(ShellError::invalid("h0", "noise intercepts must be non-negative"));
                }
                let lo = a.f_low.unwrap_or(model.f_low);
                linewidth::beta_separation_linewidth(PsdSource::Model(&model), lo, a.f_high.unwrap_or(1e9))?
            };
            emit(out, cli.json, &report)
        }
        Command::AdviseCavity(a) => emit(out, cli.json, &tuner::cavity_advisor(a.f_ug_fast, a.f_ug_slow)?),
        Command::Serve(a) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::service::serve(SocketAddr::new(a.bind, a.port), a.workdir.clone()))?;
            Ok(())
        }
    }
}

/// Entry point used by the binary: returns the process exit status.
pub fn main_with(cli: Cli) -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
