//! Command-line front end. Everything numerical lives in the `ptcont`
//! library; this binary resolves a configuration (JSON file merged with
//! flags, flags winning), dispatches one subcommand, and maps failures to
//! exit codes: 2 for unusable input, 3 for numerical failure, 4 when a run
//! stopped early but its partial outputs were written.

mod cmds;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String, std::io::Error),
    Numerical(ptcont::Error),
    /// The run stopped early; whatever was computed is on disk.
    Partial(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io(path, e) => write!(f, "{path}: {e}"),
            CliError::Numerical(e) => write!(f, "{e}"),
            CliError::Partial(m) => write!(f, "partial result: {m}"),
        }
    }
}

impl From<ptcont::Error> for CliError {
    fn from(e: ptcont::Error) -> Self {
        match e {
            ptcont::Error::InvalidInput(m) => CliError::Usage(m),
            other => CliError::Numerical(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(..) | CliError::Numerical(_) => 3,
            CliError::Partial(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ptcont",
    version,
    about = "Phase transition curves of limit-cycle oscillators by BVP continuation"
)]
struct Cli {
    /// JSON experiment configuration; flags override its fields
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for all output files
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    out: PathBuf,
    /// Worker threads for parallel sections (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Model name: winfree | fhn | sinoatrial
    #[arg(long)]
    model: Option<String>,
    /// Model parameter override key=value (repeatable)
    #[arg(long = "param", value_name = "K=V")]
    params: Vec<String>,
    /// Perturbation direction, comma-separated components
    #[arg(long, value_name = "X,Y,..", allow_hyphen_values = true)]
    d: Option<String>,
    /// Perturbation amplitude
    #[arg(long = "A", allow_hyphen_values = true, value_name = "AMP")]
    amplitude: Option<f64>,
    /// Amplitude range end for sweeps
    #[arg(long = "Amax", allow_hyphen_values = true, value_name = "AMP")]
    amplitude_max: Option<f64>,
    /// Fixed kick phase (sweep, amplitude-run cross-checks)
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    /// Number of evenly spaced phases to trace isochrons at
    #[arg(long)]
    phases: Option<usize>,
    /// Apply the perturbation as a finite-duration pulse
    #[arg(long)]
    pulse: bool,
    /// Pulse duration; values >= one period are read as milliseconds
    #[arg(long, allow_hyphen_values = true)]
    dt: Option<f64>,
    /// Applied current (sinoatrial): drives the voltage by -Iapp/C_m
    #[arg(long = "Iapp", allow_hyphen_values = true)]
    iapp: Option<f64>,
    /// Periodic-orbit record cache: loaded if valid, else computed and saved
    #[arg(long, value_name = "FILE")]
    record: Option<PathBuf>,
    /// Output filename prefix (default: model and command)
    #[arg(long)]
    prefix: Option<String>,
    /// Mesh intervals for the reset/isochron problems
    #[arg(long)]
    ntst: Option<usize>,
    /// Newton residual tolerance
    #[arg(long)]
    tol: Option<f64>,
    /// Landing-offset cap before the segment gains a period
    #[arg(long = "eta-max")]
    eta_max: Option<f64>,
    /// Most periods a reset segment may span
    #[arg(long = "k-max")]
    k_max: Option<usize>,
    /// Largest continuation arclength step
    #[arg(long = "ds-max")]
    ds_max: Option<f64>,
    /// Oracle sample count (diff mode subsamples the curve to this)
    #[arg(long)]
    samples: Option<usize>,
    /// Extrema shallower than this count as noise
    #[arg(long)]
    prominence: Option<f64>,
    /// Isochron arclength budget
    #[arg(long)]
    budget: Option<f64>,
    /// Write a gnuplot script next to the CSV
    #[arg(long)]
    gnuplot: bool,
    /// Also write the curve resampled at uniform arclength
    #[arg(long)]
    arclength: bool,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    /// Curve CSV to cross-check instead of standalone phase sampling
    #[arg(long, value_name = "CSV")]
    diff: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[command(flatten)]
    common: Common,
    /// Curve CSV to classify
    #[arg(long, value_name = "CSV")]
    curve: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Locate the attracting periodic orbit and cache its record
    Orbit(Common),
    /// Orbit plus Floquet and adjoint bundles
    Bundle(Common),
    /// Trace isochron segments at evenly spaced phases
    Isochrons(Common),
    /// Phase transition curve: theta sweep at fixed amplitude
    Ptc(Common),
    /// Phase response curve (the same sweep, reported as phase shifts)
    Prc(Common),
    /// Amplitude sweep at a fixed kick phase
    Sweep(Common),
    /// Direct-integration phase measurements; cross-checks a curve via --diff
    Oracle(OracleArgs),
    /// Classify a curve CSV: invertibility and extrema
    Classify(ClassifyArgs),
}

fn parse_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad number '{t}' in list")))
        })
        .collect()
}

/// Lay the flags over the file config; every given flag wins.
fn merge(mut cfg: ExperimentConfig, c: &Common) -> Result<ExperimentConfig, CliError> {
    if let Some(m) = &c.model {
        cfg.model.name = Some(m.clone());
    }
    for kv in &c.params {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--param wants key=value, got '{kv}'")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad value in --param {kv}")))?;
        cfg.model.params.insert(k.trim().to_string(), v);
    }
    if let Some(d) = &c.d {
        cfg.perturbation.direction = Some(parse_list(d)?);
    }
    if let Some(a) = c.amplitude {
        cfg.perturbation.amplitude = Some(a);
    }
    if let Some(a) = c.amplitude_max {
        cfg.perturbation.amplitude_max = Some(a);
    }
    cfg.perturbation.pulse |= c.pulse;
    if let Some(dt) = c.dt {
        cfg.perturbation.dt = Some(dt);
    }
    if let Some(i) = c.iapp {
        cfg.perturbation.iapp = Some(i);
    }
    if let Some(t) = c.theta {
        cfg.phase.theta = Some(t);
    }
    if let Some(p) = c.phases {
        cfg.phase.phases = Some(p);
    }
    if let Some(n) = c.ntst {
        cfg.numerics.ntst = Some(n);
    }
    if let Some(t) = c.tol {
        cfg.numerics.tol = Some(t);
    }
    if let Some(e) = c.eta_max {
        cfg.numerics.eta_max = Some(e);
    }
    if let Some(k) = c.k_max {
        cfg.numerics.k_max = Some(k);
    }
    if let Some(d) = c.ds_max {
        cfg.numerics.ds_max = Some(d);
    }
    if let Some(s) = c.samples {
        cfg.numerics.samples = Some(s);
    }
    if let Some(p) = c.prominence {
        cfg.numerics.prominence = Some(p);
    }
    if let Some(b) = c.budget {
        cfg.numerics.budget = Some(b);
    }
    if let Some(p) = &c.prefix {
        cfg.outputs.prefix = Some(p.clone());
    }
    if let Some(r) = &c.record {
        cfg.outputs.record = Some(r.clone());
    }
    cfg.outputs.gnuplot |= c.gnuplot;
    cfg.outputs.arclength |= c.arclength;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    #[cfg(feature = "parallel")]
    if let Some(j) = cli.jobs {
        // a second configuration attempt (e.g. in tests) is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = cli.jobs;

    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let (name, common) = match &cli.cmd {
        Cmd::Orbit(c) => ("orbit", c),
        Cmd::Bundle(c) => ("bundle", c),
        Cmd::Isochrons(c) => ("isochrons", c),
        Cmd::Ptc(c) => ("ptc", c),
        Cmd::Prc(c) => ("prc", c),
        Cmd::Sweep(c) => ("sweep", c),
        Cmd::Oracle(o) => ("oracle", &o.common),
        Cmd::Classify(c) => ("classify", &c.common),
    };
    let ctx = cmds::Ctx {
        cfg: merge(base, common)?,
        out: cli.out.clone(),
        command: name.to_string(),
    };
    match &cli.cmd {
        Cmd::Orbit(_) => cmds::cmd_orbit(&ctx, false),
        Cmd::Bundle(_) => cmds::cmd_orbit(&ctx, true),
        Cmd::Isochrons(_) => cmds::cmd_isochrons(&ctx),
        Cmd::Ptc(_) => cmds::cmd_curve(&ctx, false),
        Cmd::Prc(_) => cmds::cmd_curve(&ctx, true),
        Cmd::Sweep(_) => cmds::cmd_sweep(&ctx),
        Cmd::Oracle(o) => cmds::cmd_oracle(&ctx, o.diff.as_ref()),
        Cmd::Classify(c) => cmds::cmd_classify(&ctx, &c.curve),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
