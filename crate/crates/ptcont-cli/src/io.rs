//! File emission: CSV, JSON sidecars, provenance, gnuplot scripts. All
//! numeric text is 17-significant-digit scientific notation so runs can be
//! diffed byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub fn write(path: &str, content: &str) -> Result<(), CliError> {
    if let Some(dir) = Path::new(path).parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CliError::Io(path.into(), e))?;
        }
    }
    fs::write(path, content).map_err(|e| CliError::Io(path.into(), e))
}

pub fn write_json<T: serde::Serialize>(path: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write(path, &text)
}

/// Effective numerical settings, echoed into every provenance file.
#[derive(serde::Serialize)]
pub struct ToleranceReport {
    pub newton_tol: f64,
    pub eta_max: f64,
    pub k_max: usize,
    pub ntst: usize,
    pub ncol: usize,
    pub steep_slope: f64,
    pub prominence: f64,
}

#[derive(serde::Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    config_sha256: String,
    versions: BTreeVersions,
    tolerances: Option<&'a ToleranceReport>,
}

#[derive(serde::Serialize)]
struct BTreeVersions {
    ptcont: &'static str,
    cli: &'static str,
}

/// Every command writes one of these next to its outputs; the hash covers
/// the fully resolved config, so identical provenance means identical runs.
pub fn write_provenance(
    prefix: &str,
    command: &str,
    config: &ExperimentConfig,
    tolerances: Option<&ToleranceReport>,
) -> Result<(), CliError> {
    let canonical = serde_json::to_vec(config).expect("serializable");
    let mut h = Sha256::new();
    h.update(&canonical);
    let p = Provenance {
        command,
        config,
        config_sha256: format!("{:x}", h.finalize()),
        versions: BTreeVersions {
            ptcont: env!("CARGO_PKG_VERSION"),
            cli: env!("CARGO_PKG_VERSION"),
        },
        tolerances,
    };
    write_json(&format!("{prefix}.provenance.json"), &p)
}

/// Minimal gnuplot companion: `gnuplot <prefix>.gnuplot` renders the CSV.
pub fn write_gnuplot(prefix: &str, csv_name: &str, x: &str, y: &str) -> Result<(), CliError> {
    let script = format!(
        "set datafile separator ','\n\
         set key off\n\
         set xlabel '{x}'\n\
         set ylabel '{y}'\n\
         plot '{csv_name}' every ::1 using 1:2 with linespoints pt 7 ps 0.4\n\
         pause -1\n"
    );
    write(&format!("{prefix}.gnuplot"), &script)
}

/// Parsed curve CSV: the x column, both phase readings, and steep flags.
pub struct CurveRows {
    pub x_name: String,
    pub x: Vec<f64>,
    pub theta_new_mod1: Vec<f64>,
    pub theta_new_unwrapped: Vec<f64>,
    pub steep: Vec<bool>,
}

pub fn read_curve_csv(path: &PathBuf) -> Result<CurveRows, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Usage(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| CliError::Usage(format!("{}: no column '{name}'", path.display())))
    };
    let (c_mod, c_unw, c_steep) = (
        find("theta_new_mod1")?,
        find("theta_new_unwrapped")?,
        find("steep_flag")?,
    );
    let mut rows = CurveRows {
        x_name: cols[0].to_string(),
        x: Vec::new(),
        theta_new_mod1: Vec::new(),
        theta_new_unwrapped: Vec::new(),
        steep: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let get = |j: usize| -> Result<f64, CliError> {
            fields
                .get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::Usage(format!("{} line {}: bad field", path.display(), i + 2)))
        };
        rows.x.push(get(0)?);
        rows.theta_new_mod1.push(get(c_mod)?);
        rows.theta_new_unwrapped.push(get(c_unw)?);
        rows.steep.push(get(c_steep)? != 0.0);
    }
    if rows.x.is_empty() {
        return Err(CliError::Usage(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}
