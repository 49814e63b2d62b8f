//! The eight subcommands. Each resolves its inputs from the merged config,
//! runs the library, writes CSV/JSON outputs plus a provenance file, and
//! prints a one-paragraph summary to stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ptcont::isochron::{compute_isochron_pair, IsochronOptions};
use ptcont::model::{ModelDef, Perturbation, VectorField};
use ptcont::oracle::{oracle_ptc, IntegratorOptions, PhaseOracleOptions, ReferenceCycle};
use ptcont::par::par_map;
use ptcont::periodic::{find_periodic_orbit, OrbitOptions, OrbitRecord};
use ptcont::reset::{
    amplitude_sweep, compute_ptc, Classification, PassivityDrift, PhaseCurve, PtcSample,
    ResetOptions, SweepParam,
};

use crate::config::ExperimentConfig;
use crate::io::{self, ToleranceReport};
use crate::CliError;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub command: String,
}

impl Ctx {
    fn path(&self, prefix: &str, suffix: &str) -> String {
        self.out.join(format!("{prefix}.{suffix}")).display().to_string()
    }

    /// Prefix with the output directory attached, for helpers that append
    /// their own extension.
    fn stem(&self, prefix: &str) -> String {
        self.out.join(prefix).display().to_string()
    }

    fn provenance(&self, prefix: &str, tol: Option<&ToleranceReport>) -> Result<(), CliError> {
        io::write_provenance(&self.stem(prefix), &self.command, &self.cfg, tol)
    }
}

// ---------------------------------------------------------------------------
// Shared resolution

/// A state on (or near) the attracting orbit, per model. Anything in the
/// basin works; these just keep the transient short.
fn default_x0(model: &ModelDef) -> Vec<f64> {
    match model {
        ModelDef::Winfree(_) => vec![1.3, 0.2],
        ModelDef::FitzHughNagumo(_) => vec![1.0, 0.0],
        ModelDef::Sinoatrial(s) => {
            // resting potential with gates at steady state
            let v = -60.0;
            let mut x = vec![v];
            for (alpha, beta) in s.rates(v) {
                x.push(alpha / (alpha + beta));
            }
            x
        }
        _ => vec![1.0, 0.0],
    }
}

fn orbit_options(ctx: &Ctx, model: &ModelDef) -> OrbitOptions {
    let mut o = OrbitOptions::for_model(model);
    let num = &ctx.cfg.numerics;
    if let Some(n) = num.ntst {
        o.ntst = n;
    }
    if let Some(c) = num.ncol {
        o.ncol = c;
    }
    if let Some(t) = num.tol {
        o.newton.tol = t;
    }
    o
}

fn reset_options(ctx: &Ctx, model: &ModelDef) -> ResetOptions {
    let mut o = ResetOptions::for_model(model.name());
    let num = &ctx.cfg.numerics;
    if let Some(n) = num.ntst {
        o.ntst = n;
    }
    if let Some(t) = num.tol {
        o.newton.tol = t;
        o.sweep.newton.tol = t;
        o.amplitude.newton.tol = t;
    }
    if let Some(e) = num.eta_max {
        o.eta_max = e;
    }
    if let Some(k) = num.k_max {
        o.k_max = k;
    }
    if let Some(d) = num.ds_max {
        o.sweep.ds_max = d;
        o.amplitude.ds_max = d;
    }
    if let Some(p) = num.prominence {
        o.prominence = p;
    }
    o
}

fn tolerance_report(o: &ResetOptions, rec: &OrbitRecord) -> ToleranceReport {
    ToleranceReport {
        newton_tol: o.newton.tol,
        eta_max: o.eta_max,
        k_max: o.k_max,
        ntst: if o.ntst == 0 {
            rec.orbit().seg.mesh.n_intervals()
        } else {
            o.ntst
        },
        ncol: rec.orbit().seg.ncol,
        steep_slope: o.steep_slope,
        prominence: o.prominence,
    }
}

/// Record file contents: the model the record was computed for, so a stale
/// cache is detected and recomputed instead of silently reused.
#[derive(serde::Serialize, serde::Deserialize)]
struct RecordFile {
    model: ModelDef,
    record: OrbitRecord,
}

fn load_record(path: &Path, model: &ModelDef, need_bundles: bool) -> Option<OrbitRecord> {
    let text = std::fs::read_to_string(path).ok()?;
    let rf: RecordFile = serde_json::from_str(&text).ok()?;
    let same_model = serde_json::to_string(&rf.model).ok()? == serde_json::to_string(model).ok()?;
    let usable = !need_bundles
        || (rf.record.adjoint.is_some() && (model.dim() != 2 || rf.record.bundle.is_some()));
    (same_model && usable).then_some(rf.record)
}

/// Load the orbit record from the configured cache file when it matches the
/// requested model, otherwise (re)compute it — with bundles when any
/// downstream consumer needs them — and refresh the cache.
fn resolve_record(
    ctx: &Ctx,
    model: &ModelDef,
    need_bundles: bool,
    record_path: Option<&Path>,
) -> Result<OrbitRecord, CliError> {
    if let Some(p) = record_path {
        if let Some(rec) = load_record(p, model, need_bundles) {
            return Ok(rec);
        }
    }
    let oopts = orbit_options(ctx, model);
    let x0 = default_x0(model);
    let rec = if need_bundles {
        OrbitRecord::complete(model, &x0, &oopts)?
    } else {
        OrbitRecord::new(find_periodic_orbit(model, &x0, &oopts)?)
    };
    if let Some(p) = record_path {
        let rf = RecordFile {
            model: model.clone(),
            record: rec.clone(),
        };
        io::write_json(&p.display().to_string(), &rf)?;
    }
    Ok(rec)
}

fn record_path(ctx: &Ctx, prefix: &str) -> PathBuf {
    ctx.cfg
        .outputs
        .record
        .clone()
        .unwrap_or_else(|| PathBuf::from(ctx.path(prefix, "record.json")))
}

// ---------------------------------------------------------------------------
// orbit / bundle

pub fn cmd_orbit(ctx: &Ctx, with_bundles: bool) -> Result<(), CliError> {
    let model = ctx.cfg.model()?;
    let prefix = ctx.cfg.prefix(model.name());
    let path = record_path(ctx, &prefix);
    let rec = resolve_record(ctx, &model, with_bundles, Some(&path))?;
    let orbit = rec.orbit();
    println!(
        "{}: period T = {:.12}, {} intervals x {} points",
        model.name(),
        orbit.period,
        orbit.seg.mesh.n_intervals(),
        orbit.seg.ncol,
    );
    if let Some(b) = &rec.bundle {
        println!("  nontrivial Floquet exponent = {:.9}", b.exponent);
    }
    if let Some(a) = &rec.adjoint {
        println!(
            "  adjoint bundle attached (trivial exponent residual {:.2e})",
            a.trivial_exponent
        );
    }
    println!("  record: {}", path.display());
    ctx.provenance(&prefix, None)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// isochrons

pub fn cmd_isochrons(ctx: &Ctx) -> Result<(), CliError> {
    let model = ctx.cfg.model()?;
    let prefix = ctx.cfg.prefix(&format!("{}_isochrons", model.name()));
    let rec = resolve_record(
        ctx,
        &model,
        true,
        ctx.cfg.outputs.record.as_deref(),
    )?;
    let bundle = rec.require_bundle()?;

    let mut iopts = IsochronOptions::default();
    let num = &ctx.cfg.numerics;
    if let Some(n) = num.ntst {
        iopts.ntst = n;
    }
    if let Some(c) = num.ncol {
        iopts.ncol = c;
    }
    if let Some(t) = num.tol {
        iopts.continuation.newton.tol = t;
    }
    if let Some(e) = num.eta_max {
        iopts.eta_max = e;
    }
    if let Some(k) = num.k_max {
        iopts.k_max = k;
    }
    if let Some(b) = num.budget {
        iopts.arclength_budget = b;
    }

    let n_phases = ctx.cfg.phase.phases.unwrap_or(10);
    if n_phases == 0 {
        return Err(CliError::Usage("--phases must be positive".into()));
    }
    let phases: Vec<f64> = (0..n_phases).map(|j| j as f64 / n_phases as f64).collect();
    let results = par_map(&phases, |&ph| compute_isochron_pair(&model, bundle, ph, &iopts));

    let mut csv = String::from("x,y,phase,sign,arclength,eta,k\n");
    let mut traced = 0usize;
    let mut failed: Vec<(f64, ptcont::Error)> = Vec::new();
    for (ph, res) in phases.iter().zip(results) {
        match res {
            Ok((plus, minus)) => {
                traced += 1;
                for branch in [&plus, &minus] {
                    for p in &branch.points {
                        writeln!(
                            csv,
                            "{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{}",
                            p.x[0], p.x[1], ph, branch.sign, p.arclength, p.eta, p.k
                        )
                        .unwrap();
                    }
                }
            }
            Err(e) => failed.push((*ph, e)),
        }
    }
    if traced == 0 {
        let (_, e) = failed.into_iter().next().unwrap();
        return Err(CliError::Numerical(e));
    }
    let csv_path = ctx.path(&prefix, "csv");
    io::write(&csv_path, &csv)?;
    if ctx.cfg.outputs.gnuplot {
        io::write_gnuplot(&ctx.stem(&prefix), &format!("{prefix}.csv"), "x", "y")?;
    }
    ctx.provenance(&prefix, None)?;
    println!(
        "isochrons: {traced}/{n_phases} phases traced (both signs), budget {} -> {}",
        iopts.arclength_budget, csv_path
    );
    if !failed.is_empty() {
        for (ph, e) in &failed {
            eprintln!("  phase {ph:.3}: {e}");
        }
        return Err(CliError::Partial(format!(
            "{} of {n_phases} phases failed",
            failed.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ptc / prc / sweep

#[derive(serde::Serialize)]
struct CurveSummary<'a> {
    model: &'a str,
    sweep: &'a SweepParam,
    amplitude: f64,
    direction: &'a [f64],
    kind: &'a ptcont::model::PerturbationKind,
    samples: usize,
    complete: bool,
    winding: f64,
    closure_error: Option<f64>,
    classification: &'a Option<Classification>,
    steep_segments: Vec<(f64, f64)>,
    k_history: &'a [(f64, usize)],
    passivity: &'a PassivityDrift,
    failure: &'a Option<(f64, String)>,
}

fn write_curve_outputs(
    ctx: &Ctx,
    prefix: &str,
    model: &ModelDef,
    curve: &PhaseCurve,
    tol: &ToleranceReport,
) -> Result<(), CliError> {
    let csv_path = ctx.path(prefix, "csv");
    io::write(&csv_path, &curve.csv())?;
    let summary = CurveSummary {
        model: model.name(),
        sweep: &curve.sweep,
        amplitude: curve.amplitude,
        direction: &curve.direction,
        kind: &curve.kind,
        samples: curve.samples.len(),
        complete: curve.is_complete(),
        winding: curve.winding(),
        closure_error: curve.closure_error(),
        classification: &curve.classification,
        steep_segments: curve.steep_segments(),
        k_history: &curve.k_history,
        passivity: &curve.passivity,
        failure: &curve.failure,
    };
    io::write_json(&ctx.path(prefix, "json"), &summary)?;
    if ctx.cfg.outputs.arclength {
        io::write(&ctx.path(prefix, "arclength.csv"), &arclength_table(curve, 401))?;
    }
    if ctx.cfg.outputs.gnuplot {
        io::write_gnuplot(&ctx.stem(prefix), &format!("{prefix}.csv"), "theta_old", "theta_new")?;
    }
    ctx.provenance(prefix, Some(tol))?;
    Ok(())
}

/// Resample the curve at uniform normalized arclength: steep stretches get
/// as many rows as flat ones, which is the readable parameterization for
/// curves that are nearly vertical in ϑ_old.
fn arclength_table(curve: &PhaseCurve, rows: usize) -> String {
    let mut s = String::from("s_norm,x,theta_new_unwrapped\n");
    let total = curve.samples.last().map(|p| p.arclength).unwrap_or(0.0);
    if total <= 0.0 || curve.samples.len() < 2 {
        return s;
    }
    let mut j = 0usize;
    for i in 0..rows {
        let target = total * i as f64 / (rows - 1) as f64;
        while j + 1 < curve.samples.len() - 1 && curve.samples[j + 1].arclength < target {
            j += 1;
        }
        let (a, b) = (&curve.samples[j], &curve.samples[j + 1]);
        let w = if b.arclength > a.arclength {
            (target - a.arclength) / (b.arclength - a.arclength)
        } else {
            0.0
        };
        writeln!(
            s,
            "{:.16e},{:.16e},{:.16e}",
            target / total,
            a.x + w * (b.x - a.x),
            a.theta_new + w * (b.theta_new - a.theta_new),
        )
        .unwrap();
    }
    s
}

fn print_curve_summary(curve: &PhaseCurve) {
    let kind = match curve.sweep {
        SweepParam::Theta => "ptc",
        SweepParam::Amplitude { .. } => "amplitude sweep",
    };
    println!(
        "{kind}: {} samples, amplitude {:.6}, winding {:.6}",
        curve.samples.len(),
        curve.amplitude,
        curve.winding()
    );
    if let Some(c) = &curve.classification {
        let (mx, mn): (Vec<_>, Vec<_>) = c.extrema.iter().partition(|e| e.is_max);
        println!(
            "  {}: {} maxima, {} minima",
            if c.invertible { "invertible (type 1)" } else { "non-invertible (type 0)" },
            mx.len(),
            mn.len()
        );
    }
    for (lo, hi) in curve.steep_segments() {
        println!("  steep segment [{lo:.4}, {hi:.4}]");
    }
    println!(
        "  passivity drift: T {:.2e}, That {:.2e}, exponent {:.2e}",
        curve.passivity.period_rel, curve.passivity.t_hat_rel, curve.passivity.exponent_abs
    );
    if let Some((x, reason)) = &curve.failure {
        println!("  INCOMPLETE at x = {x:.4}: {reason}");
    }
}

pub fn cmd_curve(ctx: &Ctx, prc: bool) -> Result<(), CliError> {
    let model = ctx.cfg.model()?;
    let tag = if prc { "prc" } else { "ptc" };
    let prefix = ctx.cfg.prefix(&format!("{}_{tag}", model.name()));
    let rec = resolve_record(ctx, &model, true, ctx.cfg.outputs.record.as_deref())?;
    let pert = ctx.cfg.perturbation(&model, rec.period())?;
    let ropts = reset_options(ctx, &model);
    let curve = compute_ptc(&model, &rec, &pert, &ropts)?;
    let tol = tolerance_report(&ropts, &rec);

    if prc {
        let mut s = String::from("theta_old,delta_unwrapped,delta_mod1,steep_flag\n");
        for p in &curve.samples {
            writeln!(
                s,
                "{:.16e},{:.16e},{:.16e},{}",
                p.theta_old,
                p.delta(),
                p.delta_mod1(),
                p.steep as u8
            )
            .unwrap();
        }
        io::write(&ctx.path(&prefix, "csv"), &s)?;
        io::write_json(
            &ctx.path(&prefix, "json"),
            &CurveSummary {
                model: model.name(),
                sweep: &curve.sweep,
                amplitude: curve.amplitude,
                direction: &curve.direction,
                kind: &curve.kind,
                samples: curve.samples.len(),
                complete: curve.is_complete(),
                winding: curve.winding(),
                closure_error: curve.closure_error(),
                classification: &curve.classification,
                steep_segments: curve.steep_segments(),
                k_history: &curve.k_history,
                passivity: &curve.passivity,
                failure: &curve.failure,
            },
        )?;
        if ctx.cfg.outputs.gnuplot {
            io::write_gnuplot(&ctx.stem(&prefix), &format!("{prefix}.csv"), "theta_old", "delta")?;
        }
        ctx.provenance(&prefix, Some(&tol))?;
    } else {
        write_curve_outputs(ctx, &prefix, &model, &curve, &tol)?;
    }
    print_curve_summary(&curve);
    match &curve.failure {
        Some((x, reason)) => Err(CliError::Partial(format!("stopped at {x:.4}: {reason}"))),
        None => Ok(()),
    }
}

pub fn cmd_sweep(ctx: &Ctx) -> Result<(), CliError> {
    let model = ctx.cfg.model()?;
    let prefix = ctx.cfg.prefix(&format!("{}_sweep", model.name()));
    let theta = ctx
        .cfg
        .phase
        .theta
        .ok_or_else(|| CliError::Usage("amplitude sweep needs a kick phase (--theta)".into()))?;
    let rec = resolve_record(ctx, &model, true, ctx.cfg.outputs.record.as_deref())?;
    let pert = ctx.cfg.perturbation(&model, rec.period())?;
    let ropts = reset_options(ctx, &model);
    let run = amplitude_sweep(&model, &rec, &pert, theta, &[], &ropts)?;
    let tol = tolerance_report(&ropts, &rec);
    write_curve_outputs(ctx, &prefix, &model, &run.curve, &tol)?;
    print_curve_summary(&run.curve);
    match &run.curve.failure {
        Some((x, reason)) => Err(CliError::Partial(format!("stopped at {x:.4}: {reason}"))),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// oracle

#[derive(serde::Serialize)]
struct OracleSummary {
    compared: usize,
    unconverged: usize,
    /// Largest |curve − oracle| (circular) over non-steep samples.
    max_abs_diff: f64,
    worst_x: f64,
    /// Fraction of non-steep converged samples within 1e-3.
    fraction_within_1e3: f64,
}

fn wrap_signed(d: f64) -> f64 {
    d - d.round()
}

pub fn cmd_oracle(ctx: &Ctx, diff: Option<&PathBuf>) -> Result<(), CliError> {
    let model = ctx.cfg.model()?;
    let prefix = ctx.cfg.prefix(&format!("{}_oracle", model.name()));
    let rec = resolve_record(ctx, &model, false, ctx.cfg.outputs.record.as_deref())?;
    let pert = ctx.cfg.perturbation(&model, rec.period())?;
    let n_samples = ctx.cfg.numerics.samples.unwrap_or(101);
    let cycle = ReferenceCycle::from_anchor(
        &model,
        rec.gamma0(),
        rec.period(),
        &IntegratorOptions::with_tol(1e-10),
    )?;
    let mut opts = PhaseOracleOptions::default();
    opts.integrator = IntegratorOptions::with_tol(ctx.cfg.numerics.tol.unwrap_or(1e-10));

    let Some(curve_path) = diff else {
        // standalone sampling on a uniform phase grid
        let thetas: Vec<f64> = (0..n_samples).map(|i| i as f64 / n_samples as f64).collect();
        let points = oracle_ptc(&model, &cycle, &pert, &thetas, &opts)?;
        let mut csv = String::from("theta_old,theta_new_oracle,distance,periods\n");
        for p in &points {
            writeln!(
                csv,
                "{:.16e},{},{:.16e},{}",
                p.theta_old,
                p.theta_new
                    .map(|t| format!("{t:.16e}"))
                    .unwrap_or_else(|| "nan".into()),
                p.distance,
                p.periods
            )
            .unwrap();
        }
        let csv_path = ctx.path(&prefix, "csv");
        io::write(&csv_path, &csv)?;
        ctx.provenance(&prefix, None)?;
        let ok = points.iter().filter(|p| p.theta_new.is_some()).count();
        println!("oracle: {ok}/{} phase readings settled -> {csv_path}", points.len());
        return Ok(());
    };

    // cross-check a written curve
    let rows = io::read_curve_csv(curve_path)?;
    let stride = (rows.x.len() / n_samples).max(1);
    let picked: Vec<usize> = (0..rows.x.len()).step_by(stride).collect();

    let amplitude_run = rows.x_name == "amplitude_A";
    let oracle_new: Vec<Option<f64>> = if amplitude_run {
        let theta = ctx.cfg.phase.theta.ok_or_else(|| {
            CliError::Usage("cross-checking an amplitude run needs --theta".into())
        })?;
        let amps: Vec<f64> = picked.iter().map(|&i| rows.x[i]).collect();
        par_map(&amps, |&a| {
            let p = Perturbation {
                direction: pert.direction.clone(),
                amplitude: a,
                kind: pert.kind.clone(),
            };
            oracle_ptc(&model, &cycle, &p, &[theta], &opts)
                .ok()
                .and_then(|v| v.into_iter().next().and_then(|p| p.theta_new))
        })
    } else {
        let thetas: Vec<f64> = picked.iter().map(|&i| rows.x[i]).collect();
        oracle_ptc(&model, &cycle, &pert, &thetas, &opts)?
            .into_iter()
            .map(|p| p.theta_new)
            .collect()
    };

    let mut csv = String::from("x,theta_new_curve,theta_new_oracle,signed_diff,steep_flag\n");
    let mut compared = 0usize;
    let mut unconverged = 0usize;
    let mut within = 0usize;
    let mut max_abs = 0.0f64;
    let mut worst_x = f64::NAN;
    for (&i, oracle) in picked.iter().zip(&oracle_new) {
        let curve_mod1 = rows.theta_new_mod1[i];
        let steep = rows.steep[i];
        let (diff_text, diff_val) = match oracle {
            Some(o) => {
                let d = wrap_signed(curve_mod1 - o);
                (format!("{d:.16e}"), Some(d))
            }
            None => {
                unconverged += 1;
                ("nan".into(), None)
            }
        };
        writeln!(
            csv,
            "{:.16e},{:.16e},{},{},{}",
            rows.x[i],
            curve_mod1,
            oracle
                .map(|o| format!("{o:.16e}"))
                .unwrap_or_else(|| "nan".into()),
            diff_text,
            steep as u8
        )
        .unwrap();
        if let Some(d) = diff_val {
            if !steep {
                compared += 1;
                if d.abs() <= 1e-3 {
                    within += 1;
                }
                if d.abs() > max_abs {
                    max_abs = d.abs();
                    worst_x = rows.x[i];
                }
            }
        }
    }
    let csv_path = ctx.path(&prefix, "csv");
    io::write(&csv_path, &csv)?;
    let summary = OracleSummary {
        compared,
        unconverged,
        max_abs_diff: max_abs,
        worst_x,
        fraction_within_1e3: if compared > 0 {
            within as f64 / compared as f64
        } else {
            0.0
        },
    };
    io::write_json(&ctx.path(&prefix, "json"), &summary)?;
    ctx.provenance(&prefix, None)?;
    println!(
        "oracle diff: {compared} non-steep samples, max |diff| = {max_abs:.3e} at x = {worst_x:.4}, {:.1}% within 1e-3 ({unconverged} unconverged)",
        100.0 * summary.fraction_within_1e3
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// classify

pub fn cmd_classify(ctx: &Ctx, curve_path: &PathBuf) -> Result<(), CliError> {
    let rows = io::read_curve_csv(curve_path)?;
    let sweep = if rows.x_name == "amplitude_A" {
        SweepParam::Amplitude {
            theta_fixed: ctx.cfg.phase.theta.unwrap_or(0.0),
        }
    } else {
        SweepParam::Theta
    };
    let samples: Vec<PtcSample> = rows
        .x
        .iter()
        .zip(&rows.theta_new_unwrapped)
        .zip(&rows.steep)
        .map(|((&x, &tn), &steep)| PtcSample {
            x,
            theta_old: if sweep == SweepParam::Theta { x } else { 0.0 },
            theta_new: tn,
            eta: 0.0,
            k: 1,
            steep,
            arclength: 0.0,
        })
        .collect();
    let curve = PhaseCurve {
        samples,
        sweep,
        amplitude: 0.0,
        direction: vec![],
        kind: ptcont::model::PerturbationKind::Instantaneous,
        classification: None,
        k_history: vec![],
        passivity: PassivityDrift::default(),
        failure: None,
    };
    let prominence = ctx.cfg.numerics.prominence.unwrap_or(1e-3);
    let cls = curve.classify_with(prominence);
    let stem = curve_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "curve".into());
    let prefix = ctx.cfg.prefix(&format!("{stem}_classification"));
    io::write_json(&ctx.path(&prefix, "json"), &cls)?;
    let (mx, mn): (Vec<_>, Vec<_>) = cls.extrema.iter().partition(|e| e.is_max);
    println!(
        "{}: {} maxima, {} minima ({} rows)",
        if cls.invertible { "invertible (type 1)" } else { "non-invertible (type 0)" },
        mx.len(),
        mn.len(),
        rows.x.len()
    );
    for e in &cls.extrema {
        println!(
            "  {} at x = {:.4}, theta_new = {:.4}",
            if e.is_max { "max" } else { "min" },
            e.x,
            e.value
        );
    }
    Ok(())
}
