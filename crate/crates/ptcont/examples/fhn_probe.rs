use std::time::Instant;

use ptcont::model::{ModelDef, Perturbation};
use ptcont::periodic::{OrbitOptions, OrbitRecord};
use ptcont::reset::{compute_ptc, ResetOptions};

fn main() {
    let model = ModelDef::by_name("fhn").unwrap();
    let t0 = Instant::now();
    let rec = OrbitRecord::complete(&model, &[1.0, 0.0], &OrbitOptions::for_model(&model)).unwrap();
    println!(
        "orbit: T = {:.12} ({} intervals) in {:.1?}",
        rec.period(),
        rec.orbit().seg.mesh.n_intervals(),
        t0.elapsed()
    );
    let opts = ResetOptions::for_model("fhn");
    let pert = Perturbation::instant(&[1.0, 0.0], 0.25);
    let t1 = Instant::now();
    match compute_ptc(&model, &rec, &pert, &opts) {
        Ok(curve) => {
            println!(
                "ptc: {} samples in {:.1?}, complete = {}, winding = {:.6}",
                curve.samples.len(),
                t1.elapsed(),
                curve.is_complete(),
                curve.winding()
            );
            if let Some((at, why)) = &curve.failure {
                println!("  failure at theta = {at:.4}: {why}");
            }
            let m = curve.samples.len();
            println!("first samples after the stall (sweep runs 1 -> 0):");
            for p in curve.samples.iter().take(12) {
                println!(
                    "  theta = {:.6}, theta_new = {:.6}, eta = {:+.3e}, k = {}",
                    p.x, p.theta_new, p.eta, p.k
                );
            }
            let _ = m;
            let cls = curve.classification.as_ref().unwrap();
            let maxima: Vec<_> = cls.extrema.iter().filter(|e| e.is_max).collect();
            let minima: Vec<_> = cls.extrema.iter().filter(|e| !e.is_max).collect();
            println!(
                "classification: invertible = {}, {} maxima, {} minima",
                cls.invertible,
                maxima.len(),
                minima.len()
            );
            for e in &cls.extrema {
                println!(
                    "  {} at theta_old = {:.4}, theta_new = {:.4}",
                    if e.is_max { "max" } else { "min" },
                    e.x,
                    e.value
                );
            }
            println!("steep segments:");
            for (lo, hi) in curve.steep_segments() {
                println!("  [{lo:.4}, {hi:.4}]");
            }
            println!("k history: {:?}", curve.k_history);
            println!(
                "passivity: T {:.2e}, That {:.2e}, lambda {:.2e}",
                curve.passivity.period_rel, curve.passivity.t_hat_rel, curve.passivity.exponent_abs
            );
        }
        Err(e) => println!("ptc failed after {:.1?}: {e}", t1.elapsed()),
    }
}
