//! Isochrons of planar limit cycles, grown as one-parameter families of
//! orbit segments.
//!
//! A point has phase ϑ exactly when flowing it for k whole periods lands it
//! on the ϑ-isochron again, arbitrarily close to γ_ϑ for large k. The
//! segment u solves u' = kT·F(u) with its *end* pinned to the tangent-line
//! approximation of the isochron at γ_ϑ: u(1) = γ_ϑ + η v̂_ϑ, |η| ≤ η_max.
//! Its start u(0) then draws the isochron as η is continued away from zero.
//! When |η| reaches the trust region boundary the segment is extended by one
//! more period along the cycle (which shrinks η by the stable multiplier)
//! and the continuation resumes — so the reachable arclength grows
//! geometrically with k.

use std::cell::RefCell;
use std::sync::Arc;

use crate::bvp::{
    newton_solve, BoundaryConditions, BvpSolution, BvpSpec, OdeRhs, ParamSet,
};
use crate::continuation::{
    continue_branch, ContinuationOptions, Event, EventAction, Hooks, StopReason,
};
use crate::mesh::{concat_weighted, Mesh, OrbitSegment};
use crate::model::{ModelDef, VectorField};
use crate::periodic::FloquetBundle;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct IsochronOptions {
    /// Periods the segment spans initially.
    pub k_init: usize,
    pub k_max: usize,
    /// Trust region of the tangent-line approximation at the cycle.
    pub eta_max: f64,
    /// Stop once the isochron has been traced this far (path length of u(0)).
    pub arclength_budget: f64,
    pub ntst: usize,
    pub ncol: usize,
    pub continuation: ContinuationOptions,
}

impl Default for IsochronOptions {
    fn default() -> Self {
        IsochronOptions {
            k_init: 1,
            k_max: 12,
            eta_max: 0.1,
            arclength_budget: 2.0,
            ntst: 100,
            ncol: 4,
            continuation: ContinuationOptions {
                ds0: 1e-3,
                ds_max: 0.05,
                max_steps: 2000,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct IsochronPoint {
    /// Path length along the isochron from γ_ϑ.
    pub arclength: f64,
    /// The isochron point u(0).
    pub x: Vec<f64>,
    /// Endpoint offset along v̂_ϑ when this point was computed.
    pub eta: f64,
    /// Periods the underlying segment spanned.
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct IsochronBranch {
    pub phase: f64,
    /// Which side of the cycle: the sign of the initial η direction.
    pub sign: f64,
    pub points: Vec<IsochronPoint>,
    pub final_k: usize,
    pub stop: StopReason,
}

// ---------------------------------------------------------------------------
// The segment BVP

struct IsochronRhs {
    field: ModelDef,
}

impl OdeRhs for IsochronRhs {
    fn dim(&self) -> usize {
        self.field.dim()
    }
    fn npar(&self) -> usize {
        2 // total time kT (frozen), eta
    }
    fn eval(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        self.field.eval(y, out);
        out.iter_mut().for_each(|v| *v *= q[0]);
    }
    fn jac_y(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        self.field.jacobian(y, out);
        out.iter_mut().for_each(|v| *v *= q[0]);
    }
    fn jac_q(&self, y: &[f64], _q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let mut f = vec![0.0; n];
        self.field.eval(y, &mut f);
        for i in 0..n {
            out[i * 2] = f[i];
            out[i * 2 + 1] = 0.0;
        }
    }
}

struct IsochronBc {
    gamma: [f64; 2],
    vhat: [f64; 2],
}

impl BoundaryConditions for IsochronBc {
    fn nbc(&self) -> usize {
        2
    }
    fn eval(&self, _y0: &[f64], y1: &[f64], q: &[f64], out: &mut [f64]) {
        let d = [y1[0] - self.gamma[0], y1[1] - self.gamma[1]];
        // v̂⊥ first: confines u(1) to the tangent line, then the offset
        out[0] = -d[0] * self.vhat[1] + d[1] * self.vhat[0];
        out[1] = d[0] * self.vhat[0] + d[1] * self.vhat[1] - q[1];
    }
    fn jac(&self, _y0: &[f64], _y1: &[f64], _q: &[f64], j0: &mut [f64], j1: &mut [f64], jq: &mut [f64]) {
        j0.fill(0.0);
        jq.fill(0.0);
        j1[0] = -self.vhat[1];
        j1[1] = self.vhat[0];
        j1[2] = self.vhat[0];
        j1[3] = self.vhat[1];
        jq[3] = -1.0; // ∂out[1]/∂eta
    }
}

/// The one-segment isochron family: u flows for k whole periods and must
/// end on the line through `gamma` spanned by `vhat`, offset η. With η free
/// this is a one-parameter family (the isochron itself); with η pinned it
/// is square.
pub fn isochron_spec(model: &ModelDef, gamma: [f64; 2], vhat: [f64; 2], eta_free: bool) -> BvpSpec {
    let free: &[&str] = if eta_free { &["eta"] } else { &[] };
    BvpSpec {
        rhs: Arc::new(IsochronRhs {
            field: model.clone(),
        }),
        bc: Arc::new(IsochronBc { gamma, vhat }),
        integral: None,
        params: ParamSet::new(&["Ttot", "eta"]).free_named(free).unwrap(),
    }
}

/// The cycle wrapped k times: the exact η = 0 member of the family. The
/// mesh reuses the orbit's own breakpoints, rotated by the phase and scaled
/// by k, so every seed interval is a polynomial restriction of one orbit
/// interval and the seed satisfies the collocation system to roundoff.
fn wrapped_seed(bundle: &FloquetBundle, phase: f64, k: usize) -> Result<OrbitSegment> {
    let orbit = &bundle.orbit;
    let phase = phase.rem_euclid(1.0);
    let mut lap: Vec<f64> = orbit
        .seg
        .mesh
        .breaks()
        .iter()
        .map(|b| (b - phase).rem_euclid(1.0))
        .filter(|v| *v > 1e-12 && *v < 1.0 - 1e-12)
        .collect();
    lap.push(0.0);
    lap.sort_by(f64::total_cmp);
    lap.dedup_by(|a, b| (*a - *b).abs() < 1e-10);
    let mut breaks = Vec::with_capacity(k * lap.len() + 1);
    for m in 0..k {
        for c in &lap {
            breaks.push((m as f64 + c) / k as f64);
        }
    }
    breaks.push(1.0);
    let mesh = Mesh::from_breaks(breaks)?;
    Ok(OrbitSegment::from_fn(mesh, orbit.seg.ncol, 2, |s, out| {
        orbit
            .seg
            .eval_into((phase + s * k as f64).rem_euclid(1.0), out)
    }))
}

/// One more period along the cycle, carrying the endpoint offset with the
/// linearized flow: tail(s) = γ(ϑ+s) + η e^{λTs} v(ϑ+s)/‖v(ϑ)‖.
fn cycle_tail(bundle: &FloquetBundle, phase: f64, eta: f64, vnorm: f64, ncol: usize) -> OrbitSegment {
    let t = bundle.orbit.period;
    let lambda = bundle.exponent;
    OrbitSegment::from_fn(
        Mesh::uniform(bundle.orbit.seg.mesh.n_intervals()),
        ncol,
        2,
        |s, out| {
            let ph = (phase + s).rem_euclid(1.0);
            bundle.orbit.seg.eval_into(ph, out);
            let v = bundle.v.eval(ph);
            let fac = eta * (lambda * t * s).exp() / vnorm;
            out[0] += fac * v[0];
            out[1] += fac * v[1];
        },
    )
}

/// Trace one side (`sign` = ±1) of the phase-ϑ isochron.
pub fn compute_isochron(
    model: &ModelDef,
    bundle: &FloquetBundle,
    phase: f64,
    sign: f64,
    opts: &IsochronOptions,
) -> Result<IsochronBranch> {
    if model.dim() != 2 {
        return Err(Error::InvalidInput(
            "isochron segments are defined for planar models".into(),
        ));
    }
    let t_orbit = bundle.orbit.period;
    let g = bundle.orbit.point_at_phase(phase);
    let gamma = [g[0], g[1]];
    let v = bundle.v.eval(phase.rem_euclid(1.0));
    let vnorm = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let vhat = [v[0] / vnorm, v[1] / vnorm];

    let mut k = opts.k_init.max(1);
    let mut seg = wrapped_seed(bundle, phase, k)?;
    let mut eta = 0.0;
    let mut points: Vec<IsochronPoint> = Vec::new();
    // running path length of u(0), shared with the stop predicate
    let walk = RefCell::new((vec![gamma[0], gamma[1]], 0.0f64));

    loop {
        let mut sol = BvpSolution {
            seg,
            params: vec![k as f64 * t_orbit, eta],
        };
        // square polish with η frozen so each round starts converged
        let pin_spec = isochron_spec(model, gamma, vhat, false);
        newton_solve(&pin_spec, &mut sol, &[], &opts.continuation.newton)?;

        let run_spec = isochron_spec(model, gamma, vhat, true);
        let hooks = Hooks {
            trackers: vec![
                ("u0x".into(), Box::new(|s: &BvpSolution| s.seg.first()[0])),
                ("u0y".into(), Box::new(|s: &BvpSolution| s.seg.first()[1])),
            ],
            stop_when: Some(Box::new(|s: &BvpSolution, _| {
                let u0 = s.seg.first();
                let mut w = walk.borrow_mut();
                let d = ((u0[0] - w.0[0]).powi(2) + (u0[1] - w.0[1]).powi(2)).sqrt();
                w.1 += d;
                w.0[0] = u0[0];
                w.0[1] = u0[1];
                w.1 >= opts.arclength_budget
            })),
            events: vec![
                Event {
                    name: "eta-cap".into(),
                    param: "eta".into(),
                    target: opts.eta_max,
                    action: EventAction::Stop,
                },
                Event {
                    name: "eta-cap".into(),
                    param: "eta".into(),
                    target: -opts.eta_max,
                    action: EventAction::Stop,
                },
            ],
            ..Default::default()
        };
        let branch = continue_branch(&run_spec, &sol, "eta", sign, &opts.continuation, &hooks)?;

        // collect, skipping the seed point on resumed rounds
        let skip = if points.is_empty() { 0 } else { 1 };
        let mut s_here = points.last().map_or(0.0, |p| p.arclength);
        let mut prev = points
            .last()
            .map(|p| p.x.clone())
            .unwrap_or_else(|| vec![gamma[0], gamma[1]]);
        for bp in branch.points.iter().skip(skip) {
            let x = vec![bp.tracked[0], bp.tracked[1]];
            s_here += ((x[0] - prev[0]).powi(2) + (x[1] - prev[1]).powi(2)).sqrt();
            prev = x.clone();
            points.push(IsochronPoint {
                arclength: s_here,
                x,
                eta: bp.params[1],
                k,
            });
        }

        match branch.stop {
            StopReason::Event(_) => {
                let hit = &branch
                    .events
                    .last()
                    .expect("stop event must have been recorded")
                    .solution;
                if k >= opts.k_max {
                    return Ok(IsochronBranch {
                        phase,
                        sign,
                        points,
                        final_k: k,
                        stop: StopReason::Event("k-budget".into()),
                    });
                }
                let eta_hit = hit.params[1];
                let tail = cycle_tail(bundle, phase, eta_hit, vnorm, opts.ncol);
                let joined = concat_weighted(&hit.seg, &tail, k as f64, 1.0);
                let mesh = joined.adapted_mesh(opts.ntst);
                seg = joined.remesh_to(mesh, opts.ncol);
                eta = eta_hit * (bundle.exponent * t_orbit).exp();
                k += 1;
            }
            other => {
                return Ok(IsochronBranch {
                    phase,
                    sign,
                    points,
                    final_k: k,
                    stop: other,
                });
            }
        }
    }
}

/// Both sides of the isochron through γ_ϑ.
pub fn compute_isochron_pair(
    model: &ModelDef,
    bundle: &FloquetBundle,
    phase: f64,
    opts: &IsochronOptions,
) -> Result<(IsochronBranch, IsochronBranch)> {
    Ok((
        compute_isochron(model, bundle, phase, 1.0, opts)?,
        compute_isochron(model, bundle, phase, -1.0, opts)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvp::{residual_norm, NewtonOptions};
    use crate::oracle::{circular_distance, winfree_phase_closed_form};
    use crate::periodic::{compute_floquet_bundle, find_periodic_orbit, OrbitOptions};

    fn winfree_bundle(a: f64) -> (ModelDef, FloquetBundle) {
        let mut model = ModelDef::by_name("winfree").unwrap();
        model.set_param("a", a).unwrap();
        let orbit =
            find_periodic_orbit(&model, &[1.4, 0.2], &OrbitOptions::for_model(&model)).unwrap();
        let bundle = compute_floquet_bundle(&model, &orbit, &OrbitOptions::default()).unwrap();
        (model, bundle)
    }

    #[test]
    fn wrapped_cycle_is_an_exact_family_member() {
        let (model, bundle) = winfree_bundle(0.0);
        let make = |phase: f64, k: usize| {
            let seg = wrapped_seed(&bundle, phase, k).unwrap();
            let g = bundle.orbit.point_at_phase(phase);
            let v = bundle.v.eval(phase.rem_euclid(1.0));
            let vn = (v[0] * v[0] + v[1] * v[1]).sqrt();
            let spec = isochron_spec(&model, [g[0], g[1]], [v[0] / vn, v[1] / vn], true);
            let sol = BvpSolution {
                seg,
                params: vec![k as f64 * bundle.orbit.period, 0.0],
            };
            (spec, sol)
        };
        // a phase on a mesh break rotates intervals onto intervals: the
        // seed then satisfies the collocation system to roundoff
        let aligned = bundle.orbit.seg.mesh.breaks()[7];
        for k in [1usize, 2] {
            let (spec, sol) = make(aligned, k);
            let r = residual_norm(&spec, &sol, &[]);
            println!("aligned phase, k = {k}: seed residual {r:.3e}");
            assert!(r < 1e-9, "aligned wrap must be exact, residual {r}");
        }
        // a generic phase cuts one interval; there the polynomial only
        // satisfies the ODE to O(h^ncol) between its own Gauss nodes, and
        // one Newton step wipes that out
        let (spec, mut sol) = make(0.3, 1);
        let r = residual_norm(&spec, &sol, &[]);
        println!("generic phase: seed residual {r:.3e}");
        assert!(r < 1e-4, "cut-interval seed should still be close, residual {r}");
        let pin_spec = isochron_spec(
            &model,
            [
                bundle.orbit.point_at_phase(0.3)[0],
                bundle.orbit.point_at_phase(0.3)[1],
            ],
            {
                let v = bundle.v.eval(0.3);
                let vn = (v[0] * v[0] + v[1] * v[1]).sqrt();
                [v[0] / vn, v[1] / vn]
            },
            false,
        );
        newton_solve(&pin_spec, &mut sol, &[], &NewtonOptions::default()).unwrap();
        let r = residual_norm(&spec, &sol, &[]);
        println!("after polish: residual {r:.3e}");
        assert!(r < 1e-10);
    }

    #[test]
    fn winfree_isochron_points_have_the_right_phase() {
        // a = 0 has the explicit phase map, so every traced point can be
        // checked against it directly.
        let (model, bundle) = winfree_bundle(0.0);
        let mut opts = IsochronOptions::default();
        opts.eta_max = 0.02;
        opts.arclength_budget = 1.6;
        let theta = 0.3;
        let (side_a, side_b) = compute_isochron_pair(&model, &bundle, theta, &opts).unwrap();
        for (branch, what) in [(&side_a, "one side"), (&side_b, "other side")] {
            println!(
                "{what}: {} points, final k = {}, stop {:?}, reach {:.3}",
                branch.points.len(),
                branch.final_k,
                branch.stop,
                branch.points.last().map_or(0.0, |p| p.arclength)
            );
            assert!(branch.points.len() > 15, "{what}: too few points");
            for p in &branch.points {
                let ph = winfree_phase_closed_form(0.0, -0.5, p.x[0], p.x[1])
                    .expect("phase defined away from the origin");
                let err = circular_distance(ph, theta);
                assert!(
                    err < 1.5e-3,
                    "{what}: phase {ph} at {:?} (η {:.3e}, k {}), err {err:.2e}",
                    p.x,
                    p.eta,
                    p.k
                );
            }
        }
        // the two signs leave the cycle on opposite sides
        let r_out: f64 = side_a.points.last().map(|p| (p.x[0].powi(2) + p.x[1].powi(2)).sqrt()).unwrap();
        let r_in: f64 = side_b.points.last().map(|p| (p.x[0].powi(2) + p.x[1].powi(2)).sqrt()).unwrap();
        println!("radial reach: {r_out:.3} vs {r_in:.3}");
        assert!(
            (r_out - 1.0) * (r_in - 1.0) < 0.0,
            "branches should bracket the cycle: {r_out}, {r_in}"
        );
    }

    #[test]
    fn weak_contraction_forces_period_extensions() {
        // a = 0.9 contracts by only e^{−0.2π} per lap, so the trust region
        // caps out repeatedly and the segment must grow through several k.
        let (model, bundle) = winfree_bundle(0.9);
        let mut opts = IsochronOptions::default();
        opts.eta_max = 0.05;
        opts.arclength_budget = 1.0;
        let theta = 0.25;
        let branch = compute_isochron(&model, &bundle, theta, 1.0, &opts).unwrap();
        println!(
            "final k = {}, stop {:?}, points {}",
            branch.final_k,
            branch.stop,
            branch.points.len()
        );
        assert!(branch.final_k >= 3, "expected period extensions, k = {}", branch.final_k);
        for p in &branch.points {
            let ph = winfree_phase_closed_form(0.9, -0.5, p.x[0], p.x[1]).unwrap();
            let err = circular_distance(ph, theta);
            assert!(err < 2e-3, "phase err {err:.2e} at {:?} (k {})", p.x, p.k);
        }
        let reach = branch.points.last().unwrap().arclength;
        assert!(reach > 0.9, "budget not reached: {reach}");
    }

    #[test]
    fn inward_branch_stalls_at_the_basin_boundary() {
        // a = 0.25: the repelling circle r = a bounds the cycle's basin;
        // the inward isochron can approach but never cross it.
        let (model, bundle) = winfree_bundle(0.25);
        let mut opts = IsochronOptions::default();
        opts.arclength_budget = 5.0; // more than the distance to the boundary
        opts.k_max = 8;
        opts.continuation.ds_min = 1e-8;
        // pick the sign that moves u(0) toward the origin
        let g = bundle.orbit.point_at_phase(0.0);
        let v = bundle.v.eval(0.0);
        let inward = if (g[0] + 0.01 * v[0]).powi(2) + (g[1] + 0.01 * v[1]).powi(2)
            < g[0].powi(2) + g[1].powi(2)
        {
            1.0
        } else {
            -1.0
        };
        let branch = compute_isochron(&model, &bundle, 0.0, inward, &opts).unwrap();
        let r_min = branch
            .points
            .iter()
            .map(|p| (p.x[0].powi(2) + p.x[1].powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        println!("stop {:?}, r_min {r_min:.4}, k {}", branch.stop, branch.final_k);
        // never pierced the boundary, but got close to it
        assert!(r_min > 0.25 - 1e-3, "crossed the basin boundary: r = {r_min}");
        assert!(r_min < 0.4, "never approached the boundary: r = {r_min}");
        // spiralling along the boundary eats arclength (Predicate) or step
        // size (StepUnderflow) or period extensions (k-budget) -- any of
        // those is the computation refusing to cross, which is the point
        assert!(
            branch.stop == StopReason::StepUnderflow
                || branch.stop == StopReason::Event("k-budget".into())
                || branch.stop == StopReason::Predicate
                || branch.stop == StopReason::MaxSteps,
            "unexpected stop {:?}",
            branch.stop
        );
    }
}
