//! Pseudo-arclength continuation of one-parameter BVP solution families.
//!
//! The corrector is the bordered Newton solver from [`crate::bvp`] with one
//! extra row: Keller's arclength condition ⟨X − X_prev, t⟩_w = ds in a
//! weighted norm that balances mesh values against parameters. Tangents are
//! computed with the same bordered solve (previous tangent as the border row,
//! unit right-hand side), which keeps orientation continuous across folds by
//! construction. Parameter-target events are resolved exactly by re-solving
//! with the arclength row swapped for a parameter pin.

use crate::bvp::{
    newton_solve, solve_newton_system, BorderConstraint, BorderRow, BvpSolution, BvpSpec,
    NewtonOptions,
};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ContinuationOptions {
    /// Initial arclength step (magnitude; direction comes from `dir`).
    pub ds0: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub max_steps: usize,
    pub newton: NewtonOptions,
    /// Step growth after fast corrections (≤ 3 Newton iterations).
    pub grow: f64,
    pub shrink: f64,
    pub verbose: bool,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions {
            ds0: 1e-2,
            ds_min: 1e-10,
            ds_max: 0.2,
            max_steps: 2000,
            newton: NewtonOptions::default(),
            grow: 1.3,
            shrink: 0.5,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventAction {
    Record,
    Stop,
}

/// Fires when the named (free) parameter crosses `target` between two
/// accepted steps; the crossing is then resolved exactly by a pinned solve.
#[derive(Clone)]
pub struct Event {
    pub name: String,
    pub param: String,
    pub target: f64,
    pub action: EventAction,
}

pub struct EventHit {
    pub name: String,
    pub step: usize,
    pub solution: BvpSolution,
}

/// One accepted continuation step: all parameter values plus tracker reads.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub step: usize,
    pub arclength: f64,
    pub params: Vec<f64>,
    pub tracked: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    /// A Stop event fired (name recorded).
    Event(String),
    MaxSteps,
    /// The caller's stop predicate returned true.
    Predicate,
    /// Step size shrank below ds_min (corrector or validator kept failing).
    StepUnderflow,
}

pub struct Branch {
    pub points: Vec<BranchPoint>,
    pub events: Vec<EventHit>,
    pub stop: StopReason,
    /// Solution at the last accepted step.
    pub last: BvpSolution,
    /// Tangent at the last accepted step (unit weighted norm).
    pub last_tangent: Vec<f64>,
}

/// Per-step hooks. Trackers log scalars along the branch; the validator can
/// veto a corrected step (treated like a corrector failure); the stop
/// predicate ends the run after an accepted step.
pub struct Hooks<'a> {
    pub trackers: Vec<(String, Box<dyn Fn(&BvpSolution) -> f64 + 'a>)>,
    pub validate: Option<Box<dyn Fn(&BvpSolution) -> bool + 'a>>,
    pub stop_when: Option<Box<dyn Fn(&BvpSolution, usize) -> bool + 'a>>,
    pub events: Vec<Event>,
}

impl Default for Hooks<'_> {
    fn default() -> Self {
        Hooks {
            trackers: Vec::new(),
            validate: None,
            stop_when: None,
            events: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Weighted geometry

/// ⟨a, b⟩ with mesh values averaged (1/n_points) and parameters at unit
/// weight, so mesh refinement does not change arclength scales.
pub fn weighted_dot(a: &[f64], b: &[f64], n_point_values: usize, n_points: usize) -> f64 {
    let w = 1.0 / n_points as f64;
    let mut s = 0.0;
    for i in 0..n_point_values {
        s += w * a[i] * b[i];
    }
    for i in n_point_values..a.len() {
        s += a[i] * b[i];
    }
    s
}

struct ArcRow<'a> {
    prev: &'a BvpSolution,
    tangent: &'a [f64],
    ds: f64,
    n_points: usize,
    free_idx: &'a [usize],
}

impl BorderConstraint for ArcRow<'_> {
    fn residual(&self, sol: &BvpSolution) -> f64 {
        let np = sol.seg.n_points() * sol.seg.dim;
        let w = 1.0 / self.n_points as f64;
        let mut s = 0.0;
        for i in 0..np {
            s += w * (sol.seg.values()[i] - self.prev.seg.values()[i]) * self.tangent[i];
        }
        for (k, &pi) in self.free_idx.iter().enumerate() {
            s += (sol.params[pi] - self.prev.params[pi]) * self.tangent[np + k];
        }
        s - self.ds
    }

    fn row(&self, sol: &BvpSolution) -> BorderRow {
        let np = sol.seg.n_points() * sol.seg.dim;
        let w = 1.0 / self.n_points as f64;
        BorderRow {
            by_point: self.tangent[..np].iter().map(|t| w * t).collect(),
            by_param: self.tangent[np..].to_vec(),
        }
    }
}

/// Pins free parameter `pi` (position `free_pos` among `nf` free ones).
struct PinRow {
    pi: usize,
    free_pos: usize,
    nf: usize,
    target: f64,
}

impl BorderConstraint for PinRow {
    fn residual(&self, sol: &BvpSolution) -> f64 {
        sol.params[self.pi] - self.target
    }
    fn row(&self, sol: &BvpSolution) -> BorderRow {
        let mut by_param = vec![0.0; self.nf];
        by_param[self.free_pos] = 1.0;
        BorderRow {
            by_point: vec![0.0; sol.seg.n_points() * sol.seg.dim],
            by_param,
        }
    }
}

/// Border row with constant coefficients and residual −1: at a converged
/// point the Newton solve then returns the tangent direction t with
/// ⟨row, t⟩ = 1, since all other right-hand sides are ≈ 0.
struct UnitRhsRow {
    by_point: Vec<f64>,
    by_param: Vec<f64>,
}

impl BorderConstraint for UnitRhsRow {
    fn residual(&self, _sol: &BvpSolution) -> f64 {
        -1.0
    }
    fn row(&self, _sol: &BvpSolution) -> BorderRow {
        BorderRow {
            by_point: self.by_point.clone(),
            by_param: self.by_param.clone(),
        }
    }
}

/// Tangent of the solution family at a converged `sol`, oriented so that
/// ⟨reference, tangent⟩_w > 0, normalized to unit weighted norm.
pub fn family_tangent(
    spec: &BvpSpec,
    sol: &BvpSolution,
    reference: &[f64],
) -> Result<Vec<f64>> {
    let np = sol.seg.n_points() * sol.seg.dim;
    let n_points = sol.seg.n_points();
    let w = 1.0 / n_points as f64;
    let row = UnitRhsRow {
        by_point: reference[..np].iter().map(|t| w * t).collect(),
        by_param: reference[np..].to_vec(),
    };
    let mut t = solve_newton_system(spec, sol, &[&row], spec_solver(spec))?;
    let norm = weighted_dot(&t, &t, np, n_points).sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::SingularJacobian("tangent has zero norm".into()));
    }
    t.iter_mut().for_each(|v| *v /= norm);
    Ok(t)
}

// solver choice for internal solves; kept in one place
fn spec_solver(_spec: &BvpSpec) -> crate::bvp::LinearSolver {
    crate::bvp::LinearSolver::Auto
}

/// Coordinate reference direction for the first tangent: unit weight on one
/// free parameter, `sign` = ±1 picking the initial direction of travel.
pub fn coordinate_reference(
    spec: &BvpSpec,
    sol: &BvpSolution,
    param: &str,
    sign: f64,
) -> Result<Vec<f64>> {
    let pi = spec.params.index(param)?;
    let free_idx = spec.params.free_indices();
    let pos = free_idx
        .iter()
        .position(|&i| i == pi)
        .ok_or_else(|| Error::InvalidInput(format!("parameter '{param}' is not free")))?;
    let np = sol.seg.n_points() * sol.seg.dim;
    let mut r = vec![0.0; np + free_idx.len()];
    r[np + pos] = sign;
    Ok(r)
}

// ---------------------------------------------------------------------------
// The driver

/// Continue the family from `start` (which is first polished with the
/// primary parameter pinned). `primary` names the free parameter whose
/// initial direction of change is `dir` (±1).
pub fn continue_branch(
    spec: &BvpSpec,
    start: &BvpSolution,
    primary: &str,
    dir: f64,
    opts: &ContinuationOptions,
    hooks: &Hooks,
) -> Result<Branch> {
    let free_idx = spec.params.free_indices();
    let nf = free_idx.len();
    if spec.wellposedness_index() != 1 {
        return Err(Error::InvalidInput(format!(
            "continuation needs wellposedness index 1, got {}",
            spec.wellposedness_index()
        )));
    }
    let n_points = start.seg.n_points();

    // polish the seed with the primary parameter frozen
    let pi0 = spec.params.index(primary)?;
    let pos0 = free_idx.iter().position(|&i| i == pi0).ok_or_else(|| {
        Error::InvalidInput(format!("primary parameter '{primary}' must be free"))
    })?;
    let mut sol = start.clone();
    {
        let pin = PinRow {
            pi: pi0,
            free_pos: pos0,
            nf,
            target: sol.params[pi0],
        };
        newton_solve(spec, &mut sol, &[&pin], &opts.newton)?;
    }

    let reference = coordinate_reference(spec, &sol, primary, dir)?;
    let mut tangent = family_tangent(spec, &sol, &reference)?;

    let mut branch = Branch {
        points: Vec::new(),
        events: Vec::new(),
        stop: StopReason::MaxSteps,
        last: sol.clone(),
        last_tangent: tangent.clone(),
    };
    let mut arclength = 0.0;
    record_point(&mut branch, 0, arclength, &sol, hooks);

    let mut ds = opts.ds0.abs();
    let mut step = 0usize;
    'outer: while step < opts.max_steps {
        step += 1;
        // predictor
        let mut candidate = sol.clone();
        candidate.apply_step(spec, &tangent, ds);
        let arc = ArcRow {
            prev: &sol,
            tangent: &tangent,
            ds,
            n_points,
            free_idx: &free_idx,
        };
        let corrected = newton_solve(spec, &mut candidate, &[&arc], &opts.newton);
        let ok = match &corrected {
            Ok(report) => {
                let valid = hooks.validate.as_ref().map_or(true, |v| v(&candidate));
                if opts.verbose {
                    println!(
                        "step {step}: ds {ds:+.3e}, {} newton its, residual {:.2e}{}",
                        report.iterations,
                        report.residual_norm,
                        if valid { "" } else { " [rejected by validator]" }
                    );
                }
                valid
            }
            Err(_) => false,
        };
        if !ok {
            ds *= opts.shrink;
            if ds < opts.ds_min {
                branch.stop = StopReason::StepUnderflow;
                break 'outer;
            }
            continue;
        }
        let report = corrected.unwrap();

        // events between sol and candidate
        for ev in &hooks.events {
            let pi = spec.params.index(&ev.param)?;
            let a = sol.params[pi];
            let b = candidate.params[pi];
            if (a - ev.target) * (b - ev.target) < 0.0 {
                let hit = resolve_event(spec, &sol, &candidate, pi, ev, opts)?;
                branch.events.push(EventHit {
                    name: ev.name.clone(),
                    step,
                    solution: hit,
                });
                if ev.action == EventAction::Stop {
                    // keep the pre-event state as the branch tip
                    branch.stop = StopReason::Event(ev.name.clone());
                    arclength += ds;
                    record_point(&mut branch, step, arclength, &candidate, hooks);
                    sol = candidate;
                    break 'outer;
                }
            }
        }

        // accept
        arclength += ds;
        record_point(&mut branch, step, arclength, &candidate, hooks);
        tangent = family_tangent(spec, &candidate, &tangent)?;
        sol = candidate;
        if report.iterations <= 3 {
            ds = (ds * opts.grow).min(opts.ds_max);
        }
        if let Some(stop) = &hooks.stop_when {
            if stop(&sol, step) {
                branch.stop = StopReason::Predicate;
                break;
            }
        }
    }

    branch.last = sol;
    branch.last_tangent = tangent;
    Ok(branch)
}

fn record_point(branch: &mut Branch, step: usize, arclength: f64, sol: &BvpSolution, hooks: &Hooks) {
    let tracked = hooks.trackers.iter().map(|(_, f)| f(sol)).collect();
    branch.points.push(BranchPoint {
        step,
        arclength,
        params: sol.params.clone(),
        tracked,
    });
}

/// Solve for the exact parameter-target crossing between two accepted
/// steps: secant-interpolated seed, arc row swapped for a parameter pin.
fn resolve_event(
    spec: &BvpSpec,
    before: &BvpSolution,
    after: &BvpSolution,
    pi: usize,
    ev: &Event,
    opts: &ContinuationOptions,
) -> Result<BvpSolution> {
    let a = before.params[pi];
    let b = after.params[pi];
    let lambda = ((ev.target - a) / (b - a)).clamp(0.0, 1.0);
    let mut seed = before.clone();
    for (v, (x, y)) in seed
        .seg
        .values_mut()
        .iter_mut()
        .zip(before.seg.values().iter().zip(after.seg.values()))
    {
        *v = x + lambda * (y - x);
    }
    for (p, (x, y)) in seed
        .params
        .iter_mut()
        .zip(before.params.iter().zip(after.params.iter()))
    {
        *p = x + lambda * (y - x);
    }
    let free_idx = spec.params.free_indices();
    let free_pos = free_idx.iter().position(|&i| i == pi).ok_or_else(|| {
        Error::InvalidInput(format!("event parameter '{}' is not free", ev.param))
    })?;
    let pin = PinRow {
        pi,
        free_pos,
        nf: free_idx.len(),
        target: ev.target,
    };
    let mut tight = opts.newton.clone();
    tight.tol = tight.tol.min(1e-10);
    newton_solve(spec, &mut seed, &[&pin], &tight)?;
    Ok(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvp::{BoundaryConditions, OdeRhs, ParamSet};
    use crate::mesh::{Mesh, OrbitSegment};
    use std::sync::Arc;

    /// y' = 0 with boundary condition y(0)² + p² = 1: the solution family
    /// is the unit circle in the (y, p) plane, with folds at p = ±1.
    struct Flat;
    impl OdeRhs for Flat {
        fn dim(&self) -> usize {
            1
        }
        fn npar(&self) -> usize {
            1
        }
        fn eval(&self, _y: &[f64], _q: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn jac_y(&self, _y: &[f64], _q: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn jac_q(&self, _y: &[f64], _q: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    struct CircleBc;
    impl BoundaryConditions for CircleBc {
        fn nbc(&self) -> usize {
            1
        }
        fn eval(&self, y0: &[f64], _y1: &[f64], q: &[f64], out: &mut [f64]) {
            out[0] = y0[0] * y0[0] + q[0] * q[0] - 1.0;
        }
        fn jac(
            &self,
            y0: &[f64],
            _y1: &[f64],
            q: &[f64],
            j0: &mut [f64],
            j1: &mut [f64],
            jq: &mut [f64],
        ) {
            j0[0] = 2.0 * y0[0];
            j1.fill(0.0);
            jq[0] = 2.0 * q[0];
        }
    }

    fn circle_spec() -> BvpSpec {
        BvpSpec {
            rhs: Arc::new(Flat),
            bc: Arc::new(CircleBc),
            integral: None,
            params: ParamSet::new(&["p"]).free_named(&["p"]).unwrap(),
        }
    }

    fn circle_start() -> BvpSolution {
        BvpSolution {
            seg: OrbitSegment::from_fn(Mesh::uniform(3), 4, 1, |_s, out| out[0] = 1.0),
            params: vec![0.0],
        }
    }

    #[test]
    fn follows_the_circle_through_both_folds() {
        let spec = circle_spec();
        let opts = ContinuationOptions {
            ds0: 0.05,
            ds_max: 0.1,
            max_steps: 200,
            ..Default::default()
        };
        let hooks = Hooks {
            trackers: vec![("y0".into(), Box::new(|s: &BvpSolution| s.seg.first()[0]))],
            ..Default::default()
        };
        let branch = continue_branch(&spec, &circle_start(), "p", 1.0, &opts, &hooks).unwrap();
        assert_eq!(branch.stop, StopReason::MaxSteps);
        let mut p_min = f64::INFINITY;
        let mut p_max = f64::NEG_INFINITY;
        let mut y_min = f64::INFINITY;
        for pt in &branch.points {
            let (p, y) = (pt.params[0], pt.tracked[0]);
            assert!((y * y + p * p - 1.0).abs() < 1e-8, "left the circle: ({y}, {p})");
            p_min = p_min.min(p);
            p_max = p_max.max(p);
            y_min = y_min.min(y);
        }
        // both folds passed and the far side reached
        assert!(p_max > 0.99 && p_min < -0.99, "p range [{p_min}, {p_max}]");
        assert!(y_min < -0.99, "never reached the bottom of the circle");
        // full loop at ds ≤ 0.1 in 200 steps means arclength past 2π
        assert!(branch.points.last().unwrap().arclength > std::f64::consts::TAU);
    }

    #[test]
    fn initial_direction_is_respected() {
        let spec = circle_spec();
        let opts = ContinuationOptions {
            ds0: 0.02,
            max_steps: 3,
            ..Default::default()
        };
        let hooks = Hooks::default();
        let plus = continue_branch(&spec, &circle_start(), "p", 1.0, &opts, &hooks).unwrap();
        assert!(plus.points.last().unwrap().params[0] > 0.01);
        let minus = continue_branch(&spec, &circle_start(), "p", -1.0, &opts, &hooks).unwrap();
        assert!(minus.points.last().unwrap().params[0] < -0.01);
    }

    #[test]
    fn events_are_resolved_exactly_and_can_stop() {
        let spec = circle_spec();
        let opts = ContinuationOptions {
            ds0: 0.07,
            ds_max: 0.15,
            max_steps: 400,
            ..Default::default()
        };
        let hooks = Hooks {
            events: vec![Event {
                name: "p-half".into(),
                param: "p".into(),
                target: 0.5,
                action: EventAction::Record,
            }],
            ..Default::default()
        };
        let branch = continue_branch(&spec, &circle_start(), "p", 1.0, &opts, &hooks).unwrap();
        // the circle crosses p = 0.5 with y > 0 and again with y < 0
        assert!(branch.events.len() >= 2, "got {} hits", branch.events.len());
        for hit in &branch.events {
            assert!((hit.solution.params[0] - 0.5).abs() < 1e-10);
            let y = hit.solution.seg.first()[0];
            assert!((y.abs() - 0.75f64.sqrt()).abs() < 1e-9);
        }
        let ys: Vec<f64> = branch
            .events
            .iter()
            .take(2)
            .map(|h| h.solution.seg.first()[0])
            .collect();
        assert!(ys[0] > 0.0 && ys[1] < 0.0, "hits should bracket the fold: {ys:?}");

        // stopping variant
        let hooks = Hooks {
            events: vec![Event {
                name: "stop-here".into(),
                param: "p".into(),
                target: 0.8,
                action: EventAction::Stop,
            }],
            ..Default::default()
        };
        let branch = continue_branch(&spec, &circle_start(), "p", 1.0, &opts, &hooks).unwrap();
        assert_eq!(branch.stop, StopReason::Event("stop-here".into()));
        assert_eq!(branch.events.len(), 1);
    }

    #[test]
    fn validator_rejection_causes_step_underflow() {
        let spec = circle_spec();
        let opts = ContinuationOptions {
            ds0: 0.05,
            ds_min: 1e-6,
            max_steps: 500,
            ..Default::default()
        };
        // forbid the lower half: continuation must stall near y = 0
        let hooks = Hooks {
            validate: Some(Box::new(|s: &BvpSolution| s.seg.first()[0] > 0.0)),
            ..Default::default()
        };
        let branch = continue_branch(&spec, &circle_start(), "p", 1.0, &opts, &hooks).unwrap();
        assert_eq!(branch.stop, StopReason::StepUnderflow);
        let last = branch.points.last().unwrap();
        // stalled right at the fold where y crosses zero: p ≈ 1
        assert!(last.params[0] > 0.999, "stalled at p = {}", last.params[0]);
    }

    #[test]
    fn stop_predicate_ends_the_run() {
        let spec = circle_spec();
        let opts = ContinuationOptions {
            ds0: 0.05,
            max_steps: 500,
            ..Default::default()
        };
        let hooks = Hooks {
            stop_when: Some(Box::new(|s: &BvpSolution, _| s.params[0] > 0.7)),
            ..Default::default()
        };
        let branch = continue_branch(&spec, &circle_start(), "p", 1.0, &opts, &hooks).unwrap();
        assert_eq!(branch.stop, StopReason::Predicate);
        assert!(branch.last.params[0] > 0.7);
    }

    #[test]
    fn tangent_is_unit_in_the_weighted_norm() {
        let spec = circle_spec();
        let sol = {
            let mut s = circle_start();
            let pin = PinRow {
                pi: 0,
                free_pos: 0,
                nf: 1,
                target: 0.0,
            };
            newton_solve(&spec, &mut s, &[&pin], &NewtonOptions::default()).unwrap();
            s
        };
        let reference = coordinate_reference(&spec, &sol, "p", 1.0).unwrap();
        let t = family_tangent(&spec, &sol, &reference).unwrap();
        let np = sol.seg.n_points() * sol.seg.dim;
        let norm = weighted_dot(&t, &t, np, sol.seg.n_points()).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // at (y, p) = (1, 0) the circle's tangent is pure p
        assert!(t[np].abs() > 0.99);
    }
}
