//! Direct-integration oracle.
//!
//! An embedded Runge–Kutta 5(4) integrator (Dormand–Prince coefficients, PI
//! step control, fourth-order dense output) plus the measurement routines
//! built on it: first-return times, projection of a point onto a stored
//! cycle, and asymptotic phase by integrating forward in whole periods until
//! the phase reading settles. This is the slow, trusted path the collocation
//! results are validated against; it shares no code with the BVP machinery.

use crate::model::{Perturbation, PerturbationKind, PulsedField, VectorField};
use crate::par::par_map;
use crate::{Error, Result};

// Dormand–Prince 5(4) tableau (the field is autonomous, so only the
// stage weights matter).
const A21: f64 = 0.2;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// Error weights (5th minus embedded 4th order solution).
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Dense-output weights.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFE: f64 = 0.9;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const FAC_MIN: f64 = 0.2; // largest allowed shrink per step
const FAC_MAX: f64 = 10.0; // largest allowed growth per step

#[derive(Debug, Clone)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub h_max: Option<f64>,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rtol: 1e-10,
            atol: 1e-10,
            max_steps: 50_000_000,
            h_max: None,
        }
    }
}

impl IntegratorOptions {
    pub fn with_tol(tol: f64) -> Self {
        IntegratorOptions {
            rtol: tol,
            atol: tol,
            ..Default::default()
        }
    }
}

/// One accepted step's dense-output record: on s = (t − t0)/h ∈ [0, 1],
/// y(s) = c0 + s (c1 + (1−s)(c2 + s (c3 + (1−s) c4))).
struct DenseStep {
    t0: f64,
    h: f64,
    cont: Vec<f64>, // 5 × dim, contiguous
}

/// A forward trajectory with dense output over [t_start, t_end].
pub struct Trajectory {
    dim: usize,
    t_start: f64,
    t_end: f64,
    steps: Vec<DenseStep>,
    y_end: Vec<f64>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn t_start(&self) -> f64 {
        self.t_start
    }
    pub fn t_end(&self) -> f64 {
        self.t_end
    }
    pub fn end_state(&self) -> &[f64] {
        &self.y_end
    }
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Interpolated state at `t` (clamped to the integration span).
    pub fn at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let t = t.clamp(self.t_start.min(self.t_end), self.t_end.max(self.t_start));
        // binary search for the step containing t
        let idx = self
            .steps
            .partition_point(|s| s.t0 + s.h < t)
            .min(self.steps.len() - 1);
        let step = &self.steps[idx];
        let n = self.dim;
        let s = ((t - step.t0) / step.h).clamp(0.0, 1.0);
        let s1 = 1.0 - s;
        let c = &step.cont;
        for i in 0..n {
            out[i] = c[i]
                + s * (c[n + i] + s1 * (c[2 * n + i] + s * (c[3 * n + i] + s1 * c[4 * n + i])));
        }
    }
}

/// Integrate x' = F(x) from `x0` over [t0, t1] (t1 > t0), keeping dense output.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    let mut steps = Vec::new();
    let y_end = drive(field, x0, t0, t1, opts, Some(&mut steps))?;
    Ok(Trajectory {
        dim: field.dim(),
        t_start: t0,
        t_end: t1,
        steps,
        y_end,
    })
}

/// Endpoint-only integration; no dense storage.
pub fn propagate<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    opts: &IntegratorOptions,
) -> Result<Vec<f64>> {
    drive(field, x0, t0, t1, opts, None)
}

fn rms_scaled(v: &[f64], sc: &[f64]) -> f64 {
    let s: f64 = v.iter().zip(sc).map(|(a, s)| (a / s) * (a / s)).sum();
    (s / v.len() as f64).sqrt()
}

fn initial_step<F: VectorField + ?Sized>(
    field: &F,
    y0: &[f64],
    f0: &[f64],
    span: f64,
    opts: &IntegratorOptions,
) -> f64 {
    let n = y0.len();
    let sc: Vec<f64> = y0
        .iter()
        .map(|y| opts.atol + opts.rtol * y.abs())
        .collect();
    let d0 = rms_scaled(y0, &sc);
    let d1 = rms_scaled(f0, &sc);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
    .min(span);
    let y1: Vec<f64> = (0..n).map(|i| y0[i] + h0 * f0[i]).collect();
    let mut f1 = vec![0.0; n];
    field.eval(&y1, &mut f1);
    let df: Vec<f64> = (0..n).map(|i| f1[i] - f0[i]).collect();
    let d2 = rms_scaled(&df, &sc) / h0;
    let der12 = d1.max(d2);
    let h1 = if der12 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / der12).powf(0.2)
    };
    let mut h = (100.0 * h0).min(h1).min(span);
    if let Some(hm) = opts.h_max {
        h = h.min(hm);
    }
    h
}

fn drive<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    opts: &IntegratorOptions,
    mut dense: Option<&mut Vec<DenseStep>>,
) -> Result<Vec<f64>> {
    assert!(t1 > t0, "integration span must be forward");
    let n = field.dim();
    assert_eq!(x0.len(), n);

    let mut t = t0;
    let mut y = x0.to_vec();
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; n]).collect();
    let mut y_stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];

    field.eval(&y, &mut k[0]);
    let mut h = initial_step(field, &y, &k[0], t1 - t0, opts);
    let mut fac_old: f64 = 1e-4;
    let mut rejected = false;

    for _step in 0..opts.max_steps {
        if t >= t1 {
            return Ok(y);
        }
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        if h <= f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::StepFailure {
                t,
                reason: format!("step size underflow (h = {h:.3e})"),
            });
        }

        // seven stages, FSAL: k[0] is F at (t, y)
        for i in 0..n {
            y_stage[i] = y[i] + h * A21 * k[0][i];
        }
        field.eval(&y_stage, &mut k[1]);
        for i in 0..n {
            y_stage[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i]);
        }
        field.eval(&y_stage, &mut k[2]);
        for i in 0..n {
            y_stage[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
        }
        field.eval(&y_stage, &mut k[3]);
        for i in 0..n {
            y_stage[i] =
                y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
        }
        field.eval(&y_stage, &mut k[4]);
        for i in 0..n {
            y_stage[i] = y[i]
                + h * (A61 * k[0][i]
                    + A62 * k[1][i]
                    + A63 * k[2][i]
                    + A64 * k[3][i]
                    + A65 * k[4][i]);
        }
        field.eval(&y_stage, &mut k[5]);
        for i in 0..n {
            y_new[i] = y[i]
                + h * (A71 * k[0][i]
                    + A73 * k[2][i]
                    + A74 * k[3][i]
                    + A75 * k[4][i]
                    + A76 * k[5][i]);
        }
        field.eval(&y_new, &mut k[6]);

        let mut err_sq = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k[0][i]
                    + E3 * k[2][i]
                    + E4 * k[3][i]
                    + E5 * k[4][i]
                    + E6 * k[5][i]
                    + E7 * k[6][i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / n as f64).sqrt();

        if !err.is_finite() {
            // a stage left the domain; retreat hard
            h *= 0.1;
            rejected = true;
            continue;
        }

        let fac11 = err.powf(EXPO1);
        if err <= 1.0 {
            // accept; PI control uses the previous step's error
            let mut fac = (fac11 / fac_old.powf(BETA) / SAFE).max(1.0 / FAC_MAX);
            if rejected {
                fac = fac.max(1.0); // no growth right after a rejection
            }
            fac = fac.min(1.0 / FAC_MIN);
            fac_old = err.max(1e-4);
            if let Some(out) = dense.as_deref_mut() {
                let mut cont = vec![0.0; 5 * n];
                for i in 0..n {
                    let ydiff = y_new[i] - y[i];
                    let bspl = h * k[0][i] - ydiff;
                    cont[i] = y[i];
                    cont[n + i] = ydiff;
                    cont[2 * n + i] = bspl;
                    cont[3 * n + i] = ydiff - h * k[6][i] - bspl;
                    cont[4 * n + i] = h
                        * (D1 * k[0][i]
                            + D3 * k[2][i]
                            + D4 * k[3][i]
                            + D5 * k[4][i]
                            + D6 * k[5][i]
                            + D7 * k[6][i]);
                }
                out.push(DenseStep { t0: t, h, cont });
            }
            t += h;
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6); // FSAL
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::StepFailure {
                    t,
                    reason: "state became non-finite".into(),
                });
            }
            h /= fac;
            if let Some(hm) = opts.h_max {
                h = h.min(hm);
            }
            rejected = false;
        } else {
            rejected = true;
            h /= (fac11 / SAFE).min(1.0 / FAC_MIN);
        }
    }
    Err(Error::StepFailure {
        t,
        reason: format!("step budget of {} exhausted", opts.max_steps),
    })
}

// ---------------------------------------------------------------------------
// Reference cycles and phase measurement

/// One stored period of a limit cycle with dense interpolation, used to read
/// phases off trajectories. Phase 0 is the anchor point; phase is time along
/// the cycle divided by the period.
pub struct ReferenceCycle {
    pub period: f64,
    traj: Trajectory,
    scan_points: usize,
    diameter: f64,
}

impl ReferenceCycle {
    /// Integrate one period from `anchor` (assumed on the cycle).
    pub fn from_anchor<F: VectorField + ?Sized>(
        field: &F,
        anchor: &[f64],
        period: f64,
        opts: &IntegratorOptions,
    ) -> Result<Self> {
        let traj = integrate(field, anchor, 0.0, period, opts)?;
        let mut lo = vec![f64::INFINITY; field.dim()];
        let mut hi = vec![f64::NEG_INFINITY; field.dim()];
        let m = 256;
        for j in 0..=m {
            let y = traj.at(period * j as f64 / m as f64);
            for i in 0..y.len() {
                lo[i] = lo[i].min(y[i]);
                hi[i] = hi[i].max(y[i]);
            }
        }
        let diameter = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt();
        Ok(ReferenceCycle {
            period,
            traj,
            scan_points: 512,
            diameter,
        })
    }

    /// Bounding-box diagonal of the cycle, the natural length scale.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// γ at phase θ (θ taken mod 1).
    pub fn point_at_phase(&self, theta: f64) -> Vec<f64> {
        let th = theta.rem_euclid(1.0);
        self.traj.at(th * self.period)
    }

    /// Phase of the closest point on the cycle and the distance to it:
    /// coarse scan over `scan_points` samples, then golden-section
    /// refinement on the bracketing arc.
    pub fn nearest_phase(&self, x: &[f64]) -> (f64, f64) {
        let m = self.scan_points;
        let mut best_j = 0usize;
        let mut best_d = f64::INFINITY;
        let mut y = vec![0.0; self.traj.dim()];
        let dist_at = |t: f64, y: &mut Vec<f64>| -> f64 {
            self.traj
                .eval_into(t.rem_euclid(self.period), y.as_mut_slice());
            x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        for j in 0..m {
            let d = dist_at(self.period * j as f64 / m as f64, &mut y);
            if d < best_d {
                best_d = d;
                best_j = j;
            }
        }
        // golden-section on the two adjacent scan intervals
        let golden = 0.5 * (3.0 - 5.0f64.sqrt());
        let mut a = self.period * (best_j as f64 - 1.0) / m as f64;
        let mut b = self.period * (best_j as f64 + 1.0) / m as f64;
        let mut t1 = a + golden * (b - a);
        let mut t2 = b - golden * (b - a);
        let mut d1 = dist_at(t1, &mut y);
        let mut d2 = dist_at(t2, &mut y);
        for _ in 0..80 {
            if d1 < d2 {
                b = t2;
                t2 = t1;
                d2 = d1;
                t1 = a + golden * (b - a);
                d1 = dist_at(t1, &mut y);
            } else {
                a = t1;
                t1 = t2;
                d1 = d2;
                t2 = b - golden * (b - a);
                d2 = dist_at(t2, &mut y);
            }
            if (b - a).abs() < 1e-14 * self.period {
                break;
            }
        }
        let t_best = 0.5 * (a + b);
        let d_best = dist_at(t_best, &mut y).sqrt();
        ((t_best / self.period).rem_euclid(1.0), d_best)
    }
}

/// Distance between two phases on the unit circle (both taken mod 1).
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

#[derive(Debug, Clone)]
pub struct PhaseEstimate {
    pub theta: f64,
    /// Distance from the cycle at the last reading.
    pub distance: f64,
    /// Whole periods integrated before the reading settled.
    pub periods: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct PhaseOracleOptions {
    pub integrator: IntegratorOptions,
    /// Successive phase readings must agree to this (circularly) twice.
    pub phase_tol: f64,
    pub max_periods: usize,
}

impl Default for PhaseOracleOptions {
    fn default() -> Self {
        PhaseOracleOptions {
            integrator: IntegratorOptions::default(),
            phase_tol: 1e-8,
            max_periods: 200,
        }
    }
}

/// Asymptotic phase of `x0` with respect to `cycle`: flow forward in whole
/// periods — the phase reading of the current point is invariant under the
/// period-T map, and converges as the trajectory is attracted to the cycle.
/// Returns an unconverged estimate (not an error) when the reading fails to
/// settle, e.g. when `x0` belongs to a different attractor's basin.
pub fn asymptotic_phase<F: VectorField + ?Sized>(
    field: &F,
    cycle: &ReferenceCycle,
    x0: &[f64],
    opts: &PhaseOracleOptions,
) -> Result<PhaseEstimate> {
    let t_chunk = cycle.period;
    let escape = 1e6 * (1.0 + cycle.diameter());
    let mut y = x0.to_vec();
    let (mut theta, mut dist) = cycle.nearest_phase(&y);
    let mut agreements = 0;
    for k in 0..opts.max_periods {
        y = propagate(field, &y, 0.0, t_chunk, &opts.integrator)?;
        if y.iter().map(|v| v * v).sum::<f64>().sqrt() > escape {
            return Err(Error::BasinBoundaryApproach(dist));
        }
        let (th_new, d_new) = cycle.nearest_phase(&y);
        if circular_distance(th_new, theta) < opts.phase_tol {
            agreements += 1;
        } else {
            agreements = 0;
        }
        theta = th_new;
        dist = d_new;
        if agreements >= 2 && dist < 1e-4 * (1.0 + cycle.diameter()) {
            return Ok(PhaseEstimate {
                theta,
                distance: dist,
                periods: k + 1,
                converged: true,
            });
        }
    }
    Ok(PhaseEstimate {
        theta,
        distance: dist,
        periods: opts.max_periods,
        converged: false,
    })
}

/// One sampled point of a direct-integration phase transition curve.
#[derive(Debug, Clone)]
pub struct OraclePoint {
    pub theta_old: f64,
    /// `None` when the phase reading did not settle for this point.
    pub theta_new: Option<f64>,
    pub distance: f64,
    pub periods: usize,
}

/// Sample the phase transition curve by brute force: perturb γ(θ) for each
/// requested θ and measure the asymptotic phase of the displaced point.
/// Points run in parallel; non-settling points are flagged, not fatal.
pub fn oracle_ptc(
    field: &dyn VectorField,
    cycle: &ReferenceCycle,
    perturbation: &Perturbation,
    thetas: &[f64],
    opts: &PhaseOracleOptions,
) -> Result<Vec<OraclePoint>> {
    let results = par_map(thetas, |&theta_old| -> Result<OraclePoint> {
        let gamma = cycle.point_at_phase(theta_old);
        let displaced = match perturbation.kind {
            PerturbationKind::Instantaneous => gamma
                .iter()
                .zip(&perturbation.direction)
                .map(|(g, d)| g + perturbation.amplitude * d)
                .collect::<Vec<f64>>(),
            PerturbationKind::Pulse { dt } => {
                let pulsed = PulsedField::new(field, perturbation);
                propagate(&pulsed, &gamma, 0.0, dt, &opts.integrator)?
            }
        };
        match asymptotic_phase(field, cycle, &displaced, opts) {
            Ok(est) => Ok(OraclePoint {
                theta_old,
                theta_new: est.converged.then_some(est.theta),
                distance: est.distance,
                periods: est.periods,
            }),
            Err(Error::BasinBoundaryApproach(d)) => Ok(OraclePoint {
                theta_old,
                theta_new: None,
                distance: d,
                periods: 0,
            }),
            Err(e) => Err(e),
        }
    });
    results.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Return times

/// First return of the flow through the hyperplane ⟨y − x0, F(x0)⟩ = 0 in
/// the positive direction, within distance `accept_radius` of `x0`. The
/// crossing time is refined on the dense output by bisection. Returns
/// (return time, state at return).
pub fn first_return<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t_max: f64,
    accept_radius: f64,
    opts: &IntegratorOptions,
) -> Result<(f64, Vec<f64>)> {
    let n = field.dim();
    let mut normal = vec![0.0; n];
    field.eval(x0, &mut normal);
    let fnorm = normal.iter().map(|a| a * a).sum::<f64>().sqrt();
    if fnorm == 0.0 {
        return Err(Error::InvalidInput(
            "return section is undefined at an equilibrium".into(),
        ));
    }
    for a in normal.iter_mut() {
        *a /= fnorm;
    }
    let plane = |y: &[f64]| -> f64 {
        y.iter()
            .zip(x0)
            .zip(&normal)
            .map(|((yi, xi), ni)| (yi - xi) * ni)
            .sum()
    };

    let traj = integrate(field, x0, 0.0, t_max, opts)?;
    // walk the dense steps looking for − → + crossings
    let mut y_buf = vec![0.0; n];
    let mut t_prev = 0.0;
    let mut p_prev = 0.0; // plane value is exactly 0 at start
    let probes = 8; // sub-step scan so short excursions are not missed
    let mut t = 0.0;
    let dt = t_max / ((traj.n_steps() * probes) as f64).max(64.0);
    while t < t_max {
        t = (t + dt).min(t_max);
        traj.eval_into(t, &mut y_buf);
        let p = plane(&y_buf);
        if p_prev < 0.0 && p >= 0.0 {
            // bisect the crossing
            let (mut ta, mut tb) = (t_prev, t);
            for _ in 0..100 {
                let tm = 0.5 * (ta + tb);
                traj.eval_into(tm, &mut y_buf);
                if plane(&y_buf) < 0.0 {
                    ta = tm;
                } else {
                    tb = tm;
                }
                if tb - ta < 1e-15 * t_max {
                    break;
                }
            }
            let t_cross = 0.5 * (ta + tb);
            traj.eval_into(t_cross, &mut y_buf);
            let dist = y_buf
                .iter()
                .zip(x0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist <= accept_radius {
                return Ok((t_cross, y_buf));
            }
        }
        t_prev = t;
        p_prev = p;
    }
    Err(Error::EventNotReached(format!(
        "no return to the section within t = {t_max}"
    )))
}

// ---------------------------------------------------------------------------
// Closed-form phase for the Winfree model (radial dynamics are separable).
//
// With r' = (1−r)(r−a) r and ψ' = −1 − ω(1−r), the lag accumulated against
// a reference on the cycle is ω ∫₀^∞ (1−r) dt, and the integral evaluates in
// closed form: substituting dt = dr / ((1−r)(r−a)r) gives
//   a = 0:      ∫ (1−r) dt = 1/r₀ − 1,
//   0 < a < 1:  ∫ (1−r) dt = (1/a) · ln[(1−a) r₀ / (r₀ − a)]   (r₀ > a).
// The asymptotic phase of (r₀, ψ₀) is then (ω I − ψ₀) / 2π mod 1.

pub fn winfree_phase_closed_form(a: f64, omega: f64, x: f64, y: f64) -> Option<f64> {
    let r0 = (x * x + y * y).sqrt();
    if r0 <= a || r0 == 0.0 {
        return None; // not in the cycle's basin
    }
    let psi0 = y.atan2(x);
    let integral = if a == 0.0 {
        1.0 / r0 - 1.0
    } else {
        (1.0 / a) * ((1.0 - a) * r0 / (r0 - a)).ln()
    };
    Some(((omega * integral - psi0) / std::f64::consts::TAU).rem_euclid(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Linear, Winfree};
    use std::f64::consts::{PI, TAU};

    #[test]
    fn scalar_decay_hits_e_inverse() {
        let m = Linear::scalar(-1.0);
        let opts = IntegratorOptions::default();
        let y = propagate(&m, &[1.0], 0.0, 1.0, &opts).unwrap();
        assert!(
            (y[0] - (-1.0f64).exp()).abs() < 1e-9,
            "y(1) = {}, expected e^-1",
            y[0]
        );
    }

    #[test]
    fn zero_field_stays_put() {
        let m = Linear::new(2, vec![0.0; 4]);
        let traj = integrate(&m, &[0.3, -0.7], 0.0, 5.0, &IntegratorOptions::default()).unwrap();
        assert_eq!(traj.end_state(), &[0.3, -0.7]);
        assert_eq!(traj.at(2.5), vec![0.3, -0.7]);
    }

    #[test]
    fn harmonic_oscillator_closes_after_two_pi() {
        let m = Linear::new(2, vec![0.0, 1.0, -1.0, 0.0]);
        let opts = IntegratorOptions::default();
        let y = propagate(&m, &[1.0, 0.0], 0.0, TAU, &opts).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-8 && y[1].abs() < 1e-8, "y = {y:?}");
    }

    #[test]
    fn dense_output_tracks_the_solution() {
        let m = Linear::new(2, vec![0.0, 1.0, -1.0, 0.0]);
        let opts = IntegratorOptions::default();
        let traj = integrate(&m, &[1.0, 0.0], 0.0, 10.0, &opts).unwrap();
        for j in 0..50 {
            let t = 10.0 * j as f64 / 50.0;
            let y = traj.at(t);
            assert!(
                (y[0] - t.cos()).abs() < 1e-8 && (y[1] + t.sin()).abs() < 1e-8,
                "dense output off at t = {t}: {y:?}"
            );
        }
    }

    #[test]
    fn winfree_cycle_is_clockwise_with_period_two_pi() {
        let m = Winfree::default();
        let opts = IntegratorOptions::default();
        let cycle = ReferenceCycle::from_anchor(&m, &[1.0, 0.0], TAU, &opts).unwrap();
        let q = cycle.point_at_phase(0.25);
        // clockwise: quarter period reaches (0, −1)
        assert!((q[0]).abs() < 1e-8 && (q[1] + 1.0).abs() < 1e-8, "{q:?}");
        let end = cycle.point_at_phase(1.0);
        assert!((end[0] - 1.0).abs() < 1e-8 && end[1].abs() < 1e-8);
    }

    #[test]
    fn nearest_phase_reads_off_scaled_points() {
        let m = Winfree::default();
        let cycle =
            ReferenceCycle::from_anchor(&m, &[1.0, 0.0], TAU, &IntegratorOptions::default())
                .unwrap();
        for theta in [0.0, 0.17, 0.3, 0.55, 0.83, 0.99] {
            let g = cycle.point_at_phase(theta);
            let off = [1.4 * g[0], 1.4 * g[1]]; // radially displaced
            let (th, dist) = cycle.nearest_phase(&off);
            assert!(
                circular_distance(th, theta) < 1e-9,
                "theta {theta}: read {th}"
            );
            assert!((dist - 0.4).abs() < 1e-9);
        }
    }

    #[test]
    fn asymptotic_phase_matches_closed_form() {
        let m = Winfree::default(); // a = 0, ω = −0.5
        let opts = PhaseOracleOptions::default();
        let cycle =
            ReferenceCycle::from_anchor(&m, &[1.0, 0.0], TAU, &opts.integrator).unwrap();
        for (r0, psi0) in [
            (0.25, 0.0),
            (0.6, 0.0),
            (0.6, 1.3),
            (1.5, -0.4),
            (0.35, PI),
        ] {
            let x = [r0 * psi0.cos(), r0 * psi0.sin()];
            let expect = winfree_phase_closed_form(0.0, -0.5, x[0], x[1]).unwrap();
            let est = asymptotic_phase(&m, &cycle, &x, &opts).unwrap();
            assert!(est.converged, "no convergence from r0={r0}, psi0={psi0}");
            assert!(
                circular_distance(est.theta, expect) < 1e-6,
                "r0={r0} psi0={psi0}: oracle {} vs closed form {expect}",
                est.theta
            );
        }
    }

    #[test]
    fn asymptotic_phase_matches_closed_form_with_inner_circle() {
        // the unit circle is traversed at unit angular speed for every a,
        // so the outer cycle's period stays 2π
        let m = Winfree { a: 0.25, omega: -0.5 };
        let opts = PhaseOracleOptions::default();
        let cycle =
            ReferenceCycle::from_anchor(&m, &[1.0, 0.0], TAU, &opts.integrator).unwrap();
        for (r0, psi0) in [(0.5, 0.0f64), (0.7, 2.0), (1.8, -1.0)] {
            let x = [r0 * psi0.cos(), r0 * psi0.sin()];
            let expect = winfree_phase_closed_form(0.25, -0.5, x[0], x[1]).unwrap();
            let est = asymptotic_phase(&m, &cycle, &x, &opts).unwrap();
            assert!(est.converged);
            assert!(
                circular_distance(est.theta, expect) < 1e-6,
                "r0={r0} psi0={psi0}: oracle {} vs closed form {expect}",
                est.theta
            );
        }
    }

    #[test]
    fn phase_oracle_gives_up_inside_the_inner_basin() {
        // For a = 0.25 the origin is attracting; starting inside r = a the
        // reading must be flagged, not fabricated.
        let m = Winfree { a: 0.25, omega: -0.5 };
        let opts = PhaseOracleOptions {
            max_periods: 30,
            ..Default::default()
        };
        let cycle =
            ReferenceCycle::from_anchor(&m, &[1.0, 0.0], TAU, &opts.integrator).unwrap();
        let est = asymptotic_phase(&m, &cycle, &[0.1, 0.0], &opts).unwrap();
        assert!(!est.converged || est.distance > 0.5);
    }

    #[test]
    fn ptc_sampling_at_zero_amplitude_is_identity() {
        let m = Winfree::default();
        let opts = PhaseOracleOptions::default();
        let cycle =
            ReferenceCycle::from_anchor(&m, &[1.0, 0.0], TAU, &opts.integrator).unwrap();
        let thetas: Vec<f64> = (0..8).map(|j| j as f64 / 8.0).collect();
        let pert = crate::model::Perturbation::instant(&[-1.0, 0.0], 0.0);
        let pts = oracle_ptc(&m, &cycle, &pert, &thetas, &opts).unwrap();
        for p in pts {
            let th = p.theta_new.expect("identity point must converge");
            assert!(
                circular_distance(th, p.theta_old) < 1e-7,
                "theta {} mapped to {th}",
                p.theta_old
            );
        }
    }

    #[test]
    fn first_return_recovers_the_winfree_period() {
        let m = Winfree::default();
        let opts = IntegratorOptions::default();
        // start slightly off the cycle: the return time differs from the
        // period only at second order in the offset
        let (t, y) = first_return(&m, &[1.0 + 1e-6, 0.0], 20.0, 0.5, &opts).unwrap();
        assert!((t - TAU).abs() < 1e-4, "return time {t}");
        assert!((y[0] - 1.0).abs() < 1e-4 && y[1].abs() < 1e-4);
    }

    #[test]
    fn closed_form_phase_agrees_on_the_cycle() {
        for theta in [0.0, 0.2, 0.5, 0.77] {
            let g = [
                (TAU * theta).cos(),
                -(TAU * theta).sin(), // clockwise parametrization
            ];
            let th = winfree_phase_closed_form(0.0, -0.5, g[0], g[1]).unwrap();
            assert!(circular_distance(th, theta) < 1e-12);
        }
        // the two documented perturbed values
        let th = winfree_phase_closed_form(0.0, -0.5, 0.25, 0.0).unwrap();
        assert!((th - 0.7612676).abs() < 1e-6);
        let th = winfree_phase_closed_form(0.0, -0.5, 0.6, 0.0).unwrap();
        assert!((th - 0.9469484).abs() < 1e-6);
    }
}
