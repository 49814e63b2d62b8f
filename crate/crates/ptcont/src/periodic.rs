//! Locating attracting periodic orbits and their Floquet structures.
//!
//! Orbits are found by integrating past the transient, measuring a first
//! return, and then solving the periodic collocation BVP with the period
//! free and the phase pinned by an anchor condition: time zero is the
//! maximum of the first coordinate along the cycle. The Floquet bundles
//! (direct for planar systems, adjoint in any dimension) ride along as
//! extra segments of a combined BVP on the same mesh, seeded from the
//! monodromy matrix.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::bvp::{
    newton_solve, BoundaryConditions, BvpSolution, BvpSpec, NewtonOptions, OdeRhs, ParamSet,
};
use crate::mesh::{Mesh, OrbitSegment};
use crate::model::{
    jacobian_adjoint_directional, jacobian_directional, ModelDef, VectorField,
};
use crate::oracle::{first_return, integrate, propagate, IntegratorOptions, Trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct OrbitOptions {
    pub ntst: usize,
    pub ncol: usize,
    /// Plain integration time burned before return-finding starts.
    pub t_transient: f64,
    /// Window within which a first return must be found.
    pub t_return_max: f64,
    /// Successive returns closer than this (relative) count as settled.
    pub settle_tol: f64,
    pub max_settle_rounds: usize,
    pub integrator: IntegratorOptions,
    pub newton: NewtonOptions,
    /// Mesh adaptation + re-solve rounds after the first converged solve.
    pub adapt_rounds: usize,
}

impl Default for OrbitOptions {
    fn default() -> Self {
        OrbitOptions {
            ntst: 50,
            ncol: 4,
            t_transient: 20.0,
            t_return_max: 50.0,
            settle_tol: 1e-9,
            max_settle_rounds: 200,
            integrator: IntegratorOptions::with_tol(1e-10),
            newton: NewtonOptions::default(),
            adapt_rounds: 2,
        }
    }
}

impl OrbitOptions {
    /// Sensible schedules per built-in model (time scales differ by orders
    /// of magnitude between the planar models and the sinoatrial one).
    pub fn for_model(model: &ModelDef) -> Self {
        let mut o = OrbitOptions::default();
        match model.name() {
            "fhn" => {
                o.t_transient = 60.0;
                o.t_return_max = 60.0;
                o.ntst = 75;
            }
            "sinoatrial" => {
                o.t_transient = 3.0;
                o.t_return_max = 4.0;
                o.ntst = 150;
                o.settle_tol = 1e-8;
                o.integrator = IntegratorOptions::with_tol(1e-9);
            }
            _ => {}
        }
        o
    }
}

/// A periodic orbit as a collocation segment over scaled time s ∈ [0, 1],
/// anchored so that s = 0 is the maximum of the first coordinate.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PeriodicOrbit {
    pub seg: OrbitSegment,
    pub period: f64,
}

impl PeriodicOrbit {
    pub fn dim(&self) -> usize {
        self.seg.dim
    }

    /// Point at phase ϑ (mod 1): scaled time equals phase on the orbit.
    pub fn point_at_phase(&self, theta: f64) -> Vec<f64> {
        self.seg.eval(theta.rem_euclid(1.0))
    }
}

// ---------------------------------------------------------------------------
// The periodic BVP: γ' = T·F(γ), γ(1) = γ(0), F₁(γ(0)) = 0

pub(crate) struct CycleRhs {
    pub field: ModelDef,
}

impl OdeRhs for CycleRhs {
    fn dim(&self) -> usize {
        self.field.dim()
    }
    fn npar(&self) -> usize {
        1
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
        self.field.eval(y, out);
    }
}

struct PeriodicAnchorBc {
    field: ModelDef,
}

impl BoundaryConditions for PeriodicAnchorBc {
    fn nbc(&self) -> usize {
        self.field.dim() + 1
    }
    fn eval(&self, y0: &[f64], y1: &[f64], _q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        for i in 0..n {
            out[i] = y1[i] - y0[i];
        }
        let mut f = vec![0.0; n];
        self.field.eval(y0, &mut f);
        out[n] = f[0];
    }
    fn jac(&self, y0: &[f64], _y1: &[f64], _q: &[f64], j0: &mut [f64], j1: &mut [f64], jq: &mut [f64]) {
        let n = self.field.dim();
        j0.fill(0.0);
        j1.fill(0.0);
        jq.fill(0.0);
        for i in 0..n {
            j0[i * n + i] = -1.0;
            j1[i * n + i] = 1.0;
        }
        let mut df = vec![0.0; n * n];
        self.field.jacobian(y0, &mut df);
        j0[n * n..(n + 1) * n].copy_from_slice(&df[0..n]);
    }
}

fn orbit_spec(model: &ModelDef) -> BvpSpec {
    BvpSpec {
        rhs: Arc::new(CycleRhs {
            field: model.clone(),
        }),
        bc: Arc::new(PeriodicAnchorBc {
            field: model.clone(),
        }),
        integral: None,
        params: ParamSet::new(&["T"]).free_named(&["T"]).unwrap(),
    }
}

// ---------------------------------------------------------------------------
// Finding the orbit

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Bounding-box diagonal of a trajectory, sampled densely.
fn trajectory_diameter(traj: &Trajectory, n: usize) -> f64 {
    let dim = traj.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    let mut buf = vec![0.0; dim];
    let (t0, t1) = (traj.t_start(), traj.t_end());
    for k in 0..=n {
        let t = t0 + (t1 - t0) * k as f64 / n as f64;
        traj.eval_into(t, &mut buf);
        for i in 0..dim {
            lo[i] = lo[i].min(buf[i]);
            hi[i] = hi[i].max(buf[i]);
        }
    }
    lo.iter()
        .zip(&hi)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt()
}

/// Time of the global maximum of the first coordinate along one period,
/// located as a + → − crossing of F₁ and refined by bisection.
fn anchor_time(model: &ModelDef, traj: &Trajectory) -> Result<f64> {
    let n = model.dim();
    let (t0, t1) = (traj.t_start(), traj.t_end());
    let samples = 1024;
    let mut buf = vec![0.0; n];
    let mut f = vec![0.0; n];
    let fdot1 = |t: f64, buf: &mut Vec<f64>, f: &mut Vec<f64>| -> f64 {
        traj.eval_into(t, buf);
        model.eval(buf, f);
        f[0]
    };
    let mut best: Option<(f64, f64)> = None; // (x1 value, crossing time)
    let mut t_prev = t0;
    let mut p_prev = fdot1(t0, &mut buf, &mut f);
    for k in 1..=samples {
        let t = t0 + (t1 - t0) * k as f64 / samples as f64;
        let p = fdot1(t, &mut buf, &mut f);
        if p_prev > 0.0 && p <= 0.0 {
            let (mut ta, mut tb) = (t_prev, t);
            for _ in 0..80 {
                let tm = 0.5 * (ta + tb);
                if fdot1(tm, &mut buf, &mut f) > 0.0 {
                    ta = tm;
                } else {
                    tb = tm;
                }
            }
            let tc = 0.5 * (ta + tb);
            traj.eval_into(tc, &mut buf);
            if best.map_or(true, |(v, _)| buf[0] > v) {
                best = Some((buf[0], tc));
            }
        }
        t_prev = t;
        p_prev = p;
    }
    best.map(|(_, t)| t).ok_or_else(|| {
        Error::DegenerateOrbit("the first coordinate has no maximum along the cycle".into())
    })
}

/// Locate the attracting periodic orbit reached from `x0`.
pub fn find_periodic_orbit(
    model: &ModelDef,
    x0: &[f64],
    opts: &OrbitOptions,
) -> Result<PeriodicOrbit> {
    let n = model.dim();
    if x0.len() != n {
        return Err(Error::InvalidInput(format!(
            "seed has dimension {}, model wants {n}",
            x0.len()
        )));
    }

    // burn the transient
    let mut x = x0.to_vec();
    if opts.t_transient > 0.0 {
        x = propagate(model, &x, 0.0, opts.t_transient, &opts.integrator)?;
    }

    // probe the attractor's extent to scale the return acceptance radius
    let probe = integrate(model, &x, 0.0, opts.t_return_max, &opts.integrator)?;
    let diameter = trajectory_diameter(&probe, 2000);
    let x_scale = 1.0 + x.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    if diameter < 1e-7 * x_scale {
        return Err(Error::DegenerateOrbit(
            "the trajectory has collapsed to an equilibrium".into(),
        ));
    }
    x = probe.end_state().to_vec();

    // settle onto the cycle by iterating the return map
    let mut period = 0.0;
    let mut f = vec![0.0; n];
    for _round in 0..opts.max_settle_rounds {
        model.eval(&x, &mut f);
        if norm2(&f) < 1e-10 * x_scale {
            return Err(Error::DegenerateOrbit(
                "the trajectory has collapsed to an equilibrium".into(),
            ));
        }
        let t_max = if period > 0.0 {
            3.0 * period
        } else {
            opts.t_return_max
        };
        let (t_ret, x_ret) = first_return(model, &x, t_max, 0.35 * diameter, &opts.integrator)?;
        let gap = x_ret
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        period = t_ret;
        x = x_ret;
        if gap < opts.settle_tol * x_scale {
            break;
        }
    }

    // one full period from the settled point, re-anchored at the x₁ maximum
    let traj = integrate(model, &x, 0.0, period, &opts.integrator)?;
    let t_star = anchor_time(model, &traj)?;
    let sample = |s: f64, out: &mut [f64]| {
        let t = (t_star + s * period) % period;
        traj.eval_into(t, out);
    };

    // pre-adapt the mesh to the seed's own profile before the first solve:
    // relaxation-type orbits are hopeless on a uniform mesh
    let fine = OrbitSegment::from_fn(
        Mesh::uniform(opts.ntst.max(200)),
        opts.ncol,
        n,
        |s, out| sample(s, out),
    );
    let mesh0 = fine.adapted_mesh(opts.ntst);
    let seed = OrbitSegment::from_fn(mesh0, opts.ncol, n, |s, out| sample(s, out));

    let spec = orbit_spec(model);
    let mut sol = BvpSolution {
        seg: seed,
        params: vec![period],
    };
    newton_solve(&spec, &mut sol, &[], &opts.newton)?;

    for _ in 0..opts.adapt_rounds {
        let mesh = sol.seg.adapted_mesh(opts.ntst);
        sol.seg = sol.seg.remesh_to(mesh, opts.ncol);
        newton_solve(&spec, &mut sol, &[], &opts.newton)?;
    }

    // the anchor admits minima of x₁ too; make sure we sit on the maximum
    let mut sol = ensure_anchor_is_maximum(model, &spec, sol, &opts.newton)?;
    if sol.params[0] < 0.0 {
        // a negative period is the same orbit run backwards; normalize
        sol.params[0] = -sol.params[0];
    }
    Ok(PeriodicOrbit {
        period: sol.params[0],
        seg: std::mem::replace(&mut sol.seg, OrbitSegment::zeros(Mesh::uniform(1), 2, 1)),
    })
}

fn second_order_anchor(model: &ModelDef, x: &[f64]) -> f64 {
    // (DF·F)₁ at x: the sign of d²x₁/dt² where ẋ₁ = 0
    let n = model.dim();
    let mut f = vec![0.0; n];
    let mut df = vec![0.0; n * n];
    model.eval(x, &mut f);
    model.jacobian(x, &mut df);
    (0..n).map(|k| df[k] * f[k]).sum()
}

fn ensure_anchor_is_maximum(
    model: &ModelDef,
    spec: &BvpSpec,
    sol: BvpSolution,
    newton: &NewtonOptions,
) -> Result<BvpSolution> {
    if second_order_anchor(model, sol.seg.first()) < 0.0 {
        return Ok(sol);
    }
    // rotate the converged segment to its global x₁ maximum and re-solve
    let grid = 2048;
    let mut s_star = 0.0;
    let mut best = f64::NEG_INFINITY;
    for k in 0..grid {
        let s = k as f64 / grid as f64;
        let v = sol.seg.eval(s)[0];
        if v > best {
            best = v;
            s_star = s;
        }
    }
    let rotated = OrbitSegment::from_fn(
        sol.seg.mesh.clone(),
        sol.seg.ncol,
        sol.seg.dim,
        |s, out| sol.seg.eval_into((s + s_star) % 1.0, out),
    );
    let mut rotated = BvpSolution {
        seg: rotated,
        params: sol.params.clone(),
    };
    newton_solve(spec, &mut rotated, &[], newton)?;
    if second_order_anchor(model, rotated.seg.first()) < 0.0 {
        return Ok(rotated);
    }
    Err(Error::DegenerateOrbit(
        "could not anchor the orbit at a maximum of the first coordinate".into(),
    ))
}

// ---------------------------------------------------------------------------
// Monodromy

struct MonodromyAug<'a> {
    base: &'a ModelDef,
}

impl VectorField for MonodromyAug<'_> {
    fn dim(&self) -> usize {
        let n = self.base.dim();
        n + n * n
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let n = self.base.dim();
        self.base.eval(&x[..n], &mut out[..n]);
        let mut df = vec![0.0; n * n];
        self.base.jacobian(&x[..n], &mut df);
        let phi = &x[n..];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += df[i * n + k] * phi[k * n + j];
                }
                out[n + i * n + j] = s;
            }
        }
    }
}

/// Fundamental solution over one period, Φ(T) with Φ(0) = I, by direct
/// integration of the variational equations along the orbit.
pub fn monodromy_matrix(
    model: &ModelDef,
    orbit: &PeriodicOrbit,
    integ: &IntegratorOptions,
) -> Result<DMatrix<f64>> {
    let n = model.dim();
    let mut state = vec![0.0; n + n * n];
    state[..n].copy_from_slice(orbit.seg.first());
    for i in 0..n {
        state[n + i * n + i] = 1.0;
    }
    let aug = MonodromyAug { base: model };
    let fin = propagate(&aug, &state, 0.0, orbit.period, integ)?;
    Ok(DMatrix::from_row_slice(n, n, &fin[n..]))
}

/// Inverse iteration for the eigenvector of `m` at a known eigenvalue.
fn eigenvector_near(m: &DMatrix<f64>, mu: f64) -> Result<Vec<f64>> {
    let n = m.nrows();
    let scale = m.amax().max(1.0);
    let shifted = m - DMatrix::identity(n, n) * (mu + 1e-9 * scale);
    let lu = shifted.lu();
    let mut v = nalgebra::DVector::from_fn(n, |i, _| 1.0 / (i + 1) as f64 * if i % 2 == 0 { 1.0 } else { -1.0 });
    v /= v.norm();
    for _ in 0..6 {
        let w = lu
            .solve(&v)
            .ok_or_else(|| Error::SingularJacobian("inverse iteration failed".into()))?;
        let nw = w.norm();
        if !nw.is_finite() || nw == 0.0 {
            return Err(Error::SingularJacobian("inverse iteration failed".into()));
        }
        v = w / nw;
    }
    Ok(v.iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Direct Floquet bundle (planar): g' = T F(g), v' = T (DF(g) − λ) v

struct BundleRhs {
    field: ModelDef,
}

impl OdeRhs for BundleRhs {
    fn dim(&self) -> usize {
        2 * self.field.dim()
    }
    fn npar(&self) -> usize {
        2 // T, lambda
    }
    fn eval(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let (t, lambda) = (q[0], q[1]);
        let (g, v) = y.split_at(n);
        self.field.eval(g, &mut out[..n]);
        let mut df = vec![0.0; n * n];
        self.field.jacobian(g, &mut df);
        for i in 0..n {
            let mut s = -lambda * v[i];
            for k in 0..n {
                s += df[i * n + k] * v[k];
            }
            out[n + i] = t * s;
        }
        out[..n].iter_mut().for_each(|u| *u *= t);
    }
    fn jac_y(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let nd = 2 * n;
        let (t, lambda) = (q[0], q[1]);
        let (g, v) = y.split_at(n);
        out.fill(0.0);
        let mut df = vec![0.0; n * n];
        self.field.jacobian(g, &mut df);
        let mut d2 = vec![0.0; n * n];
        jacobian_directional(&self.field, g, v, &mut d2);
        for i in 0..n {
            for j in 0..n {
                out[i * nd + j] = t * df[i * n + j];
                out[(n + i) * nd + j] = t * d2[i * n + j];
                out[(n + i) * nd + (n + j)] =
                    t * (df[i * n + j] - if i == j { lambda } else { 0.0 });
            }
        }
    }
    fn jac_q(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let (t, lambda) = (q[0], q[1]);
        let (g, v) = y.split_at(n);
        let mut f = vec![0.0; n];
        self.field.eval(g, &mut f);
        let mut df = vec![0.0; n * n];
        self.field.jacobian(g, &mut df);
        for i in 0..n {
            out[i * 2] = f[i];
            out[i * 2 + 1] = 0.0;
            let mut s = -lambda * v[i];
            for k in 0..n {
                s += df[i * n + k] * v[k];
            }
            out[(n + i) * 2] = s;
            out[(n + i) * 2 + 1] = -t * v[i];
        }
    }
}

struct BundleBc {
    field: ModelDef,
}

impl BoundaryConditions for BundleBc {
    fn nbc(&self) -> usize {
        2 * self.field.dim() + 2
    }
    fn eval(&self, y0: &[f64], y1: &[f64], _q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        for i in 0..n {
            out[i] = y1[i] - y0[i]; // g periodic
            out[n + 1 + i] = y1[n + i] - y0[n + i]; // v periodic
        }
        let mut f = vec![0.0; n];
        self.field.eval(&y0[..n], &mut f);
        out[n] = f[0]; // anchor
        out[2 * n + 1] = y0[n..].iter().map(|a| a * a).sum::<f64>() - 1.0; // ‖v(0)‖² = 1
    }
    fn jac(&self, y0: &[f64], _y1: &[f64], _q: &[f64], j0: &mut [f64], j1: &mut [f64], jq: &mut [f64]) {
        let n = self.field.dim();
        let nd = 2 * n;
        j0.fill(0.0);
        j1.fill(0.0);
        jq.fill(0.0);
        for i in 0..n {
            j0[i * nd + i] = -1.0;
            j1[i * nd + i] = 1.0;
            j0[(n + 1 + i) * nd + (n + i)] = -1.0;
            j1[(n + 1 + i) * nd + (n + i)] = 1.0;
        }
        let mut df = vec![0.0; n * n];
        self.field.jacobian(&y0[..n], &mut df);
        j0[n * nd..n * nd + n].copy_from_slice(&df[..n]);
        for i in 0..n {
            j0[(2 * n + 1) * nd + (n + i)] = 2.0 * y0[n + i];
        }
    }
}

/// The stable Floquet exponent and its eigenfunction on a planar cycle,
/// refined together with the orbit as one square collocation system.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FloquetBundle {
    pub orbit: PeriodicOrbit,
    /// Eigenfunction v(s) with ‖v(0)‖ = 1, first nonzero component of v(0)
    /// negative.
    pub v: OrbitSegment,
    /// Floquet exponent λ: the multiplier is exp(λT).
    pub exponent: f64,
}

impl FloquetBundle {
    pub fn v0(&self) -> &[f64] {
        self.v.first()
    }
}

struct VariationalAug<'a> {
    base: &'a ModelDef,
    lambda: f64,
}

impl VectorField for VariationalAug<'_> {
    fn dim(&self) -> usize {
        2 * self.base.dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let n = self.base.dim();
        let (g, v) = x.split_at(n);
        self.base.eval(g, &mut out[..n]);
        let mut df = vec![0.0; n * n];
        self.base.jacobian(g, &mut df);
        for i in 0..n {
            let mut s = -self.lambda * v[i];
            for k in 0..n {
                s += df[i * n + k] * v[k];
            }
            out[n + i] = s;
        }
    }
}

pub fn compute_floquet_bundle(
    model: &ModelDef,
    orbit: &PeriodicOrbit,
    opts: &OrbitOptions,
) -> Result<FloquetBundle> {
    let n = model.dim();
    if n != 2 {
        return Err(Error::NonUniqueBundle(n));
    }
    let m = monodromy_matrix(model, orbit, &opts.integrator)?;
    let eigs = m.complex_eigenvalues();
    // one multiplier is trivially 1; the other is the stable one
    let mu = (0..2)
        .map(|i| eigs[i])
        .max_by(|a, b| (a - nalgebra::Complex::new(1.0, 0.0))
            .norm()
            .total_cmp(&(b - nalgebra::Complex::new(1.0, 0.0)).norm()))
        .unwrap();
    if mu.im.abs() > 1e-8 * (1.0 + mu.norm()) {
        return Err(Error::NoConvergence(format!(
            "stable multiplier is not real: {mu}"
        )));
    }
    if mu.re <= 0.0 {
        return Err(Error::NoConvergence(format!(
            "stable multiplier {} is not positive; the bundle is orientation-reversing",
            mu.re
        )));
    }
    let lambda = mu.re.ln() / orbit.period;
    let v0 = eigenvector_near(&m, mu.re)?;

    // seed v(s) by integrating the shifted variational equation
    let aug = VariationalAug {
        base: model,
        lambda,
    };
    let mut state = vec![0.0; 2 * n];
    state[..n].copy_from_slice(orbit.seg.first());
    state[n..].copy_from_slice(&v0);
    let traj = integrate(&aug, &state, 0.0, orbit.period, &opts.integrator)?;
    let mut buf = vec![0.0; 2 * n];
    let seed = OrbitSegment::from_fn(orbit.seg.mesh.clone(), orbit.seg.ncol, 2 * n, |s, out| {
        orbit.seg.eval_into(s, &mut out[..n]);
        traj.eval_into((s * orbit.period).min(orbit.period), &mut buf);
        out[n..].copy_from_slice(&buf[n..]);
    });

    let spec = BvpSpec {
        rhs: Arc::new(BundleRhs {
            field: model.clone(),
        }),
        bc: Arc::new(BundleBc {
            field: model.clone(),
        }),
        integral: None,
        params: ParamSet::new(&["T", "lambda"])
            .free_named(&["T", "lambda"])
            .unwrap(),
    };
    let mut sol = BvpSolution {
        seg: seed,
        params: vec![orbit.period, lambda],
    };
    newton_solve(&spec, &mut sol, &[], &opts.newton)?;

    let mut v = sol.seg.extract(n, 2 * n);
    if let Some(&lead) = v.first().iter().find(|a| a.abs() > 1e-9) {
        if lead > 0.0 {
            v.values_mut().iter_mut().for_each(|a| *a = -*a);
        }
    }
    Ok(FloquetBundle {
        orbit: PeriodicOrbit {
            seg: sol.seg.extract(0, n),
            period: sol.params[0],
        },
        v,
        exponent: sol.params[1],
    })
}

// ---------------------------------------------------------------------------
// Adjoint bundle (any dimension): w' = −T (DFᵀ(g) − λ₀) w

struct AdjointRhs {
    field: ModelDef,
}

impl OdeRhs for AdjointRhs {
    fn dim(&self) -> usize {
        2 * self.field.dim()
    }
    fn npar(&self) -> usize {
        2 // T, lambda0
    }
    fn eval(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let (t, lambda0) = (q[0], q[1]);
        let (g, w) = y.split_at(n);
        self.field.eval(g, &mut out[..n]);
        let mut df = vec![0.0; n * n];
        self.field.jacobian(g, &mut df);
        for i in 0..n {
            let mut s = -lambda0 * w[i];
            for k in 0..n {
                s += df[k * n + i] * w[k]; // DFᵀ w
            }
            out[n + i] = -t * s;
        }
        out[..n].iter_mut().for_each(|u| *u *= t);
    }
    fn jac_y(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let nd = 2 * n;
        let (t, lambda0) = (q[0], q[1]);
        let (g, w) = y.split_at(n);
        out.fill(0.0);
        let mut df = vec![0.0; n * n];
        self.field.jacobian(g, &mut df);
        let mut d2 = vec![0.0; n * n];
        jacobian_adjoint_directional(&self.field, g, w, &mut d2);
        for i in 0..n {
            for j in 0..n {
                out[i * nd + j] = t * df[i * n + j];
                out[(n + i) * nd + j] = -t * d2[i * n + j];
                out[(n + i) * nd + (n + j)] =
                    -t * (df[j * n + i] - if i == j { lambda0 } else { 0.0 });
            }
        }
    }
    fn jac_q(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let (t, lambda0) = (q[0], q[1]);
        let (g, w) = y.split_at(n);
        let mut f = vec![0.0; n];
        self.field.eval(g, &mut f);
        let mut df = vec![0.0; n * n];
        self.field.jacobian(g, &mut df);
        for i in 0..n {
            out[i * 2] = f[i];
            out[i * 2 + 1] = 0.0;
            let mut s = -lambda0 * w[i];
            for k in 0..n {
                s += df[k * n + i] * w[k];
            }
            out[(n + i) * 2] = -s;
            out[(n + i) * 2 + 1] = t * w[i];
        }
    }
}

struct AdjointBc {
    field: ModelDef,
}

impl BoundaryConditions for AdjointBc {
    fn nbc(&self) -> usize {
        2 * self.field.dim() + 2
    }
    fn eval(&self, y0: &[f64], y1: &[f64], _q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        for i in 0..n {
            out[i] = y1[i] - y0[i];
            out[n + 1 + i] = y1[n + i] - y0[n + i];
        }
        let mut f = vec![0.0; n];
        self.field.eval(&y0[..n], &mut f);
        out[n] = f[0];
        out[2 * n + 1] = y0[n..].iter().map(|a| a * a).sum::<f64>() - 1.0;
    }
    fn jac(&self, y0: &[f64], _y1: &[f64], _q: &[f64], j0: &mut [f64], j1: &mut [f64], jq: &mut [f64]) {
        let n = self.field.dim();
        let nd = 2 * n;
        j0.fill(0.0);
        j1.fill(0.0);
        jq.fill(0.0);
        for i in 0..n {
            j0[i * nd + i] = -1.0;
            j1[i * nd + i] = 1.0;
            j0[(n + 1 + i) * nd + (n + i)] = -1.0;
            j1[(n + 1 + i) * nd + (n + i)] = 1.0;
        }
        let mut df = vec![0.0; n * n];
        self.field.jacobian(&y0[..n], &mut df);
        j0[n * nd..n * nd + n].copy_from_slice(&df[..n]);
        for i in 0..n {
            j0[(2 * n + 1) * nd + (n + i)] = 2.0 * y0[n + i];
        }
    }
}

/// Left Floquet structure of the trivial multiplier: the phase gradient
/// direction along the orbit. `trivial_exponent` converges to zero; its
/// size is a discretization diagnostic.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdjointBundle {
    pub orbit: PeriodicOrbit,
    /// w(s) with ‖w(0)‖ = 1 and ⟨w(0), F(γ(0))⟩ > 0.
    pub w: OrbitSegment,
    pub trivial_exponent: f64,
}

impl AdjointBundle {
    pub fn w0(&self) -> &[f64] {
        self.w.first()
    }
}

// ---------------------------------------------------------------------------
// Orbit record

/// Everything downstream phase computations consume, bundled for passing
/// around (and for caching between CLI runs): the cycle plus whichever
/// linearizations have been attached. The bundles each carry their own
/// refined copy of the orbit; `orbit()` picks the best one.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OrbitRecord {
    pub bundle: Option<FloquetBundle>,
    pub adjoint: Option<AdjointBundle>,
    plain: Option<PeriodicOrbit>,
}

impl OrbitRecord {
    pub fn new(orbit: PeriodicOrbit) -> Self {
        OrbitRecord {
            bundle: None,
            adjoint: None,
            plain: Some(orbit),
        }
    }

    /// Compute the orbit and attach every bundle the dimension allows:
    /// eigenfunction bundle on planar models, adjoint bundle always.
    pub fn complete(model: &ModelDef, x0: &[f64], opts: &OrbitOptions) -> Result<Self> {
        let orbit = find_periodic_orbit(model, x0, opts)?;
        let bundle = if model.dim() == 2 {
            Some(compute_floquet_bundle(model, &orbit, opts)?)
        } else {
            None
        };
        let adjoint = Some(compute_adjoint_bundle(model, &orbit, opts)?);
        Ok(OrbitRecord {
            bundle,
            adjoint,
            plain: Some(orbit),
        })
    }

    pub fn orbit(&self) -> &PeriodicOrbit {
        self.bundle
            .as_ref()
            .map(|b| &b.orbit)
            .or(self.adjoint.as_ref().map(|a| &a.orbit))
            .or(self.plain.as_ref())
            .expect("a record always holds at least one orbit")
    }

    pub fn period(&self) -> f64 {
        self.orbit().period
    }

    /// Zero-phase point γ₀ (the anchor).
    pub fn gamma0(&self) -> &[f64] {
        self.orbit().seg.first()
    }

    pub fn require_bundle(&self) -> Result<&FloquetBundle> {
        self.bundle.as_ref().ok_or(Error::MissingBundle)
    }

    pub fn require_adjoint(&self) -> Result<&AdjointBundle> {
        self.adjoint.as_ref().ok_or(Error::MissingAdjointBundle)
    }

    /// Unit normal of the isochron through γ₀: the adjoint direction when
    /// available, else (planar) the eigenvector rotated a quarter turn.
    pub fn isochron_normal(&self) -> Result<Vec<f64>> {
        if let Some(adj) = &self.adjoint {
            return Ok(adj.w0().to_vec());
        }
        let b = self.require_bundle()?;
        if b.orbit.dim() != 2 {
            return Err(Error::MissingAdjointBundle);
        }
        let v = b.v0();
        Ok(vec![-v[1], v[0]])
    }
}

/// Time-reversed adjoint flow along the frozen orbit, with the elapsed
/// backward time as an extra state so the orbit can be looked up.
struct BackwardAdjointAug<'a> {
    field: &'a ModelDef,
    seg: &'a OrbitSegment,
    period: f64,
}

impl VectorField for BackwardAdjointAug<'_> {
    fn dim(&self) -> usize {
        self.field.dim() + 1
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let tau = x[0];
        let s = (1.0 - tau / self.period).clamp(0.0, 1.0);
        let g = self.seg.eval(s);
        let mut df = vec![0.0; n * n];
        self.field.jacobian(&g, &mut df);
        out[0] = 1.0;
        let u = &x[1..];
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += df[k * n + i] * u[k];
            }
            out[1 + i] = acc; // du/dτ = +DFᵀ u in backward time
        }
    }
}

pub fn compute_adjoint_bundle(
    model: &ModelDef,
    orbit: &PeriodicOrbit,
    opts: &OrbitOptions,
) -> Result<AdjointBundle> {
    let n = model.dim();
    let m = monodromy_matrix(model, orbit, &opts.integrator)?;
    let mut w0 = eigenvector_near(&m.transpose(), 1.0)?;
    let mut f0 = vec![0.0; n];
    model.eval(orbit.seg.first(), &mut f0);
    let dot: f64 = w0.iter().zip(&f0).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        w0.iter_mut().for_each(|a| *a = -*a);
    }

    // seed w(s): integrate the adjoint backward in time, where the
    // nontrivial (expanding) adjoint modes decay instead of exploding
    let aug = BackwardAdjointAug {
        field: model,
        seg: &orbit.seg,
        period: orbit.period,
    };
    let mut state = vec![0.0; n + 1];
    state[1..].copy_from_slice(&w0);
    let traj = integrate(&aug, &state, 0.0, orbit.period, &opts.integrator)?;
    let mut buf = vec![0.0; n + 1];
    let seed = OrbitSegment::from_fn(orbit.seg.mesh.clone(), orbit.seg.ncol, 2 * n, |s, out| {
        orbit.seg.eval_into(s, &mut out[..n]);
        let tau = ((1.0 - s) * orbit.period).clamp(0.0, orbit.period);
        traj.eval_into(tau, &mut buf);
        out[n..].copy_from_slice(&buf[1..]);
    });

    let spec = BvpSpec {
        rhs: Arc::new(AdjointRhs {
            field: model.clone(),
        }),
        bc: Arc::new(AdjointBc {
            field: model.clone(),
        }),
        integral: None,
        params: ParamSet::new(&["T", "lambda0"])
            .free_named(&["T", "lambda0"])
            .unwrap(),
    };
    let mut sol = BvpSolution {
        seg: seed,
        params: vec![orbit.period, 0.0],
    };
    newton_solve(&spec, &mut sol, &[], &opts.newton)?;

    let mut w = sol.seg.extract(n, 2 * n);
    let g = sol.seg.extract(0, n);
    model.eval(g.first(), &mut f0);
    let dot: f64 = w.first().iter().zip(&f0).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        w.values_mut().iter_mut().for_each(|a| *a = -*a);
    }
    Ok(AdjointBundle {
        orbit: PeriodicOrbit {
            seg: g,
            period: sol.params[0],
        },
        w,
        trivial_exponent: sol.params[1],
    })
}

/// First-order phase response to an impulse in `direction`: the phase
/// gradient z(ϑ) = w(ϑ)/(T·⟨w(ϑ), F(γ(ϑ))⟩) projected onto the direction,
/// sampled uniformly in phase.
pub fn linear_prc(
    model: &ModelDef,
    adjoint: &AdjointBundle,
    direction: &[f64],
    n_samples: usize,
) -> Vec<(f64, f64)> {
    let n = model.dim();
    let t_period = adjoint.orbit.period;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut w = vec![0.0; n];
    (0..n_samples)
        .map(|k| {
            let theta = k as f64 / n_samples as f64;
            adjoint.orbit.seg.eval_into(theta, &mut g);
            adjoint.w.eval_into(theta, &mut w);
            model.eval(&g, &mut f);
            let wf: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
            let wd: f64 = w.iter().zip(direction).map(|(a, b)| a * b).sum();
            (theta, wd / (t_period * wf))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn winfree(a: f64) -> ModelDef {
        let mut m = ModelDef::by_name("winfree").unwrap();
        m.set_param("a", a).unwrap();
        m
    }

    #[test]
    fn winfree_orbit_is_the_unit_circle_with_period_tau() {
        let model = winfree(0.0);
        let orbit =
            find_periodic_orbit(&model, &[1.5, 0.3], &OrbitOptions::for_model(&model)).unwrap();
        println!("period = {:.15}", orbit.period);
        assert!(
            (orbit.period - TAU).abs() < 1e-9,
            "period {} should be 2π",
            orbit.period
        );
        // anchored at the maximum of x: γ(0) = (1, 0)
        let g0 = orbit.seg.first();
        assert!((g0[0] - 1.0).abs() < 1e-8 && g0[1].abs() < 1e-8, "anchor {g0:?}");
        // the whole segment lies on the unit circle
        for k in 0..=40 {
            let p = orbit.seg.eval(k as f64 / 40.0);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 1.0).abs() < 1e-9, "r = {r} at s = {}", k as f64 / 40.0);
        }
        // clockwise: quarter period lands at (0, −1)
        let q = orbit.point_at_phase(0.25);
        assert!((q[0]).abs() < 1e-7 && (q[1] + 1.0).abs() < 1e-7, "quarter {q:?}");
    }

    #[test]
    fn winfree_floquet_bundle_matches_the_analytic_eigenpair() {
        // For the circular cycle the stable exponent is a − 1 and the
        // monodromy eigenvector at (1, 0) is parallel to (1, −ω/(1−a)).
        for (a, seed) in [(0.0, [1.5, 0.3]), (0.25, [1.3, 0.0])] {
            let model = winfree(a);
            let orbit =
                find_periodic_orbit(&model, &seed, &OrbitOptions::for_model(&model)).unwrap();
            let bundle = compute_floquet_bundle(&model, &orbit, &OrbitOptions::default()).unwrap();
            println!(
                "a = {a}: exponent = {:.12}, v0 = {:?}",
                bundle.exponent,
                bundle.v0()
            );
            assert!(
                (bundle.exponent - (a - 1.0)).abs() < 1e-8,
                "exponent {} vs {}",
                bundle.exponent,
                a - 1.0
            );
            let omega = -0.5;
            let vy = -omega / (1.0 - a);
            let norm = (1.0 + vy * vy).sqrt();
            let expect = [-1.0 / norm, -vy / norm]; // sign: leading component negative
            let v0 = bundle.v0();
            assert!(
                (v0[0] - expect[0]).abs() < 1e-6 && (v0[1] - expect[1]).abs() < 1e-6,
                "v0 {v0:?} vs {expect:?}"
            );
            // the refined period must not drift from the orbit solve
            assert!(
                (bundle.orbit.period - orbit.period).abs() < 1e-10 * orbit.period,
                "period drifted in the combined solve"
            );
            // ‖v(s)‖ stays bounded and periodic: endpoints agree
            let vstart = bundle.v.first();
            let vend = bundle.v.last();
            assert!(
                (vstart[0] - vend[0]).abs() < 1e-9 && (vstart[1] - vend[1]).abs() < 1e-9,
                "eigenfunction is not periodic"
            );
        }
    }

    #[test]
    fn winfree_adjoint_bundle_is_perpendicular_and_invariant() {
        let model = winfree(0.0);
        let orbit =
            find_periodic_orbit(&model, &[1.5, 0.3], &OrbitOptions::for_model(&model)).unwrap();
        let adj = compute_adjoint_bundle(&model, &orbit, &OrbitOptions::default()).unwrap();
        println!(
            "trivial exponent = {:.3e}, w0 = {:?}",
            adj.trivial_exponent,
            adj.w0()
        );
        assert!(adj.trivial_exponent.abs() < 1e-8);
        // biorthogonality: w(0) ⊥ stable eigenvector (2,1)/√5, and the
        // sign convention puts it at (1,−2)/√5
        let w0 = adj.w0();
        let s5 = 5.0f64.sqrt();
        assert!(
            (w0[0] - 1.0 / s5).abs() < 1e-6 && (w0[1] + 2.0 / s5).abs() < 1e-6,
            "w0 = {w0:?}"
        );
        // ⟨w(s), F(γ(s))⟩ is constant along the orbit
        let mut f = vec![0.0; 2];
        let mut base = 0.0;
        for (k, s) in [0.0, 0.23, 0.5, 0.77].iter().enumerate() {
            let g = adj.orbit.seg.eval(*s);
            let w = adj.w.eval(*s);
            model.eval(&g, &mut f);
            let dot = w[0] * f[0] + w[1] * f[1];
            if k == 0 {
                base = dot;
                assert!(dot > 0.0, "orientation: ⟨w, F⟩ = {dot}");
            } else {
                assert!(
                    (dot - base).abs() < 1e-7 * base.abs(),
                    "invariant drifts: {dot} vs {base} at s = {s}"
                );
            }
        }
    }

    #[test]
    fn winfree_linear_prc_matches_the_closed_form_gradient() {
        // From the explicit phase map: ∇ϑ·e_x at γ_ϑ equals
        // (−ω cos 2πϑ − sin 2πϑ)/2π on the unit cycle.
        let model = winfree(0.0);
        let orbit =
            find_periodic_orbit(&model, &[1.5, 0.3], &OrbitOptions::for_model(&model)).unwrap();
        let adj = compute_adjoint_bundle(&model, &orbit, &OrbitOptions::default()).unwrap();
        let omega = -0.5;
        for (theta, z) in linear_prc(&model, &adj, &[1.0, 0.0], 33) {
            let want = (-omega * (TAU * theta).cos() - (TAU * theta).sin()) / TAU;
            assert!(
                (z - want).abs() < 2e-6,
                "prc({theta}) = {z}, closed form {want}"
            );
        }
    }

    #[test]
    fn fhn_orbit_agrees_with_direct_integration() {
        let model = ModelDef::by_name("fhn").unwrap();
        let opts = OrbitOptions::for_model(&model);
        let orbit = find_periodic_orbit(&model, &[0.0, 0.0], &opts).unwrap();
        println!("fhn period = {:.12}", orbit.period);
        // independent oracle: the return time measured by integration alone
        let x_ret = orbit.seg.first().to_vec();
        let (t_oracle, _) =
            first_return(&model, &x_ret, 20.0, 1.0, &IntegratorOptions::with_tol(1e-12)).unwrap();
        assert!(
            (orbit.period - t_oracle).abs() < 1e-7 * t_oracle,
            "collocation {} vs integration {}",
            orbit.period,
            t_oracle
        );
        // regression pin (first computed by the cross-check above)
        assert!((orbit.period - 10.711603421579).abs() < 1e-8);
        // the anchor is the spike peak: v̇ = 0 with v above the nullcline fold
        assert!(orbit.seg.first()[0] > 1.5, "anchor {:?}", orbit.seg.first());
    }

    #[test]
    fn fhn_adjoint_invariant_holds_off_the_symmetric_case() {
        let model = ModelDef::by_name("fhn").unwrap();
        let opts = OrbitOptions::for_model(&model);
        let orbit = find_periodic_orbit(&model, &[0.0, 0.0], &opts).unwrap();
        let adj = compute_adjoint_bundle(&model, &orbit, &opts).unwrap();
        println!("fhn trivial exponent = {:.3e}", adj.trivial_exponent);
        assert!(adj.trivial_exponent.abs() < 1e-6);
        let mut f = vec![0.0; 2];
        let mut base = 0.0;
        for (k, s) in [0.0, 0.2, 0.41, 0.63, 0.85].iter().enumerate() {
            let g = adj.orbit.seg.eval(*s);
            let w = adj.w.eval(*s);
            model.eval(&g, &mut f);
            let dot = w[0] * f[0] + w[1] * f[1];
            if k == 0 {
                base = dot;
            } else {
                assert!(
                    (dot - base).abs() < 1e-5 * base.abs(),
                    "invariant drifts: {dot} vs {base} at s = {s}"
                );
            }
        }
    }

    #[test]
    fn inner_basin_seed_reports_a_degenerate_orbit() {
        // a = 0.25 has an attracting equilibrium inside r < a
        let model = winfree(0.25);
        let mut opts = OrbitOptions::for_model(&model);
        opts.t_transient = 30.0;
        let err = find_periodic_orbit(&model, &[0.05, 0.0], &opts).unwrap_err();
        match err {
            Error::DegenerateOrbit(msg) => println!("degenerate: {msg}"),
            other => panic!("expected DegenerateOrbit, got {other:?}"),
        }
    }

    #[test]
    fn direct_bundle_is_refused_beyond_the_plane() {
        let model = ModelDef::by_name("sinoatrial").unwrap();
        let orbit = PeriodicOrbit {
            seg: OrbitSegment::zeros(Mesh::uniform(2), 2, 7),
            period: 1.0,
        };
        match compute_floquet_bundle(&model, &orbit, &OrbitOptions::default()) {
            Err(Error::NonUniqueBundle(7)) => {}
            other => panic!("expected NonUniqueBundle(7), got {other:?}"),
        }
    }

    #[test]
    fn sinoatrial_orbit_and_adjoint_bundle() {
        let model = ModelDef::by_name("sinoatrial").unwrap();
        let opts = OrbitOptions::for_model(&model);
        // gating variables start at their V = −60 steady state
        let x0 = sinoatrial_rest(-60.0);
        let orbit = find_periodic_orbit(&model, &x0, &opts).unwrap();
        println!("sinoatrial period = {:.9} s", orbit.period);
        assert!(
            orbit.period > 0.1 && orbit.period < 2.0,
            "period {} s is outside the physiological band",
            orbit.period
        );
        // regression pin from the first converged run
        assert!((orbit.period - 0.282764798).abs() < 1e-6, "period {}", orbit.period);
        // the anchor is the spike peak; the cycle spans a full action potential
        let mut v_min = f64::INFINITY;
        let mut v_max = f64::NEG_INFINITY;
        for k in 0..=400 {
            let v = orbit.seg.eval(k as f64 / 400.0)[0];
            v_min = v_min.min(v);
            v_max = v_max.max(v);
        }
        println!("V range: [{v_min:.3}, {v_max:.3}] mV");
        assert!(v_max > -20.0 && v_min < -50.0, "no spike: [{v_min}, {v_max}]");
        assert!((orbit.seg.first()[0] - v_max).abs() < 0.5, "anchor is not the V peak");

        let adj = compute_adjoint_bundle(&model, &orbit, &opts).unwrap();
        println!("sinoatrial trivial exponent = {:.3e}", adj.trivial_exponent);
        assert!(adj.trivial_exponent.abs() < 1e-4 / orbit.period);
        let mut f = vec![0.0; 7];
        let mut base = 0.0;
        for (k, s) in [0.0, 0.25, 0.5, 0.75].iter().enumerate() {
            let g = adj.orbit.seg.eval(*s);
            let w = adj.w.eval(*s);
            model.eval(&g, &mut f);
            let dot: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
            if k == 0 {
                base = dot;
                assert!(base > 0.0);
            } else {
                assert!(
                    (dot - base).abs() < 1e-3 * base.abs(),
                    "invariant drifts: {dot} vs {base} at s = {s}"
                );
            }
        }
    }

    pub(crate) fn sinoatrial_rest(v: f64) -> Vec<f64> {
        let model = ModelDef::by_name("sinoatrial").unwrap();
        let gs = match &model {
            ModelDef::Sinoatrial(s) => s.clone(),
            _ => unreachable!(),
        };
        let mut x = vec![v; 1];
        for (alpha, beta) in gs.rates(v) {
            x.push(alpha / (alpha + beta));
        }
        x
    }
}
