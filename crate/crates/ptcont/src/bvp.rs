//! Boundary-value problems on [0, 1]: problem specification, collocation
//! residuals, and the Newton corrector with its structured linear solver.
//!
//! A problem couples one (possibly stacked) ODE y' = f(y, q) with boundary
//! conditions b(y(0), y(1), q) = 0, optional integral constraints
//! ∫₀¹ g(y, q) dt = 0, and a set of named parameters q of which a subset is
//! free. Discretization is polynomial collocation at Gauss points on an
//! [`OrbitSegment`]. The linear solver exploits the almost-block-diagonal
//! shape: per-interval condensation runs in parallel, a sequential sweep
//! chains the mesh points, and a small dense core closes the loop with the
//! boundary/integral/border rows.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::mesh::{CollocationScheme, OrbitSegment};
use crate::par::par_map;
use crate::{Error, Result};

/// Right-hand side of the (stacked) ODE, including any period or speed
/// scaling: the solver integrates y' = f(y, q) over the unit interval.
pub trait OdeRhs: Send + Sync {
    fn dim(&self) -> usize;
    fn npar(&self) -> usize;
    fn eval(&self, y: &[f64], q: &[f64], out: &mut [f64]);
    /// Row-major dim×dim.
    fn jac_y(&self, y: &[f64], q: &[f64], out: &mut [f64]);
    /// Row-major dim×npar, derivatives with respect to all parameters.
    fn jac_q(&self, y: &[f64], q: &[f64], out: &mut [f64]);
}

/// Two-point boundary conditions b(y(0), y(1), q) = 0.
pub trait BoundaryConditions: Send + Sync {
    fn nbc(&self) -> usize;
    fn eval(&self, y0: &[f64], y1: &[f64], q: &[f64], out: &mut [f64]);
    /// j0, j1: nbc×dim; jq: nbc×npar (row-major).
    fn jac(
        &self,
        y0: &[f64],
        y1: &[f64],
        q: &[f64],
        j0: &mut [f64],
        j1: &mut [f64],
        jq: &mut [f64],
    );
}

/// Integral constraints ∫₀¹ g(y(t), q) dt = 0, evaluated by the Gauss rule
/// of the collocation scheme.
pub trait IntegralConstraint: Send + Sync {
    fn nint(&self) -> usize;
    fn eval(&self, y: &[f64], q: &[f64], out: &mut [f64]);
    /// jy: nint×dim, jq: nint×npar.
    fn jac(&self, y: &[f64], q: &[f64], jy: &mut [f64], jq: &mut [f64]);
}

/// An extra dense row bordering the collocation system (arclength
/// conditions, parameter pins). Coefficients are with respect to all
/// representation-point values and the free parameters.
pub trait BorderConstraint: Send + Sync {
    fn residual(&self, sol: &BvpSolution) -> f64;
    fn row(&self, sol: &BvpSolution) -> BorderRow;
}

#[derive(Debug, Clone)]
pub struct BorderRow {
    /// ∂residual/∂(point values), length n_points × dim.
    pub by_point: Vec<f64>,
    /// ∂residual/∂(free parameters), length n_free.
    pub by_param: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Parameters

/// Named problem parameters with a free/frozen mask.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    free: Vec<bool>,
}

impl ParamSet {
    pub fn new(names: &[&str]) -> Self {
        ParamSet {
            names: names.iter().map(|s| s.to_string()).collect(),
            free: vec![false; names.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named '{name}'")))
    }

    pub fn set_free(&mut self, name: &str, free: bool) -> Result<()> {
        let i = self.index(name)?;
        self.free[i] = free;
        Ok(())
    }

    pub fn free_named(mut self, names: &[&str]) -> Result<Self> {
        self.free.iter_mut().for_each(|f| *f = false);
        for name in names {
            let i = self.index(name)?;
            self.free[i] = true;
        }
        Ok(self)
    }

    pub fn is_free(&self, i: usize) -> bool {
        self.free[i]
    }

    pub fn n_free(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.free[i]).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

// ---------------------------------------------------------------------------
// Specification and solution

pub struct BvpSpec {
    pub rhs: Arc<dyn OdeRhs>,
    pub bc: Arc<dyn BoundaryConditions>,
    pub integral: Option<Arc<dyn IntegralConstraint>>,
    pub params: ParamSet,
}

impl BvpSpec {
    pub fn nint(&self) -> usize {
        self.integral.as_ref().map_or(0, |i| i.nint())
    }

    /// dim − nbc − nint + n_free: 0 means an isolated solution (square
    /// Newton system), 1 a one-parameter solution family.
    pub fn wellposedness_index(&self) -> isize {
        self.rhs.dim() as isize - self.bc.nbc() as isize - self.nint() as isize
            + self.params.n_free() as isize
    }
}

/// A discrete solution candidate: segment values plus all parameter values.
#[derive(Debug, Clone)]
pub struct BvpSolution {
    pub seg: OrbitSegment,
    pub params: Vec<f64>,
}

impl BvpSolution {
    pub fn n_unknowns(&self, spec: &BvpSpec) -> usize {
        self.seg.n_points() * self.seg.dim + spec.params.n_free()
    }

    /// sol += scale · delta, with delta laid out as [point values, free params].
    pub fn apply_step(&mut self, spec: &BvpSpec, delta: &[f64], scale: f64) {
        let np = self.seg.n_points() * self.seg.dim;
        for (v, d) in self.seg.values_mut().iter_mut().zip(&delta[..np]) {
            *v += scale * d;
        }
        for (k, &pi) in spec.params.free_indices().iter().enumerate() {
            self.params[pi] += scale * delta[np + k];
        }
    }
}

// ---------------------------------------------------------------------------
// Residual assembly

/// Full residual vector [collocation rows..., bc, integrals, extra borders...].
pub fn residual(spec: &BvpSpec, sol: &BvpSolution, extras: &[&dyn BorderConstraint]) -> Vec<f64> {
    let n = spec.rhs.dim();
    let seg = &sol.seg;
    assert_eq!(seg.dim, n, "segment dimension must match the ODE");
    let scheme = CollocationScheme::new(seg.ncol);
    let nn = seg.mesh.n_intervals();
    let ncol = seg.ncol;
    let q = &sol.params;

    let mut out = Vec::with_capacity(nn * ncol * n + spec.bc.nbc() + spec.nint() + extras.len());

    let mut y = vec![0.0; n];
    let mut ydot = vec![0.0; n];
    let mut fval = vec![0.0; n];
    let mut int_acc = vec![0.0; spec.nint()];
    let mut int_val = vec![0.0; spec.nint()];
    for j in 0..nn {
        let h = seg.mesh.width(j);
        for i in 0..ncol {
            collocated_state(seg, &scheme, j, i, &mut y, &mut ydot);
            spec.rhs.eval(&y, q, &mut fval);
            for c in 0..n {
                out.push(ydot[c] / h - fval[c]);
            }
            if let Some(ic) = &spec.integral {
                ic.eval(&y, q, &mut int_val);
                for (acc, v) in int_acc.iter_mut().zip(&int_val) {
                    *acc += h * scheme.gauss_weights[i] * v;
                }
            }
        }
    }

    let mut bc_val = vec![0.0; spec.bc.nbc()];
    spec.bc.eval(seg.first(), seg.last(), q, &mut bc_val);
    out.extend_from_slice(&bc_val);
    out.extend_from_slice(&int_acc);
    for e in extras {
        out.push(e.residual(sol));
    }
    out
}

pub fn residual_norm(spec: &BvpSpec, sol: &BvpSolution, extras: &[&dyn BorderConstraint]) -> f64 {
    residual(spec, sol, extras)
        .iter()
        .fold(0.0f64, |m, r| m.max(r.abs()))
}

/// Σ_l ℓ_l(σ_i)·X and Σ_l ℓ'_l(σ_i)·X for collocation point i of interval j.
fn collocated_state(
    seg: &OrbitSegment,
    scheme: &CollocationScheme,
    j: usize,
    i: usize,
    y: &mut [f64],
    ydot: &mut [f64],
) {
    let n = seg.dim;
    y.fill(0.0);
    ydot.fill(0.0);
    for l in 0..=seg.ncol {
        let row = seg.point(j * seg.ncol + l);
        let b = scheme.basis_at_gauss[i][l];
        let db = scheme.dbasis_at_gauss[i][l];
        for c in 0..n {
            y[c] += b * row[c];
            ydot[c] += db * row[c];
        }
    }
}

// ---------------------------------------------------------------------------
// Jacobian assembly (shared by the dense and structured paths)

/// One interval's collocation rows: ncol·n equations over the (ncol+1)·n
/// local point values and the free parameters. `rhs` holds −residual.
struct LocalBlock {
    a: Vec<f64>,   // (ncol·n) × ((ncol+1)·n), row-major
    p: Vec<f64>,   // (ncol·n) × nf
    rhs: Vec<f64>, // ncol·n
}

struct DenseBorder {
    x: Vec<f64>, // n_points·n
    p: Vec<f64>, // nf
    rhs: f64,
}

struct Assembled {
    blocks: Vec<LocalBlock>,
    borders: Vec<DenseBorder>,
    n: usize,
    ncol: usize,
    nf: usize,
    n_points: usize,
}

fn assemble(spec: &BvpSpec, sol: &BvpSolution, extras: &[&dyn BorderConstraint]) -> Assembled {
    let n = spec.rhs.dim();
    let seg = &sol.seg;
    let scheme = CollocationScheme::new(seg.ncol);
    let nn = seg.mesh.n_intervals();
    let ncol = seg.ncol;
    let nf = spec.params.n_free();
    let free_idx = spec.params.free_indices();
    let npar = spec.params.len();
    let n_points = seg.n_points();
    let q = &sol.params;

    // interval blocks in parallel
    let interval_ids: Vec<usize> = (0..nn).collect();
    let blocks: Vec<LocalBlock> = par_map(&interval_ids, |&j| {
        let h = seg.mesh.width(j);
        let ncols_local = (ncol + 1) * n;
        let mut a = vec![0.0; ncol * n * ncols_local];
        let mut p = vec![0.0; ncol * n * nf];
        let mut rhs = vec![0.0; ncol * n];
        let mut y = vec![0.0; n];
        let mut ydot = vec![0.0; n];
        let mut fval = vec![0.0; n];
        let mut jy = vec![0.0; n * n];
        let mut jq = vec![0.0; n * npar];
        for i in 0..ncol {
            collocated_state(seg, &scheme, j, i, &mut y, &mut ydot);
            spec.rhs.eval(&y, q, &mut fval);
            spec.rhs.jac_y(&y, q, &mut jy);
            spec.rhs.jac_q(&y, q, &mut jq);
            for c in 0..n {
                let row = i * n + c;
                rhs[row] = -(ydot[c] / h - fval[c]);
                for l in 0..=ncol {
                    let b = scheme.basis_at_gauss[i][l];
                    let db = scheme.dbasis_at_gauss[i][l] / h;
                    for d in 0..n {
                        let mut v = -b * jy[c * n + d];
                        if d == c {
                            v += db;
                        }
                        a[row * ncols_local + l * n + d] = v;
                    }
                }
                for (kk, &k) in free_idx.iter().enumerate() {
                    p[row * nf + kk] = -jq[c * npar + k];
                }
            }
        }
        LocalBlock { a, p, rhs }
    });

    // boundary-condition rows
    let mut borders = Vec::new();
    {
        let nbc = spec.bc.nbc();
        let mut bc_val = vec![0.0; nbc];
        let mut j0 = vec![0.0; nbc * n];
        let mut j1 = vec![0.0; nbc * n];
        let mut jq = vec![0.0; nbc * npar];
        spec.bc.eval(seg.first(), seg.last(), q, &mut bc_val);
        spec.bc.jac(seg.first(), seg.last(), q, &mut j0, &mut j1, &mut jq);
        let last = n_points - 1;
        for r in 0..nbc {
            let mut x = vec![0.0; n_points * n];
            x[..n].copy_from_slice(&j0[r * n..(r + 1) * n]);
            x[last * n..last * n + n].copy_from_slice(&j1[r * n..(r + 1) * n]);
            let p = free_idx.iter().map(|&k| jq[r * npar + k]).collect();
            borders.push(DenseBorder {
                x,
                p,
                rhs: -bc_val[r],
            });
        }
    }

    // integral rows, quadrature over the collocated states
    if let Some(ic) = &spec.integral {
        let nint = ic.nint();
        let mut rows: Vec<DenseBorder> = (0..nint)
            .map(|_| DenseBorder {
                x: vec![0.0; n_points * n],
                p: vec![0.0; nf],
                rhs: 0.0,
            })
            .collect();
        let mut y = vec![0.0; n];
        let mut ydot = vec![0.0; n];
        let mut gval = vec![0.0; nint];
        let mut gy = vec![0.0; nint * n];
        let mut gq = vec![0.0; nint * npar];
        for j in 0..nn {
            let h = seg.mesh.width(j);
            for i in 0..ncol {
                collocated_state(seg, &scheme, j, i, &mut y, &mut ydot);
                ic.eval(&y, q, &mut gval);
                ic.jac(&y, q, &mut gy, &mut gq);
                let w = h * scheme.gauss_weights[i];
                for r in 0..nint {
                    rows[r].rhs -= w * gval[r];
                    for l in 0..=ncol {
                        let b = w * scheme.basis_at_gauss[i][l];
                        let base = (j * ncol + l) * n;
                        for d in 0..n {
                            rows[r].x[base + d] += b * gy[r * n + d];
                        }
                    }
                    for (kk, &k) in free_idx.iter().enumerate() {
                        rows[r].p[kk] += w * gq[r * npar + k];
                    }
                }
            }
        }
        borders.extend(rows);
    }

    for e in extras {
        let row = e.row(sol);
        borders.push(DenseBorder {
            x: row.by_point,
            p: row.by_param,
            rhs: -e.residual(sol),
        });
    }

    // row equilibration
    let ncols_local = (ncol + 1) * n;
    let mut assembled = Assembled {
        blocks,
        borders,
        n,
        ncol,
        nf,
        n_points,
    };
    for block in assembled.blocks.iter_mut() {
        for r in 0..ncol * n {
            let mut s = 0.0f64;
            for v in &block.a[r * ncols_local..(r + 1) * ncols_local] {
                s = s.max(v.abs());
            }
            for v in &block.p[r * nf..(r + 1) * nf] {
                s = s.max(v.abs());
            }
            if s > 0.0 {
                let inv = 1.0 / s;
                block.a[r * ncols_local..(r + 1) * ncols_local]
                    .iter_mut()
                    .for_each(|v| *v *= inv);
                block.p[r * nf..(r + 1) * nf].iter_mut().for_each(|v| *v *= inv);
                block.rhs[r] *= inv;
            }
        }
    }
    for b in assembled.borders.iter_mut() {
        let mut s = 0.0f64;
        b.x.iter().for_each(|v| s = s.max(v.abs()));
        b.p.iter().for_each(|v| s = s.max(v.abs()));
        if s > 0.0 {
            let inv = 1.0 / s;
            b.x.iter_mut().for_each(|v| *v *= inv);
            b.p.iter_mut().for_each(|v| *v *= inv);
            b.rhs *= inv;
        }
    }
    assembled
}

// ---------------------------------------------------------------------------
// Linear solvers

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearSolver {
    /// Structured above ~600 unknowns, dense below.
    Auto,
    Dense,
    Structured,
}

/// Solve the bordered Newton system J δ = −R. The system must be square:
/// wellposedness index == number of extra border rows.
pub fn solve_newton_system(
    spec: &BvpSpec,
    sol: &BvpSolution,
    extras: &[&dyn BorderConstraint],
    solver: LinearSolver,
) -> Result<Vec<f64>> {
    let index = spec.wellposedness_index();
    if index != extras.len() as isize {
        return Err(Error::InvalidInput(format!(
            "system is not square: wellposedness index {index} with {} border rows",
            extras.len()
        )));
    }
    let asm = assemble(spec, sol, extras);
    let unknowns = asm.n_points * asm.n + asm.nf;
    match solver {
        LinearSolver::Dense => solve_dense(&asm),
        LinearSolver::Structured => solve_structured(&asm),
        LinearSolver::Auto => {
            if unknowns > 600 {
                solve_structured(&asm)
            } else {
                solve_dense(&asm)
            }
        }
    }
}

fn solve_dense(asm: &Assembled) -> Result<Vec<f64>> {
    let n = asm.n;
    let ncol = asm.ncol;
    let nf = asm.nf;
    let np = asm.n_points * n;
    let unknowns = np + nf;
    let rows = asm.blocks.len() * ncol * n + asm.borders.len();
    if rows != unknowns {
        return Err(Error::InvalidInput(format!(
            "dense solve expects a square system, got {rows} rows × {unknowns} columns"
        )));
    }
    let ncols_local = (ncol + 1) * n;
    let mut m = DMatrix::<f64>::zeros(rows, unknowns);
    let mut b = DVector::<f64>::zeros(rows);
    let mut row = 0usize;
    for (j, block) in asm.blocks.iter().enumerate() {
        for r in 0..ncol * n {
            for l in 0..=ncol {
                let gcol = (j * ncol + l) * n;
                for d in 0..n {
                    m[(row, gcol + d)] = block.a[r * ncols_local + l * n + d];
                }
            }
            for k in 0..nf {
                m[(row, np + k)] = block.p[r * nf + k];
            }
            b[row] = block.rhs[r];
            row += 1;
        }
    }
    for border in &asm.borders {
        for (c, v) in border.x.iter().enumerate() {
            m[(row, c)] = *v;
        }
        for k in 0..nf {
            m[(row, np + k)] = border.p[k];
        }
        b[row] = border.rhs;
        row += 1;
    }
    let lu = m.lu();
    let x = lu
        .solve(&b)
        .ok_or_else(|| Error::SingularJacobian("dense LU factorization failed".into()))?;
    Ok(x.as_slice().to_vec())
}

// --- structured path -------------------------------------------------------

const PIVOT_TOL: f64 = 1e-12;

/// Gauss–Jordan elimination of the listed columns inside a row-major matrix,
/// also dragging along per-row parameter columns and the RHS, and updating
/// external follower rows (border rows restricted to these columns). Each
/// eliminated column ends with exactly one nonzero, in its pivot row.
struct Eliminator<'a> {
    width: usize,
    rows: &'a mut [f64],
    p: &'a mut [f64],
    nf: usize,
    rhs: &'a mut [f64],
}

impl Eliminator<'_> {
    fn n_rows(&self) -> usize {
        self.rhs.len()
    }

    /// Returns pivot row chosen for `col` among not-yet-used rows.
    fn eliminate_column(
        &mut self,
        col: usize,
        used: &mut [bool],
        followers: &mut [(&mut [f64], &mut [f64], &mut f64)],
    ) -> Result<usize> {
        let nr = self.n_rows();
        let w = self.width;
        let mut prow = usize::MAX;
        let mut best = PIVOT_TOL;
        for r in 0..nr {
            if !used[r] {
                let v = self.rows[r * w + col].abs();
                if v > best {
                    best = v;
                    prow = r;
                }
            }
        }
        if prow == usize::MAX {
            return Err(Error::SingularJacobian(format!(
                "no usable pivot for eliminated column {col}"
            )));
        }
        used[prow] = true;
        let pivot = self.rows[prow * w + col];
        for r in 0..nr {
            if r == prow {
                continue;
            }
            let factor = self.rows[r * w + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in 0..w {
                self.rows[r * w + c] -= factor * self.rows[prow * w + c];
            }
            self.rows[r * w + col] = 0.0;
            for k in 0..self.nf {
                self.p[r * self.nf + k] -= factor * self.p[prow * self.nf + k];
            }
            self.rhs[r] -= factor * self.rhs[prow];
        }
        for (fx, fp, frhs) in followers.iter_mut() {
            let factor = fx[col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in 0..w {
                fx[c] -= factor * self.rows[prow * w + c];
            }
            fx[col] = 0.0;
            for k in 0..self.nf {
                fp[k] -= factor * self.p[prow * self.nf + k];
            }
            **frhs -= factor * self.rhs[prow];
        }
        Ok(prow)
    }
}

struct CondensedBlock {
    a: Vec<f64>,
    p: Vec<f64>,
    rhs: Vec<f64>,
    /// (local column, pivot row) in elimination order.
    pivots: Vec<(usize, usize)>,
    survivors: Vec<usize>,
}

struct SweepStep {
    /// 2n × (3n) candidate matrix after elimination: [x00 | x_j | x_next].
    rows: Vec<f64>,
    p: Vec<f64>,
    rhs: Vec<f64>,
    pivots: Vec<(usize, usize)>,
}

fn solve_structured(asm: &Assembled) -> Result<Vec<f64>> {
    let n = asm.n;
    let ncol = asm.ncol;
    let nf = asm.nf;
    let nn = asm.blocks.len();
    let np = asm.n_points * n;
    let ncols_local = (ncol + 1) * n;
    let rows_total = nn * ncol * n + asm.borders.len();
    if rows_total != np + nf {
        return Err(Error::InvalidInput(format!(
            "structured solve expects a square system, got {rows_total} rows × {} columns",
            np + nf
        )));
    }

    // Stage 1: per-interval condensation of interior point columns, with
    // border-row reductions computed locally and merged afterwards.
    struct BorderDelta {
        x_local: Vec<f64>,
        p: Vec<f64>,
        rhs: f64,
    }
    let interval_ids: Vec<usize> = (0..nn).collect();
    let nb = asm.borders.len();
    let stage1: Vec<Result<(CondensedBlock, Vec<BorderDelta>)>> = par_map(&interval_ids, |&j| {
        let block = &asm.blocks[j];
        let mut a = block.a.clone();
        let mut p = block.p.clone();
        let mut rhs = block.rhs.clone();
        // local copies of each border row restricted to this interval
        let mut bx: Vec<Vec<f64>> = Vec::with_capacity(nb);
        let mut bp: Vec<Vec<f64>> = Vec::with_capacity(nb);
        let mut brhs: Vec<f64> = Vec::with_capacity(nb);
        let base = j * ncol * n;
        for border in &asm.borders {
            bx.push(border.x[base..base + ncols_local].to_vec());
            bp.push(vec![0.0; nf]); // deltas only; start from zero
            brhs.push(0.0);
        }
        let old_bx: Vec<Vec<f64>> = bx.clone();

        let mut used = vec![false; ncol * n];
        let mut pivots = Vec::with_capacity((ncol - 1) * n);
        {
            let mut elim = Eliminator {
                width: ncols_local,
                rows: &mut a,
                p: &mut p,
                nf,
                rhs: &mut rhs,
            };
            let mut followers: Vec<(&mut [f64], &mut [f64], &mut f64)> = bx
                .iter_mut()
                .zip(bp.iter_mut())
                .zip(brhs.iter_mut())
                .map(|((x, pp), r)| (x.as_mut_slice(), pp.as_mut_slice(), r))
                .collect();
            for col in n..ncol * n {
                let prow = elim.eliminate_column(col, &mut used, &mut followers)?;
                pivots.push((col, prow));
            }
        }
        let survivors = (0..ncol * n).filter(|r| !used[*r]).collect();
        let deltas = (0..nb)
            .map(|b| BorderDelta {
                x_local: bx[b]
                    .iter()
                    .zip(&old_bx[b])
                    .map(|(new, old)| new - old)
                    .collect(),
                p: bp[b].clone(),
                rhs: brhs[b],
            })
            .collect();
        Ok((
            CondensedBlock {
                a,
                p,
                rhs,
                pivots,
                survivors,
            },
            deltas,
        ))
    });

    let mut condensed = Vec::with_capacity(nn);
    let mut borders: Vec<DenseBorder> = asm
        .borders
        .iter()
        .map(|b| DenseBorder {
            x: b.x.clone(),
            p: b.p.clone(),
            rhs: b.rhs,
        })
        .collect();
    for (j, item) in stage1.into_iter().enumerate() {
        let (cb, deltas) = item?;
        let base = j * ncol * n;
        for (b, delta) in deltas.into_iter().enumerate() {
            for (c, d) in delta.x_local.iter().enumerate() {
                borders[b].x[base + c] += d;
            }
            for k in 0..nf {
                borders[b].p[k] += delta.p[k];
            }
            borders[b].rhs += delta.rhs;
        }
        // interior columns of this interval are now eliminated exactly
        for border in borders.iter_mut() {
            for c in n..ncol * n {
                border.x[base + c] = 0.0;
            }
        }
        condensed.push(cb);
    }

    // Stage 2: sequential sweep over mesh points 1..nn-1. Front rows couple
    // [x00 | x_j | params]; interval j's survivors couple [x_j | x_{j+1}].
    let width = 3 * n;
    let mut front_rows = vec![0.0; n * width]; // [x00 | xcur | unused]
    let mut front_p = vec![0.0; n * nf];
    let mut front_rhs = vec![0.0; n];
    {
        let cb = &condensed[0];
        for (r, &srow) in cb.survivors.iter().enumerate() {
            for d in 0..n {
                front_rows[r * width + d] = cb.a[srow * ncols_local + d];
                front_rows[r * width + n + d] = cb.a[srow * ncols_local + ncol * n + d];
            }
            for k in 0..nf {
                front_p[r * nf + k] = cb.p[srow * nf + k];
            }
            front_rhs[r] = cb.rhs[srow];
        }
    }

    let mut steps: Vec<SweepStep> = Vec::with_capacity(nn.saturating_sub(1));
    for j in 1..nn {
        // candidates: n front rows then n survivor rows of interval j,
        // columns [x00 | x_j | x_next]
        let mut rows = vec![0.0; 2 * n * width];
        let mut p = vec![0.0; 2 * n * nf];
        let mut rhs = vec![0.0; 2 * n];
        for r in 0..n {
            for d in 0..n {
                rows[r * width + d] = front_rows[r * width + d];
                rows[r * width + n + d] = front_rows[r * width + n + d];
            }
            for k in 0..nf {
                p[r * nf + k] = front_p[r * nf + k];
            }
            rhs[r] = front_rhs[r];
        }
        let cb = &condensed[j];
        for (rr, &srow) in cb.survivors.iter().enumerate() {
            let r = n + rr;
            for d in 0..n {
                rows[r * width + n + d] = cb.a[srow * ncols_local + d];
                rows[r * width + 2 * n + d] = cb.a[srow * ncols_local + ncol * n + d];
            }
            for k in 0..nf {
                p[r * nf + k] = cb.p[srow * nf + k];
            }
            rhs[r] = cb.rhs[srow];
        }

        // re-equilibrate: row scales drift across a long sweep on strongly
        // contracting problems, starving the pivot search
        for r in 0..2 * n {
            let mut s = 0.0f64;
            rows[r * width..(r + 1) * width]
                .iter()
                .for_each(|v| s = s.max(v.abs()));
            p[r * nf..(r + 1) * nf].iter().for_each(|v| s = s.max(v.abs()));
            if s > 0.0 {
                let inv = 1.0 / s;
                rows[r * width..(r + 1) * width]
                    .iter_mut()
                    .for_each(|v| *v *= inv);
                p[r * nf..(r + 1) * nf].iter_mut().for_each(|v| *v *= inv);
                rhs[r] *= inv;
            }
        }

        let gpoint = j * ncol * n; // global columns of x_j
        let mut used = vec![false; 2 * n];
        let mut pivots = Vec::with_capacity(n);
        {
            let mut elim = Eliminator {
                width,
                rows: &mut rows,
                p: &mut p,
                nf,
                rhs: &mut rhs,
            };
            // border followers: restrict to [x00 | x_j | x_next] layout
            let mut fx: Vec<Vec<f64>> = borders
                .iter()
                .map(|b| {
                    let mut v = vec![0.0; width];
                    v[..n].copy_from_slice(&b.x[0..n]);
                    v[n..2 * n].copy_from_slice(&b.x[gpoint..gpoint + n]);
                    let gnext = (j + 1) * ncol * n;
                    v[2 * n..3 * n].copy_from_slice(&b.x[gnext..gnext + n]);
                    v
                })
                .collect();
            let mut fp: Vec<Vec<f64>> = borders.iter().map(|b| b.p.clone()).collect();
            let mut frhs: Vec<f64> = borders.iter().map(|b| b.rhs).collect();
            {
                let mut followers: Vec<(&mut [f64], &mut [f64], &mut f64)> = fx
                    .iter_mut()
                    .zip(fp.iter_mut())
                    .zip(frhs.iter_mut())
                    .map(|((x, pp), r)| (x.as_mut_slice(), pp.as_mut_slice(), r))
                    .collect();
                for col in n..2 * n {
                    let prow = elim.eliminate_column(col, &mut used, &mut followers)?;
                    pivots.push((col, prow));
                }
            }
            // write follower restrictions back
            let gnext = (j + 1) * ncol * n;
            for (b, border) in borders.iter_mut().enumerate() {
                border.x[0..n].copy_from_slice(&fx[b][..n]);
                border.x[gpoint..gpoint + n].copy_from_slice(&fx[b][n..2 * n]);
                border.x[gnext..gnext + n].copy_from_slice(&fx[b][2 * n..3 * n]);
                border.p.copy_from_slice(&fp[b]);
                border.rhs = frhs[b];
            }
        }

        // surviving rows become the new front over [x00 | x_{j+1}]
        let mut new_front = vec![0.0; n * width];
        let mut new_p = vec![0.0; n * nf];
        let mut new_rhs = vec![0.0; n];
        let mut r_out = 0;
        for r in 0..2 * n {
            if !used[r] {
                for d in 0..n {
                    new_front[r_out * width + d] = rows[r * width + d];
                    new_front[r_out * width + n + d] = rows[r * width + 2 * n + d];
                }
                for k in 0..nf {
                    new_p[r_out * nf + k] = p[r * nf + k];
                }
                new_rhs[r_out] = rhs[r];
                r_out += 1;
            }
        }
        debug_assert_eq!(r_out, n);
        front_rows = new_front;
        front_p = new_p;
        front_rhs = new_rhs;
        steps.push(SweepStep {
            rows,
            p,
            rhs,
            pivots,
        });
    }

    // Stage 3: dense core over [x00 | x_end | params].
    let last_point = (asm.n_points - 1) * n;
    let core_cols = 2 * n + nf;
    let core_rows = n + borders.len();
    if core_rows != core_cols {
        return Err(Error::InvalidInput(format!(
            "core system is {core_rows}×{core_cols}, expected square"
        )));
    }
    let mut m = DMatrix::<f64>::zeros(core_rows, core_cols);
    let mut b = DVector::<f64>::zeros(core_rows);
    for r in 0..n {
        for d in 0..n {
            m[(r, d)] = front_rows[r * width + d];
            m[(r, n + d)] = front_rows[r * width + n + d];
        }
        for k in 0..nf {
            m[(r, 2 * n + k)] = front_p[r * nf + k];
        }
        b[r] = front_rhs[r];
    }
    for (i, border) in borders.iter().enumerate() {
        let r = n + i;
        for d in 0..n {
            m[(r, d)] = border.x[d];
            m[(r, n + d)] = border.x[last_point + d];
        }
        for k in 0..nf {
            m[(r, 2 * n + k)] = border.p[k];
        }
        b[r] = border.rhs;
    }
    let core = m
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::SingularJacobian("bordered core system is singular".into()))?;

    // Stage 4: back-substitution.
    let mut delta = vec![0.0; np + nf];
    let dq = &core.as_slice()[2 * n..];
    delta[..n].copy_from_slice(&core.as_slice()[..n]);
    delta[last_point..last_point + n].copy_from_slice(&core.as_slice()[n..2 * n]);
    delta[np..].copy_from_slice(dq);

    // mesh points nn-1 .. 1 from the recorded sweep steps
    for j in (1..nn).rev() {
        let step = &steps[j - 1];
        let g_j = j * ncol * n;
        let g_next = (j + 1) * ncol * n;
        for &(col, prow) in &step.pivots {
            let mut acc = step.rhs[prow];
            for d in 0..n {
                acc -= step.rows[prow * width + d] * delta[d];
                acc -= step.rows[prow * width + 2 * n + d] * delta[g_next + d];
            }
            for k in 0..nf {
                acc -= step.p[prow * nf + k] * dq[k];
            }
            delta[g_j + (col - n)] = acc / step.rows[prow * width + col];
        }
    }

    // interior points of every interval, independently
    let interior: Vec<usize> = (0..nn).collect();
    let interior_cols: Vec<Vec<(usize, f64)>> = {
        let delta_ref = &delta;
        par_map(&interior, |&j| {
            let cb = &condensed[j];
            let base = j * ncol * n;
            let mut out = Vec::with_capacity(cb.pivots.len());
            for &(col, prow) in &cb.pivots {
                let mut acc = cb.rhs[prow];
                for d in 0..n {
                    acc -= cb.a[prow * ncols_local + d] * delta_ref[base + d];
                    acc -= cb.a[prow * ncols_local + ncol * n + d]
                        * delta_ref[base + ncol * n + d];
                }
                for k in 0..nf {
                    acc -= cb.p[prow * nf + k] * dq[k];
                }
                out.push((base + col, acc / cb.a[prow * ncols_local + col]));
            }
            out
        })
    };
    for cols in interior_cols {
        for (c, v) in cols {
            delta[c] = v;
        }
    }
    Ok(delta)
}

// ---------------------------------------------------------------------------
// Newton

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub solver: LinearSolver,
    /// Smallest Armijo damping factor tried before giving up.
    pub min_damping: f64,
    pub verbose: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-9,
            max_iter: 20,
            solver: LinearSolver::Auto,
            min_damping: 1.0 / 256.0,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub iterations: usize,
    pub residual_norm: f64,
    pub min_damping_used: f64,
}

/// Damped Newton on the (bordered) collocation system. The number of extra
/// border constraints must equal the wellposedness index.
pub fn newton_solve(
    spec: &BvpSpec,
    sol: &mut BvpSolution,
    extras: &[&dyn BorderConstraint],
    opts: &NewtonOptions,
) -> Result<NewtonReport> {
    let mut rnorm = residual_norm(spec, sol, extras);
    let mut min_damping_used = 1.0f64;
    for it in 0..opts.max_iter {
        if rnorm < opts.tol {
            return Ok(NewtonReport {
                iterations: it,
                residual_norm: rnorm,
                min_damping_used,
            });
        }
        let delta = solve_newton_system(spec, sol, extras, opts.solver)?;
        let mut lambda = 1.0;
        loop {
            let mut candidate = sol.clone();
            candidate.apply_step(spec, &delta, lambda);
            let rnew = residual_norm(spec, &candidate, extras);
            if rnew.is_finite() && rnew <= (1.0 - 1e-4 * lambda) * rnorm {
                if opts.verbose {
                    println!(
                        "newton it {it}: |R| {rnorm:.3e} -> {rnew:.3e} (damping {lambda})"
                    );
                }
                *sol = candidate;
                rnorm = rnew;
                min_damping_used = min_damping_used.min(lambda);
                break;
            }
            lambda *= 0.5;
            if lambda < opts.min_damping {
                return Err(Error::NoConvergence(format!(
                    "line search stalled at iteration {it}, residual {rnorm:.3e}"
                )));
            }
        }
    }
    if rnorm < opts.tol {
        return Ok(NewtonReport {
            iterations: opts.max_iter,
            residual_norm: rnorm,
            min_damping_used,
        });
    }
    Err(Error::MaxIterations(opts.max_iter, rnorm))
}
