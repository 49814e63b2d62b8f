//! Meshes, collocation rules, and piecewise-polynomial orbit segments.
//!
//! A segment stores values at `ncol + 1` equidistant representation points
//! per mesh interval (endpoints shared between neighbors), which pins down a
//! degree-`ncol` polynomial on each interval. Collocation happens at the
//! Gauss–Legendre points of each interval; the same basis provides dense
//! evaluation anywhere in [0, 1].

use crate::{Error, Result};

/// Gauss–Legendre nodes and weights on [0, 1], by Newton iteration on the
/// Legendre polynomial (three-term recurrence for value and derivative).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-like initial guess on [-1, 1]
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        // weight on [-1, 1] is 2 / ((1 - x²) P'ₙ(x)²); halve for [0, 1]
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[n - 1 - i] = 0.5 * (x + 1.0);
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    if n == 1 {
        return (x, 1.0);
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

// ---------------------------------------------------------------------------
// Collocation scheme: bases evaluated once, reused across all intervals

/// Precomputed Lagrange data for degree-`ncol` collocation: representation
/// nodes ρ_l = l / ncol on the reference interval, Gauss points σ_i, and the
/// basis values/derivatives at the Gauss points.
#[derive(Debug, Clone)]
pub struct CollocationScheme {
    pub ncol: usize,
    pub gauss_nodes: Vec<f64>,
    pub gauss_weights: Vec<f64>,
    /// basis_at_gauss[i][l] = ℓ_l(σ_i)
    pub basis_at_gauss: Vec<Vec<f64>>,
    /// dbasis_at_gauss[i][l] = ℓ'_l(σ_i)
    pub dbasis_at_gauss: Vec<Vec<f64>>,
    /// basis_at_one[l] = ℓ_l(1) (trivially e_ncol, kept for symmetry)
    pub basis_at_one: Vec<f64>,
}

impl CollocationScheme {
    pub fn new(ncol: usize) -> Self {
        assert!((2..=7).contains(&ncol), "collocation degree out of range");
        let (gauss_nodes, gauss_weights) = gauss_legendre(ncol);
        let rho: Vec<f64> = (0..=ncol).map(|l| l as f64 / ncol as f64).collect();
        let basis_at_gauss = gauss_nodes
            .iter()
            .map(|&s| lagrange_values(&rho, s))
            .collect();
        let dbasis_at_gauss = gauss_nodes
            .iter()
            .map(|&s| lagrange_derivatives(&rho, s))
            .collect();
        let basis_at_one = lagrange_values(&rho, 1.0);
        CollocationScheme {
            ncol,
            gauss_nodes,
            gauss_weights,
            basis_at_gauss,
            dbasis_at_gauss,
            basis_at_one,
        }
    }

    pub fn rep_nodes(&self) -> Vec<f64> {
        (0..=self.ncol).map(|l| l as f64 / self.ncol as f64).collect()
    }
}

/// All Lagrange basis values ℓ_l(s) for the node set `nodes`.
pub fn lagrange_values(nodes: &[f64], s: f64) -> Vec<f64> {
    let n = nodes.len();
    let mut out = vec![0.0; n];
    for l in 0..n {
        let mut v = 1.0;
        for m in 0..n {
            if m != l {
                v *= (s - nodes[m]) / (nodes[l] - nodes[m]);
            }
        }
        out[l] = v;
    }
    out
}

/// All Lagrange basis derivatives ℓ'_l(s) for the node set `nodes`.
pub fn lagrange_derivatives(nodes: &[f64], s: f64) -> Vec<f64> {
    let n = nodes.len();
    let mut out = vec![0.0; n];
    for l in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            if k == l {
                continue;
            }
            let mut term = 1.0 / (nodes[l] - nodes[k]);
            for m in 0..n {
                if m != l && m != k {
                    term *= (s - nodes[m]) / (nodes[l] - nodes[m]);
                }
            }
            acc += term;
        }
        out[l] = acc;
    }
    out
}

// ---------------------------------------------------------------------------
// Mesh

/// Strictly increasing breakpoints spanning [0, 1].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mesh {
    breaks: Vec<f64>,
}

impl Mesh {
    pub fn uniform(n_intervals: usize) -> Self {
        assert!(n_intervals >= 1);
        let breaks = (0..=n_intervals)
            .map(|j| j as f64 / n_intervals as f64)
            .collect();
        Mesh { breaks }
    }

    pub fn from_breaks(breaks: Vec<f64>) -> Result<Self> {
        if breaks.len() < 2
            || breaks[0] != 0.0
            || *breaks.last().unwrap() != 1.0
            || breaks.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidInput(
                "mesh breakpoints must increase strictly from 0 to 1".into(),
            ));
        }
        Ok(Mesh { breaks })
    }

    pub fn n_intervals(&self) -> usize {
        self.breaks.len() - 1
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn width(&self, j: usize) -> f64 {
        self.breaks[j + 1] - self.breaks[j]
    }

    /// Index of the interval containing `s` (intervals are closed on the
    /// left; s = 1 belongs to the last).
    pub fn find_interval(&self, s: f64) -> usize {
        debug_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        let j = self.breaks.partition_point(|&b| b <= s);
        j.saturating_sub(1).min(self.n_intervals() - 1)
    }
}

// ---------------------------------------------------------------------------
// Orbit segments

/// Piecewise-polynomial function [0, 1] → R^dim on a mesh: values at the
/// representation points, `n_intervals * ncol + 1` points in total, stored
/// row-major by point.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OrbitSegment {
    pub mesh: Mesh,
    pub ncol: usize,
    pub dim: usize,
    values: Vec<f64>,
}

impl OrbitSegment {
    pub fn zeros(mesh: Mesh, ncol: usize, dim: usize) -> Self {
        let n_points = mesh.n_intervals() * ncol + 1;
        OrbitSegment {
            mesh,
            ncol,
            dim,
            values: vec![0.0; n_points * dim],
        }
    }

    /// Build by sampling `f` at every representation point.
    pub fn from_fn<F: FnMut(f64, &mut [f64])>(
        mesh: Mesh,
        ncol: usize,
        dim: usize,
        mut f: F,
    ) -> Self {
        let mut seg = OrbitSegment::zeros(mesh, ncol, dim);
        for p in 0..seg.n_points() {
            let s = seg.point_time(p);
            let row = &mut seg.values[p * dim..(p + 1) * dim];
            f(s, row);
        }
        seg
    }

    pub fn n_points(&self) -> usize {
        self.mesh.n_intervals() * self.ncol + 1
    }

    /// Time of representation point `p` in [0, 1].
    pub fn point_time(&self, p: usize) -> f64 {
        let j = (p / self.ncol).min(self.mesh.n_intervals() - 1);
        let l = p - j * self.ncol;
        self.mesh.breaks()[j] + self.mesh.width(j) * l as f64 / self.ncol as f64
    }

    pub fn point(&self, p: usize) -> &[f64] {
        &self.values[p * self.dim..(p + 1) * self.dim]
    }

    pub fn point_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.values[p * self.dim..(p + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn first(&self) -> &[f64] {
        self.point(0)
    }

    pub fn last(&self) -> &[f64] {
        self.point(self.n_points() - 1)
    }

    pub fn eval(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(s, &mut out);
        out
    }

    pub fn eval_into(&self, s: f64, out: &mut [f64]) {
        let s = s.clamp(0.0, 1.0);
        let j = self.mesh.find_interval(s);
        let h = self.mesh.width(j);
        let sigma = (s - self.mesh.breaks()[j]) / h;
        let rho: Vec<f64> = (0..=self.ncol)
            .map(|l| l as f64 / self.ncol as f64)
            .collect();
        let w = lagrange_values(&rho, sigma);
        out.fill(0.0);
        for (l, wl) in w.iter().enumerate() {
            let row = self.point(j * self.ncol + l);
            for c in 0..self.dim {
                out[c] += wl * row[c];
            }
        }
    }

    /// Derivative du/ds at `s` (same basis, differentiated).
    pub fn deriv_into(&self, s: f64, out: &mut [f64]) {
        let s = s.clamp(0.0, 1.0);
        let j = self.mesh.find_interval(s);
        let h = self.mesh.width(j);
        let sigma = (s - self.mesh.breaks()[j]) / h;
        let rho: Vec<f64> = (0..=self.ncol)
            .map(|l| l as f64 / self.ncol as f64)
            .collect();
        let w = lagrange_derivatives(&rho, sigma);
        out.fill(0.0);
        for (l, wl) in w.iter().enumerate() {
            let row = self.point(j * self.ncol + l);
            for c in 0..self.dim {
                out[c] += wl * row[c] / h;
            }
        }
    }

    /// Resample onto a new mesh (and/or degree) by dense evaluation.
    pub fn remesh_to(&self, mesh: Mesh, ncol: usize) -> OrbitSegment {
        let mut seg = OrbitSegment::zeros(mesh, ncol, self.dim);
        for p in 0..seg.n_points() {
            let s = seg.point_time(p);
            let mut row = vec![0.0; self.dim];
            self.eval_into(s, &mut row);
            seg.point_mut(p).copy_from_slice(&row);
        }
        seg
    }

    /// Copy components `lo..hi` out into a segment of their own.
    pub fn extract(&self, lo: usize, hi: usize) -> OrbitSegment {
        assert!(lo < hi && hi <= self.dim);
        let mut out = OrbitSegment::zeros(self.mesh.clone(), self.ncol, hi - lo);
        for p in 0..self.n_points() {
            let src = &self.values[p * self.dim + lo..p * self.dim + hi];
            out.point_mut(p).copy_from_slice(src);
        }
        out
    }

    /// Interleave several segments on the same mesh into one wide segment;
    /// this is how composite boundary value problems are seeded.
    pub fn stack(parts: &[&OrbitSegment]) -> OrbitSegment {
        assert!(!parts.is_empty());
        let mesh = parts[0].mesh.clone();
        let ncol = parts[0].ncol;
        for p in parts {
            assert_eq!(p.mesh.breaks(), mesh.breaks(), "stack needs a shared mesh");
            assert_eq!(p.ncol, ncol, "stack needs a shared degree");
        }
        let dim: usize = parts.iter().map(|p| p.dim).sum();
        let mut out = OrbitSegment::zeros(mesh, ncol, dim);
        for pt in 0..out.n_points() {
            let row = out.point_mut(pt);
            let mut off = 0;
            for p in parts {
                row[off..off + p.dim].copy_from_slice(p.point(pt));
                off += p.dim;
            }
        }
        out
    }

    /// Supremum of |component| over representation points.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Local error monitor per interval: magnitude of the jump in the
    /// `ncol`-th derivative across interval ends, the standard smoothness
    /// indicator for a degree-`ncol` piecewise polynomial.
    pub fn error_monitor(&self) -> Vec<f64> {
        let n = self.mesh.n_intervals();
        let ncol = self.ncol;
        // constant ncol-th derivative on each interval via forward differences
        let mut dcol = vec![0.0; n];
        let scale = 1.0 + self.sup_norm();
        for j in 0..n {
            let delta = self.mesh.width(j) / ncol as f64;
            let mut acc: f64 = 0.0;
            for c in 0..self.dim {
                let mut diff: f64 = 0.0;
                let mut sign = if ncol % 2 == 0 { 1.0 } else { -1.0 };
                let mut binom = 1.0f64;
                for l in 0..=ncol {
                    diff += sign * binom * self.point(j * ncol + l)[c];
                    sign = -sign;
                    binom *= (ncol - l) as f64 / (l + 1) as f64;
                }
                acc = acc.max((diff / delta.powi(ncol as i32)).abs());
            }
            dcol[j] = acc / scale;
        }
        // jump across interior breaks, averaged back onto intervals
        let mut monitor = vec![0.0; n];
        for j in 0..n {
            let left = if j > 0 {
                (dcol[j] - dcol[j - 1]).abs()
                    / (0.5 * (self.mesh.width(j) + self.mesh.width(j - 1)))
            } else {
                0.0
            };
            let right = if j + 1 < n {
                (dcol[j + 1] - dcol[j]).abs()
                    / (0.5 * (self.mesh.width(j) + self.mesh.width(j + 1)))
            } else {
                0.0
            };
            monitor[j] = left.max(right);
        }
        monitor
    }

    /// Equidistributing mesh with `n_new` intervals for this segment's
    /// error monitor. The density is monitor^(1/(ncol+1)) blended with a
    /// uniform floor: a sharp boundary layer may claim most points, but
    /// roughly a quarter of them always stay spread over the whole axis, so
    /// smooth components sharing the mesh keep a usable resolution.
    pub fn adapted_mesh(&self, n_new: usize) -> Mesh {
        let monitor = self.error_monitor();
        let expo = 1.0 / (self.ncol as f64 + 1.0);
        let mean: f64 = monitor
            .iter()
            .zip(0..self.mesh.n_intervals())
            .map(|(m, j)| m.powf(expo) * self.mesh.width(j))
            .sum();
        let floor = (0.35 * mean).max(1e-12);
        let density: Vec<f64> = monitor.iter().map(|m| m.powf(expo) + floor).collect();
        // cumulative integral of the piecewise-constant density
        let n_old = self.mesh.n_intervals();
        let mut cum = vec![0.0; n_old + 1];
        for j in 0..n_old {
            cum[j + 1] = cum[j] + density[j] * self.mesh.width(j);
        }
        let total = cum[n_old];
        let mut breaks = vec![0.0; n_new + 1];
        breaks[n_new] = 1.0;
        let mut j = 0usize;
        for (i, b) in breaks.iter_mut().enumerate().take(n_new).skip(1) {
            let target = total * i as f64 / n_new as f64;
            while j + 1 < n_old && cum[j + 1] < target {
                j += 1;
            }
            let frac = (target - cum[j]) / (cum[j + 1] - cum[j]);
            *b = self.mesh.breaks()[j] + frac * self.mesh.width(j);
        }
        Mesh::from_breaks(breaks).expect("equidistribution preserves monotonicity")
    }
}

/// Concatenate two segments into one on [0, 1], giving the first a fraction
/// `w_a / (w_a + w_b)` of the new time axis (time weights are typically the
/// physical durations of the pieces). The junction value is taken from the
/// start of `b`; callers are expected to pass pieces with matching ends.
pub fn concat_weighted(a: &OrbitSegment, b: &OrbitSegment, w_a: f64, w_b: f64) -> OrbitSegment {
    assert_eq!(a.dim, b.dim);
    assert_eq!(a.ncol, b.ncol);
    assert!(w_a > 0.0 && w_b > 0.0);
    let split = w_a / (w_a + w_b);
    let mut breaks: Vec<f64> = a.mesh.breaks().iter().map(|t| t * split).collect();
    breaks.pop();
    breaks.extend(b.mesh.breaks().iter().map(|t| split + t * (1.0 - split)));
    let mesh = Mesh::from_breaks(breaks).expect("concatenated breakpoints are monotone");
    let na = a.mesh.n_intervals() * a.ncol; // points of `a` minus its endpoint
    let mut seg = OrbitSegment::zeros(mesh, a.ncol, a.dim);
    for p in 0..seg.n_points() {
        let row: Vec<f64> = if p < na {
            a.point(p).to_vec()
        } else {
            b.point(p - na).to_vec()
        };
        seg.point_mut(p).copy_from_slice(&row);
    }
    seg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_four_point_rule() {
        let (x, w) = gauss_legendre(4);
        let expect_x = [
            0.06943184420297371,
            0.33000947820757187,
            0.6699905217924281,
            0.9305681557970262,
        ];
        let expect_w = [
            0.1739274225687269,
            0.3260725774312731,
            0.3260725774312731,
            0.1739274225687269,
        ];
        for i in 0..4 {
            assert!((x[i] - expect_x[i]).abs() < 1e-15, "node {i}: {}", x[i]);
            assert!((w[i] - expect_w[i]).abs() < 1e-15, "weight {i}: {}", w[i]);
        }
    }

    #[test]
    fn gauss_rule_integrates_degree_seven_exactly() {
        let (x, w) = gauss_legendre(4);
        let integral: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(7)).sum();
        assert!((integral - 0.125).abs() < 1e-15);
        for n in 1..=7 {
            let (x, w) = gauss_legendre(n);
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() < 1e-14, "weights for n={n} sum to {total}");
            let linear: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi).sum();
            assert!((linear - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn lagrange_basis_is_cardinal_and_sums_to_one() {
        let scheme = CollocationScheme::new(4);
        let rho = scheme.rep_nodes();
        for (l, &node) in rho.iter().enumerate() {
            let vals = lagrange_values(&rho, node);
            for (m, v) in vals.iter().enumerate() {
                let expect = if m == l { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-14);
            }
        }
        let vals = lagrange_values(&rho, 0.377);
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        let derivs = lagrange_derivatives(&rho, 0.377);
        assert!(derivs.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_matching_degree_polynomials() {
        let mesh = Mesh::uniform(3);
        let f = |s: f64| 2.0 - s + 3.0 * s * s - s * s * s * s; // degree 4
        let seg = OrbitSegment::from_fn(mesh, 4, 1, |s, out| out[0] = f(s));
        for j in 0..=100 {
            let s = j as f64 / 100.0;
            let v = seg.eval(s)[0];
            assert!((v - f(s)).abs() < 1e-13, "s = {s}: {v} vs {}", f(s));
        }
        // derivative too
        let mut d = [0.0];
        seg.deriv_into(0.3, &mut d);
        let expect = -1.0 + 6.0 * 0.3 - 4.0 * 0.3f64.powi(3);
        assert!((d[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn interpolation_error_shrinks_at_order_five() {
        let err_for = |n: usize| -> f64 {
            let seg = OrbitSegment::from_fn(Mesh::uniform(n), 4, 1, |s, out| {
                out[0] = (std::f64::consts::TAU * s).sin()
            });
            let mut worst = 0.0f64;
            for j in 0..=1000 {
                let s = j as f64 / 1000.0;
                worst = worst.max((seg.eval(s)[0] - (std::f64::consts::TAU * s).sin()).abs());
            }
            worst
        };
        let (e1, e2) = (err_for(8), err_for(16));
        let ratio = e1 / e2;
        println!("sup errors {e1:.3e} -> {e2:.3e}, ratio {ratio:.1}");
        assert!(
            ratio > 20.0 && ratio < 45.0,
            "halving h should shrink error ~2^5, got {ratio}"
        );
    }

    #[test]
    fn find_interval_handles_breakpoints() {
        let mesh = Mesh::from_breaks(vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(mesh.find_interval(0.0), 0);
        assert_eq!(mesh.find_interval(0.25), 1);
        assert_eq!(mesh.find_interval(0.49), 1);
        assert_eq!(mesh.find_interval(0.5), 2);
        assert_eq!(mesh.find_interval(1.0), 2);
    }

    #[test]
    fn invalid_meshes_are_rejected() {
        assert!(Mesh::from_breaks(vec![0.0, 0.5]).is_err()); // doesn't end at 1
        assert!(Mesh::from_breaks(vec![0.0, 0.6, 0.4, 1.0]).is_err());
        assert!(Mesh::from_breaks(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    }

    #[test]
    fn adapted_mesh_beats_uniform_on_a_boundary_layer() {
        let layer = |s: f64| (-s / 0.02).exp();
        let sup_err = |seg: &OrbitSegment| -> f64 {
            let mut worst = 0.0f64;
            for j in 0..=2000 {
                let s = j as f64 / 2000.0;
                worst = worst.max((seg.eval(s)[0] - layer(s)).abs());
            }
            worst
        };
        let uniform = OrbitSegment::from_fn(Mesh::uniform(12), 4, 1, |s, out| {
            out[0] = layer(s)
        });
        let e_uniform = sup_err(&uniform);
        // two adaptation sweeps, same interval budget
        let mut seg = uniform.clone();
        for _ in 0..2 {
            let mesh = seg.adapted_mesh(12);
            seg = OrbitSegment::from_fn(mesh, 4, 1, |s, out| out[0] = layer(s));
        }
        let e_adapted = sup_err(&seg);
        println!("uniform {e_uniform:.3e} vs adapted {e_adapted:.3e}");
        assert!(
            e_adapted * 4.0 < e_uniform,
            "adaptation should cut the boundary-layer error: {e_uniform:.3e} -> {e_adapted:.3e}"
        );
        // first interval must have shrunk toward the layer
        assert!(seg.mesh.width(0) < 1.0 / 24.0);
    }

    #[test]
    fn remesh_preserves_values_to_interpolation_accuracy() {
        let seg = OrbitSegment::from_fn(Mesh::uniform(10), 4, 2, |s, out| {
            out[0] = (std::f64::consts::TAU * s).cos();
            out[1] = s * s;
        });
        let remeshed = seg.remesh_to(Mesh::uniform(17), 4);
        for j in 0..=200 {
            let s = j as f64 / 200.0;
            let a = seg.eval(s);
            let b = remeshed.eval(s);
            // the cosine component carries the O(h^5) interpolation error of
            // both meshes; s² is reproduced exactly
            assert!((a[0] - b[0]).abs() < 1e-5 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn concatenation_stitches_two_pieces() {
        // a(s) = s on [0, 1], b(s) = 1 + s on [0, 1], weights 1:1
        let a = OrbitSegment::from_fn(Mesh::uniform(4), 4, 1, |s, out| out[0] = s);
        let b = OrbitSegment::from_fn(Mesh::uniform(6), 4, 1, |s, out| out[0] = 1.0 + s);
        let c = concat_weighted(&a, &b, 1.0, 1.0);
        assert_eq!(c.mesh.n_intervals(), 10);
        // c should be the ramp 2s across the whole span
        for j in 0..=100 {
            let s = j as f64 / 100.0;
            assert!((c.eval(s)[0] - 2.0 * s).abs() < 1e-12, "s = {s}");
        }
        // 2:1 weighting puts the junction at s = 2/3
        let c = concat_weighted(&a, &b, 2.0, 1.0);
        assert!((c.eval(2.0 / 3.0)[0] - 1.0).abs() < 1e-12);
    }
}
