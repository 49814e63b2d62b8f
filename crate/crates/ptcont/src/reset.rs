//! Phase transition curves of an attracting cycle under a perturbation.
//!
//! A kick of strength A in direction d moves the oscillator off its cycle
//! at γ_ϑ; the asymptotic phase ϑ_new of the kicked point is what the PTC
//! records. Instead of integrating until the transient dies out, everything
//! is posed as one multi-segment collocation problem whose solution family
//! in ϑ *is* the PTC:
//!
//!   g    cycle copy anchored at the landing phase, g(0) = γ_{ϑ_new}
//!   v    linearization along g — the eigenfunction of the stable Floquet
//!        exponent (planar kicks) or the adjoint bundle (pulses, any n) —
//!        giving the isochron tangent/normal at g(0)
//!   w    phase monitor for g: flows for ν·T from g(0) and must land on a
//!        fixed section through γ₀, so ϑ_new = 1 − ν (mod 1)
//!   u    the reset trajectory: k full periods from the kicked point (for
//!        pulses split into an on-segment of duration Δt and the free
//!        remainder), required to land on the linearized isochron of g(0)
//!        at signed (or Euclidean) offset η
//!   g_u  cycle copy anchored at the kick phase, g_u(0) = γ_ϑ
//!   w_u  phase monitor pinning g_u(0) to phase ϑ
//!
//! All segments share one mesh; the stacked system has 6n (kick) or 7n
//! (pulse) states and seven parameters (T, λ, ν, η, T̂, ϑ, A), of which
//! five are passive and one — ϑ or A — drives the continuation. Whenever
//! the landing offset |η| exceeds a cap, u is extended by one more period
//! (k → k+1) so the linearization stays honest; near the basin boundary of
//! the cycle this is what buys the transient enough time to settle.

use std::cell::Cell;
use std::sync::Arc;

use crate::bvp::{
    newton_solve, residual_norm, BoundaryConditions, BvpSolution, BvpSpec, NewtonOptions, OdeRhs,
    ParamSet,
};
use crate::continuation::{
    continue_branch, ContinuationOptions, Event, EventAction, Hooks, StopReason,
};
use crate::mesh::{Mesh, OrbitSegment};
use crate::model::{
    jacobian_adjoint_directional, jacobian_directional, ModelDef, Perturbation, PerturbationKind,
    PulsedField, VectorField,
};
use crate::oracle::{integrate, IntegratorOptions, ReferenceCycle};
use crate::periodic::OrbitRecord;
use crate::{Error, Result};

// parameter slots shared by every formulation
const P_T: usize = 0;
const P_LAM: usize = 1;
const P_NU: usize = 2;
const P_ETA: usize = 3;
const P_THAT: usize = 4;
const P_THETA: usize = 5;
const P_A: usize = 6;
const PARAM_NAMES: [&str; 7] = ["T", "lambda", "nu", "eta", "That", "theta", "A"];
const PASSIVE: [&str; 5] = ["T", "lambda", "nu", "eta", "That"];

// ---------------------------------------------------------------------------
// Options

#[derive(Debug, Clone)]
pub struct ResetOptions {
    /// Landing-offset cap |η| that triggers extending u by one period.
    pub eta_max: f64,
    /// Hard limit on the number of periods u may span.
    pub k_max: usize,
    /// Mesh intervals for the composite problem; 0 inherits the bundle mesh.
    pub ntst: usize,
    /// Extra intervals granted per additional lap of u.
    pub ntst_per_lap: usize,
    pub ntst_cap: usize,
    /// Accepted steps between mesh adaptations during a run.
    pub adapt_every: usize,
    /// Total accepted-step budget across one parameter run.
    pub max_total_steps: usize,
    pub newton: NewtonOptions,
    /// Continuation settings for the ϑ sweep.
    pub sweep: ContinuationOptions,
    /// Continuation settings for amplitude runs (A is normalized to [0,1]).
    pub amplitude: ContinuationOptions,
    /// |dϑ_new/dϑ_old| above this marks a sample as part of a steep segment.
    pub steep_slope: f64,
    /// Extrema shallower than this (in ϑ_new) are counted as noise.
    pub prominence: f64,
    /// Pulse bootstrap starts at this fraction of the target amplitude.
    pub bootstrap_fraction: f64,
}

impl Default for ResetOptions {
    fn default() -> Self {
        let mut sweep = ContinuationOptions::default();
        sweep.ds0 = 5e-3;
        sweep.ds_min = 1e-10;
        sweep.ds_max = 0.02;
        sweep.max_steps = 10_000;
        let mut amplitude = ContinuationOptions::default();
        amplitude.ds0 = 5e-3;
        amplitude.ds_min = 1e-10;
        amplitude.ds_max = 0.04;
        amplitude.max_steps = 10_000;
        ResetOptions {
            eta_max: 0.1,
            k_max: 40,
            ntst: 0,
            ntst_per_lap: 20,
            ntst_cap: 400,
            adapt_every: 30,
            max_total_steps: 25_000,
            newton: NewtonOptions::default(),
            sweep,
            amplitude,
            steep_slope: 50.0,
            prominence: 1e-3,
            bootstrap_fraction: 1e-3,
        }
    }
}

impl ResetOptions {
    /// Tuning that the shipped models want; anything unknown gets defaults.
    pub fn for_model(name: &str) -> Self {
        let mut o = ResetOptions::default();
        match name {
            // the relaxation models move two orders of magnitude more state
            // per unit of sweep parameter than the polar one; without wider
            // arclength caps the sweep crawls
            "fhn" => {
                o.ntst = 150;
                o.ntst_cap = 400;
                o.adapt_every = 100;
                o.max_total_steps = 40_000;
                o.sweep.ds_max = 0.4;
                o.sweep.ds0 = 0.03;
                o.amplitude.ds_max = 0.4;
                o.amplitude.ds0 = 0.03;
                // the steep windows leave little slack between "converged"
                // and "drifting": a tight corrector keeps the orbit block
                // (period, exponent) pinned while the reset block strains
                o.newton.tol = 1e-10;
                o.newton.min_damping = 1.0 / 1024.0;
                o.sweep.newton = o.newton.clone();
                o.amplitude.newton = o.newton.clone();
            }
            "sinoatrial" => {
                o.ntst = 180;
                o.ntst_cap = 320;
                o.ntst_per_lap = 30;
                o.adapt_every = 100;
                o.sweep.ds_max = 0.1;
                o.sweep.ds0 = 0.01;
                o.amplitude.ds_max = 0.1;
                o.amplitude.ds0 = 0.01;
            }
            _ => {}
        }
        o
    }
}

// ---------------------------------------------------------------------------
// Curve output

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SweepParam {
    /// The kick phase ϑ_old runs over [0, 1] at fixed amplitude.
    Theta,
    /// The amplitude runs over [0, a_max] at fixed kick phase.
    Amplitude { theta_fixed: f64 },
}

/// One accepted point of a phase transition (or amplitude response) curve.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PtcSample {
    /// Sweep coordinate: ϑ_old, or the physical amplitude for A-runs.
    pub x: f64,
    pub theta_old: f64,
    /// Landing phase on the covering space (continuous, no mod-1 jumps).
    pub theta_new: f64,
    /// Landing offset along the linearized isochron at this point.
    pub eta: f64,
    /// Periods the reset trajectory spans here.
    pub k: usize,
    pub steep: bool,
    /// Accumulated curve length in the (x, ϑ_new) plane from the first sample.
    pub arclength: f64,
}

impl PtcSample {
    pub fn theta_new_mod1(&self) -> f64 {
        self.theta_new.rem_euclid(1.0)
    }
    /// Phase shift ϑ_new − ϑ_old on the covering space.
    pub fn delta(&self) -> f64 {
        self.theta_new - self.theta_old
    }
    pub fn delta_mod1(&self) -> f64 {
        self.delta().rem_euclid(1.0)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Extremum {
    pub x: f64,
    /// ϑ_new at the extremum, reduced mod 1.
    pub value: f64,
    pub is_max: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Classification {
    /// Monotone (type 1) or not (type 0).
    pub invertible: bool,
    pub extrema: Vec<Extremum>,
}

/// Largest drift of the passive parameters seen along a branch, against the
/// reference orbit data. These should sit at discretization level: the
/// continuation only reshuffles the segments, never the cycle itself.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct PassivityDrift {
    pub period_rel: f64,
    pub t_hat_rel: f64,
    pub exponent_abs: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhaseCurve {
    /// Samples sorted ascending in `x`.
    pub samples: Vec<PtcSample>,
    pub sweep: SweepParam,
    /// Physical kick amplitude (for A-runs: the end of the range).
    pub amplitude: f64,
    pub direction: Vec<f64>,
    pub kind: PerturbationKind,
    pub classification: Option<Classification>,
    /// (x, k) at every point where the reset trajectory gained a lap.
    pub k_history: Vec<(f64, usize)>,
    pub passivity: PassivityDrift,
    /// Set when the sweep could not be completed: (x reached, reason).
    pub failure: Option<(f64, String)>,
}

impl PhaseCurve {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    /// Net change of unwrapped ϑ_new over the sweep; 1 for a full PTC of a
    /// perturbed cycle that stayed inside the basin.
    pub fn winding(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.theta_new - a.theta_new,
            _ => 0.0,
        }
    }

    /// Mismatch between the two ends of a ϑ sweep on the torus, or None if
    /// this is not a closed full sweep.
    pub fn closure_error(&self) -> Option<f64> {
        if self.sweep != SweepParam::Theta || self.samples.len() < 2 {
            return None;
        }
        let a = self.samples.first().unwrap();
        let b = self.samples.last().unwrap();
        if a.x.abs() > 1e-9 || (b.x - 1.0).abs() > 1e-9 {
            return None;
        }
        Some(crate::oracle::circular_distance(
            a.theta_new_mod1(),
            b.theta_new_mod1(),
        ))
    }

    /// Largest |ϑ_new| jump between consecutive samples (continuity check).
    pub fn max_jump(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| (w[1].theta_new - w[0].theta_new).abs())
            .fold(0.0, f64::max)
    }

    /// Linear interpolation of unwrapped ϑ_new at sweep coordinate `x`.
    pub fn theta_new_at(&self, x: f64) -> Option<f64> {
        let s = &self.samples;
        if s.len() < 2 || x < s[0].x || x > s[s.len() - 1].x {
            return None;
        }
        let j = s.partition_point(|p| p.x <= x).clamp(1, s.len() - 1);
        let (a, b) = (&s[j - 1], &s[j]);
        let t = if b.x > a.x { (x - a.x) / (b.x - a.x) } else { 0.0 };
        Some(a.theta_new + t * (b.theta_new - a.theta_new))
    }

    /// Interior local extrema of ϑ_new over x, ignoring wiggles shallower
    /// than `prominence`, plus the monotonicity verdict.
    pub fn classify_with(&self, prominence: f64) -> Classification {
        let pts: Vec<(f64, f64)> = self.samples.iter().map(|p| (p.x, p.theta_new)).collect();
        let mut ext: Vec<(f64, f64, bool)> = Vec::new(); // (x, value, is_max)
        let mut last_sign = 0i8;
        for w in pts.windows(2) {
            let d = w[1].1 - w[0].1;
            let sign = if d > 0.0 {
                1
            } else if d < 0.0 {
                -1
            } else {
                continue;
            };
            if last_sign != 0 && sign != last_sign {
                ext.push((w[0].0, w[0].1, last_sign > 0));
            }
            last_sign = sign;
        }
        // peel off the shallowest adjacent max/min pair until everything
        // that remains clears the prominence bar
        loop {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..ext.len().saturating_sub(1) {
                let gap = (ext[j].1 - ext[j + 1].1).abs();
                if best.map_or(true, |(_, g)| gap < g) {
                    best = Some((j, gap));
                }
            }
            match best {
                Some((j, gap)) if gap < prominence => {
                    ext.drain(j..j + 2);
                }
                _ => break,
            }
        }
        let extrema: Vec<Extremum> = ext
            .into_iter()
            .map(|(x, v, is_max)| Extremum {
                x,
                value: v.rem_euclid(1.0),
                is_max,
            })
            .collect();
        let monotone = pts.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-9)
            || pts.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-9);
        Classification {
            invertible: extrema.is_empty() && monotone,
            extrema,
        }
    }

    pub fn classify(&self) -> Classification {
        self.classify_with(1e-3)
    }

    /// Steep runs as (x_lo, x_hi) spans of consecutively flagged samples.
    pub fn steep_segments(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut open: Option<(f64, f64)> = None;
        for p in &self.samples {
            if p.steep {
                open = Some(match open {
                    None => (p.x, p.x),
                    Some((lo, _)) => (lo, p.x),
                });
            } else if let Some(span) = open.take() {
                out.push(span);
            }
        }
        if let Some(span) = open {
            out.push(span);
        }
        out
    }

    /// CSV with 17 significant digits; A-sweeps lead with the amplitude.
    pub fn csv(&self) -> String {
        let mut s = String::new();
        let x_name = match self.sweep {
            SweepParam::Theta => "theta_old",
            SweepParam::Amplitude { .. } => "amplitude_A",
        };
        s.push_str(&format!(
            "{x_name},theta_new_mod1,theta_new_unwrapped,delta_mod1,arclength_L,steep_flag\n"
        ));
        for p in &self.samples {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                p.x,
                p.theta_new_mod1(),
                p.theta_new,
                p.delta_mod1(),
                p.arclength,
                p.steep as u8
            ));
        }
        s
    }
}

/// Result of an amplitude run: the curve in A, plus exact readings at the
/// requested amplitudes (resolved by the event machinery, not interpolated).
#[derive(Debug, Clone)]
pub struct AmplitudeRun {
    pub curve: PhaseCurve,
    /// (physical amplitude, unwrapped ϑ_new) per requested recording.
    pub hits: Vec<(f64, f64)>,
}

// ---------------------------------------------------------------------------
// Right-hand sides

/// Six stacked segments, planar kick: g, v, w, u, g_u, w_u.
struct KickRhs {
    field: ModelDef,
    k: usize,
}

impl OdeRhs for KickRhs {
    fn dim(&self) -> usize {
        6 * self.field.dim()
    }
    fn npar(&self) -> usize {
        7
    }
    fn eval(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let (t, lam, nu, that, theta) = (q[P_T], q[P_LAM], q[P_NU], q[P_THAT], q[P_THETA]);
        let mut f = vec![0.0; n];
        let mut jac = vec![0.0; n * n];
        self.field.eval(&y[0..n], &mut f);
        for i in 0..n {
            out[i] = t * f[i];
        }
        self.field.jacobian(&y[0..n], &mut jac);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += jac[i * n + j] * y[n + j];
            }
            out[n + i] = t * (acc - lam * y[n + i]);
        }
        self.field.eval(&y[2 * n..3 * n], &mut f);
        for i in 0..n {
            out[2 * n + i] = nu * t * f[i];
        }
        self.field.eval(&y[3 * n..4 * n], &mut f);
        for i in 0..n {
            out[3 * n + i] = self.k as f64 * t * f[i];
        }
        self.field.eval(&y[4 * n..5 * n], &mut f);
        for i in 0..n {
            out[4 * n + i] = that * f[i];
        }
        self.field.eval(&y[5 * n..6 * n], &mut f);
        for i in 0..n {
            out[5 * n + i] = (1.0 - theta) * that * f[i];
        }
    }
    fn jac_y(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let nd = 6 * n;
        let (t, lam, nu, that, theta) = (q[P_T], q[P_LAM], q[P_NU], q[P_THAT], q[P_THETA]);
        out[..nd * nd].fill(0.0);
        let mut jac = vec![0.0; n * n];
        let block = |rows: usize, cols: usize, scale: f64, jac: &[f64], out: &mut [f64]| {
            for i in 0..n {
                for j in 0..n {
                    out[(rows + i) * nd + cols + j] += scale * jac[i * n + j];
                }
            }
        };
        self.field.jacobian(&y[0..n], &mut jac);
        block(0, 0, t, &jac, out);
        // v rows: T (DF(g) − λ) on v, plus the state-dependence of DF(g)·v
        block(n, n, t, &jac, out);
        for i in 0..n {
            out[(n + i) * nd + n + i] -= t * lam;
        }
        let mut second = vec![0.0; n * n];
        jacobian_directional(&self.field, &y[0..n], &y[n..2 * n], &mut second);
        block(n, 0, t, &second, out);
        self.field.jacobian(&y[2 * n..3 * n], &mut jac);
        block(2 * n, 2 * n, nu * t, &jac, out);
        self.field.jacobian(&y[3 * n..4 * n], &mut jac);
        block(3 * n, 3 * n, self.k as f64 * t, &jac, out);
        self.field.jacobian(&y[4 * n..5 * n], &mut jac);
        block(4 * n, 4 * n, that, &jac, out);
        self.field.jacobian(&y[5 * n..6 * n], &mut jac);
        block(5 * n, 5 * n, (1.0 - theta) * that, &jac, out);
    }
    fn jac_q(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let nd = 6 * n;
        let (t, lam, nu, that, theta) = (q[P_T], q[P_LAM], q[P_NU], q[P_THAT], q[P_THETA]);
        out[..nd * 7].fill(0.0);
        let mut f = vec![0.0; n];
        let mut jac = vec![0.0; n * n];
        self.field.eval(&y[0..n], &mut f);
        for i in 0..n {
            out[i * 7 + P_T] = f[i];
        }
        self.field.jacobian(&y[0..n], &mut jac);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += jac[i * n + j] * y[n + j];
            }
            out[(n + i) * 7 + P_T] = acc - lam * y[n + i];
            out[(n + i) * 7 + P_LAM] = -t * y[n + i];
        }
        self.field.eval(&y[2 * n..3 * n], &mut f);
        for i in 0..n {
            out[(2 * n + i) * 7 + P_T] = nu * f[i];
            out[(2 * n + i) * 7 + P_NU] = t * f[i];
        }
        self.field.eval(&y[3 * n..4 * n], &mut f);
        for i in 0..n {
            out[(3 * n + i) * 7 + P_T] = self.k as f64 * f[i];
        }
        self.field.eval(&y[4 * n..5 * n], &mut f);
        for i in 0..n {
            out[(4 * n + i) * 7 + P_THAT] = f[i];
        }
        self.field.eval(&y[5 * n..6 * n], &mut f);
        for i in 0..n {
            out[(5 * n + i) * 7 + P_THAT] = (1.0 - theta) * f[i];
            out[(5 * n + i) * 7 + P_THETA] = -that * f[i];
        }
    }
}

/// Seven stacked segments, pulsed drive: g, v (adjoint), w, u_on, u_off,
/// g_u, w_u. `a_scale` maps the normalized amplitude parameter to drive
/// units so the continuation steps stay O(1) regardless of the model.
struct PulseRhs {
    field: ModelDef,
    k: usize,
    dt: f64,
    direction: Vec<f64>,
    a_scale: f64,
}

impl OdeRhs for PulseRhs {
    fn dim(&self) -> usize {
        7 * self.field.dim()
    }
    fn npar(&self) -> usize {
        7
    }
    fn eval(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let (t, lam, nu, that, theta) = (q[P_T], q[P_LAM], q[P_NU], q[P_THAT], q[P_THETA]);
        let a = q[P_A] * self.a_scale;
        let mut f = vec![0.0; n];
        let mut jac = vec![0.0; n * n];
        self.field.eval(&y[0..n], &mut f);
        for i in 0..n {
            out[i] = t * f[i];
        }
        // adjoint rows: the transpose flow runs against time along g
        self.field.jacobian(&y[0..n], &mut jac);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += jac[i * n + j] * y[n + i];
            }
            out[n + j] = -t * (acc - lam * y[n + j]);
        }
        self.field.eval(&y[2 * n..3 * n], &mut f);
        for i in 0..n {
            out[2 * n + i] = nu * t * f[i];
        }
        self.field.eval(&y[3 * n..4 * n], &mut f);
        for i in 0..n {
            out[3 * n + i] = self.dt * (f[i] + a * self.direction[i]);
        }
        self.field.eval(&y[4 * n..5 * n], &mut f);
        for i in 0..n {
            out[4 * n + i] = (self.k as f64 * t - self.dt) * f[i];
        }
        self.field.eval(&y[5 * n..6 * n], &mut f);
        for i in 0..n {
            out[5 * n + i] = that * f[i];
        }
        self.field.eval(&y[6 * n..7 * n], &mut f);
        for i in 0..n {
            out[6 * n + i] = (1.0 - theta) * that * f[i];
        }
    }
    fn jac_y(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let nd = 7 * n;
        let (t, lam, nu, that, theta) = (q[P_T], q[P_LAM], q[P_NU], q[P_THAT], q[P_THETA]);
        out[..nd * nd].fill(0.0);
        let mut jac = vec![0.0; n * n];
        let block = |rows: usize, cols: usize, scale: f64, transpose: bool, jac: &[f64], out: &mut [f64]| {
            for i in 0..n {
                for j in 0..n {
                    let e = if transpose { jac[j * n + i] } else { jac[i * n + j] };
                    out[(rows + i) * nd + cols + j] += scale * e;
                }
            }
        };
        self.field.jacobian(&y[0..n], &mut jac);
        block(0, 0, t, false, &jac, out);
        block(n, n, -t, true, &jac, out);
        for i in 0..n {
            out[(n + i) * nd + n + i] += t * lam;
        }
        let mut second = vec![0.0; n * n];
        jacobian_adjoint_directional(&self.field, &y[0..n], &y[n..2 * n], &mut second);
        block(n, 0, -t, false, &second, out);
        self.field.jacobian(&y[2 * n..3 * n], &mut jac);
        block(2 * n, 2 * n, nu * t, false, &jac, out);
        self.field.jacobian(&y[3 * n..4 * n], &mut jac);
        block(3 * n, 3 * n, self.dt, false, &jac, out);
        self.field.jacobian(&y[4 * n..5 * n], &mut jac);
        block(4 * n, 4 * n, self.k as f64 * t - self.dt, false, &jac, out);
        self.field.jacobian(&y[5 * n..6 * n], &mut jac);
        block(5 * n, 5 * n, that, false, &jac, out);
        self.field.jacobian(&y[6 * n..7 * n], &mut jac);
        block(6 * n, 6 * n, (1.0 - theta) * that, false, &jac, out);
    }
    fn jac_q(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let nd = 7 * n;
        let (t, lam, nu, that, theta) = (q[P_T], q[P_LAM], q[P_NU], q[P_THAT], q[P_THETA]);
        out[..nd * 7].fill(0.0);
        let mut f = vec![0.0; n];
        let mut jac = vec![0.0; n * n];
        self.field.eval(&y[0..n], &mut f);
        for i in 0..n {
            out[i * 7 + P_T] = f[i];
        }
        self.field.jacobian(&y[0..n], &mut jac);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += jac[i * n + j] * y[n + i];
            }
            out[(n + j) * 7 + P_T] = -(acc - lam * y[n + j]);
            out[(n + j) * 7 + P_LAM] = t * y[n + j];
        }
        self.field.eval(&y[2 * n..3 * n], &mut f);
        for i in 0..n {
            out[(2 * n + i) * 7 + P_T] = nu * f[i];
            out[(2 * n + i) * 7 + P_NU] = t * f[i];
        }
        for i in 0..n {
            out[(3 * n + i) * 7 + P_A] = self.dt * self.a_scale * self.direction[i];
        }
        self.field.eval(&y[4 * n..5 * n], &mut f);
        for i in 0..n {
            out[(4 * n + i) * 7 + P_T] = self.k as f64 * f[i];
        }
        self.field.eval(&y[5 * n..6 * n], &mut f);
        for i in 0..n {
            out[(5 * n + i) * 7 + P_THAT] = f[i];
        }
        self.field.eval(&y[6 * n..7 * n], &mut f);
        for i in 0..n {
            out[(6 * n + i) * 7 + P_THAT] = (1.0 - theta) * f[i];
            out[(6 * n + i) * 7 + P_THETA] = -that * f[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Boundary conditions

/// The seventeen rows of the planar kick problem. `n0` is the fixed unit
/// normal of the phase section at γ₀ (the eigenvector there, rotated a
/// quarter turn), so landing on the section is one scalar condition.
struct KickBc {
    gamma0: [f64; 2],
    n0: [f64; 2],
    direction: [f64; 2],
    a_scale: f64,
}

impl BoundaryConditions for KickBc {
    fn nbc(&self) -> usize {
        17
    }
    fn eval(&self, y0: &[f64], y1: &[f64], q: &[f64], out: &mut [f64]) {
        let n = 2;
        let (g0, g1) = (&y0[0..n], &y1[0..n]);
        let (v0, v1) = (&y0[n..2 * n], &y1[n..2 * n]);
        let (w0, w1) = (&y0[2 * n..3 * n], &y1[2 * n..3 * n]);
        let (u0, u1) = (&y0[3 * n..4 * n], &y1[3 * n..4 * n]);
        let (gu0, gu1) = (&y0[4 * n..5 * n], &y1[4 * n..5 * n]);
        let (wu0, wu1) = (&y0[5 * n..6 * n], &y1[5 * n..6 * n]);
        let a = q[P_A] * self.a_scale;
        // cycle copies close, the eigenfunction closes and is normalized
        out[0] = g1[0] - g0[0];
        out[1] = g1[1] - g0[1];
        out[2] = v1[0] - v0[0];
        out[3] = v1[1] - v0[1];
        out[4] = v0[0] * v0[0] + v0[1] * v0[1] - 1.0;
        // w starts at the landing anchor and ends on the section at γ₀
        out[5] = w0[0] - g0[0];
        out[6] = w0[1] - g0[1];
        out[7] = (w1[0] - self.gamma0[0]) * self.n0[0] + (w1[1] - self.gamma0[1]) * self.n0[1];
        // u lands on the linearized isochron of g(0): offset η along v(0),
        // nothing across it
        let dx = [u1[0] - g0[0], u1[1] - g0[1]];
        out[8] = dx[0] * v0[0] + dx[1] * v0[1] - q[P_ETA];
        out[9] = -dx[0] * v0[1] + dx[1] * v0[0];
        // the kick-side cycle copy and its phase monitor
        out[10] = gu1[0] - gu0[0];
        out[11] = gu1[1] - gu0[1];
        out[12] = wu0[0] - gu0[0];
        out[13] = wu0[1] - gu0[1];
        out[14] = (wu1[0] - self.gamma0[0]) * self.n0[0] + (wu1[1] - self.gamma0[1]) * self.n0[1];
        // the kick itself
        out[15] = u0[0] - gu0[0] - a * self.direction[0];
        out[16] = u0[1] - gu0[1] - a * self.direction[1];
    }
    fn jac(&self, y0: &[f64], y1: &[f64], _q: &[f64], j0: &mut [f64], j1: &mut [f64], jq: &mut [f64]) {
        let n = 2;
        let nd = 6 * n;
        j0[..17 * nd].fill(0.0);
        j1[..17 * nd].fill(0.0);
        jq[..17 * 7].fill(0.0);
        let v0 = [y0[n], y0[n + 1]];
        let dx = [y1[3 * n] - y0[0], y1[3 * n + 1] - y0[1]];
        for i in 0..n {
            j1[i * nd + i] = 1.0;
            j0[i * nd + i] = -1.0;
            j1[(2 + i) * nd + n + i] = 1.0;
            j0[(2 + i) * nd + n + i] = -1.0;
            j0[4 * nd + n + i] = 2.0 * v0[i];
            j0[(5 + i) * nd + 2 * n + i] = 1.0;
            j0[(5 + i) * nd + i] = -1.0;
            j1[7 * nd + 2 * n + i] = self.n0[i];
            j0[(10 + i) * nd + 4 * n + i] = 1.0;
            j0[(10 + i) * nd + 4 * n + i] = -1.0; // overwritten below, kept for clarity
            j0[(12 + i) * nd + 5 * n + i] = 1.0;
            j0[(12 + i) * nd + 4 * n + i] = -1.0;
            j1[14 * nd + 5 * n + i] = self.n0[i];
            j0[(15 + i) * nd + 3 * n + i] = 1.0;
            j0[(15 + i) * nd + 4 * n + i] = -1.0;
        }
        // fix the cycle-copy periodicity rows written above
        for i in 0..n {
            j0[(10 + i) * nd + 4 * n + i] = -1.0;
            j1[(10 + i) * nd + 4 * n + i] = 1.0;
        }
        // landing rows
        for i in 0..n {
            j1[8 * nd + 3 * n + i] = v0[i];
            j0[8 * nd + i] = -v0[i];
            j0[8 * nd + n + i] = dx[i];
        }
        j1[9 * nd + 3 * n] = -v0[1];
        j1[9 * nd + 3 * n + 1] = v0[0];
        j0[9 * nd] = v0[1];
        j0[9 * nd + 1] = -v0[0];
        j0[9 * nd + n] = dx[1];
        j0[9 * nd + n + 1] = -dx[0];
        jq[8 * 7 + P_ETA] = -1.0;
        for i in 0..n {
            jq[(15 + i) * 7 + P_A] = -self.a_scale * self.direction[i];
        }
    }
}

/// Boundary rows of the pulse problem in n dimensions: 7 vector blocks and
/// 5 scalars. With `landing_norm` off, the Euclidean landing-distance row
/// degenerates gracefully into a pin η = 0 — the form the A = 0 identity
/// family needs, where the distance row has a vanishing gradient.
struct PulseBc {
    n: usize,
    gamma0: Vec<f64>,
    n0: Vec<f64>,
    landing_norm: bool,
}

impl PulseBc {
    fn rows(&self) -> [usize; 12] {
        let n = self.n;
        // starts of: pobc, v-per, v-norm, w-start, w-end, landing-dist,
        // landing-normal, gu-per, wu-start, wu-end, kick(on-start), junction
        [
            0,
            n,
            2 * n,
            2 * n + 1,
            3 * n + 1,
            3 * n + 2,
            3 * n + 3,
            3 * n + 4,
            4 * n + 4,
            5 * n + 4,
            5 * n + 5,
            6 * n + 5,
        ]
    }
}

impl BoundaryConditions for PulseBc {
    fn nbc(&self) -> usize {
        7 * self.n + 5
    }
    fn eval(&self, y0: &[f64], y1: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.n;
        let r = self.rows();
        let (g0, g1) = (&y0[0..n], &y1[0..n]);
        let (v0, v1) = (&y0[n..2 * n], &y1[n..2 * n]);
        let (w0, w1) = (&y0[2 * n..3 * n], &y1[2 * n..3 * n]);
        let (uon0, uon1) = (&y0[3 * n..4 * n], &y1[3 * n..4 * n]);
        let (uoff0, uoff1) = (&y0[4 * n..5 * n], &y1[4 * n..5 * n]);
        let (gu0, gu1) = (&y0[5 * n..6 * n], &y1[5 * n..6 * n]);
        let (wu0, wu1) = (&y0[6 * n..7 * n], &y1[6 * n..7 * n]);
        for i in 0..n {
            out[r[0] + i] = g1[i] - g0[i];
            out[r[1] + i] = v1[i] - v0[i];
            out[r[3] + i] = w0[i] - g0[i];
            out[r[7] + i] = gu1[i] - gu0[i];
            out[r[8] + i] = wu0[i] - gu0[i];
            out[r[10] + i] = uon0[i] - gu0[i];
            out[r[11] + i] = uon1[i] - uoff0[i];
        }
        out[r[2]] = v0.iter().map(|a| a * a).sum::<f64>() - 1.0;
        out[r[4]] = w1
            .iter()
            .zip(&self.gamma0)
            .zip(&self.n0)
            .map(|((w, c), m)| (w - c) * m)
            .sum();
        let dist2: f64 = uoff1
            .iter()
            .zip(g0)
            .map(|(u, g)| (u - g) * (u - g))
            .sum();
        out[r[5]] = if self.landing_norm {
            dist2 - q[P_ETA] * q[P_ETA]
        } else {
            q[P_ETA]
        };
        out[r[6]] = uoff1
            .iter()
            .zip(g0)
            .zip(v0)
            .map(|((u, g), v)| (u - g) * v)
            .sum();
        out[r[9]] = wu1
            .iter()
            .zip(&self.gamma0)
            .zip(&self.n0)
            .map(|((w, c), m)| (w - c) * m)
            .sum();
    }
    fn jac(&self, y0: &[f64], y1: &[f64], q: &[f64], j0: &mut [f64], j1: &mut [f64], jq: &mut [f64]) {
        let n = self.n;
        let nd = 7 * n;
        let nbc = self.nbc();
        let r = self.rows();
        j0[..nbc * nd].fill(0.0);
        j1[..nbc * nd].fill(0.0);
        jq[..nbc * 7].fill(0.0);
        let v0: Vec<f64> = y0[n..2 * n].to_vec();
        let du: Vec<f64> = (0..n).map(|i| y1[4 * n + i] - y0[i]).collect();
        for i in 0..n {
            j1[(r[0] + i) * nd + i] = 1.0;
            j0[(r[0] + i) * nd + i] = -1.0;
            j1[(r[1] + i) * nd + n + i] = 1.0;
            j0[(r[1] + i) * nd + n + i] = -1.0;
            j0[r[2] * nd + n + i] = 2.0 * v0[i];
            j0[(r[3] + i) * nd + 2 * n + i] = 1.0;
            j0[(r[3] + i) * nd + i] = -1.0;
            j1[r[4] * nd + 2 * n + i] = self.n0[i];
            j0[(r[7] + i) * nd + 5 * n + i] = -1.0;
            j1[(r[7] + i) * nd + 5 * n + i] = 1.0;
            j0[(r[8] + i) * nd + 6 * n + i] = 1.0;
            j0[(r[8] + i) * nd + 5 * n + i] = -1.0;
            j1[r[9] * nd + 6 * n + i] = self.n0[i];
            j0[(r[10] + i) * nd + 3 * n + i] = 1.0;
            j0[(r[10] + i) * nd + 5 * n + i] = -1.0;
            j1[(r[11] + i) * nd + 3 * n + i] = 1.0;
            j0[(r[11] + i) * nd + 4 * n + i] = -1.0;
        }
        if self.landing_norm {
            for i in 0..n {
                j1[r[5] * nd + 4 * n + i] = 2.0 * du[i];
                j0[r[5] * nd + i] = -2.0 * du[i];
            }
            jq[r[5] * 7 + P_ETA] = -2.0 * q[P_ETA];
        } else {
            jq[r[5] * 7 + P_ETA] = 1.0;
        }
        for i in 0..n {
            j1[r[6] * nd + 4 * n + i] = v0[i];
            j0[r[6] * nd + i] = -v0[i];
            j0[r[6] * nd + n + i] = du[i];
        }
    }
}

// ---------------------------------------------------------------------------
// The assembled problem

#[derive(Clone, Copy, PartialEq)]
enum Formulation {
    /// Instantaneous planar kick with the eigenfunction landing frame.
    Kick,
    /// Finite pulse with the adjoint landing frame (any dimension).
    Pulse { dt: f64 },
}

pub struct ResetProblem {
    model: ModelDef,
    formulation: Formulation,
    direction: Vec<f64>,
    /// Physical amplitude corresponding to parameter value A = 1.
    a_scale: f64,
    pub k: usize,
    pub sol: BvpSolution,
    /// The polished A = 0 stack from assembly, kept so a stalled sweep can
    /// re-enter the branch from a fresh identity at a nearby phase.
    pristine: BvpSolution,
    gamma0: Vec<f64>,
    n0: Vec<f64>,
    period_ref: f64,
    exponent_ref: f64,
    /// ϑ_new on the covering space is `unwrap_base − ν`.
    unwrap_base: f64,
    ntst_base: usize,
    /// Temporary densification demanded by a continuation stall; decays once
    /// the hard stretch is behind us.
    ntst_rescue: usize,
    ncol: usize,
    opts: ResetOptions,
    k_history: Vec<(f64, usize)>,
}

/// value(s) = seg((phase + span·s) mod 1) · scale, on the given mesh.
fn arc_profile(
    seg: &OrbitSegment,
    phase: f64,
    span: f64,
    scale: f64,
    mesh: &Mesh,
    ncol: usize,
) -> OrbitSegment {
    let dim = seg.dim;
    OrbitSegment::from_fn(mesh.clone(), ncol, dim, |s, out| {
        seg.eval_into((phase + span * s).rem_euclid(1.0), out);
        for o in out.iter_mut() {
            *o *= scale;
        }
    })
}

fn constant_profile(x: &[f64], mesh: &Mesh, ncol: usize) -> OrbitSegment {
    OrbitSegment::from_fn(mesh.clone(), ncol, x.len(), |_, out| {
        out.copy_from_slice(x);
    })
}

/// Trajectory values over [t0, t0 + span] placed on the unit mesh.
fn trajectory_profile(
    traj: &crate::oracle::Trajectory,
    t0: f64,
    span: f64,
    mesh: &Mesh,
    ncol: usize,
    dim: usize,
) -> OrbitSegment {
    OrbitSegment::from_fn(mesh.clone(), ncol, dim, |s, out| {
        traj.eval_into(t0 + span * s, out);
    })
}

impl ResetProblem {
    /// Build the problem at its exact A = 0 solution: every cycle copy is
    /// the computed orbit itself on the bundle's own mesh, so the stacked
    /// residual is at discretization level before any correction.
    pub fn assemble(
        model: &ModelDef,
        rec: &OrbitRecord,
        pert: &Perturbation,
        opts: &ResetOptions,
    ) -> Result<ResetProblem> {
        let n = model.dim();
        if pert.direction.len() != n {
            return Err(Error::InvalidInput(format!(
                "perturbation direction has {} components, model has {n}",
                pert.direction.len()
            )));
        }
        let a_scale = if pert.amplitude != 0.0 { pert.amplitude } else { 1.0 };
        match pert.kind {
            PerturbationKind::Instantaneous => {
                if n != 2 {
                    return Err(Error::InvalidInput(
                        "instantaneous kicks are planar-only; use a short pulse for n > 2".into(),
                    ));
                }
                let b = rec.require_bundle()?;
                let orbit = &b.orbit;
                let mesh = orbit.seg.mesh.clone();
                let gamma0 = orbit.seg.first().to_vec();
                let v0 = b.v0();
                let n0 = vec![-v0[1], v0[0]];
                let wu = constant_profile(&gamma0, &mesh, orbit.seg.ncol);
                let seg = OrbitSegment::stack(&[
                    &orbit.seg, &b.v, &orbit.seg, &orbit.seg, &orbit.seg, &wu,
                ]);
                let sol = BvpSolution {
                    seg,
                    params: vec![orbit.period, b.exponent, 1.0, 0.0, orbit.period, 1.0, 0.0],
                };
                let ntst_base = if opts.ntst == 0 {
                    orbit.seg.mesh.n_intervals()
                } else {
                    opts.ntst
                };
                Ok(ResetProblem {
                    model: model.clone(),
                    formulation: Formulation::Kick,
                    direction: pert.direction.clone(),
                    a_scale,
                    k: 1,
                    pristine: sol.clone(),
                    sol,
                    gamma0,
                    n0,
                    period_ref: orbit.period,
                    exponent_ref: b.exponent,
                    unwrap_base: 2.0,
                    ntst_base,
                    ntst_rescue: 0,
                    ncol: orbit.seg.ncol,
                    opts: opts.clone(),
                    k_history: vec![(0.0, 1)],
                })
            }
            PerturbationKind::Pulse { dt } => {
                let adj = rec.require_adjoint()?;
                let orbit = &adj.orbit;
                if dt <= 0.0 || dt >= orbit.period {
                    return Err(Error::InvalidInput(format!(
                        "pulse duration {dt} must lie strictly inside one period {}",
                        orbit.period
                    )));
                }
                let mesh = orbit.seg.mesh.clone();
                let ncol = orbit.seg.ncol;
                let gamma0 = orbit.seg.first().to_vec();
                let n0 = adj.w0().to_vec();
                let delta = dt / orbit.period;
                // the A = 0 reset trajectory is the cycle itself, split at
                // the pulse-off time
                let uon = arc_profile(&orbit.seg, 0.0, delta, 1.0, &mesh, ncol);
                let uoff = arc_profile(&orbit.seg, delta, 1.0 - delta, 1.0, &mesh, ncol);
                let wu = constant_profile(&gamma0, &mesh, ncol);
                let seg = OrbitSegment::stack(&[
                    &orbit.seg, &adj.w, &orbit.seg, &uon, &uoff, &orbit.seg, &wu,
                ]);
                let sol = BvpSolution {
                    seg,
                    params: vec![
                        orbit.period,
                        adj.trivial_exponent,
                        1.0,
                        0.0,
                        orbit.period,
                        1.0,
                        0.0,
                    ],
                };
                let mut prob = ResetProblem {
                    model: model.clone(),
                    formulation: Formulation::Pulse { dt },
                    direction: pert.direction.clone(),
                    a_scale,
                    k: 1,
                    pristine: sol.clone(),
                    sol,
                    gamma0,
                    n0,
                    period_ref: orbit.period,
                    exponent_ref: adj.trivial_exponent,
                    unwrap_base: 2.0,
                    ntst_base: if opts.ntst == 0 {
                        orbit.seg.mesh.n_intervals()
                    } else {
                        opts.ntst
                    },
                    ntst_rescue: 0,
                    ncol,
                    opts: opts.clone(),
                    k_history: vec![(0.0, 1)],
                };
                // the off-segment is a resampled wrap of the cycle, not an
                // aligned copy; settle it with the identity-form solve
                prob.polish_identity()?;
                prob.pristine = prob.sol.clone();
                Ok(prob)
            }
        }
    }

    fn rhs(&self) -> Arc<dyn OdeRhs> {
        match self.formulation {
            Formulation::Kick => Arc::new(KickRhs {
                field: self.model.clone(),
                k: self.k,
            }),
            Formulation::Pulse { dt } => Arc::new(PulseRhs {
                field: self.model.clone(),
                k: self.k,
                dt,
                direction: self.direction.clone(),
                a_scale: self.a_scale,
            }),
        }
    }

    fn bc(&self, landing_norm: bool) -> Arc<dyn BoundaryConditions> {
        match self.formulation {
            Formulation::Kick => Arc::new(KickBc {
                gamma0: [self.gamma0[0], self.gamma0[1]],
                n0: [self.n0[0], self.n0[1]],
                direction: [self.direction[0], self.direction[1]],
                a_scale: self.a_scale,
            }),
            Formulation::Pulse { .. } => Arc::new(PulseBc {
                n: self.model.dim(),
                gamma0: self.gamma0.clone(),
                n0: self.n0.clone(),
                landing_norm,
            }),
        }
    }

    /// The spec with the five passive parameters free plus `extra` (the
    /// sweep parameter), or square when `extra` is None.
    pub fn spec(&self, extra: Option<&str>) -> BvpSpec {
        let mut free: Vec<&str> = PASSIVE.to_vec();
        if let Some(e) = extra {
            free.push(e);
        }
        BvpSpec {
            rhs: self.rhs(),
            bc: self.bc(true),
            integral: None,
            params: ParamSet::new(&PARAM_NAMES).free_named(&free).unwrap(),
        }
    }

    /// Pulse-only square spec for the A = 0 family, where the Euclidean
    /// landing distance is replaced by pinning η; the kick form never
    /// degenerates and just uses its regular square spec.
    fn identity_spec(&self) -> BvpSpec {
        BvpSpec {
            rhs: self.rhs(),
            bc: self.bc(!matches!(self.formulation, Formulation::Pulse { .. })),
            integral: None,
            params: ParamSet::new(&PARAM_NAMES).free_named(&PASSIVE).unwrap(),
        }
    }

    pub fn residual(&self) -> f64 {
        residual_norm(&self.spec(None), &self.sol, &[])
    }

    fn polish(&mut self) -> Result<()> {
        let spec = self.spec(None);
        newton_solve(&spec, &mut self.sol, &[], &self.opts.newton)?;
        Ok(())
    }

    fn polish_identity(&mut self) -> Result<()> {
        let spec = self.identity_spec();
        newton_solve(&spec, &mut self.sol, &[], &self.opts.newton)?;
        Ok(())
    }

    /// Point `sol` at the A = 0 family member with kick phase `theta`,
    /// rebuilt from the pristine assembly stack. `nu_w` picks the covering
    /// sheet for ν (1 − θ right after assembly, one more whole turn once a
    /// sweep has wound past the section). Seeds only — callers polish.
    fn rotate_identity(&mut self, theta: f64, nu_w: f64) {
        let n = self.model.dim();
        let mesh = self.pristine.seg.mesh.clone();
        let ncol = self.ncol;
        let cycle = self.pristine.seg.extract(0, n);
        let v_part = self.pristine.seg.extract(n, 2 * n);
        let c = {
            let v = v_part.eval(theta);
            v.iter().map(|a| a * a).sum::<f64>().sqrt()
        };
        let mut parts: Vec<OrbitSegment> = vec![
            arc_profile(&cycle, theta, 1.0, 1.0, &mesh, ncol),
            arc_profile(&v_part, theta, 1.0, 1.0 / c, &mesh, ncol),
            arc_profile(&cycle, theta, nu_w, 1.0, &mesh, ncol),
        ];
        match self.formulation {
            Formulation::Kick => {
                parts.push(arc_profile(&cycle, theta, self.k as f64, 1.0, &mesh, ncol));
            }
            Formulation::Pulse { dt } => {
                let delta = dt / self.period_ref;
                parts.push(arc_profile(&cycle, theta, delta, 1.0, &mesh, ncol));
                parts.push(arc_profile(
                    &cycle,
                    theta + delta,
                    self.k as f64 - delta,
                    1.0,
                    &mesh,
                    ncol,
                ));
            }
        }
        parts.push(arc_profile(&cycle, theta, 1.0, 1.0, &mesh, ncol));
        parts.push(arc_profile(&cycle, theta, 1.0 - theta, 1.0, &mesh, ncol));
        let refs: Vec<&OrbitSegment> = parts.iter().collect();
        self.sol = BvpSolution {
            seg: OrbitSegment::stack(&refs),
            params: vec![
                self.period_ref,
                self.exponent_ref,
                nu_w,
                0.0,
                self.period_ref,
                theta,
                0.0,
            ],
        };
    }

    fn ntst_target(&self) -> usize {
        (self.ntst_base + self.opts.ntst_per_lap * (self.k - 1))
            .max(self.ntst_rescue)
            .min(self.opts.ntst_cap)
    }

    fn remesh(&mut self, identity_form: bool) -> Result<()> {
        let saved = self.sol.clone();
        let mesh = self.sol.seg.adapted_mesh(self.ntst_target());
        self.sol.seg = self.sol.seg.remesh_to(mesh, self.ncol);
        let polished = if identity_form {
            self.polish_identity()
        } else {
            self.polish()
        };
        if polished.is_err() {
            // rebalancing is opportunistic: if the interpolant refuses to
            // re-converge, the still-converged old mesh beats a dead run
            self.sol = saved;
        }
        Ok(())
    }

    /// ‖w(1) − γ₀‖ and its g_u-side twin: how precisely the monitors hit
    /// the section point. Should sit at solver-tolerance level.
    pub fn monitor_error(&self) -> f64 {
        let n = self.model.dim();
        let end = self.sol.seg.eval(1.0);
        let w_off = 2 * n;
        let wu_off = match self.formulation {
            Formulation::Kick => 5 * n,
            Formulation::Pulse { .. } => 6 * n,
        };
        let dist = |off: usize| -> f64 {
            (0..n)
                .map(|i| (end[off + i] - self.gamma0[i]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        dist(w_off).max(dist(wu_off))
    }

    fn u_span(&self) -> (usize, usize) {
        let n = self.model.dim();
        match self.formulation {
            Formulation::Kick => (3 * n, 4 * n),
            Formulation::Pulse { .. } => (4 * n, 5 * n),
        }
    }

    /// Give the reset trajectory one more period to settle: append a lap of
    /// the flow from its endpoint, rebalance the mesh, re-converge. Repeats
    /// until the landing offset has dropped well under the cap.
    pub fn increment_k(&mut self, at_x: f64) -> Result<()> {
        let n = self.model.dim();
        let target = 0.1 * self.opts.eta_max;
        while self.sol.params[P_ETA].abs() > target {
            if self.k + 1 > self.opts.k_max {
                return Err(Error::NoConvergence(format!(
                    "landing offset {:.3e} still above {:.1e} at the lap limit k = {}",
                    self.sol.params[P_ETA].abs(),
                    target,
                    self.k
                )));
            }
            let (lo, hi) = self.u_span();
            let u = self.sol.seg.extract(lo, hi);
            let u_end = &self.sol.seg.eval(1.0)[lo..hi];
            let t = self.sol.params[P_T];
            let traj = integrate(
                self.model.field(),
                u_end,
                0.0,
                t,
                &IntegratorOptions::with_tol(1e-11),
            )?;
            // weights: time already spanned by u versus one more period
            let dt_pulse = match self.formulation {
                Formulation::Pulse { dt } => dt,
                Formulation::Kick => 0.0,
            };
            let spanned = self.k as f64 * t - dt_pulse;
            let per_lap = (self.ntst_target() / (self.k + 1)).max(16);
            let tail = trajectory_profile(&traj, 0.0, t, &Mesh::uniform(per_lap), self.ncol, n);
            let u_ext = crate::mesh::concat_weighted(&u, &tail, spanned, t);
            self.k += 1;
            // move every part onto the extended trajectory's mesh, then let
            // the stacked error monitor pick the final one
            let mesh = u_ext.mesh.clone();
            let mut parts: Vec<OrbitSegment> = Vec::new();
            let n_parts = self.sol.seg.dim / n;
            for p in 0..n_parts {
                if p * n == lo {
                    parts.push(u_ext.clone());
                } else {
                    parts.push(
                        self.sol
                            .seg
                            .extract(p * n, (p + 1) * n)
                            .remesh_to(mesh.clone(), self.ncol),
                    );
                }
            }
            let refs: Vec<&OrbitSegment> = parts.iter().collect();
            self.sol.seg = OrbitSegment::stack(&refs);
            self.polish()?;
            self.remesh(false)?;
            self.k_history.push((at_x, self.k));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter runs

struct RawSample {
    params: Vec<f64>,
    k: usize,
}

enum RunEnd {
    Target,
    Partial { reason: String },
}

struct RunOutput {
    samples: Vec<RawSample>,
    hits: Vec<(String, BvpSolution)>,
    end: RunEnd,
}

/// Drive one free parameter toward `target`, restarting the continuation
/// whenever the mesh wants rebalancing or the reset trajectory needs
/// another lap. Events at `record_at` are resolved exactly and collected.
fn run_param_branch(
    prob: &mut ResetProblem,
    primary: &str,
    dir: f64,
    target: f64,
    record_at: &[(String, f64)],
    copts: &ContinuationOptions,
) -> Result<RunOutput> {
    let pi = PARAM_NAMES.iter().position(|&p| p == primary).unwrap();
    let mut samples = vec![RawSample {
        params: prob.sol.params.clone(),
        k: prob.k,
    }];
    let mut hits: Vec<(String, BvpSolution)> = Vec::new();
    let mut total_steps = 0usize;
    let adapt_every = prob.opts.adapt_every;
    let eta_cap = prob.opts.eta_max;
    // stall recovery state: step size for the next round (reset after any
    // clean round) and how many times in a row we stalled at the same spot
    let mut round_ds0 = copts.ds0;
    let mut stalls = 0usize;
    let mut stall_x = f64::NAN;
    loop {
        let spec = prob.spec(Some(primary));
        let count = Cell::new(0usize);
        let mut events = vec![Event {
            name: "target".into(),
            param: primary.into(),
            target,
            action: EventAction::Stop,
        }];
        for (name, at) in record_at {
            events.push(Event {
                name: name.clone(),
                param: primary.into(),
                target: *at,
                action: EventAction::Record,
            });
        }
        let hooks = Hooks {
            trackers: vec![],
            validate: Some(Box::new(|s: &BvpSolution| {
                s.params.iter().all(|p| p.is_finite()) && s.params[P_NU] >= 0.0
            })),
            stop_when: Some(Box::new(|s: &BvpSolution, _| {
                count.set(count.get() + 1);
                s.params[P_ETA].abs() > eta_cap || count.get() >= adapt_every
            })),
            events,
        };
        let mut ropts = copts.clone();
        ropts.ds0 = round_ds0;
        let branch = continue_branch(&spec, &prob.sol, primary, dir, &ropts, &hooks)?;
        for p in branch.points.iter().skip(1) {
            samples.push(RawSample {
                params: p.params.clone(),
                k: prob.k,
            });
        }
        total_steps += branch.points.len().saturating_sub(1);
        let mut target_sol: Option<BvpSolution> = None;
        for hit in branch.events {
            if hit.name == "target" {
                target_sol = Some(hit.solution);
            } else {
                hits.push((hit.name, hit.solution));
            }
        }
        match branch.stop {
            StopReason::Event(name) if name == "target" => {
                let sol = target_sol.expect("stop event recorded its solution");
                // the step that detected the crossing overshoots the target;
                // the resolved solution supersedes anything beyond it
                samples.retain(|s| (s.params[pi] - target) * dir < 1e-12);
                samples.push(RawSample {
                    params: sol.params.clone(),
                    k: prob.k,
                });
                prob.sol = sol;
                return Ok(RunOutput {
                    samples,
                    hits,
                    end: RunEnd::Target,
                });
            }
            StopReason::Event(name) => {
                return Err(Error::InvalidInput(format!("unexpected stop event {name}")))
            }
            StopReason::Predicate => {
                prob.sol = branch.last.clone();
                round_ds0 = copts.ds0;
                stalls = 0;
                if total_steps >= prob.opts.max_total_steps {
                    return Ok(RunOutput {
                        samples,
                        hits,
                        end: RunEnd::Partial {
                            reason: format!("step budget {} exhausted", prob.opts.max_total_steps),
                        },
                    });
                }
                let x = prob.sol.params[pi];
                if prob.sol.params[P_ETA].abs() > eta_cap {
                    match prob.increment_k(x) {
                        Ok(()) => {}
                        Err(e) => {
                            return Ok(RunOutput {
                                samples,
                                hits,
                                end: RunEnd::Partial {
                                    reason: format!("lap extension failed: {e}"),
                                },
                            })
                        }
                    }
                } else {
                    // a past stall boost is no longer needed at full strength
                    prob.ntst_rescue = prob.ntst_rescue * 3 / 4;
                    if let Err(e) = prob.remesh(false) {
                        return Ok(RunOutput {
                            samples,
                            hits,
                            end: RunEnd::Partial {
                                reason: format!("mesh adaptation failed: {e}"),
                            },
                        });
                    }
                }
            }
            StopReason::StepUnderflow => {
                // the corrector keeps failing even at the smallest step; the
                // usual culprit is a mesh that no longer resolves the reset
                // trajectory, so densify and try again from the last good
                // point before giving up
                prob.sol = branch.last.clone();
                let x = prob.sol.params[pi];
                let same_spot = (x - stall_x).abs() < 1e-9;
                stalls = if same_spot { stalls + 1 } else { 1 };
                stall_x = x;
                let at_cap = prob.ntst_target() >= prob.opts.ntst_cap;
                if stalls > 4 || (at_cap && stalls > 2) {
                    return Ok(RunOutput {
                        samples,
                        hits,
                        end: RunEnd::Partial {
                            reason: format!(
                                "continuation stalled at {primary} = {x:.4} \
                                 ({} intervals)",
                                prob.ntst_target()
                            ),
                        },
                    });
                }
                prob.ntst_rescue = (prob.ntst_target() * 3 / 2).min(prob.opts.ntst_cap);
                let _ = prob.remesh(false);
                round_ds0 = (round_ds0 * 0.2).max(copts.ds_min * 1e3);
            }
            StopReason::MaxSteps => {
                prob.sol = branch.last.clone();
                return Ok(RunOutput {
                    samples,
                    hits,
                    end: RunEnd::Partial {
                        reason: "continuation step budget".into(),
                    },
                });
            }
        }
    }
}

fn build_curve(
    prob: &ResetProblem,
    raw: Vec<RawSample>,
    sweep: SweepParam,
    amplitude: f64,
    failure: Option<(f64, String)>,
) -> PhaseCurve {
    let mut samples: Vec<PtcSample> = raw
        .iter()
        .map(|r| {
            let x = match sweep {
                SweepParam::Theta => r.params[P_THETA],
                SweepParam::Amplitude { .. } => r.params[P_A] * prob.a_scale,
            };
            PtcSample {
                x,
                theta_old: r.params[P_THETA],
                theta_new: prob.unwrap_base - r.params[P_NU],
                eta: r.params[P_ETA],
                k: r.k,
                steep: false,
                arclength: 0.0,
            }
        })
        .collect();
    samples.sort_by(|a, b| a.x.total_cmp(&b.x));
    let mut drift = PassivityDrift::default();
    for r in &raw {
        drift.period_rel = drift
            .period_rel
            .max((r.params[P_T] - prob.period_ref).abs() / prob.period_ref);
        drift.t_hat_rel = drift
            .t_hat_rel
            .max((r.params[P_THAT] - r.params[P_T]).abs() / prob.period_ref);
        drift.exponent_abs = drift
            .exponent_abs
            .max((r.params[P_LAM] - prob.exponent_ref).abs());
    }
    // slopes flag steep samples; arclength accumulates in the (x, ϑ_new) plane
    let slope_cap = prob.opts.steep_slope;
    let m = samples.len();
    for j in 0..m.saturating_sub(1) {
        let dx = samples[j + 1].x - samples[j].x;
        let dy = samples[j + 1].theta_new - samples[j].theta_new;
        let steep = if dx.abs() < 1e-14 {
            dy.abs() > 1e-12
        } else {
            (dy / dx).abs() > slope_cap
        };
        if steep {
            samples[j].steep = true;
            samples[j + 1].steep = true;
        }
    }
    let mut acc = 0.0;
    for j in 1..m {
        let dx = samples[j].x - samples[j - 1].x;
        let dy = samples[j].theta_new - samples[j - 1].theta_new;
        acc += (dx * dx + dy * dy).sqrt();
        samples[j].arclength = acc;
    }
    PhaseCurve {
        samples,
        sweep,
        amplitude,
        direction: prob.direction.clone(),
        kind: match prob.formulation {
            Formulation::Kick => PerturbationKind::Instantaneous,
            Formulation::Pulse { dt } => PerturbationKind::Pulse { dt },
        },
        classification: None,
        k_history: prob.k_history.clone(),
        passivity: drift,
        failure,
    }
}

impl ResetProblem {
    /// Grow the amplitude from its current value to `a_target` (physical
    /// units) at frozen kick phase, recording exact readings at `record_at`.
    /// Pulse problems bootstrap off the identity family first, since the
    /// Euclidean landing row has no gradient at zero offset.
    pub fn homotopy_in_amplitude(
        &mut self,
        a_target: f64,
        record_at: &[f64],
    ) -> Result<AmplitudeRun> {
        let theta_fixed = self.sol.params[P_THETA];
        let a_now = self.sol.params[P_A] * self.a_scale;
        if (a_target - a_now).abs() < 1e-12 {
            let raw = vec![RawSample {
                params: self.sol.params.clone(),
                k: self.k,
            }];
            let curve = build_curve(
                self,
                raw,
                SweepParam::Amplitude { theta_fixed },
                a_target,
                None,
            );
            return Ok(AmplitudeRun {
                curve,
                hits: vec![],
            });
        }
        if matches!(self.formulation, Formulation::Pulse { .. }) && a_now == 0.0 {
            self.bootstrap_pulse(a_target)?;
        }
        let names: Vec<(String, f64)> = record_at
            .iter()
            .enumerate()
            .map(|(i, &a)| (format!("rec{i}"), a / self.a_scale))
            .collect();
        let copts = self.opts.amplitude.clone();
        let dir = if a_target > a_now { 1.0 } else { -1.0 };
        let mut out = run_param_branch(self, "A", dir, a_target / self.a_scale, &names, &copts)?;
        if matches!(out.end, RunEnd::Target) {
            // the event resolution can overshoot the landing cap slightly;
            // settle the final reading before anyone consumes it
            self.increment_k(a_target)?;
            if let Some(last) = out.samples.last_mut() {
                last.params = self.sol.params.clone();
                last.k = self.k;
            }
        }
        let hits = out
            .hits
            .iter()
            .map(|(_, sol)| {
                (
                    sol.params[P_A] * self.a_scale,
                    self.unwrap_base - sol.params[P_NU],
                )
            })
            .collect();
        let failure = match &out.end {
            RunEnd::Target => None,
            RunEnd::Partial { reason } => Some((self.sol.params[P_A] * self.a_scale, reason.clone())),
        };
        if let Some((at, reason)) = &failure {
            return Err(Error::EventNotReached(format!(
                "amplitude {a_target} (reached {at:.6}: {reason})"
            )));
        }
        let curve = build_curve(
            self,
            out.samples,
            SweepParam::Amplitude { theta_fixed },
            a_target,
            failure,
        );
        Ok(AmplitudeRun { curve, hits })
    }

    /// Sweep the kick phase from its current value down to 0 at fixed
    /// amplitude. A partial curve (with the failure position) is still a
    /// result: it tells where the perturbed cycle left the basin.
    pub fn sweep_theta(&mut self) -> Result<PhaseCurve> {
        let amplitude = self.sol.params[P_A] * self.a_scale;
        let copts = self.opts.sweep.clone();
        let mut out = run_param_branch(self, "theta", -1.0, 0.0, &[], &copts)?;
        if matches!(out.end, RunEnd::Target) {
            self.increment_k(0.0)?;
            if let Some(last) = out.samples.last_mut() {
                last.params = self.sol.params.clone();
                last.k = self.k;
            }
        }
        let failure = match out.end {
            RunEnd::Target => None,
            RunEnd::Partial { reason } => Some((self.sol.params[P_THETA], reason)),
        };
        let mut curve = build_curve(self, out.samples, SweepParam::Theta, amplitude, failure);
        curve.classification = Some(curve.classify_with(self.opts.prominence));
        Ok(curve)
    }

    /// Square-solve the family at a small nonzero amplitude, seeding every
    /// segment from direct integration so the landing rows are regular.
    fn bootstrap_pulse(&mut self, a_target: f64) -> Result<()> {
        let dt = match self.formulation {
            Formulation::Pulse { dt } => dt,
            Formulation::Kick => unreachable!(),
        };
        let n = self.model.dim();
        let t = self.period_ref;
        let mesh = self.sol.seg.mesh.clone();
        let field = self.model.field();
        let cycle = ReferenceCycle::from_anchor(
            field,
            &self.gamma0,
            t,
            &IntegratorOptions::with_tol(1e-11),
        )?;
        // the current identity solution provides the cycle-shaped parts
        let g_id = self.sol.seg.extract(0, n);
        let v_id = self.sol.seg.extract(n, 2 * n);
        let gu_id = self.sol.seg.extract(5 * n, 6 * n);
        let wu_id = self.sol.seg.extract(6 * n, 7 * n);
        let mut a1 = a_target * self.opts.bootstrap_fraction;
        let mut last_err: Option<Error> = None;
        for _ in 0..3 {
            let drive: Vec<f64> = self.direction.iter().map(|d| d * a1).collect();
            let pulsed = PulsedField {
                base: field,
                drive,
            };
            let opts_i = IntegratorOptions::with_tol(1e-11);
            let on = integrate(&pulsed, &self.gamma0, 0.0, dt, &opts_i)?;
            let x_off = on.end_state().to_vec();
            let off = integrate(field, &x_off, 0.0, self.k as f64 * t - dt, &opts_i)?;
            let landing = off.end_state().to_vec();
            let (phase_l, dist_l) = cycle.nearest_phase(&landing);
            // unwrap the landing phase around 1 so ν stays near its
            // identity value
            let shift = (phase_l + 0.5).rem_euclid(1.0) - 0.5;
            let nu = 1.0 - shift;
            let anchor = (1.0 - nu).rem_euclid(1.0);
            let vnorm = {
                let v = v_id.eval(anchor);
                v.iter().map(|a| a * a).sum::<f64>().sqrt()
            };
            let parts = [
                arc_profile(&g_id, anchor, 1.0, 1.0, &mesh, self.ncol),
                arc_profile(&v_id, anchor, 1.0, 1.0 / vnorm, &mesh, self.ncol),
                arc_profile(&g_id, anchor, nu, 1.0, &mesh, self.ncol),
                trajectory_profile(&on, 0.0, dt, &mesh, self.ncol, n),
                trajectory_profile(&off, 0.0, self.k as f64 * t - dt, &mesh, self.ncol, n),
                gu_id.clone(),
                wu_id.clone(),
            ];
            let refs: Vec<&OrbitSegment> = parts.iter().collect();
            let mut cand = BvpSolution {
                seg: OrbitSegment::stack(&refs),
                params: vec![
                    t,
                    self.exponent_ref,
                    nu,
                    dist_l,
                    t,
                    1.0,
                    a1 / self.a_scale,
                ],
            };
            let spec = self.spec(None);
            match newton_solve(&spec, &mut cand, &[], &self.opts.newton) {
                Ok(_) => {
                    self.sol = cand;
                    return Ok(());
                }
                Err(e) => {
                    last_err = Some(e);
                    a1 *= 10.0;
                    if a1 > a_target {
                        break;
                    }
                }
            }
        }
        Err(Error::NoConvergence(format!(
            "pulse bootstrap failed at amplitude {a1:.3e}: {}",
            last_err.map_or("no attempt".into(), |e| e.to_string())
        )))
    }
}

// ---------------------------------------------------------------------------
// High-level drivers

/// The full protocol: assemble at the identity, grow the amplitude at
/// frozen ϑ = 1, then sweep ϑ across the unit interval. Zero amplitude
/// short-circuits to the measured identity family.
pub fn compute_ptc(
    model: &ModelDef,
    rec: &OrbitRecord,
    pert: &Perturbation,
    opts: &ResetOptions,
) -> Result<PhaseCurve> {
    if pert.amplitude == 0.0 {
        return identity_ptc(model, rec, pert.kind.clone(), 41, opts);
    }
    let mut prob = ResetProblem::assemble(model, rec, pert, opts)?;
    prob.homotopy_in_amplitude(pert.amplitude, &[])?;
    prob.sweep_theta()
}

/// The A = 0 family measured honestly: rotate the cycle to each grid
/// phase, square-solve, and read the landing phase back from ν. Any
/// machinery bias would show up as a nonzero phase shift.
pub fn identity_ptc(
    model: &ModelDef,
    rec: &OrbitRecord,
    kind: PerturbationKind,
    n_samples: usize,
    opts: &ResetOptions,
) -> Result<PhaseCurve> {
    let n = model.dim();
    let zero_dir = vec![0.0; n.max(1)];
    let mut dir = zero_dir.clone();
    dir[0] = 1.0;
    let pert = Perturbation {
        direction: dir,
        amplitude: 0.0,
        kind,
    };
    let mut prob = ResetProblem::assemble(model, rec, &pert, opts)?;
    let base_sol = prob.sol.clone();
    let mesh = base_sol.seg.mesh.clone();
    let ncol = prob.ncol;
    let mut raw: Vec<RawSample> = Vec::new();
    let n_parts = base_sol.seg.dim / n;
    for j in 0..n_samples {
        let theta = j as f64 / (n_samples - 1) as f64;
        let nu0 = 1.0 - theta;
        let mut parts: Vec<OrbitSegment> = Vec::new();
        for p in 0..n_parts {
            let part = base_sol.seg.extract(p * n, (p + 1) * n);
            // which arc this part traces at kick phase ϑ: cycle copies
            // rotate, monitors shrink to the remaining arc, v rescales
            let is_v = p == 1;
            let is_w = p == 2;
            let is_wu = p == n_parts - 1;
            let prof = if is_v {
                let c = {
                    let v = part.eval(theta);
                    v.iter().map(|a| a * a).sum::<f64>().sqrt()
                };
                arc_profile(&part, theta, 1.0, 1.0 / c, &mesh, ncol)
            } else if is_w || is_wu {
                arc_profile(&base_sol.seg.extract(0, n), theta, nu0, 1.0, &mesh, ncol)
            } else {
                arc_profile(&part, theta, 1.0, 1.0, &mesh, ncol)
            };
            parts.push(prof);
        }
        let refs: Vec<&OrbitSegment> = parts.iter().collect();
        prob.sol = BvpSolution {
            seg: OrbitSegment::stack(&refs),
            params: vec![
                prob.period_ref,
                prob.exponent_ref,
                nu0,
                0.0,
                prob.period_ref,
                theta,
                0.0,
            ],
        };
        prob.polish_identity()?;
        raw.push(RawSample {
            params: prob.sol.params.clone(),
            k: 1,
        });
    }
    prob.unwrap_base = 1.0;
    let mut curve = build_curve(&prob, raw, SweepParam::Theta, 0.0, None);
    curve.classification = Some(curve.classify_with(opts.prominence));
    Ok(curve)
}

/// Phase response at a fixed kick phase as the amplitude grows: rotate the
/// assembled identity to `theta_fixed`, then run the amplitude homotopy and
/// keep the whole branch as the curve.
pub fn amplitude_sweep(
    model: &ModelDef,
    rec: &OrbitRecord,
    pert: &Perturbation,
    theta_fixed: f64,
    record_at: &[f64],
    opts: &ResetOptions,
) -> Result<AmplitudeRun> {
    let theta_fixed = theta_fixed.rem_euclid(1.0);
    let mut prob = ResetProblem::assemble(model, rec, pert, opts)?;
    if theta_fixed != 0.0 {
        // rotate every segment so the kick lands at γ_{theta_fixed}
        let n = model.dim();
        let base = prob.sol.seg.clone();
        let mesh = base.mesh.clone();
        let nu0 = 1.0 - theta_fixed;
        let n_parts = base.dim / n;
        let mut parts: Vec<OrbitSegment> = Vec::new();
        for p in 0..n_parts {
            let part = base.extract(p * n, (p + 1) * n);
            let is_v = p == 1;
            let is_w = p == 2;
            let is_wu = p == n_parts - 1;
            let prof = if is_v {
                let c = {
                    let v = part.eval(theta_fixed);
                    v.iter().map(|a| a * a).sum::<f64>().sqrt()
                };
                arc_profile(&part, theta_fixed, 1.0, 1.0 / c, &mesh, prob.ncol)
            } else if is_w || is_wu {
                arc_profile(&base.extract(0, n), theta_fixed, nu0, 1.0, &mesh, prob.ncol)
            } else {
                arc_profile(&part, theta_fixed, 1.0, 1.0, &mesh, prob.ncol)
            };
            parts.push(prof);
        }
        let refs: Vec<&OrbitSegment> = parts.iter().collect();
        prob.sol.seg = OrbitSegment::stack(&refs);
        prob.sol.params[P_NU] = nu0;
        prob.sol.params[P_THETA] = theta_fixed;
        prob.polish_identity()?;
        prob.unwrap_base = 1.0;
    }
    let mut run = prob.homotopy_in_amplitude(pert.amplitude, record_at)?;
    run.curve.classification = Some(run.curve.classify_with(opts.prominence));
    Ok(run)
}

/// Where a kick family stops being invertible: bisect the amplitude on the
/// monotonicity verdict over full PTC computations, then place the budding
/// extremum pair. The bracket must straddle the transition.
#[derive(Debug, Clone)]
pub struct InvertibilityLoss {
    pub a_inv: f64,
    /// (ϑ_old, ϑ_new mod 1) of the flattening point at the transition.
    pub inflection: (f64, f64),
    pub bracket: (f64, f64),
}

pub fn find_invertibility_loss(
    model: &ModelDef,
    rec: &OrbitRecord,
    pert_template: &Perturbation,
    bracket: (f64, f64),
    opts: &ResetOptions,
) -> Result<InvertibilityLoss> {
    let curve_at = |a: f64| -> Result<PhaseCurve> {
        let pert = Perturbation {
            direction: pert_template.direction.clone(),
            amplitude: a,
            kind: pert_template.kind.clone(),
        };
        compute_ptc(model, rec, &pert, opts)
    };
    let is_invertible = |c: &PhaseCurve| c.classification.as_ref().map_or(true, |k| k.invertible);
    let (mut lo, mut hi) = bracket;
    let c_lo = curve_at(lo)?;
    let mut c_hi = curve_at(hi)?;
    if is_invertible(&c_lo) == is_invertible(&c_hi) {
        return Err(Error::NoSignChange);
    }
    if !is_invertible(&c_lo) {
        return Err(Error::InvalidInput(
            "bracket must run from an invertible to a non-invertible amplitude".into(),
        ));
    }
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        let c_mid = curve_at(mid)?;
        if is_invertible(&c_mid) {
            lo = mid;
        } else {
            hi = mid;
            c_hi = c_mid;
        }
    }
    // the first extremum pair of the barely non-invertible curve brackets
    // the cubic flattening point
    let cls = c_hi
        .classification
        .clone()
        .unwrap_or_else(|| c_hi.classify());
    let inflection = match cls.extrema.as_slice() {
        [a, b, ..] => (0.5 * (a.x + b.x), (0.5 * (a.value + b.value)).rem_euclid(1.0)),
        _ => {
            return Err(Error::NoConvergence(
                "non-invertible endpoint shows no extremum pair".into(),
            ))
        }
    };
    Ok(InvertibilityLoss {
        a_inv: 0.5 * (lo + hi),
        inflection,
        bracket: (lo, hi),
    })
}

// ---------------------------------------------------------------------------
// Reduced formulation (bookkeeping)

/// The four-segment variant that reads the kick point off the reference
/// orbit by interpolation instead of carrying a live copy: with all six of
/// its parameters free it is a two-parameter family, which is exactly why
/// the full problem carries g_u and w_u.
struct ReducedRhs {
    field: ModelDef,
}

impl OdeRhs for ReducedRhs {
    fn dim(&self) -> usize {
        4 * self.field.dim()
    }
    fn npar(&self) -> usize {
        6
    }
    fn eval(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let (t, lam, nu) = (q[0], q[1], q[2]);
        let mut f = vec![0.0; n];
        let mut jac = vec![0.0; n * n];
        self.field.eval(&y[0..n], &mut f);
        for i in 0..n {
            out[i] = t * f[i];
        }
        self.field.jacobian(&y[0..n], &mut jac);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += jac[i * n + j] * y[n + j];
            }
            out[n + i] = t * (acc - lam * y[n + i]);
        }
        self.field.eval(&y[2 * n..3 * n], &mut f);
        for i in 0..n {
            out[2 * n + i] = nu * t * f[i];
        }
        self.field.eval(&y[3 * n..4 * n], &mut f);
        for i in 0..n {
            out[3 * n + i] = t * f[i];
        }
    }
    fn jac_y(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let nd = 4 * n;
        let (t, lam, nu) = (q[0], q[1], q[2]);
        out[..nd * nd].fill(0.0);
        let mut jac = vec![0.0; n * n];
        self.field.jacobian(&y[0..n], &mut jac);
        for i in 0..n {
            for j in 0..n {
                out[i * nd + j] = t * jac[i * n + j];
                out[(n + i) * nd + n + j] = t * jac[i * n + j];
            }
            out[(n + i) * nd + n + i] -= t * lam;
        }
        let mut second = vec![0.0; n * n];
        jacobian_directional(&self.field, &y[0..n], &y[n..2 * n], &mut second);
        for i in 0..n {
            for j in 0..n {
                out[(n + i) * nd + j] = t * second[i * n + j];
            }
        }
        self.field.jacobian(&y[2 * n..3 * n], &mut jac);
        for i in 0..n {
            for j in 0..n {
                out[(2 * n + i) * nd + 2 * n + j] = nu * t * jac[i * n + j];
            }
        }
        self.field.jacobian(&y[3 * n..4 * n], &mut jac);
        for i in 0..n {
            for j in 0..n {
                out[(3 * n + i) * nd + 3 * n + j] = t * jac[i * n + j];
            }
        }
    }
    fn jac_q(&self, y: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.field.dim();
        let nd = 4 * n;
        let (t, lam, nu) = (q[0], q[1], q[2]);
        out[..nd * 6].fill(0.0);
        let mut f = vec![0.0; n];
        let mut jac = vec![0.0; n * n];
        self.field.eval(&y[0..n], &mut f);
        for i in 0..n {
            out[i * 6] = f[i];
        }
        self.field.jacobian(&y[0..n], &mut jac);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += jac[i * n + j] * y[n + j];
            }
            out[(n + i) * 6] = acc - lam * y[n + i];
            out[(n + i) * 6 + 1] = -t * y[n + i];
        }
        self.field.eval(&y[2 * n..3 * n], &mut f);
        for i in 0..n {
            out[(2 * n + i) * 6] = nu * f[i];
            out[(2 * n + i) * 6 + 2] = t * f[i];
        }
        self.field.eval(&y[3 * n..4 * n], &mut f);
        for i in 0..n {
            out[(3 * n + i) * 6] = f[i];
        }
    }
}

struct ReducedBc {
    gamma0: [f64; 2],
    n0: [f64; 2],
    direction: [f64; 2],
    /// Frozen copy of the cycle to interpolate the kick point from.
    reference: OrbitSegment,
}

impl BoundaryConditions for ReducedBc {
    fn nbc(&self) -> usize {
        12
    }
    fn eval(&self, y0: &[f64], y1: &[f64], q: &[f64], out: &mut [f64]) {
        let n = 2;
        let (theta, a) = (q[4], q[5]);
        let gref = self.reference.eval(theta.rem_euclid(1.0));
        out[0] = y1[0] - y0[0];
        out[1] = y1[1] - y0[1];
        out[2] = y1[n] - y0[n];
        out[3] = y1[n + 1] - y0[n + 1];
        out[4] = y0[n] * y0[n] + y0[n + 1] * y0[n + 1] - 1.0;
        out[5] = y0[2 * n] - y0[0];
        out[6] = y0[2 * n + 1] - y0[1];
        out[7] = (y1[2 * n] - self.gamma0[0]) * self.n0[0]
            + (y1[2 * n + 1] - self.gamma0[1]) * self.n0[1];
        let dx = [y1[3 * n] - y0[0], y1[3 * n + 1] - y0[1]];
        out[8] = dx[0] * y0[n] + dx[1] * y0[n + 1] - q[3];
        out[9] = -dx[0] * y0[n + 1] + dx[1] * y0[n];
        out[10] = y0[3 * n] - gref[0] - a * self.direction[0];
        out[11] = y0[3 * n + 1] - gref[1] - a * self.direction[1];
    }
    fn jac(&self, y0: &[f64], y1: &[f64], q: &[f64], j0: &mut [f64], j1: &mut [f64], jq: &mut [f64]) {
        let n = 2;
        let nd = 4 * n;
        j0[..12 * nd].fill(0.0);
        j1[..12 * nd].fill(0.0);
        jq[..12 * 6].fill(0.0);
        let v0 = [y0[n], y0[n + 1]];
        let dx = [y1[3 * n] - y0[0], y1[3 * n + 1] - y0[1]];
        for i in 0..n {
            j1[i * nd + i] = 1.0;
            j0[i * nd + i] = -1.0;
            j1[(2 + i) * nd + n + i] = 1.0;
            j0[(2 + i) * nd + n + i] = -1.0;
            j0[4 * nd + n + i] = 2.0 * v0[i];
            j0[(5 + i) * nd + 2 * n + i] = 1.0;
            j0[(5 + i) * nd + i] = -1.0;
            j1[7 * nd + 2 * n + i] = self.n0[i];
            j1[8 * nd + 3 * n + i] = v0[i];
            j0[8 * nd + i] = -v0[i];
            j0[8 * nd + n + i] = dx[i];
            j0[(10 + i) * nd + 3 * n + i] = 1.0;
        }
        j1[9 * nd + 3 * n] = -v0[1];
        j1[9 * nd + 3 * n + 1] = v0[0];
        j0[9 * nd] = v0[1];
        j0[9 * nd + 1] = -v0[0];
        j0[9 * nd + n] = dx[1];
        j0[9 * nd + n + 1] = -dx[0];
        jq[8 * 6 + 3] = -1.0;
        // the kick point moves along the frozen cycle with ϑ
        let h = 1e-6;
        let theta = q[4];
        let gp = self.reference.eval((theta + h).rem_euclid(1.0));
        let gm = self.reference.eval((theta - h).rem_euclid(1.0));
        for i in 0..n {
            jq[(10 + i) * 6 + 4] = -(gp[i] - gm[i]) / (2.0 * h);
            jq[(10 + i) * 6 + 5] = -self.direction[i];
        }
    }
}

/// The six-parameter, four-segment spec (planar): index 2, a genuine
/// two-parameter family until one of ϑ, A is frozen.
pub fn reduced_kick_spec(
    model: &ModelDef,
    rec: &OrbitRecord,
    direction: &[f64],
) -> Result<BvpSpec> {
    let b = rec.require_bundle()?;
    let v0 = b.v0();
    Ok(BvpSpec {
        rhs: Arc::new(ReducedRhs {
            field: model.clone(),
        }),
        bc: Arc::new(ReducedBc {
            gamma0: [b.orbit.seg.first()[0], b.orbit.seg.first()[1]],
            n0: [-v0[1], v0[0]],
            direction: [direction[0], direction[1]],
            reference: b.orbit.seg.clone(),
        }),
        integral: None,
        params: ParamSet::new(&["T", "lambda", "nu", "eta", "theta", "A"])
            .free_named(&["T", "lambda", "nu", "eta", "theta", "A"])
            .unwrap(),
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Winfree;
    use crate::oracle::{circular_distance, winfree_phase_closed_form};
    use crate::periodic::OrbitOptions;

    fn winfree_record(a: f64) -> (ModelDef, OrbitRecord) {
        let model = ModelDef::Winfree(Winfree { a, omega: -0.5 });
        let rec = OrbitRecord::complete(&model, &[1.3, 0.2], &OrbitOptions::default()).unwrap();
        (model, rec)
    }

    fn kick(d: [f64; 2], a: f64) -> Perturbation {
        Perturbation {
            direction: d.to_vec(),
            amplitude: a,
            kind: PerturbationKind::Instantaneous,
        }
    }

    #[test]
    fn identity_assembly_is_already_solved() {
        let (model, rec) = winfree_record(0.0);
        let pert = kick([1.0, 0.0], 0.75);
        let prob = ResetProblem::assemble(&model, &rec, &pert, &ResetOptions::default()).unwrap();
        let r = prob.residual();
        println!("kick identity residual {r:.3e}");
        assert!(r < 1e-9, "identity stack should satisfy everything, got {r:.3e}");
        assert_eq!(prob.spec(Some("theta")).wellposedness_index(), 1);
        assert_eq!(prob.spec(Some("A")).wellposedness_index(), 1);
        assert_eq!(prob.spec(None).wellposedness_index(), 0);
        let reduced = reduced_kick_spec(&model, &rec, &[1.0, 0.0]).unwrap();
        assert_eq!(reduced.wellposedness_index(), 2);
        // pulse variant assembles against the adjoint frame
        let pulse = Perturbation {
            direction: vec![1.0, 0.0],
            amplitude: 0.5,
            kind: PerturbationKind::Pulse { dt: 0.01 },
        };
        let pp = ResetProblem::assemble(&model, &rec, &pulse, &ResetOptions::default()).unwrap();
        let rp = pp.residual();
        println!("pulse identity residual {rp:.3e}");
        assert!(rp < 1e-8, "pulse identity residual {rp:.3e}");
        assert_eq!(pp.spec(Some("A")).wellposedness_index(), 1);
    }

    #[test]
    fn amplitude_homotopy_tracks_the_closed_form_phase() {
        let (model, rec) = winfree_record(0.0);
        let pert = kick([-1.0, 0.0], 0.75);
        let mut prob =
            ResetProblem::assemble(&model, &rec, &pert, &ResetOptions::default()).unwrap();
        let run = prob.homotopy_in_amplitude(0.75, &[0.4]).unwrap();
        assert_eq!(run.hits.len(), 1);
        let (a_hit, th_hit) = run.hits[0];
        let expect_04 = winfree_phase_closed_form(0.0, -0.5, 0.6, 0.0).unwrap();
        let expect_75 = winfree_phase_closed_form(0.0, -0.5, 0.25, 0.0).unwrap();
        let th_end = prob.unwrap_base - prob.sol.params[P_NU];
        println!(
            "hit A = {a_hit:.6}: theta_new {:.7} (closed form {expect_04:.7})",
            th_hit.rem_euclid(1.0)
        );
        println!(
            "end A = 0.75: theta_new {:.7} (closed form {expect_75:.7})",
            th_end.rem_euclid(1.0)
        );
        assert!((a_hit - 0.4).abs() < 1e-9);
        assert!(circular_distance(th_hit, expect_04) < 1e-5);
        assert!(circular_distance(th_end, expect_75) < 1e-6);
        assert!(
            prob.monitor_error() < 1e-6,
            "phase monitors drifted: {:.3e}",
            prob.monitor_error()
        );
        let d = run.curve.passivity;
        println!(
            "passivity: T {:.2e}, That {:.2e}, lambda {:.2e}",
            d.period_rel, d.t_hat_rel, d.exponent_abs
        );
        assert!(d.period_rel < 1e-7 && d.t_hat_rel < 1e-7 && d.exponent_abs < 1e-6);
    }

    #[test]
    fn full_sweep_matches_the_closed_form_map_everywhere() {
        let (model, rec) = winfree_record(0.0);
        let pert = kick([1.0, 0.0], 0.5);
        let curve = compute_ptc(&model, &rec, &pert, &ResetOptions::default()).unwrap();
        assert!(curve.is_complete());
        let mut worst = 0.0f64;
        for p in &curve.samples {
            let g = rec.orbit().point_at_phase(p.theta_old);
            let th = winfree_phase_closed_form(0.0, -0.5, g[0] + 0.5, g[1]).unwrap();
            worst = worst.max(circular_distance(p.theta_new_mod1(), th));
        }
        println!(
            "sweep: {} samples, worst closed-form gap {worst:.3e}, winding {:.6}",
            curve.samples.len(),
            curve.winding()
        );
        assert!(worst < 1e-5, "phase map disagrees by {worst:.3e}");
        assert!((curve.winding() - 1.0).abs() < 1e-6);
        assert!(curve.closure_error().unwrap() < 1e-6);
        assert!(curve.max_jump() < 0.5);
    }

    #[test]
    fn zero_amplitude_family_is_the_identity() {
        let (model, rec) = winfree_record(0.25);
        for kind in [
            PerturbationKind::Instantaneous,
            PerturbationKind::Pulse { dt: 0.05 },
        ] {
            let curve =
                identity_ptc(&model, &rec, kind.clone(), 21, &ResetOptions::default()).unwrap();
            let worst = curve
                .samples
                .iter()
                .map(|p| (p.theta_new - p.theta_old).abs())
                .fold(0.0, f64::max);
            println!("identity ({kind:?}): worst |shift| {worst:.3e}");
            assert!(worst < 1e-8, "identity family shifted by {worst:.3e}");
            assert!((curve.winding() - 1.0).abs() < 1e-9);
            let cls = curve.classification.as_ref().unwrap();
            assert!(cls.invertible && cls.extrema.is_empty());
        }
    }

    #[test]
    fn tight_landing_cap_adds_laps_without_changing_the_map() {
        let (model, rec) = winfree_record(0.0);
        let pert = kick([-1.0, 0.0], 0.75);
        // the landing offset grows toward ~0.1 as the kick reaches deeper
        // into the disc, so a 0.05 cap must buy a lap mid-run while a 0.2
        // cap rides the whole way at k = 1 and settles only at the end
        let run = |eta_max: f64| {
            let mut o = ResetOptions::default();
            o.eta_max = eta_max;
            let mut prob = ResetProblem::assemble(&model, &rec, &pert, &o).unwrap();
            prob.homotopy_in_amplitude(0.75, &[]).unwrap();
            let theta = prob.unwrap_base - prob.sol.params[P_NU];
            (theta, prob.k, prob.k_history.clone())
        };
        let (th_tight, k_tight, hist_tight) = run(0.05);
        let (th_loose, k_loose, hist_loose) = run(0.2);
        println!("tight cap: k = {k_tight}, history {hist_tight:?}");
        println!("loose cap: k = {k_loose}, history {hist_loose:?}");
        println!(
            "theta_new at A = 0.75: {:.9} vs {:.9}",
            th_tight.rem_euclid(1.0),
            th_loose.rem_euclid(1.0)
        );
        assert!(
            hist_tight.iter().any(|&(a, _)| a < 0.74),
            "tight cap should have forced a lap before the target"
        );
        assert!(
            hist_loose.iter().all(|&(a, k)| k == 1 || a > 0.74),
            "loose cap should not trigger mid-run"
        );
        assert!(k_tight >= 2);
        assert!(
            circular_distance(th_loose, th_tight) < 1e-6,
            "lap count changed the computed phase: {:.3e}",
            circular_distance(th_loose, th_tight)
        );
        let th = winfree_phase_closed_form(0.0, -0.5, 0.25, 0.0).unwrap();
        assert!(circular_distance(th_tight, th) < 1e-6);
    }

    #[test]
    fn kick_type_changes_across_the_invertibility_amplitude() {
        let (model, rec) = winfree_record(0.25);
        let opts = ResetOptions::default();
        let c54 = compute_ptc(&model, &rec, &kick([1.0, 0.0], 0.54), &opts).unwrap();
        let c64 = compute_ptc(&model, &rec, &kick([1.0, 0.0], 0.64), &opts).unwrap();
        let k54 = c54.classification.clone().unwrap();
        let k64 = c64.classification.clone().unwrap();
        println!(
            "A=0.54: invertible {}, extrema {}; A=0.64: invertible {}, extrema {:?}",
            k54.invertible,
            k54.extrema.len(),
            k64.invertible,
            k64.extrema
                .iter()
                .map(|e| (e.is_max, e.value))
                .collect::<Vec<_>>()
        );
        assert!(k54.invertible && k54.extrema.is_empty());
        assert!(!k64.invertible);
        let maxima: Vec<&Extremum> = k64.extrema.iter().filter(|e| e.is_max).collect();
        let minima: Vec<&Extremum> = k64.extrema.iter().filter(|e| !e.is_max).collect();
        assert_eq!(maxima.len(), 1);
        assert_eq!(minima.len(), 1);
        assert!((maxima[0].value - 0.22).abs() < 0.01);
        assert!((minima[0].value - 0.19).abs() < 0.01);
        // both curves still wind once around the torus
        assert!((c54.winding() - 1.0).abs() < 1e-6);
        assert!((c64.winding() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rotating_the_kick_direction_shifts_the_sweep() {
        let (model, rec) = winfree_record(0.0);
        let theta = 0.3;
        let alpha = std::f64::consts::TAU * theta;
        let d = [0.0, 1.0];
        let d_rot = [
            alpha.cos() * d[0] - alpha.sin() * d[1],
            alpha.sin() * d[0] + alpha.cos() * d[1],
        ];
        let opts = ResetOptions::default();
        let at = [0.15, 0.3];
        let a = amplitude_sweep(&model, &rec, &kick(d, 0.4), theta, &at, &opts).unwrap();
        let b = amplitude_sweep(&model, &rec, &kick(d_rot, 0.4), 0.0, &at, &opts).unwrap();
        for ((aa, tha), (ab, thb)) in a.hits.iter().zip(&b.hits) {
            let gap = circular_distance(*tha, *thb + theta);
            println!("A = {aa:.3}/{ab:.3}: rotated gap {gap:.3e}");
            assert!(gap < 1e-6, "equivariance broken by {gap:.3e}");
        }
    }

    #[test]
    fn short_pulses_converge_to_the_kick_limit() {
        let (model, rec) = winfree_record(0.0);
        let t = rec.period();
        let dt = 1e-3 * t;
        let a_inst = 0.2;
        let opts = ResetOptions::default();
        let kick_curve = compute_ptc(&model, &rec, &kick([1.0, 0.0], a_inst), &opts).unwrap();
        let pulse = Perturbation {
            direction: vec![1.0, 0.0],
            amplitude: a_inst / dt,
            kind: PerturbationKind::Pulse { dt },
        };
        let pulse_curve = compute_ptc(&model, &rec, &pulse, &opts).unwrap();
        assert!(pulse_curve.is_complete());
        let mut worst = 0.0f64;
        let mut n_cmp = 0;
        for p in &kick_curve.samples {
            if let Some(th) = pulse_curve.theta_new_at(p.x) {
                worst = worst.max(circular_distance(p.theta_new, th));
                n_cmp += 1;
            }
        }
        println!("compared {n_cmp} phases; worst kick/pulse gap {worst:.3e} (dt = {dt:.4})");
        assert!(n_cmp > 50);
        assert!(worst < 0.01, "pulse limit off by {worst:.3e}");
    }

    #[test]
    fn curve_csv_is_machine_round_trippable() {
        let (model, rec) = winfree_record(0.0);
        let curve =
            identity_ptc(&model, &rec, PerturbationKind::Instantaneous, 5, &ResetOptions::default())
                .unwrap();
        let csv = curve.csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "theta_old,theta_new_mod1,theta_new_unwrapped,delta_mod1,arclength_L,steep_flag"
        );
        assert_eq!(csv.lines().count(), 6);
        let reparsed: f64 = csv.lines().nth(3).unwrap().split(',').nth(2).unwrap().parse().unwrap();
        let orig = curve.samples[2].theta_new;
        assert_eq!(reparsed, orig, "17 significant digits survive a round trip");
    }
}
