//! Gluing two loops at a junction chosen near the Melnikov minimum.
//!
//! For a fixed outer boundary `(T₋₁, Q₋₁)`, `(T₁, Q₁)` and a junction
//! `(T₀, Q₀)`, the glued curve is the concatenation of the minimizing loop
//! into the junction apex and the minimizing loop out of it. Its action
//! `F_Y(T₀, Q₀)` is minimized over a box around a translate of the
//! certified Melnikov minimum. An interior minimum, followed by free
//! relaxation of the whole curve, yields a genuine trajectory.

use crate::melnikov::{box_boundary, melnikov_value, Condition1Certificate, MelnikovError, MelnikovOptions};
use crate::model::{separatrix_angle, separatrix_weight, PerturbationSpec, SystemParams};
use crate::quadrature::integrate_adaptive;
use crate::variational::{
    action, el_residuals, minimize, solve_loop_at_level, ActionParts, BoundarySpec, DiscreteCurve, SolverOptions,
    VariationalError,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

const TAU: f64 = 2.0 * PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransitionError {
    #[error("MINIMUM_ON_BOUNDARY: boundary minimum {boundary_min} does not exceed junction value {junction}")]
    MinimumOnBoundary { junction: f64, boundary_min: f64 },
    #[error("no translate of the certificate box satisfies the slope constraints")]
    NoAdmissibleTranslate,
    #[error("invalid transition request: {0}")]
    InvalidArgument(String),
    #[error("q never exceeds pi along the curve")]
    NoCrossing,
    #[error(transparent)]
    Loop(#[from] VariationalError),
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
}

/// Fixed outer apexes of a transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterBoundary {
    pub t_prev: f64,
    pub rotor_prev: f64,
    pub t_next: f64,
    pub rotor_next: f64,
    /// Lifted pendulum angle at the first apex; the junction sits at
    /// `q_prev + 2π` and the last apex at `q_prev + 4π`.
    #[serde(default = "minus_pi")]
    pub q_prev: f64,
}

fn minus_pi() -> f64 {
    -PI
}

impl OuterBoundary {
    pub fn new(t_prev: f64, rotor_prev: f64, t_next: f64, rotor_next: f64) -> Self {
        Self {
            t_prev,
            rotor_prev,
            t_next,
            rotor_next,
            q_prev: -PI,
        }
    }

    /// Outer apexes from `(π, π)` spanning two loops of `2π·⌈(T + π)/2π⌉`
    /// each, with the rotor advance rounded to a multiple of `2π` nearest the
    /// mean frequency.
    pub fn for_step(omega1: f64, omega2: f64, s: &SystemParams) -> Self {
        let d = TAU * ((s.loop_time() + PI) / TAU).ceil();
        let mean = 0.5 * (omega1 + omega2);
        Self::new(PI, PI, PI + 2.0 * d, PI + TAU * (mean * 2.0 * d / TAU).round())
    }

    pub fn duration(&self) -> f64 {
        self.t_next - self.t_prev
    }

    pub fn slope(&self) -> f64 {
        (self.rotor_next - self.rotor_prev) / self.duration()
    }

    /// Slopes of the two loops through junction `(t0, rotor0)`.
    pub fn slopes(&self, t0: f64, rotor0: f64) -> (f64, f64) {
        (
            (rotor0 - self.rotor_prev) / (t0 - self.t_prev),
            (self.rotor_next - rotor0) / (self.t_next - t0),
        )
    }

    fn loops(&self, t0: f64, rotor0: f64) -> (BoundarySpec, BoundarySpec) {
        (
            BoundarySpec {
                t0: self.t_prev,
                t1: t0,
                rotor0: self.rotor_prev,
                rotor1: rotor0,
                qa: self.q_prev,
                qb: self.q_prev + TAU,
            },
            BoundarySpec {
                t0,
                t1: self.t_next,
                rotor0,
                rotor1: self.rotor_next,
                qa: self.q_prev + TAU,
                qb: self.q_prev + 2.0 * TAU,
            },
        )
    }
}

/// The glued curve `ι(T₀, Q₀)` and its action.
#[derive(Debug, Clone)]
pub struct Glued {
    pub fy: f64,
    pub parts: ActionParts,
    pub curve: DiscreteCurve,
    /// Node index of the junction in `curve`.
    pub junction_node: usize,
}

/// `F_Y(T₀, Q₀)`: sum of the actions of the two minimizing loops.
pub fn glue_action(
    t0: f64,
    rotor0: f64,
    outer: &OuterBoundary,
    s: &SystemParams,
    opts: &SolverOptions,
) -> Result<f64, TransitionError> {
    Ok(glue(t0, rotor0, outer, s, opts)?.fy)
}

pub fn glue(
    t0: f64,
    rotor0: f64,
    outer: &OuterBoundary,
    s: &SystemParams,
    opts: &SolverOptions,
) -> Result<Glued, TransitionError> {
    if !(t0 > outer.t_prev && t0 < outer.t_next) {
        return Err(TransitionError::InvalidArgument(format!(
            "junction time {t0} outside ({}, {})",
            outer.t_prev, outer.t_next
        )));
    }
    let (b1, b2) = outer.loops(t0, rotor0);
    let (c1, _) = solve_loop_at_level(&b1, s, opts)?;
    let (c2, _) = solve_loop_at_level(&b2, s, opts)?;
    let a1 = action(&c1, s);
    let a2 = action(&c2, s);
    let junction_node = c1.len() - 1;
    let curve = DiscreteCurve::concat(&[c1, c2])?;
    Ok(Glued {
        fy: a1.total + a2.total,
        parts: ActionParts {
            total: a1.total + a2.total,
            free: a1.free + a2.free,
            perturbation: a1.perturbation + a2.perturbation,
        },
        curve,
        junction_node,
    })
}

/// Junction-independent part of the perturbation integral of a glued curve:
/// the outgoing half-separatrix at `T₋₁` plus the incoming half at `T₁`.
pub fn boundary_half_integrals(
    outer: &OuterBoundary,
    omega1: f64,
    f: &PerturbationSpec,
    opts: &MelnikovOptions,
) -> Result<f64, TransitionError> {
    let l = opts.trunc;
    let out = integrate_adaptive(
        |s: f64| {
            [separatrix_weight(s)
                * f.value(outer.rotor_prev + omega1 * s, separatrix_angle(s), outer.t_prev + s)]
        },
        0.0,
        l,
        opts.quad_tol,
        0.0,
        4,
        2000,
    )
    .map_err(MelnikovError::from)?;
    let inc = integrate_adaptive(
        |s: f64| {
            [separatrix_weight(s)
                * f.value(outer.rotor_next + omega1 * s, separatrix_angle(s), outer.t_next + s)]
        },
        -l,
        0.0,
        opts.quad_tol,
        0.0,
        4,
        2000,
    )
    .map_err(MelnikovError::from)?;
    Ok(out.value[0] + inc.value[0])
}

/// `(a, b)`: first time `q` exceeds `level` (linear interpolation) and the
/// rotor angle there.
pub fn project_to_loop_family_at(curve: &DiscreteCurve, level: f64) -> Result<(f64, f64), TransitionError> {
    for i in 0..curve.len() - 1 {
        let (qa, qb) = (curve.q[i], curve.q[i + 1]);
        if qa <= level && qb > level {
            let u = (level - qa) / (qb - qa);
            let a = curve.times[i] + u * (curve.times[i + 1] - curve.times[i]);
            let b = curve.rotor(i) + u * curve.rotor_diff(i);
            return Ok((a, b));
        }
    }
    Err(TransitionError::NoCrossing)
}

/// Projection with `level = π`.
pub fn project_to_loop_family(curve: &DiscreteCurve) -> Result<(f64, f64), TransitionError> {
    project_to_loop_family_at(curve, PI)
}

/// Adds `Σ_k a_k sin(kπ(t − t₀)/(t₁ − t₀))` to `q` and the same with `b_k`
/// to the rotor; the ends stay fixed.
pub fn bump_perturbation(curve: &DiscreteCurve, q_coeffs: &[f64], rotor_coeffs: &[f64]) -> DiscreteCurve {
    let mut out = curve.clone();
    let (t0, t1) = (curve.times[0], curve.times[curve.len() - 1]);
    let bump = |coeffs: &[f64], t: f64| -> f64 {
        let x = PI * (t - t0) / (t1 - t0);
        coeffs.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * x).sin()).sum()
    };
    for i in 1..curve.len() - 1 {
        let t = curve.times[i];
        out.q[i] += bump(q_coeffs, t);
        out.set_rotor(i, curve.rotor(i) + bump(rotor_coeffs, t));
    }
    out
}

/// `F(γ)` and `F(ι(G(γ)))` for a curve joining the outer apexes: the
/// projection keeps the junction crossing and re-minimizes both loops.
pub fn projection_pair(
    curve: &DiscreteCurve,
    outer: &OuterBoundary,
    s: &SystemParams,
    opts: &SolverOptions,
) -> Result<(f64, f64), TransitionError> {
    let (a, b) = project_to_loop_family_at(curve, outer.q_prev + TAU)?;
    let g = glue(a, b, outer, s, opts)?;
    Ok((action(curve, s).total, g.fy))
}

/// Rectangle around a translate of the certificate minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JunctionBox {
    pub center_t: f64,
    pub center_q: f64,
    pub half_width_t: f64,
    pub half_width_q: f64,
}

impl JunctionBox {
    pub fn contains_strictly(&self, t: f64, q: f64) -> bool {
        (t - self.center_t).abs() < self.half_width_t && (q - self.center_q).abs() < self.half_width_q
    }

    fn clamp(&self, x: [f64; 2]) -> [f64; 2] {
        [
            x[0].clamp(self.center_t - self.half_width_t, self.center_t + self.half_width_t),
            x[1].clamp(self.center_q - self.half_width_q, self.center_q + self.half_width_q),
        ]
    }

    /// `n × n` grid including the edges.
    pub fn grid(&self, n: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let u = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
                let v = -1.0 + 2.0 * j as f64 / (n - 1) as f64;
                out.push((self.center_t + u * self.half_width_t, self.center_q + v * self.half_width_q));
            }
        }
        out
    }
}

/// Chooses the translate `(T_ω + 2πn, Q_ω + 2πm)` of the certificate box.
///
/// Admissible translates keep both loops longer than `min_loop` for every
/// junction in the box and have both slope deviations within `μ`. Among
/// them the one nearest to `hint` is taken when given, otherwise the one
/// with the smallest slope deviation.
pub fn choose_box(
    outer: &OuterBoundary,
    omega1: f64,
    omega2: f64,
    mu: f64,
    cert: &Condition1Certificate,
    min_loop: f64,
    hint: Option<(f64, f64)>,
) -> Result<JunctionBox, TransitionError> {
    let n_lo = ((outer.t_prev + min_loop + cert.half_width_t - cert.argmin_t) / TAU).ceil() as i64;
    let n_hi = ((outer.t_next - min_loop - cert.half_width_t - cert.argmin_t) / TAU).floor() as i64;
    let mut best: Option<(f64, JunctionBox)> = None;
    for n in n_lo..=n_hi {
        let ct = cert.argmin_t + TAU * n as f64;
        let ideal = outer.rotor_prev + 0.5 * (omega1 + omega2) * (ct - outer.t_prev);
        let m0 = ((ideal - cert.argmin_q) / TAU).round() as i64;
        for m in m0 - 2..=m0 + 2 {
            let cq = cert.argmin_q + TAU * m as f64;
            let (s1, s2) = outer.slopes(ct, cq);
            let dev = (s1 - omega1).abs().max((s2 - omega2).abs());
            if dev > mu {
                continue;
            }
            let score = match hint {
                Some((ht, hq)) => (ct - ht).hypot(cq - hq),
                None => dev,
            };
            let bx = JunctionBox {
                center_t: ct,
                center_q: cq,
                half_width_t: cert.half_width_t,
                half_width_q: cert.half_width_q,
            };
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, bx));
            }
        }
    }
    best.map(|(_, b)| b).ok_or(TransitionError::NoAdmissibleTranslate)
}

/// Result of a local 2-D minimization.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Local2d {
    pub x: [f64; 2],
    pub value: f64,
    pub iterations: usize,
}

/// Quasi-Newton (BFGS) descent with central-difference gradients, kept
/// inside `bounds` when given.
pub(crate) fn bfgs_2d<F>(
    f: &F,
    x0: [f64; 2],
    f0: f64,
    fd_step: f64,
    grad_tol: f64,
    max_iter: usize,
    bounds: Option<&JunctionBox>,
) -> Result<Local2d, TransitionError>
where
    F: Fn([f64; 2]) -> Result<f64, TransitionError> + Sync,
{
    let grad = |x: [f64; 2]| -> Result<[f64; 2], TransitionError> {
        let pts = [
            [x[0] + fd_step, x[1]],
            [x[0] - fd_step, x[1]],
            [x[0], x[1] + fd_step],
            [x[0], x[1] - fd_step],
        ];
        let v = pts.par_iter().map(|p| f(*p)).collect::<Result<Vec<_>, _>>()?;
        Ok([(v[0] - v[1]) / (2.0 * fd_step), (v[2] - v[3]) / (2.0 * fd_step)])
    };
    let mut x = x0;
    let mut fx = f0;
    let mut g = grad(x)?;
    let mut hinv = [[1.0, 0.0], [0.0, 1.0]];
    let gnorm0 = g[0].hypot(g[1]).max(1e-300);
    // Scale the initial inverse Hessian so the first step has unit length
    // at most.
    let s0 = (1.0 / gnorm0).min(1.0);
    hinv[0][0] = s0;
    hinv[1][1] = s0;
    let mut it = 0;
    while it < max_iter && g[0].hypot(g[1]) > grad_tol {
        it += 1;
        let mut d = [
            -(hinv[0][0] * g[0] + hinv[0][1] * g[1]),
            -(hinv[1][0] * g[0] + hinv[1][1] * g[1]),
        ];
        if d[0] * g[0] + d[1] * g[1] >= 0.0 {
            hinv = [[s0, 0.0], [0.0, s0]];
            d = [-s0 * g[0], -s0 * g[1]];
        }
        let mut alpha = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let mut xt = [x[0] + alpha * d[0], x[1] + alpha * d[1]];
            if let Some(b) = bounds {
                xt = b.clamp(xt);
            }
            let ft = f(xt)?;
            let slope = g[0] * (xt[0] - x[0]) + g[1] * (xt[1] - x[1]);
            if ft <= fx + 1e-4 * slope && ft < fx {
                next = Some((xt, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = next else { break };
        let gn = grad(xn)?;
        let sv = [xn[0] - x[0], xn[1] - x[1]];
        let yv = [gn[0] - g[0], gn[1] - g[1]];
        let sy = sv[0] * yv[0] + sv[1] * yv[1];
        if sy > 1e-16 * (sv[0].hypot(sv[1]) * yv[0].hypot(yv[1])) && sy > 0.0 {
            let hy = [
                hinv[0][0] * yv[0] + hinv[0][1] * yv[1],
                hinv[1][0] * yv[0] + hinv[1][1] * yv[1],
            ];
            let yhy = yv[0] * hy[0] + yv[1] * hy[1];
            let rho = 1.0 / sy;
            for a in 0..2 {
                for b in 0..2 {
                    hinv[a][b] += (1.0 + yhy * rho) * rho * sv[a] * sv[b] - rho * (hy[a] * sv[b] + sv[a] * hy[b]);
                }
            }
        }
        let moved = sv[0].hypot(sv[1]);
        x = xn;
        fx = fnew;
        g = gn;
        if moved < 1e-10 {
            break;
        }
    }
    Ok(Local2d {
        x,
        value: fx,
        iterations: it,
    })
}

/// Settings of the junction search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitionOptions {
    pub solver: SolverOptions,
    pub melnikov: MelnikovOptions,
    /// Coarse grid resolution per box side.
    pub grid: usize,
    /// Boundary samples of `F_Y` (rounded up to a multiple of 4).
    pub boundary_samples: usize,
    pub fd_step: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            melnikov: MelnikovOptions::default(),
            grid: 9,
            boundary_samples: 256,
            fd_step: 1e-3,
            grad_tol: 1e-9,
            max_iter: 60,
        }
    }
}

/// Outcome of one simple transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub outer: OuterBoundary,
    pub omega1: f64,
    pub omega2: f64,
    pub junction_t: f64,
    pub junction_q: f64,
    #[serde(rename = "box")]
    pub junction_box: JunctionBox,
    pub fy_at_junction: f64,
    pub boundary_fy_min: f64,
    /// `boundary_fy_min − fy_at_junction`.
    pub boundary_margin: f64,
    /// `F_Y` at the box center, the comparison curve through the
    /// translated Melnikov minimizer.
    pub fy_reference: f64,
    pub el_residual: f64,
    /// `(|Δq̇|, |ΔQ̇|)` at the junction node after relaxation.
    pub vel_jump: [f64; 2],
    pub slope_in: f64,
    pub slope_out: f64,
    pub search_iterations: usize,
}

impl TransitionRecord {
    pub fn vel_jump_max(&self) -> f64 {
        self.vel_jump[0].max(self.vel_jump[1])
    }
}

/// One-sided derivative estimates at node `i` from parabolas through three
/// nodes on each side.
pub fn one_sided_velocities(c: &DiscreteCurve, i: usize) -> Option<([f64; 2], [f64; 2])> {
    if i < 2 || i + 2 >= c.len() {
        return None;
    }
    let d = |idx: [usize; 3], vals: &dyn Fn(usize) -> f64| {
        // Derivative at t[idx[0]] of the interpolating parabola.
        let (t0, t1, t2) = (c.times[idx[0]], c.times[idx[1]], c.times[idx[2]]);
        let (y0, y1, y2) = (vals(idx[0]), vals(idx[1]), vals(idx[2]));
        let (h1, h2) = (t1 - t0, t2 - t0);
        // y = y0 + b·τ + c·τ² through (h1, y1), (h2, y2).
        let det = h1 * h2 * (h2 - h1);
        ((y1 - y0) * h2 * h2 - (y2 - y0) * h1 * h1) / det
    };
    let q = |k: usize| c.q[k];
    let r = |k: usize| {
        // Rotor relative to node i, accumulated through exact differences.
        let mut acc = 0.0;
        if k > i {
            for j in i..k {
                acc += c.rotor_diff(j);
            }
        } else {
            for j in k..i {
                acc -= c.rotor_diff(j);
            }
        }
        acc
    };
    let left = [d([i, i - 1, i - 2], &q), d([i, i - 1, i - 2], &r)];
    let right = [d([i, i + 1, i + 2], &q), d([i, i + 1, i + 2], &r)];
    Some((left, right))
}

pub fn velocity_jump(c: &DiscreteCurve, i: usize) -> [f64; 2] {
    match one_sided_velocities(c, i) {
        Some((l, r)) => [(l[0] - r[0]).abs(), (l[1] - r[1]).abs()],
        None => [f64::INFINITY; 2],
    }
}

/// Junction search, boundary certification and free relaxation.
#[allow(clippy::too_many_arguments)]
pub fn find_transition(
    outer: &OuterBoundary,
    omega1: f64,
    omega2: f64,
    s: &SystemParams,
    cert: &Condition1Certificate,
    opts: &TransitionOptions,
    hint: Option<(f64, f64)>,
) -> Result<(TransitionRecord, DiscreteCurve), TransitionError> {
    let mu = s.mu;
    if !(omega1 > 0.5 && omega1 <= omega2 && omega2 < 2.5) {
        return Err(TransitionError::InvalidArgument(format!(
            "need 1/2 < omega1 <= omega2 < 5/2, got ({omega1}, {omega2})"
        )));
    }
    if omega2 - omega1 > mu * (1.0 + 1e-9) {
        return Err(TransitionError::InvalidArgument(format!(
            "frequency step {} exceeds mu = {mu}",
            omega2 - omega1
        )));
    }
    let t_loop = if mu > 0.0 { s.loop_time() } else { 0.0 };
    if outer.duration() < 2.0 * t_loop {
        return Err(TransitionError::InvalidArgument(format!(
            "outer interval {} shorter than 2T = {}",
            outer.duration(),
            2.0 * t_loop
        )));
    }
    if (outer.slope() - omega1).abs() > mu * (1.0 + 1e-9) {
        return Err(TransitionError::InvalidArgument(format!(
            "outer slope {} not within mu of omega1 = {omega1}",
            outer.slope()
        )));
    }
    let bx = choose_box(outer, omega1, omega2, mu, cert, t_loop, hint)?;
    let fy = |x: [f64; 2]| glue_action(x[0], x[1], outer, s, &opts.solver);

    let grid = bx.grid(opts.grid.max(3));
    let values = grid
        .par_iter()
        .map(|&(t, q)| fy([t, q]))
        .collect::<Result<Vec<_>, _>>()?;
    let (k_best, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty grid");
    let start = [grid[k_best].0, grid[k_best].1];
    let local = bfgs_2d(&fy, start, values[k_best], opts.fd_step, opts.grad_tol, opts.max_iter, Some(&bx))?;
    let fy_reference = fy([bx.center_t, bx.center_q])?;

    let per_edge = opts.boundary_samples.div_ceil(4).max(2);
    let boundary_fy_min = box_boundary(bx.center_t, bx.center_q, bx.half_width_t, bx.half_width_q, per_edge)
        .par_iter()
        .map(|&(t, q)| fy([t, q]))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let (jt, jq) = (local.x[0], local.x[1]);
    if !(boundary_fy_min > local.value) || !bx.contains_strictly(jt, jq) {
        return Err(TransitionError::MinimumOnBoundary {
            junction: local.value,
            boundary_min: boundary_fy_min,
        });
    }

    let glued = glue(jt, jq, outer, s, &opts.solver)?;
    let mut curve = glued.curve;
    minimize(&mut curve, s, &[], &opts.solver)?;
    let el_residual = el_residuals(&curve, s).into_iter().fold(0.0, f64::max);
    let vel_jump = velocity_jump(&curve, glued.junction_node);
    let (slope_in, slope_out) = outer.slopes(jt, jq);
    let record = TransitionRecord {
        outer: *outer,
        omega1,
        omega2,
        junction_t: jt,
        junction_q: jq,
        junction_box: bx,
        fy_at_junction: local.value,
        boundary_fy_min,
        boundary_margin: boundary_fy_min - local.value,
        fy_reference,
        el_residual,
        vel_jump,
        slope_in,
        slope_out,
        search_iterations: local.iterations,
    };
    Ok((record, curve))
}

/// Pairs `(μ·A(ω₁, T, Q), F_Y(T, Q))` on an `n × n` grid over the box.
pub fn fy_regression_samples(
    outer: &OuterBoundary,
    omega1: f64,
    bx: &JunctionBox,
    n: usize,
    s: &SystemParams,
    opts: &TransitionOptions,
) -> Result<Vec<(f64, f64)>, TransitionError> {
    let inner = JunctionBox {
        half_width_t: bx.half_width_t * (n - 1) as f64 / n as f64,
        half_width_q: bx.half_width_q * (n - 1) as f64 / n as f64,
        ..*bx
    };
    inner
        .grid(n)
        .par_iter()
        .map(|&(t, q)| {
            let a = melnikov_value(omega1, q, t, &s.perturbation, &opts.melnikov)?.value;
            let f = glue_action(t, q, outer, s, &opts.solver)?;
            Ok((s.mu * a, f))
        })
        .collect()
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::melnikov::{certify_at, BoxPolicy};
    use crate::quadrature::integrate_scalar;

    fn arnold(mu: f64) -> SystemParams {
        SystemParams::new(mu, 10.0, PerturbationSpec::arnold())
    }

    #[test]
    fn unperturbed_glue_costs_two_excursions() {
        let s = arnold(0.0);
        let outer = OuterBoundary::new(0.0, 0.0, 80.0, 84.0);
        let (t0, q0) = (40.0, 40.0);
        let fy = glue_action(t0, q0, &outer, &s, &SolverOptions::default()).unwrap();
        let expected = 0.5 * 1.0 * 40.0 + 0.5 * (44.0f64 / 40.0).powi(2) * 40.0 + 16.0;
        // Midpoint-rule error of two excursions at spacing 0.05.
        assert!((fy - expected).abs() < 5e-3, "{fy} vs {expected}");
    }

    #[test]
    fn zero_perturbation_has_no_p() {
        let s = SystemParams::new(0.02, 10.0, PerturbationSpec::zero());
        let outer = OuterBoundary::new(0.0, 0.0, 1010.0, 1010.0);
        let g = glue(505.0, 505.0, &outer, &s, &SolverOptions::default()).unwrap();
        assert_eq!(g.parts.perturbation, 0.0);
    }

    #[test]
    fn projection_recovers_junction() {
        let s = arnold(0.02);
        let outer = OuterBoundary::new(PI, PI, PI + 1020.0, PI + 1030.0);
        let (t0, q0) = (PI + 510.3, PI + 515.2);
        let g = glue(t0, q0, &outer, &s, &SolverOptions::default()).unwrap();
        let (a, b) = project_to_loop_family(&g.curve).unwrap();
        assert!((a - t0).abs() < 0.05 && (b - q0).abs() < 0.06, "{a} {b}");
    }

    #[test]
    fn half_integrals_match_direct_quadrature() {
        let f = PerturbationSpec::arnold();
        let outer = OuterBoundary::new(0.3, 1.1, 700.2, 705.9);
        let v = boundary_half_integrals(&outer, 1.0, &f, &MelnikovOptions::default()).unwrap();
        let (a, _) = integrate_scalar(
            |s| separatrix_weight(s) * ((1.1 + s).cos() + (0.3 + s).cos()),
            0.0,
            40.0,
            1e-12,
        )
        .unwrap();
        let (b, _) = integrate_scalar(
            |s| separatrix_weight(s) * ((705.9 + s).cos() + (700.2 + s).cos()),
            -40.0,
            0.0,
            1e-12,
        )
        .unwrap();
        assert!((v - (a + b)).abs() < 1e-10);
        let shifted = OuterBoundary {
            t_prev: 0.3 + TAU,
            rotor_prev: 1.1 + TAU,
            ..outer
        };
        let w = boundary_half_integrals(&shifted, 1.0, &f, &MelnikovOptions::default()).unwrap();
        assert!((v - w).abs() < 1e-10);
        let z = boundary_half_integrals(&outer, 1.0, &PerturbationSpec::zero(), &MelnikovOptions::default()).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn perturbation_integral_splits_into_melnikov_and_boundary_parts() {
        // P(ι(T₀, Q₀)) = A(ω₁, T₀, Q₀) + boundary part + O(μ).
        let err = |mu: f64| {
            let s = arnold(mu);
            let d = TAU * (s.loop_time() / TAU).ceil();
            let outer = OuterBoundary::new(PI, PI, PI + 2.0 * d, PI + 2.0 * d);
            let (t0, q0) = (PI + d, PI + d);
            let g = glue(t0, q0, &outer, &s, &SolverOptions::default()).unwrap();
            let a = melnikov_value(1.0, q0, t0, &s.perturbation, &MelnikovOptions::default()).unwrap().value;
            let p = boundary_half_integrals(&outer, 1.0, &s.perturbation, &MelnikovOptions::default()).unwrap();
            (g.parts.perturbation - (a + p)).abs()
        };
        let (e1, e2) = (err(0.02), err(0.01));
        assert!(e1 < 10.0 * 0.02, "{e1}");
        assert!((e1 / e2 - 2.0).abs() < 0.2, "{e1} {e2}");
    }

    #[test]
    fn box_translate_respects_slopes() {
        let cert = certify_at(1.0, &PerturbationSpec::arnold(), &BoxPolicy::default(), 1e-10, &MelnikovOptions::default()).unwrap();
        let outer = OuterBoundary::new(PI, PI, PI + 1020.0, PI + 1030.0);
        let bx = choose_box(&outer, 1.0, 1.02, 0.02, &cert, 500.0, None).unwrap();
        let (s1, s2) = outer.slopes(bx.center_t, bx.center_q);
        assert!((s1 - 1.0).abs() <= 0.02 && (s2 - 1.02).abs() <= 0.02);
        let far = OuterBoundary::new(0.0, 0.0, 1020.0, 3000.0);
        assert!(matches!(
            choose_box(&far, 1.0, 1.02, 0.02, &cert, 500.0, None),
            Err(TransitionError::NoAdmissibleTranslate)
        ));
    }

    #[test]
    fn one_sided_velocity_of_parabola_is_exact() {
        let times: Vec<f64> = (0..100).map(|k| (k as f64 * 0.1).powf(1.1)).collect();
        let q: Vec<f64> = times.iter().map(|t| 1.0 + 2.0 * t - 0.3 * t * t).collect();
        let b = BoundarySpec { t0: times[0], t1: times[99], rotor0: 0.0, rotor1: 0.0, qa: q[0], qb: q[99] };
        let c = DiscreteCurve::new(times.clone(), q, vec![0.0; 100], b).unwrap();
        let (l, r) = one_sided_velocities(&c, 50).unwrap();
        let exact = 2.0 - 0.6 * times[50];
        assert!((l[0] - exact).abs() < 1e-10 && (r[0] - exact).abs() < 1e-10);
        assert!(velocity_jump(&c, 50)[0] < 1e-10);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|k| (k as f64, 3.0 * k as f64 - 1.0)).collect();
        let (a, b) = linear_fit(&pts).unwrap();
        assert!((a - 3.0).abs() < 1e-12 && (b + 1.0).abs() < 1e-12);
        assert!(linear_fit(&[(1.0, 2.0), (1.0, 3.0)]).is_none());
    }
}
