//! Chains of simple transitions and the drift-time scaling study.
//!
//! A chain for frequencies `ω_0 < … < ω_K` (steps `≤ μ`) consists of
//! `2K + 2` loops between apexes `P_0 … P_{2K+2}`. Loop `j` is planned with
//! mean rotor speed `σ_j = ω_0 + (j − ½)μ/2`, so each interior apex carries
//! a kick of `μ/2`. Transition `k` owns the loops `2k + 1` and `2k + 2`: its
//! outer boundary is `(P_{2k+1}, P_{2k+3})`, its junction is `P_{2k+2}`, and
//! its frequencies are `(ω_k, ω_{k+1})`.
//!
//! Apexes are placed in three passes. The planner puts every apex where the
//! Melnikov gradient balances the planned kick, choosing integer lifts so
//! each loop lasts at least `T + π` and realizes its slope closely. Each
//! transition then searches its junction. Finally the odd apexes are
//! re-minimized with their neighbours fixed, and the whole curve is relaxed.

use crate::melnikov::{certify_at, melnikov_jet, BoxPolicy, Condition1Certificate, MelnikovError, MelnikovOptions};
use crate::model::SystemParams;
use crate::transition::{
    bfgs_2d, find_transition, glue_action, OuterBoundary, TransitionError, TransitionOptions, TransitionRecord,
};
use crate::variational::{el_residuals, minimize, solve_loop_at_level, BoundarySpec, DiscreteCurve, VariationalError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::time::Instant;
use thiserror::Error;

const TAU: f64 = 2.0 * PI;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("apex {index}: {message}")]
    Placement { index: usize, message: String },
    #[error("transition {index} failed: {source}")]
    Transition {
        index: usize,
        #[source]
        source: TransitionError,
        partial: Box<DiffusionReport>,
    },
    #[error(transparent)]
    Loop(#[from] VariationalError),
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
    #[error(transparent)]
    Junction(#[from] TransitionError),
    #[error("velocity thresholds not crossed: {0}")]
    ThresholdsNotCrossed(String),
    #[error("scaling fit needs at least three distinct successful mu values")]
    SingularFit,
}

/// Frequencies from `omega_start` to `omega_end` in steps of `μ`, the last
/// step shortened to land on `omega_end`.
pub fn plan_chain(omega_start: f64, omega_end: f64, mu: f64) -> Result<Vec<f64>, DiffusionError> {
    if !(omega_start > 0.5 && omega_start <= omega_end && omega_end < 2.5) {
        return Err(DiffusionError::Plan(format!(
            "need 1/2 < start <= end < 5/2, got ({omega_start}, {omega_end})"
        )));
    }
    let span = omega_end - omega_start;
    if span == 0.0 {
        return Ok(vec![omega_start]);
    }
    if !(mu > 0.0) {
        return Err(DiffusionError::Plan("mu must be positive to change frequency".into()));
    }
    let n = (span / mu - 1e-9).ceil() as usize;
    Ok((0..=n)
        .map(|k| if k == n { omega_end } else { omega_start + k as f64 * mu })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionOptions {
    pub transition: TransitionOptions,
    pub box_policy: BoxPolicy,
    pub refinement_tol: f64,
    /// Number of extra `2π` time lifts tried per loop when matching slopes.
    pub lift_window: usize,
    /// Accept the first lift whose slope error is below this multiple of μ.
    pub slope_tol: f64,
    /// Loop duration used when `μ = 0`.
    pub unperturbed_loop: f64,
    /// Velocity thresholds for the drift time.
    pub qdot_low: f64,
    pub qdot_high: f64,
}

impl Default for DiffusionOptions {
    fn default() -> Self {
        Self {
            transition: TransitionOptions::default(),
            box_policy: BoxPolicy::default(),
            refinement_tol: 1e-10,
            lift_window: 8,
            slope_tol: 0.1,
            unperturbed_loop: 40.0,
            qdot_low: 1.0,
            qdot_high: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub mu: f64,
    pub omega_chain: Vec<f64>,
    /// `(T, Q)` of every apex, junctions at even interior indices.
    pub apexes: Vec<(f64, f64)>,
    /// Transition junctions `(T_k, Q_k)`.
    pub junctions: Vec<(f64, f64)>,
    pub transitions: Vec<TransitionRecord>,
    pub n_nodes: usize,
    #[serde(rename = "Qdot_start")]
    pub qdot_start: f64,
    #[serde(rename = "Qdot_end")]
    pub qdot_end: f64,
    pub t_d: Option<f64>,
    pub residual_max: f64,
    pub wall_time: f64,
}

/// Solves `∇A_ω(θ, τ) = target` by damped Newton steps from `start`,
/// with the target ramped up in `ramp` stages.
fn solve_gradient_target(
    omega: f64,
    target: [f64; 2],
    start: (f64, f64),
    s: &SystemParams,
    mopts: &MelnikovOptions,
) -> Result<(f64, f64), String> {
    let (mut tq, mut tt) = (start.1, start.0);
    let ramp = 4;
    for stage in 1..=ramp {
        let goal = [target[0] * stage as f64 / ramp as f64, target[1] * stage as f64 / ramp as f64];
        let resid = |q: f64, t: f64| -> Result<([f64; 2], [[f64; 2]; 2]), String> {
            let j = melnikov_jet(omega, q, t, &s.perturbation, mopts).map_err(|e| e.to_string())?;
            Ok(([j.grad[0] - goal[0], j.grad[1] - goal[1]], j.hess))
        };
        let (mut g, mut h) = resid(tq, tt)?;
        for _ in 0..50 {
            let norm = g[0].hypot(g[1]);
            if norm < 1e-11 {
                break;
            }
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            if det.abs() < 1e-14 {
                return Err("singular Melnikov Hessian".into());
            }
            let d = [
                -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                -(-h[1][0] * g[0] + h[0][0] * g[1]) / det,
            ];
            let len = d[0].hypot(d[1]);
            let cap = if len > 0.5 { 0.5 / len } else { 1.0 };
            let mut alpha = cap;
            let mut done = false;
            for _ in 0..30 {
                let (nq, nt) = (tq + alpha * d[0], tt + alpha * d[1]);
                let (ng, nh) = resid(nq, nt)?;
                if ng[0].hypot(ng[1]) < norm {
                    tq = nq;
                    tt = nt;
                    g = ng;
                    h = nh;
                    done = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !done {
                break;
            }
        }
        if g[0].hypot(g[1]) > 1e-8 {
            return Err(format!("kick target {goal:?} not reached (residual {:e})", g[0].hypot(g[1])));
        }
    }
    Ok((tt, tq))
}

/// Apex angles `(τ, θ)` in `[0, 2π)` realizing `kick` at mean speed `omega_bar`.
fn apex_angles(
    omega_bar: f64,
    kick: f64,
    s: &SystemParams,
    start: (f64, f64),
    mopts: &MelnikovOptions,
) -> Result<(f64, f64), String> {
    let k = kick / s.mu;
    let (t, q) = solve_gradient_target(omega_bar, [k, -omega_bar * k], start, s, mopts)?;
    Ok((t.rem_euclid(TAU), q.rem_euclid(TAU)))
}

/// Lifts `(τ + 2πn, θ + 2πm)` after `prev` with duration at least
/// `min_len` and slope close to `sigma`.
fn choose_lift(prev: (f64, f64), angles: (f64, f64), sigma: f64, min_len: f64, mu: f64, opts: &DiffusionOptions) -> (f64, f64) {
    let n0 = ((prev.0 + min_len - angles.0) / TAU).ceil() as i64;
    let mut best = (f64::INFINITY, (0.0, 0.0));
    for n in n0..=n0 + opts.lift_window as i64 {
        let t = angles.0 + TAU * n as f64;
        let d = t - prev.0;
        let m = ((prev.1 + sigma * d - angles.1) / TAU).round();
        let q = angles.1 + TAU * m;
        let err = ((q - prev.1) / d - sigma).abs();
        if err <= opts.slope_tol * mu {
            return (t, q);
        }
        if err < best.0 {
            best = (err, (t, q));
        }
    }
    best.1
}

/// Global apex layout before the junction searches.
fn plan_apexes(
    plan: &[f64],
    s: &SystemParams,
    certs: &[Condition1Certificate],
    opts: &DiffusionOptions,
) -> Result<Vec<(f64, f64)>, DiffusionError> {
    let mu = s.mu;
    let k = plan.len() - 1;
    let n_loops = 2 * k + 2;
    let sigma = |j: usize| plan[0] + (j as f64 - 0.5) * mu / 2.0;
    let min_len = s.loop_time() + PI;
    let mopts = &opts.transition.melnikov;
    let cert_for = |w: f64| {
        certs
            .iter()
            .min_by(|a, b| (a.omega - w).abs().total_cmp(&(b.omega - w).abs()))
            .expect("certificates available")
    };
    let place = |j: usize, realized: f64| -> Result<(f64, f64), DiffusionError> {
        let c = cert_for(realized);
        let omega_bar = 0.5 * (realized + sigma(j));
        apex_angles(omega_bar, sigma(j) - realized, s, (c.argmin_t, c.argmin_q), mopts)
            .map_err(|message| DiffusionError::Placement { index: j, message })
    };
    // The chain ends are free boundary data: they sit one minimal loop away
    // from their neighbours with the planned end slopes realized exactly.
    let first = place(1, sigma(0))?;
    let t1 = first.0 + TAU * ((min_len + PI) / TAU).ceil();
    let q1 = first.1 + TAU * (sigma(0) * t1 / TAU).round();
    let mut apexes = vec![(t1 - min_len, q1 - sigma(0) * min_len), (t1, q1)];
    for j in 2..n_loops {
        let prev = apexes[j - 1];
        let target = sigma(j - 1);
        let mut realized = target;
        let mut placed = prev;
        for _pass in 0..2 {
            let angles = place(j, realized)?;
            placed = choose_lift(prev, angles, target, min_len, mu, opts);
            realized = (placed.1 - prev.1) / (placed.0 - prev.0);
        }
        apexes.push(placed);
    }
    let last = apexes[n_loops - 1];
    apexes.push((last.0 + min_len, last.1 + sigma(n_loops - 1) * min_len));
    Ok(apexes)
}

/// Re-minimizes apex `j` with its neighbours fixed.
fn relax_apex(
    apexes: &[(f64, f64)],
    j: usize,
    s: &SystemParams,
    opts: &DiffusionOptions,
) -> Result<(f64, f64), DiffusionError> {
    let outer = OuterBoundary {
        t_prev: apexes[j - 1].0,
        rotor_prev: apexes[j - 1].1,
        t_next: apexes[j + 1].0,
        rotor_next: apexes[j + 1].1,
        q_prev: -PI + TAU * (j - 1) as f64,
    };
    let f = |x: [f64; 2]| glue_action(x[0], x[1], &outer, s, &opts.transition.solver);
    let x0 = [apexes[j].0, apexes[j].1];
    let f0 = f(x0)?;
    let t = &opts.transition;
    let r = bfgs_2d(&f, x0, f0, t.fd_step, t.grad_tol, t.max_iter, None)?;
    Ok((r.x[0], r.x[1]))
}

/// Loops between consecutive apexes, joined and relaxed as one curve.
fn assemble_and_relax(
    apexes: &[(f64, f64)],
    s: &SystemParams,
    opts: &DiffusionOptions,
) -> Result<DiscreteCurve, DiffusionError> {
    let parts = (0..apexes.len() - 1)
        .into_par_iter()
        .map(|j| {
            let b = BoundarySpec {
                t0: apexes[j].0,
                t1: apexes[j + 1].0,
                rotor0: apexes[j].1,
                rotor1: apexes[j + 1].1,
                qa: -PI + TAU * j as f64,
                qb: PI + TAU * j as f64,
            };
            solve_loop_at_level(&b, s, &opts.transition.solver).map(|(c, _)| c)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut curve = DiscreteCurve::concat(&parts)?;
    let mut solver = opts.transition.solver;
    solver.max_iter = solver.max_iter.max(400);
    minimize(&mut curve, s, &[], &solver)?;
    Ok(curve)
}

/// Mean rotor speeds of the first and last loop.
fn velocity_ends(curve: &DiscreteCurve, apexes: &[(f64, f64)]) -> (f64, f64) {
    let n = apexes.len();
    let mean = |a: f64, b: f64| {
        let (i, j) = (curve.node_at(a).unwrap_or(0), curve.node_at(b).unwrap_or(curve.len() - 1));
        (curve.rotor(j) - curve.rotor(i)) / (curve.times[j] - curve.times[i])
    };
    (mean(apexes[0].0, apexes[1].0), mean(apexes[n - 2].0, apexes[n - 1].0))
}

/// Builds the diffusing orbit for `plan` (frequencies increasing by at most
/// `μ` per step).
pub fn build_diffusing_orbit(
    plan: &[f64],
    s: &SystemParams,
    opts: &DiffusionOptions,
) -> Result<(DiscreteCurve, DiffusionReport), DiffusionError> {
    let started = Instant::now();
    if plan.is_empty() {
        return Err(DiffusionError::Plan("empty plan".into()));
    }
    for w in plan.windows(2) {
        if !(w[1] >= w[0] && w[1] - w[0] <= s.mu * (1.0 + 1e-9)) {
            return Err(DiffusionError::Plan(format!("step {} -> {} exceeds mu", w[0], w[1])));
        }
    }
    if !plan.iter().all(|&w| w > 0.5 && w < 2.5) {
        return Err(DiffusionError::Plan("frequencies must lie in (1/2, 5/2)".into()));
    }
    let k = plan.len() - 1;
    let mut report = DiffusionReport {
        mu: s.mu,
        omega_chain: plan.to_vec(),
        apexes: Vec::new(),
        junctions: Vec::new(),
        transitions: Vec::new(),
        n_nodes: 0,
        qdot_start: f64::NAN,
        qdot_end: f64::NAN,
        t_d: None,
        residual_max: f64::NAN,
        wall_time: 0.0,
    };

    let apexes = if s.mu == 0.0 {
        if k > 0 {
            return Err(DiffusionError::Plan("mu = 0 admits only a single frequency".into()));
        }
        let d = opts.unperturbed_loop;
        (0..3).map(|j| (PI + d * j as f64, PI + plan[0] * d * j as f64)).collect()
    } else {
        let certs = plan
            .par_iter()
            .map(|&w| certify_at(w, &s.perturbation, &opts.box_policy, opts.refinement_tol, &opts.transition.melnikov))
            .collect::<Result<Vec<_>, _>>()?;
        let mut apexes = plan_apexes(plan, s, &certs, opts)?;
        report.apexes = apexes.clone();
        for (i, cert) in certs.iter().enumerate().take(k) {
            let (lo, mid, hi) = (2 * i + 1, 2 * i + 2, 2 * i + 3);
            let outer = OuterBoundary {
                t_prev: apexes[lo].0,
                rotor_prev: apexes[lo].1,
                t_next: apexes[hi].0,
                rotor_next: apexes[hi].1,
                q_prev: -PI + TAU * lo as f64,
            };
            match find_transition(&outer, plan[i], plan[i + 1], s, cert, &opts.transition, Some(apexes[mid])) {
                Ok((rec, _)) => {
                    apexes[mid] = (rec.junction_t, rec.junction_q);
                    report.junctions.push(apexes[mid]);
                    report.transitions.push(rec);
                }
                Err(source) => {
                    report.apexes = apexes.clone();
                    report.wall_time = started.elapsed().as_secs_f64();
                    return Err(DiffusionError::Transition {
                        index: i,
                        source,
                        partial: Box::new(report),
                    });
                }
            }
        }
        for j in (1..apexes.len() - 1).step_by(2) {
            apexes[j] = relax_apex(&apexes, j, s, opts)?;
        }
        apexes
    };
    let curve = assemble_and_relax(&apexes, s, opts)?;
    let (qs, qe) = velocity_ends(&curve, &apexes);
    report.apexes = apexes;
    report.n_nodes = curve.len();
    report.qdot_start = qs;
    report.qdot_end = qe;
    report.t_d = measure_td_with(&curve, opts.qdot_low, opts.qdot_high).ok();
    report.residual_max = el_residuals(&curve, s).into_iter().fold(0.0, f64::max);
    report.wall_time = started.elapsed().as_secs_f64();
    Ok((curve, report))
}

/// Drift time between `Q̇ ≤ 1` and `Q̇ ≥ 2`.
pub fn measure_td(curve: &DiscreteCurve) -> Result<f64, DiffusionError> {
    measure_td_with(curve, 1.0, 2.0)
}

/// `(first time Q̇ ≥ high) − (last earlier time Q̇ ≤ low)`, with crossings
/// interpolated linearly between segment midpoints.
pub fn measure_td_with(curve: &DiscreteCurve, low: f64, high: f64) -> Result<f64, DiffusionError> {
    let v = curve.segment_velocities();
    let cross = |i: usize, level: f64| {
        let (a, b) = (v[i], v[i + 1]);
        let u = (level - a.2) / (b.2 - a.2);
        a.0 + u * (b.0 - a.0)
    };
    let hi = if v[0].2 >= high {
        return Err(DiffusionError::ThresholdsNotCrossed("starts above the upper threshold".into()));
    } else {
        (0..v.len() - 1)
            .find(|&i| v[i].2 < high && v[i + 1].2 >= high)
            .ok_or_else(|| DiffusionError::ThresholdsNotCrossed(format!("Qdot never reaches {high}")))?
    };
    let t_hi = cross(hi, high);
    let lo = (0..=hi)
        .rev()
        .find(|&i| v[i].2 <= low)
        .ok_or_else(|| DiffusionError::ThresholdsNotCrossed(format!("Qdot never at or below {low} before {t_hi}")))?;
    let t_lo = if lo + 1 < v.len() && v[lo + 1].2 > low { cross(lo, low) } else { v[lo].0 };
    Ok(t_hi - t_lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub mu: f64,
    pub t_d: Option<f64>,
    /// Local exponent against the previous row.
    pub p_partial: Option<f64>,
    pub status: String,
    pub report: Option<DiffusionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    /// Fitted exponent `p` in `t_d ∝ μ^{−p}`.
    pub p: f64,
    pub log_intercept: f64,
    /// `t_d μ²` at the largest μ.
    pub c_fit: f64,
}

impl ScalingTable {
    /// Columns `mu,t_d,p_partial,status`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        use crate::io::fmt_f64;
        let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        crate::io::write_table(
            out,
            &["mu", "t_d", "p_partial", "status"],
            self.rows
                .iter()
                .map(|r| vec![fmt_f64(r.mu), opt(r.t_d), opt(r.p_partial), r.status.clone()]),
        )
    }
}

/// Least-squares fit of `log t_d = c − p log μ`. Returns `(p, c)`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Result<(f64, f64), DiffusionError> {
    let mut mus: Vec<f64> = points.iter().map(|p| p.0).collect();
    mus.sort_by(f64::total_cmp);
    mus.dedup();
    if mus.len() < 3 {
        return Err(DiffusionError::SingularFit);
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(m, t)| ((1.0 / m).ln(), t.ln())).collect();
    crate::transition::linear_fit(&logs).ok_or(DiffusionError::SingularFit)
}

/// Runs one diffusing orbit per μ over `[omega_start, omega_end]`.
pub fn scaling_study(
    mu_list: &[f64],
    omega_span: (f64, f64),
    base: &SystemParams,
    opts: &DiffusionOptions,
) -> Result<ScalingTable, DiffusionError> {
    let mut distinct = mu_list.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(DiffusionError::SingularFit);
    }
    let mut rows: Vec<ScalingRow> = mu_list
        .par_iter()
        .map(|&mu| {
            let s = base.with_mu(mu);
            let run = plan_chain(omega_span.0, omega_span.1, mu).and_then(|plan| build_diffusing_orbit(&plan, &s, opts));
            match run {
                Ok((_, rep)) => ScalingRow {
                    mu,
                    t_d: rep.t_d,
                    p_partial: None,
                    status: if rep.t_d.is_some() { "ok".into() } else { "no_crossing".into() },
                    report: Some(rep),
                },
                Err(e) => ScalingRow {
                    mu,
                    t_d: None,
                    p_partial: None,
                    status: format!("failed: {e}"),
                    report: None,
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| b.mu.total_cmp(&a.mu));
    for i in 1..rows.len() {
        if let (Some(a), Some(b)) = (rows[i - 1].t_d, rows[i].t_d) {
            rows[i].p_partial = Some((b / a).ln() / (rows[i - 1].mu / rows[i].mu).ln());
        }
    }
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.t_d.map(|t| (r.mu, t))).collect();
    let (p, c) = fit_exponent(&pts)?;
    let c_fit = rows
        .iter()
        .find_map(|r| r.t_d.map(|t| t * r.mu * r.mu))
        .ok_or(DiffusionError::SingularFit)?;
    Ok(ScalingTable {
        rows,
        p,
        log_intercept: c,
        c_fit,
    })
}
