//! Adaptive Dormand–Prince 8(5,3) integration of the equations of motion.
//!
//! Integration is a diagnostic: constructed orbits are validated by their
//! discrete Euler–Lagrange residuals, and the integrator is used for
//! conservation checks, short-horizon consistency checks and for sampling
//! velocity crossings through dense output.

use crate::dop853_tableau as tab;
use crate::model::{eom_rhs, PhasePoint, SystemParams};
use std::io::Write;
use thiserror::Error;

pub use crate::model::{pendulum_energy, rotor_energy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegratorError {
    #[error("tolerance must be positive and finite, got {0}")]
    InvalidTolerance(f64),
    #[error("integration span is empty (t_end == start.t == {0})")]
    EmptySpan(f64),
    #[error("step size underflow at t = {t} (h = {h:e}); possible blow-up")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("step budget of {0} exhausted")]
    TooManySteps(usize),
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const ERROR_EXPONENT: f64 = -1.0 / 8.0;
const DEFAULT_MAX_STEPS: usize = 50_000_000;

type State = [f64; 4];

#[inline]
fn rhs(t: f64, y: &State, s: &SystemParams) -> State {
    eom_rhs(&PhasePoint::from_state(t, *y), s).as_array()
}

#[inline]
fn axpy(y: &State, h: f64, k: &[State], coeff: &[f64]) -> State {
    let mut out = *y;
    for i in 0..4 {
        let mut acc = 0.0;
        for (kj, cj) in k.iter().zip(coeff) {
            acc += cj * kj[i];
        }
        out[i] += h * acc;
    }
    out
}

/// Seventh-order interpolant over one accepted step.
#[derive(Debug, Clone)]
struct DenseSegment {
    t_old: f64,
    h: f64,
    y_old: State,
    f: [State; tab::INTERPOLATOR_POWER],
}

impl DenseSegment {
    fn eval(&self, t: f64) -> State {
        let x = (t - self.t_old) / self.h;
        let mut y = [0.0; 4];
        for (i, fi) in self.f.iter().rev().enumerate() {
            for k in 0..4 {
                y[k] += fi[k];
                y[k] *= if i % 2 == 0 { x } else { 1.0 - x };
            }
        }
        for k in 0..4 {
            y[k] += self.y_old[k];
        }
        y
    }
}

/// Accepted integration steps with dense output between them.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// One sample per accepted step, including the start. Times are strictly
    /// monotone in the direction of integration.
    pub samples: Vec<PhasePoint>,
    pub rtol: f64,
    pub atol: f64,
    segments: Vec<DenseSegment>,
}

impl Trajectory {
    pub fn start(&self) -> &PhasePoint {
        &self.samples[0]
    }

    pub fn end(&self) -> &PhasePoint {
        self.samples.last().expect("trajectory has at least one sample")
    }

    /// Time span as `(min, max)`.
    pub fn span(&self) -> (f64, f64) {
        let (a, b) = (self.start().t, self.end().t);
        (a.min(b), a.max(b))
    }

    /// Dense-output state at `t`, or `None` outside the integrated span.
    pub fn sample_at(&self, t: f64) -> Option<PhasePoint> {
        let (lo, hi) = self.span();
        if !(t >= lo && t <= hi) {
            return None;
        }
        if self.segments.is_empty() {
            return Some(*self.start());
        }
        let forward = self.end().t > self.start().t;
        // Segments are ordered by t_old in the integration direction.
        let idx = self.segments.partition_point(|seg| {
            let t_new = seg.t_old + seg.h;
            if forward {
                t_new < t
            } else {
                t_new > t
            }
        });
        let seg = &self.segments[idx.min(self.segments.len() - 1)];
        Some(PhasePoint::from_state(t, seg.eval(t)))
    }

    pub fn sample_times(&self, times: &[f64]) -> Vec<Option<PhasePoint>> {
        times.iter().map(|&t| self.sample_at(t)).collect()
    }

    /// First time at which `component(p)` crosses `level` upward, located by
    /// linear interpolation between accepted steps.
    pub fn first_upcrossing(&self, level: f64, component: impl Fn(&PhasePoint) -> f64) -> Option<f64> {
        self.samples.windows(2).find_map(|w| {
            let (a, b) = (component(&w[0]), component(&w[1]));
            if a < level && b >= level {
                let frac = (level - a) / (b - a);
                Some(w[0].t + frac * (w[1].t - w[0].t))
            } else {
                None
            }
        })
    }

    /// Writes `t,q,qdot,Q,Qdot` rows for every accepted step.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        crate::io::write_phase_points(out, &self.samples)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Optional cap on |h|.
    pub max_step: f64,
}

impl IntegratorOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            max_steps: DEFAULT_MAX_STEPS,
            max_step: f64::INFINITY,
        }
    }
}

/// Integrates from `start` to `t_end` (either direction) with relative and
/// absolute tolerance `tol`.
pub fn integrate(
    start: PhasePoint,
    t_end: f64,
    s: &SystemParams,
    tol: f64,
) -> Result<Trajectory, IntegratorError> {
    integrate_with(start, t_end, s, IntegratorOptions::with_tol(tol))
}

fn error_norm(k: &[State; tab::N_STAGES + 1], h: f64, scale: &State) -> f64 {
    let mut e5 = 0.0;
    let mut e3 = 0.0;
    for i in 0..4 {
        let mut a5 = 0.0;
        let mut a3 = 0.0;
        for (j, kj) in k.iter().enumerate() {
            a5 += tab::E5[j] * kj[i];
            a3 += tab::E3[j] * kj[i];
        }
        e5 += (a5 / scale[i]).powi(2);
        e3 += (a3 / scale[i]).powi(2);
    }
    if e5 == 0.0 && e3 == 0.0 {
        return 0.0;
    }
    h.abs() * e5 / ((e5 + 0.01 * e3) * 4.0).sqrt()
}

/// One DOP853 step. Returns the new state and the 13 stage derivatives,
/// the last being `f(t + h, y_new)`.
fn rk_step(
    t: f64,
    y: &State,
    f0: &State,
    h: f64,
    s: &SystemParams,
) -> (State, [State; tab::N_STAGES + 1]) {
    let mut k = [[0.0; 4]; tab::N_STAGES + 1];
    k[0] = *f0;
    for st in 1..tab::N_STAGES {
        let yi = axpy(y, h, &k[..st], &tab::A[st][..st]);
        k[st] = rhs(t + tab::C[st] * h, &yi, s);
    }
    let y_new = axpy(y, h, &k[..tab::N_STAGES], &tab::B);
    k[tab::N_STAGES] = rhs(t + h, &y_new, s);
    (y_new, k)
}

fn dense_segment(
    t: f64,
    y: &State,
    y_new: &State,
    h: f64,
    k: &[State; tab::N_STAGES + 1],
    s: &SystemParams,
) -> DenseSegment {
    let mut kx = [[0.0; 4]; tab::N_STAGES_EXTENDED];
    kx[..=tab::N_STAGES].copy_from_slice(k);
    for st in tab::N_STAGES + 1..tab::N_STAGES_EXTENDED {
        let yi = axpy(y, h, &kx[..st], &tab::A[st][..st]);
        kx[st] = rhs(t + tab::C[st] * h, &yi, s);
    }
    let f_old = k[0];
    let f_new = k[tab::N_STAGES];
    let mut f = [[0.0; 4]; tab::INTERPOLATOR_POWER];
    for i in 0..4 {
        let dy = y_new[i] - y[i];
        f[0][i] = dy;
        f[1][i] = h * f_old[i] - dy;
        f[2][i] = 2.0 * dy - h * (f_new[i] + f_old[i]);
        for (r, drow) in tab::D.iter().enumerate() {
            let mut acc = 0.0;
            for (j, kj) in kx.iter().enumerate() {
                acc += drow[j] * kj[i];
            }
            f[3 + r][i] = h * acc;
        }
    }
    DenseSegment {
        t_old: t,
        h,
        y_old: *y,
        f,
    }
}

fn initial_step(t: f64, y: &State, f0: &State, dir: f64, opts: &IntegratorOptions, s: &SystemParams) -> f64 {
    let scale: Vec<f64> = y.iter().map(|v| opts.atol + v.abs() * opts.rtol).collect();
    let norm = |v: &State| (v.iter().zip(&scale).map(|(a, b)| (a / b).powi(2)).sum::<f64>() / 4.0).sqrt();
    let d0 = norm(y);
    let d1 = norm(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = axpy(y, dir * h0, &[*f0], &[1.0]);
    let f1 = rhs(t + dir * h0, &y1, s);
    let mut diff = [0.0; 4];
    for i in 0..4 {
        diff[i] = f1[i] - f0[i];
    }
    let d2 = norm(&diff) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 8.0)
    };
    (100.0 * h0).min(h1).min(opts.max_step)
}

pub fn integrate_with(
    start: PhasePoint,
    t_end: f64,
    s: &SystemParams,
    opts: IntegratorOptions,
) -> Result<Trajectory, IntegratorError> {
    for tol in [opts.rtol, opts.atol] {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(IntegratorError::InvalidTolerance(tol));
        }
    }
    if t_end == start.t {
        return Err(IntegratorError::EmptySpan(t_end));
    }
    if !start.is_finite() {
        return Err(IntegratorError::NonFinite(start.t));
    }
    let dir = (t_end - start.t).signum();
    let mut t = start.t;
    let mut y = start.state();
    let mut f = rhs(t, &y, s);
    let mut h_abs = initial_step(t, &y, &f, dir, &opts, s);
    let mut samples = vec![start];
    let mut segments = Vec::new();
    let mut steps = 0usize;

    while dir * (t_end - t) > 0.0 {
        if steps >= opts.max_steps {
            return Err(IntegratorError::TooManySteps(opts.max_steps));
        }
        let min_step = 10.0 * (f64::EPSILON * t.abs()).max(f64::MIN_POSITIVE);
        h_abs = h_abs.min(opts.max_step);
        let mut rejected = false;
        loop {
            if h_abs < min_step {
                return Err(IntegratorError::StepUnderflow { t, h: h_abs });
            }
            let mut h = dir * h_abs;
            let mut t_new = t + h;
            if dir * (t_new - t_end) > 0.0 {
                t_new = t_end;
            }
            h = t_new - t;
            let (y_new, k) = rk_step(t, &y, &f, h, s);
            if !y_new.iter().all(|v| v.is_finite()) {
                h_abs *= MIN_FACTOR;
                rejected = true;
                continue;
            }
            let mut scale = [0.0; 4];
            for i in 0..4 {
                scale[i] = opts.atol + y[i].abs().max(y_new[i].abs()) * opts.rtol;
            }
            let err = error_norm(&k, h, &scale);
            if err < 1.0 {
                let mut factor = if err == 0.0 {
                    MAX_FACTOR
                } else {
                    (SAFETY * err.powf(ERROR_EXPONENT)).min(MAX_FACTOR)
                };
                if rejected {
                    factor = factor.min(1.0);
                }
                segments.push(dense_segment(t, &y, &y_new, h, &k, s));
                t = t_new;
                y = y_new;
                f = k[tab::N_STAGES];
                h_abs = h.abs() * factor;
                samples.push(PhasePoint::from_state(t, y));
                break;
            }
            h_abs = h.abs() * (SAFETY * err.powf(ERROR_EXPONENT)).max(MIN_FACTOR);
            rejected = true;
        }
        steps += 1;
    }
    Ok(Trajectory {
        samples,
        rtol: opts.rtol,
        atol: opts.atol,
        segments,
    })
}

/// `n` fixed steps of size `h` with the eighth-order solution. Used for
/// order verification.
pub fn integrate_fixed(start: PhasePoint, h: f64, n: usize, s: &SystemParams) -> PhasePoint {
    let mut t = start.t;
    let mut y = start.state();
    let mut f = rhs(t, &y, s);
    for i in 0..n {
        let (y_new, k) = rk_step(t, &y, &f, h, s);
        y = y_new;
        f = k[tab::N_STAGES];
        t = start.t + (i + 1) as f64 * h;
    }
    PhasePoint::from_state(t, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{separatrix_state, PerturbationSpec, SeparatrixParams};
    use std::f64::consts::PI;

    fn free() -> SystemParams {
        SystemParams::new(0.0, 10.0, PerturbationSpec::arnold())
    }

    #[test]
    fn tableau_consistency() {
        for st in 1..tab::N_STAGES_EXTENDED {
            let row: f64 = tab::A[st][..st].iter().sum();
            assert!((row - tab::C[st]).abs() < 1e-13, "stage {st}");
        }
        assert!((tab::B.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(tab::E5.iter().sum::<f64>().abs() < 1e-14);
    }

    #[test]
    fn torus_is_invariant() {
        let p = PhasePoint::new(0.0, 0.0, 0.0, 0.4, 1.3);
        let tr = integrate(p, 100.0, &free(), 1e-12).unwrap();
        for s in &tr.samples {
            assert!(s.q.abs() < 1e-14);
            assert!((s.rotor - 0.4 - 1.3 * s.t).abs() < 1e-9);
        }
    }

    #[test]
    fn separatrix_reproduced() {
        let sp = SeparatrixParams {
            omega: 0.8,
            t0: 0.0,
            rotor0: 0.0,
        };
        let tr = integrate(separatrix_state(&sp, 0.0), 10.0, &free(), 1e-12).unwrap();
        for i in 0..=1000 {
            let t = 0.01 * i as f64;
            let a = tr.sample_at(t).unwrap();
            let b = separatrix_state(&sp, t);
            assert!((a.q - b.q).abs() < 1e-7 && (a.qdot - b.qdot).abs() < 1e-7, "t={t}");
        }
    }

    #[test]
    fn backward_integration_and_reversibility() {
        let s = SystemParams::new(0.05, 10.0, PerturbationSpec::arnold());
        let p = PhasePoint::new(0.3, 0.4, 1.2, -0.2, 1.1);
        let tol = 1e-11;
        let fwd = integrate(p, 8.0, &s, tol).unwrap();
        let back = integrate(*fwd.end(), 0.3, &s, tol).unwrap();
        let e = back.end();
        for (a, b) in e.state().iter().zip(p.state()) {
            assert!((a - b).abs() < 10.0 * tol, "{a} vs {b}");
        }
        assert!(back.sample_at(5.0).is_some());
    }

    #[test]
    fn dense_output_matches_node_values() {
        let s = SystemParams::new(0.1, 10.0, PerturbationSpec::arnold());
        let tr = integrate(PhasePoint::new(0.0, 1.0, 0.5, 0.0, 1.0), 20.0, &s, 1e-10).unwrap();
        for w in tr.samples.windows(2) {
            let mid = 0.5 * (w[0].t + w[1].t);
            let fine = integrate(w[0], mid, &s, 1e-13).unwrap();
            let a = tr.sample_at(mid).unwrap();
            assert!((a.q - fine.end().q).abs() < 1e-8);
            let at_node = tr.sample_at(w[1].t).unwrap();
            assert!((at_node.q - w[1].q).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_step_order_is_eight() {
        let sp = SeparatrixParams {
            omega: 1.0,
            t0: 0.0,
            rotor0: 0.0,
        };
        let start = separatrix_state(&sp, -2.0);
        let err = |n: usize| {
            let end = integrate_fixed(start, 4.0 / n as f64, n, &free());
            (end.q - separatrix_state(&sp, 2.0).q).abs()
        };
        let (e1, e2) = (err(16), err(32));
        let order = (e1 / e2).log2();
        assert!(order > 7.5, "observed order {order} ({e1:e}, {e2:e})");
    }

    #[test]
    fn rejects_bad_input() {
        let p = PhasePoint::new(0.0, PI, 0.0, 0.0, 0.0);
        assert!(matches!(integrate(p, 0.0, &free(), 1e-8), Err(IntegratorError::EmptySpan(_))));
        assert!(matches!(integrate(p, 1.0, &free(), 0.0), Err(IntegratorError::InvalidTolerance(_))));
    }

    #[test]
    fn upcrossing_located() {
        let s = free();
        let tr = integrate(PhasePoint::new(0.0, 0.0, 0.0, 0.0, 1.0), 10.0, &s, 1e-10).unwrap();
        let t = tr.first_upcrossing(3.0, |p| p.rotor).unwrap();
        assert!((t - 3.0).abs() < 1e-6);
    }
}
