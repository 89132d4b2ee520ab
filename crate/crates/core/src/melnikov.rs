//! Perturbation action along unperturbed separatrices and certification of
//! its non-degenerate minimum.
//!
//! For a separatrix with apex time `T₀` and rotor phase `Q₀` on the torus of
//! frequency `ω`,
//!
//! ```text
//! A_ω(Q₀, T₀) = ∫ (2 / cosh² s) · f(Q₀ + ω s, q₀(s), T₀ + s) ds
//! ```
//!
//! truncated to `|s| ≤ L`. The integrand decays like `8 e^{−2|s|}`.

use crate::model::{separatrix_angle, separatrix_weight, PerturbationSpec};
use crate::quadrature::{integrate_adaptive, QuadError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use thiserror::Error;

const TAU: f64 = 2.0 * PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MelnikovError {
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("CONDITION1_VIOLATED: gap {gap:e} at omega = {omega}")]
    Condition1Violated { omega: f64, gap: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelnikovOptions {
    /// Truncation half-length `L`.
    pub trunc: f64,
    pub quad_tol: f64,
}

impl Default for MelnikovOptions {
    fn default() -> Self {
        Self {
            trunc: 20.0,
            quad_tol: 1e-11,
        }
    }
}

impl MelnikovOptions {
    fn validate(&self) -> Result<(), MelnikovError> {
        if !(self.trunc > 0.0 && self.trunc.is_finite()) {
            return Err(MelnikovError::InvalidArgument(format!("trunc must be > 0, got {}", self.trunc)));
        }
        if !(self.quad_tol > 0.0) {
            return Err(MelnikovError::InvalidArgument(format!(
                "quad_tol must be > 0, got {}",
                self.quad_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelnikovValue {
    pub value: f64,
    pub quad_error: f64,
    /// Bound on the neglected tails `|s| > L`.
    pub truncation_bound: f64,
}

/// `A_ω(Q₀, T₀)` by adaptive quadrature.
pub fn melnikov_value(
    omega: f64,
    rotor0: f64,
    t0: f64,
    f: &PerturbationSpec,
    opts: &MelnikovOptions,
) -> Result<MelnikovValue, MelnikovError> {
    opts.validate()?;
    let integrand = |s: f64| {
        [separatrix_weight(s) * f.value(rotor0 + omega * s, separatrix_angle(s), t0 + s)]
    };
    let r = integrate_adaptive(integrand, -opts.trunc, opts.trunc, opts.quad_tol, 0.0, 8, 2000)?;
    Ok(MelnikovValue {
        value: r.value[0],
        quad_error: r.error,
        truncation_bound: 8.0 * (-2.0 * opts.trunc).exp() * f.sup_norm_bound(),
    })
}

/// Value, gradient and Hessian of `A_ω` in `(Q₀, T₀)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MelnikovJet {
    pub value: f64,
    /// `(∂/∂Q₀, ∂/∂T₀)`.
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

pub fn melnikov_jet(
    omega: f64,
    rotor0: f64,
    t0: f64,
    f: &PerturbationSpec,
    opts: &MelnikovOptions,
) -> Result<MelnikovJet, MelnikovError> {
    opts.validate()?;
    let integrand = |s: f64| {
        let w = separatrix_weight(s);
        let j = f.jet(rotor0 + omega * s, separatrix_angle(s), t0 + s);
        [
            w * j.f,
            w * j.d_rotor,
            w * j.d_time,
            w * j.d_rotor_rotor,
            w * j.d_rotor_time,
            w * j.d_time_time,
        ]
    };
    let r = integrate_adaptive(integrand, -opts.trunc, opts.trunc, opts.quad_tol, 0.0, 8, 2000)?;
    let v = r.value;
    Ok(MelnikovJet {
        value: v[0],
        grad: [v[1], v[2]],
        hess: [[v[3], v[4]], [v[4], v[5]]],
    })
}

/// `A_ω` sampled on the fundamental domain `[0, 2π)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelnikovField {
    pub omega: f64,
    pub n_t: usize,
    pub n_q: usize,
    /// Row-major: `grid[i * n_q + j]` is the value at `T₀ = 2πi/n_t`, `Q₀ = 2πj/n_q`.
    pub grid: Vec<f64>,
}

impl MelnikovField {
    pub fn t_at(&self, i: usize) -> f64 {
        TAU * i as f64 / self.n_t as f64
    }

    pub fn q_at(&self, j: usize) -> f64 {
        TAU * j as f64 / self.n_q as f64
    }

    /// Value at grid indices, wrapping periodically.
    pub fn at(&self, i: isize, j: isize) -> f64 {
        let i = i.rem_euclid(self.n_t as isize) as usize;
        let j = j.rem_euclid(self.n_q as isize) as usize;
        self.grid[i * self.n_q + j]
    }

    /// `(i, j, value)` of the smallest sample.
    pub fn argmin(&self) -> (usize, usize, f64) {
        let (k, v) = self
            .grid
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("field is non-empty");
        (k / self.n_q, k % self.n_q, *v)
    }

    pub fn min(&self) -> f64 {
        self.grid.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Columns `T0,Q0,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        use crate::io::fmt_f64;
        let rows = (0..self.n_t).flat_map(|i| {
            (0..self.n_q).map(move |j| vec![fmt_f64(self.t_at(i)), fmt_f64(self.q_at(j)), fmt_f64(self.grid[i * self.n_q + j])])
        });
        crate::io::write_table(out, &["T0", "Q0", "value"], rows)
    }
}

pub fn melnikov_field(
    omega: f64,
    f: &PerturbationSpec,
    n_t: usize,
    n_q: usize,
    opts: &MelnikovOptions,
) -> Result<MelnikovField, MelnikovError> {
    if n_t < 8 || n_q < 8 {
        return Err(MelnikovError::InvalidArgument(format!(
            "field resolution must be at least 8x8, got {n_t}x{n_q}"
        )));
    }
    opts.validate()?;
    let grid = (0..n_t * n_q)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n_q, k % n_q);
            melnikov_value(omega, TAU * j as f64 / n_q as f64, TAU * i as f64 / n_t as f64, f, opts)
                .map(|v| v.value)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MelnikovField { omega, n_t, n_q, grid })
}

/// How the certificate box is chosen around the minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoxPolicy {
    /// Initial half-width in `T₀`.
    pub half_width_t: f64,
    /// Initial half-width in `Q₀`.
    pub half_width_q: f64,
    /// Factor applied to both half-widths when the gap is too small.
    pub shrink: f64,
    pub max_shrinks: usize,
    /// Smallest acceptable gap.
    pub min_gap: f64,
    /// Number of boundary samples (rounded up to a multiple of 4).
    pub boundary_samples: usize,
    /// Resolution of the coarse argmin scan.
    pub scan: usize,
}

impl Default for BoxPolicy {
    fn default() -> Self {
        Self {
            half_width_t: PI / 2.0,
            half_width_q: PI / 2.0,
            shrink: 0.75,
            max_shrinks: 8,
            min_gap: 0.0,
            boundary_samples: 256,
            scan: 24,
        }
    }
}

/// Certified non-degenerate minimum of `A_ω` inside a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition1Certificate {
    pub omega: f64,
    /// Minimizer `T_ω` in `[0, 2π)`.
    pub argmin_t: f64,
    /// Minimizer `Q_ω` in `[0, 2π)`.
    pub argmin_q: f64,
    pub half_width_t: f64,
    pub half_width_q: f64,
    pub min_value: f64,
    pub boundary_min: f64,
    pub gap: f64,
}

impl Condition1Certificate {
    /// Points on the box boundary, `per_edge` per side, walking around the
    /// rectangle. Each edge includes its starting corner and its midpoint
    /// when `per_edge` is even.
    pub fn boundary_points(&self, per_edge: usize) -> Vec<(f64, f64)> {
        box_boundary(self.argmin_t, self.argmin_q, self.half_width_t, self.half_width_q, per_edge)
    }

    pub fn contains(&self, t0: f64, rotor0: f64) -> bool {
        (t0 - self.argmin_t).abs() < self.half_width_t && (rotor0 - self.argmin_q).abs() < self.half_width_q
    }
}

/// `(T, Q)` samples around the rectangle with the given center and
/// half-widths.
pub fn box_boundary(ct: f64, cq: f64, ht: f64, hq: f64, per_edge: usize) -> Vec<(f64, f64)> {
    let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let mut out = Vec::with_capacity(4 * per_edge);
    for e in 0..4 {
        let (a, b) = (corners[e], corners[(e + 1) % 4]);
        for k in 0..per_edge {
            let u = k as f64 / per_edge as f64;
            let x = a.0 + u * (b.0 - a.0);
            let y = a.1 + u * (b.1 - a.1);
            out.push((ct + ht * x, cq + hq * y));
        }
    }
    out
}

/// Locates the global minimum by a coarse scan followed by Newton steps on
/// the jet. Returns `(T, Q, value)` with angles reduced to `[0, 2π)`.
pub fn locate_minimum(
    omega: f64,
    f: &PerturbationSpec,
    scan: usize,
    refinement_tol: f64,
    opts: &MelnikovOptions,
) -> Result<(f64, f64, f64), MelnikovError> {
    let field = melnikov_field(omega, f, scan.max(8), scan.max(8), opts)?;
    let (i, j, v0) = field.argmin();
    let cell = TAU / scan.max(8) as f64;
    let (mut t, mut q, mut v) = (field.t_at(i), field.q_at(j), v0);
    for _ in 0..60 {
        let jet = melnikov_jet(omega, q, t, f, opts)?;
        let g = [jet.grad[1], jet.grad[0]];
        let gnorm = g[0].hypot(g[1]);
        if gnorm <= refinement_tol {
            break;
        }
        let h = [[jet.hess[1][1], jet.hess[0][1]], [jet.hess[1][0], jet.hess[0][0]]];
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let mut step = if h[0][0] > 0.0 && det > 0.0 {
            [
                -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                -(-h[1][0] * g[0] + h[0][0] * g[1]) / det,
            ]
        } else {
            [-g[0] / gnorm * cell * 0.5, -g[1] / gnorm * cell * 0.5]
        };
        let len = step[0].hypot(step[1]);
        if len > cell {
            step = [step[0] * cell / len, step[1] * cell / len];
        }
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..30 {
            let (tn, qn) = (t + alpha * step[0], q + alpha * step[1]);
            let vn = melnikov_value(omega, qn, tn, f, opts)?.value;
            if vn <= v {
                t = tn;
                q = qn;
                v = vn;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((t.rem_euclid(TAU), q.rem_euclid(TAU), v))
}

/// Certificate at a single frequency.
pub fn certify_at(
    omega: f64,
    f: &PerturbationSpec,
    policy: &BoxPolicy,
    refinement_tol: f64,
    opts: &MelnikovOptions,
) -> Result<Condition1Certificate, MelnikovError> {
    let (t, q, min_value) = locate_minimum(omega, f, policy.scan, refinement_tol, opts)?;
    let per_edge = policy.boundary_samples.div_ceil(4).max(2);
    let (mut ht, mut hq) = (policy.half_width_t, policy.half_width_q);
    let mut best_gap = f64::NEG_INFINITY;
    for attempt in 0..=policy.max_shrinks {
        let samples = box_boundary(t, q, ht, hq, per_edge)
            .into_par_iter()
            .map(|(bt, bq)| melnikov_value(omega, bq, bt, f, opts).map(|v| v.value))
            .collect::<Result<Vec<_>, _>>()?;
        let boundary_min = samples.into_iter().fold(f64::INFINITY, f64::min);
        let gap = boundary_min - min_value;
        best_gap = best_gap.max(gap);
        if gap > policy.min_gap && gap > 0.0 {
            return Ok(Condition1Certificate {
                omega,
                argmin_t: t,
                argmin_q: q,
                half_width_t: ht,
                half_width_q: hq,
                min_value,
                boundary_min,
                gap,
            });
        }
        if attempt < policy.max_shrinks {
            ht *= policy.shrink;
            hq *= policy.shrink;
        }
    }
    Err(MelnikovError::Condition1Violated { omega, gap: best_gap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition1Report {
    pub certificates: Vec<Condition1Certificate>,
    /// Smallest gap over all sampled frequencies.
    pub global_gap: f64,
    pub worst_omega: f64,
}

impl Condition1Report {
    /// Certificate at the sampled frequency nearest to `omega`.
    pub fn nearest(&self, omega: f64) -> Option<&Condition1Certificate> {
        self.certificates
            .iter()
            .min_by(|a, b| (a.omega - omega).abs().total_cmp(&(b.omega - omega).abs()))
    }
}

/// Frequencies `lo, lo + step, …, hi` (the last clamped to `hi`).
pub fn omega_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step - 1e-9).ceil().max(0.0) as usize;
    (0..=n).map(|k| if k == n { hi } else { lo + k as f64 * step }).collect()
}

/// Certificates over `omega_range` sampled every `omega_step`.
pub fn certify_condition1(
    omega_range: (f64, f64),
    omega_step: f64,
    f: &PerturbationSpec,
    policy: &BoxPolicy,
    refinement_tol: f64,
    opts: &MelnikovOptions,
) -> Result<Condition1Report, MelnikovError> {
    if !(omega_step > 0.0 && omega_step <= 0.05) {
        return Err(MelnikovError::InvalidArgument(format!(
            "omega_step must be in (0, 0.05], got {omega_step}"
        )));
    }
    if !(omega_range.0 <= omega_range.1) {
        return Err(MelnikovError::InvalidArgument("empty omega range".into()));
    }
    let certificates = omega_grid(omega_range.0, omega_range.1, omega_step)
        .into_par_iter()
        .map(|w| certify_at(w, f, policy, refinement_tol, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let worst = certificates
        .iter()
        .min_by(|a, b| a.gap.total_cmp(&b.gap))
        .expect("at least one frequency");
    Ok(Condition1Report {
        global_gap: worst.gap,
        worst_omega: worst.omega,
        certificates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Term;
    use crate::quadrature::integrate_scalar;

    fn opts() -> MelnikovOptions {
        MelnikovOptions::default()
    }

    /// Single-term closed form for `c·cos(kQ·Q₀ + kt·T₀ + φ)` with `kq = 0`:
    /// `c · 2πν/sinh(πν/2) · cos(kQ·Q₀ + kt·T₀ + φ)` with `ν = kQ·ω + kt`,
    /// continued by 4 at `ν = 0`.
    fn single_term_oracle(omega: f64, rotor0: f64, t0: f64, term: &Term) -> f64 {
        let nu = term.k_rotor as f64 * omega + term.k_time as f64;
        let amp = if nu.abs() < 1e-12 {
            4.0
        } else {
            2.0 * PI * nu / (PI * nu / 2.0).sinh()
        };
        term.c * amp * (term.k_rotor as f64 * rotor0 + term.k_time as f64 * t0 + term.phi).cos()
    }

    /// Brute-force composite Simpson rule with many panels; the integrand is
    /// analytic so the rule converges quickly.
    fn brute_force(omega: f64, rotor0: f64, t0: f64, term: &Term) -> f64 {
        let n = 200_000;
        let (a, b) = (-40.0f64, 40.0f64);
        let h = (b - a) / n as f64;
        let g = |s: f64| {
            separatrix_weight(s)
                * term.c
                * (term.k_rotor as f64 * (rotor0 + omega * s) + term.k_time as f64 * (t0 + s) + term.phi).cos()
        };
        let mut acc = crate::summation::NeumaierSum::new();
        for k in 0..=n {
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc.add(w * g(a + k as f64 * h));
        }
        acc.value() * h / 3.0
    }

    #[test]
    fn oracle_validated_by_brute_force() {
        for &(kq, kt) in &[(1, 0), (0, 1), (1, 1), (2, -1), (0, 0), (1, -1)] {
            for &omega in &[0.5, 1.0, 1.7, 2.5] {
                let term = Term::new(1.0, kq, 0, kt, 0.3);
                let a = single_term_oracle(omega, 0.7, -1.1, &term);
                let b = brute_force(omega, 0.7, -1.1, &term);
                assert!((a - b).abs() < 1e-12, "{kq} {kt} {omega}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn single_term_quadrature_matches_oracle() {
        for &(kq, kt) in &[(1, 0), (0, 1), (1, 1), (2, -1), (0, 0), (1, -1), (-1, 2)] {
            for k in 0..=20 {
                let omega = 0.5 + 0.1 * k as f64;
                let term = Term::new(0.8, kq, 0, kt, 1.9);
                let f = PerturbationSpec::new(vec![term]);
                let v = melnikov_value(omega, 2.2, 0.4, &f, &opts()).unwrap().value;
                assert!((v - single_term_oracle(omega, 2.2, 0.4, &term)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn arnold_reference_value() {
        let v = melnikov_value(1.0, PI, PI, &PerturbationSpec::arnold(), &opts()).unwrap();
        assert!((v.value - (-4.0 * PI / (PI / 2.0).sinh())).abs() < 1e-9);
        assert!((v.value + 5.4605).abs() < 1e-4);
        assert!(v.truncation_bound < 1e-16);
    }

    #[test]
    fn zero_perturbation_gives_zero() {
        let v = melnikov_value(1.3, 0.2, 0.1, &PerturbationSpec::zero(), &opts()).unwrap();
        assert_eq!(v.value, 0.0);
    }

    #[test]
    fn pendulum_dependent_terms_integrate() {
        // kq ≠ 0: check against a direct scalar integral.
        let term = Term::new(0.5, 1, 1, 0, 0.0);
        let f = PerturbationSpec::new(vec![term]);
        let v = melnikov_value(1.1, 0.3, 0.0, &f, &opts()).unwrap().value;
        let (w, _) = integrate_scalar(
            |s| separatrix_weight(s) * 0.5 * (0.3 + 1.1 * s + separatrix_angle(s)).cos(),
            -30.0,
            30.0,
            1e-13,
        )
        .unwrap();
        assert!((v - w).abs() < 1e-10);
    }

    #[test]
    fn jet_matches_finite_differences() {
        let f = PerturbationSpec::new(vec![Term::new(1.0, 1, 0, 0, 0.0), Term::new(0.7, 1, 1, 1, 0.4), Term::new(1.0, 0, 0, 1, 0.0)]);
        let (q, t) = (0.9, 2.1);
        let jet = melnikov_jet(1.3, q, t, &f, &opts()).unwrap();
        let val = |q: f64, t: f64| melnikov_value(1.3, q, t, &f, &opts()).unwrap().value;
        let h = 1e-4;
        assert!((jet.value - val(q, t)).abs() < 1e-10);
        assert!((jet.grad[0] - (val(q + h, t) - val(q - h, t)) / (2.0 * h)).abs() < 1e-6);
        assert!((jet.grad[1] - (val(q, t + h) - val(q, t - h)) / (2.0 * h)).abs() < 1e-6);
        let hqq = (val(q + h, t) - 2.0 * val(q, t) + val(q - h, t)) / (h * h);
        assert!((jet.hess[0][0] - hqq).abs() < 1e-4);
    }

    #[test]
    fn arnold_field_minimum_at_pi_pi() {
        let field = melnikov_field(1.0, &PerturbationSpec::arnold(), 16, 16, &opts()).unwrap();
        let (i, j, _) = field.argmin();
        assert_eq!((i, j), (8, 8));
        let ptp = field.max() - field.min();
        assert!((ptp - 8.0 * PI / (PI / 2.0).sinh()).abs() < 1e-8);
        assert!((ptp - 10.921).abs() < 1e-3);
    }

    #[test]
    fn certificate_for_arnold_and_zero() {
        let cert = certify_at(2.5, &PerturbationSpec::arnold(), &BoxPolicy::default(), 1e-10, &opts()).unwrap();
        assert!((cert.argmin_t - PI).abs() < 1e-6 && (cert.argmin_q - PI).abs() < 1e-6);
        let a_q = 2.0 * PI * 2.5 / (1.25 * PI).sinh();
        assert!((cert.gap - a_q).abs() < 1e-8, "{}", cert.gap);
        let err = certify_at(1.0, &PerturbationSpec::zero(), &BoxPolicy::default(), 1e-10, &opts());
        assert!(matches!(err, Err(MelnikovError::Condition1Violated { .. })));
    }

    #[test]
    fn scaled_perturbation_halves_gap() {
        let f = PerturbationSpec::arnold();
        let p = BoxPolicy::default();
        let a = certify_at(1.4, &f, &p, 1e-10, &opts()).unwrap();
        let b = certify_at(1.4, &f.scaled(0.5), &p, 1e-10, &opts()).unwrap();
        assert!((b.gap - 0.5 * a.gap).abs() < 1e-9);
    }

    #[test]
    fn omega_grid_endpoints() {
        let g = omega_grid(0.5, 2.5, 0.01);
        assert_eq!(g.len(), 201);
        assert_eq!(*g.last().unwrap(), 2.5);
        assert_eq!(omega_grid(1.0, 1.0, 0.01), vec![1.0]);
    }

    #[test]
    fn boundary_has_requested_samples_and_midpoints() {
        let pts = box_boundary(0.0, 0.0, 1.0, 2.0, 64);
        assert_eq!(pts.len(), 256);
        assert!(pts.iter().any(|&(t, q)| t == 0.0 && q == -2.0));
        assert!(pts.iter().any(|&(t, q)| t == 1.0 && q == 0.0));
    }
}
