//! The pendulum-rotor Lagrangian with a small periodic coupling.
//!
//! The system is
//!
//! ```text
//! L(q, q', Q, Q', t) = ½Q'² + ½q'² + (1 − cos q) + μ (1 − cos q) f(Q, q, t)
//! ```
//!
//! where `q` is the pendulum angle, `Q` the rotor angle and `f` a finite
//! trigonometric sum with integer wave numbers. Angles are always carried
//! lifted to the real line.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// One term `c · cos(kQ·Q + kq·q + kt·t + φ)` of the coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub c: f64,
    #[serde(rename = "kQ")]
    pub k_rotor: i32,
    #[serde(rename = "kq")]
    pub k_pendulum: i32,
    #[serde(rename = "kt")]
    pub k_time: i32,
    #[serde(default)]
    pub phi: f64,
}

impl Term {
    pub fn new(c: f64, k_rotor: i32, k_pendulum: i32, k_time: i32, phi: f64) -> Self {
        Self {
            c,
            k_rotor,
            k_pendulum,
            k_time,
            phi,
        }
    }

    #[inline]
    fn phase(&self, rotor: f64, q: f64, t: f64) -> f64 {
        self.k_rotor as f64 * rotor + self.k_pendulum as f64 * q + self.k_time as f64 * t + self.phi
    }
}

/// Value and derivatives of the coupling at one point.
///
/// Second derivatives are stored as the symmetric pairs that the action
/// Hessian and the Melnikov Hessian need.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CouplingJet {
    pub f: f64,
    pub d_rotor: f64,
    pub d_pendulum: f64,
    pub d_time: f64,
    pub d_rotor_rotor: f64,
    pub d_rotor_pendulum: f64,
    pub d_pendulum_pendulum: f64,
    pub d_rotor_time: f64,
    pub d_time_time: f64,
}

/// The coupling `f(Q, q, t) = Σ c·cos(kQ·Q + kq·q + kt·t + φ)`.
///
/// Integer wave numbers make `f` and every partial derivative exactly
/// 2π-periodic in each argument.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerturbationSpec {
    pub terms: Vec<Term>,
}

impl PerturbationSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    /// `f ≡ 0`.
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    /// `f = cos Q + cos t`.
    pub fn arnold() -> Self {
        Self {
            terms: vec![Term::new(1.0, 1, 0, 0, 0.0), Term::new(1.0, 0, 0, 1, 0.0)],
        }
    }

    /// Looks up a named preset. Only `"arnold"` and `"zero"` exist.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "arnold" => Some(Self::arnold()),
            "zero" | "none" => Some(Self::zero()),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.c == 0.0)
    }

    /// Upper bound on `|f|`.
    pub fn sup_norm_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.c.abs()).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| Term { c: t.c * factor, ..*t })
                .collect(),
        }
    }

    /// Concatenation of the two term lists, i.e. `f + g`.
    pub fn sum(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Self { terms }
    }

    pub fn has_pendulum_dependence(&self) -> bool {
        self.terms.iter().any(|t| t.k_pendulum != 0)
    }

    #[inline]
    pub fn value(&self, rotor: f64, q: f64, t: f64) -> f64 {
        self.terms
            .iter()
            .map(|term| term.c * term.phase(rotor, q, t).cos())
            .sum()
    }

    /// Value with first partials `(f, ∂f/∂Q, ∂f/∂q, ∂f/∂t)`.
    #[inline]
    pub fn first(&self, rotor: f64, q: f64, t: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        for term in &self.terms {
            let (s, c) = term.phase(rotor, q, t).sin_cos();
            out[0] += term.c * c;
            let ds = -term.c * s;
            out[1] += ds * term.k_rotor as f64;
            out[2] += ds * term.k_pendulum as f64;
            out[3] += ds * term.k_time as f64;
        }
        out
    }

    #[inline]
    pub fn jet(&self, rotor: f64, q: f64, t: f64) -> CouplingJet {
        let mut j = CouplingJet::default();
        for term in &self.terms {
            let (s, c) = term.phase(rotor, q, t).sin_cos();
            let (a, b, k) = (
                term.k_rotor as f64,
                term.k_pendulum as f64,
                term.k_time as f64,
            );
            let v = term.c * c;
            let ds = -term.c * s;
            j.f += v;
            j.d_rotor += ds * a;
            j.d_pendulum += ds * b;
            j.d_time += ds * k;
            j.d_rotor_rotor -= v * a * a;
            j.d_rotor_pendulum -= v * a * b;
            j.d_pendulum_pendulum -= v * b * b;
            j.d_rotor_time -= v * a * k;
            j.d_time_time -= v * k * k;
        }
        j
    }
}

/// Parameters of `L_μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub mu: f64,
    /// Transition-duration constant; the loop duration is `T = a0 / mu`.
    pub a0: f64,
    pub perturbation: PerturbationSpec,
}

impl SystemParams {
    pub fn new(mu: f64, a0: f64, perturbation: PerturbationSpec) -> Self {
        Self {
            mu,
            a0,
            perturbation,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(format!("mu must be finite and >= 0, got {}", self.mu));
        }
        if !(self.a0.is_finite() && self.a0 > 1.0) {
            return Err(format!("a0 must be > 1, got {}", self.a0));
        }
        Ok(())
    }

    /// Minimal loop duration `T = A₀/μ` (infinite at μ = 0).
    pub fn loop_time(&self) -> f64 {
        if self.mu > 0.0 {
            self.a0 / self.mu
        } else {
            f64::INFINITY
        }
    }

    /// Separatrix layer half-width `l = |log μ| / 6`.
    pub fn layer_width(&self) -> f64 {
        self.mu.ln().abs() / 6.0
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }
}

/// Full non-autonomous state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhasePoint {
    pub t: f64,
    pub q: f64,
    pub qdot: f64,
    #[serde(rename = "Q")]
    pub rotor: f64,
    #[serde(rename = "Qdot")]
    pub rotor_dot: f64,
}

impl PhasePoint {
    pub fn new(t: f64, q: f64, qdot: f64, rotor: f64, rotor_dot: f64) -> Self {
        Self {
            t,
            q,
            qdot,
            rotor,
            rotor_dot,
        }
    }

    pub fn state(&self) -> [f64; 4] {
        [self.q, self.qdot, self.rotor, self.rotor_dot]
    }

    pub fn from_state(t: f64, y: [f64; 4]) -> Self {
        Self::new(t, y[0], y[1], y[2], y[3])
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.q.is_finite()
            && self.qdot.is_finite()
            && self.rotor.is_finite()
            && self.rotor_dot.is_finite()
    }
}

/// Unperturbed homoclinic orbit `q = q₀(t − T₀)`, `Q = Q₀ + ω(t − T₀)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparatrixParams {
    pub omega: f64,
    pub t0: f64,
    #[serde(rename = "Q0")]
    pub rotor0: f64,
}

/// `q₀(s) = 4·arctan(eˢ)`, rising from 0 to 2π with `q₀(0) = π`.
#[inline]
pub fn separatrix_angle(s: f64) -> f64 {
    4.0 * s.exp().atan()
}

/// `q₀(s) − 2π = −4·arctan(e^{−s})`, accurate for large positive `s`.
#[inline]
pub fn separatrix_angle_from_top(s: f64) -> f64 {
    -4.0 * (-s).exp().atan()
}

/// `q̇₀(s) = 2 / cosh s`.
#[inline]
pub fn separatrix_velocity(s: f64) -> f64 {
    2.0 / s.cosh()
}

/// `1 − cos q₀(s) = 2 / cosh² s`.
#[inline]
pub fn separatrix_weight(s: f64) -> f64 {
    let c = s.cosh();
    2.0 / (c * c)
}

/// Lifted pendulum angle along the separatrix branch whose apex sits at
/// `apex_level` (an odd multiple of π). For `s < 0` the branch leaves the
/// torus at `apex_level − π`; for `s > 0` it reaches the torus at
/// `apex_level + π`.
#[inline]
pub fn separatrix_branch(apex_level: f64, s: f64) -> f64 {
    let base = apex_level - PI;
    if s <= 0.0 {
        base + separatrix_angle(s)
    } else {
        base + 2.0 * PI + separatrix_angle_from_top(s)
    }
}

pub fn separatrix_state(sp: &SeparatrixParams, t: f64) -> PhasePoint {
    let s = t - sp.t0;
    PhasePoint::new(
        t,
        separatrix_angle(s),
        separatrix_velocity(s),
        sp.rotor0 + sp.omega * s,
        sp.omega,
    )
}

pub fn lagrangian(p: &PhasePoint, s: &SystemParams) -> f64 {
    let well = 1.0 - p.q.cos();
    0.5 * p.rotor_dot * p.rotor_dot
        + 0.5 * p.qdot * p.qdot
        + well
        + s.mu * well * s.perturbation.value(p.rotor, p.q, p.t)
}

/// Time derivative of `(q, q̇, Q, Q̇)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub dq: f64,
    pub dqdot: f64,
    pub drotor: f64,
    pub drotor_dot: f64,
}

impl Rates {
    pub fn as_array(&self) -> [f64; 4] {
        [self.dq, self.dqdot, self.drotor, self.drotor_dot]
    }
}

/// Euler–Lagrange equations of `L_μ` in first-order form.
#[inline]
pub fn eom_rhs(p: &PhasePoint, s: &SystemParams) -> Rates {
    let (sin_q, cos_q) = p.q.sin_cos();
    let well = 1.0 - cos_q;
    let (f, f_rotor, f_pend) = if s.mu == 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        let [f, fr, fp, _] = s.perturbation.first(p.rotor, p.q, p.t);
        (f, fr, fp)
    };
    Rates {
        dq: p.qdot,
        dqdot: sin_q * (1.0 + s.mu * f) + s.mu * well * f_pend,
        drotor: p.rotor_dot,
        drotor_dot: s.mu * well * f_rotor,
    }
}

/// `½q̇² + cos q − 1`: zero on the separatrix level.
pub fn pendulum_energy(p: &PhasePoint) -> f64 {
    0.5 * p.qdot * p.qdot + p.q.cos() - 1.0
}

pub fn rotor_energy(p: &PhasePoint) -> f64 {
    0.5 * p.rotor_dot * p.rotor_dot
}
