//! Discretized action on piecewise-linear curves and its minimization.
//!
//! A curve is sampled at nodes `t₀ < … < t_N`. On each segment the kinetic
//! term uses the exact velocity of the linear interpolant and the potential
//! is evaluated at the midpoint:
//!
//! ```text
//! L_i = ½(Δq² + ΔQ²)/h + h (1 − cos q_m)(1 + μ f(Q_m, q_m, t_m))
//! ```
//!
//! The gradient and the block-tridiagonal Hessian of the sum are exact, so
//! minimization uses damped Newton steps.
//!
//! The rotor angle grows without bound along long curves. To keep the
//! optimizer's resolution independent of `|Q|`, rotor values are stored as a
//! fixed high part plus a small correction that carries all updates.

use crate::model::{separatrix_angle, separatrix_angle_from_top, PerturbationSpec, SystemParams};
use crate::summation::NeumaierSum;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use thiserror::Error;

pub const MIN_NODES: usize = 64;
/// Frequencies accepted by the loop solver.
pub const OMEGA_BAND: (f64, f64) = (0.4, 2.6);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VariationalError {
    #[error("interval length {length} is shorter than the minimal loop time {required}")]
    IntervalTooShort { length: f64, required: f64 },
    #[error("invalid boundary: {0}")]
    InvalidBoundary(String),
    #[error("loop frequency {omega} outside the working band [{}, {}]", OMEGA_BAND.0, OMEGA_BAND.1)]
    SlopeOutOfBand { omega: f64 },
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("non-finite value encountered during minimization")]
    NonFinite,
    #[error("malformed curve data: {0}")]
    Malformed(String),
}

/// Fixed endpoint data of a curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    #[serde(rename = "T0")]
    pub t0: f64,
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "Q0")]
    pub rotor0: f64,
    #[serde(rename = "Q1")]
    pub rotor1: f64,
    pub qa: f64,
    pub qb: f64,
}

impl BoundarySpec {
    /// Single loop from the apex `q = −π` at `t0` to the apex `q = π` at `t1`.
    pub fn single_loop(t0: f64, rotor0: f64, t1: f64, rotor1: f64) -> Self {
        Self {
            t0,
            t1,
            rotor0,
            rotor1,
            qa: -PI,
            qb: PI,
        }
    }

    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    /// Mean rotor frequency `(Q1 − Q0)/(T1 − T0)`.
    pub fn omega(&self) -> f64 {
        (self.rotor1 - self.rotor0) / (self.t1 - self.t0)
    }

    pub fn validate(&self) -> Result<(), VariationalError> {
        let vals = [self.t0, self.t1, self.rotor0, self.rotor1, self.qa, self.qb];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(VariationalError::InvalidBoundary("non-finite value".into()));
        }
        if !(self.t1 > self.t0) {
            return Err(VariationalError::InvalidBoundary(format!(
                "T1 = {} must exceed T0 = {}",
                self.t1, self.t0
            )));
        }
        Ok(())
    }
}

/// Node placement rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSpec {
    /// `nodes` equally spaced nodes between consecutive apexes.
    Uniform { nodes: usize },
    /// Spacing `h_min` within `layer` of every apex, then geometric growth
    /// by `growth` up to `h_max`.
    Adaptive {
        h_min: f64,
        h_max: f64,
        growth: f64,
        layer: f64,
    },
}

impl Default for MeshSpec {
    fn default() -> Self {
        MeshSpec::Adaptive {
            h_min: 0.05,
            h_max: 0.5,
            growth: 1.05,
            layer: 8.0,
        }
    }
}

/// Offsets from an apex: fine inside the layer, then geometric growth.
fn apex_offsets(h_min: f64, h_max: f64, growth: f64, layer: f64, limit: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut x = 0.0;
    let mut h = h_min;
    loop {
        if x >= layer - 1e-12 {
            h = (h * growth).min(h_max);
        }
        if x + h > limit {
            break;
        }
        x += h;
        out.push(x);
    }
    out
}

fn segment_mesh(a: f64, b: f64, spec: &MeshSpec) -> Vec<f64> {
    let d = b - a;
    match *spec {
        MeshSpec::Uniform { nodes } => {
            let n = nodes.max(2) - 1;
            (0..=n)
                .map(|k| if k == n { b } else { a + d * k as f64 / n as f64 })
                .collect()
        }
        MeshSpec::Adaptive {
            h_min,
            h_max,
            growth,
            layer,
        } => {
            let mut left = apex_offsets(h_min, h_max, growth, layer, 0.5 * d);
            let mut right = apex_offsets(h_min, h_max, growth, layer, 0.5 * d);
            let step_of = |v: &Vec<f64>| {
                if v.len() >= 2 {
                    v[v.len() - 1] - v[v.len() - 2]
                } else {
                    h_min
                }
            };
            let hstep = step_of(&left).max(step_of(&right));
            let mut gap = d - left.last().unwrap() - right.last().unwrap();
            while gap < 0.5 * hstep && left.len() > 1 {
                left.pop();
                gap = d - left.last().unwrap() - right.last().unwrap();
                if gap < 0.5 * hstep && right.len() > 1 {
                    right.pop();
                    gap = d - left.last().unwrap() - right.last().unwrap();
                }
            }
            let n_mid = ((gap / hstep) - 1e-9).ceil().max(1.0) as usize;
            let xl = *left.last().unwrap();
            let mut out: Vec<f64> = left.iter().map(|&x| a + x).collect();
            for k in 1..n_mid {
                out.push(a + xl + gap * k as f64 / n_mid as f64);
            }
            for &x in right.iter().rev() {
                out.push(b - x);
            }
            *out.last_mut().unwrap() = b;
            out
        }
    }
}

/// Nodes covering `[anchors[0], anchors.last()]` with every anchor a node.
pub fn build_mesh(anchors: &[f64], spec: &MeshSpec) -> Vec<f64> {
    assert!(anchors.len() >= 2, "mesh needs at least two anchors");
    let mut out = vec![anchors[0]];
    for w in anchors.windows(2) {
        let seg = segment_mesh(w[0], w[1], spec);
        out.extend_from_slice(&seg[1..]);
    }
    if out.len() < MIN_NODES {
        let refine = MIN_NODES.div_ceil(out.len() - 1);
        let mut fine = vec![out[0]];
        for w in out.windows(2) {
            for k in 1..=refine {
                fine.push(if k == refine {
                    w[1]
                } else {
                    w[0] + (w[1] - w[0]) * k as f64 / refine as f64
                });
            }
        }
        out = fine;
    }
    out
}

/// Time-sampled candidate trajectory with fixed endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCurve {
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    /// High part of the rotor angle; fixed during minimization.
    rotor_hi: Vec<f64>,
    /// Small correction carrying optimizer updates.
    rotor_lo: Vec<f64>,
    pub boundary: BoundarySpec,
}

impl DiscreteCurve {
    pub fn new(times: Vec<f64>, q: Vec<f64>, rotor: Vec<f64>, boundary: BoundarySpec) -> Result<Self, VariationalError> {
        let n = times.len();
        if n < MIN_NODES {
            return Err(VariationalError::Malformed(format!("{n} nodes, need at least {MIN_NODES}")));
        }
        if q.len() != n || rotor.len() != n {
            return Err(VariationalError::Malformed("column lengths differ".into()));
        }
        if !times.windows(2).all(|w| w[1] > w[0]) {
            return Err(VariationalError::Malformed("times not strictly increasing".into()));
        }
        Ok(Self {
            times,
            q,
            rotor_lo: vec![0.0; n],
            rotor_hi: rotor,
            boundary,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    #[inline]
    pub fn rotor(&self, i: usize) -> f64 {
        self.rotor_hi[i] + self.rotor_lo[i]
    }

    /// `Q_{i+1} − Q_i` without cancellation from large `|Q|`.
    #[inline]
    pub fn rotor_diff(&self, i: usize) -> f64 {
        (self.rotor_hi[i + 1] - self.rotor_hi[i]) + (self.rotor_lo[i + 1] - self.rotor_lo[i])
    }

    pub fn rotor_values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.rotor(i)).collect()
    }

    /// Folds the correction into the high part.
    pub fn consolidate(&mut self) {
        for i in 0..self.len() {
            self.rotor_hi[i] += self.rotor_lo[i];
            self.rotor_lo[i] = 0.0;
        }
    }

    pub fn set_rotor(&mut self, i: usize, value: f64) {
        self.rotor_hi[i] = value;
        self.rotor_lo[i] = 0.0;
    }

    /// Index of the node at time `t`, if any.
    pub fn node_at(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|&x| x < t);
        (i < self.len() && self.times[i] == t).then_some(i)
    }

    /// Linear interpolation of `(q, Q)` at `t`.
    pub fn interpolate(&self, t: f64) -> Option<(f64, f64)> {
        if t < self.times[0] || t > *self.times.last().unwrap() {
            return None;
        }
        let i = self.times.partition_point(|&x| x <= t).clamp(1, self.len() - 1) - 1;
        let u = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        Some((
            self.q[i] + u * (self.q[i + 1] - self.q[i]),
            self.rotor(i) + u * self.rotor_diff(i),
        ))
    }

    /// Segment midpoints with the segment velocities `(t_m, q̇, Q̇)`.
    pub fn segment_velocities(&self) -> Vec<(f64, f64, f64)> {
        (0..self.len() - 1)
            .map(|i| {
                let h = self.times[i + 1] - self.times[i];
                (
                    0.5 * (self.times[i] + self.times[i + 1]),
                    (self.q[i + 1] - self.q[i]) / h,
                    self.rotor_diff(i) / h,
                )
            })
            .collect()
    }

    /// Joins curves that share endpoints; the boundary spans all parts.
    pub fn concat(parts: &[DiscreteCurve]) -> Result<DiscreteCurve, VariationalError> {
        let first = parts.first().ok_or_else(|| VariationalError::Malformed("nothing to join".into()))?;
        let mut out = first.clone();
        for p in &parts[1..] {
            let last = out.len() - 1;
            let close = |a: f64, b: f64| (a - b).abs() <= 8.0 * f64::EPSILON * a.abs().max(b.abs()).max(1.0);
            if !close(out.times[last], p.times[0]) || !close(out.q[last], p.q[0]) {
                return Err(VariationalError::Malformed("parts do not share endpoints".into()));
            }
            out.times.extend_from_slice(&p.times[1..]);
            out.q.extend_from_slice(&p.q[1..]);
            out.rotor_hi.extend_from_slice(&p.rotor_hi[1..]);
            out.rotor_lo.extend_from_slice(&p.rotor_lo[1..]);
        }
        let last = parts.last().unwrap().boundary;
        out.boundary.t1 = last.t1;
        out.boundary.rotor1 = last.rotor1;
        out.boundary.qb = last.qb;
        Ok(out)
    }

    /// Sub-curve on nodes `lo..=hi`.
    pub fn slice(&self, lo: usize, hi: usize) -> Result<DiscreteCurve, VariationalError> {
        let mut c = DiscreteCurve::new(
            self.times[lo..=hi].to_vec(),
            self.q[lo..=hi].to_vec(),
            self.rotor_hi[lo..=hi].to_vec(),
            BoundarySpec {
                t0: self.times[lo],
                t1: self.times[hi],
                rotor0: self.rotor(lo),
                rotor1: self.rotor(hi),
                qa: self.q[lo],
                qb: self.q[hi],
            },
        )?;
        c.rotor_lo = self.rotor_lo[lo..=hi].to_vec();
        Ok(c)
    }

    /// Columns `t,q,Q`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        use crate::io::fmt_f64;
        crate::io::write_table(
            out,
            &["t", "q", "Q"],
            (0..self.len()).map(|i| vec![fmt_f64(self.times[i]), fmt_f64(self.q[i]), fmt_f64(self.rotor(i))]),
        )
    }

    /// Reads `t,q,Q` columns; the boundary is taken from the end nodes.
    pub fn read_csv<R: Read>(input: R) -> Result<DiscreteCurve, VariationalError> {
        let mut rdr = csv::Reader::from_reader(input);
        let (mut t, mut q, mut r) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(|e| VariationalError::Malformed(e.to_string()))?;
            let parse = |k: usize| -> Result<f64, VariationalError> {
                rec.get(k)
                    .ok_or_else(|| VariationalError::Malformed("missing column".into()))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| VariationalError::Malformed(e.to_string()))
            };
            t.push(parse(0)?);
            q.push(parse(1)?);
            r.push(parse(2)?);
        }
        if t.is_empty() {
            return Err(VariationalError::Malformed("empty curve".into()));
        }
        let n = t.len() - 1;
        let boundary = BoundarySpec {
            t0: t[0],
            t1: t[n],
            rotor0: r[0],
            rotor1: r[n],
            qa: q[0],
            qb: q[n],
        };
        DiscreteCurve::new(t, q, r, boundary)
    }
}

/// `F = F₀ + μP`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionParts {
    pub total: f64,
    /// Unperturbed part `F₀`.
    pub free: f64,
    /// Perturbation integral `P`.
    pub perturbation: f64,
}

/// Potential `V = (1 − cos q)(1 + μ f)` with derivatives at one point.
struct PotentialJet {
    v: f64,
    f: f64,
    d: [f64; 2],
    dd: [[f64; 2]; 2],
}

#[inline]
fn potential(q: f64, rotor: f64, t: f64, mu: f64, f: &PerturbationSpec, second: bool) -> PotentialJet {
    let (sq, cq) = q.sin_cos();
    let w = 1.0 - cq;
    if mu == 0.0 || f.terms.is_empty() {
        return PotentialJet {
            v: w,
            f: 0.0,
            d: [sq, 0.0],
            dd: [[cq, 0.0], [0.0, 0.0]],
        };
    }
    if second {
        let j = f.jet(rotor, q, t);
        PotentialJet {
            v: w * (1.0 + mu * j.f),
            f: j.f,
            d: [sq * (1.0 + mu * j.f) + mu * w * j.d_pendulum, mu * w * j.d_rotor],
            dd: [
                [
                    cq * (1.0 + mu * j.f) + 2.0 * mu * sq * j.d_pendulum + mu * w * j.d_pendulum_pendulum,
                    mu * (sq * j.d_rotor + w * j.d_rotor_pendulum),
                ],
                [
                    mu * (sq * j.d_rotor + w * j.d_rotor_pendulum),
                    mu * w * j.d_rotor_rotor,
                ],
            ],
        }
    } else {
        let [fv, fr, fp, _] = f.first(rotor, q, t);
        PotentialJet {
            v: w * (1.0 + mu * fv),
            f: fv,
            d: [sq * (1.0 + mu * fv) + mu * w * fp, mu * w * fr],
            dd: [[0.0; 2]; 2],
        }
    }
}

struct Segment {
    h: f64,
    dq: f64,
    dr: f64,
    pot: PotentialJet,
}

#[inline]
fn segment(c: &DiscreteCurve, i: usize, s: &SystemParams, second: bool) -> Segment {
    let h = c.times[i + 1] - c.times[i];
    let dq = c.q[i + 1] - c.q[i];
    let dr = c.rotor_diff(i);
    let qm = c.q[i] + 0.5 * dq;
    let rm = c.rotor(i) + 0.5 * dr;
    let tm = c.times[i] + 0.5 * h;
    Segment {
        h,
        dq,
        dr,
        pot: potential(qm, rm, tm, s.mu, &s.perturbation, second),
    }
}

pub fn action(c: &DiscreteCurve, s: &SystemParams) -> ActionParts {
    let mut total = NeumaierSum::new();
    let mut free = NeumaierSum::new();
    let mut pert = NeumaierSum::new();
    for i in 0..c.len() - 1 {
        let seg = segment(c, i, s, false);
        let kin = 0.5 * (seg.dq * seg.dq + seg.dr * seg.dr) / seg.h;
        let well = seg.h * (1.0 - (c.q[i] + 0.5 * seg.dq).cos());
        total.add(kin);
        total.add(seg.h * seg.pot.v);
        free.add(kin);
        free.add(well);
        pert.add(well * seg.pot.f);
    }
    ActionParts {
        total: total.value(),
        free: free.value(),
        perturbation: pert.value(),
    }
}

/// Full-length gradient `∂F/∂(q_i, Q_i)` including the end nodes.
fn full_gradient(c: &DiscreteCurve, s: &SystemParams) -> Vec<[f64; 2]> {
    let n = c.len();
    let mut g = vec![[0.0; 2]; n];
    for i in 0..n - 1 {
        let seg = segment(c, i, s, false);
        let kq = seg.dq / seg.h;
        let kr = seg.dr / seg.h;
        let pq = 0.5 * seg.h * seg.pot.d[0];
        let pr = 0.5 * seg.h * seg.pot.d[1];
        g[i][0] += -kq + pq;
        g[i][1] += -kr + pr;
        g[i + 1][0] += kq + pq;
        g[i + 1][1] += kr + pr;
    }
    g
}

/// Gradient with respect to the interior nodes `1..N−1`, as `(∂/∂q, ∂/∂Q)`.
pub fn action_gradient(c: &DiscreteCurve, s: &SystemParams) -> Vec<[f64; 2]> {
    let g = full_gradient(c, s);
    g[1..c.len() - 1].to_vec()
}

/// Per-node discrete Euler–Lagrange residual: gradient max-norm divided by
/// the mean adjacent spacing. Interior nodes only.
pub fn el_residuals(c: &DiscreteCurve, s: &SystemParams) -> Vec<f64> {
    let g = full_gradient(c, s);
    (1..c.len() - 1)
        .map(|i| {
            let hbar = 0.5 * (c.times[i + 1] - c.times[i - 1]);
            g[i][0].abs().max(g[i][1].abs()) / hbar
        })
        .collect()
}

fn max_residual(g: &[[f64; 2]], c: &DiscreteCurve, pinned: &[bool]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 1..c.len() - 1 {
        if pinned[i] {
            continue;
        }
        let hbar = 0.5 * (c.times[i + 1] - c.times[i - 1]);
        m = m.max(g[i][0].abs().max(g[i][1].abs()) / hbar);
    }
    m
}

type Block = [[f64; 2]; 2];

/// Diagonal and super-diagonal 2×2 blocks of the Hessian over all nodes.
fn hessian(c: &DiscreteCurve, s: &SystemParams) -> (Vec<Block>, Vec<Block>) {
    let n = c.len();
    let mut diag = vec![[[0.0; 2]; 2]; n];
    let mut off = vec![[[0.0; 2]; 2]; n - 1];
    for i in 0..n - 1 {
        let seg = segment(c, i, s, true);
        let k = 1.0 / seg.h;
        let w = 0.25 * seg.h;
        let hv = seg.pot.dd;
        for a in 0..2 {
            for b in 0..2 {
                let kin = if a == b { k } else { 0.0 };
                let pot = w * hv[a][b];
                diag[i][a][b] += kin + pot;
                diag[i + 1][a][b] += kin + pot;
                off[i][a][b] = -kin + pot;
            }
        }
    }
    (diag, off)
}

#[inline]
fn inv2(m: &Block) -> Option<Block> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !(m[0][0] > 0.0 && det > 0.0 && det.is_finite()) {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

#[inline]
fn mul(a: &Block, b: &Block) -> Block {
    let mut r = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    r
}

#[inline]
fn mulv(a: &Block, v: &[f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

#[inline]
fn transpose(a: &Block) -> Block {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Solves the symmetric block-tridiagonal system `H x = r`. Returns `None`
/// when `H` is not positive definite.
fn block_solve(diag: &[Block], off: &[Block], rhs: &[[f64; 2]]) -> Option<Vec<[f64; 2]>> {
    let n = diag.len();
    let mut sinv: Vec<Block> = Vec::with_capacity(n);
    let mut y: Vec<[f64; 2]> = Vec::with_capacity(n);
    for i in 0..n {
        let (mut d, mut r) = (diag[i], rhs[i]);
        if i > 0 {
            let et = transpose(&off[i - 1]);
            let tmp = mul(&et, &sinv[i - 1]);
            let corr = mul(&tmp, &off[i - 1]);
            let ry = mulv(&tmp, &y[i - 1]);
            for a in 0..2 {
                r[a] -= ry[a];
                for b in 0..2 {
                    d[a][b] -= corr[a][b];
                }
            }
        }
        sinv.push(inv2(&d)?);
        y.push(r);
    }
    let mut x = vec![[0.0; 2]; n];
    x[n - 1] = mulv(&sinv[n - 1], &y[n - 1]);
    for i in (0..n - 1).rev() {
        let ex = mulv(&off[i], &x[i + 1]);
        x[i] = mulv(&sinv[i], &[y[i][0] - ex[0], y[i][1] - ex[1]]);
    }
    Some(x)
}

/// Newton solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Target for the maximal Euler–Lagrange residual.
    pub opt_tol: f64,
    pub max_iter: usize,
    pub mesh: MeshSpec,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            opt_tol: 1e-8,
            max_iter: 200,
            mesh: MeshSpec::default(),
        }
    }
}

/// Telemetry of one minimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub action: f64,
    pub residual: f64,
    pub converged: bool,
}

/// Minimizes the action over all nodes except the end nodes and those in
/// `pinned`. The curve is updated in place even when the budget runs out.
pub fn minimize(
    c: &mut DiscreteCurve,
    s: &SystemParams,
    pinned_nodes: &[usize],
    opts: &SolverOptions,
) -> Result<SolveStats, VariationalError> {
    let n = c.len();
    let mut pinned = vec![false; n];
    pinned[0] = true;
    pinned[n - 1] = true;
    for &k in pinned_nodes {
        pinned[k] = true;
    }
    let mut g = full_gradient(c, s);
    let mut res = max_residual(&g, c, &pinned);
    let mut f = action(c, s).total;
    if !f.is_finite() || !res.is_finite() {
        return Err(VariationalError::NonFinite);
    }
    let mut lambda = 0.0;
    let mut iter = 0;
    while res > opts.opt_tol && iter < opts.max_iter {
        iter += 1;
        let (mut diag, mut off) = hessian(c, s);
        for i in 0..n {
            if pinned[i] {
                diag[i] = [[1.0, 0.0], [0.0, 1.0]];
                if i > 0 {
                    off[i - 1] = [[0.0; 2]; 2];
                }
                if i < n - 1 {
                    off[i] = [[0.0; 2]; 2];
                }
            }
        }
        let rhs: Vec<[f64; 2]> = (0..n)
            .map(|i| if pinned[i] { [0.0; 2] } else { [-g[i][0], -g[i][1]] })
            .collect();
        let scale = diag.iter().map(|d| d[0][0].abs().max(d[1][1].abs())).fold(0.0, f64::max);
        let step = loop {
            let shifted: Vec<Block> = diag
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    if pinned[i] || lambda == 0.0 {
                        *d
                    } else {
                        [[d[0][0] + lambda, d[0][1]], [d[1][0], d[1][1] + lambda]]
                    }
                })
                .collect();
            if let Some(x) = block_solve(&shifted, &off, &rhs) {
                lambda *= 0.1;
                if lambda < 1e-12 * scale {
                    lambda = 0.0;
                }
                break x;
            }
            lambda = if lambda == 0.0 { 1e-6 * scale } else { 10.0 * lambda };
            if lambda > 1e12 * scale {
                return Err(VariationalError::NonFinite);
            }
        };
        let slope: f64 = (0..n).map(|i| g[i][0] * step[i][0] + g[i][1] * step[i][1]).sum();
        let noise = 1e-13 * (1.0 + f.abs());
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let mut trial = c.clone();
            for i in 0..n {
                trial.q[i] += alpha * step[i][0];
                trial.rotor_lo[i] += alpha * step[i][1];
            }
            let ft = action(&trial, s).total;
            if !ft.is_finite() {
                alpha *= 0.5;
                continue;
            }
            let armijo = ft <= f + 1e-4 * alpha * slope;
            let gt = if armijo || alpha * slope.abs() < noise { Some(full_gradient(&trial, s)) } else { None };
            let accept = armijo
                || gt
                    .as_ref()
                    .is_some_and(|gt| max_residual(gt, &trial, &pinned) < res && ft <= f + noise);
            if accept {
                *c = trial;
                f = ft;
                g = gt.unwrap_or_else(|| full_gradient(c, s));
                res = max_residual(&g, c, &pinned);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let converged = res <= opts.opt_tol;
    let stats = SolveStats {
        iterations: iter,
        action: f,
        residual: res,
        converged,
    };
    if converged {
        Ok(stats)
    } else {
        Err(VariationalError::NotConverged {
            iterations: iter,
            residual: res,
        })
    }
}

/// Separatrix chain through apexes `apex_times` with `q(apex_k) = q_first + 2πk`
/// and rotor angles interpolated linearly between `apex_rotor`.
pub fn chain_guess(
    apex_times: &[f64],
    apex_rotor: &[f64],
    q_first: f64,
    mesh: &MeshSpec,
) -> Result<DiscreteCurve, VariationalError> {
    if apex_times.len() < 2 || apex_times.len() != apex_rotor.len() {
        return Err(VariationalError::InvalidBoundary("need matching apex times and angles".into()));
    }
    if !apex_times.windows(2).all(|w| w[1] > w[0]) {
        return Err(VariationalError::InvalidBoundary("apex times must increase".into()));
    }
    let times = build_mesh(apex_times, mesh);
    let mut q = Vec::with_capacity(times.len());
    let mut rotor = Vec::with_capacity(times.len());
    let mut k = 0;
    for &t in &times {
        while k + 2 < apex_times.len() && t > apex_times[k + 1] {
            k += 1;
        }
        let (a, b) = (apex_times[k], apex_times[k + 1]);
        let base = q_first + PI + 2.0 * PI * k as f64;
        if t == a {
            q.push(base - PI);
            rotor.push(apex_rotor[k]);
        } else if t == b {
            q.push(base + PI);
            rotor.push(apex_rotor[k + 1]);
        } else {
            q.push(base + separatrix_angle_from_top(t - a) + separatrix_angle(t - b));
            let u = (t - a) / (b - a);
            rotor.push(apex_rotor[k] + u * (apex_rotor[k + 1] - apex_rotor[k]));
        }
    }
    let n = apex_times.len() - 1;
    let boundary = BoundarySpec {
        t0: apex_times[0],
        t1: apex_times[n],
        rotor0: apex_rotor[0],
        rotor1: apex_rotor[n],
        qa: q_first,
        qb: q_first + 2.0 * PI * n as f64,
    };
    DiscreteCurve::new(times, q, rotor, boundary)
}

/// Separatrix–torus–separatrix guess for one loop.
pub fn initial_guess(b: &BoundarySpec, s: &SystemParams, mesh: &MeshSpec) -> Result<DiscreteCurve, VariationalError> {
    b.validate()?;
    if s.mu > 0.0 && b.duration() < s.loop_time() {
        return Err(VariationalError::IntervalTooShort {
            length: b.duration(),
            required: s.loop_time(),
        });
    }
    let mut c = chain_guess(&[b.t0, b.t1], &[b.rotor0, b.rotor1], b.qa, mesh)?;
    let last = c.len() - 1;
    c.q[0] = b.qa;
    c.q[last] = b.qb;
    c.boundary = *b;
    Ok(c)
}

/// C⁰ closeness of a loop to the separatrix–torus–separatrix skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopProfile {
    pub d_sep_in: f64,
    pub d_torus: f64,
    pub d_sep_out: f64,
    /// Layer width `l = |log μ| / 6`.
    pub layer: f64,
    pub omega: f64,
}

impl LoopProfile {
    pub fn max(&self) -> f64 {
        self.d_sep_in.max(self.d_torus).max(self.d_sep_out)
    }
}

/// Distances over nodes in `[T0, T0 + l]`, `[T0 + l, T1 − l]`, `[T1 − l, T1]`.
/// Separatrix distances take the larger of the `q` and `Q` deviations from
/// the unperturbed homoclinic orbit through the apex; the torus distance is
/// `|q|` since the torus contains every rotor phase.
pub fn loop_profile(c: &DiscreteCurve, mu: f64) -> LoopProfile {
    let b = c.boundary;
    let layer = if mu > 0.0 && mu < 1.0 { mu.ln().abs() / 6.0 } else { f64::INFINITY };
    let omega = b.omega();
    let (mut d_in, mut d_torus, mut d_out) = (0.0f64, 0.0f64, 0.0f64);
    let base = b.qa + PI;
    for i in 0..c.len() {
        let t = c.times[i];
        if t <= b.t0 + layer {
            let dr = (c.rotor(i) - (b.rotor0 + omega * (t - b.t0))).abs();
            let sep = base + separatrix_angle_from_top(t - b.t0);
            d_in = d_in.max((c.q[i] - sep).abs().max(dr));
        }
        if t >= b.t1 - layer {
            let dr = (c.rotor(i) - (b.rotor1 + omega * (t - b.t1))).abs();
            let sep = base + separatrix_angle(t - b.t1);
            d_out = d_out.max((c.q[i] - sep).abs().max(dr));
        }
        if t >= b.t0 + layer && t <= b.t1 - layer {
            d_torus = d_torus.max((c.q[i] - base).abs());
        }
    }
    LoopProfile {
        d_sep_in: d_in,
        d_torus,
        d_sep_out: d_out,
        layer,
        omega,
    }
}

/// Minimizing loop between apexes `q = −π` at `T0` and `q = π` at `T1`.
pub fn solve_loop(
    b: &BoundarySpec,
    s: &SystemParams,
    opts: &SolverOptions,
) -> Result<(DiscreteCurve, LoopProfile, SolveStats), VariationalError> {
    if b.qa != -PI || b.qb != PI {
        return Err(VariationalError::InvalidBoundary(format!(
            "loop endpoints must be (-pi, pi), got ({}, {})",
            b.qa, b.qb
        )));
    }
    let omega = b.omega();
    if !(omega >= OMEGA_BAND.0 && omega <= OMEGA_BAND.1) {
        return Err(VariationalError::SlopeOutOfBand { omega });
    }
    let mut c = initial_guess(b, s, &opts.mesh)?;
    let stats = minimize(&mut c, s, &[], opts)?;
    Ok((c.clone(), loop_profile(&c, s.mu), stats))
}

/// Loop between apexes at arbitrary lifted levels `qa` and `qa + 2π`.
pub fn solve_loop_at_level(
    b: &BoundarySpec,
    s: &SystemParams,
    opts: &SolverOptions,
) -> Result<(DiscreteCurve, SolveStats), VariationalError> {
    b.validate()?;
    if (b.qb - b.qa - 2.0 * PI).abs() > 1e-9 {
        return Err(VariationalError::InvalidBoundary("loop must advance q by 2π".into()));
    }
    let mut c = chain_guess(&[b.t0, b.t1], &[b.rotor0, b.rotor1], b.qa, &opts.mesh)?;
    c.boundary = *b;
    let last = c.len() - 1;
    c.q[last] = b.qb;
    let stats = minimize(&mut c, s, &[], opts)?;
    Ok((c, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{separatrix_velocity, PerturbationSpec, Term};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arnold(mu: f64) -> SystemParams {
        SystemParams::new(mu, 10.0, PerturbationSpec::arnold())
    }

    fn uniform(n: usize) -> MeshSpec {
        MeshSpec::Uniform { nodes: n }
    }

    #[test]
    fn torus_segment_action_is_exact() {
        let b = BoundarySpec {
            t0: 0.0,
            t1: 30.0,
            rotor0: 0.5,
            rotor1: 0.5 + 1.3 * 30.0,
            qa: 0.0,
            qb: 0.0,
        };
        let times = build_mesh(&[0.0, 30.0], &MeshSpec::default());
        let rotor: Vec<f64> = times.iter().map(|t| 0.5 + 1.3 * t).collect();
        let c = DiscreteCurve::new(times.clone(), vec![0.0; times.len()], rotor, b).unwrap();
        let a = action(&c, &arnold(0.0));
        assert!((a.total - 0.5 * 1.3 * 1.3 * 30.0).abs() < 1e-11);
        let g = action_gradient(&c, &arnold(0.0));
        assert!(g.iter().all(|v| v[0].abs() < 1e-12 && v[1].abs() < 1e-12));
        assert_eq!(action(&c, &arnold(0.3)).perturbation, 0.0);
    }

    #[test]
    fn separatrix_excursion_costs_eight() {
        let times = build_mesh(&[-25.0, 25.0], &uniform(20001));
        let q: Vec<f64> = times.iter().map(|&t| separatrix_angle(t)).collect();
        let b = BoundarySpec {
            t0: -25.0,
            t1: 25.0,
            rotor0: 0.0,
            rotor1: 0.0,
            qa: q[0],
            qb: q[q.len() - 1],
        };
        let c = DiscreteCurve::new(times.clone(), q, vec![0.0; times.len()], b).unwrap();
        let a = action(&c, &arnold(0.0));
        assert!((a.free - 8.0).abs() < 1e-5, "{}", a.free);
    }

    #[test]
    fn mesh_properties() {
        let m = build_mesh(&[0.0, 200.0, 410.0], &MeshSpec::default());
        assert!(m.windows(2).all(|w| w[1] > w[0]));
        assert!(m.contains(&200.0));
        let hmax = m.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        assert!(hmax <= 0.5 * 2.5 + 1e-9);
        let near: Vec<f64> = m.windows(2).filter(|w| w[0] < 7.9).map(|w| w[1] - w[0]).collect();
        assert!(near.iter().all(|&h| (h - 0.05).abs() < 1e-9));
        assert!(build_mesh(&[0.0, 1.0], &MeshSpec::default()).len() >= MIN_NODES);
        let u = build_mesh(&[0.0, 10.0], &uniform(4096));
        assert_eq!(u.len(), 4096);
    }

    #[test]
    fn mesh_translates_with_anchor() {
        let a = build_mesh(&[0.0, 100.0], &MeshSpec::default());
        let b = build_mesh(&[0.3, 100.0], &MeshSpec::default());
        for k in 0..100 {
            assert!((b[k] - 0.3 - a[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn guess_endpoints_and_slope() {
        let b = BoundarySpec::single_loop(0.0, 0.2, 600.0, 0.2 + 600.0);
        let c = initial_guess(&b, &arnold(0.02), &MeshSpec::default()).unwrap();
        assert_eq!(c.q[0], -PI);
        assert_eq!(c.q[c.len() - 1], PI);
        let (qm, _) = c.interpolate(300.0).unwrap();
        assert!(qm.abs() < (-150.0f64).exp());
        for v in c.segment_velocities() {
            assert!((v.2 - 1.0).abs() < 1e-9);
        }
        let short = BoundarySpec::single_loop(0.0, 0.0, 100.0, 100.0);
        assert!(matches!(
            initial_guess(&short, &arnold(0.02), &MeshSpec::default()),
            Err(VariationalError::IntervalTooShort { .. })
        ));
    }

    #[test]
    fn block_solver_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let mut diag = vec![[[0.0; 2]; 2]; n];
        let mut off = vec![[[0.0; 2]; 2]; n - 1];
        for d in diag.iter_mut() {
            let a: f64 = rng.random_range(-0.5..0.5);
            *d = [[6.0 + a, a], [a, 5.0]];
        }
        for o in off.iter_mut() {
            *o = [[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]];
        }
        let rhs: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let x = block_solve(&diag, &off, &rhs).unwrap();
        for i in 0..n {
            let mut r = mulv(&diag[i], &x[i]);
            if i > 0 {
                let v = mulv(&transpose(&off[i - 1]), &x[i - 1]);
                r = [r[0] + v[0], r[1] + v[1]];
            }
            if i + 1 < n {
                let v = mulv(&off[i], &x[i + 1]);
                r = [r[0] + v[0], r[1] + v[1]];
            }
            assert!((r[0] - rhs[i][0]).abs() < 1e-12 && (r[1] - rhs[i][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = SystemParams::new(0.3, 10.0, PerturbationSpec::new(vec![Term::new(1.0, 1, 1, 1, 0.2), Term::new(0.5, 2, 0, 1, 0.0)]));
        let times: Vec<f64> = (0..80).map(|k| k as f64 * 0.1).collect();
        let q: Vec<f64> = times.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let r: Vec<f64> = times.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let b = BoundarySpec { t0: 0.0, t1: 7.9, rotor0: r[0], rotor1: r[79], qa: q[0], qb: q[79] };
        let c = DiscreteCurve::new(times, q, r, b).unwrap();
        let (diag, off) = hessian(&c, &s);
        let h = 1e-6;
        for i in [3usize, 40, 71] {
            for a in 0..2 {
                let mut cp = c.clone();
                let mut cm = c.clone();
                if a == 0 {
                    cp.q[i] += h;
                    cm.q[i] -= h;
                } else {
                    cp.rotor_lo[i] += h;
                    cm.rotor_lo[i] -= h;
                }
                let (gp, gm) = (full_gradient(&cp, &s), full_gradient(&cm, &s));
                for bb in 0..2 {
                    let fd = (gp[i][bb] - gm[i][bb]) / (2.0 * h);
                    assert!((fd - diag[i][bb][a]).abs() < 1e-5);
                    let fd = (gp[i + 1][bb] - gm[i + 1][bb]) / (2.0 * h);
                    assert!((fd - off[i][a][bb]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn unperturbed_loop_is_separatrix_chain() {
        let b = BoundarySpec::single_loop(0.0, 0.0, 40.0, 40.0);
        let opts = SolverOptions {
            mesh: uniform(4096),
            ..Default::default()
        };
        let (c, _, stats) = solve_loop(&b, &arnold(0.0), &opts).unwrap();
        assert!(stats.residual <= 1e-8);
        let guess = initial_guess(&b, &arnold(0.0), &opts.mesh).unwrap();
        let d = (0..c.len()).map(|i| (c.q[i] - guess.q[i]).abs().max((c.rotor(i) - guess.rotor(i)).abs())).fold(0.0, f64::max);
        assert!(d < 1e-4, "{d}");
        assert!((stats.action - (0.5 * 40.0 + 8.0)).abs() < 1e-3, "{}", stats.action);
        // Velocity at the apex is close to the separatrix value.
        let v = c.segment_velocities();
        assert!((v[0].1 - separatrix_velocity(v[0].0)).abs() < 1e-3);
    }

    #[test]
    fn perturbed_loop_converges() {
        let s = arnold(0.05);
        let b = BoundarySpec::single_loop(PI, PI, PI + 200.0 + 2.0 * PI, PI + 2.0 * PI * 33.0);
        let (c, profile, stats) = solve_loop(&b, &s, &SolverOptions::default()).unwrap();
        assert!(stats.converged && stats.residual <= 1e-8);
        assert!(el_residuals(&c, &s).iter().all(|&r| r <= 1e-8));
        // The torus distance is attained at the layer edge, where the
        // separatrix tail is 4·atan(e^{−l}).
        let edge = 4.0 * (-profile.layer).exp().atan();
        assert!((profile.d_torus - edge).abs() < 0.1 * edge, "{profile:?}");
        assert!(profile.d_sep_in < 0.1 && profile.d_sep_out < 0.1, "{profile:?}");
    }

    #[test]
    fn pinned_node_stays_fixed() {
        let s = arnold(0.05);
        let mut c = chain_guess(&[0.0, 210.0, 420.0], &[0.0, 210.0, 420.0], -PI, &MeshSpec::default()).unwrap();
        let k = c.node_at(210.0).unwrap();
        let before = (c.q[k], c.rotor(k));
        minimize(&mut c, &s, &[k], &SolverOptions::default()).unwrap();
        assert_eq!((c.q[k], c.rotor(k)), before);
    }

    #[test]
    fn csv_roundtrip_preserves_nodes() {
        let c = chain_guess(&[0.0, 50.0], &[0.0, 50.0], -PI, &MeshSpec::default()).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let d = DiscreteCurve::read_csv(buf.as_slice()).unwrap();
        assert_eq!(c.times, d.times);
        assert_eq!(c.q, d.q);
    }
}
