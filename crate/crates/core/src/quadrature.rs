//! Globally adaptive Gauss–Kronrod 7/15 quadrature for vector integrands.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("quadrature did not reach tolerance {tol:e} after {intervals} subintervals (estimated error {error:e})")]
    NotConverged { tol: f64, error: f64, intervals: usize },
    #[error("non-finite integrand value at x = {0}")]
    NonFinite(f64),
    #[error("invalid quadrature tolerance {0}")]
    InvalidTolerance(f64),
}

/// Kronrod abscissae on [0, 1]; odd indices are the Gauss points.
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadResult<const N: usize> {
    pub value: [f64; N],
    /// Estimated absolute error, max over components.
    pub error: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone, Copy)]
struct Piece<const N: usize> {
    a: f64,
    b: f64,
    value: [f64; N],
    error: f64,
}

impl<const N: usize> PartialEq for Piece<N> {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl<const N: usize> Eq for Piece<N> {}
impl<const N: usize> PartialOrd for Piece<N> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<const N: usize> Ord for Piece<N> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// One 15-point Kronrod rule with the embedded 7-point Gauss estimate.
pub fn gk15<const N: usize, F>(f: &F, a: f64, b: f64) -> Result<([f64; N], f64), QuadError>
where
    F: Fn(f64) -> [f64; N],
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let eval = |x: f64| -> Result<[f64; N], QuadError> {
        let v = f(x);
        if v.iter().all(|c| c.is_finite()) {
            Ok(v)
        } else {
            Err(QuadError::NonFinite(x))
        }
    };
    let fc = eval(center)?;
    let mut resk = [0.0; N];
    let mut resg = [0.0; N];
    let mut resabs = [0.0; N];
    let mut fv1 = [[0.0; N]; 7];
    let mut fv2 = [[0.0; N]; 7];
    for c in 0..N {
        resk[c] = fc[c] * WGK[7];
        resg[c] = fc[c] * WG[3];
        resabs[c] = fc[c].abs() * WGK[7];
    }
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = eval(center - dx)?;
        let f2 = eval(center + dx)?;
        fv1[j] = f1;
        fv2[j] = f2;
        for c in 0..N {
            resk[c] += WGK[j] * (f1[c] + f2[c]);
            resabs[c] += WGK[j] * (f1[c].abs() + f2[c].abs());
            if j % 2 == 1 {
                resg[c] += WG[j / 2] * (f1[c] + f2[c]);
            }
        }
    }
    let mut err_max: f64 = 0.0;
    let mut value = [0.0; N];
    for c in 0..N {
        let reskh = 0.5 * resk[c];
        let mut resasc = WGK[7] * (fc[c] - reskh).abs();
        for j in 0..7 {
            resasc += WGK[j] * ((fv1[j][c] - reskh).abs() + (fv2[j][c] - reskh).abs());
        }
        let resasc = resasc * half.abs();
        let resabs = resabs[c] * half.abs();
        value[c] = resk[c] * half;
        let mut err = ((resk[c] - resg[c]) * half).abs();
        if resasc != 0.0 && err != 0.0 {
            err = resasc * (200.0 * err / resasc).powf(1.5).min(1.0);
        }
        let uflow = f64::MIN_POSITIVE;
        let epmach = f64::EPSILON;
        if resabs > uflow / (50.0 * epmach) {
            err = err.max(50.0 * epmach * resabs);
        }
        err_max = err_max.max(err);
    }
    Ok((value, err_max))
}

/// Adaptive integral of `f` over `[a, b]`, starting from `initial`
/// equal pieces. Stops when the summed error estimate is below
/// `max(abs_tol, rel_tol·|I|)` for every component.
pub fn integrate_adaptive<const N: usize, F>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    initial: usize,
    max_intervals: usize,
) -> Result<QuadResult<N>, QuadError>
where
    F: Fn(f64) -> [f64; N],
{
    if !(abs_tol > 0.0 || rel_tol > 0.0) {
        return Err(QuadError::InvalidTolerance(abs_tol));
    }
    let initial = initial.max(1);
    let mut heap = BinaryHeap::with_capacity(max_intervals + initial);
    let width = (b - a) / initial as f64;
    for i in 0..initial {
        let lo = a + i as f64 * width;
        let hi = if i + 1 == initial { b } else { lo + width };
        let (value, error) = gk15(&f, lo, hi)?;
        heap.push(Piece { a: lo, b: hi, value, error });
    }
    loop {
        let mut total = [0.0; N];
        let mut err = 0.0;
        for p in heap.iter() {
            for c in 0..N {
                total[c] += p.value[c];
            }
            err += p.error;
        }
        let scale = total.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = abs_tol.max(rel_tol * scale);
        if err <= tol {
            return Ok(QuadResult {
                value: total,
                error: err,
                intervals: heap.len(),
            });
        }
        if heap.len() >= max_intervals {
            return Err(QuadError::NotConverged {
                tol,
                error: err,
                intervals: heap.len(),
            });
        }
        let worst = heap.pop().expect("non-empty heap");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(QuadError::NotConverged {
                tol,
                error: err,
                intervals: heap.len() + 1,
            });
        }
        for (lo, hi) in [(worst.a, mid), (mid, worst.b)] {
            let (value, error) = gk15(&f, lo, hi)?;
            heap.push(Piece { a: lo, b: hi, value, error });
        }
    }
}

/// Scalar convenience wrapper.
pub fn integrate_scalar<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<(f64, f64), QuadError> {
    let r = integrate_adaptive(|x| [f(x)], a, b, tol, 0.0, 4, 4000)?;
    Ok((r.value[0], r.error))
}
