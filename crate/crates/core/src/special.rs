//! Scalar special functions used by the likelihood kernels and solvers.

use crate::error::{Error, Result};

pub use statrs::function::gamma::ln_gamma;

/// log(exp(a) + exp(b)) without overflow; tolerates `-inf` arguments.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log(exp(x[0]) + ... + exp(x[m-1])); `-inf` for an all-`-inf` slice.
#[inline]
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - hi).exp()).sum();
    hi + sum.ln()
}

/// Table of log(y!) for y in 0..=max, indexed by count value.
pub(crate) fn ln_factorial_table(max: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(max + 1);
    t.push(0.0);
    for y in 1..=max {
        t.push(t[y - 1] + (y as f64).ln());
    }
    t
}

// Coefficients of the asymptotic expansion psi(x) ~ ln x - 1/(2x) - sum c_i / x^(2i),
// i.e. B_{2i}/(2i): 1/12, -1/120, 1/252, -1/240, 1/132, -691/32760.
const DIGAMMA_ASYMP: [f64; 6] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
];

/// Digamma function psi(x) = d/dx ln Gamma(x) for x > 0.
///
/// Evaluated by the upward recurrence psi(x+1) = psi(x) + 1/x until the
/// argument reaches 8, then the asymptotic series; absolute error is below
/// 1e-13 over the positive axis.
pub fn digamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!("digamma requires x > 0, got {x}")));
    }
    let mut acc = 0.0;
    let mut z = x;
    while z < 8.0 {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let mut series = 0.0;
    let mut pow = inv2;
    for c in DIGAMMA_ASYMP {
        series += c * pow;
        pow *= inv2;
    }
    Ok(acc + z.ln() - 0.5 / z - series)
}

/// psi(y + nu) - psi(nu) for integer y >= 0, evaluated as the exact finite
/// sum of 1/(nu + j); avoids cancellation between two large digamma values.
#[inline]
pub(crate) fn digamma_diff(y: u32, nu: f64) -> f64 {
    let mut s = 0.0;
    for j in 0..y {
        s += 1.0 / (nu + j as f64);
    }
    s
}
