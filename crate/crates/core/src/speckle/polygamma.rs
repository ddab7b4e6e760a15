//! Digamma and higher polygamma functions on the positive reals.
//!
//! Recurrence-shift into the asymptotic region (x >= 10), then a
//! Bernoulli-coefficient asymptotic expansion. Orders 0..=3 cover the
//! moments of log-Gamma noise: mean, variance, skewness, excess kurtosis.

use crate::error::{Error, Result};

/// B_{2k} for k = 1..=8.
const BERNOULLI: [f64; 8] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
];

const ASYMPTOTIC_CUTOFF: f64 = 10.0;

/// psi^(order)(x) for order in 0..=3 and x > 0.
pub fn polygamma(order: u32, x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Param(format!("polygamma requires finite x > 0, got {x}")));
    }
    if order > 3 {
        return Err(Error::Param(format!("polygamma order {order} not supported (max 3)")));
    }
    let n = order as i32;
    // psi^(n)(x) = psi^(n)(x+1) + (-1)^(n+1) * n! / x^(n+1)
    let n_fact = (1..=n).map(|k| k as f64).product::<f64>();
    let sign_rec = if n % 2 == 0 { -1.0 } else { 1.0 };
    let mut shift = 0.0;
    let mut xx = x;
    while xx < ASYMPTOTIC_CUTOFF {
        shift += sign_rec * n_fact / xx.powi(n + 1);
        xx += 1.0;
    }
    Ok(shift + polygamma_asymptotic(n, n_fact, xx))
}

/// Asymptotic expansion, valid for large x.
fn polygamma_asymptotic(n: i32, n_fact: f64, x: f64) -> f64 {
    if n == 0 {
        // psi(x) ~ ln x - 1/(2x) - sum B_2k / (2k x^(2k))
        let inv = 1.0 / x;
        let inv2 = inv * inv;
        let mut term = inv2;
        let mut acc = x.ln() - 0.5 * inv;
        for (k, &b) in BERNOULLI.iter().enumerate() {
            let two_k = 2.0 * (k + 1) as f64;
            acc -= b / two_k * term;
            term *= inv2;
        }
        return acc;
    }
    // psi^(n)(x) ~ (-1)^(n-1) [ (n-1)!/x^n + n!/(2 x^(n+1))
    //                           + sum B_2k (2k+n-1)!/(2k)! / x^(2k+n) ]
    let sign = if (n - 1) % 2 == 0 { 1.0 } else { -1.0 };
    let nm1_fact = n_fact / n as f64;
    let mut acc = nm1_fact / x.powi(n) + n_fact / (2.0 * x.powi(n + 1));
    for (k, &b) in BERNOULLI.iter().enumerate() {
        let two_k = 2 * (k + 1) as i32;
        // (2k + n - 1)! / (2k)! = product of (2k+1) ..= (2k+n-1)
        let ratio: f64 = (two_k + 1..=two_k + n - 1).map(|j| j as f64).product();
        acc += b * ratio / x.powi(two_k + n);
    }
    sign * acc
}

pub fn digamma(x: f64) -> Result<f64> {
    polygamma(0, x)
}

pub fn trigamma(x: f64) -> Result<f64> {
    polygamma(1, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    const ZETA3: f64 = 1.202_056_903_159_594_3;

    fn assert_close(a: f64, b: f64, rel: f64) {
        assert!((a - b).abs() <= rel * b.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn digamma_known_values() {
        assert_close(digamma(1.0).unwrap(), -EULER_GAMMA, 1e-13);
        assert_close(digamma(0.5).unwrap(), -EULER_GAMMA - 2.0 * 2f64.ln(), 1e-13);
        // psi(4) = psi(1) + 1 + 1/2 + 1/3
        assert_close(digamma(4.0).unwrap(), -EULER_GAMMA + 11.0 / 6.0, 1e-13);
        // large argument
        assert_close(digamma(1000.0).unwrap(), 1000f64.ln() - 0.0005 - 1.0 / 12e6, 1e-10);
    }

    #[test]
    fn trigamma_known_values() {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        assert_close(trigamma(1.0).unwrap(), pi2 / 6.0, 1e-13);
        assert_close(trigamma(0.5).unwrap(), pi2 / 2.0, 1e-13);
        // psi'(4) = pi^2/6 - 1 - 1/4 - 1/9
        assert_close(trigamma(4.0).unwrap(), pi2 / 6.0 - 49.0 / 36.0, 1e-13);
    }

    #[test]
    fn higher_orders_known_values() {
        let pi4 = std::f64::consts::PI.powi(4);
        assert_close(polygamma(2, 1.0).unwrap(), -2.0 * ZETA3, 1e-13);
        assert_close(polygamma(3, 1.0).unwrap(), pi4 / 15.0, 1e-13);
        // psi^(n)(1/2) = (-1)^(n+1) n! (2^(n+1) - 1) zeta(n+1)
        assert_close(polygamma(2, 0.5).unwrap(), -14.0 * ZETA3, 1e-13);
        assert_close(polygamma(3, 0.5).unwrap(), pi4, 1e-13);
    }

    #[test]
    fn recurrence_consistency() {
        // psi^(n)(x+1) - psi^(n)(x) = (-1)^n n!/x^(n+1) across the shift cutoff
        for n in 0..=3u32 {
            for &x in &[0.5, 2.3, 9.7, 25.0] {
                let lhs = polygamma(n, x + 1.0).unwrap() - polygamma(n, x).unwrap();
                let nf: f64 = (1..=n).map(|k| k as f64).product();
                let rhs = if n % 2 == 0 { 1.0 } else { -1.0 } * nf / x.powi(n as i32 + 1);
                assert_close(lhs, rhs, 1e-11);
            }
        }
    }

    #[test]
    fn rejects_invalid_arguments() {
        assert!(polygamma(0, 0.0).is_err());
        assert!(polygamma(1, -2.0).is_err());
        assert!(polygamma(4, 1.0).is_err());
        assert!(polygamma(0, f64::NAN).is_err());
    }
}
