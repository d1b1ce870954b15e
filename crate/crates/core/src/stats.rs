//! Quantiles and the chi-squared distribution.

use crate::error::{Error, Result};

/// Linear-interpolation quantile over the sorted values: with
/// `h = (n − 1)·q`, returns `v[⌊h⌋] + (h − ⌊h⌋)(v[⌊h⌋+1] − v[⌊h⌋])`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("quantile of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 1000;

/// Regularized lower incomplete gamma `P(a, x)`.
///
/// Series expansion for `x < a + 1`, Lentz continued fraction for the
/// upper tail otherwise.
pub fn regularized_gamma_p(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || x.is_nan() {
        return Err(Error::Numeric(format!("incomplete gamma undefined at a={a}, x={x}")));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..GAMMA_MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * GAMMA_EPS {
                return Ok((sum.ln() + log_prefix).exp().min(1.0));
            }
        }
        Err(Error::Numeric("incomplete gamma series did not converge".into()))
    } else {
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < GAMMA_EPS {
                let upper = (log_prefix.exp() * h).clamp(0.0, 1.0);
                return Ok(1.0 - upper);
            }
        }
        Err(Error::Numeric(
            "incomplete gamma continued fraction did not converge".into(),
        ))
    }
}

/// Chi-squared CDF with `dof` degrees of freedom.
pub fn chi2_cdf(x: f64, dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Config("chi-squared needs dof >= 1".into()));
    }
    regularized_gamma_p(dof as f64 / 2.0, x / 2.0)
}

const BISECTION_TOL: f64 = 1e-10;
const BISECTION_MAX_ITER: usize = 400;

/// Inverse chi-squared CDF by bisection to absolute tolerance 1e-10.
pub fn chi2_inv_cdf(p: f64, dof: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("chi-squared quantile level {p} outside (0, 1)")));
    }
    if dof == 0 {
        return Err(Error::Config("chi-squared needs dof >= 1".into()));
    }
    let mut lo = 0.0;
    let mut hi = dof as f64 + 10.0 * (2.0 * dof as f64).sqrt() + 10.0;
    let mut grow = 0;
    while chi2_cdf(hi, dof)? < p {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 64 {
            return Err(Error::Numeric("could not bracket chi-squared quantile".into()));
        }
    }
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, dof)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < BISECTION_TOL {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::Numeric("chi-squared bisection did not converge".into()))
}
