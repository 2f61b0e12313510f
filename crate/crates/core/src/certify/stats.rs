//! Gaussian and binomial kernels used by certification.

use crate::error::{invalid, Result};

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.0 {
        erf_series(x)
    } else {
        1.0 - erfc_continued_fraction(x)
    }
}

/// Complementary error function, accurate in relative terms for large `x`.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 0.5 {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

// erf(x) = 2/sqrt(pi) e^{-x^2} sum_n 2^n x^{2n+1} / (1*3*...*(2n+1)); all
// terms are positive, so there is no cancellation.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= 2.0 * x2 / (2.0 * k + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

// erfc(x) = e^{-x^2}/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
// evaluated with the modified Lentz method; used for x >= 0.5.
fn erfc_continued_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..5000 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard normal CDF.
///
/// Acklam's rational approximation (relative error about 1e-9) followed by
/// two Halley corrections against [`normal_cdf`].
pub fn inv_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid!("inverse normal CDF needs 0 < p < 1, got {p}"));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996e0,
        3.754408661907416e0,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    let mut z = if p < P_LOW {
        tail(p)
    } else if p > 1.0 - P_LOW {
        -tail(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        // Work with the smaller tail so the residual keeps relative precision.
        let e = if z > 0.0 {
            (1.0 - p) - normal_cdf(-z)
        } else {
            normal_cdf(z) - p
        };
        let u = e / normal_pdf(z);
        z -= u / (1.0 + 0.5 * z * u);
    }
    Ok(z)
}

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x < 10.0 {
        // Shift upward so the asymptotic series is accurate.
        let mut shift = 0.0;
        let mut y = x;
        while y < 10.0 {
            shift += y.ln();
            y += 1.0;
        }
        return ln_gamma(y) - shift;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0)))));
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + series
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(invalid!("incomplete beta needs a, b > 0, got a={a}, b={b}"));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(invalid!("incomplete beta needs x in [0, 1], got {x}"));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_continued_fraction(x, a, b) / a)
    } else {
        Ok(1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b)
    }
}

// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..100_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// `q`-quantile of `Beta(a, b)` by bisection on [`regularized_inc_beta`].
/// The bracket is narrowed until its width is below `1e-15`.
pub fn beta_quantile(q: f64, a: f64, b: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid!("beta quantile level must be in (0, 1), got {q}"));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if regularized_inc_beta(mid, a, b)? < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One-sided exact lower confidence bound on a binomial proportion: the
/// `alpha` quantile of `Beta(k, n - k + 1)`, and `0` when `k = 0`.
pub fn clopper_pearson_lower(k: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 || k > n {
        return Err(invalid!("need 0 <= k <= n and n >= 1, got k={k}, n={n}"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid!("alpha must be in (0, 1), got {alpha}"));
    }
    if k == 0 {
        return Ok(0.0);
    }
    beta_quantile(alpha, k as f64, (n - k + 1) as f64)
}

/// `P[X >= k]` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> Result<f64> {
    if k == 0 {
        return Ok(1.0);
    }
    if k > n {
        return Ok(0.0);
    }
    regularized_inc_beta(p, k as f64, (n - k + 1) as f64)
}

/// Two-sided exact binomial test of `successes` out of `trials` against
/// `p = 1/2`.
pub fn binomial_test_half(successes: u64, trials: u64) -> Result<f64> {
    if successes > trials {
        return Err(invalid!("{successes} successes out of {trials} trials"));
    }
    if trials == 0 {
        return Ok(1.0);
    }
    let extreme = successes.max(trials - successes);
    Ok((2.0 * binomial_upper_tail(extreme, trials, 0.5)?).min(1.0))
}

/// Two-class radius `sigma / 2 * (Phi^-1(p_a) - Phi^-1(p_b))`.
pub fn radius_two_class(sigma: f64, p_a: f64, p_b: f64) -> Result<f64> {
    Ok(0.5 * sigma * (inv_normal_cdf(p_a)? - inv_normal_cdf(p_b)?))
}

/// One-sided radius `sigma * Phi^-1(p_a)`, i.e. the two-class form with
/// `p_b = 1 - p_a`.
pub fn radius_one_sided(sigma: f64, p_a: f64) -> Result<f64> {
    Ok(sigma * inv_normal_cdf(p_a)?)
}
