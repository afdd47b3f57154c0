//! Scalar distribution functions: χ² (small integer dof) and the Gaussian.
//!
//! The regularized incomplete gamma functions come from `statrs`; the χ² quantile is
//! Newton iteration on the log-tail with a bisection safeguard.

use statrs::function::erf;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

fn check_dof(dof: u32) -> Result<()> {
    if (1..=3).contains(&dof) {
        Ok(())
    } else {
        Err(Error::Domain(format!("chi-squared dof must be 1, 2 or 3 (got {dof})")))
    }
}

/// `Pr(X ≤ x)` for `X ~ χ²(dof)`.
pub fn chi2_cdf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if dof == 2 {
        return -(-0.5 * x).exp_m1();
    }
    gamma_lr(0.5 * dof as f64, 0.5 * x)
}

/// `Pr(X > x)` for `X ~ χ²(dof)`, accurate deep into the tail.
pub fn chi2_sf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if dof == 2 {
        return (-0.5 * x).exp();
    }
    gamma_ur(0.5 * dof as f64, 0.5 * x)
}

pub fn chi2_pdf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 {
        // dof 1 diverges at 0; dof 2 has density 1/2 there.
        return match dof {
            1 => f64::INFINITY,
            2 => 0.5,
            _ => 0.0,
        };
    }
    let k = 0.5 * dof as f64;
    ((k - 1.0) * x.ln() - 0.5 * x - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Inverse CDF of χ²(dof): the `x` with `Pr(X ≤ x) = p`.
pub fn chi2_quantile(p: f64, dof: u32) -> Result<f64> {
    check_dof(dof)?;
    if p.is_nan() || p < 0.0 || p > 1.0 {
        return Err(Error::Domain(format!("probability {p} outside [0, 1)")));
    }
    if p == 1.0 {
        return Err(Error::InfiniteQuantile);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if dof == 2 {
        return Ok(-2.0 * (-p).ln_1p());
    }
    if p > 0.5 {
        Ok(invert(1.0 - p, dof, Tail::Upper))
    } else {
        Ok(invert(p, dof, Tail::Lower))
    }
}

/// Inverse survival function: the `x` with `Pr(X > x) = q`, for `0 < q ≤ 1`.
///
/// Preferred over `chi2_quantile(1 - q)` when `q` is tiny.
pub fn chi2_isf(q: f64, dof: u32) -> Result<f64> {
    check_dof(dof)?;
    if q.is_nan() || q <= 0.0 || q > 1.0 {
        if q == 0.0 {
            return Err(Error::InfiniteQuantile);
        }
        return Err(Error::Domain(format!("tail probability {q} outside (0, 1]")));
    }
    if q == 1.0 {
        return Ok(0.0);
    }
    if dof == 2 {
        return Ok(-2.0 * q.ln());
    }
    if q < 0.5 {
        Ok(invert(q, dof, Tail::Upper))
    } else {
        Ok(invert(1.0 - q, dof, Tail::Lower))
    }
}

#[derive(Clone, Copy)]
enum Tail {
    Lower,
    Upper,
}

/// Solves `ln tail(x) = ln target` by safeguarded Newton.
fn invert(target: f64, dof: u32, tail: Tail) -> f64 {
    let ln_target = target.ln();
    let residual = |x: f64| -> f64 {
        match tail {
            Tail::Lower => chi2_cdf(x, dof).ln() - ln_target,
            Tail::Upper => chi2_sf(x, dof).ln() - ln_target,
        }
    };
    // Bracket: the lower-tail residual increases with x, the upper-tail one decreases.
    let increasing = matches!(tail, Tail::Lower);
    let mut lo = 0.0_f64;
    let mut hi = (dof as f64).max(1.0);
    while (residual(hi) < 0.0) == increasing {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = wilson_hilferty(target, dof, tail).clamp(lo, hi);
    if !(x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let r = residual(x);
        if r == 0.0 {
            return x;
        }
        if (r < 0.0) == increasing {
            lo = x;
        } else {
            hi = x;
        }
        let pdf = chi2_pdf(x, dof);
        let tail_value = match tail {
            Tail::Lower => chi2_cdf(x, dof),
            Tail::Upper => chi2_sf(x, dof),
        };
        let slope = match tail {
            Tail::Lower => pdf / tail_value,
            Tail::Upper => -pdf / tail_value,
        };
        let mut next = x - r / slope;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
            return next;
        }
        x = next;
    }
    x
}

fn wilson_hilferty(target: f64, dof: u32, tail: Tail) -> f64 {
    let k = dof as f64;
    let z = match tail {
        Tail::Lower => normal_quantile(target),
        Tail::Upper => -normal_quantile(target),
    };
    let c = 2.0 / (9.0 * k);
    let base = 1.0 - c + z * c.sqrt();
    (k * base * base * base).max(1e-8)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal inverse CDF.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p)
}
