//! Standard normal density, distribution and Mills-ratio helpers that stay
//! accurate far into the tails.

use statrs::function::erf::{erfc, erfc_inv};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this point the continued fraction is used instead of `erfc`.
const TAIL_SWITCH: f64 = -5.0;

#[inline]
pub fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn ln_pdf(x: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * x * x
}

#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Φ⁻¹(p) for p in (0, 1).
pub fn quantile(p: f64) -> f64 {
    let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() || p < 1e-300 {
        return x;
    }
    // one Halley refinement
    let e = cdf(x) - p;
    let u = e / pdf(x);
    x - u / (1.0 + 0.5 * x * u)
}

/// Upper-tail Mills ratio R(t) = (1 − Φ(t)) / φ(t) for t ≥ 5 via Lentz's
/// continued fraction R(t) = 1/(t + 1/(t + 2/(t + 3/(t + …)))).
fn upper_mills(t: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = t;
    let mut c = t;
    let mut d = 0.0;
    for k in 1..200 {
        let a = k as f64;
        d = t + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = t + a / c;
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
    1.0 / f
}

/// ln Φ(x).
pub fn ln_cdf(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        ln_pdf(x) + upper_mills(-x).ln()
    } else if x > 5.0 {
        (-0.5 * erfc(x * std::f64::consts::FRAC_1_SQRT_2)).ln_1p()
    } else {
        cdf(x).ln()
    }
}

/// Inverse Mills ratio φ(x)/Φ(x).
pub fn inv_mills(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        1.0 / upper_mills(-x)
    } else {
        pdf(x) / cdf(x)
    }
}

/// Returns (ln Φ(x), φ(x)/Φ(x)) sharing one `erfc` evaluation.
#[inline]
pub fn ln_cdf_and_inv_mills(x: f64) -> (f64, f64) {
    if x < TAIL_SWITCH {
        let r = upper_mills(-x);
        (ln_pdf(x) + r.ln(), 1.0 / r)
    } else {
        let c = cdf(x);
        let lc = if x > 5.0 {
            (-0.5 * erfc(x * std::f64::consts::FRAC_1_SQRT_2)).ln_1p()
        } else {
            c.ln()
        };
        (lc, pdf(x) / c)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + eˣ).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// ln σ(x).
#[inline]
pub fn ln_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
