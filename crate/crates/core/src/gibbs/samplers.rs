//! Exact samplers for the non-standard full conditionals.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, StandardNormal};

use crate::linalg::Mat;
use crate::normal;

/// Z ~ N(0, 1) conditioned on Z > a.
pub fn std_normal_above<R: Rng + ?Sized>(rng: &mut R, a: f64) -> f64 {
    if a <= 0.25 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > a {
                return z;
            }
        }
    }
    // Exponential proposal with the optimal rate.
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = rng.sample(Exp1);
        let z = a + e / alpha;
        let u: f64 = rng.random();
        if u <= (-0.5 * (z - alpha) * (z - alpha)).exp() {
            return z;
        }
    }
}

/// z ~ N(mu, 1) truncated to (0, ∞) if `positive`, else to (−∞, 0].
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mu: f64, positive: bool) -> f64 {
    if positive {
        mu + std_normal_above(rng, -mu)
    } else {
        // The boundary has measure zero; −(−mu + Z) with Z > mu lies in (−∞, 0).
        -(-mu + std_normal_above(rng, mu))
    }
}

const PG_TRUNC: f64 = 0.64;

fn pg_coef(n: usize, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > PG_TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let h = n as f64 + 0.5;
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * h * h / x).exp()
    } else {
        0.0
    }
}

fn pg_mass_texpon(z: f64) -> f64 {
    let t = PG_TRUNC;
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let b = (1.0 / t).sqrt() * (t * z - 1.0);
    let a = -(1.0 / t).sqrt() * (t * z + 1.0);
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + normal::ln_cdf(b);
    let xa = x0 + z + normal::ln_cdf(a);
    let qdivp = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + qdivp)
}

/// Inverse Gaussian(1/z, 1) truncated to (0, PG_TRUNC).
fn pg_truncated_inv_gauss<R: Rng + ?Sized>(rng: &mut R, z: f64) -> f64 {
    let t = PG_TRUNC;
    if z < 1.0 / t {
        loop {
            let (mut e1, mut e2): (f64, f64) = (rng.sample(Exp1), rng.sample(Exp1));
            while e1 * e1 > 2.0 * e2 / t {
                e1 = rng.sample(Exp1);
                e2 = rng.sample(Exp1);
            }
            let x = t / ((1.0 + e1 * t) * (1.0 + e1 * t));
            let u: f64 = rng.random();
            if u <= (-0.5 * z * z * x).exp() {
                return x;
            }
        }
    }
    let mu = 1.0 / z;
    loop {
        let y: f64 = rng.sample(StandardNormal);
        let muy = mu * y * y;
        let mut x = mu + 0.5 * mu * muy - 0.5 * mu * (4.0 * muy + muy * muy).sqrt();
        let u: f64 = rng.random();
        if u > mu / (mu + x) {
            x = mu * mu / x;
        }
        if x <= t {
            return x;
        }
    }
}

/// Pólya-Gamma PG(1, c) by Devroye-style alternating-series rejection.
pub fn polya_gamma<R: Rng + ?Sized>(rng: &mut R, c: f64) -> f64 {
    let z = 0.5 * c.abs();
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let p_exp = pg_mass_texpon(z);
    loop {
        let x = if rng.random::<f64>() < p_exp {
            let e: f64 = rng.sample(Exp1);
            PG_TRUNC + e / fz
        } else {
            pg_truncated_inv_gauss(rng, z)
        };
        let mut s = pg_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= pg_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += pg_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// PG(1, c) density by direct series summation.
pub fn polya_gamma_density(x: f64, c: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 0..400 {
        let h = 2.0 * n as f64 + 1.0;
        let term = h * (-h * h / (8.0 * x)).exp();
        if n % 2 == 0 {
            total += term;
        } else {
            total -= term;
        }
        if term < 1e-300 {
            break;
        }
    }
    let base = total / (2.0 * PI * x * x * x).sqrt();
    (0.5 * c).cosh() * (-0.5 * c * c * x).exp() * base
}

/// Wishart(df, scale) by the Bartlett decomposition; needs df > P − 1.
pub fn wishart<R: Rng + ?Sized>(rng: &mut R, df: f64, scale: &Mat) -> Option<Mat> {
    let p = scale.nrows();
    let l = scale.clone().cholesky()?.l();
    let mut a = Mat::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).ok()?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    Some((&w + w.transpose()) * 0.5)
}
