//! Modified Bessel functions of the first kind and the vMF quantities built
//! on them.
//!
//! Everything is evaluated in the log domain or as ratios, so concentrations
//! up to `1e6` and beyond neither overflow nor lose the `e^z` scale.
//!
//! Strategy for `log I_r(z)`:
//! * ascending power series (positive terms, rescaled on the fly) whenever the
//!   large-argument expansion is not yet accurate;
//! * Hankel's large-argument expansion `I_r(z) ~ e^z / sqrt(2 pi z) * sum_k
//!   (-1)^k a_k(r) / z^k` once `z >= HANKEL_MIN` and the terms decay to machine
//!   precision before they start to grow.
//!
//! The ratio `I_{r+1}/I_r` uses the Gauss continued fraction (modified Lentz)
//! for moderate arguments and the difference of scaled logarithms beyond.

use std::f64::consts::PI;

use crate::error::{domain, Result};

/// Below this argument the series is always used.
const HANKEL_MIN: f64 = 25.0;
/// Above this argument the ratio is taken from scaled logs instead of the
/// continued fraction, whose length grows linearly in `z`.
const RATIO_CF_MAX: f64 = 500.0;
const SERIES_MAX_TERMS: usize = 10_000_000;

/// Order `r >= 0` of `I_r`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BesselOrder(f64);

impl BesselOrder {
    pub fn new(order: f64) -> Result<Self> {
        if order.is_finite() && order >= 0.0 {
            Ok(Self(order))
        } else {
            Err(domain(format!("Bessel order must be finite and >= 0, got {order}")))
        }
    }

    /// `d/2 - 1`, the order appearing in the vMF normalizing constant.
    pub fn for_dimension(d: usize) -> Result<Self> {
        check_dim(d)?;
        Ok(Self(d as f64 / 2.0 - 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(domain(format!("dimension must be >= 2, got {d}")));
    }
    Ok(())
}

fn check_arg(z: f64) -> Result<()> {
    if !(z >= 0.0) || z.is_infinite() {
        return Err(domain(format!("argument must be finite and >= 0, got {z}")));
    }
    Ok(())
}

/// `log I_order(z)`.
pub fn log_bessel_i(order: BesselOrder, z: f64) -> Result<f64> {
    check_arg(z)?;
    let r = order.value();
    if z == 0.0 {
        return Ok(if r == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    Ok(log_bessel_i_scaled_unchecked(r, z) + z)
}

/// `log(I_order(z) e^{-z})`, the exponentially scaled log.
pub fn log_bessel_i_scaled(order: BesselOrder, z: f64) -> Result<f64> {
    check_arg(z)?;
    let r = order.value();
    if z == 0.0 {
        return Ok(if r == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    Ok(log_bessel_i_scaled_unchecked(r, z))
}

fn log_bessel_i_scaled_unchecked(r: f64, z: f64) -> f64 {
    if z >= HANKEL_MIN {
        if let Some(v) = hankel_log_scaled(r, z) {
            return v;
        }
    }
    series_log(r, z) - z
}

/// Ascending series `I_r(z) = (z/2)^r / Gamma(r+1) * sum_k (z^2/4)^k / (k! (r+1)_k)`,
/// returned as a logarithm. Terms are positive, so there is no cancellation;
/// the running sum is rescaled to stay in range for huge `z`.
fn series_log(r: f64, z: f64) -> f64 {
    const RESCALE_AT: f64 = 1e250;
    let q = 0.25 * z * z;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut log_scale = 0.0_f64;
    let mut k = 0usize;
    loop {
        let kf = k as f64;
        term *= q / ((kf + 1.0) * (r + kf + 1.0));
        sum += term;
        k += 1;
        if sum > RESCALE_AT {
            sum /= RESCALE_AT;
            term /= RESCALE_AT;
            log_scale += RESCALE_AT.ln();
        }
        // Past the peak term the tail is bounded by a geometric series.
        let ratio = q / ((kf + 2.0) * (r + kf + 2.0));
        if ratio < 1.0 && term < 1e-17 * sum * (1.0 - ratio) {
            break;
        }
        if k >= SERIES_MAX_TERMS {
            break;
        }
    }
    r * (0.5 * z).ln() - libm::lgamma(r + 1.0) + sum.ln() + log_scale
}

/// Hankel expansion of the scaled log. `None` if the asymptotic series does
/// not reach full precision before its terms start growing.
fn hankel_log_scaled(r: f64, z: f64) -> Option<f64> {
    let mu = 4.0 * r * r;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut prev_abs = f64::INFINITY;
    for k in 1..200 {
        let odd = (2 * k - 1) as f64;
        term *= -(mu - odd * odd) / (8.0 * k as f64 * z);
        let abs = term.abs();
        if abs == 0.0 {
            // Half-integer order: the expansion terminates exactly.
            break;
        }
        if abs > prev_abs {
            return None;
        }
        sum += term;
        if abs < 1e-17 * sum.abs() {
            break;
        }
        prev_abs = abs;
        if k == 199 {
            return None;
        }
    }
    if sum <= 0.0 {
        return None;
    }
    Some(-0.5 * (2.0 * PI * z).ln() + sum.ln())
}

/// `I_{r+1}(z) / I_r(z)` for `r >= 0`, `z >= 0`.
pub fn bessel_i_ratio(order: BesselOrder, z: f64) -> Result<f64> {
    check_arg(z)?;
    let r = order.value();
    if z == 0.0 {
        return Ok(0.0);
    }
    if z <= RATIO_CF_MAX {
        return Ok(ratio_continued_fraction(r, z));
    }
    let hi = log_bessel_i_scaled_unchecked(r + 1.0, z);
    let lo = log_bessel_i_scaled_unchecked(r, z);
    Ok((hi - lo).exp())
}

/// Gauss continued fraction
/// `I_{r+1}/I_r = 1 / (2(r+1)/z + 1 / (2(r+2)/z + ...))`, modified Lentz.
fn ratio_continued_fraction(r: f64, z: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0_f64;
    for k in 1..1_000_000 {
        let b = 2.0 * (r + k as f64) / z;
        d += b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + 1.0 / c;
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
    f
}

/// Log of the surface area of `S^{d-1}`: `log(2 pi^{d/2} / Gamma(d/2))`.
pub fn log_sphere_area(d: usize) -> Result<f64> {
    check_dim(d)?;
    let h = d as f64 / 2.0;
    Ok(2.0_f64.ln() + h * PI.ln() - libm::lgamma(h))
}

/// `log c_d(kappa)` with `c_d(kappa) = kappa^{d/2-1} / ((2 pi)^{d/2} I_{d/2-1}(kappa))`.
///
/// At `kappa = 0` this is the uniform density, the continuous limit of the
/// expression (which is `0/0` there for `d > 2`).
pub fn log_norm_const(d: usize, kappa: f64) -> Result<f64> {
    check_dim(d)?;
    check_arg(kappa)?;
    if kappa == 0.0 {
        return Ok(-log_sphere_area(d)?);
    }
    let r = d as f64 / 2.0 - 1.0;
    let log_i = log_bessel_i_scaled_unchecked(r, kappa) + kappa;
    Ok(r * kappa.ln() - (d as f64 / 2.0) * (2.0 * PI).ln() - log_i)
}

/// Mean resultant length of a vMF: `A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa)`.
pub fn bessel_ratio(d: usize, kappa: f64) -> Result<f64> {
    check_dim(d)?;
    bessel_i_ratio(BesselOrder(d as f64 / 2.0 - 1.0), kappa)
}

/// `dA_d/dkappa = 1 - A^2 - (d-1) A / kappa`.
fn bessel_ratio_derivative(d: usize, kappa: f64, a: f64) -> f64 {
    if kappa == 0.0 {
        return 1.0 / d as f64;
    }
    1.0 - a * a - (d as f64 - 1.0) * a / kappa
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(domain(format!("mean resultant length must lie in [0, 1), got {rho}")));
    }
    Ok(())
}

/// Banerjee's closed-form approximation `rho (d - rho^2) / (1 - rho^2)`.
pub fn kappa_approx(d: usize, rho: f64) -> Result<f64> {
    check_dim(d)?;
    check_rho(rho)?;
    let r2 = rho * rho;
    Ok(rho * (d as f64 - r2) / (1.0 - r2))
}

/// Exact inverse of [`bessel_ratio`]: the `kappa` with `A_d(kappa) = rho`.
///
/// Brackets around the closed-form approximation, then runs Newton steps
/// that fall back to bisection whenever they leave the bracket.
pub fn solve_kappa_exact(d: usize, rho: f64) -> Result<f64> {
    check_dim(d)?;
    check_rho(rho)?;
    if rho == 0.0 {
        return Ok(0.0);
    }
    let ratio = |k: f64| bessel_ratio(d, k).expect("kappa is finite and >= 0");

    let start = kappa_approx(d, rho)?;
    let mut lo = 0.0_f64;
    let mut hi = (2.0 * start).max(1.0);
    while ratio(hi) < rho {
        lo = hi;
        hi *= 2.0;
    }

    let mut kappa = start.clamp(lo, hi);
    if kappa <= lo || kappa >= hi {
        kappa = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let a = ratio(kappa);
        let f = a - rho;
        if f.abs() <= 1e-15 {
            break;
        }
        if f < 0.0 {
            lo = kappa;
        } else {
            hi = kappa;
        }
        let slope = bessel_ratio_derivative(d, kappa, a);
        let mut next = kappa - f / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - kappa).abs() <= 1e-15 * kappa.max(1.0) || hi - lo <= 1e-15 * hi {
            kappa = next;
            break;
        }
        kappa = next;
    }
    Ok(kappa)
}
