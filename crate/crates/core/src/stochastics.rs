//! Deterministic linear algebra and seeded sampling kernels.
//!
//! Everything here is a pure function of its arguments and the RNG state:
//! the same seed always reproduces the same stream. The spatial pieces
//! implement the exponential covariance `phi1 * exp(-d * phi2)` used for the
//! latent field; the samplers cover the distributions needed by the Gibbs
//! and Metropolis updates (multivariate normal, truncated normal,
//! gamma / inverse-gamma).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal CDF, computed through `erfc` so the lower tail keeps
/// relative precision down to ~1e-300.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal survival function `P(X > x)`.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Standard normal quantile function.
pub fn norm_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Quantile of the survival function: returns `x` with `P(X > x) = q`.
pub fn norm_upper_quantile(q: f64) -> f64 {
    SQRT_2 * erfc_inv(2.0 * q)
}

/// Standard normal log density.
pub fn ln_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// `ln P(X > x)`, switching to the asymptotic expansion once `erfc`
/// underflows (|x| beyond ~37).
pub fn ln_norm_sf(x: f64) -> f64 {
    if x < 36.0 {
        let q = norm_sf(x);
        if q > 0.0 {
            return q.ln();
        }
    }
    // Mills-ratio expansion: P(X > x) ~ phi(x)/x * (1 - 1/x^2 + 3/x^4)
    ln_norm_pdf(x) - x.ln() + (1.0 - 1.0 / (x * x) + 3.0 / (x * x * x * x)).ln()
}

/// `ln(Phi(b) - Phi(a))` for `a < b` (either bound may be infinite),
/// computed on whichever side of the origin keeps the difference stable.
pub fn ln_interval_prob(a: f64, b: f64) -> f64 {
    debug_assert!(a < b);
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return 0.0;
    }
    if a >= 0.0 {
        // both bounds in the upper half: work with survival functions
        let la = ln_norm_sf(a);
        if b == f64::INFINITY {
            return la;
        }
        let lb = ln_norm_sf(b);
        // ln(q_a - q_b) = ln q_a + ln(1 - exp(lb - la))
        let d = lb - la;
        return la + ln_one_minus_exp(d);
    }
    if b <= 0.0 {
        return ln_interval_prob(-b, -a);
    }
    // interval straddles the origin; the mass is not small
    let mass = norm_cdf(b) - norm_cdf(a);
    if mass > 0.0 {
        mass.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `ln(1 - e^d)` for `d <= 0`.
fn ln_one_minus_exp(d: f64) -> f64 {
    if d >= 0.0 {
        return f64::NEG_INFINITY;
    }
    if d > -std::f64::consts::LN_2 {
        (-d.exp_m1()).ln()
    } else {
        (-d.exp()).ln_1p()
    }
}

/// Pairwise Euclidean distance matrix of `n` planar points (n x 2 input).
pub fn distance_matrix(coords: &DMatrix<f64>) -> DMatrix<f64> {
    let n = coords.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for l in (i + 1)..n {
            let dx = coords[(i, 0)] - coords[(l, 0)];
            let dy = coords[(i, 1)] - coords[(l, 1)];
            let dist = dx.hypot(dy);
            d[(i, l)] = dist;
            d[(l, i)] = dist;
        }
    }
    d
}

/// Distances from each of `m` new points to each of `n` reference points
/// (m x n output).
pub fn cross_distance_matrix(new: &DMatrix<f64>, obs: &DMatrix<f64>) -> DMatrix<f64> {
    let m = new.nrows();
    let n = obs.nrows();
    DMatrix::from_fn(m, n, |i, l| {
        let dx = new[(i, 0)] - obs[(l, 0)];
        let dy = new[(i, 1)] - obs[(l, 1)];
        dx.hypot(dy)
    })
}

/// Exponential covariance `Sigma[i][l] = phi1 * exp(-d_il * phi2)`.
pub fn exp_covariance(d: &DMatrix<f64>, phi1: f64, phi2: f64) -> DMatrix<f64> {
    debug_assert!(phi1 > 0.0 && phi2 > 0.0);
    d.map(|x| phi1 * (-x * phi2).exp())
}

/// Ridge applied to the diagonal of an exponential covariance before
/// factorization, relative to the sill.
pub const COV_RIDGE: f64 = 1e-10;

/// Lower Cholesky factor of the exponential covariance on `d`, with the
/// standard `1e-10 * phi1` diagonal ridge applied before factorization.
pub fn spatial_chol(d: &DMatrix<f64>, phi1: f64, phi2: f64) -> Result<DMatrix<f64>> {
    let mut sigma = exp_covariance(d, phi1, phi2);
    for i in 0..sigma.nrows() {
        sigma[(i, i)] += COV_RIDGE * phi1;
    }
    chol_factor(&sigma)
}

/// Lower Cholesky factor of an SPD matrix. On failure the diagonal jitter is
/// escalated from 1e-10 to 1e-6 of the mean diagonal before giving up.
pub fn chol_factor(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    debug_assert_eq!(s.nrows(), s.ncols());
    if let Some(c) = s.clone().cholesky() {
        return Ok(c.unpack());
    }
    let mean_diag = s.diagonal().iter().sum::<f64>() / s.nrows() as f64;
    let mut jitter = 1e-10;
    while jitter <= 1e-6 {
        let jittered = s + DMatrix::identity(s.nrows(), s.ncols()) * (jitter * mean_diag);
        if let Some(c) = jittered.cholesky() {
            return Ok(c.unpack());
        }
        jitter *= 10.0;
    }
    Err(Error::CovarianceNotPd)
}

/// Symmetric inverse from a lower Cholesky factor: `(L L^T)^-1`.
pub fn chol_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::identity(n, n);
    l.solve_lower_triangular_mut(&mut inv);
    l.transpose().solve_upper_triangular_mut(&mut inv);
    inv
}

/// Log density of `MVN(mean, L L^T)` evaluated at `x`, taking the lower
/// Cholesky factor directly.
pub fn mvn_ln_pdf(x: &DVector<f64>, mean: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let mut r = x - mean;
    l.solve_lower_triangular_mut(&mut r);
    let quad = r.norm_squared();
    let ln_det_half: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * quad - ln_det_half - n * LN_SQRT_2PI
}

/// One draw `mean + L * eta` with `eta` i.i.d. standard normal.
pub fn mvn_sample<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol_lower: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let eta = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol_lower * eta
}

/// Gamma draw in the shape/rate parameterization (mean = shape / rate).
pub fn gamma_sample<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && rate > 0.0);
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters checked")
        .sample(rng)
}

/// Inverse-gamma draw (mean = scale / (shape - 1) for shape > 1).
pub fn inv_gamma_sample<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    1.0 / gamma_sample(shape, scale, rng)
}

/// Interval width below which a truncated normal draw degenerates to the
/// interval midpoint.
const DEGENERATE_WIDTH: f64 = 1e-12;

/// Standardized bound beyond which the interval is treated as a far tail.
const TAIL_CUT: f64 = 0.0;

/// Draw from `N(mu, sigma2)` conditioned on the interval `(lo, hi]`.
///
/// The body of the distribution uses inverse-CDF sampling; intervals that sit
/// entirely on one side of the mean switch to the survival-function scale,
/// with Robert's exponential-rejection sampler for one-sided far tails, so
/// draws stay correct even when the interval lies many standard deviations
/// out.
pub fn truncated_normal_sample<R: Rng + ?Sized>(
    mu: f64,
    sigma2: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> f64 {
    debug_assert!(sigma2 > 0.0);
    debug_assert!(lo < hi);
    if lo.is_finite() && hi.is_finite() && hi - lo < DEGENERATE_WIDTH {
        return 0.5 * (lo + hi);
    }
    let sigma = sigma2.sqrt();
    let a = if lo == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        (lo - mu) / sigma
    };
    let b = if hi == f64::INFINITY {
        f64::INFINITY
    } else {
        (hi - mu) / sigma
    };
    mu + sigma * std_truncated_normal(a, b, rng)
}

/// Truncated standard normal on `(a, b)`.
fn std_truncated_normal<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return rng.sample(StandardNormal);
    }
    if a >= TAIL_CUT {
        return upper_tail_truncated(a, b, rng);
    }
    if b <= -TAIL_CUT {
        return -upper_tail_truncated(-b, -a, rng);
    }
    // Interval overlaps the mean: plain inverse-CDF.
    let pa = if a == f64::NEG_INFINITY { 0.0 } else { norm_cdf(a) };
    let pb = if b == f64::INFINITY { 1.0 } else { norm_cdf(b) };
    let u: f64 = rng.gen_range(pa..=pb);
    norm_quantile(u).clamp(a, b)
}

/// Truncated standard normal on `(a, b)` with `a >= 0`.
fn upper_tail_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if b == f64::INFINITY {
        return robert_tail(a, rng);
    }
    let qa = norm_sf(a);
    let qb = norm_sf(b);
    if qa > 0.0 && qb < 0.9 * qa {
        // Wide enough for rejection: propose from the one-sided tail.
        for _ in 0..100 {
            let x = robert_tail(a, rng);
            if x <= b {
                return x;
            }
        }
    }
    // Narrow far-tail interval: inverse CDF on the survival scale, which
    // keeps precision where Phi saturates at 1.
    let u: f64 = rng.gen_range(qb..=qa);
    norm_upper_quantile(u).clamp(a, b)
}

/// Robert (1995) exponential-rejection sampler for `N(0,1)` conditioned on
/// `X > a`, valid for `a >= 0`.
fn robert_tail<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let u: f64 = rng.gen::<f64>();
        let x = a - (1.0 - u).ln() / lambda;
        let d = x - lambda;
        let accept: f64 = rng.gen::<f64>();
        if accept <= (-0.5 * d * d).exp() {
            return x;
        }
    }
}

/// Analytic mean and variance of `N(mu, sigma2)` truncated to `(lo, hi)`,
/// computed on the log scale so far-tail intervals stay accurate. Used by
/// tests and the simulation scoring code as an independent reference.
pub fn truncated_normal_moments(mu: f64, sigma2: f64, lo: f64, hi: f64) -> (f64, f64) {
    let sigma = sigma2.sqrt();
    let a = if lo == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        (lo - mu) / sigma
    };
    let b = if hi == f64::INFINITY {
        f64::INFINITY
    } else {
        (hi - mu) / sigma
    };
    let ln_mass = ln_interval_prob(a, b);
    // phi(a)/mass and phi(b)/mass via logs; signs handled explicitly.
    let ra = if a.is_finite() {
        (ln_norm_pdf(a) - ln_mass).exp()
    } else {
        0.0
    };
    let rb = if b.is_finite() {
        (ln_norm_pdf(b) - ln_mass).exp()
    } else {
        0.0
    };
    let delta = ra - rb;
    let a_term = if a.is_finite() { a * ra } else { 0.0 };
    let b_term = if b.is_finite() { b * rb } else { 0.0 };
    let mean = mu + sigma * delta;
    let var = sigma2 * (1.0 + a_term - b_term - delta * delta);
    (mean, var)
}
