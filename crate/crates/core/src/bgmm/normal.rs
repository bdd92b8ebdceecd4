//! Standard-normal special functions and a Cholesky-backed Gaussian.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn std_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
    }
}

/// Lower tail `P(Z <= x)`.
pub fn std_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Upper tail `P(Z > x)`.
pub fn std_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Quantile without refinement, accurate to about 1e-10 relative in `p`.
fn rough_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

pub fn std_quantile(p: f64) -> f64 {
    let x = rough_quantile(p);
    if !x.is_finite() {
        return x;
    }
    // One Newton step against the accurate cdf; the inverse alone is good to
    // about 1e-10 relative.
    let r = if p < 0.5 { std_cdf(x) - p } else { (1.0 - p) - std_sf(x) };
    x - r / std_pdf(x)
}

/// `P(alpha < Z < beta)`, evaluated in whichever tail keeps precision.
pub fn interval_mass(alpha: f64, beta: f64) -> f64 {
    if alpha > 0.0 {
        std_sf(alpha) - std_sf(beta)
    } else if beta < 0.0 {
        std_cdf(beta) - std_cdf(alpha)
    } else {
        1.0 - std_cdf(alpha) - std_sf(beta)
    }
}

/// Maps `w` in (0, 1) to a standard normal truncated to `(alpha, beta)` by
/// inversion. Returns `(mass, draw)`. The draw is a smooth deterministic
/// map of `w`, so the cheaper unrefined quantile is used.
pub fn truncated_inverse(alpha: f64, beta: f64, w: f64) -> (f64, f64) {
    if alpha > 0.0 {
        let qa = std_sf(alpha);
        let mass = qa - std_sf(beta);
        let y = -rough_quantile(qa - w * mass);
        (mass, y.clamp(alpha, beta))
    } else {
        let pa = std_cdf(alpha);
        let mass = std_cdf(beta) - pa;
        let y = rough_quantile(pa + w * mass);
        (mass, y.clamp(alpha, beta))
    }
}

/// Mass, mean and variance of a standard normal truncated to `[alpha, beta]`.
/// Either end may be infinite.
pub fn truncated_standard(alpha: f64, beta: f64) -> (f64, f64, f64) {
    if alpha > 0.0 {
        // Mirror into the lower half so the tail ratios keep precision.
        let (mass, mean, var) = truncated_standard(-beta, -alpha);
        return (mass, -mean, var);
    }
    let mass = interval_mass(alpha, beta);
    let (pa, pb) = (std_pdf(alpha), std_pdf(beta));
    let xpa = if alpha.is_finite() { alpha * pa } else { 0.0 };
    let xpb = if beta.is_finite() { beta * pb } else { 0.0 };
    let mean = (pa - pb) / mass;
    let var = (1.0 + (xpa - xpb) / mass - mean * mean).clamp(0.0, 1.0);
    (mass, mean, var)
}

/// Multivariate normal with a cached lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("{d}x{d} covariance")))?
            .unpack();
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular `L` with `L L^T = cov`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        // Forward substitution of L z = x - mu.
        let mut z = [0.0; 16];
        let mut heap;
        let z: &mut [f64] = if d <= 16 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut maha = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * z[j];
            }
            z[i] = s / self.chol[(i, i)];
            maha += z[i] * z[i];
        }
        self.log_norm - 0.5 * maha
    }
}
