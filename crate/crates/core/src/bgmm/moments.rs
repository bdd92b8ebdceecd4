//! Mass and moment corrections of a multivariate normal restricted to a box.
//!
//! Only dimensions whose box edge lies within [`ACTIVE_CUTOFF`] marginal
//! standard deviations of the mean are treated as truncated. The truncated
//! marginal is computed either in closed form (one active dimension, a
//! diagonal active block, or [`MomentMethod::ClosedFormDiagonal`]) or by
//! sequential conditioning over a fixed shifted Halton rule. The moments of
//! the remaining dimensions follow exactly from linear regression on the
//! active ones.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::normal::{truncated_inverse, truncated_standard};
use super::qmc::{QmcRule, DEFAULT_QMC_POINTS};
use crate::error::{Error, Result};

/// Box edges further than this many marginal standard deviations from the
/// mean are ignored; the neglected mass is below 1e-15 per edge.
pub const ACTIVE_CUTOFF: f64 = 8.0;

/// Components with less mass than this inside the box are rejected.
pub const MASS_FLOOR: f64 = 1e-300;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMethod {
    /// Per-dimension one-dimensional formulas; correlations among truncated
    /// dimensions are kept but not corrected. Exact for diagonal covariances.
    ClosedFormDiagonal,
    /// Deterministic quasi-Monte-Carlo over a fixed point set.
    #[default]
    QuasiMonteCarlo,
}

impl std::str::FromStr for MomentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed-form" | "closed_form_diagonal" | "closed-form-diagonal" => {
                Ok(MomentMethod::ClosedFormDiagonal)
            }
            "qmc" | "quasi_monte_carlo" | "quasi-monte-carlo" => Ok(MomentMethod::QuasiMonteCarlo),
            other => Err(Error::InvalidConfig(format!("unknown moment method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedMoments {
    /// Probability mass of the normal inside the box.
    pub mass: f64,
    /// `mu - E[u | u in box]`.
    pub mean_shift: DVector<f64>,
    /// `Sigma - Cov[u | u in box]`.
    pub cov_correction: DMatrix<f64>,
}

impl TruncatedMoments {
    fn untruncated(d: usize) -> Self {
        Self {
            mass: 1.0,
            mean_shift: DVector::zeros(d),
            cov_correction: DMatrix::zeros(d, d),
        }
    }
}

/// Moment evaluator with its point set built once.
#[derive(Debug, Clone)]
pub struct MomentEstimator {
    method: MomentMethod,
    rule: Option<Arc<QmcRule>>,
}

impl MomentEstimator {
    pub fn closed_form() -> Self {
        Self {
            method: MomentMethod::ClosedFormDiagonal,
            rule: None,
        }
    }

    pub fn quasi_monte_carlo(dim: usize, points: usize, seed: u64) -> Self {
        Self {
            method: MomentMethod::QuasiMonteCarlo,
            rule: Some(Arc::new(QmcRule::new(dim, points.max(1), seed))),
        }
    }

    pub fn new(method: MomentMethod, dim: usize, points: usize, seed: u64) -> Self {
        match method {
            MomentMethod::ClosedFormDiagonal => Self::closed_form(),
            MomentMethod::QuasiMonteCarlo => Self::quasi_monte_carlo(dim, points, seed),
        }
    }

    pub fn method(&self) -> MomentMethod {
        self.method
    }

    pub fn points(&self) -> usize {
        self.rule.as_ref().map_or(0, |r| r.len())
    }

    pub fn moments(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        lower: &[f64],
        upper: &[f64],
    ) -> Result<TruncatedMoments> {
        let d = mean.len();
        for len in [cov.nrows(), cov.ncols(), lower.len(), upper.len()] {
            if len != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: len,
                });
            }
        }
        if let Some(i) = (0..d).find(|&i| !(lower[i] < upper[i])) {
            return Err(Error::DegenerateBounds {
                dim: i,
                value: lower[i],
            });
        }
        if let Some(i) = (0..d).find(|&i| !(cov[(i, i)] > 0.0)) {
            return Err(Error::NotPositiveDefinite(format!(
                "variance {} in dimension {i}",
                cov[(i, i)]
            )));
        }

        // Box edges relative to the mean.
        let a: Vec<f64> = (0..d).map(|i| lower[i] - mean[i]).collect();
        let b: Vec<f64> = (0..d).map(|i| upper[i] - mean[i]).collect();
        let active: Vec<usize> = (0..d)
            .filter(|&i| {
                let s = cov[(i, i)].sqrt();
                a[i] / s > -ACTIVE_CUTOFF || b[i] / s < ACTIVE_CUTOFF
            })
            .collect();
        if active.is_empty() {
            return Ok(TruncatedMoments::untruncated(d));
        }

        let t = active.len();
        let cov_aa = DMatrix::from_fn(t, t, |r, c| cov[(active[r], active[c])]);
        let a_act: Vec<f64> = active.iter().map(|&i| a[i]).collect();
        let b_act: Vec<f64> = active.iter().map(|&i| b[i]).collect();
        let diagonal = (0..t).all(|r| (0..t).all(|c| r == c || cov_aa[(r, c)] == 0.0));
        let marginal = if t == 1 || diagonal || self.method == MomentMethod::ClosedFormDiagonal {
            closed_form_marginal(&cov_aa, &a_act, &b_act)
        } else {
            let rule = match &self.rule {
                Some(rule) if rule.dim() >= t => rule.clone(),
                _ => Arc::new(QmcRule::new(t, DEFAULT_QMC_POINTS, 0)),
            };
            sequential_marginal(&cov_aa, &a_act, &b_act, &rule)?
        };
        if !(marginal.mass >= MASS_FLOOR) || !marginal.mass.is_finite() {
            return Err(Error::NumericalUnderflow { mass: marginal.mass });
        }

        // Lift through u_U = mu_U + B (u_A - mu_A) + noise, B = Sigma_UA Sigma_AA^-1.
        let mut lift = DMatrix::zeros(d, t);
        for (r, &i) in active.iter().enumerate() {
            lift[(i, r)] = 1.0;
        }
        if t < d {
            let chol = cov_aa
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("truncated block".into()))?;
            let inactive: Vec<usize> = (0..d).filter(|i| !active.contains(i)).collect();
            let cov_au = DMatrix::from_fn(t, inactive.len(), |r, c| cov[(active[r], inactive[c])]);
            let coef_t = chol.solve(&cov_au);
            for (c, &i) in inactive.iter().enumerate() {
                for r in 0..t {
                    lift[(i, r)] = coef_t[(r, c)];
                }
            }
        }
        let delta = &lift * &marginal.delta;
        let mut h = &lift * &marginal.correction * lift.transpose();
        h = 0.5 * (&h + h.transpose());
        Ok(TruncatedMoments {
            mass: marginal.mass,
            mean_shift: -delta,
            cov_correction: h,
        })
    }
}

/// Truncated moments with a default estimator for `method`.
pub fn truncated_moments(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    lower: &[f64],
    upper: &[f64],
    method: MomentMethod,
) -> Result<TruncatedMoments> {
    MomentEstimator::new(method, mean.len(), DEFAULT_QMC_POINTS, 0).moments(mean, cov, lower, upper)
}

struct Marginal {
    mass: f64,
    /// `E[u_A] - mu_A`.
    delta: DVector<f64>,
    /// `Sigma_AA - Cov[u_A]`.
    correction: DMatrix<f64>,
}

fn closed_form_marginal(cov: &DMatrix<f64>, a: &[f64], b: &[f64]) -> Marginal {
    let t = a.len();
    let mut mass = 1.0;
    let mut delta = DVector::zeros(t);
    let mut scale = DVector::zeros(t);
    for i in 0..t {
        let s = cov[(i, i)].sqrt();
        let (z, m, v) = truncated_standard(a[i] / s, b[i] / s);
        mass *= z;
        delta[i] = s * m;
        scale[i] = v.sqrt();
    }
    let truncated = DMatrix::from_fn(t, t, |r, c| scale[r] * cov[(r, c)] * scale[c]);
    Marginal {
        mass,
        delta,
        correction: cov - truncated,
    }
}

#[derive(Clone)]
struct Partial {
    weight: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

/// Sequential conditioning through the Cholesky factor: each point of the
/// rule maps to a draw inside the box and an importance weight equal to the
/// product of the conditional interval masses. Mean and covariance carry a
/// control variate built from the same points without truncation, so the
/// estimate is exactly zero wherever the box has no effect.
fn sequential_marginal(cov: &DMatrix<f64>, a: &[f64], b: &[f64], rule: &QmcRule) -> Result<Marginal> {
    let t = a.len();
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("truncated block".into()))?
        .unpack();
    let n = rule.len();
    let chunks: Vec<Partial> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut part = Partial {
                weight: 0.0,
                sum: vec![0.0; t],
                sum_sq: vec![0.0; t * t],
            };
            let mut y = vec![0.0; t];
            'points: for p in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let u = rule.point(p);
                let mut w = 1.0;
                for i in 0..t {
                    let mut s = 0.0;
                    for j in 0..i {
                        s += chol[(i, j)] * y[j];
                    }
                    let l = chol[(i, i)];
                    let (mass, draw) = truncated_inverse((a[i] - s) / l, (b[i] - s) / l, u[i]);
                    w *= mass;
                    if !(w > 0.0) {
                        continue 'points;
                    }
                    y[i] = draw;
                }
                part.weight += w;
                for i in 0..t {
                    part.sum[i] += w * y[i];
                    for j in 0..=i {
                        part.sum_sq[i * t + j] += w * y[i] * y[j];
                    }
                }
            }
            part
        })
        .collect();

    let mut total = Partial {
        weight: 0.0,
        sum: vec![0.0; t],
        sum_sq: vec![0.0; t * t],
    };
    for part in &chunks {
        total.weight += part.weight;
        for (acc, v) in total.sum.iter_mut().zip(&part.sum) {
            *acc += v;
        }
        for (acc, v) in total.sum_sq.iter_mut().zip(&part.sum_sq) {
            *acc += v;
        }
    }
    let mass = total.weight / n as f64;
    if !(total.weight > 0.0) {
        return Ok(Marginal {
            mass,
            delta: DVector::zeros(t),
            correction: DMatrix::zeros(t, t),
        });
    }
    let mean_y = DVector::from_iterator(t, total.sum.iter().map(|s| s / total.weight));
    let mut cov_y = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in 0..=i {
            let v = total.sum_sq[i * t + j] / total.weight - mean_y[i] * mean_y[j];
            cov_y[(i, j)] = v;
            cov_y[(j, i)] = v;
        }
    }
    let ref_mean = DVector::from_column_slice(&rule.normal_mean()[..t]);
    let ref_cov = rule.normal_cov().view((0, 0), (t, t)).into_owned();
    Ok(Marginal {
        mass,
        delta: &chol * (mean_y - ref_mean),
        correction: &chol * (ref_cov - cov_y) * chol.transpose(),
    })
}
