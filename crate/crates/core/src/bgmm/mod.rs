//! Bounded Gaussian mixtures: a Gaussian mixture renormalised to a
//! hyper-rectangle, its truncated moments and the extended EM fit.

mod em;
pub mod moments;
pub mod normal;
pub mod qmc;

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use em::{bic, e_step, e_step_points, em_fit, em_fit_points, m_step, parameter_count, EmConfig, EmFit, MStepUpdate};
pub use moments::{truncated_moments, MomentEstimator, MomentMethod, TruncatedMoments};
pub use normal::Gaussian;
pub use qmc::{QmcRule, DEFAULT_QMC_POINTS};

use crate::error::{Error, Result};
use crate::trace::{FeatureVector, Side};

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBounds")]
pub struct HyperRectBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Deserialize)]
struct RawBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawBounds> for HyperRectBounds {
    type Error = Error;

    fn try_from(raw: RawBounds) -> Result<Self> {
        HyperRectBounds::new(raw.lower, raw.upper)
    }
}

impl HyperRectBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        for (dim, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() {
                return Err(Error::NonFinite(format!("bound in dimension {dim}")));
            }
            if !(l < u) {
                return Err(Error::DegenerateBounds { dim, value: l });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// `lower <= x <= upper` in every dimension.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| v >= l && v <= u)
    }

    /// `lower < x < upper` in every dimension.
    pub fn contains_strict(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| v > l && v < u)
    }
}

/// Component-wise min and max over the corpus.
pub fn compute_bounds(features: &[FeatureVector]) -> Result<HyperRectBounds> {
    let points: Vec<Vec<f64>> = features.iter().map(|f| f.to_array().to_vec()).collect();
    compute_bounds_points(&points)
}

pub fn compute_bounds_points(points: &[Vec<f64>]) -> Result<HyperRectBounds> {
    if points.len() < 2 {
        return Err(Error::EmptyCorpus(points.len()));
    }
    let d = points[0].len();
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for p in points {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: p.len(),
            });
        }
        for i in 0..d {
            if !p[i].is_finite() {
                return Err(Error::NonFinite(format!("corpus value in dimension {i}")));
            }
            lower[i] = lower[i].min(p[i]);
            upper[i] = upper[i].max(p[i]);
        }
    }
    HyperRectBounds::new(lower, upper)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    weight: f64,
    gaussian: Gaussian,
    normalizer: f64,
}

impl Component {
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        self.gaussian.mean()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        self.gaussian.cov()
    }

    pub fn gaussian(&self) -> &Gaussian {
        &self.gaussian
    }

    /// Mass of the component inside the model bounds.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }
}

/// Fit provenance stored with a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub tol: f64,
    pub iterations: usize,
    pub final_log_likelihood: f64,
    pub bic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_method: Option<MomentMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qmc_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizers: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    side: Side,
    #[serde(rename = "K")]
    k: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    bounds: HyperRectBounds,
    meta: ModelMeta,
}

/// Immutable bounded Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct BgmModel {
    side: Side,
    components: Vec<Component>,
    bounds: HyperRectBounds,
    meta: ModelMeta,
    log_weights: Vec<f64>,
    log_mass: f64,
}

impl BgmModel {
    /// Builds a model and evaluates each component's mass in the box.
    pub fn from_parts(
        side: Side,
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
        bounds: HyperRectBounds,
        estimator: &MomentEstimator,
    ) -> Result<Self> {
        let normalizers = means
            .iter()
            .zip(&covariances)
            .map(|(m, c)| {
                if m.len() != bounds.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: bounds.dim(),
                        found: m.len(),
                    });
                }
                Ok(estimator.moments(m, c, bounds.lower(), bounds.upper())?.mass)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self::with_normalizers(side, weights, means, covariances, bounds, normalizers)?;
        model.meta.moment_method = Some(estimator.method());
        if estimator.points() > 0 {
            model.meta.qmc_points = Some(estimator.points());
        }
        Ok(model)
    }

    /// Builds a model from precomputed component masses. Weights are
    /// normalised to sum to one.
    pub fn with_normalizers(
        side: Side,
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
        bounds: HyperRectBounds,
        normalizers: Vec<f64>,
    ) -> Result<Self> {
        let k = weights.len();
        for len in [means.len(), covariances.len(), normalizers.len()] {
            if len != k {
                return Err(Error::DimensionMismatch { expected: k, found: len });
            }
        }
        if k == 0 {
            return Err(Error::InvalidConfig("mixture needs at least one component".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidConfig("mixture weights sum to zero".into()));
        }
        let mut components = Vec::with_capacity(k);
        for (((w, mean), cov), z) in weights.iter().zip(means).zip(covariances).zip(&normalizers) {
            if mean.len() != bounds.dim() {
                return Err(Error::DimensionMismatch {
                    expected: bounds.dim(),
                    found: mean.len(),
                });
            }
            if !(*z > 0.0 && *z <= 1.0 + 1e-12) {
                return Err(Error::NumericalUnderflow { mass: *z });
            }
            components.push(Component {
                weight: w / total,
                gaussian: Gaussian::new(mean, cov)?,
                normalizer: z.min(1.0),
            });
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        let mass: f64 = components.iter().map(|c| c.weight * c.normalizer).sum();
        let meta = ModelMeta {
            normalizers: Some(components.iter().map(|c| c.normalizer).collect()),
            ..ModelMeta::default()
        };
        Ok(Self {
            side,
            components,
            bounds,
            meta,
            log_weights,
            log_mass: mass.ln(),
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn normalizers(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.normalizer).collect()
    }

    pub fn bounds(&self) -> &HyperRectBounds {
        &self.bounds
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: ModelMeta) {
        let normalizers = self.normalizers();
        self.meta = ModelMeta {
            normalizers: Some(normalizers),
            ..meta
        };
    }

    pub fn meta_mut(&mut self) -> &mut ModelMeta {
        &mut self.meta
    }

    /// Log density of the bounded mixture; `-inf` outside the closed box.
    pub fn log_pdf_point(&self, x: &[f64]) -> f64 {
        if !self.bounds.contains(x) {
            return f64::NEG_INFINITY;
        }
        self.log_pdf_unchecked(x)
    }

    fn log_pdf_unchecked(&self, x: &[f64]) -> f64 {
        let mut terms = [0.0; 32];
        let mut heap;
        let terms: &mut [f64] = if self.k() <= 32 {
            &mut terms[..self.k()]
        } else {
            heap = vec![0.0; self.k()];
            &mut heap
        };
        for (t, (c, lw)) in terms.iter_mut().zip(self.components.iter().zip(&self.log_weights)) {
            *t = lw + c.gaussian.log_density(x);
        }
        log_sum_exp(terms) - self.log_mass
    }

    pub fn pdf_point(&self, x: &[f64]) -> f64 {
        self.log_pdf_point(x).exp()
    }

    pub fn pdf(&self, xi: &FeatureVector) -> f64 {
        self.pdf_point(&xi.to_array())
    }

    pub fn log_likelihood_points(&self, points: &[Vec<f64>]) -> Result<f64> {
        let mut sum = KahanSum::default();
        for (index, p) in points.iter().enumerate() {
            if !self.bounds.contains(p) {
                return Err(Error::OutOfBounds { index });
            }
            sum.add(self.log_pdf_unchecked(p));
        }
        let total = sum.value();
        if !total.is_finite() {
            return Err(Error::NonFinite("log-likelihood".into()));
        }
        Ok(total)
    }

    pub fn log_likelihood(&self, features: &[FeatureVector]) -> Result<f64> {
        self.log_likelihood_points(&feature_points(features))
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = ModelFile {
            side: self.side,
            k: self.k(),
            weights: self.weights(),
            means: self.components.iter().map(|c| c.mean().iter().copied().collect()).collect(),
            covariances: self
                .components
                .iter()
                .map(|c| {
                    let cov = c.cov();
                    (0..cov.nrows()).map(|r| cov.row(r).iter().copied().collect()).collect()
                })
                .collect(),
            bounds: self.bounds.clone(),
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses a model. Stored normalizers are used as-is; without them the
    /// masses are recomputed with the recorded method.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.k != file.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: file.k,
                found: file.weights.len(),
            });
        }
        let d = file.bounds.dim();
        let means: Vec<DVector<f64>> = file.means.iter().map(|m| DVector::from_column_slice(m)).collect();
        let covariances = file
            .covariances
            .iter()
            .map(|rows| {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: rows.len(),
                    });
                }
                Ok(DMatrix::from_fn(d, d, |r, c| rows[r][c]))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = match &file.meta.normalizers {
            Some(z) => Self::with_normalizers(file.side, file.weights, means, covariances, file.bounds, z.clone())?,
            None => {
                let estimator = MomentEstimator::new(
                    file.meta.moment_method.unwrap_or_default(),
                    d,
                    file.meta.qmc_points.unwrap_or(DEFAULT_QMC_POINTS),
                    crate::rng::derive_seed(file.meta.seed, "qmc"),
                );
                Self::from_parts(file.side, file.weights, means, covariances, file.bounds, &estimator)?
            }
        };
        model.set_meta(file.meta);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let write = || -> Result<()> { Ok(fs::write(path, self.to_json_string()? + "\n")?) };
        write().map_err(|e| e.at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let read = || -> Result<Self> { Self::from_json_str(&fs::read_to_string(path)?) };
        read().map_err(|e| e.at(path))
    }
}

pub(crate) fn feature_points(features: &[FeatureVector]) -> Vec<Vec<f64>> {
    features.iter().map(|f| f.to_array().to_vec()).collect()
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_component_2d() -> BgmModel {
        let bounds = HyperRectBounds::new(vec![-2.0, -1.0], vec![3.0, 2.0]).unwrap();
        BgmModel::from_parts(
            Side::Left,
            vec![0.4, 0.6],
            vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![1.5, 1.0])],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
                DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.1, 0.6]),
            ],
            bounds,
            &MomentEstimator::quasi_monte_carlo(2, 1 << 12, 5),
        )
        .unwrap()
    }

    #[test]
    fn bounds_from_two_points() {
        let b = compute_bounds_points(&[vec![1.0, 5.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(b.lower(), &[1.0, -1.0]);
        assert_eq!(b.upper(), &[3.0, 5.0]);
        assert!(matches!(
            compute_bounds_points(&[vec![1.0, 2.0], vec![3.0, 2.0]]),
            Err(Error::DegenerateBounds { dim: 1, .. })
        ));
        assert!(matches!(compute_bounds_points(&[vec![1.0]]), Err(Error::EmptyCorpus(1))));
    }

    #[test]
    fn pdf_vanishes_outside_box() {
        let model = two_component_2d();
        assert_eq!(model.pdf_point(&[3.0001, 0.0]), 0.0);
        assert_eq!(model.pdf_point(&[0.0, -1.5]), 0.0);
        assert!(model.pdf_point(&[3.0, 2.0]) > 0.0);
        assert!((model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_box_single_gaussian_matches_normal_density() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0]));
        let model = BgmModel::from_parts(
            Side::Left,
            vec![1.0],
            vec![DVector::from_vec(vec![1.0, -1.0])],
            vec![cov],
            HyperRectBounds::new(vec![-20.0, -40.0], vec![20.0, 40.0]).unwrap(),
            &MomentEstimator::closed_form(),
        )
        .unwrap();
        let x = [0.3_f64, 0.4_f64];
        let expected = (-(0.7f64.powi(2)) / (2.0 * 0.5) - 1.4f64.powi(2) / (2.0 * 2.0)).exp()
            / (2.0 * std::f64::consts::PI * (0.5f64 * 2.0).sqrt());
        assert!((model.pdf_point(&x) - expected).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip_preserves_density() {
        let mut model = two_component_2d();
        model.meta_mut().seed = 11;
        let text = model.to_json_string().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["side", "K", "weights", "means", "covariances", "bounds", "meta"] {
            assert!(value.get(key).is_some(), "{key}");
        }
        let back = BgmModel::from_json_str(&text).unwrap();
        for x in [[0.1, 0.2], [-1.9, 1.9], [2.5, -0.5]] {
            assert!((back.pdf_point(&x) - model.pdf_point(&x)).abs() <= 1e-12 * model.pdf_point(&x));
        }
    }

    #[test]
    fn kahan_beats_naive_sum() {
        let mut s = KahanSum::default();
        s.add(1e16);
        for _ in 0..10 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 10.0);
    }
}
