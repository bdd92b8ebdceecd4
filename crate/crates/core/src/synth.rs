//! Synthetic departure corpora drawn from a known bounded mixture.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bgmm::{BgmModel, HyperRectBounds, MomentEstimator, DEFAULT_QMC_POINTS};
use crate::error::{Error, Result};
use crate::rng;
use crate::sampler::{sample_event_pairs, Noise};
use crate::trace::{FeatureVector, Side, TrajectoryTrace, FEATURE_DIM};

const DEFAULT_LEFT: &str = include_str!("../data/default_ground_truth.json");

/// Dimensions whose sign flips between left and right departures.
const SIGNED_DIMS: [usize; 3] = [1, 6, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    pub side: Side,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major full matrices.
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub bounds: HyperRectBounds,
    /// Whether regenerated traces carry the per-event residual noise.
    pub noise: Noise,
    pub n: usize,
    pub seed: u64,
    pub ts: f64,
}

fn default_version() -> u32 {
    1
}

impl GroundTruthSpec {
    /// The bundled three-component left-departure spec.
    pub fn default_left() -> Self {
        serde_json::from_str(DEFAULT_LEFT).expect("bundled ground-truth spec parses")
    }

    /// The left spec reflected into right departures.
    pub fn default_right() -> Self {
        Self::default_left().mirrored()
    }

    pub fn default_for(side: Side) -> Self {
        match side {
            Side::Left => Self::default_left(),
            Side::Right => Self::default_right(),
        }
    }

    /// Reflects `d_y`, `rho_0` and `delta_rho`, keeping everything else.
    pub fn mirrored(&self) -> Self {
        let flip = |i: usize| if SIGNED_DIMS.contains(&i) { -1.0 } else { 1.0 };
        let means = self
            .means
            .iter()
            .map(|m| m.iter().enumerate().map(|(i, v)| flip(i) * v).collect())
            .collect();
        let covariances = self
            .covariances
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .map(|(r, row)| row.iter().enumerate().map(|(s, v)| flip(r) * flip(s) * v).collect())
                    .collect()
            })
            .collect();
        let d = self.bounds.dim();
        let (mut lower, mut upper) = (vec![0.0; d], vec![0.0; d]);
        for i in 0..d {
            if SIGNED_DIMS.contains(&i) {
                lower[i] = -self.bounds.upper()[i];
                upper[i] = -self.bounds.lower()[i];
            } else {
                lower[i] = self.bounds.lower()[i];
                upper[i] = self.bounds.upper()[i];
            }
        }
        let side = match self.side {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        };
        Self {
            side,
            means,
            covariances,
            bounds: HyperRectBounds::new(lower, upper).expect("mirrored bounds stay ordered"),
            ..self.clone()
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let read = || -> Result<Self> { Self::from_json_str(&fs::read_to_string(path)?) };
        read().map_err(|e| e.at(path))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("corpus size n must be at least 1".into()));
        }
        if !(self.ts > 0.0) {
            return Err(Error::InvalidConfig(format!("ts must be positive, got {}", self.ts)));
        }
        if self.bounds.dim() != FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_DIM,
                found: self.bounds.dim(),
            });
        }
        self.model().map(|_| ())
    }

    /// The ground-truth mixture.
    pub fn model(&self) -> Result<BgmModel> {
        let d = self.bounds.dim();
        let means = self.means.iter().map(|m| DVector::from_column_slice(m)).collect();
        let covariances = self
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
        let estimator = MomentEstimator::quasi_monte_carlo(d, DEFAULT_QMC_POINTS, rng::derive_seed(self.seed, "qmc"));
        BgmModel::from_parts(self.side, self.weights.clone(), means, covariances, self.bounds.clone(), &estimator)
    }
}

/// Samples `spec.n` feature vectors from the ground truth and regenerates a
/// trace for each. The returned features are the sampled ones.
pub fn generate_corpus(spec: &GroundTruthSpec) -> Result<(Vec<TrajectoryTrace>, Vec<FeatureVector>)> {
    spec.validate()?;
    let model = spec.model()?;
    let events = sample_event_pairs(&model, spec.n, spec.ts, spec.noise, rng::derive_seed(spec.seed, "corpus"))?;
    Ok(events.into_iter().map(|e| (e.trace, e.features)).unzip())
}
