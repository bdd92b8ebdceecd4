//! Departure-event traces and their 8-parameter summary.
//!
//! A [`TrajectoryTrace`] is one pre-segmented lane-departure event sampled on
//! a uniform grid: signed lateral offset of the departure-side wheel edge
//! beyond the lane edge (`y > 0` for left departures), speed and road
//! curvature. [`extract_features`] reduces it to a [`FeatureVector`] by
//! fitting a fixed-shape parabola to `y` over travelled distance and straight
//! lines to `v` and `rho` over time.

mod fit;
pub mod io;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fit::{
    extract_features, fit_curvature, fit_lateral, fit_velocity, travelled_distance, CurvatureFit,
    LateralFit, VelocityFit,
};

/// Number of components in a [`FeatureVector`].
pub const FEATURE_DIM: usize = 8;

/// Column names of the feature file, in vector order.
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "T", "d_y", "sigma_y", "v_bar", "a_bar", "sigma_v", "rho_0", "delta_rho",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// +1 for left departures, -1 for right.
    pub fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }

    pub fn from_offset(y: f64) -> Side {
        if y < 0.0 {
            Side::Right
        } else {
            Side::Left
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Side> {
        match s.to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Side::Left),
            "right" | "r" => Ok(Side::Right),
            other => Err(Error::InvalidConfig(format!("unknown side `{other}`"))),
        }
    }
}

/// One uniformly sampled lane-departure event.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTrace {
    sample_period: f64,
    lateral_offset: Vec<f64>,
    speed: Vec<f64>,
    curvature: Vec<f64>,
    side: Side,
}

impl TrajectoryTrace {
    pub fn new(
        sample_period: f64,
        lateral_offset: Vec<f64>,
        speed: Vec<f64>,
        curvature: Vec<f64>,
        side: Side,
    ) -> Result<Self> {
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(Error::InvalidTrace(format!(
                "sample period must be positive, got {sample_period}"
            )));
        }
        let len = lateral_offset.len();
        if speed.len() != len || curvature.len() != len {
            return Err(Error::InvalidTrace(format!(
                "series lengths differ (y: {len}, v: {}, rho: {})",
                speed.len(),
                curvature.len()
            )));
        }
        if len < 2 {
            return Err(Error::InvalidTrace(format!(
                "trace needs at least 2 samples, got {len}"
            )));
        }
        if let Some(l) = speed.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidTrace(format!(
                "speed must be positive, sample {l} is {}",
                speed[l]
            )));
        }
        let non_finite = |s: &[f64]| s.iter().any(|x| !x.is_finite());
        if non_finite(&lateral_offset) || non_finite(&curvature) {
            return Err(Error::InvalidTrace("non-finite sample".into()));
        }
        Ok(Self {
            sample_period,
            lateral_offset,
            speed,
            curvature,
            side,
        })
    }

    /// Builds a trace and infers the side from the sign of the sample with
    /// the largest |y|.
    pub fn with_inferred_side(
        sample_period: f64,
        lateral_offset: Vec<f64>,
        speed: Vec<f64>,
        curvature: Vec<f64>,
    ) -> Result<Self> {
        let side = infer_side(&lateral_offset);
        Self::new(sample_period, lateral_offset, speed, curvature, side)
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn len(&self) -> usize {
        self.lateral_offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lateral_offset.is_empty()
    }

    /// Event duration `(L - 1) * Ts`.
    pub fn duration(&self) -> f64 {
        (self.len() - 1) as f64 * self.sample_period
    }

    pub fn time(&self, l: usize) -> f64 {
        l as f64 * self.sample_period
    }

    pub fn times(&self) -> impl ExactSizeIterator<Item = f64> + Clone + '_ {
        (0..self.len()).map(|l| self.time(l))
    }

    pub fn lateral_offset(&self) -> &[f64] {
        &self.lateral_offset
    }

    pub fn speed(&self) -> &[f64] {
        &self.speed
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn set_side(&mut self, side: Side) {
        self.side = side;
    }
}

/// Sign of the extremal lateral offset.
pub fn infer_side(y: &[f64]) -> Side {
    let extremal = y
        .iter()
        .copied()
        .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
    Side::from_offset(extremal)
}

/// The 8 statistical parameters of one departure event, in the order
/// `[T, d_y, sigma_y, v_bar, a_bar, sigma_v, rho_0, delta_rho]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Duration [s].
    #[serde(rename = "T")]
    pub duration: f64,
    /// Peak lateral departure of the fitted parabola [m], signed by side.
    pub d_y: f64,
    /// Residual standard deviation of `y` [m].
    pub sigma_y: f64,
    /// Mean speed [m/s].
    pub v_bar: f64,
    /// Mean acceleration [m/s^2].
    pub a_bar: f64,
    /// Residual standard deviation of `v` [m/s].
    pub sigma_v: f64,
    /// Initial curvature [1/m].
    pub rho_0: f64,
    /// Curvature change over the event [1/m].
    pub delta_rho: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        [
            self.duration,
            self.d_y,
            self.sigma_y,
            self.v_bar,
            self.a_bar,
            self.sigma_v,
            self.rho_0,
            self.delta_rho,
        ]
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_DIM,
                found: values.len(),
            });
        }
        Ok(Self {
            duration: values[0],
            d_y: values[1],
            sigma_y: values[2],
            v_bar: values[3],
            a_bar: values[4],
            sigma_v: values[5],
            rho_0: values[6],
            delta_rho: values[7],
        })
    }

    /// Checks `T > 0`, `sigma_y >= 0`, `sigma_v >= 0`, `v_bar > 0`.
    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidFeature("non-finite component".into()));
        }
        if !(self.duration > 0.0) {
            return Err(Error::InvalidFeature(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.v_bar > 0.0) {
            return Err(Error::InvalidFeature(format!(
                "mean speed must be positive, got {}",
                self.v_bar
            )));
        }
        if self.sigma_y < 0.0 || self.sigma_v < 0.0 {
            return Err(Error::InvalidFeature(format!(
                "standard deviations must be non-negative (sigma_y = {}, sigma_v = {})",
                self.sigma_y, self.sigma_v
            )));
        }
        Ok(())
    }

    pub fn side(&self) -> Side {
        Side::from_offset(self.d_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterCriterion {
    MinDuration,
    MaxDuration,
    MinMeanSpeed,
}

impl fmt::Display for FilterCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterCriterion::MinDuration => "min_duration",
            FilterCriterion::MaxDuration => "max_duration",
            FilterCriterion::MinMeanSpeed => "min_mean_speed",
        })
    }
}

/// Event selection rule: duration in `[min_duration, max_duration]` and mean
/// speed strictly above `min_mean_speed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventFilterCriteria {
    pub min_duration: f64,
    pub max_duration: f64,
    pub min_mean_speed: f64,
}

impl Default for EventFilterCriteria {
    fn default() -> Self {
        Self {
            min_duration: 0.5,
            max_duration: 10.0,
            min_mean_speed: 5.0,
        }
    }
}

impl EventFilterCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_duration > 0.0 && self.min_duration < self.max_duration) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < min_duration < max_duration, got {} and {}",
                self.min_duration, self.max_duration
            )));
        }
        if !(self.min_mean_speed > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "min_mean_speed must be positive, got {}",
                self.min_mean_speed
            )));
        }
        Ok(())
    }

    pub fn check(&self, duration: f64, mean_speed: f64) -> Result<()> {
        if duration < self.min_duration {
            Err(Error::FilterRejected(FilterCriterion::MinDuration))
        } else if duration > self.max_duration {
            Err(Error::FilterRejected(FilterCriterion::MaxDuration))
        } else if !(mean_speed > self.min_mean_speed) {
            Err(Error::FilterRejected(FilterCriterion::MinMeanSpeed))
        } else {
            Ok(())
        }
    }
}
