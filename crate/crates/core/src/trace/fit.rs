use super::{EventFilterCriteria, FeatureVector, TrajectoryTrace};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LateralFit {
    /// Longitudinal travel over the event [m].
    pub d_x: f64,
    pub d_y: f64,
    pub sigma_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityFit {
    pub v_bar: f64,
    pub a_bar: f64,
    pub sigma_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureFit {
    pub rho_0: f64,
    pub delta_rho: f64,
}

/// Longitudinal positions by cumulative trapezoidal integration of speed,
/// starting at `x = 0`.
pub fn travelled_distance(speed: &[f64], sample_period: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(speed.len());
    let mut acc = 0.0;
    x.push(acc);
    for w in speed.windows(2) {
        acc += 0.5 * (w[0] + w[1]) * sample_period;
        x.push(acc);
    }
    x
}

/// Basis of the unit-height parabola through `(0, 0)`, `(d_x/2, 1)`, `(d_x, 0)`.
pub(crate) fn parabola_basis(x: f64, d_x: f64) -> f64 {
    4.0 * x * (d_x - x) / (d_x * d_x)
}

/// Sample standard deviation (denominator `n - 1`) about the sample mean.
pub(crate) fn sample_std(values: impl ExactSizeIterator<Item = f64> + Clone) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let ss: f64 = values.map(|e| (e - mean) * (e - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Least-squares fit of `y(x) = d_y * 4x(d_x - x)/d_x^2` with `d_x` pinned to
/// the travelled distance.
pub fn fit_lateral(trace: &TrajectoryTrace) -> Result<LateralFit> {
    if trace.len() < 3 {
        return Err(Error::DegenerateTrace(format!(
            "lateral fit needs at least 3 samples, got {}",
            trace.len()
        )));
    }
    let x = travelled_distance(trace.speed(), trace.sample_period());
    let d_x = *x.last().expect("non-empty");
    if !(d_x > 0.0) {
        return Err(Error::DegenerateTrace(format!(
            "travelled distance must be positive, got {d_x}"
        )));
    }
    let y = trace.lateral_offset();
    let (num, den) = x.iter().zip(y).fold((0.0, 0.0), |(n, d), (&xl, &yl)| {
        let phi = parabola_basis(xl, d_x);
        (n + yl * phi, d + phi * phi)
    });
    if !(den > 0.0) {
        return Err(Error::DegenerateTrace("parabola basis vanishes on every sample".into()));
    }
    let d_y = num / den;
    let residuals = x
        .iter()
        .zip(y)
        .map(move |(&xl, &yl)| yl - d_y * parabola_basis(xl, d_x));
    Ok(LateralFit {
        d_x,
        d_y,
        sigma_y: sample_std(residuals),
    })
}

/// Mean speed `d_x / T`, least-squares slope of `v` against `t - T/2` and the
/// residual spread about `v_bar + a_bar (t - T/2)`.
pub fn fit_velocity(trace: &TrajectoryTrace, d_x: f64) -> Result<VelocityFit> {
    let duration = trace.duration();
    if !(duration > 0.0) {
        return Err(Error::DegenerateTrace(format!(
            "duration must be positive, got {duration}"
        )));
    }
    let v_bar = d_x / duration;
    let half = 0.5 * duration;
    let (a_bar, _) = simple_regression(trace.times().map(|t| t - half), trace.speed());
    let residuals = trace
        .times()
        .zip(trace.speed())
        .map(move |(t, &v)| v - (a_bar * (t - half) + v_bar));
    Ok(VelocityFit {
        v_bar,
        a_bar,
        sigma_v: sample_std(residuals),
    })
}

/// Linear regression of curvature on time: intercept at `t = 0` and the
/// change over the event (`slope * T`).
pub fn fit_curvature(trace: &TrajectoryTrace) -> Result<CurvatureFit> {
    if trace.len() < 2 {
        return Err(Error::DegenerateTrace(format!(
            "curvature fit needs at least 2 samples, got {}",
            trace.len()
        )));
    }
    let (slope, intercept) = simple_regression(trace.times(), trace.curvature());
    Ok(CurvatureFit {
        rho_0: intercept,
        delta_rho: slope * trace.duration(),
    })
}

/// Ordinary least squares `y = slope * x + intercept`, returns `(slope, intercept)`.
fn simple_regression(x: impl Iterator<Item = f64> + Clone, y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let x_mean = x.clone().sum::<f64>() / n;
    let y_mean = y.iter().sum::<f64>() / n;
    let (sxy, sxx) = x.zip(y).fold((0.0, 0.0), |(sxy, sxx), (xi, &yi)| {
        let dx = xi - x_mean;
        (sxy + dx * (yi - y_mean), sxx + dx * dx)
    });
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, y_mean - slope * x_mean)
}

/// Applies `criteria` and reduces the trace to its 8 parameters.
pub fn extract_features(
    trace: &TrajectoryTrace,
    criteria: &EventFilterCriteria,
) -> Result<FeatureVector> {
    let lateral = fit_lateral(trace)?;
    let duration = trace.duration();
    criteria.check(duration, lateral.d_x / duration)?;
    let velocity = fit_velocity(trace, lateral.d_x)?;
    let curvature = fit_curvature(trace)?;
    Ok(FeatureVector {
        duration,
        d_y: lateral.d_y,
        sigma_y: lateral.sigma_y,
        v_bar: velocity.v_bar,
        a_bar: velocity.a_bar,
        sigma_v: velocity.sigma_v,
        rho_0: curvature.rho_0,
        delta_rho: curvature.delta_rho,
    })
}
