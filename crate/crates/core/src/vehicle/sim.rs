//! Closed-loop replay of a departure event with the correction controller.

use log::warn;
use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use super::{closed_loop, lane_heading_inputs, ClosedLoop, ControllerGains, LateralState, VehicleParams};
use crate::error::{Error, Result};
use crate::trace::{travelled_distance, FeatureVector, Side, TrajectoryTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Off,
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimOutcome {
    /// Controller disabled; the trace is replayed unchanged.
    Uncontrolled,
    /// The departure never crossed the trigger threshold.
    NoTrigger,
    /// The vehicle returned to the lane-centre band.
    Deactivated,
    /// Still active when the horizon of twice the event duration ran out.
    Capped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Integration steps per output sample.
    pub substeps: usize,
    pub band_e_y: f64,
    pub band_e_y_dot: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            substeps: 10,
            band_e_y: 0.05,
            band_e_y_dot: 0.05,
        }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::InvalidConfig("substeps must be at least 1".into()));
        }
        if !(self.band_e_y >= 0.0) || !(self.band_e_y_dot >= 0.0) {
            return Err(Error::InvalidConfig("deactivation bands must be non-negative".into()));
        }
        Ok(())
    }
}

/// Wheel-edge departure distance of one simulated event on the output grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlledTrajectory {
    pub side: Side,
    pub time: Vec<f64>,
    /// Signed departure distance of the departure-side wheel edge [m].
    pub y: Vec<f64>,
    pub active: Vec<bool>,
    /// Steering command [rad], zero while inactive.
    pub steering: Vec<f64>,
    pub trigger_time: Option<f64>,
    pub trigger_index: Option<usize>,
    pub outcome: SimOutcome,
    /// Last sample of the departure window: the first sample at or after the
    /// threshold crossing where the wheel edge is back inside the lane, or
    /// the last sample when that never happens.
    pub departure_end: usize,
    /// Lane-error state at the last sample, when the controller ran.
    pub final_state: Option<LateralState>,
    /// Set when the closed loop had an eigenvalue with non-negative real part.
    pub unstable_gains: bool,
}

impl ControlledTrajectory {
    /// The trace replayed without intervention.
    pub fn uncontrolled(trace: &TrajectoryTrace, y_s: f64) -> Self {
        Self::replay(trace, y_s, SimOutcome::Uncontrolled)
    }

    fn replay(trace: &TrajectoryTrace, y_s: f64, outcome: SimOutcome) -> Self {
        let y = trace.lateral_offset().to_vec();
        let n = y.len();
        Self {
            side: trace.side(),
            time: trace.times().collect(),
            departure_end: departure_end(&y, trace.side(), y_s),
            y,
            active: vec![false; n],
            steering: vec![0.0; n],
            trigger_time: None,
            trigger_index: None,
            outcome,
            final_state: None,
            unstable_gains: false,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn triggered(&self) -> bool {
        self.trigger_index.is_some()
    }
}

fn departure_end(y: &[f64], side: Side, y_s: f64) -> usize {
    let s = side.sign();
    let last = y.len().saturating_sub(1);
    match y.iter().position(|v| s * v > y_s) {
        None => last,
        Some(start) => y[start..].iter().position(|v| s * v <= 0.0).map_or(last, |i| start + i),
    }
}

pub fn simulate_event(
    trace: &TrajectoryTrace,
    xi: &FeatureVector,
    params: &VehicleParams,
    gains: &ControllerGains,
    controller: Controller,
) -> Result<ControlledTrajectory> {
    simulate_event_with(trace, xi, params, gains, controller, &SimOptions::default())
}

/// Replays `trace`; with the controller on, the closed loop takes over at the
/// first sample beyond `y_s`. Right departures are simulated in the mirrored
/// left frame.
pub fn simulate_event_with(
    trace: &TrajectoryTrace,
    xi: &FeatureVector,
    params: &VehicleParams,
    gains: &ControllerGains,
    controller: Controller,
    options: &SimOptions,
) -> Result<ControlledTrajectory> {
    params.validate()?;
    gains.validate()?;
    options.validate()?;
    if controller == Controller::Off {
        return Ok(ControlledTrajectory::uncontrolled(trace, gains.y_s));
    }
    let side = trace.side();
    let s = side.sign();
    let y: Vec<f64> = trace.lateral_offset().iter().map(|v| s * v).collect();
    let Some(ls) = y.iter().position(|&v| v > gains.y_s) else {
        return Ok(ControlledTrajectory::replay(trace, gains.y_s, SimOutcome::NoTrigger));
    };

    let ts = trace.sample_period();
    let v_x = trace.speed()[ls];
    let v_y = profile_slope(trace, s * xi.d_y, ls);
    let cl = closed_loop(params, gains, v_x)?;
    let unstable = cl.a_c.complex_eigenvalues().iter().any(|l| l.re >= 0.0);
    if unstable {
        warn!("closed loop is not stable at v_x = {v_x} m/s; integrating anyway");
    }
    let mirrored = FeatureVector {
        rho_0: s * xi.rho_0,
        delta_rho: s * xi.delta_rho,
        ..*xi
    };
    let big_t = trace.duration();
    let inputs = |t: f64| {
        let (rate, preview) = lane_heading_inputs(&mirrored, v_x, t.min(big_t), gains);
        Vector2::new(rate, preview)
    };
    let feedback = |x: &Vector4<f64>, t: f64| {
        let state = LateralState::from_vector(x);
        super::control_law(&state, inputs(t)[1], gains)
    };

    let margin = params.lateral_margin();
    let mut x = Vector4::new(y[ls] + margin, v_y, (v_y / v_x).atan(), 0.0);
    let mut out_y: Vec<f64> = trace.lateral_offset()[..=ls].to_vec();
    let mut active = vec![false; ls];
    active.push(true);
    let mut steering = vec![0.0; ls];
    steering.push(s * feedback(&x, ls as f64 * ts));

    let last = ((2.0 * big_t / ts) + 1e-9).floor() as usize;
    let mut outcome = SimOutcome::Capped;
    for l in ls + 1..=last {
        x = propagate(&cl, &x, &inputs, (l - 1) as f64 * ts, ts, options.substeps);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("closed-loop state at t = {}", l as f64 * ts)));
        }
        out_y.push(s * (x[0] - margin));
        if x[0].abs() < options.band_e_y && x[1].abs() < options.band_e_y_dot {
            active.push(false);
            steering.push(0.0);
            outcome = SimOutcome::Deactivated;
            break;
        }
        active.push(true);
        steering.push(s * feedback(&x, l as f64 * ts));
    }

    let n = out_y.len();
    Ok(ControlledTrajectory {
        side,
        time: (0..n).map(|l| l as f64 * ts).collect(),
        departure_end: departure_end(&out_y, side, gains.y_s),
        y: out_y,
        active,
        steering,
        trigger_time: Some(ls as f64 * ts),
        trigger_index: Some(ls),
        outcome,
        final_state: Some(LateralState::from_vector(&(x * s))),
        unstable_gains: unstable,
    })
}

/// Advances the closed loop by `dt` from time `t0` in `substeps` classical
/// Runge-Kutta steps, with `inputs(t)` giving `[psi_l_dot, delta_psi_l]`.
pub fn propagate(
    cl: &ClosedLoop,
    x: &Vector4<f64>,
    inputs: &impl Fn(f64) -> Vector2<f64>,
    t0: f64,
    dt: f64,
    substeps: usize,
) -> Vector4<f64> {
    let h = dt / substeps as f64;
    (0..substeps).fold(*x, |x, k| rk4_step(&cl.a_c, &cl.b_c, inputs, &x, t0 + k as f64 * h, h))
}

/// Backward difference at sample `l` of the smooth lateral profile of `xi`
/// laid over the trace's travelled distance. The raw samples carry sensor
/// noise that a one-step difference would amplify by `1/Ts`.
fn profile_slope(trace: &TrajectoryTrace, d_y: f64, l: usize) -> f64 {
    let x = travelled_distance(trace.speed(), trace.sample_period());
    let d_x = x[x.len() - 1];
    if !(d_x > 0.0) {
        return 0.0;
    }
    let y = |xl: f64| d_y * 4.0 * xl * (d_x - xl) / (d_x * d_x);
    let (a, b) = if l > 0 { (l - 1, l) } else { (0, 1) };
    (y(x[b]) - y(x[a])) / trace.sample_period()
}

fn rk4_step(
    a: &Matrix4<f64>,
    b: &Matrix4x2<f64>,
    u: &impl Fn(f64) -> Vector2<f64>,
    x: &Vector4<f64>,
    t: f64,
    h: f64,
) -> Vector4<f64> {
    let f = |t: f64, x: &Vector4<f64>| a * x + b * u(t);
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x + k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x + k2 * (0.5 * h)));
    let k4 = f(t + h, &(x + k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{regenerate_event, Noise};

    fn xi(d_y: f64) -> FeatureVector {
        FeatureVector {
            duration: 4.0,
            d_y,
            sigma_y: 0.0,
            v_bar: 20.0,
            a_bar: 0.0,
            sigma_v: 0.0,
            rho_0: 0.0,
            delta_rho: 0.0,
        }
    }

    fn run(xi: &FeatureVector, controller: Controller) -> (TrajectoryTrace, ControlledTrajectory) {
        let trace = regenerate_event(xi, 0.1, Noise::Off, 0).unwrap();
        let out = simulate_event(
            &trace,
            xi,
            &VehicleParams::default(),
            &ControllerGains::default(),
            controller,
        )
        .unwrap();
        (trace, out)
    }

    #[test]
    fn below_threshold_is_untouched() {
        let (trace, out) = run(&xi(0.15), Controller::On);
        assert_eq!(out.outcome, SimOutcome::NoTrigger);
        assert_eq!(out.y, trace.lateral_offset());
        assert!(!out.active.iter().any(|&a| a));
    }

    #[test]
    fn controller_off_is_identity() {
        let (trace, out) = run(&xi(0.6), Controller::Off);
        assert_eq!(out.y, trace.lateral_offset());
        assert_eq!(out.departure_end, trace.len() - 1);
    }

    #[test]
    fn triggered_event_bends_back() {
        let (trace, out) = run(&xi(0.6), Controller::On);
        let ls = out.trigger_index.unwrap();
        assert!(trace.lateral_offset()[ls] > 0.2 && trace.lateral_offset()[ls - 1] <= 0.2);
        assert_eq!(&out.y[..=ls], &trace.lateral_offset()[..=ls]);
        let final_y = *out.y.last().unwrap();
        assert!(final_y.abs() < out.y[ls].abs() || final_y < 0.0);
        // A single contiguous active interval starting at the trigger.
        let first = out.active.iter().position(|&a| a).unwrap();
        let count = out.active.iter().filter(|&&a| a).count();
        assert_eq!(first, ls);
        assert!(out.active[first..first + count].iter().all(|&a| a));
        assert!(out.departure_end < out.len() - 1 || out.outcome == SimOutcome::Capped);
    }

    #[test]
    fn right_departure_mirrors_left() {
        let (_, left) = run(&xi(0.6), Controller::On);
        let (_, right) = run(&xi(-0.6), Controller::On);
        assert_eq!(right.side, Side::Right);
        assert_eq!(left.len(), right.len());
        for (a, b) in left.y.iter().zip(&right.y) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn departure_window_rule() {
        assert_eq!(departure_end(&[0.0, 0.3, 0.1, -0.1, 0.2], Side::Left, 0.2), 3);
        assert_eq!(departure_end(&[0.0, 0.1, 0.0], Side::Left, 0.2), 2);
        assert_eq!(departure_end(&[0.0, -0.3, -0.25], Side::Right, 0.2), 2);
    }
}
