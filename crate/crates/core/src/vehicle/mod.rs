//! Linear bicycle-model lateral dynamics in lane-error coordinates and the
//! aim-point correction controller.

mod sim;

use std::fs;
use std::path::Path;

use nalgebra::{Complex, Matrix4, Matrix4x2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::FeatureVector;

pub use sim::{propagate, simulate_event, simulate_event_with, Controller, ControlledTrajectory, SimOptions, SimOutcome};

/// Physical constants of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Front cornering stiffness [N/rad].
    pub c_alpha_f: f64,
    /// Rear cornering stiffness [N/rad].
    pub c_alpha_r: f64,
    /// CG to front axle [m].
    pub l_f: f64,
    /// CG to rear axle [m].
    pub l_r: f64,
    /// Yaw inertia [kg m^2].
    pub i_z: f64,
    /// Mass [kg].
    pub m: f64,
    /// Vehicle width [m].
    pub w_v: f64,
    /// Lane width [m].
    pub w_l: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            c_alpha_f: 80_000.0,
            c_alpha_r: 80_000.0,
            l_f: 1.43,
            l_r: 1.47,
            i_z: 3344.0,
            m: 1000.0,
            w_v: 1.9,
            w_l: 3.6,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("c_alpha_f", self.c_alpha_f),
            ("c_alpha_r", self.c_alpha_r),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("i_z", self.i_z),
            ("m", self.m),
            ("w_v", self.w_v),
            ("w_l", self.w_l),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Distance from the departure-side wheel edge to the lane edge when the
    /// vehicle is centred, `(w_l - w_v) / 2`.
    pub fn lateral_margin(&self) -> f64 {
        0.5 * (self.w_l - self.w_v)
    }
}

/// Aim-point controller gains and activation threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    /// Offset gain [rad/m].
    pub k_y: f64,
    /// Heading gain [rad/rad].
    pub k_psi: f64,
    /// Preview horizon [s].
    pub t_lp: f64,
    /// Trigger threshold on the departure distance [m].
    pub y_s: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            k_y: -0.005,
            k_psi: -0.2,
            t_lp: 2.0,
            y_s: 0.2,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_lp > 0.0) {
            return Err(Error::InvalidConfig(format!("t_lp must be positive, got {}", self.t_lp)));
        }
        if !(self.y_s > 0.0) {
            return Err(Error::InvalidConfig(format!("y_s must be positive, got {}", self.y_s)));
        }
        if !self.k_y.is_finite() || !self.k_psi.is_finite() {
            return Err(Error::InvalidConfig("gains must be finite".into()));
        }
        Ok(())
    }
}

/// Flat vehicle/controller configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleConfig {
    pub c_alpha_f: f64,
    pub c_alpha_r: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub i_z: f64,
    pub m: f64,
    pub w_l: f64,
    pub w_v: f64,
    pub t_lp: f64,
    pub k_y: f64,
    pub k_psi: f64,
    pub y_s: f64,
    pub ts: f64,
    /// Integration steps per output sample.
    pub substeps: usize,
    /// Deactivation band on `|e_y|` [m].
    pub band_e_y: f64,
    /// Deactivation band on `|de_y/dt|` [m/s].
    pub band_e_y_dot: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self::from_parts(&VehicleParams::default(), &ControllerGains::default(), 0.1, &SimOptions::default())
    }
}

impl VehicleConfig {
    pub fn from_parts(p: &VehicleParams, g: &ControllerGains, ts: f64, o: &SimOptions) -> Self {
        Self {
            c_alpha_f: p.c_alpha_f,
            c_alpha_r: p.c_alpha_r,
            l_f: p.l_f,
            l_r: p.l_r,
            i_z: p.i_z,
            m: p.m,
            w_l: p.w_l,
            w_v: p.w_v,
            t_lp: g.t_lp,
            k_y: g.k_y,
            k_psi: g.k_psi,
            y_s: g.y_s,
            ts,
            substeps: o.substeps,
            band_e_y: o.band_e_y,
            band_e_y_dot: o.band_e_y_dot,
        }
    }

    pub fn params(&self) -> VehicleParams {
        VehicleParams {
            c_alpha_f: self.c_alpha_f,
            c_alpha_r: self.c_alpha_r,
            l_f: self.l_f,
            l_r: self.l_r,
            i_z: self.i_z,
            m: self.m,
            w_v: self.w_v,
            w_l: self.w_l,
        }
    }

    pub fn gains(&self) -> ControllerGains {
        ControllerGains {
            k_y: self.k_y,
            k_psi: self.k_psi,
            t_lp: self.t_lp,
            y_s: self.y_s,
        }
    }

    pub fn options(&self) -> SimOptions {
        SimOptions {
            substeps: self.substeps,
            band_e_y: self.band_e_y,
            band_e_y_dot: self.band_e_y_dot,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        self.gains().validate()?;
        self.options().validate()?;
        if !(self.ts > 0.0) {
            return Err(Error::InvalidConfig(format!("ts must be positive, got {}", self.ts)));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let read = || -> Result<Self> { Self::from_json_str(&fs::read_to_string(path)?) };
        read().map_err(|e| e.at(path))
    }
}

/// Lane-error state `[e_y, de_y/dt, e_psi, de_psi/dt]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LateralState {
    pub e_y: f64,
    pub e_y_dot: f64,
    pub e_psi: f64,
    pub e_psi_dot: f64,
}

impl LateralState {
    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.e_y, self.e_y_dot, self.e_psi, self.e_psi_dot)
    }

    pub fn from_vector(x: &Vector4<f64>) -> Self {
        Self {
            e_y: x[0],
            e_y_dot: x[1],
            e_psi: x[2],
            e_psi_dot: x[3],
        }
    }
}

/// `dx/dt = A x + B delta + E psi_dot_l` at a frozen longitudinal speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSpace {
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
    pub e: Vector4<f64>,
}

pub fn build_state_space(p: &VehicleParams, v_x: f64) -> Result<StateSpace> {
    if !(v_x > 0.0) || !v_x.is_finite() {
        return Err(Error::InvalidSpeed(v_x));
    }
    let cf2 = 2.0 * p.c_alpha_f;
    let cr2 = 2.0 * p.c_alpha_r;
    let sum = cf2 + cr2;
    let moment = cf2 * p.l_f - cr2 * p.l_r;
    let inertia = cf2 * p.l_f * p.l_f + cr2 * p.l_r * p.l_r;
    #[rustfmt::skip]
    let a = Matrix4::new(
        0.0, 1.0, 0.0, 0.0,
        0.0, -sum / (p.m * v_x), sum / p.m, -moment / (p.m * v_x),
        0.0, 0.0, 0.0, 1.0,
        0.0, -moment / (p.i_z * v_x), moment / p.i_z, -inertia / (p.i_z * v_x),
    );
    let b = Vector4::new(0.0, cf2 / p.m, 0.0, cf2 * p.l_f / p.i_z);
    let e = Vector4::new(0.0, -moment / (p.m * v_x) - v_x, 0.0, -inertia / (p.i_z * v_x));
    Ok(StateSpace { a, b, e })
}

/// `delta = K_y e_y + K_psi (e_psi + delta_psi_l)`.
pub fn control_law(state: &LateralState, delta_psi_l: f64, g: &ControllerGains) -> f64 {
    g.k_y * state.e_y + g.k_psi * (state.e_psi + delta_psi_l)
}

/// Lane yaw rate and previewed heading change at event time `t`, for the
/// curvature profile `rho_0 + delta_rho t / T` driven at `v_x_ts`.
pub fn lane_heading_inputs(xi: &FeatureVector, v_x_ts: f64, t: f64, g: &ControllerGains) -> (f64, f64) {
    let big_t = xi.duration;
    let psi_dot = v_x_ts * (xi.delta_rho / big_t * t + xi.rho_0);
    let a = xi.delta_rho * g.t_lp * v_x_ts / big_t;
    let b = xi.delta_rho * g.t_lp * g.t_lp * v_x_ts / (2.0 * big_t) + v_x_ts * xi.rho_0 * g.t_lp;
    (psi_dot, a * t + b)
}

/// `dx/dt = A_c x + B_c [psi_dot_l, delta_psi_l]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoop {
    pub a_c: Matrix4<f64>,
    pub b_c: Matrix4x2<f64>,
}

pub fn closed_loop(p: &VehicleParams, g: &ControllerGains, v_x: f64) -> Result<ClosedLoop> {
    let ss = build_state_space(p, v_x)?;
    let f = nalgebra::RowVector4::new(g.k_y, 0.0, g.k_psi, 0.0);
    let a_c = ss.a + ss.b * f;
    let mut b_c = Matrix4x2::zeros();
    b_c.set_column(0, &ss.e);
    b_c.set_column(1, &(ss.b * g.k_psi));
    Ok(ClosedLoop { a_c, b_c })
}

pub fn closed_loop_eigenvalues(p: &VehicleParams, g: &ControllerGains, v_x: f64) -> Result<Vec<Complex<f64>>> {
    let cl = closed_loop(p, g, v_x)?;
    Ok(cl.a_c.complex_eigenvalues().iter().copied().collect())
}

/// True when every closed-loop eigenvalue has a strictly negative real part.
pub fn is_stable(p: &VehicleParams, g: &ControllerGains, v_x: f64) -> Result<bool> {
    Ok(closed_loop_eigenvalues(p, g, v_x)?.iter().all(|l| l.re < 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_matrix_entries() {
        let ss = build_state_space(&VehicleParams::default(), 20.0).unwrap();
        assert!((ss.a[(1, 1)] + 16.0).abs() < 1e-12);
        assert!((ss.b[1] - 160.0).abs() < 1e-12);
        assert_eq!(ss.a[(0, 1)], 1.0);
        assert_eq!(ss.a[(2, 3)], 1.0);
        assert!(matches!(build_state_space(&VehicleParams::default(), 0.0), Err(Error::InvalidSpeed(_))));
    }

    #[test]
    fn control_law_values() {
        let g = ControllerGains::default();
        assert_eq!(control_law(&LateralState::default(), 0.0, &g), 0.0);
        let s = LateralState {
            e_y: 1.0,
            ..LateralState::default()
        };
        assert!((control_law(&s, 0.0, &g) + 0.005).abs() < 1e-15);
        let s = LateralState {
            e_psi: 0.1,
            ..LateralState::default()
        };
        assert!((control_law(&s, 0.05, &g) + 0.03).abs() < 1e-15);
    }

    #[test]
    fn constant_curvature_preview() {
        let xi = FeatureVector {
            duration: 4.0,
            d_y: 0.5,
            sigma_y: 0.0,
            v_bar: 20.0,
            a_bar: 0.0,
            sigma_v: 0.0,
            rho_0: 0.001,
            delta_rho: 0.0,
        };
        for t in [0.0, 1.0, 3.5] {
            let (rate, preview) = lane_heading_inputs(&xi, 20.0, t, &ControllerGains::default());
            assert!((rate - 0.02).abs() < 1e-15);
            assert!((preview - 0.04).abs() < 1e-15);
        }
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = VehicleConfig::from_json_str(r#"{"k_y": -0.01}"#).unwrap();
        assert_eq!(cfg.k_y, -0.01);
        assert_eq!(cfg.params(), VehicleParams::default());
        assert!(VehicleConfig::from_json_str(r#"{"kappa": 1}"#).is_err());
        assert!(VehicleConfig::from_json_str(r#"{"m": -1}"#).is_err());
    }
}
