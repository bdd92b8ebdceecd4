mod common;

use lanedep::metrics::departure_area;
use lanedep::sampler::{regenerate_event, Noise};
use lanedep::trace::FeatureVector;
use lanedep::vehicle::{
    closed_loop, closed_loop_eigenvalues, lane_heading_inputs, propagate, simulate_event, simulate_event_with,
    Controller, ControllerGains, SimOptions, SimOutcome, VehicleParams,
};
use nalgebra::{Vector2, Vector4};
use proptest::prelude::*;

use common::simpson;

fn xi(duration: f64, d_y: f64, v_bar: f64, rho_0: f64, delta_rho: f64) -> FeatureVector {
    FeatureVector {
        duration,
        d_y,
        sigma_y: 0.0,
        v_bar,
        a_bar: 0.0,
        sigma_v: 0.0,
        rho_0,
        delta_rho,
    }
}

#[test]
fn table_gains_are_stable_across_speeds() {
    let (p, g) = (VehicleParams::default(), ControllerGains::default());
    for i in 0..=70 {
        let v = 5.0 + 0.5 * i as f64;
        let eig = closed_loop_eigenvalues(&p, &g, v).unwrap();
        assert!(eig.iter().all(|l| l.re < 0.0), "v = {v}: {eig:?}");
    }
}

#[test]
fn unstable_gains_are_flagged() {
    let g = ControllerGains {
        k_y: 0.05,
        k_psi: 0.2,
        ..ControllerGains::default()
    };
    let e = xi(3.0, 0.6, 20.0, 0.0, 0.0);
    let trace = regenerate_event(&e, 0.1, Noise::Off, 0).unwrap();
    let out = simulate_event(&trace, &e, &VehicleParams::default(), &g, Controller::On).unwrap();
    assert!(out.unstable_gains);
    let stable = simulate_event(&trace, &e, &VehicleParams::default(), &ControllerGains::default(), Controller::On).unwrap();
    assert!(!stable.unstable_gains);
}

#[test]
fn homogeneous_response_is_linear() {
    let cl = closed_loop(&VehicleParams::default(), &ControllerGains::default(), 20.0).unwrap();
    let zero = |_: f64| Vector2::zeros();
    let x0 = Vector4::new(1.1, 0.3, 0.02, -0.01);
    let mut a = x0;
    let mut b = x0 * 3.7;
    for step in 0..50 {
        a = propagate(&cl, &a, &zero, step as f64 * 0.1, 0.1, 10);
        b = propagate(&cl, &b, &zero, step as f64 * 0.1, 0.1, 10);
    }
    let diff = (b - a * 3.7).amax();
    assert!(diff < 1e-9 * (1.0 + b.amax()), "{diff}");
}

#[test]
fn preview_is_integral_of_lane_heading_rate() {
    let g = ControllerGains::default();
    let e = xi(6.0, 0.5, 22.0, 4e-4, -3e-4);
    for &t in &[0.0, 1.3, 3.0, 4.0] {
        let (_, preview) = lane_heading_inputs(&e, 22.0, t, &g);
        let integral = simpson(&|s| lane_heading_inputs(&e, 22.0, s, &g).0, t, t + g.t_lp, 1e-14);
        assert!((preview - integral).abs() < 1e-12, "t = {t}: {preview} vs {integral}");
    }
    let straight = lane_heading_inputs(&xi(4.0, 0.5, 20.0, 0.0, 0.0), 20.0, 1.0, &g);
    assert_eq!(straight, (0.0, 0.0));
}

#[test]
fn halving_the_step_barely_moves_the_final_offset() {
    let e = xi(4.0, 0.6, 20.0, 2e-4, 1e-4);
    let trace = regenerate_event(&e, 0.1, Noise::Off, 0).unwrap();
    let (p, g) = (VehicleParams::default(), ControllerGains::default());
    let run = |substeps| {
        let o = SimOptions {
            substeps,
            band_e_y: 0.0,
            band_e_y_dot: 0.0,
            ..SimOptions::default()
        };
        simulate_event_with(&trace, &e, &p, &g, Controller::On, &o).unwrap()
    };
    let (a, b) = (run(10), run(20));
    assert_eq!(a.len(), b.len());
    let diff = (a.final_state.unwrap().e_y - b.final_state.unwrap().e_y).abs();
    assert!(diff < 1e-4, "{diff}");
}

#[test]
fn controlled_event_covers_less_area() {
    let e = xi(4.0, 0.6, 20.0, 0.0, 0.0);
    let trace = regenerate_event(&e, 0.1, Noise::Off, 0).unwrap();
    let (p, g) = (VehicleParams::default(), ControllerGains::default());
    let off = simulate_event(&trace, &e, &p, &g, Controller::Off).unwrap();
    let on = simulate_event(&trace, &e, &p, &g, Controller::On).unwrap();
    assert!(on.triggered());
    assert!(departure_area(&on) < departure_area(&off));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn off_is_identity_and_on_has_one_active_interval(
        duration in 0.6f64..9.0,
        d_y in prop_oneof![-1.2f64..-0.05, 0.05f64..1.2],
        v_bar in 6.0f64..38.0,
        rho_0 in -4e-4f64..4e-4,
        delta_rho in -2e-4f64..2e-4,
        sigma_y in 0.0f64..0.08,
        seed in 0u64..1000,
    ) {
        let e = FeatureVector { sigma_y, ..xi(duration, d_y, v_bar, rho_0, delta_rho) };
        let trace = regenerate_event(&e, 0.1, Noise::On, seed).unwrap();
        let (p, g) = (VehicleParams::default(), ControllerGains::default());
        let off = simulate_event(&trace, &e, &p, &g, Controller::Off).unwrap();
        prop_assert_eq!(&off.y[..], trace.lateral_offset());
        prop_assert_eq!(off.outcome, SimOutcome::Uncontrolled);

        let on = simulate_event(&trace, &e, &p, &g, Controller::On).unwrap();
        prop_assert!(on.len() <= ((2.0 * trace.duration() / trace.sample_period()) + 1e-9).floor() as usize + 1);
        let starts = on.active.windows(2).filter(|w| !w[0] && w[1]).count() + usize::from(on.active[0]);
        prop_assert!(starts <= 1);
        match on.trigger_index {
            Some(ls) => {
                prop_assert!(on.active[ls]);
                prop_assert_eq!(&on.y[..=ls], &trace.lateral_offset()[..=ls]);
            }
            None => prop_assert_eq!(on.outcome, SimOutcome::NoTrigger),
        }
        prop_assert!(on.y.iter().all(|v| v.is_finite()));
    }
}
