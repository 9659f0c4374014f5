mod common;

use common::expm_nilpotent;
use edgeloop::des::{RngStream, SimTime};
use edgeloop::plant::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Exact ZOH pair from the exponential of the augmented generator.
fn zoh_oracle(params: &PlantParams, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut m = DMatrix::zeros(4, 4);
    m[(0, 1)] = 1.0;
    m[(1, 2)] = params.k_v;
    m[(2, 3)] = params.k_omega;
    let e = expm_nilpotent(&(m * h));
    (e.view((0, 0), (3, 3)).clone_owned(), e.view((0, 3), (3, 1)).clone_owned())
}

#[test]
fn discrete_model_is_the_exact_zoh() {
    let params = PlantParams::default();
    for h in [1e-3, 0.01, 0.05, 0.2] {
        let (a, b) = params.discrete_model(h);
        let (ao, bo) = zoh_oracle(&params, h);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[(i, j)] - ao[(i, j)]).abs() <= 1e-12);
            }
            assert!((b[i] - bo[(i, 0)]).abs() <= 1e-12);
        }
    }
}

#[test]
fn unsaturated_step_matches_the_oracle() {
    let params = PlantParams::default().noiseless();
    let mut rng = RngStream::new(4, "test.plant.zoh");
    for _ in 0..200 {
        let s = PlantState::at(rng.normal(0.0, 0.1), rng.normal(0.0, 0.1), rng.normal(0.0, 0.03));
        let u = rng.normal(0.0, 0.5);
        let h = 0.05;
        let end = s.alpha + params.k_omega * u * h;
        if end.abs() >= params.alpha_max || s.alpha.abs() >= params.alpha_max {
            continue;
        }
        let (a, b) = zoh_oracle(&params, h);
        let x = nalgebra::DVector::from_column_slice(s.vector().as_slice());
        let want = &a * x + &b * u;
        let got = propagate(&params, &s, u, h).unwrap();
        if !got.off_beam {
            assert!((got.vector() - nalgebra::Vector3::new(want[0], want[1], want[2])).amax() <= 1e-12);
        }
    }
}

#[test]
fn grid_noise_is_independent_of_event_timing() {
    let params = PlantParams::default();
    let start = PlantState::at(0.0, 0.0, 0.01);
    let mut one = PlantProcess::new(params.clone(), start);
    let mut many = PlantProcess::new(params, start);
    let mut a = RngStream::new(3, "plant.process");
    let mut b = RngStream::new(3, "plant.process");
    one.advance_to(SimTime::from_secs(2), &mut a).unwrap();
    let mut t = SimTime::ZERO;
    let mut jitter = RngStream::new(1, "test.jitter");
    while t < SimTime::from_secs(2) {
        t = (t + SimTime::from_micros(1 + jitter.below(80_000) as u64)).min(SimTime::from_secs(2));
        many.advance_to(t, &mut b).unwrap();
    }
    assert!((one.state().vector() - many.state().vector()).amax() <= 1e-12);
}

#[test]
fn velocity_kicks_have_the_configured_spread() {
    let params = PlantParams { sigma_proc: 0.01, ..PlantParams::default() };
    let mut noise = RngStream::new(9, "test.plant.kick");
    let s = PlantState::default();
    let n = 20_000;
    let kicks: Vec<f64> = (0..n).map(|_| step(&params, &s, 0.0, params.noise_period, &mut noise).unwrap().v).collect();
    let var = kicks.iter().map(|v| v * v).sum::<f64>() / n as f64;
    assert!((var.sqrt() / 0.01 - 1.0).abs() < 0.03, "std {}", var.sqrt());
}

proptest! {
    #[test]
    fn half_steps_compose(p in -0.4f64..0.4, v in -0.5f64..0.5, alpha in -0.2f64..0.2, u in -2.0f64..2.0, h in 1e-3f64..0.3) {
        let params = PlantParams::default().noiseless();
        let s = PlantState::at(p, v, alpha);
        let whole = propagate(&params, &s, u, h).unwrap();
        let mid = propagate(&params, &s, u, h / 2.0).unwrap();
        let halves = propagate(&params, &mid, u, h / 2.0).unwrap();
        prop_assert_eq!(whole.off_beam, halves.off_beam);
        if !whole.off_beam {
            prop_assert!((whole.vector() - halves.vector()).amax() <= 1e-12);
        }
        prop_assert!(whole.alpha.abs() <= params.alpha_max);
    }

    #[test]
    fn readings_stay_on_the_adc_grid(p in -0.6f64..0.6, alpha in -0.3f64..0.3, seed in any::<u64>()) {
        let params = PlantParams::default();
        let mut noise = RngStream::new(seed, "prop.adc");
        let m = measure(&params, &PlantState::at(p, 0.0, alpha), SimTime::ZERO, &mut noise);
        let ps = params.position_step().unwrap();
        let k = m.pos_reading / ps;
        prop_assert!((k - k.round()).abs() < 1e-9 || m.pos_reading.abs() == params.half_length());
        prop_assert!(m.pos_reading.abs() <= params.half_length());
        prop_assert!(m.ang_reading.abs() <= params.angle_range / 2.0);
    }
}
