mod common;

use common::*;
use edgeloop::des::RngStream;
use edgeloop::qp::{self, QpProblem, SoftRows};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn random_box(rng: &mut RngStream, n: usize) -> (DVector<f64>, DVector<f64>) {
    let mut lb = DVector::zeros(n);
    let mut ub = DVector::zeros(n);
    for i in 0..n {
        let c = rng.normal(0.0, 0.5);
        let w = 0.05 + rng.uniform();
        lb[i] = if rng.uniform() < 0.1 { f64::NEG_INFINITY } else { c - w };
        ub[i] = if rng.uniform() < 0.1 { f64::INFINITY } else { c + w };
    }
    (lb, ub)
}

#[test]
fn box_qps_match_enumeration() {
    let mut rng = RngStream::new(2024, "test.qp.box");
    for case in 0..100 {
        let n = 1 + rng.below(6);
        let h = random_spd(&mut rng, n, 0.2);
        let g = random_vec(&mut rng, n, 2.0);
        let (lb, ub) = random_box(&mut rng, n);
        let want = box_qp_oracle(&h, &g, &lb, &ub);
        let p = QpProblem::new(h, g, lb, ub).unwrap();
        let sol = qp::solve(&p, None, 200_000, 1e-11).unwrap();
        assert!(sol.converged, "case {case}");
        assert!((&sol.z - &want).amax() <= 1e-7, "case {case}: {} vs {}", sol.z, want);
    }
}

#[test]
fn soft_rows_match_enumeration() {
    let mut rng = RngStream::new(7, "test.qp.soft");
    for case in 0..60 {
        let n = 1 + rng.below(4);
        let m = 1 + rng.below(3);
        let h = random_spd(&mut rng, n, 0.5);
        let g = random_vec(&mut rng, n, 2.0);
        let (lb, ub) = random_box(&mut rng, n);
        let a = DMatrix::from_fn(m, n, |_, _| rng.standard_normal());
        let lo = DVector::from_fn(m, |_, _| -0.3 - rng.uniform());
        let hi = DVector::from_fn(m, |i, _| lo[i] + 0.1 + rng.uniform());
        let rho = [1.0, 30.0, 1000.0][case % 3];
        let want = soft_qp_oracle(&h, &g, &lb, &ub, &a, &lo, &hi, rho);
        let p = QpProblem::new(h, g, lb, ub).unwrap().with_soft_rows(SoftRows::new(a, lo, hi, rho).unwrap()).unwrap();
        let sol = qp::solve(&p, None, 500_000, 1e-10).unwrap();
        assert!(sol.converged, "case {case}");
        assert!((&sol.z - &want).amax() <= 1e-7, "case {case}: {} vs {}", sol.z, want);
        assert!(p.objective(&sol.z) <= p.objective(&want) + 1e-9);
    }
}

#[test]
fn inactive_soft_rows_change_nothing() {
    let mut rng = RngStream::new(8, "test.qp.soft.slack");
    let h = random_spd(&mut rng, 4, 1.0);
    let g = random_vec(&mut rng, 4, 1.0);
    let lb = DVector::from_element(4, -1.0);
    let ub = DVector::from_element(4, 1.0);
    let plain = QpProblem::new(h, g, lb, ub).unwrap();
    let a = DMatrix::identity(4, 4);
    let soft = plain
        .clone()
        .with_soft_rows(SoftRows::new(a, DVector::from_element(4, -10.0), DVector::from_element(4, 10.0), 1e6).unwrap())
        .unwrap();
    let x = qp::solve(&plain, None, 100_000, 1e-10).unwrap();
    let y = qp::solve(&soft, None, 100_000, 1e-10).unwrap();
    assert!((&x.z - &y.z).amax() <= 1e-9);
}

#[test]
fn extremal_eigs_match_jacobi() {
    let mut rng = RngStream::new(3, "test.qp.eig");
    for _ in 0..40 {
        let n = 2 + rng.below(9);
        let h = random_spd(&mut rng, n, 0.3);
        let ev = jacobi_eigenvalues(&h);
        let (l, mu) = qp::extremal_eigs(&h).unwrap();
        let top = ev[n - 1];
        assert!((l - top).abs() <= 1e-8 * top, "λmax {l} vs {top}");
        assert!((mu - ev[0]).abs() <= 1e-6 * top, "λmin {mu} vs {}", ev[0]);
        assert!((qp::max_eig(&h).unwrap() - top).abs() <= 1e-8 * top);
    }
}

#[test]
fn dare_residual_on_random_systems() {
    let mut rng = RngStream::new(11, "test.qp.dare");
    for case in 0..50 {
        let n = 1 + rng.below(4);
        let m = 1 + rng.below(2);
        let a = DMatrix::from_fn(n, n, |_, _| 0.6 * rng.standard_normal());
        let b = DMatrix::from_fn(n, m, |_, _| rng.standard_normal());
        let q = DMatrix::identity(n, n);
        let r = DMatrix::identity(m, m);
        let p = qp::dare(&a, &b, &q, &r).unwrap();
        let res = qp::dare_residual(&a, &b, &q, &r, &p);
        assert!(res <= 1e-10, "case {case}: residual {res:e}");
        let k = qp::lqr_gain(&a, &b, &r, &p).unwrap();
        let closed = &a - &b * k;
        let rho = closed.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(rho < 1.0, "case {case}: closed loop spectral radius {rho}");
    }
}

#[test]
fn scalar_dare_is_the_golden_ratio() {
    let one = DMatrix::from_element(1, 1, 1.0);
    let p = qp::dare(&one, &one, &one, &one).unwrap();
    assert!((p[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs() <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solution_is_feasible_and_no_worse_than_any_box_point(seed in any::<u64>(), n in 1usize..7, probe in prop::collection::vec(0.0f64..1.0, 6)) {
        let mut rng = RngStream::new(seed, "prop.qp");
        let h = random_spd(&mut rng, n, 0.1);
        let g = random_vec(&mut rng, n, 3.0);
        let lb = DVector::from_fn(n, |_, _| -0.2 - rng.uniform());
        let ub = DVector::from_fn(n, |_, _| 0.2 + rng.uniform());
        let p = QpProblem::new(h, g, lb.clone(), ub.clone()).unwrap();
        let sol = qp::solve(&p, None, 200_000, 1e-9).unwrap();
        for i in 0..n {
            prop_assert!(sol.z[i] >= lb[i] && sol.z[i] <= ub[i]);
        }
        let other = DVector::from_fn(n, |i, _| lb[i] + probe[i] * (ub[i] - lb[i]));
        prop_assert!(p.objective(&sol.z) <= p.objective(&other) + 1e-9);
    }

    #[test]
    fn warm_start_does_not_change_the_answer(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = RngStream::new(seed, "prop.qp.warm");
        let h = random_spd(&mut rng, n, 0.5);
        let g = random_vec(&mut rng, n, 2.0);
        let lb = DVector::from_element(n, -0.5);
        let ub = DVector::from_element(n, 0.5);
        let warm = random_vec(&mut rng, n, 5.0);
        let p = QpProblem::new(h, g, lb, ub).unwrap();
        let cold = qp::solve(&p, None, 200_000, 1e-11).unwrap();
        let hot = qp::solve(&p, Some(&warm), 200_000, 1e-11).unwrap();
        prop_assert!((&cold.z - &hot.z).amax() <= 1e-8);
    }

    #[test]
    fn capped_solves_stay_in_the_box(seed in any::<u64>(), cap in 1usize..5) {
        let mut rng = RngStream::new(seed, "prop.qp.cap");
        let h = random_spd(&mut rng, 5, 1e-3);
        let g = random_vec(&mut rng, 5, 10.0);
        let p = QpProblem::new(h, g, DVector::from_element(5, -1.0), DVector::from_element(5, 2.0)).unwrap();
        let sol = qp::solve(&p, Some(&random_vec(&mut rng, 5, 100.0)), cap, 1e-14).unwrap();
        prop_assert!(sol.iterations <= cap);
        prop_assert!(sol.z.iter().all(|&x| (-1.0..=2.0).contains(&x)));
    }
}
