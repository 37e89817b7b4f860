mod common;

use std::f64::consts::PI;

use nalgebra::Vector3;
use osg_core::constants::sr87_g_factor_hz_per_gauss;
use osg_core::rng::stream;
use osg_core::spin::*;
use proptest::prelude::*;
use rand::Rng;

use common::{rotation_beta, wigner_d};

/// Max population error against the d-matrix oracle for a constant field,
/// starting from basis state `index` along z.
fn oracle_error(b: Vector3<f64>, index: usize, t: f64) -> f64 {
    let g = sr87_g_factor_hz_per_gauss();
    let ops = make_spin_operators(4.5).unwrap();
    let sched = FieldSchedule::constant(b, g);
    let dt = sched.max_step().min(t.max(1e-9)) / 2.0;
    let psi = SpinVector::basis_state(10, index, Vector3::z()).unwrap();
    let out = evolve(&psi, &sched, &ops, t, dt).unwrap();
    let beta = rotation_beta(&b, 2.0 * PI * g.abs() * b.norm() * t);
    let m = 4.5 - index as f64;
    (0..10)
        .map(|i| (out.amps[i].norm_sqr() - wigner_d(4.5, 4.5 - i as f64, m, beta).powi(2)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn oracle_rows_are_normalized() {
    for beta in [0.0, 0.3, 1.7, PI] {
        for m in [4.5, 0.5, -3.5] {
            let s: f64 = (0..10).map(|i| wigner_d(4.5, 4.5 - i as f64, m, beta).powi(2)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    assert!((wigner_d(4.5, 4.5, 4.5, 0.8) - (0.4f64).cos().powi(9)).abs() < 1e-14);
    assert!((wigner_d(0.5, -0.5, 0.5, 0.8) - (0.4f64).sin()).abs() < 1e-14);
}

#[test]
fn constant_fields_match_wigner_oracle() {
    let mut rng = stream(7, 2000, 0);
    for case in 0..20 {
        let b = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = rng.random_range(0.0..5e-3);
        let index = rng.random_range(0..10);
        let err = oracle_error(b, index, t);
        assert!(err < 1e-8, "case {case}: B = {b:?}, t = {t}, index {index}: error {err:e}");
    }
}

#[test]
fn step_refinement_converges_for_the_quench() {
    let sched = FieldSchedule::default();
    let times = [0.6e-3, 2.0e-3];
    let fine = quench_experiment_with_step(&sched, &times, 1.0, 1e-7).unwrap();
    let mut errs = Vec::new();
    for dt in [4e-6, 2e-6, 1e-6] {
        let r = quench_experiment_with_step(&sched, &times, 1.0, dt).unwrap();
        let e = r
            .iter()
            .zip(&fine)
            .flat_map(|(a, b)| a.p_m.iter().zip(b.p_m.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        errs.push(e);
    }
    // midpoint rule: second order
    for w in errs.windows(2) {
        assert!(w[1] < w[0] / 3.0, "{errs:?}");
    }
    assert!(errs[2] < 1e-4, "{errs:?}");
}

#[test]
fn norm_drift_over_one_second() {
    let ops = make_spin_operators(4.5).unwrap();
    let sched = FieldSchedule::default();
    let psi = SpinVector::stretched(10, Vector3::from(sched.b_guide)).unwrap();
    let out = evolve(&psi, &sched, &ops, 1.0, 1e-6).unwrap();
    assert!((out.norm_sqr() - 1.0).abs() < 1e-10, "{}", out.norm_sqr() - 1.0);
}

#[test]
fn quench_csv_rows_match_records() {
    let r = quench_experiment(&FieldSchedule::default(), &[0.0, 1e-3], 1.0).unwrap();
    let cols = PopulationRecord::CSV_HEADER.split(',').count();
    for rec in &r {
        let row = rec.csv_row();
        assert_eq!(row.split(',').count(), cols);
        let p: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((p - rec.p_abs[0]).abs() < 1e-11);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn populations_stay_normalized(
        bx in -1.5f64..1.5, by in -1.5f64..1.5, bz in -1.5f64..1.5,
        t in 0.0f64..3e-3, p_prep in 0.5f64..1.0, angle in 0.0f64..0.3,
    ) {
        let sched = FieldSchedule {
            b_guide: [0.08, 0.0, 0.0],
            b_quench_amplitude: (bx * bx + by * by + bz * bz).sqrt(),
            quench_axis: [bx + 1e-3, by, bz],
            detection_axis_angle: angle,
            ..FieldSchedule::default()
        };
        let r = quench_experiment(&sched, &[t], p_prep).unwrap();
        let total: f64 = r[0].p_m.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
        prop_assert!((r[0].p_abs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(r[0].p_m.iter().all(|p| *p >= -1e-15));
    }

    #[test]
    fn reversed_field_undoes_evolution(bx in -1.0f64..1.0, bz in 0.1f64..1.0, t in 1e-4f64..2e-3) {
        let ops = make_spin_operators(4.5).unwrap();
        let g = sr87_g_factor_hz_per_gauss();
        let fwd = FieldSchedule::constant(Vector3::new(bx, 0.2, bz), g);
        let back = FieldSchedule::constant(Vector3::new(-bx, -0.2, -bz), g);
        let psi = SpinVector::basis_state(10, 2, Vector3::new(0.3, 0.1, 1.0)).unwrap().to_z_basis(&ops).unwrap();
        let mid = evolve(&psi, &fwd, &ops, t, fwd.max_step() / 2.0).unwrap();
        let end = evolve(&mid, &back, &ops, t, back.max_step() / 2.0).unwrap();
        let overlap = psi.amps.dotc(&end.amps).norm();
        prop_assert!((overlap - 1.0).abs() < 1e-9);
    }
}
