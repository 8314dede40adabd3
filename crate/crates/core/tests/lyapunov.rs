mod common;

use std::sync::Arc;

use common::linear_fast;
use nalgebra::DMatrix;
use qsa_core::dynamics::{FieldArgs, FieldFn, TwoTimescaleSystem};
use qsa_core::lyapunov::*;
use qsa_core::models::LinearModel;
use qsa_core::probing::{default_basis, ProbingMap};
use qsa_core::QsaError;

#[test]
fn scalar_decay() {
    let sys = linear_fast(DMatrix::from_element(1, 1, -1.0), true);
    let e = lyapunov_exponent(&sys, &[0.0], 1.0, &[3.0], 200.0).unwrap();
    assert!((e.exponent + 1.0).abs() < 1e-3, "{e:?}");
    assert!((e.tail_exponent + 1.0).abs() < 1e-3);
}

#[test]
fn planar_complex_pair() {
    let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -2.0]);
    for analytic in [true, false] {
        let sys = linear_fast(f.clone(), analytic);
        let e = lyapunov_exponent(&sys, &[0.0], 1.0, &[1.0, 0.0], 500.0).unwrap();
        assert!((e.exponent + 1.0).abs() < 1e-2, "{e:?}");
    }
}

#[test]
fn exponent_is_linear_in_beta() {
    let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -2.0]);
    let sys = linear_fast(f, true);
    let e1 = lyapunov_exponent(&sys, &[0.0], 0.25, &[0.0, 0.0], 2000.0).unwrap();
    let e2 = lyapunov_exponent(&sys, &[0.0], 0.5, &[0.0, 0.0], 2000.0).unwrap();
    let ratio = e2.exponent / e1.exponent;
    assert!((ratio - 2.0).abs() < 0.04, "{ratio}");
}

#[test]
fn drive_does_not_matter_for_linear_fields() {
    let sys = linear_fast(DMatrix::from_element(1, 1, -0.5), true);
    let rows = lyapunov_grid(&sys, &[vec![-3.0], vec![4.0]], 1.0, &[0.0], 300.0).unwrap();
    assert!((rows[0].estimate.exponent - rows[1].estimate.exponent).abs() < 1e-3);
    assert!((rows[0].estimate.exponent + 0.5).abs() < 1e-3);
    let csv = lyapunov_csv(&rows);
    assert!(csv.starts_with("theta_1,beta,exponent,tail_exponent,horizon\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn multiplicative_noise_averages_out() {
    // ∂_λh = −1 + ξ₂ with zero-mean ξ₂: exponent −β.
    let sys = LinearModel::default().system().unwrap();
    let e = lyapunov_exponent(&sys, &[0.5], 0.2, &[0.0], 2000.0).unwrap();
    assert!((e.exponent + 0.2).abs() < 2e-3, "{e:?}");
}

#[test]
fn rescale_keeps_growth() {
    let mut s = SensitivityState::identity(2);
    s.s *= 1e5;
    let before = s.log_growth();
    s.rescale();
    assert!((s.s.norm() - 1.0).abs() < 1e-15);
    assert!((s.log_growth() - before).abs() < 1e-12);
}

#[test]
fn unstable_field_is_flagged() {
    let sys = linear_fast(DMatrix::from_element(1, 1, 50.0), true);
    let err = lyapunov_exponent(&sys, &[0.0], 1.0, &[1.0], 100.0).unwrap_err();
    assert!(matches!(err, QsaError::NonFinite { .. }), "{err}");
}

#[test]
fn changing_dynamics_are_inconclusive() {
    // decay rate drops from 1 to 0.1 halfway through
    let h: FieldFn = Arc::new(|a: &FieldArgs<'_>, out: &mut [f64]| {
        out[0] = if a.t < 20.0 { -a.lambda[0] } else { -0.1 * a.lambda[0] };
        Ok(())
    });
    let g: FieldFn = Arc::new(|_: &FieldArgs<'_>, out: &mut [f64]| {
        out[0] = 0.0;
        Ok(())
    });
    let sys = TwoTimescaleSystem::new("switch", 1, 1, default_basis(1).unwrap(), ProbingMap::Identity, g, h).unwrap();
    let err = lyapunov_exponent(&sys, &[0.0], 1.0, &[1.0], 40.0).unwrap_err();
    assert!(matches!(err, QsaError::Inconclusive { .. }), "{err}");
}
