use std::sync::Arc;

use qsa_core::dynamics::{integrate, FieldArgs, FieldFn, GainSchedule, IntegrateOptions, TwoTimescaleSystem};
use qsa_core::experiments::*;
use qsa_core::models::{decoupled_test, LinearModel};
use qsa_core::poisson::{pmeanflow_residual, pmeanflow_terms, DerivativeMode};
use qsa_core::probing::{make_frequency_basis, ProbingMap};
use qsa_core::QsaError;

#[test]
fn loglog_examples() {
    let f = loglog_fit(&[(1.0, 2.0), (2.0, 4.0), (4.0, 8.0)]).unwrap();
    assert!((f.slope - 1.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
    assert!((f.intercept - 2f64.ln()).abs() < 1e-12);
    let f = loglog_fit(&[(0.1, 0.01), (0.2, 0.04), (0.4, 0.16)]).unwrap();
    assert!((f.slope - 2.0).abs() < 1e-12);
    let f = loglog_fit(&[(1.0, 3.0), (2.0, 3.0), (5.0, 3.0)]).unwrap();
    assert!(f.slope.abs() < 1e-12);
    assert_eq!(loglog_fit(&[(2.0, 1.0), (2.0, 3.0), (2.0, 5.0)]).unwrap_err(), QsaError::DegenerateFit);
    assert!(matches!(loglog_fit(&[(1.0, 1.0), (2.0, 2.0)]), Err(QsaError::InsufficientSamples { .. })));
    assert!(matches!(loglog_fit(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]), Err(QsaError::InvalidInput(_))));
}

#[test]
fn fit_report_band() {
    let fit = loglog_fit(&[(1.0, 1.0), (2.0, 2.0), (4.0, 4.0)]).unwrap();
    assert!(FitReport::new(&fit, (0.8, 1.2), 0.95).pass);
    assert!(!FitReport::new(&fit, (1.7, 2.3), 0.95).pass);
}

#[test]
fn unfiltered_fast_error_scales_linearly() {
    let sys = LinearModel::default().system().unwrap();
    let cfg = FastSweepConfig::new(vec![0.02, 0.04, 0.08, 0.16], vec![1.0]);
    let sweep = fast_error_sweep(&sys, &cfg).unwrap();
    let SweepOutcome::Fit(fit) = &sweep.outcome else { panic!("{:?}", sweep.outcome) };
    assert!(fit.slope >= 0.8 && fit.slope <= 1.2 && fit.r_squared >= 0.95, "{fit:?}");
    // errors are ordered by β and the horizon follows the policy
    for w in sweep.points.windows(2) {
        assert!(w[0].error < w[1].error);
    }
    assert!((sweep.points[0].horizon - 200.0 / 0.02).abs() < 1e-9);
}

#[test]
fn filtered_fast_error_scales_quadratically_over_long_horizons() {
    let sys = LinearModel::default().system().unwrap();
    let betas = vec![0.02, 0.04, 0.08, 0.16];
    let mut cfg = FastSweepConfig::new(betas.clone(), vec![1.0]);
    cfg.filter = Some((0.7, 1.0));
    cfg.horizon = HorizonPolicy { scale: 600.0, cap: None };
    let filtered = fast_error_sweep(&sys, &cfg).unwrap();
    let SweepOutcome::Fit(fit) = &filtered.outcome else { panic!() };
    assert!(fit.slope >= 1.7 && fit.slope <= 2.3 && fit.r_squared >= 0.95, "{fit:?}");
    cfg.filter = None;
    let plain = fast_error_sweep(&sys, &cfg).unwrap();
    for (f, p) in filtered.points.iter().zip(&plain.points) {
        assert!(f.error < p.error, "beta {}: {} vs {}", f.beta, f.error, p.error);
    }
}

#[test]
fn probe_free_fast_state_is_below_floor() {
    let sys = decoupled_test((2, 1)).unwrap().with_theta_star(vec![0.0]);
    let mut cfg = FastSweepConfig::new(vec![0.1, 0.2, 0.4], vec![0.0]);
    cfg.keep_samples = 50;
    let sweep = fast_error_sweep(&sys, &cfg).unwrap();
    assert_eq!(sweep.outcome, SweepOutcome::AllBelowFloor);
    let tr = sweep.points[0].trajectory.as_ref().unwrap();
    assert!(tr.len() <= 51 && tr.len() >= 40);
}

#[test]
fn sweep_errors_carry_beta() {
    let sys = LinearModel::default().system().unwrap();
    let mut cfg = FastSweepConfig::new(vec![0.1], vec![0.0]);
    cfg.rho = 0.4;
    let err = fast_error_sweep(&sys, &cfg).unwrap_err();
    assert!(matches!(err, QsaError::AtBeta { .. }));
    assert!(matches!(err.root(), QsaError::InvalidInput(_)));
    assert!(err.to_string().contains("1/2 < rho < 1"));
}

#[test]
fn slow_error_ratio_is_bounded() {
    let sys = LinearModel::default().system().unwrap();
    let beta = 0.05;
    let theta_beta = qsa_core::meanflow::find_root_g0(&sys, &[0.0], beta, 1e-6).unwrap();
    let sched = GainSchedule::mixed(0.7, beta).unwrap();
    let run = |t: f64| {
        let tr = integrate(&sys, &sched, &[0.0], &[0.0], &IntegrateOptions::new(t).stride(10)).unwrap();
        slow_error_check(&tr, &theta_beta).unwrap()
    };
    let (short, long) = (run(4000.0), run(8000.0));
    assert!(short.sup_ratio.is_finite() && short.sup_ratio > 0.0);
    let change = long.sup_ratio / short.sup_ratio;
    assert!(change > 0.5 && change < 2.0, "{short:?} {long:?}");
}

#[test]
fn slow_check_of_exact_trajectory_is_zero() {
    let sys = decoupled_test((2, 1)).unwrap();
    let sched = GainSchedule::mixed(0.7, 0.5).unwrap();
    let mut tr = integrate(&sys, &sched, &[0.0], &[0.0], &IntegrateOptions::new(20.0)).unwrap();
    for th in &mut tr.theta {
        th[0] = 0.25;
    }
    let r = slow_error_check(&tr, &[0.25]).unwrap();
    assert_eq!((r.sup_ratio, r.ratio_trend), (0.0, 0.0));
}

fn probe_blind_slow_field() -> TwoTimescaleSystem {
    let basis = make_frequency_basis(&[(2, 1), (3, 1)], &[]).unwrap();
    let g: FieldFn = Arc::new(|a: &FieldArgs<'_>, out: &mut [f64]| {
        out[0] = 0.5 - a.theta[0];
        Ok(())
    });
    let h: FieldFn = Arc::new(|a: &FieldArgs<'_>, out: &mut [f64]| {
        out[0] = -a.lambda[0] + a.xi[0] * a.xi[1];
        Ok(())
    });
    TwoTimescaleSystem::new("blind", 1, 1, basis, ProbingMap::Identity, g, h).unwrap().with_theta_star(vec![0.5])
}

#[test]
fn bias_vanishes_without_coupling() {
    let sweep = bias_sweep(&probe_blind_slow_field(), &[0.05, 0.1, 0.2], &[0.0], 1e-6).unwrap();
    assert_eq!(sweep.outcome, BiasOutcome::SymmetricNoBias);
}

#[test]
fn linear_model_bias_shrinks_with_beta() {
    let model = LinearModel { offset: [0.3, -0.2], row_scale: [1.5, 0.5], ..LinearModel::default() };
    let sweep = bias_sweep(&model.system().unwrap(), &[0.025, 0.05, 0.1, 0.2], &[0.0], 1e-7).unwrap();
    let BiasOutcome::Fit(fit) = &sweep.outcome else { panic!("{:?}", sweep.outcome) };
    assert!(fit.slope >= 0.8 && fit.r_squared >= 0.95, "{fit:?}");
}

#[test]
fn pmf_suite_on_linear_model() {
    let sys = LinearModel::default().system().unwrap();
    let sched = GainSchedule::mixed(0.7, 0.1).unwrap();
    let grid: Vec<Vec<f64>> =
        (0..5).flat_map(|i| (0..5).map(move |j| vec![-2.0 + i as f64, -2.0 + j as f64])).collect();
    let r = pmf_identity_suite(&sys, &sched, &[1.0], &[1.0], 50.0, &grid).unwrap();
    for v in [r.step1, r.step2, r.step3, r.assembled, r.pmeanflow, r.upsilon_ff_bar_max] {
        assert!(v < 1e-8, "{r:?}");
    }
    assert!(r.samples > 100);
}

#[test]
fn finite_difference_residual_is_second_order() {
    let sys = LinearModel::default().system().unwrap();
    let sched = GainSchedule::mixed(0.7, 0.1).unwrap();
    let terms = pmeanflow_terms(&sys, &sched).unwrap();
    let residual = |h: f64| {
        let tr = integrate(&sys, &sched, &[1.0], &[1.0], &IntegrateOptions::new(2.0).step(h)).unwrap();
        pmeanflow_residual(&terms, &tr, DerivativeMode::FiniteDifference).unwrap()
    };
    let (coarse, fine) = (residual(1e-3), residual(5e-4));
    let ratio = coarse / fine;
    assert!(ratio > 3.0 && ratio < 5.0, "{coarse} {fine}");
}

#[test]
fn finite_difference_residual_detects_mismatched_dynamics() {
    // The closure disagrees with the Fourier form by a constant in the fast row.
    let model = LinearModel::default();
    let honest = model.system().unwrap();
    let h: FieldFn = Arc::new(|a: &FieldArgs<'_>, out: &mut [f64]| {
        out[0] = -2.0 * a.theta[0] - a.lambda[0] + 0.3 + a.xi[1] * (a.lambda[0] + 1.0);
        Ok(())
    });
    let g: FieldFn = Arc::new(|a: &FieldArgs<'_>, out: &mut [f64]| {
        out[0] = 2.0 * a.theta[0] + 2.0 * a.lambda[0] + a.xi[0] * (a.theta[0] + 1.0);
        Ok(())
    });
    let bad = TwoTimescaleSystem::new("bad", 1, 1, honest.basis().clone(), ProbingMap::Identity, g, h).unwrap();
    let sched = GainSchedule::mixed(0.7, 0.1).unwrap();
    let terms = pmeanflow_terms(&honest, &sched).unwrap();
    let tr = integrate(&bad, &sched, &[0.0], &[0.0], &IntegrateOptions::new(2.0).step(1e-3)).unwrap();
    assert!(pmeanflow_residual(&terms, &tr, DerivativeMode::FiniteDifference).unwrap() > 1e-3);
}

#[test]
fn thinning_keeps_endpoints() {
    let sys = decoupled_test((2, 1)).unwrap();
    let sched = GainSchedule::mixed(0.7, 0.5).unwrap();
    let tr = integrate(&sys, &sched, &[0.0], &[1.0], &IntegrateOptions::new(10.0)).unwrap();
    let t = thin(&tr, 10);
    assert!(t.len() <= 10);
    assert_eq!(t.times[0], 0.0);
    assert_eq!(t.times.last(), tr.times.last());
    assert_eq!(t.final_lambda(), tr.final_lambda());
    assert_eq!(thin(&tr, 0), tr);
}

#[test]
fn sweep_files() {
    let dir = std::env::temp_dir().join(format!("qsa-sweep-{}", std::process::id()));
    let pts = [(0.1, 0.2), (0.2, 0.4), (0.4, 0.8)];
    let fit = FitReport::new(&loglog_fit(&pts).unwrap(), (0.8, 1.2), 0.95);
    write_sweep(&dir, &pts, Some(&fit)).unwrap();
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("x,y\n1.0000000000000001e-1,"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("fit.json")).unwrap()).unwrap();
    assert_eq!(json["pass"], true);
    std::fs::remove_dir_all(&dir).unwrap();
}
