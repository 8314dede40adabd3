//! Acceptance run: one PASS/FAIL line per criterion, with measured values
//! and runtimes. Lines go straight to stdout so they survive output capture.

mod common;

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{gauss_legendre, linear_fast, time_derivative_at, Forcing};
use nalgebra::DMatrix;
use qsa_core::dynamics::{integrate, GainSchedule, IntegrateOptions};
use qsa_core::esc::{
    build_esc_system, esc_averaging, esc_meanflow_approx, meanflow_gap, probe_statistics, run_esc, EscConfig,
    Quadratic,
};
use qsa_core::experiments::{
    fast_error_sweep, loglog_fit, pmf_identity_suite, slow_error_check, FastSweepConfig, HorizonPolicy,
    SweepOutcome,
};
use qsa_core::filters::{passivity_metric, SecondOrderFilter};
use qsa_core::lyapunov::lyapunov_exponent;
use qsa_core::meanflow::{find_root_g0, mean_field_g0_with};
use qsa_core::models::{decoupled_test, LinearModel};
use qsa_core::poisson::{solve_poisson, Coefficient, Expr, FourierField};
use qsa_core::probing::{default_basis, make_frequency_basis, rational_dependence};
use qsa_core::QsaError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria a faithful implementation does not meet; the README explains why.
const KNOWN_FAILURES: &[u32] = &[4, 7];

const SWEEP_BETAS: [f64; 4] = [0.02, 0.04, 0.08, 0.16];

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, limit: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = run();
    let took = start.elapsed();
    let in_time = took <= limit;
    let pass = o.pass && in_time;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let timing = if in_time { String::new() } else { format!(" (over the {}s budget)", limit.as_secs()) };
    say(&format!("criterion {id} {verdict}: {name}: {} [{:.2}s]{timing}", o.detail, took.as_secs_f64()));
    pass
}

fn poisson_exactness() -> Outcome {
    let basis = default_basis(4).unwrap();
    let (mut worst_pointwise, mut worst_telescope) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let forcing = Forcing::random(seed);
        let uh = solve_poisson(&forcing.field(), &basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        for _ in 0..100 {
            let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let t = rng.gen_range(0.0..1000.0);
            let r = time_derivative_at(&uh, &basis, &x, t) + forcing.value(&basis, x[0], t);
            worst_pointwise = worst_pointwise.max(r.abs());
        }
        let theta = rng.gen_range(-3.0..3.0);
        let t0 = rng.gen_range(0.0..100.0);
        let integral = gauss_legendre(|t| forcing.value(&basis, theta, t), t0, t0 + 10.0, 4000);
        let x = [theta, 0.0];
        let jump = uh.eval_at(&x, &basis, t0 + 10.0)[0] - uh.eval_at(&x, &basis, t0)[0];
        worst_telescope = worst_telescope.max((jump + integral).abs());
    }
    Outcome {
        pass: worst_pointwise < 1e-10 && worst_telescope < 1e-8,
        detail: format!("max |du/dt + u| = {worst_pointwise:.2e} (< 1e-10), telescoping {worst_telescope:.2e} (< 1e-8)"),
    }
}

fn pmf_identities() -> Outcome {
    let sys = LinearModel::default().system().unwrap();
    let sched = GainSchedule::mixed(0.7, 0.1).unwrap();
    let grid: Vec<Vec<f64>> =
        (0..9).flat_map(|i| (0..9).map(move |j| vec![-2.0 + 0.5 * i as f64, -2.0 + 0.5 * j as f64])).collect();
    let r = pmf_identity_suite(&sys, &sched, &[1.0], &[1.0], 50.0, &grid).unwrap();
    let worst = [r.step1, r.step2, r.step3, r.assembled, r.pmeanflow].into_iter().fold(0.0, f64::max);

    let dep = make_frequency_basis(&[(2, 1), (4, 1)], &[]).unwrap();
    let mut u = FourierField::zero(2, 1, 1, 1);
    u.insert(vec![2, -1], Coefficient::real_exprs(vec![Expr::Const(0.5)])).unwrap();
    u.insert(vec![-2, 1], Coefficient::real_exprs(vec![Expr::Const(0.5)])).unwrap();
    let zero_divisor = matches!(solve_poisson(&u, &dep), Err(QsaError::ZeroDivisor { .. }));
    Outcome {
        pass: worst < 1e-8 && r.upsilon_ff_bar_max < 1e-8 && zero_divisor,
        detail: format!(
            "residuals step1 {:.1e} step2 {:.1e} step3 {:.1e} assembled {:.1e} mean-flow {:.1e}; max |bias term| {:.1e} on {} grid points; dependent basis raises ZeroDivisor: {zero_divisor}",
            r.step1, r.step2, r.step3, r.assembled, r.pmeanflow, r.upsilon_ff_bar_max, grid.len()
        ),
    }
}

fn sweep(filter: Option<(f64, f64)>, scale: f64) -> Result<(Vec<f64>, f64, f64), QsaError> {
    let sys = LinearModel::default().system().unwrap();
    let mut cfg = FastSweepConfig::new(SWEEP_BETAS.to_vec(), vec![1.0]);
    cfg.filter = filter;
    cfg.horizon = HorizonPolicy { scale, cap: None };
    let s = fast_error_sweep(&sys, &cfg)?;
    let errors = s.points.iter().map(|p| p.error).collect();
    match s.outcome {
        SweepOutcome::Fit(f) => Ok((errors, f.slope, f.r_squared)),
        SweepOutcome::AllBelowFloor => Ok((errors, f64::NAN, f64::NAN)),
    }
}

fn fmt_errors(e: &[f64]) -> String {
    e.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", ")
}

fn unfiltered_scaling() -> Outcome {
    let (errors, slope, r2) = sweep(None, 200.0).unwrap();
    Outcome {
        pass: (0.8..=1.2).contains(&slope) && r2 >= 0.95,
        detail: format!("slope {slope:.4} (band [0.8, 1.2]), r^2 {r2:.6} (>= 0.95); errors {}", fmt_errors(&errors)),
    }
}

fn filtered_scaling(scale: f64) -> Outcome {
    let (plain, _, _) = sweep(None, scale).unwrap();
    match sweep(Some((0.7, 1.0)), scale) {
        Ok((errors, slope, r2)) => {
            let below = errors.iter().zip(&plain).all(|(f, p)| f < p);
            Outcome {
                pass: (1.7..=2.3).contains(&slope) && r2 >= 0.95 && below,
                detail: format!(
                    "T = {scale}/beta: slope {slope:.4} (band [1.7, 2.3]), r^2 {r2:.6} (>= 0.95), every filtered error below unfiltered: {below}; filtered errors {}",
                    fmt_errors(&errors)
                ),
            }
        }
        Err(e) => Outcome { pass: false, detail: format!("T = {scale}/beta: {e}") },
    }
}

fn slow_error() -> Outcome {
    let sys = LinearModel::default().system().unwrap();
    let beta = 0.05;
    let theta_beta = find_root_g0(&sys, &[0.0], beta, 1e-6).unwrap();
    let sched = GainSchedule::mixed(0.7, beta).unwrap();
    let ratio = |t: f64| {
        let tr = integrate(&sys, &sched, &[1.0], &[-2.0], &IntegrateOptions::new(t).stride(10)).unwrap();
        slow_error_check(&tr, &theta_beta).unwrap().sup_ratio
    };
    let (short, long) = (ratio(4000.0), ratio(8000.0));
    let change = (long / short).max(short / long);
    Outcome {
        pass: short.is_finite() && long.is_finite() && change < 2.0,
        detail: format!("sup ratio {short:.5} at T = 4000, {long:.5} at T = 8000, change {change:.4}x (< 2x)"),
    }
}

fn lyapunov() -> Outcome {
    let scalar = linear_fast(DMatrix::from_element(1, 1, -1.0), true);
    let e_scalar = lyapunov_exponent(&scalar, &[0.0], 1.0, &[3.0], 200.0).unwrap().exponent;
    let planar = linear_fast(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -2.0]), true);
    let e_planar = lyapunov_exponent(&planar, &[0.0], 1.0, &[1.0, 0.0], 500.0).unwrap().exponent;
    let cfg = EscConfig::new(Arc::new(Quadratic::isotropic(vec![1.0])), 1).unwrap();
    let esc = build_esc_system(&cfg).unwrap();
    let pole = cfg.washout.spectral_abscissa();
    let esc_gap = [-2.0, 3.0]
        .iter()
        .map(|&th| (lyapunov_exponent(&esc, &[th], 1.0, &[0.0], 200.0).unwrap().exponent - pole).abs())
        .fold(0.0, f64::max);
    let e1 = lyapunov_exponent(&planar, &[0.0], 0.25, &[0.0, 0.0], 2000.0).unwrap().exponent;
    let e2 = lyapunov_exponent(&planar, &[0.0], 0.5, &[0.0, 0.0], 2000.0).unwrap().exponent;
    let ratio = e2 / e1;
    Outcome {
        pass: (e_scalar + 1.0).abs() <= 1e-3
            && (e_planar + 1.0).abs() <= 1e-2
            && esc_gap <= 1e-2
            && (ratio / 2.0 - 1.0).abs() <= 0.02,
        detail: format!(
            "scalar {e_scalar:.6} (-1 +- 1e-3), planar {e_planar:.5} (-1 +- 1e-2), washout gap {esc_gap:.1e} at theta = -2, 3 (<= 1e-2), beta ratio {ratio:.4} (2 within 2%)"
        ),
    }
}

fn quadratic_esc(epsilon: f64) -> EscConfig {
    let mut cfg = EscConfig::new(Arc::new(Quadratic::isotropic(vec![1.0])), 1).unwrap();
    cfg.epsilon = epsilon;
    cfg
}

fn esc_grid() -> Vec<Vec<f64>> {
    (0..11).map(|i| vec![-1.0 + 0.4 * i as f64]).collect()
}

fn esc_criterion() -> Outcome {
    let eps = [0.05, 0.1, 0.2];
    let gaps: Vec<(f64, f64)> = eps.iter().map(|&e| (e, meanflow_gap(&quadratic_esc(e), &esc_grid(), 1e-5).unwrap())).collect();
    let slope = loglog_fit(&gaps).map(|f| f.slope).unwrap_or(f64::NAN);
    let cfg = quadratic_esc(0.1);
    let (sigma, m0) = probe_statistics(&cfg, 1e-6).unwrap();
    let passivity = passivity_metric(&sigma, &m0).unwrap();
    let mut run_cfg = cfg.clone();
    run_cfg.single_at = true;
    let tr = run_esc(&run_cfg, 0.7, &[0.0], &IntegrateOptions::new(5000.0).stride(100)).unwrap();
    let dist = (tr.final_theta()[0] - 1.0).abs();
    let gap_text = gaps.iter().map(|(e, g)| format!("{g:.4} at eps {e}")).collect::<Vec<_>>().join(", ");
    Outcome {
        pass: slope >= 0.7 && passivity > 0.0 && dist <= 0.1,
        detail: format!(
            "approximation gap {gap_text}, slope {slope:.3} (>= 0.7); passivity {passivity:.4} (> 0); run ends {dist:.2e} from optimum (<= 0.1)"
        ),
    }
}

/// Gap to `−(σ(θ−θ_ctr) + Σ∇Γ)`, the approximation without the extra feedthrough term.
fn esc_corrected_gap(epsilon: f64) -> f64 {
    let cfg = quadratic_esc(epsilon);
    let sys = build_esc_system(&cfg).unwrap();
    let (sigma, _) = probe_statistics(&cfg, 1e-6).unwrap();
    let zero = DMatrix::zeros(1, 1);
    let opts = esc_averaging(&cfg);
    esc_grid()
        .iter()
        .map(|th| {
            let g0 = mean_field_g0_with(&sys, th, 1.0, 1e-5, &opts).unwrap().value[0];
            (g0 - esc_meanflow_approx(&cfg, th, &sigma, &zero).unwrap()[0]).abs()
        })
        .fold(0.0, f64::max)
}

fn number_theory() -> Outcome {
    let basis = default_basis(4).unwrap();
    let mut dependent = Vec::new();
    let mut checked = 0usize;
    let range = -6..=6;
    for a in range.clone() {
        for b in range.clone() {
            for c in range.clone() {
                for d in range.clone() {
                    let k = [a, b, c, d];
                    checked += 1;
                    if rational_dependence(&basis, &k).unwrap() {
                        dependent.push(k);
                    }
                }
            }
        }
    }
    let planted = make_frequency_basis(&[(2, 1), (4, 1)], &[]).unwrap();
    let found = rational_dependence(&planted, &[2, -1]).unwrap();
    Outcome {
        pass: dependent == vec![[0, 0, 0, 0]] && found,
        detail: format!("{checked} vectors checked, dependent: {dependent:?}; planted (2,1),(4,1) k = (2,-1) detected: {found}"),
    }
}

fn determinism_and_order() -> Outcome {
    let sys = LinearModel::default().system().unwrap();
    let sched = GainSchedule::mixed(0.7, 0.05).unwrap();
    let filter = SecondOrderFilter::new(0.7, 1.0, 0.05).unwrap();
    let opts = IntegrateOptions::new(500.0).filter(Some(filter));
    let a = integrate(&sys, &sched, &[1.0], &[-2.0], &opts).unwrap().to_csv();
    let b = integrate(&sys, &sched, &[1.0], &[-2.0], &opts).unwrap().to_csv();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let s1 = sweep(None, 50.0).unwrap().0;
    let s2 = sweep(None, 50.0).unwrap().0;
    let identical = a == b && bits(s1) == bits(s2);

    // RK4 on the decoupled problem: the fast part has a closed form, the slow
    // part is compared by successive halving.
    let dec = decoupled_test((2, 1)).unwrap();
    let sched = GainSchedule::mixed(0.7, 1.0).unwrap();
    let run = |h: f64| {
        let tr = integrate(&dec, &sched, &[0.0], &[1.0], &IntegrateOptions::new(10.0).step(h)).unwrap();
        (tr.final_theta()[0], tr.final_lambda()[0])
    };
    let h = 0.02;
    let (th1, la1) = run(h);
    let (th2, la2) = run(h / 2.0);
    let (th4, _) = run(h / 4.0);
    let exact = (-10.0f64).exp();
    let fast_ratio = (la1 - exact).abs() / (la2 - exact).abs();
    let slow_ratio = (th1 - th2).abs() / (th2 - th4).abs();
    let ratio = fast_ratio.min(slow_ratio);
    Outcome {
        pass: identical && ratio >= 12.0,
        detail: format!(
            "reruns bit-identical: {identical}; step-halving error ratio fast {fast_ratio:.2}, slow {slow_ratio:.2} (>= 12)"
        ),
    }
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut failed = Vec::new();
    let mut check = |id: u32, ok: bool| {
        if !ok {
            failed.push(id);
        }
    };
    check(1, report(1, "Poisson exactness", secs(10), poisson_exactness));
    check(2, report(2, "mean-flow identities", secs(60), pmf_identities));
    check(3, report(3, "unfiltered fast error scaling", secs(300), unfiltered_scaling));
    check(4, report(4, "filtered fast error scaling", secs(300), || filtered_scaling(200.0)));
    let start = Instant::now();
    let long = filtered_scaling(600.0);
    say(&format!("  info: filtered sweep over a longer horizon: {} [{:.2}s]", long.detail, start.elapsed().as_secs_f64()));
    check(5, report(5, "slow error ratio", secs(120), slow_error));
    check(6, report(6, "Lyapunov exponents", secs(60), lyapunov));
    check(7, report(7, "extremum seeking mean flow", secs(600), esc_criterion));
    let start = Instant::now();
    let corrected: Vec<(f64, f64)> = [0.05, 0.1, 0.2].iter().map(|&e| (e, esc_corrected_gap(e))).collect();
    let cslope = loglog_fit(&corrected).map(|f| f.slope).unwrap_or(f64::NAN);
    say(&format!(
        "  info: gap to the approximation without the feedthrough term: {}; slope {cslope:.3} [{:.2}s]",
        corrected.iter().map(|(e, g)| format!("{g:.3e} at eps {e}")).collect::<Vec<_>>().join(", "),
        start.elapsed().as_secs_f64()
    ));
    let mut verbatim = quadratic_esc(0.1);
    verbatim.single_at = false;
    let tr = run_esc(&verbatim, 0.7, &[0.0], &IntegrateOptions::new(5000.0).stride(100)).unwrap();
    say(&format!(
        "  info: run with the squared slow gain on the correlation term ends at theta = {:.4} (optimum 1)",
        tr.final_theta()[0]
    ));
    check(8, report(8, "probing number theory", secs(5), number_theory));
    check(9, report(9, "determinism and integrator order", secs(30), determinism_and_order));
    say(&format!("failing criteria: {failed:?}; known failures: {KNOWN_FAILURES:?}"));
    assert_eq!(failed, KNOWN_FAILURES, "acceptance results changed");
}
