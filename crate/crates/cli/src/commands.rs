//! One function per subcommand. Each writes its artifacts into `dir` and
//! reports whether the configured acceptance band held.

use std::path::Path;

use qsa_core::dynamics::{integrate, GainSchedule, IntegrateOptions};
use qsa_core::esc::{esc_averaging, objective_gradient, run_esc};
use qsa_core::experiments::{
    bias_sweep, fast_error_sweep, pmf_identity_suite, slow_error_check, write_sweep, BiasOutcome,
    FastSweepConfig, FitReport, HorizonPolicy, SweepOutcome,
};
use qsa_core::filters::SecondOrderFilter;
use qsa_core::lyapunov::{lyapunov_csv, lyapunov_grid};
use qsa_core::meanflow::{evaluate_grid, find_root_g0, grid_csv, AveragingOptions, GridQuantity};
use qsa_core::{QsaError, Result};
use serde::Serialize;

use crate::config::{GridQuantitySpec, Resolved, SystemKind};

/// Outcome of a subcommand that completed without error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// The named band did not hold.
    Fail(String),
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| QsaError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn schedule(r: &Resolved) -> Result<GainSchedule> {
    GainSchedule::mixed(r.config.gains.rho, r.beta)
}

fn options(r: &Resolved, horizon: f64) -> IntegrateOptions {
    let mut o = IntegrateOptions::new(horizon).stride(r.config.experiment.stride);
    o.step = r.config.experiment.step;
    o
}

fn averaging(r: &Resolved) -> AveragingOptions {
    r.esc.as_ref().map_or_else(AveragingOptions::default, esc_averaging)
}

#[derive(Serialize)]
struct Summary<'a> {
    system: &'a str,
    step: f64,
    samples: usize,
    final_theta: &'a [f64],
    final_lambda: &'a [f64],
    sup_norm: f64,
}

pub fn simulate(r: &Resolved, dir: &Path) -> Result<Verdict> {
    let f = &r.config.filter;
    let filter = f.enabled.then(|| SecondOrderFilter::new(f.zeta, f.eta, r.beta)).transpose()?;
    let opts = options(r, r.config.experiment.horizon).filter(filter);
    let traj = integrate(&r.system, &schedule(r)?, &r.theta0, &r.lambda0, &opts)?;
    traj.write_csv(&dir.join("trajectory.csv"))?;
    let summary = Summary {
        system: r.system.name(),
        step: traj.step,
        samples: traj.len(),
        final_theta: traj.final_theta(),
        final_lambda: traj.final_lambda(),
        sup_norm: traj.sup_norm(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(Verdict::Pass)
}

#[derive(Serialize)]
struct SweepRow {
    beta: f64,
    error: f64,
    horizon: f64,
    step: f64,
}

pub fn sweep_fast(r: &Resolved, dir: &Path) -> Result<Verdict> {
    let e = &r.config.experiment;
    let mut cfg = FastSweepConfig::new(e.betas.clone(), r.theta0.clone());
    cfg.rho = r.config.gains.rho;
    cfg.lambda0 = Some(r.lambda0.clone());
    cfg.tol = e.tol;
    cfg.horizon = HorizonPolicy { scale: e.horizon_scale, cap: e.horizon_cap };
    let band = if r.config.filter.enabled {
        cfg.filter = Some((r.config.filter.zeta, r.config.filter.eta));
        e.filtered_slope_band
    } else {
        e.slope_band
    };
    let sweep = fast_error_sweep(&r.system, &cfg)?;
    let rows: Vec<SweepRow> =
        sweep.points.iter().map(|p| SweepRow { beta: p.beta, error: p.error, horizon: p.horizon, step: p.step }).collect();
    write_json(&dir.join("points.json"), &rows)?;
    match &sweep.outcome {
        SweepOutcome::Fit(fit) => {
            let report = FitReport::new(fit, band, e.r_squared_min);
            write_sweep(dir, &sweep.xy(), Some(&report))?;
            Ok(band_verdict(&report, "fast error slope"))
        }
        SweepOutcome::AllBelowFloor => {
            write_sweep(dir, &sweep.xy(), None)?;
            log::info!("every fast error is below the floor; nothing to fit");
            Ok(Verdict::Pass)
        }
    }
}

fn band_verdict(report: &FitReport, what: &str) -> Verdict {
    if report.pass {
        Verdict::Pass
    } else {
        Verdict::Fail(format!(
            "{what} {:.4} with r^2 {:.4} outside band [{}, {}] with r^2 >= {}",
            report.slope, report.r_squared, report.slope_band.0, report.slope_band.1, report.r_squared_min
        ))
    }
}

#[derive(Serialize)]
struct SlowReport {
    theta_beta: Vec<f64>,
    horizon: f64,
    sup_ratio: f64,
    sup_ratio_doubled: f64,
    change: f64,
    allowed_change: f64,
    pass: bool,
}

pub fn check_slow(r: &Resolved, dir: &Path) -> Result<Verdict> {
    let e = &r.config.experiment;
    let theta_beta = find_root_g0(&r.system, &r.theta0, r.beta, e.tol)?;
    let sched = schedule(r)?;
    let run = |t: f64| integrate(&r.system, &sched, &r.theta0, &r.lambda0, &options(r, t));
    let short = run(e.horizon)?;
    let long = run(2.0 * e.horizon)?;
    short.write_csv(&dir.join("trajectory.csv"))?;
    let a = slow_error_check(&short, &theta_beta)?;
    let b = slow_error_check(&long, &theta_beta)?;
    let change = if a.sup_ratio > 0.0 { (b.sup_ratio / a.sup_ratio).max(a.sup_ratio / b.sup_ratio) } else { 1.0 };
    let pass = a.sup_ratio.is_finite() && b.sup_ratio.is_finite() && change < e.slow_ratio_change;
    let report = SlowReport {
        theta_beta,
        horizon: e.horizon,
        sup_ratio: a.sup_ratio,
        sup_ratio_doubled: b.sup_ratio,
        change,
        allowed_change: e.slow_ratio_change,
        pass,
    };
    write_json(&dir.join("slow.json"), &report)?;
    Ok(if pass {
        Verdict::Pass
    } else {
        Verdict::Fail(format!(
            "slow error ratio changed by {change:.4} when the horizon doubled, allowed {}",
            e.slow_ratio_change
        ))
    })
}

pub fn bias(r: &Resolved, dir: &Path) -> Result<Verdict> {
    let e = &r.config.experiment;
    let sweep = bias_sweep(&r.system, &e.bias_betas, &r.theta0, e.tol)?;
    write_json(&dir.join("points.json"), &sweep.points)?;
    let xy: Vec<(f64, f64)> = sweep.points.iter().map(|p| (p.beta, p.bias)).collect();
    match &sweep.outcome {
        BiasOutcome::Fit(fit) => {
            let report = FitReport::new(fit, e.bias_slope_band, e.r_squared_min);
            write_sweep(dir, &xy, Some(&report))?;
            Ok(band_verdict(&report, "bias slope"))
        }
        BiasOutcome::SymmetricNoBias => {
            write_sweep(dir, &xy, None)?;
            log::info!("bias below tolerance at every beta");
            Ok(Verdict::Pass)
        }
    }
}

#[derive(Serialize)]
struct PmfReport {
    #[serde(flatten)]
    residuals: qsa_core::experiments::PmfSuiteReport,
    tolerance: f64,
    pass: bool,
}

pub fn pmf(r: &Resolved, dir: &Path) -> Result<Verdict> {
    let e = &r.config.experiment;
    let dim = r.system.d_slow() + r.system.d_fast();
    let grid = e.grid.points(dim)?;
    let s = pmf_identity_suite(&r.system, &schedule(r)?, &r.theta0, &r.lambda0, e.pmf_horizon, &grid)?;
    let worst = [s.step1, s.step2, s.step3, s.assembled, s.pmeanflow, s.upsilon_ff_bar_max].into_iter().fold(0.0, f64::max);
    let pass = worst < e.pmf_tol;
    write_json(&dir.join("pmf.json"), &PmfReport { residuals: s, tolerance: e.pmf_tol, pass })?;
    Ok(if pass {
        Verdict::Pass
    } else {
        Verdict::Fail(format!("largest mean-flow identity residual {worst:e} is not below {:e}", e.pmf_tol))
    })
}

pub fn lyapunov(r: &Resolved, dir: &Path) -> Result<Verdict> {
    let e = &r.config.experiment;
    let thetas = e.grid.points(r.system.d_slow())?;
    let rows = lyapunov_grid(&r.system, &thetas, r.beta, &r.lambda0, e.lyapunov_horizon)?;
    std::fs::write(dir.join("lyapunov.csv"), lyapunov_csv(&rows))?;
    Ok(Verdict::Pass)
}

pub fn meanflow_grid(r: &Resolved, dir: &Path) -> Result<Verdict> {
    let e = &r.config.experiment;
    let thetas = e.grid.points(r.system.d_slow())?;
    let quantity = match e.grid_quantity {
        GridQuantitySpec::FastEquilibrium => GridQuantity::FastEquilibrium,
        GridQuantitySpec::SlowField => GridQuantity::SlowField,
    };
    let points = evaluate_grid(&r.system, &thetas, r.beta, e.tol, quantity, &averaging(r))?;
    std::fs::write(dir.join("grid.csv"), grid_csv(&points))?;
    Ok(Verdict::Pass)
}

#[derive(Serialize)]
struct EscSummary {
    final_theta: Vec<f64>,
    objective: f64,
    gradient: Vec<f64>,
    optimum: Option<Vec<f64>>,
    distance: Option<f64>,
    tolerance: f64,
}

pub fn esc(r: &Resolved, dir: &Path) -> Result<Verdict> {
    let cfg = match (&r.esc, r.kind) {
        (Some(cfg), SystemKind::Esc) => cfg,
        _ => return Err(QsaError::InvalidInput("the esc subcommand needs system esc-quadratic".into())),
    };
    let opts = options(r, r.config.esc.horizon);
    let traj = run_esc(cfg, r.config.gains.rho, &r.theta0, &opts)?;
    traj.write_csv(&dir.join("trajectory.csv"))?;
    let final_theta = traj.final_theta().to_vec();
    let optimum = r.config.esc.objective.optimum();
    let distance = optimum
        .as_ref()
        .map(|o| o.iter().zip(&final_theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
    let tolerance = r.config.esc.tolerance;
    let summary = EscSummary {
        objective: cfg.objective.value(&final_theta)?,
        gradient: objective_gradient(cfg.objective.as_ref(), &final_theta)?,
        final_theta,
        optimum,
        distance,
        tolerance,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(match distance {
        Some(d) if !(d <= tolerance) => {
            Verdict::Fail(format!("final parameter is {d:.4} from the optimum, allowed {tolerance}"))
        }
        _ => Verdict::Pass,
    })
}
