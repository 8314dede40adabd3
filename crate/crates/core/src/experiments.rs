//! Experiment drivers that turn the convergence-rate statements into
//! measurable scalings: fast error against `β` with and without filtering,
//! slow error against `a_t`, the bias `θ^β − θ*`, and the mean-flow
//! identities along a trajectory.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{integrate, max_step, GainSchedule, IntegrateOptions, Trajectory, TwoTimescaleSystem};
use crate::error::{QsaError, Result};
use crate::filters::SecondOrderFilter;
use crate::meanflow::{fast_equilibrium, find_root_g0};
use crate::poisson::{identity_residuals, pmeanflow_residual, pmeanflow_terms, DerivativeMode};

/// Least-squares line through `(log x, log y)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn loglog_fit(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(QsaError::InsufficientSamples { needed: 3, got: points.len() });
    }
    if let Some(p) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0) || !x.is_finite() || !y.is_finite()) {
        return Err(QsaError::InvalidInput(format!("log-log fit needs positive finite points, got {p:?}")));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= f64::EPSILON * (1.0 + mx * mx) * n {
        return Err(QsaError::DegenerateFit);
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(RateFit { points: points.to_vec(), slope, intercept, r_squared })
}

/// Horizon `T = scale / β`, optionally capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonPolicy {
    pub scale: f64,
    pub cap: Option<f64>,
}

impl Default for HorizonPolicy {
    fn default() -> Self {
        HorizonPolicy { scale: 200.0, cap: None }
    }
}

impl HorizonPolicy {
    pub fn horizon(&self, beta: f64) -> f64 {
        let t = self.scale / beta;
        self.cap.map_or(t, |c| t.min(c))
    }
}

/// Errors below this are treated as zero.
pub const ERROR_FLOOR: f64 = 1e-6;

/// Fraction of the horizon over which the fast error is measured.
pub const TRAILING_FRACTION: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct FastSweepConfig {
    pub rho: f64,
    pub betas: Vec<f64>,
    /// `(ζ, η)` of the second-order filter; `γ = η β` per run.
    pub filter: Option<(f64, f64)>,
    pub horizon: HorizonPolicy,
    /// Initial slow state.
    pub theta0: Vec<f64>,
    /// Initial fast state; defaults to `λ*(θ₀)` when known, else zero.
    pub lambda0: Option<Vec<f64>>,
    /// Averaging tolerance when the target has no closed form.
    pub tol: f64,
    /// Stored trajectories are thinned to at most this many samples; zero keeps none.
    pub keep_samples: usize,
}

impl FastSweepConfig {
    pub fn new(betas: Vec<f64>, theta0: Vec<f64>) -> Self {
        FastSweepConfig {
            rho: 0.7,
            betas,
            filter: None,
            horizon: HorizonPolicy::default(),
            theta0,
            lambda0: None,
            tol: 1e-6,
            keep_samples: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub beta: f64,
    /// `max ‖Λ_t − λ*(θ*)‖` over the trailing window.
    pub error: f64,
    pub horizon: f64,
    pub step: f64,
    pub trajectory: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepOutcome {
    Fit(RateFit),
    /// Every error is below [`ERROR_FLOOR`]: there is nothing to fit.
    AllBelowFloor,
}

#[derive(Debug, Clone)]
pub struct FastSweep {
    pub points: Vec<SweepPoint>,
    pub outcome: SweepOutcome,
}

impl FastSweep {
    pub fn xy(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.beta, p.error)).collect()
    }
}

/// Keep every `stride`-th sample and the last one.
pub fn thin(traj: &Trajectory, max_samples: usize) -> Trajectory {
    let n = traj.len();
    if max_samples == 0 || n <= max_samples {
        return traj.clone();
    }
    let stride = n.div_ceil(max_samples - 1).max(1);
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    if *idx.last().unwrap() != n - 1 {
        idx.push(n - 1);
    }
    let pick = |v: &Vec<Vec<f64>>| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    Trajectory {
        d_slow: traj.d_slow,
        d_fast: traj.d_fast,
        times: idx.iter().map(|&i| traj.times[i]).collect(),
        a: idx.iter().map(|&i| traj.a[i]).collect(),
        beta: idx.iter().map(|&i| traj.beta[i]).collect(),
        theta: pick(&traj.theta),
        lambda: pick(&traj.lambda),
        lambda_filtered: traj.lambda_filtered.as_ref().map(pick),
        lambda_filtered_rate: traj.lambda_filtered_rate.as_ref().map(pick),
        turns: pick(&traj.turns),
        step: traj.step,
    }
}

fn fast_target(system: &TwoTimescaleSystem, beta: f64, theta0: &[f64], tol: f64) -> Result<Vec<f64>> {
    if let Some(ts) = system.theta_star() {
        if let Some(l) = system.lambda_star(ts) {
            return Ok(l);
        }
    }
    let theta_beta = find_root_g0(system, theta0, beta, tol)?;
    Ok(fast_equilibrium(system, &theta_beta, beta, tol)?.value)
}

fn trailing_max(values: &[Vec<f64>], times: &[f64], target: &[f64]) -> f64 {
    let t_end = *times.last().unwrap_or(&0.0);
    let start = t_end * (1.0 - TRAILING_FRACTION);
    times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= start)
        .map(|(_, v)| v.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Trailing-window fast error for each `β`, run concurrently, and its
/// log-log fit against `β`.
pub fn fast_error_sweep(system: &TwoTimescaleSystem, cfg: &FastSweepConfig) -> Result<FastSweep> {
    let points: Vec<SweepPoint> = cfg
        .betas
        .par_iter()
        .map(|&beta| {
            sweep_point(system, cfg, beta).map_err(|e| QsaError::AtBeta { beta, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.beta, p.error)).collect();
    let outcome = if xy.iter().all(|p| p.1 < ERROR_FLOOR) {
        SweepOutcome::AllBelowFloor
    } else {
        SweepOutcome::Fit(loglog_fit(&xy)?)
    };
    Ok(FastSweep { points, outcome })
}

fn sweep_point(system: &TwoTimescaleSystem, cfg: &FastSweepConfig, beta: f64) -> Result<SweepPoint> {
    let schedule = GainSchedule::mixed(cfg.rho, beta)?;
    let target = fast_target(system, beta, &cfg.theta0, cfg.tol)?;
    let lambda0 = match &cfg.lambda0 {
        Some(l) => l.clone(),
        None => system.lambda_star(&cfg.theta0).unwrap_or_else(|| vec![0.0; system.d_fast()]),
    };
    let filter = cfg.filter.map(|(zeta, eta)| SecondOrderFilter::new(zeta, eta, beta)).transpose()?;
    let horizon = cfg.horizon.horizon(beta);
    let opts = IntegrateOptions::new(horizon).filter(filter);
    let traj = integrate(system, &schedule, &cfg.theta0, &lambda0, &opts)?;
    let error = trailing_max(traj.fast_output(), &traj.times, &target);
    let step = traj.step;
    let trajectory = (cfg.keep_samples > 0).then(|| thin(&traj, cfg.keep_samples));
    Ok(SweepPoint { beta, error, horizon, step, trajectory })
}

/// Window, as a fraction of the horizon, over which `q(t)` is max-smoothed.
pub const SLOW_SMOOTHING: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlowErrorReport {
    /// `sup q(t)` over the second half, `q(t) = ‖Θ_t − θ^β‖ / a_t`.
    pub sup_ratio: f64,
    /// `q̃(T) / q̃(T/2)` where `q̃` is the running max of `q` over the
    /// trailing smoothing window.
    pub ratio_trend: f64,
    pub q_half: f64,
    pub q_end: f64,
}

/// Bounded-ratio check of the slow error against the slow gain.
///
/// The pointwise `q(t)` oscillates through zero, so the trend compares
/// window maxima rather than single samples.
pub fn slow_error_check(traj: &Trajectory, theta_beta: &[f64]) -> Result<SlowErrorReport> {
    if traj.len() < 3 {
        return Err(QsaError::InsufficientSamples { needed: 3, got: traj.len() });
    }
    let t_end = *traj.times.last().unwrap();
    let q: Vec<f64> = (0..traj.len())
        .map(|i| {
            let e = traj.theta[i].iter().zip(theta_beta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            e / traj.a[i]
        })
        .collect();
    let window = SLOW_SMOOTHING * t_end;
    let window_max = |t: f64| {
        traj.times
            .iter()
            .zip(&q)
            .filter(|(s, _)| **s <= t && **s >= t - window)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max)
    };
    let sup_ratio = traj.times.iter().zip(&q).filter(|(t, _)| **t >= 0.5 * t_end).map(|(_, v)| *v).fold(0.0, f64::max);
    let q_half = window_max(0.5 * t_end);
    let q_end = window_max(t_end);
    let ratio_trend = if q_half > 0.0 {
        q_end / q_half
    } else if q_end == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(SlowErrorReport { sup_ratio, ratio_trend, q_half, q_end })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasPoint {
    pub beta: f64,
    pub theta_beta: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BiasOutcome {
    Fit(RateFit),
    /// Every bias is below ten times the averaging tolerance.
    SymmetricNoBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSweep {
    pub points: Vec<BiasPoint>,
    pub outcome: BiasOutcome,
}

/// `‖θ^β − θ*‖` for each `β`, with `θ^β` from the root of `ḡ₀`.
///
/// Roots are found to `tol`, which averages `ḡ₀` to `tol/10`; biases under
/// `tol` are indistinguishable from zero.
pub fn bias_sweep(system: &TwoTimescaleSystem, betas: &[f64], theta_init: &[f64], tol: f64) -> Result<BiasSweep> {
    let theta_star = system
        .theta_star()
        .ok_or_else(|| QsaError::InvalidInput(format!("system {} has no known root", system.name())))?
        .to_vec();
    let points: Vec<BiasPoint> = betas
        .par_iter()
        .map(|&beta| {
            let theta_beta = find_root_g0(system, theta_init, beta, tol)
                .map_err(|e| QsaError::AtBeta { beta, source: Box::new(e) })?;
            let bias = theta_beta.iter().zip(&theta_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            Ok(BiasPoint { beta, theta_beta, bias })
        })
        .collect::<Result<_>>()?;
    let outcome = if points.iter().all(|p| p.bias < tol) {
        BiasOutcome::SymmetricNoBias
    } else {
        let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.beta, p.bias)).collect();
        BiasOutcome::Fit(loglog_fit(&xy)?)
    };
    Ok(BiasSweep { points, outcome })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PmfSuiteReport {
    /// Poisson step for the fluctuation of `f`.
    pub step1: f64,
    /// Double Poisson step for `ĥ`.
    pub step2: f64,
    /// Decomposition of `Υ^ff`.
    pub step3: f64,
    /// Assembled fast right-hand side.
    pub assembled: f64,
    /// Mean-flow residual with analytic time derivatives.
    pub pmeanflow: f64,
    /// Largest `|Ῡ^ff|` over the grid.
    pub upsilon_ff_bar_max: f64,
    pub samples: usize,
}

/// Evaluate the mean-flow identities along a trajectory from `(θ₀, λ₀)`,
/// and `Ῡ^ff` over a grid of states.
pub fn pmf_identity_suite(
    system: &TwoTimescaleSystem,
    schedule: &GainSchedule,
    theta0: &[f64],
    lambda0: &[f64],
    horizon: f64,
    grid: &[Vec<f64>],
) -> Result<PmfSuiteReport> {
    let terms = pmeanflow_terms(system, schedule)?;
    let step = max_step(system.basis(), schedule.beta);
    let n = (horizon / step).ceil() as usize;
    let stride = (n / 2000).max(1);
    let traj = integrate(system, schedule, theta0, lambda0, &IntegrateOptions::new(horizon).stride(stride))?;
    let r = identity_residuals(&terms, &traj)?;
    let pmeanflow = pmeanflow_residual(&terms, &traj, DerivativeMode::Analytic)?;
    let upsilon_ff_bar_max = grid
        .iter()
        .map(|x| terms.upsilon_ff_bar(x).iter().map(|v| v.abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    Ok(PmfSuiteReport {
        step1: r.step1,
        step2: r.step2,
        step3: r.step3,
        assembled: r.assembled,
        pmeanflow,
        upsilon_ff_bar_max,
        samples: traj.len(),
    })
}

/// `fit.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_band: (f64, f64),
    pub r_squared_min: f64,
    pub pass: bool,
}

impl FitReport {
    pub fn new(fit: &RateFit, slope_band: (f64, f64), r_squared_min: f64) -> Self {
        let pass = fit.slope >= slope_band.0 && fit.slope <= slope_band.1 && fit.r_squared >= r_squared_min;
        FitReport { slope: fit.slope, intercept: fit.intercept, r_squared: fit.r_squared, slope_band, r_squared_min, pass }
    }
}

/// CSV with header `x,y`.
pub fn sweep_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("x,y\n");
    for (x, y) in points {
        writeln!(out, "{x:.16e},{y:.16e}").unwrap();
    }
    out
}

/// Write `sweep.csv` and, when given, `fit.json` into `dir`.
pub fn write_sweep(dir: &Path, points: &[(f64, f64)], fit: Option<&FitReport>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("sweep.csv"), sweep_csv(points))?;
    if let Some(f) = fit {
        let text = serde_json::to_string_pretty(f).map_err(|e| QsaError::Io(e.to_string()))?;
        std::fs::write(dir.join("fit.json"), text + "\n")?;
    }
    Ok(())
}
