//! Averaged objects of the frozen-fast dynamics.
//!
//! With `θ` held fixed, the fast state `Λ^θ` runs under constant gain `β`
//! and forgets its initial condition. Time averages along that run realize
//! the fast equilibrium `λ*(θ)` and the effective slow field `ḡ₀(θ)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{max_step, FieldArgs, Rk4, TwoTimescaleSystem};
use crate::error::{QsaError, Result};
use crate::probing::ergodic_average;

/// Controls for frozen-fast averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragingOptions {
    /// Decay rate of the frozen fast dynamics per unit `β`; the burn-in is
    /// `burn_in_constants / (β · decay_rate)`.
    pub decay_rate: f64,
    pub burn_in_constants: f64,
    /// Length of the first averaging window in periods of the slowest probe.
    pub window_periods: f64,
    /// Window doublings allowed before giving up.
    pub max_windows: usize,
    /// Starting fast state; defaults to the closed-form `λ*(θ)` or zero.
    pub lambda0: Option<Vec<f64>>,
    /// Integration step; defaults to the step policy bound.
    pub step: Option<f64>,
}

impl Default for AveragingOptions {
    fn default() -> Self {
        AveragingOptions {
            decay_rate: 1.0,
            burn_in_constants: 20.0,
            window_periods: 100.0,
            max_windows: 8,
            lambda0: None,
            step: None,
        }
    }
}

/// A time average along the frozen-fast run.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenAverage {
    pub value: Vec<f64>,
    /// Largest deviation from `value` over the final windows.
    pub osc_amplitude: f64,
    /// Total simulated time, burn-in included.
    pub horizon: f64,
}

/// What to average along the frozen run.
#[derive(Clone, Copy)]
enum Observable {
    Fast,
    Slow,
}

fn frozen_average(
    system: &TwoTimescaleSystem,
    theta: &[f64],
    beta: f64,
    tol: f64,
    opts: &AveragingOptions,
    what: Observable,
) -> Result<FrozenAverage> {
    if !(beta > 0.0) || !(tol > 0.0) {
        return Err(QsaError::InvalidInput(format!("beta and tol must be positive, got {beta} and {tol}")));
    }
    if !(opts.decay_rate > 0.0) {
        return Err(QsaError::InvalidInput(format!("decay rate must be positive, got {}", opts.decay_rate)));
    }
    let (ds, df) = (system.d_slow(), system.d_fast());
    if theta.len() != ds {
        return Err(QsaError::Dimension(format!("theta has length {}, system expects {ds}", theta.len())));
    }
    let lambda0 = match &opts.lambda0 {
        Some(l) => l.clone(),
        None => system.lambda_star(theta).unwrap_or_else(|| vec![0.0; df]),
    };
    if lambda0.len() != df {
        return Err(QsaError::Dimension(format!("lambda0 has length {}, system expects {df}", lambda0.len())));
    }

    let bound = max_step(system.basis(), beta);
    let h = match opts.step {
        Some(h) if h > 0.0 && h <= bound => h,
        Some(h) => return Err(QsaError::InvalidInput(format!("step {h} outside (0, {bound}]"))),
        None => bound,
    };
    let burn_steps = (opts.burn_in_constants / (beta * opts.decay_rate) / h).ceil() as usize;
    let window0 = opts.window_periods / system.basis().min_omega();
    let mut window_steps = (window0 / h).ceil() as usize;

    let basis = system.basis();
    let map = system.map();
    let mut turns = vec![0.0; basis.len()];
    let mut xi = vec![0.0; system.probe_dim()];
    let mut hbuf = vec![0.0; df];
    let mut rhs = |t: f64, z: &[f64], dz: &mut [f64]| -> Result<()> {
        basis.turns_into(t, &mut turns);
        map.eval_turns(&turns, &mut xi);
        let args = FieldArgs { t, theta, lambda: z, xi: &xi, turns: &turns, a: 1.0 };
        system.eval_h(&args, &mut hbuf)?;
        for i in 0..df {
            dz[i] = beta * hbuf[i];
        }
        Ok(())
    };
    let dim = match what {
        Observable::Fast => df,
        Observable::Slow => ds,
    };
    let mut obs_turns = vec![0.0; basis.len()];
    let mut obs_xi = vec![0.0; system.probe_dim()];
    let mut observe = |t: f64, z: &[f64], out: &mut [f64]| -> Result<()> {
        match what {
            Observable::Fast => out.copy_from_slice(z),
            Observable::Slow => {
                basis.turns_into(t, &mut obs_turns);
                map.eval_turns(&obs_turns, &mut obs_xi);
                let args = FieldArgs { t, theta, lambda: z, xi: &obs_xi, turns: &obs_turns, a: 1.0 };
                system.eval_g(&args, out)?;
            }
        }
        Ok(())
    };

    let mut z = lambda0;
    let mut rk = Rk4::new(df);
    let mut step_no = 0usize;
    for _ in 0..burn_steps {
        advance(&mut rk, &mut z, &mut step_no, h, &mut rhs)?;
    }

    // Hann-weighted averages over consecutive windows, each twice the last.
    // The weight vanishes smoothly at both ends, so the error from a partial
    // probe period falls off like W⁻³ instead of W⁻¹.
    let mut cur = vec![0.0; dim];
    observe(step_no as f64 * h, &z, &mut cur)?;
    let mut prev: Option<(Vec<f64>, Vec<Vec<f64>>, usize)> = None;
    for _ in 0..opts.max_windows {
        let mut sum = vec![0.0; dim];
        let mut samples = Vec::with_capacity(window_steps + 1);
        samples.push(cur.clone());
        for i in 1..=window_steps {
            advance(&mut rk, &mut z, &mut step_no, h, &mut rhs)?;
            observe(step_no as f64 * h, &z, &mut cur)?;
            let w = 1.0 - (std::f64::consts::TAU * i as f64 / window_steps as f64).cos();
            for (s, v) in sum.iter_mut().zip(&cur) {
                *s += w * v;
            }
            samples.push(cur.clone());
        }
        let avg: Vec<f64> = sum.iter().map(|s| s / window_steps as f64).collect();
        if let Some((p, psamples, psteps)) = &prev {
            let diff = avg.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if diff <= tol {
                let total = (window_steps + psteps) as f64;
                let value: Vec<f64> = avg
                    .iter()
                    .zip(p)
                    .map(|(a, b)| (a * window_steps as f64 + b * *psteps as f64) / total)
                    .collect();
                let osc = psamples
                    .iter()
                    .chain(&samples)
                    .map(|s| s.iter().zip(&value).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
                    .fold(0.0, f64::max);
                return Ok(FrozenAverage { value, osc_amplitude: osc, horizon: step_no as f64 * h });
            }
        }
        prev = Some((avg, samples, window_steps));
        window_steps *= 2;
    }
    Err(QsaError::NonConvergent(format!(
        "frozen-fast window averages at theta = {theta:?} did not settle to {tol} within {} time units",
        step_no as f64 * h
    )))
}

fn advance<F>(rk: &mut Rk4, z: &mut [f64], step_no: &mut usize, h: f64, rhs: &mut F) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    rk.step(rhs, *step_no as f64 * h, h, z)?;
    *step_no += 1;
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(QsaError::NonFinite { t: *step_no as f64 * h })
    }
}

/// Which average a grid evaluation reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridQuantity {
    FastEquilibrium,
    SlowField,
}

/// Evaluate `λ*` or `ḡ₀` over a set of `θ` points in parallel.
pub fn evaluate_grid(
    system: &TwoTimescaleSystem,
    thetas: &[Vec<f64>],
    beta: f64,
    tol: f64,
    quantity: GridQuantity,
    opts: &AveragingOptions,
) -> Result<Vec<GridPoint>> {
    let what = match quantity {
        GridQuantity::FastEquilibrium => Observable::Fast,
        GridQuantity::SlowField => Observable::Slow,
    };
    thetas
        .par_iter()
        .map(|th| {
            frozen_average(system, th, beta, tol, opts, what).map(|average| GridPoint { theta: th.clone(), average })
        })
        .collect()
}

/// Time average of the frozen fast state: the equilibrium `λ*(θ)` up to
/// averaging error.
pub fn fast_equilibrium(system: &TwoTimescaleSystem, theta: &[f64], beta: f64, tol: f64) -> Result<FrozenAverage> {
    fast_equilibrium_with(system, theta, beta, tol, &AveragingOptions::default())
}

pub fn fast_equilibrium_with(
    system: &TwoTimescaleSystem,
    theta: &[f64],
    beta: f64,
    tol: f64,
    opts: &AveragingOptions,
) -> Result<FrozenAverage> {
    frozen_average(system, theta, beta, tol, opts, Observable::Fast)
}

/// Effective slow field `ḡ₀(θ)`: the stationary average of `g(θ, Λ^θ_t, ξ_t)`.
pub fn mean_field_g0(system: &TwoTimescaleSystem, theta: &[f64], beta: f64, tol: f64) -> Result<FrozenAverage> {
    mean_field_g0_with(system, theta, beta, tol, &AveragingOptions::default())
}

pub fn mean_field_g0_with(
    system: &TwoTimescaleSystem,
    theta: &[f64],
    beta: f64,
    tol: f64,
    opts: &AveragingOptions,
) -> Result<FrozenAverage> {
    frozen_average(system, theta, beta, tol, opts, Observable::Slow)
}

pub const NEWTON_MAX_ITER: usize = 100;
pub const NEWTON_MIN_STEP: f64 = 1.0 / 1024.0;
pub const MAX_CONDITION: f64 = 1e12;

/// Root `θ^β` of `ḡ₀` by damped Newton with a finite-difference Jacobian.
///
/// Averages are computed to `tol / 10` so that the stopping test
/// `‖ḡ₀‖ < tol` sits above the averaging noise.
pub fn find_root_g0(system: &TwoTimescaleSystem, theta_init: &[f64], beta: f64, tol: f64) -> Result<Vec<f64>> {
    find_root_g0_with(system, theta_init, beta, tol, &AveragingOptions::default())
}

pub fn find_root_g0_with(
    system: &TwoTimescaleSystem,
    theta_init: &[f64],
    beta: f64,
    tol: f64,
    opts: &AveragingOptions,
) -> Result<Vec<f64>> {
    let avg_tol = 0.1 * tol;
    let field = |theta: &[f64]| -> Result<Vec<f64>> { Ok(mean_field_g0_with(system, theta, beta, avg_tol, opts)?.value) };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = theta_init.len();
    let fd = (10.0 * avg_tol).max(1e-4);

    let mut theta = theta_init.to_vec();
    let mut g = field(&theta)?;
    for _ in 0..NEWTON_MAX_ITER {
        if norm(&g) < tol {
            return Ok(theta);
        }
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += fd;
            tm[j] -= fd;
            let (gp, gm) = (field(&tp)?, field(&tm)?);
            for i in 0..d {
                jac[(i, j)] = (gp[i] - gm[i]) / (2.0 * fd);
            }
        }
        let sv = jac.clone().singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(cond <= MAX_CONDITION) {
            return Err(QsaError::SingularJacobian { cond });
        }
        let delta = jac
            .lu()
            .solve(&DVector::from_column_slice(&g))
            .ok_or(QsaError::SingularJacobian { cond: f64::INFINITY })?;
        let mut s = 1.0;
        loop {
            let trial: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, dl)| t - s * dl).collect();
            let gt = field(&trial)?;
            if norm(&gt) < norm(&g) {
                theta = trial;
                g = gt;
                break;
            }
            s *= 0.5;
            if s < NEWTON_MIN_STEP {
                return Err(QsaError::NonConvergent(format!(
                    "Newton line search stalled at theta = {theta:?} with |g0| = {:e}",
                    norm(&g)
                )));
            }
        }
    }
    if norm(&g) < tol {
        return Ok(theta);
    }
    Err(QsaError::NonConvergent(format!("Newton iteration on g0 did not converge in {NEWTON_MAX_ITER} iterations")))
}

/// Settings for [`mean_flow_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFlowOptions {
    pub step: f64,
    /// Fast gain and tolerance used when `λ*` has no closed form.
    pub beta: f64,
    pub tol: f64,
}

impl Default for MeanFlowOptions {
    fn default() -> Self {
        MeanFlowOptions { step: 1e-2, beta: 0.05, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFlowPath {
    pub times: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
}

/// `ḡ(θ, λ)`: the probe average of `g` with the fast state held fixed.
pub fn slow_mean(system: &TwoTimescaleSystem, theta: &[f64], lambda: &[f64], tol: f64) -> Result<Vec<f64>> {
    let ds = system.d_slow();
    let mut x = theta.to_vec();
    x.extend_from_slice(lambda);
    if let Some(f) = system.fourier() {
        let mut m = f.mean(&x);
        m.truncate(ds);
        return Ok(m);
    }
    let err = std::cell::RefCell::new(None);
    let avg = ergodic_average(
        |x: &[f64], xi: &[f64]| {
            let mut out = vec![0.0; ds];
            let args = FieldArgs { t: 0.0, theta: &x[..ds], lambda: &x[ds..], xi, turns: &[], a: 1.0 };
            if let Err(e) = system.eval_g(&args, &mut out) {
                err.borrow_mut().get_or_insert(e);
            }
            out
        },
        &x,
        system.basis(),
        system.map(),
        tol,
    )?;
    match err.into_inner() {
        Some(e) => Err(e),
        None => Ok(avg.value),
    }
}

/// RK4 solution of `dϑ/dt = ḡ(ϑ, λ*(ϑ))`.
///
/// Without a closed-form `λ*`, each field evaluation runs a frozen-fast
/// average, which is slow.
pub fn mean_flow_solve(
    system: &TwoTimescaleSystem,
    theta0: &[f64],
    horizon: f64,
    opts: &MeanFlowOptions,
) -> Result<MeanFlowPath> {
    if !(horizon > 0.0) || !(opts.step > 0.0) {
        return Err(QsaError::InvalidInput("horizon and step must be positive".into()));
    }
    if system.lambda_star(theta0).is_none() {
        log::warn!("no closed-form fast equilibrium for {}; averaging at every mean-flow evaluation", system.name());
    }
    let d = theta0.len();
    let n = (horizon / opts.step).ceil() as usize;
    let h = horizon / n as f64;
    let mut rhs = |_t: f64, th: &[f64], out: &mut [f64]| -> Result<()> {
        let lambda = match system.lambda_star(th) {
            Some(l) => l,
            None => fast_equilibrium(system, th, opts.beta, opts.tol)?.value,
        };
        out.copy_from_slice(&slow_mean(system, th, &lambda, opts.tol)?);
        Ok(())
    };
    let mut rk = Rk4::new(d);
    let mut z = theta0.to_vec();
    let mut path = MeanFlowPath { times: vec![0.0], theta: vec![z.clone()] };
    for i in 1..=n {
        rk.step(&mut rhs, (i - 1) as f64 * h, h, &mut z)?;
        let t = i as f64 * h;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(QsaError::NonFinite { t });
        }
        path.times.push(t);
        path.theta.push(z.clone());
    }
    Ok(path)
}

/// One row of a grid export.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub theta: Vec<f64>,
    pub average: FrozenAverage,
}

/// CSV with header `theta_1..d,value_1..m,osc_amplitude,T_used`.
pub fn grid_csv(points: &[GridPoint]) -> String {
    let (d, m) = points.first().map_or((0, 0), |p| (p.theta.len(), p.average.value.len()));
    let mut out = String::new();
    let mut cols: Vec<String> = (1..=d).map(|i| format!("theta_{i}")).collect();
    cols.extend((1..=m).map(|i| format!("value_{i}")));
    cols.push("osc_amplitude".into());
    cols.push("T_used".into());
    out.push_str(&cols.join(","));
    out.push('\n');
    for p in points {
        let vals: Vec<String> = p
            .theta
            .iter()
            .chain(&p.average.value)
            .chain([&p.average.osc_amplitude, &p.average.horizon])
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(out, "{}", vals.join(",")).unwrap();
    }
    out
}
