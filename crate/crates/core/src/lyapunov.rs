//! Top Lyapunov exponent of the frozen fast dynamics.
//!
//! The sensitivity `S_t = ∂Λ_t/∂Λ_0` obeys `dS/dt = β ∂_λh(θ, Λ_t, ξ_t) S`
//! with `S_0 = I`. Its norm is renormalized to one every unit of time and
//! the removed growth is accumulated in log space.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dynamics::{max_step, FieldArgs, Rk4, TwoTimescaleSystem};
use crate::error::{QsaError, Result};

/// Sensitivity matrix with its accumulated log growth.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityState {
    pub s: DMatrix<f64>,
    pub log_norm_accum: f64,
    pub t: f64,
}

impl SensitivityState {
    pub fn identity(n: usize) -> Self {
        SensitivityState { s: DMatrix::identity(n, n), log_norm_accum: 0.0, t: 0.0 }
    }

    /// Scale `S` to unit Frobenius norm, moving the factor into the log.
    pub fn rescale(&mut self) {
        let n = self.s.norm();
        if n > 0.0 && n.is_finite() {
            self.s /= n;
            self.log_norm_accum += n.ln();
        }
    }

    /// `log ‖S_t‖` including the rescaled part.
    pub fn log_growth(&self) -> f64 {
        self.log_norm_accum + self.s.norm().ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovEstimate {
    /// `log ‖S_T‖ / T`
    pub exponent: f64,
    /// Growth rate over the second half of the horizon.
    pub tail_exponent: f64,
    /// Growth rate over the first half.
    pub head_exponent: f64,
    pub horizon: f64,
}

/// Cadence of norm rescaling, in time units.
pub const RESCALE_INTERVAL: f64 = 1.0;

/// Estimate the top exponent from `(θ, λ₀)` over `horizon`.
///
/// Fails with `Inconclusive` when the two halves of the run disagree by
/// more than 10% relative and `1e-2` absolute.
pub fn lyapunov_exponent(
    system: &TwoTimescaleSystem,
    theta: &[f64],
    beta: f64,
    lambda0: &[f64],
    horizon: f64,
) -> Result<LyapunovEstimate> {
    let (ds, df) = (system.d_slow(), system.d_fast());
    if theta.len() != ds || lambda0.len() != df {
        return Err(QsaError::Dimension(format!(
            "state has dimensions ({}, {}), system expects ({ds}, {df})",
            theta.len(),
            lambda0.len()
        )));
    }
    if !(beta > 0.0) || !(horizon > 2.0 * RESCALE_INTERVAL) {
        return Err(QsaError::InvalidInput(format!(
            "need beta > 0 and horizon > {}, got {beta} and {horizon}",
            2.0 * RESCALE_INTERVAL
        )));
    }
    // Whole rescale intervals, an even number of them, each a whole number of steps.
    let per = (RESCALE_INTERVAL / max_step(system.basis(), beta)).ceil() as usize;
    let h = RESCALE_INTERVAL / per as f64;
    let intervals = 2 * ((horizon / RESCALE_INTERVAL / 2.0).round() as usize).max(1);

    let basis = system.basis();
    let map = system.map();
    let mut turns = vec![0.0; basis.len()];
    let mut xi = vec![0.0; system.probe_dim()];
    let mut hbuf = vec![0.0; df];
    let mut jac = DMatrix::zeros(df, df);
    // z = (Λ, vec S) with S column-major.
    let mut rhs = |t: f64, z: &[f64], dz: &mut [f64]| -> Result<()> {
        basis.turns_into(t, &mut turns);
        map.eval_turns(&turns, &mut xi);
        let lambda = &z[..df];
        let args = FieldArgs { t, theta, lambda, xi: &xi, turns: &turns, a: 1.0 };
        system.eval_h(&args, &mut hbuf)?;
        system.fast_jacobian(&args, &mut jac)?;
        for i in 0..df {
            dz[i] = beta * hbuf[i];
        }
        for col in 0..df {
            for row in 0..df {
                let mut acc = 0.0;
                for k in 0..df {
                    acc += jac[(row, k)] * z[df + col * df + k];
                }
                dz[df + col * df + row] = beta * acc;
            }
        }
        Ok(())
    };

    let mut state = SensitivityState::identity(df);
    let mut z = vec![0.0; df + df * df];
    z[..df].copy_from_slice(lambda0);
    let mut rk = Rk4::new(z.len());
    let mut step_no = 0usize;
    let mut half_growth = 0.0;
    for interval in 1..=intervals {
        z[df..].copy_from_slice(state.s.as_slice());
        for _ in 0..per {
            rk.step(&mut rhs, step_no as f64 * h, h, &mut z)?;
            step_no += 1;
        }
        state.t = interval as f64 * RESCALE_INTERVAL;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(QsaError::NonFinite { t: state.t });
        }
        state.s.as_mut_slice().copy_from_slice(&z[df..]);
        state.rescale();
        if interval == intervals / 2 {
            half_growth = state.log_growth();
        }
    }
    let t = state.t;
    let total = state.log_growth();
    let est = LyapunovEstimate {
        exponent: total / t,
        tail_exponent: (total - half_growth) / (t / 2.0),
        head_exponent: half_growth / (t / 2.0),
        horizon: t,
    };
    let gap = (est.head_exponent - est.tail_exponent).abs();
    let scale = est.head_exponent.abs().max(est.tail_exponent.abs());
    if gap > 0.1 * scale && gap > 1e-2 {
        return Err(QsaError::Inconclusive { first_half: est.head_exponent, second_half: est.tail_exponent });
    }
    Ok(est)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovRow {
    pub theta: Vec<f64>,
    pub beta: f64,
    pub estimate: LyapunovEstimate,
}

/// Exponents over a set of `θ` points, in parallel, in input order.
pub fn lyapunov_grid(
    system: &TwoTimescaleSystem,
    thetas: &[Vec<f64>],
    beta: f64,
    lambda0: &[f64],
    horizon: f64,
) -> Result<Vec<LyapunovRow>> {
    thetas
        .par_iter()
        .map(|th| {
            lyapunov_exponent(system, th, beta, lambda0, horizon)
                .map(|estimate| LyapunovRow { theta: th.clone(), beta, estimate })
        })
        .collect()
}

/// CSV with header `theta_1..d,beta,exponent,tail_exponent,horizon`.
pub fn lyapunov_csv(rows: &[LyapunovRow]) -> String {
    let d = rows.first().map_or(0, |r| r.theta.len());
    let mut cols: Vec<String> = (1..=d).map(|i| format!("theta_{i}")).collect();
    cols.extend(["beta", "exponent", "tail_exponent", "horizon"].map(String::from));
    let mut out = cols.join(",");
    out.push('\n');
    for r in rows {
        let e = &r.estimate;
        let vals: Vec<String> = r
            .theta
            .iter()
            .chain([&r.beta, &e.exponent, &e.tail_exponent, &e.horizon])
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(out, "{}", vals.join(",")).unwrap();
    }
    out
}
