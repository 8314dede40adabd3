//! Perturbative mean flow of the fast variable.
//!
//! Along a trajectory of the mixed-gain system, the fast right-hand side
//! decomposes as
//!
//! ```text
//! dΛ/dt = β [ h̄(X) − β Ῡ^ff(X) + W_t ],   W_t = β² W⁰ + β d/dt W¹ + d²/dt² W²
//! ```
//!
//! where every `W^i` is built from Poisson solutions. All fields here are
//! exact trigonometric polynomials, so time derivatives along the trajectory
//! are available in closed form: for a field `u(x, Φ)`,
//! `d/dt u = ∂_t u + a_t ∂_θ u·g + β ∂_λ u·h`.
//!
//! `d/dt W¹` is taken with the gain weights inside `W¹` held at their current
//! values; the `r_t` term of `W⁰` accounts for the variation of `a_t`.

use std::sync::Arc;

use super::field::{FourierField, Slot};
use super::{solve_poisson, split_field, upsilon_blocks, UpsilonBlocks};
use crate::dynamics::{gains_at, GainMode, GainSchedule, Gains, TwoTimescaleSystem, Trajectory};
use crate::error::{QsaError, Result};
use crate::probing::FrequencyBasis;

pub type GainFn = Arc<dyn Fn(&Gains) -> f64 + Send + Sync>;
pub type MeanFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// The pieces of the total time derivative of a field.
#[derive(Debug, Clone)]
pub struct Derivatives {
    /// `∂_t u`
    pub time: FourierField,
    /// `∂_θ u · g`
    pub slow: FourierField,
    /// `∂_λ u · h`
    pub fast: FourierField,
}

/// A field together with (optionally) its derivative pieces.
#[derive(Debug, Clone)]
pub struct FieldDerivatives {
    pub value: FourierField,
    pub derivs: Option<Derivatives>,
}

impl FieldDerivatives {
    fn plain(value: FourierField) -> Self {
        FieldDerivatives { value, derivs: None }
    }

    fn with_derivatives(value: FourierField, g: &FourierField, h: &FourierField, basis: &FrequencyBasis) -> Result<Self> {
        let derivs = Derivatives {
            time: value.time_derivative(basis)?,
            slow: value.directional_derivative(g, Slot::Slow)?,
            fast: value.directional_derivative(h, Slot::Fast)?,
        };
        Ok(FieldDerivatives { value, derivs: Some(derivs) })
    }

    pub fn eval(&self, x: &[f64], turns: &[f64]) -> Vec<f64> {
        self.value.eval(x, turns)
    }

    /// Total derivative along the flow `(a g; β h)`.
    pub fn total_derivative(&self, x: &[f64], turns: &[f64], gains: &Gains) -> Result<Vec<f64>> {
        let d = self
            .derivs
            .as_ref()
            .ok_or_else(|| QsaError::Unsupported("time derivative was not prepared for this field".into()))?;
        let t = d.time.eval(x, turns);
        let s = d.slow.eval(x, turns);
        let f = d.fast.eval(x, turns);
        Ok(t.iter().zip(&s).zip(&f).map(|((t, s), f)| t + gains.a * s + gains.beta * f).collect())
    }
}

/// `Σ_i w_i(a_t, r_t, β) · u_i(x, Φ_t)`.
#[derive(Clone)]
pub struct WeightedField {
    parts: Vec<(GainFn, FieldDerivatives)>,
    dim: usize,
}

impl std::fmt::Debug for WeightedField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WeightedField").field("parts", &self.parts.len()).field("dim", &self.dim).finish()
    }
}

impl WeightedField {
    pub fn parts(&self) -> impl Iterator<Item = &FieldDerivatives> {
        self.parts.iter().map(|(_, f)| f)
    }

    pub fn eval(&self, x: &[f64], turns: &[f64], gains: &Gains) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, f) in &self.parts {
            let c = w(gains);
            for (o, v) in out.iter_mut().zip(f.eval(x, turns)) {
                *o += c * v;
            }
        }
        out
    }

    /// Time derivative with the weights held fixed.
    pub fn frozen_derivative(&self, x: &[f64], turns: &[f64], gains: &Gains) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        for (w, f) in &self.parts {
            let c = w(gains);
            for (o, v) in out.iter_mut().zip(f.total_derivative(x, turns, gains)?) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    /// True when every part is identically zero.
    pub fn is_zero(&self) -> bool {
        self.parts.iter().all(|(_, f)| f.value.is_empty())
    }
}

fn weight<F: Fn(&Gains) -> f64 + Send + Sync + 'static>(f: F) -> GainFn {
    Arc::new(f)
}

/// Every term of the perturbative mean flow for one system and schedule.
#[derive(Clone)]
pub struct PMeanFlowTerms {
    basis: FrequencyBasis,
    schedule: GainSchedule,
    pub g: FourierField,
    pub h: FourierField,
    pub blocks: UpsilonBlocks,
    /// `f̂ = (ĝ; ĥ)` with derivative pieces.
    pub f_hat: FieldDerivatives,
    /// `ĥ` with derivative pieces.
    pub h_hat: FieldDerivatives,
    /// `Υ̂^ff`, the Poisson solution for the zero-mean part of `Υ^ff`.
    pub upsilon_ff_hat: FieldDerivatives,
    pub w0: WeightedField,
    pub w1: WeightedField,
    /// `W² = ĥ̂`, the Poisson solution for `ĥ`.
    pub w2: FieldDerivatives,
    /// Derivative pieces of `∂_t ĥ̂`, `∂_θ ĥ̂·g` and `∂_λ ĥ̂·h`, for `d²/dt² ĥ̂`.
    w2_second: [FieldDerivatives; 3],
    upsilon_ff_bar: MeanFn,
}

impl std::fmt::Debug for PMeanFlowTerms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PMeanFlowTerms").field("w0", &self.w0).field("w1", &self.w1).finish_non_exhaustive()
    }
}

/// Build the perturbative-mean-flow terms from the Fourier form of a system.
pub fn pmeanflow_terms(system: &TwoTimescaleSystem, schedule: &GainSchedule) -> Result<PMeanFlowTerms> {
    let f = system
        .fourier()
        .ok_or_else(|| QsaError::Unsupported("system has no Fourier representation".into()))?;
    PMeanFlowTerms::from_field(f, system.basis(), schedule)
}

impl PMeanFlowTerms {
    pub fn from_field(f: &FourierField, basis: &FrequencyBasis, schedule: &GainSchedule) -> Result<Self> {
        if !matches!(schedule.mode, GainMode::Mixed) {
            return Err(QsaError::Unsupported("the perturbative mean flow needs the mixed gain schedule".into()));
        }
        if f.d_slow() != f.d_fast() {
            return Err(QsaError::Dimension(format!(
                "slow and fast dimensions differ ({} vs {})",
                f.d_slow(),
                f.d_fast()
            )));
        }
        let (g, h) = split_field(f)?;
        let blocks = upsilon_blocks(f, basis)?;

        let f_hat = solve_poisson(&f.zero_mean_part(), basis)?;
        let h_hat = solve_poisson(&h.zero_mean_part(), basis)?;
        let hh = solve_poisson(&h_hat, basis)?;
        let ups_hat = solve_poisson(&blocks.ff.zero_mean_part(), basis)?;

        let w2 = FieldDerivatives::with_derivatives(hh.clone(), &g, &h, basis)?;
        let d2 = w2.derivs.clone().expect("derivatives prepared");
        let w2_second = [
            FieldDerivatives::with_derivatives(d2.time, &g, &h, basis)?,
            FieldDerivatives::with_derivatives(d2.slow.clone(), &g, &h, basis)?,
            FieldDerivatives::with_derivatives(d2.fast.clone(), &g, &h, basis)?,
        ];

        let ups_hat_d = FieldDerivatives::with_derivatives(ups_hat.clone(), &g, &h, basis)?;
        let ud = ups_hat_d.derivs.clone().expect("derivatives prepared");

        let w1 = WeightedField {
            parts: vec![
                (weight(|_| -1.0), FieldDerivatives::with_derivatives(d2.fast.clone(), &g, &h, basis)?),
                (weight(|_| 1.0), ups_hat_d.clone()),
                (weight(|gn| -gn.a / gn.beta), FieldDerivatives::with_derivatives(d2.slow.clone(), &g, &h, basis)?),
            ],
            dim: h.dim_out(),
        };
        let w0 = WeightedField {
            parts: vec![
                (weight(|_| -1.0), FieldDerivatives::plain(ud.fast)),
                (weight(|gn| gn.a * gn.r / (gn.beta * gn.beta)), FieldDerivatives::plain(d2.slow)),
                (weight(|gn| -gn.a / (gn.beta * gn.beta)), FieldDerivatives::plain(blocks.sf.clone())),
                (weight(|gn| -gn.a / gn.beta), FieldDerivatives::plain(ud.slow)),
            ],
            dim: h.dim_out(),
        };

        let ff = blocks.ff.clone();
        let upsilon_ff_bar: MeanFn = Arc::new(move |x: &[f64]| ff.mean(x));

        Ok(PMeanFlowTerms {
            basis: basis.clone(),
            schedule: schedule.clone(),
            f_hat: FieldDerivatives::with_derivatives(f_hat, &g, &h, basis)?,
            h_hat: FieldDerivatives::with_derivatives(h_hat, &g, &h, basis)?,
            upsilon_ff_hat: ups_hat_d,
            g,
            h,
            blocks,
            w0,
            w1,
            w2,
            w2_second,
            upsilon_ff_bar,
        })
    }

    pub fn basis(&self) -> &FrequencyBasis {
        &self.basis
    }

    pub fn schedule(&self) -> &GainSchedule {
        &self.schedule
    }

    pub fn gains(&self, t: f64) -> Gains {
        gains_at(&self.schedule, t)
    }

    /// `Ῡ^ff(x)`.
    pub fn upsilon_ff_bar(&self, x: &[f64]) -> Vec<f64> {
        (self.upsilon_ff_bar)(x)
    }

    /// Replace `Ῡ^ff`, e.g. to inject a known error.
    pub fn with_upsilon_ff_bar(mut self, f: MeanFn) -> Self {
        self.upsilon_ff_bar = f;
        self
    }

    pub fn h_bar(&self, x: &[f64]) -> Vec<f64> {
        self.h.mean(x)
    }

    /// `d²/dt² ĥ̂` along the flow, including the variation of `a_t`.
    pub fn w2_second_derivative(&self, x: &[f64], turns: &[f64], gains: &Gains) -> Result<Vec<f64>> {
        let [time, slow, fast] = &self.w2_second;
        let dt = time.total_derivative(x, turns, gains)?;
        let ds = slow.total_derivative(x, turns, gains)?;
        let df = fast.total_derivative(x, turns, gains)?;
        let s = slow.eval(x, turns);
        Ok((0..dt.len())
            .map(|i| dt[i] + gains.a * ds[i] - gains.r * gains.a * s[i] + gains.beta * df[i])
            .collect())
    }

    /// `W_t = β² W⁰ + β d/dt W¹ + d²/dt² W²` with analytic derivatives.
    pub fn noise(&self, x: &[f64], turns: &[f64], gains: &Gains) -> Result<Vec<f64>> {
        let b = gains.beta;
        let w0 = self.w0.eval(x, turns, gains);
        let w1 = self.w1.frozen_derivative(x, turns, gains)?;
        let w2 = self.w2_second_derivative(x, turns, gains)?;
        Ok((0..w0.len()).map(|i| b * b * w0[i] + b * w1[i] + w2[i]).collect())
    }

    /// `β[h̄ − βῩ^ff + W]` given the noise term.
    fn assemble(&self, x: &[f64], gains: &Gains, noise: &[f64]) -> Vec<f64> {
        let b = gains.beta;
        let hb = self.h_bar(x);
        let ub = self.upsilon_ff_bar(x);
        (0..hb.len()).map(|i| b * (hb[i] - b * ub[i] + noise[i])).collect()
    }

    /// Exact fast right-hand side `β h(x, ξ)`.
    pub fn fast_rhs(&self, x: &[f64], turns: &[f64], gains: &Gains) -> Vec<f64> {
        self.h.eval(x, turns).into_iter().map(|v| gains.beta * v).collect()
    }

    /// Residuals of the intermediate identities at one sample.
    pub fn identity_sample(&self, x: &[f64], turns: &[f64], gains: &Gains) -> Result<PmfSample> {
        let (a, b) = (gains.a, gains.beta);
        let d = self.g.dim_out();

        // f − f̄ against −d/dt f̂ − [aΥ^ss + βΥ^fs; aΥ^sf + βΥ^ff]
        let mut f_tilde = self.g.eval(x, turns);
        f_tilde.extend(self.h.eval(x, turns));
        let mut f_bar = self.g.mean(x);
        f_bar.extend(self.h.mean(x));
        let step1_lhs: Vec<f64> = f_tilde.iter().zip(&f_bar).map(|(u, m)| u - m).collect();
        let df_hat = self.f_hat.total_derivative(x, turns, gains)?;
        let ss = self.blocks.ss.eval(x, turns);
        let fs = self.blocks.fs.eval(x, turns);
        let sf = self.blocks.sf.eval(x, turns);
        let ff = self.blocks.ff.eval(x, turns);
        let step1_rhs: Vec<f64> = (0..2 * d)
            .map(|i| {
                let block = if i < d { a * ss[i] + b * fs[i] } else { a * sf[i - d] + b * ff[i - d] };
                -df_hat[i] - block
            })
            .collect();

        // d/dt ĥ against −r a D^g ĥ̂ + a d/dt D^g ĥ̂ + β d/dt D^h ĥ̂ − d²/dt² ĥ̂
        let step2_lhs = self.h_hat.total_derivative(x, turns, gains)?;
        let [_, slow, fast] = &self.w2_second;
        let s = slow.eval(x, turns);
        let ds = slow.total_derivative(x, turns, gains)?;
        let df = fast.total_derivative(x, turns, gains)?;
        let d2 = self.w2_second_derivative(x, turns, gains)?;
        let step2_rhs: Vec<f64> =
            (0..d).map(|i| -gains.r * a * s[i] + a * ds[i] + b * df[i] - d2[i]).collect();

        // Υ^ff against Ῡ^ff + a D^g Υ̂ + β D^h Υ̂ − d/dt Υ̂
        let ub = self.upsilon_ff_bar(x);
        let ud = self.upsilon_ff_hat.derivs.as_ref().expect("derivatives prepared");
        let us = ud.slow.eval(x, turns);
        let uf = ud.fast.eval(x, turns);
        let dup = self.upsilon_ff_hat.total_derivative(x, turns, gains)?;
        let step3_rhs: Vec<f64> = (0..d).map(|i| ub[i] + a * us[i] + b * uf[i] - dup[i]).collect();

        let noise = self.noise(x, turns, gains)?;
        Ok(PmfSample {
            step1: (step1_lhs, step1_rhs),
            step2: (step2_lhs, step2_rhs),
            step3: (ff, step3_rhs),
            assembled: (self.fast_rhs(x, turns, gains), self.assemble(x, gains, &noise)),
        })
    }
}

/// Left and right sides of each identity at one sample.
#[derive(Debug, Clone)]
pub struct PmfSample {
    pub step1: (Vec<f64>, Vec<f64>),
    pub step2: (Vec<f64>, Vec<f64>),
    pub step3: (Vec<f64>, Vec<f64>),
    pub assembled: (Vec<f64>, Vec<f64>),
}

/// How time derivatives of the `W` terms are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMode {
    /// Closed form in the frequency domain.
    Analytic,
    /// Centered differences over the trajectory samples.
    FiniteDifference,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest FD stride accepted by [`pmeanflow_residual`].
pub const MAX_FD_STRIDE: f64 = 1e-3;

/// `max_t ‖dΛ/dt − β[h̄ − βῩ^ff + W_t]‖ / max_t ‖dΛ/dt‖` over interior samples.
pub fn pmeanflow_residual(terms: &PMeanFlowTerms, traj: &Trajectory, mode: DerivativeMode) -> Result<f64> {
    let n = traj.len();
    let interior = n.saturating_sub(2);
    if interior < 5 {
        return Err(QsaError::InsufficientSamples { needed: 5, got: interior });
    }
    let stride = traj.times[1] - traj.times[0];
    if mode == DerivativeMode::FiniteDifference && stride > MAX_FD_STRIDE * (1.0 + 1e-9) {
        return Err(QsaError::InvalidInput(format!(
            "finite-difference residual needs sample stride <= {MAX_FD_STRIDE}, got {stride}"
        )));
    }
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 1..n - 1 {
        let x = traj.x(i);
        let turns = &traj.turns[i];
        let gains = terms.gains(traj.times[i]);
        let noise = match mode {
            DerivativeMode::Analytic => terms.noise(&x, turns, &gains)?,
            DerivativeMode::FiniteDifference => {
                let (xm, xp) = (traj.x(i - 1), traj.x(i + 1));
                let (tm, tp) = (&traj.turns[i - 1], &traj.turns[i + 1]);
                let h = 0.5 * (traj.times[i + 1] - traj.times[i - 1]);
                let w1p = terms.w1.eval(&xp, tp, &gains);
                let w1m = terms.w1.eval(&xm, tm, &gains);
                let w2p = terms.w2.eval(&xp, tp);
                let w2c = terms.w2.eval(&x, turns);
                let w2m = terms.w2.eval(&xm, tm);
                let w0 = terms.w0.eval(&x, turns, &gains);
                let b = gains.beta;
                (0..w0.len())
                    .map(|j| {
                        let d1 = (w1p[j] - w1m[j]) / (2.0 * h);
                        let d2 = (w2p[j] - 2.0 * w2c[j] + w2m[j]) / (h * h);
                        b * b * w0[j] + b * d1 + d2
                    })
                    .collect()
            }
        };
        let lhs = terms.fast_rhs(&x, turns, &gains);
        let rhs = terms.assemble(&x, &gains, &noise);
        worst = worst.max(diff_norm(&lhs, &rhs));
        scale = scale.max(norm(&lhs));
    }
    if worst == 0.0 {
        return Ok(0.0);
    }
    Ok(worst / scale)
}

/// Maximum relative residual of each identity along a trajectory.
///
/// Residuals are `max ‖L − R‖ / max(1, max ‖L‖)`, except the assembled
/// identity which is normalized by `max ‖dΛ/dt‖` as in [`pmeanflow_residual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmfResiduals {
    pub step1: f64,
    pub step2: f64,
    pub step3: f64,
    pub assembled: f64,
}

pub fn identity_residuals(terms: &PMeanFlowTerms, traj: &Trajectory) -> Result<PmfResiduals> {
    if traj.len() < 3 {
        return Err(QsaError::InsufficientSamples { needed: 3, got: traj.len() });
    }
    let mut worst = [0.0f64; 4];
    let mut scale = [0.0f64; 4];
    for i in 0..traj.len() {
        let x = traj.x(i);
        let gains = terms.gains(traj.times[i]);
        let s = terms.identity_sample(&x, &traj.turns[i], &gains)?;
        for (j, (l, r)) in [&s.step1, &s.step2, &s.step3, &s.assembled].into_iter().enumerate() {
            worst[j] = worst[j].max(diff_norm(l, r));
            scale[j] = scale[j].max(norm(l));
        }
    }
    let rel = |j: usize, floor: f64| if worst[j] == 0.0 { 0.0 } else { worst[j] / scale[j].max(floor) };
    Ok(PmfResiduals { step1: rel(0, 1.0), step2: rel(1, 1.0), step3: rel(2, 1.0), assembled: rel(3, 0.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate, IntegrateOptions};
    use crate::models::{decoupled_test, LinearModel};

    fn linear_terms() -> (TwoTimescaleSystem, GainSchedule, PMeanFlowTerms) {
        let sys = LinearModel::default().system().unwrap();
        let sched = GainSchedule::mixed(0.7, 0.1).unwrap();
        let terms = pmeanflow_terms(&sys, &sched).unwrap();
        (sys, sched, terms)
    }

    #[test]
    fn upsilon_ff_mean_vanishes_on_grid() {
        let (_, _, terms) = linear_terms();
        for i in 0..5 {
            for j in 0..5 {
                let x = [-1.0 + 0.5 * i as f64, -1.0 + 0.5 * j as f64];
                assert!(terms.upsilon_ff_bar(&x)[0].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn double_poisson_solution_is_zero_mean() {
        let (_, _, terms) = linear_terms();
        assert!(terms.w2.value.coefficient(&[0, 0]).is_none());
        assert!(!terms.w2.value.is_empty());
    }

    #[test]
    fn identities_hold_along_trajectory() {
        let (sys, sched, terms) = linear_terms();
        let tr = integrate(&sys, &sched, &[1.0], &[1.0], &IntegrateOptions::new(50.0).stride(4)).unwrap();
        let r = identity_residuals(&terms, &tr).unwrap();
        assert!(r.step1 < 1e-8 && r.step2 < 1e-8 && r.step3 < 1e-8 && r.assembled < 1e-8, "{r:?}");
        let a = pmeanflow_residual(&terms, &tr, DerivativeMode::Analytic).unwrap();
        assert!(a < 1e-10, "{a}");
    }

    #[test]
    fn finite_difference_residual() {
        let (sys, sched, terms) = linear_terms();
        let tr = integrate(&sys, &sched, &[1.0], &[1.0], &IntegrateOptions::new(2.0).step(1e-3)).unwrap();
        let r = pmeanflow_residual(&terms, &tr, DerivativeMode::FiniteDifference).unwrap();
        assert!(r < 1e-6, "{r}");
    }

    #[test]
    fn corrupted_mean_shows_in_step3_only() {
        let (sys, sched, terms) = linear_terms();
        // short run near the origin keeps |Υ^ff| below 1, so the relative residual is the absolute one
        let tr = integrate(&sys, &sched, &[0.0], &[0.0], &IntegrateOptions::new(2.0)).unwrap();
        let clean = identity_residuals(&terms, &tr).unwrap();
        let bad = terms.clone().with_upsilon_ff_bar(Arc::new(|_: &[f64]| vec![0.1]));
        let r = identity_residuals(&bad, &tr).unwrap();
        assert_eq!(r.step1, clean.step1);
        assert_eq!(r.step2, clean.step2);
        assert!((r.step3 - 0.1).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn probe_free_fast_field_gives_zero_residual() {
        let sys = decoupled_test((2, 1)).unwrap();
        let sched = GainSchedule::mixed(0.7, 0.5).unwrap();
        let terms = pmeanflow_terms(&sys, &sched).unwrap();
        assert!(terms.w0.is_zero() && terms.w1.is_zero() && terms.w2.value.is_empty());
        let tr = integrate(&sys, &sched, &[0.0], &[1.0], &IntegrateOptions::new(1.0).step(1e-3)).unwrap();
        assert_eq!(pmeanflow_residual(&terms, &tr, DerivativeMode::Analytic).unwrap(), 0.0);
        assert_eq!(pmeanflow_residual(&terms, &tr, DerivativeMode::FiniteDifference).unwrap(), 0.0);
    }

    #[test]
    fn too_few_samples() {
        let (sys, sched, terms) = linear_terms();
        let tr = integrate(&sys, &sched, &[1.0], &[1.0], &IntegrateOptions::new(0.004).step(1e-3)).unwrap();
        assert_eq!(
            pmeanflow_residual(&terms, &tr, DerivativeMode::Analytic).unwrap_err(),
            QsaError::InsufficientSamples { needed: 5, got: 3 }
        );
    }
}
