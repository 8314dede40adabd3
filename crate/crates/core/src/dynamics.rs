//! Gain schedules and fixed-step integration of the two-timescale ODE
//!
//! ```text
//! dΘ/dt = a_t g(Θ, Λ, ξ_t),   dΛ/dt = b_t h(Θ, Λ, ξ_t)
//! ```
//!
//! with optional second-order low-pass filtering of `Λ` before it enters the
//! slow field.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{QsaError, Result};
use crate::filters::SecondOrderFilter;
use crate::poisson::FourierField;
use crate::probing::{FrequencyBasis, ProbingMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainMode {
    /// `a_t = (1+t)^{−ρ}`, `b_t = β`.
    Mixed,
    /// `a_t = α`, `b_t = β`.
    Constant { alpha: f64 },
    /// `a_t = (1+t)^{−ρ}`, `b_t = β(1+t)^{−ρ_fast}` with `ρ_fast < ρ`.
    Vanishing { fast_rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSchedule {
    pub rho: f64,
    pub beta: f64,
    pub mode: GainMode,
}

impl GainSchedule {
    pub fn mixed(rho: f64, beta: f64) -> Result<Self> {
        let s = GainSchedule { rho, beta, mode: GainMode::Mixed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.5 && self.rho < 1.0) {
            return Err(QsaError::InvalidInput(format!(
                "gain exponent rho = {} violates the gain assumption 1/2 < rho < 1",
                self.rho
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(QsaError::InvalidInput(format!("fast gain beta must be positive, got {}", self.beta)));
        }
        match self.mode {
            GainMode::Mixed => {}
            GainMode::Constant { alpha } => {
                if !(alpha > 0.0) {
                    return Err(QsaError::InvalidInput(format!("constant slow gain must be positive, got {alpha}")));
                }
            }
            GainMode::Vanishing { fast_rho } => {
                if !(fast_rho >= 0.0 && fast_rho < self.rho) {
                    return Err(QsaError::InvalidInput(format!(
                        "fast gain exponent {fast_rho} must lie in [0, rho = {})",
                        self.rho
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Gain values at one instant. `r = −(da/dt)/a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gains {
    pub a: f64,
    pub r: f64,
    pub beta: f64,
}

pub fn gains_at(schedule: &GainSchedule, t: f64) -> Gains {
    let decay = |rho: f64| (1.0 + t).powf(-rho);
    match schedule.mode {
        GainMode::Mixed => Gains { a: decay(schedule.rho), r: schedule.rho / (1.0 + t), beta: schedule.beta },
        GainMode::Constant { alpha } => Gains { a: alpha, r: 0.0, beta: schedule.beta },
        GainMode::Vanishing { fast_rho } => Gains {
            a: decay(schedule.rho),
            r: schedule.rho / (1.0 + t),
            beta: schedule.beta * decay(fast_rho),
        },
    }
}

/// Arguments passed to the slow and fast vector fields.
#[derive(Debug, Clone, Copy)]
pub struct FieldArgs<'a> {
    pub t: f64,
    pub theta: &'a [f64],
    pub lambda: &'a [f64],
    /// Probe value `ξ_t = G(Φ_t)`.
    pub xi: &'a [f64],
    /// Clock phases in turns.
    pub turns: &'a [f64],
    /// Current slow gain.
    pub a: f64,
}

pub type FieldFn = Arc<dyn Fn(&FieldArgs<'_>, &mut [f64]) -> Result<()> + Send + Sync>;
/// Writes `∂_λ h` into a `d_fast × d_fast` matrix.
pub type FastJacobianFn = Arc<dyn Fn(&FieldArgs<'_>, &mut DMatrix<f64>) -> Result<()> + Send + Sync>;
pub type StateMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Slow field `g`, fast field `h`, the probing signal, and optional closed forms.
#[derive(Clone)]
pub struct TwoTimescaleSystem {
    name: String,
    d_slow: usize,
    d_fast: usize,
    basis: FrequencyBasis,
    map: ProbingMap,
    g: FieldFn,
    h: FieldFn,
    fast_jacobian: Option<FastJacobianFn>,
    fourier: Option<FourierField>,
    lambda_star: Option<StateMap>,
    theta_star: Option<Vec<f64>>,
}

impl std::fmt::Debug for TwoTimescaleSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TwoTimescaleSystem")
            .field("name", &self.name)
            .field("d_slow", &self.d_slow)
            .field("d_fast", &self.d_fast)
            .field("basis", &self.basis)
            .field("fourier", &self.fourier.is_some())
            .finish_non_exhaustive()
    }
}

impl TwoTimescaleSystem {
    pub fn new(
        name: impl Into<String>,
        d_slow: usize,
        d_fast: usize,
        basis: FrequencyBasis,
        map: ProbingMap,
        g: FieldFn,
        h: FieldFn,
    ) -> Result<Self> {
        if d_slow == 0 || d_fast == 0 {
            return Err(QsaError::Dimension("state dimensions must be positive".into()));
        }
        map.check(&basis)?;
        Ok(TwoTimescaleSystem {
            name: name.into(),
            d_slow,
            d_fast,
            basis,
            map,
            g,
            h,
            fast_jacobian: None,
            fourier: None,
            lambda_star: None,
            theta_star: None,
        })
    }

    /// A system whose fields are evaluated from the Fourier form of `f = (g; h)`.
    pub fn from_fourier(name: impl Into<String>, f: FourierField, basis: FrequencyBasis) -> Result<Self> {
        f.check_basis(&basis)?;
        if f.dim_out() != f.d_slow() + f.d_fast() {
            return Err(QsaError::Dimension("Fourier field must stack g over h".into()));
        }
        let ds = f.d_slow();
        let shared = Arc::new(f.clone());
        let fg = shared.clone();
        let g: FieldFn = Arc::new(move |args: &FieldArgs<'_>, out: &mut [f64]| {
            let x: Vec<f64> = args.theta.iter().chain(args.lambda).copied().collect();
            out.copy_from_slice(&fg.eval(&x, args.turns)[..ds]);
            Ok(())
        });
        let fh = shared;
        let h: FieldFn = Arc::new(move |args: &FieldArgs<'_>, out: &mut [f64]| {
            let x: Vec<f64> = args.theta.iter().chain(args.lambda).copied().collect();
            out.copy_from_slice(&fh.eval(&x, args.turns)[ds..]);
            Ok(())
        });
        let mut sys = Self::new(name, f.d_slow(), f.d_fast(), basis, ProbingMap::Identity, g, h)?;
        sys.fourier = Some(f);
        Ok(sys)
    }

    /// Attach the Fourier form of `f = (g; h)`; see [`Self::fourier_agreement`].
    pub fn with_fourier(mut self, f: FourierField) -> Result<Self> {
        f.check_basis(&self.basis)?;
        if f.d_slow() != self.d_slow || f.d_fast() != self.d_fast || f.dim_out() != self.d_slow + self.d_fast {
            return Err(QsaError::Dimension("Fourier field does not match the system dimensions".into()));
        }
        self.fourier = Some(f);
        Ok(self)
    }

    pub fn with_fast_jacobian(mut self, j: FastJacobianFn) -> Self {
        self.fast_jacobian = Some(j);
        self
    }

    pub fn with_lambda_star(mut self, f: StateMap) -> Self {
        self.lambda_star = Some(f);
        self
    }

    pub fn with_theta_star(mut self, theta: Vec<f64>) -> Self {
        self.theta_star = Some(theta);
        self
    }

    pub fn with_basis(mut self, basis: FrequencyBasis) -> Result<Self> {
        self.map.check(&basis)?;
        if let Some(f) = &self.fourier {
            f.check_basis(&basis)?;
        }
        self.basis = basis;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d_slow(&self) -> usize {
        self.d_slow
    }

    pub fn d_fast(&self) -> usize {
        self.d_fast
    }

    pub fn basis(&self) -> &FrequencyBasis {
        &self.basis
    }

    pub fn map(&self) -> &ProbingMap {
        &self.map
    }

    pub fn probe_dim(&self) -> usize {
        self.map.dim(self.basis.len())
    }

    pub fn fourier(&self) -> Option<&FourierField> {
        self.fourier.as_ref()
    }

    pub fn lambda_star(&self, theta: &[f64]) -> Option<Vec<f64>> {
        self.lambda_star.as_ref().map(|f| f(theta))
    }

    pub fn theta_star(&self) -> Option<&[f64]> {
        self.theta_star.as_deref()
    }

    pub fn has_fast_jacobian(&self) -> bool {
        self.fast_jacobian.is_some()
    }

    pub fn eval_g(&self, args: &FieldArgs<'_>, out: &mut [f64]) -> Result<()> {
        (self.g)(args, out)
    }

    pub fn eval_h(&self, args: &FieldArgs<'_>, out: &mut [f64]) -> Result<()> {
        (self.h)(args, out)
    }

    /// `∂_λ h`, analytic when supplied, else central differences.
    pub fn fast_jacobian(&self, args: &FieldArgs<'_>, out: &mut DMatrix<f64>) -> Result<()> {
        if let Some(j) = &self.fast_jacobian {
            return j(args, out);
        }
        let n = self.d_fast;
        let step_scale = f64::EPSILON.cbrt();
        let mut lam = args.lambda.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for c in 0..n {
            let h = step_scale * lam[c].abs().max(1.0);
            let base = lam[c];
            lam[c] = base + h;
            self.eval_h(&FieldArgs { lambda: &lam, ..*args }, &mut fp)?;
            lam[c] = base - h;
            self.eval_h(&FieldArgs { lambda: &lam, ..*args }, &mut fm)?;
            lam[c] = base;
            for r in 0..n {
                out[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        Ok(())
    }

    /// Largest gap between callback and Fourier evaluation over the points
    /// `(x, t)`; `None` when no Fourier form is attached.
    pub fn fourier_agreement(&self, points: &[(Vec<f64>, f64)]) -> Result<Option<f64>> {
        let Some(f) = &self.fourier else { return Ok(None) };
        let mut worst: f64 = 0.0;
        let mut xi = vec![0.0; self.probe_dim()];
        let mut g = vec![0.0; self.d_slow];
        let mut h = vec![0.0; self.d_fast];
        for (x, t) in points {
            let turns = self.basis.turns(*t);
            self.map.eval_turns(&turns, &mut xi);
            let args = FieldArgs {
                t: *t,
                theta: &x[..self.d_slow],
                lambda: &x[self.d_slow..],
                xi: &xi,
                turns: &turns,
                a: 1.0,
            };
            self.eval_g(&args, &mut g)?;
            self.eval_h(&args, &mut h)?;
            let fv = f.eval(x, &turns);
            for (a, b) in g.iter().chain(&h).zip(&fv) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(Some(worst))
    }
}

/// Largest step allowed by the step policy: `min(1/(40 max ω), 0.05/β, 0.05)`.
pub fn max_step(basis: &FrequencyBasis, beta: f64) -> f64 {
    (1.0 / (40.0 * basis.max_omega())).min(0.05 / beta).min(0.05)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrateOptions {
    pub horizon: f64,
    /// Requested step; `None` uses the largest step the policy allows.
    pub step: Option<f64>,
    /// Store every `sample_stride`-th step.
    pub sample_stride: usize,
    pub filter: Option<SecondOrderFilter>,
}

impl IntegrateOptions {
    pub fn new(horizon: f64) -> Self {
        IntegrateOptions { horizon, step: None, sample_stride: 1, filter: None }
    }

    pub fn step(mut self, h: f64) -> Self {
        self.step = Some(h);
        self
    }

    pub fn stride(mut self, n: usize) -> Self {
        self.sample_stride = n;
        self
    }

    pub fn filter(mut self, f: Option<SecondOrderFilter>) -> Self {
        self.filter = f;
        self
    }
}

/// Uniform step and step count: the count is a multiple of the sample stride
/// and the step never exceeds the request or the policy bound.
pub fn resolve_step(basis: &FrequencyBasis, beta: f64, opts: &IntegrateOptions) -> Result<(f64, usize)> {
    if !(opts.horizon > 0.0) || !opts.horizon.is_finite() {
        return Err(QsaError::InvalidInput(format!("horizon must be positive, got {}", opts.horizon)));
    }
    if opts.sample_stride == 0 {
        return Err(QsaError::InvalidInput("sample stride must be at least 1".into()));
    }
    let bound = max_step(basis, beta);
    let h = match opts.step {
        Some(h) if !(h > 0.0) => return Err(QsaError::InvalidInput(format!("step must be positive, got {h}"))),
        Some(h) if h > bound * (1.0 + 1e-12) => {
            return Err(QsaError::InvalidInput(format!(
                "step {h} exceeds the step policy bound {bound} (40 nodes per fastest probe period, 0.05/beta, 0.05)"
            )))
        }
        Some(h) => h,
        None => bound,
    };
    let chunk = h * opts.sample_stride as f64;
    let chunks = (opts.horizon / chunk * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let n = chunks * opts.sample_stride;
    Ok((opts.horizon / n as f64, n))
}

/// Time-stamped samples of `(Θ, Λ[, Λ^F, dΛ^F/dt])` with clock phases.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub d_slow: usize,
    pub d_fast: usize,
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub beta: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub lambda_filtered: Option<Vec<Vec<f64>>>,
    pub lambda_filtered_rate: Option<Vec<Vec<f64>>>,
    /// Clock phases in turns.
    pub turns: Vec<Vec<f64>>,
    /// Integration step used.
    pub step: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Stacked state `(θ; λ)` of sample `i`.
    pub fn x(&self, i: usize) -> Vec<f64> {
        let mut x = self.theta[i].clone();
        x.extend_from_slice(&self.lambda[i]);
        x
    }

    pub fn final_theta(&self) -> &[f64] {
        self.theta.last().expect("trajectory is never empty")
    }

    pub fn final_lambda(&self) -> &[f64] {
        self.lambda.last().expect("trajectory is never empty")
    }

    /// `Λ^F` when filtered, else `Λ`.
    pub fn fast_output(&self) -> &[Vec<f64>] {
        self.lambda_filtered.as_deref().unwrap_or(&self.lambda)
    }

    /// Largest state norm over the run.
    pub fn sup_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| self.x(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,a_t,beta");
        for i in 1..=self.d_slow {
            write!(out, ",theta_{i}").unwrap();
        }
        for i in 1..=self.d_fast {
            write!(out, ",lambda_{i}").unwrap();
        }
        if self.lambda_filtered.is_some() {
            for i in 1..=self.d_fast {
                write!(out, ",lambdaF_{i}").unwrap();
            }
        }
        let k = self.turns.first().map_or(0, Vec::len);
        for i in 1..=k {
            write!(out, ",phase_{i}").unwrap();
        }
        out.push('\n');
        for i in 0..self.len() {
            write!(out, "{:.16e},{:.16e},{:.16e}", self.times[i], self.a[i], self.beta[i]).unwrap();
            let lf = self.lambda_filtered.as_ref().map(|v| v[i].as_slice()).unwrap_or(&[]);
            for v in self.theta[i].iter().chain(&self.lambda[i]).chain(lf).chain(&self.turns[i]) {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Classical RK4 on a flat state with reusable stage buffers.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        Rk4 { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], tmp: vec![0.0; n] }
    }

    pub(crate) fn step<F>(&mut self, f: &mut F, t: f64, h: f64, z: &mut [f64]) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    {
        let n = z.len();
        f(t, z, &mut self.k1)?;
        for i in 0..n {
            self.tmp[i] = z[i] + 0.5 * h * self.k1[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k2)?;
        for i in 0..n {
            self.tmp[i] = z[i] + 0.5 * h * self.k2[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k3)?;
        for i in 0..n {
            self.tmp[i] = z[i] + h * self.k3[i];
        }
        f(t + h, &self.tmp, &mut self.k4)?;
        for i in 0..n {
            z[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

fn check_finite(z: &[f64], t: f64) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(QsaError::NonFinite { t })
    }
}

/// How the slow gain enters a run.
#[derive(Debug, Clone, Copy)]
enum SlowMode {
    Scheduled(GainSchedule),
    /// Slow state frozen; fast gain constant.
    Frozen { beta: f64 },
}

/// Integrate the coupled system from `(θ₀, λ₀)` at time zero.
///
/// With a filter, the slow field reads `Λ^F` instead of `Λ`; the filter
/// starts at `Λ^F_0 = Λ_0` with zero rate.
pub fn integrate(
    system: &TwoTimescaleSystem,
    schedule: &GainSchedule,
    theta0: &[f64],
    lambda0: &[f64],
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    schedule.validate()?;
    run(system, SlowMode::Scheduled(*schedule), theta0, lambda0, opts)
}

/// Integrate `dΛ/dt = β h(θ, Λ, ξ_t)` with `θ` held fixed. Fields see `a = 1`.
pub fn integrate_frozen_fast(
    system: &TwoTimescaleSystem,
    theta: &[f64],
    lambda0: &[f64],
    beta: f64,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    if !(beta > 0.0) {
        return Err(QsaError::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    run(system, SlowMode::Frozen { beta }, theta, lambda0, &IntegrateOptions { filter: None, ..opts.clone() })
}

fn run(
    system: &TwoTimescaleSystem,
    mode: SlowMode,
    theta0: &[f64],
    lambda0: &[f64],
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    let (ds, df) = (system.d_slow, system.d_fast);
    if theta0.len() != ds || lambda0.len() != df {
        return Err(QsaError::Dimension(format!(
            "initial state has dimensions ({}, {}), system expects ({ds}, {df})",
            theta0.len(),
            lambda0.len()
        )));
    }
    check_finite(theta0, 0.0)?;
    check_finite(lambda0, 0.0)?;
    let beta0 = match mode {
        SlowMode::Scheduled(s) => s.beta,
        SlowMode::Frozen { beta } => beta,
    };
    let (h, n_steps) = resolve_step(&system.basis, beta0, opts)?;
    let filter = opts.filter;
    let gains = |t: f64| match mode {
        SlowMode::Scheduled(s) => gains_at(&s, t),
        SlowMode::Frozen { beta } => Gains { a: 1.0, r: 0.0, beta },
    };
    let frozen = matches!(mode, SlowMode::Frozen { .. });

    let n_state = ds + df + if filter.is_some() { 2 * df } else { 0 };
    let mut z = vec![0.0; n_state];
    z[..ds].copy_from_slice(theta0);
    z[ds..ds + df].copy_from_slice(lambda0);
    if filter.is_some() {
        z[ds + df..ds + 2 * df].copy_from_slice(lambda0);
    }

    let k = system.basis.len();
    let mut turns = vec![0.0; k];
    let mut xi = vec![0.0; system.probe_dim()];
    let mut gbuf = vec![0.0; ds];
    let mut hbuf = vec![0.0; df];
    let mut rhs = |t: f64, z: &[f64], dz: &mut [f64]| -> Result<()> {
        let gn = gains(t);
        system.basis.turns_into(t, &mut turns);
        system.map.eval_turns(&turns, &mut xi);
        let theta = &z[..ds];
        let lambda = &z[ds..ds + df];
        let args = FieldArgs { t, theta, lambda, xi: &xi, turns: &turns, a: gn.a };
        system.eval_h(&args, &mut hbuf)?;
        for i in 0..df {
            dz[ds + i] = gn.beta * hbuf[i];
        }
        if frozen {
            dz[..ds].iter_mut().for_each(|v| *v = 0.0);
        } else {
            let slow_lambda = if filter.is_some() { &z[ds + df..ds + 2 * df] } else { lambda };
            system.eval_g(&FieldArgs { lambda: slow_lambda, ..args }, &mut gbuf)?;
            for i in 0..ds {
                dz[i] = gn.a * gbuf[i];
            }
        }
        if let Some(f) = &filter {
            for i in 0..df {
                let (dl, dv) = f.rates(z[ds + i], z[ds + df + i], z[ds + 2 * df + i]);
                dz[ds + df + i] = dl;
                dz[ds + 2 * df + i] = dv;
            }
        }
        Ok(())
    };

    let n_samples = n_steps / opts.sample_stride + 1;
    let mut traj = Trajectory {
        d_slow: ds,
        d_fast: df,
        times: Vec::with_capacity(n_samples),
        a: Vec::with_capacity(n_samples),
        beta: Vec::with_capacity(n_samples),
        theta: Vec::with_capacity(n_samples),
        lambda: Vec::with_capacity(n_samples),
        lambda_filtered: filter.map(|_| Vec::with_capacity(n_samples)),
        lambda_filtered_rate: filter.map(|_| Vec::with_capacity(n_samples)),
        turns: Vec::with_capacity(n_samples),
        step: h,
    };
    let record = |traj: &mut Trajectory, t: f64, z: &[f64]| {
        let gn = gains(t);
        traj.times.push(t);
        traj.a.push(gn.a);
        traj.beta.push(gn.beta);
        traj.theta.push(z[..ds].to_vec());
        traj.lambda.push(z[ds..ds + df].to_vec());
        if let Some(lf) = traj.lambda_filtered.as_mut() {
            lf.push(z[ds + df..ds + 2 * df].to_vec());
        }
        if let Some(rate) = traj.lambda_filtered_rate.as_mut() {
            rate.push(z[ds + 2 * df..].to_vec());
        }
        traj.turns.push(system.basis.turns(t));
    };

    record(&mut traj, 0.0, &z);
    let mut rk = Rk4::new(n_state);
    for step in 1..=n_steps {
        let t0 = (step - 1) as f64 * h;
        rk.step(&mut rhs, t0, h, &mut z)?;
        let t = step as f64 * h;
        check_finite(&z, t)?;
        if step % opts.sample_stride == 0 {
            record(&mut traj, t, &z);
        }
    }
    Ok(traj)
}
