//! Extremum-seeking control as a two-timescale QSA system.
//!
//! The parameter `θ` is perturbed by a probing signal scaled by the probing
//! gain `ε(θ)`; the normalized measurement `Γ(θ + ε(θ) ξ) / ε(θ)` drives a
//! washout (high-pass) filter whose state is the fast variable `Λ`. The
//! filtered probe `ξ̌` is the steady-state washout response to each probe
//! channel, computed in closed form. The slow update is
//!
//! ```text
//! dΘ/dt = −a_t [σ (Θ − θ_ctr) + a_t ξ̌_t y̌_t],   y̌ = Hᵀ Λ + J Y^n
//! ```
//!
//! with the inner `a_t` dropped when `single_at` is set. The fast gain is 1.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{integrate, FastJacobianFn, FieldArgs, FieldFn, GainSchedule, IntegrateOptions, Trajectory, TwoTimescaleSystem};
use crate::error::{QsaError, Result};
use crate::filters::{transfer, StateSpaceFilter};
use crate::meanflow::{mean_field_g0_with, AveragingOptions};
use crate::probing::{default_basis, ergodic_average, FrequencyBasis, ProbingMap};

/// An objective `Γ: R^d → R` to be minimized.
pub trait Objective: Send + Sync + fmt::Debug {
    fn value(&self, theta: &[f64]) -> Result<f64>;

    /// Exact gradient when known.
    fn gradient(&self, _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Required input dimension, if fixed.
    fn dim(&self) -> Option<usize> {
        None
    }
}

/// `½ Σ c_i (θ_i − θ°_i)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub center: Vec<f64>,
    pub curvature: Vec<f64>,
}

impl Quadratic {
    pub fn isotropic(center: Vec<f64>) -> Self {
        let curvature = vec![1.0; center.len()];
        Quadratic { center, curvature }
    }
}

impl Objective for Quadratic {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        check_dim(theta, self.center.len())?;
        Ok(0.5 * theta.iter().zip(&self.center).zip(&self.curvature).map(|((t, c), k)| k * (t - c) * (t - c)).sum::<f64>())
    }

    fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(theta.iter().zip(&self.center).zip(&self.curvature).map(|((t, c), k)| k * (t - c)).collect())
    }

    fn dim(&self) -> Option<usize> {
        Some(self.center.len())
    }
}

/// `(a − x)² + b (y − x²)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rosenbrock {
    pub a: f64,
    pub b: f64,
}

impl Default for Rosenbrock {
    fn default() -> Self {
        Rosenbrock { a: 1.0, b: 100.0 }
    }
}

impl Objective for Rosenbrock {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        check_dim(theta, 2)?;
        let (x, y) = (theta[0], theta[1]);
        Ok((self.a - x).powi(2) + self.b * (y - x * x).powi(2))
    }

    fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let (x, y) = (theta[0], theta[1]);
        Some(vec![-2.0 * (self.a - x) - 4.0 * self.b * x * (y - x * x), 2.0 * self.b * (y - x * x)])
    }

    fn dim(&self) -> Option<usize> {
        Some(2)
    }
}

/// `‖θ − θ°‖⁴`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quartic {
    pub center: Vec<f64>,
}

impl Objective for Quartic {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        check_dim(theta, self.center.len())?;
        let r2: f64 = theta.iter().zip(&self.center).map(|(t, c)| (t - c) * (t - c)).sum();
        Ok(r2 * r2)
    }

    fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let r2: f64 = theta.iter().zip(&self.center).map(|(t, c)| (t - c) * (t - c)).sum();
        Some(theta.iter().zip(&self.center).map(|(t, c)| 4.0 * r2 * (t - c)).collect())
    }

    fn dim(&self) -> Option<usize> {
        Some(self.center.len())
    }
}

/// A constant objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Flat(pub f64);

impl Objective for Flat {
    fn value(&self, _theta: &[f64]) -> Result<f64> {
        Ok(self.0)
    }

    fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; theta.len()])
    }
}

fn check_dim(theta: &[f64], d: usize) -> Result<()> {
    if theta.len() == d {
        Ok(())
    } else {
        Err(QsaError::Dimension(format!("objective expects {d} coordinates, got {}", theta.len())))
    }
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// An objective evaluated by a persistent child process.
///
/// Each evaluation writes one line of space-separated decimals to the
/// child's stdin and reads one decimal back from its stdout.
pub struct ExternalObjective {
    command: Vec<String>,
    dim: Option<usize>,
    pipe: Mutex<Option<Pipe>>,
    evals: AtomicU64,
}

impl fmt::Debug for ExternalObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalObjective")
            .field("command", &self.command)
            .field("evals", &self.evaluations())
            .finish()
    }
}

impl ExternalObjective {
    pub fn new(command: Vec<String>, dim: Option<usize>) -> Result<Self> {
        if command.is_empty() {
            return Err(QsaError::InvalidInput("external objective command is empty".into()));
        }
        Ok(ExternalObjective { command, dim, pipe: Mutex::new(None), evals: AtomicU64::new(0) })
    }

    pub fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    fn spawn(&self) -> Result<Pipe> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| QsaError::Io(format!("cannot start {:?}: {e}", self.command[0])))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Pipe { child, stdin, stdout })
    }
}

impl Objective for ExternalObjective {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        if let Some(d) = self.dim {
            check_dim(theta, d)?;
        }
        let mut guard = self.pipe.lock().map_err(|_| QsaError::Io("objective process lock poisoned".into()))?;
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let pipe = guard.as_mut().expect("spawned above");
        let line: Vec<String> = theta.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(pipe.stdin, "{}", line.join(" "))?;
        pipe.stdin.flush()?;
        let mut reply = String::new();
        if pipe.stdout.read_line(&mut reply)? == 0 {
            return Err(QsaError::Io("objective process closed its output".into()));
        }
        self.evals.fetch_add(1, Ordering::Relaxed);
        reply
            .trim()
            .parse::<f64>()
            .map_err(|_| QsaError::Io(format!("objective process replied {:?}, expected a number", reply.trim())))
    }

    fn dim(&self) -> Option<usize> {
        self.dim
    }
}

impl Drop for ExternalObjective {
    fn drop(&mut self) {
        log::info!("external objective {:?} evaluated {} times", self.command[0], self.evaluations());
        if let Ok(mut guard) = self.pipe.lock() {
            if let Some(mut pipe) = guard.take() {
                drop(pipe.stdin);
                let _ = pipe.child.wait();
            }
        }
    }
}

/// How the probing amplitude depends on `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainKind {
    /// `ε √(1 + Γ(θ))`
    ObjectiveScaled,
    /// `ε √(1 + ‖θ − θ_ctr‖² / σ_p²)`
    PriorScaled,
    Constant,
}

#[derive(Debug, Clone)]
pub struct EscConfig {
    pub objective: Arc<dyn Objective>,
    pub epsilon: f64,
    pub gain_kind: GainKind,
    pub theta_ctr: Vec<f64>,
    pub sigma_p: f64,
    /// Regularization toward `θ_ctr`.
    pub sigma: f64,
    pub washout: StateSpaceFilter,
    pub basis: FrequencyBasis,
    /// Identity or a linear map of the cosines.
    pub map: ProbingMap,
    /// Use one factor `a_t` on the correlation term instead of two.
    pub single_at: bool,
}

impl EscConfig {
    /// Defaults: `ε = 0.1`, constant gain, `θ_ctr = 0`, `σ_p = 1`, `σ = 0`,
    /// washout `s/(s+1)`, one default frequency per coordinate.
    pub fn new(objective: Arc<dyn Objective>, d: usize) -> Result<Self> {
        Ok(EscConfig {
            objective,
            epsilon: 0.1,
            gain_kind: GainKind::Constant,
            theta_ctr: vec![0.0; d],
            sigma_p: 1.0,
            sigma: 0.0,
            washout: StateSpaceFilter::washout(1.0)?,
            basis: default_basis(d)?,
            map: ProbingMap::Identity,
            single_at: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta_ctr.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(QsaError::Dimension("ESC needs at least one parameter".into()));
        }
        if let Some(od) = self.objective.dim() {
            if od != d {
                return Err(QsaError::Dimension(format!("objective takes {od} coordinates, ESC has {d}")));
            }
        }
        if !(self.epsilon > 0.0) || !(self.sigma_p > 0.0) || !(self.sigma >= 0.0) {
            return Err(QsaError::InvalidInput(format!(
                "need epsilon > 0, sigma_p > 0, sigma >= 0; got {}, {}, {}",
                self.epsilon, self.sigma_p, self.sigma
            )));
        }
        if !matches!(self.map, ProbingMap::Identity | ProbingMap::Linear(_)) {
            return Err(QsaError::Unsupported("ESC filtered probes need an identity or linear probing map".into()));
        }
        self.map.check(&self.basis)?;
        if self.map.dim(self.basis.len()) != d {
            return Err(QsaError::Dimension(format!(
                "probing signal has {} channels, ESC has {d} parameters",
                self.map.dim(self.basis.len())
            )));
        }
        self.washout.check_hurwitz()
    }

    fn mixing(&self) -> DMatrix<f64> {
        match &self.map {
            ProbingMap::Linear(a) => a.clone(),
            _ => DMatrix::identity(self.basis.len(), self.basis.len()),
        }
    }
}

/// `ε(θ)` for the configured gain kind.
pub fn probing_gain(config: &EscConfig, theta: &[f64]) -> Result<f64> {
    let eps = config.epsilon;
    match config.gain_kind {
        GainKind::Constant => Ok(eps),
        GainKind::PriorScaled => {
            let r2: f64 = theta.iter().zip(&config.theta_ctr).map(|(t, c)| (t - c) * (t - c)).sum();
            Ok(eps * (1.0 + r2 / (config.sigma_p * config.sigma_p)).sqrt())
        }
        GainKind::ObjectiveScaled => {
            let v = nonnegative(config, theta)?;
            Ok(eps * (1.0 + v).sqrt())
        }
    }
}

fn nonnegative(config: &EscConfig, theta: &[f64]) -> Result<f64> {
    let v = config.objective.value(theta)?;
    if v < 0.0 {
        return Err(QsaError::NegativeObjective { value: v, theta: theta.to_vec() });
    }
    Ok(v)
}

/// `Y^n = Γ(θ + ε(θ) ξ) / ε(θ)`.
pub fn normalized_observation(config: &EscConfig, theta: &[f64], xi: &[f64]) -> Result<f64> {
    let eps = probing_gain(config, theta)?;
    let probe: Vec<f64> = theta.iter().zip(xi).map(|(t, x)| t + eps * x).collect();
    let v = match config.gain_kind {
        GainKind::ObjectiveScaled => nonnegative(config, &probe)?,
        _ => config.objective.value(&probe)?,
    };
    Ok(v / eps)
}

/// Probing map producing `(ξ, ξ̌)`: the probes and their steady-state
/// washout responses.
pub fn filtered_probe_map(config: &EscConfig) -> Result<ProbingMap> {
    let k = config.basis.len();
    let mix = config.mixing();
    let d = mix.nrows();
    let response: Vec<Complex<f64>> = config
        .basis
        .omega()
        .iter()
        .map(|w| transfer(&config.washout, Complex::new(0.0, std::f64::consts::TAU * w)))
        .collect::<Result<_>>()?;
    Ok(ProbingMap::Clock {
        dim: 2 * d,
        g: Arc::new(move |turns: &[f64], out: &mut [f64]| {
            let mut raw = [0.0f64; 2];
            for r in 0..d {
                out[r] = 0.0;
                out[d + r] = 0.0;
            }
            for c in 0..k {
                let phase = Complex::from_polar(1.0, std::f64::consts::TAU * turns[c]);
                raw[0] = phase.re;
                raw[1] = (response[c] * phase).re;
                for r in 0..d {
                    out[r] += mix[(r, c)] * raw[0];
                    out[d + r] += mix[(r, c)] * raw[1];
                }
            }
        }),
    })
}

/// Assemble the ESC system. The fast state is the washout state of the
/// measurement channel.
pub fn build_esc_system(config: &EscConfig) -> Result<TwoTimescaleSystem> {
    config.validate()?;
    let d = config.dim();
    let n = config.washout.order();
    let map = filtered_probe_map(config)?;

    let cfg = config.clone();
    let h: FieldFn = Arc::new(move |a: &FieldArgs<'_>, out: &mut [f64]| {
        let y = normalized_observation(&cfg, a.theta, &a.xi[..d])?;
        cfg.washout.state_derivative(a.lambda, y, out);
        Ok(())
    });
    let cfg = config.clone();
    let g: FieldFn = Arc::new(move |a: &FieldArgs<'_>, out: &mut [f64]| {
        let y = normalized_observation(&cfg, a.theta, &a.xi[..d])?;
        let y_check = cfg.washout.output(a.lambda, y);
        let inner = if cfg.single_at { 1.0 } else { a.a };
        for i in 0..d {
            out[i] = -(cfg.sigma * (a.theta[i] - cfg.theta_ctr[i]) + inner * a.xi[d + i] * y_check);
        }
        Ok(())
    });
    let f = config.washout.f().clone();
    let jac: FastJacobianFn = Arc::new(move |_: &FieldArgs<'_>, out: &mut DMatrix<f64>| {
        out.copy_from(&f);
        Ok(())
    });
    Ok(TwoTimescaleSystem::new("esc", d, n, config.basis.clone(), map, g, h)?.with_fast_jacobian(jac))
}

/// `Σ_ξ̌ = E[ξ̌ ξ̌ᵀ]` and `M₀ = J E[ξ̌ ξᵀ]`, by ergodic averaging.
pub fn probe_statistics(config: &EscConfig, tol: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    config.validate()?;
    let d = config.dim();
    let map = filtered_probe_map(config)?;
    let avg = ergodic_average(
        |_: &[f64], xi: &[f64]| {
            let mut out = Vec::with_capacity(2 * d * d);
            for i in 0..d {
                for j in 0..d {
                    out.push(xi[d + i] * xi[d + j]);
                }
            }
            for i in 0..d {
                for j in 0..d {
                    out.push(xi[d + i] * xi[j]);
                }
            }
            out
        },
        &[],
        &config.basis,
        &map,
        tol,
    )?;
    let sigma = DMatrix::from_row_slice(d, d, &avg.value[..d * d]);
    let m0 = DMatrix::from_row_slice(d, d, &avg.value[d * d..]) * config.washout.j();
    Ok((sigma, m0))
}

/// Central-difference gradient with step `1e-5 · max(1, ‖θ‖)`.
pub fn fd_gradient(objective: &dyn Objective, theta: &[f64]) -> Result<Vec<f64>> {
    let scale = theta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let h = 1e-5 * scale;
    let mut grad = Vec::with_capacity(theta.len());
    let mut x = theta.to_vec();
    for i in 0..theta.len() {
        x[i] = theta[i] + h;
        let up = objective.value(&x)?;
        x[i] = theta[i] - h;
        let down = objective.value(&x)?;
        x[i] = theta[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `∇Γ(θ)`, exact when the objective provides it.
pub fn objective_gradient(objective: &dyn Objective, theta: &[f64]) -> Result<Vec<f64>> {
    match objective.gradient(theta) {
        Some(g) => Ok(g),
        None => fd_gradient(objective, theta),
    }
}

/// `−(σ (θ − θ_ctr) + M ∇Γ(θ))` with `M = Σ_ξ̌ + M₀`.
pub fn esc_meanflow_approx(config: &EscConfig, theta: &[f64], sigma_check: &DMatrix<f64>, m0: &DMatrix<f64>) -> Result<Vec<f64>> {
    let grad = DVector::from_vec(objective_gradient(config.objective.as_ref(), theta)?);
    let mg = (sigma_check + m0) * grad;
    Ok((0..theta.len()).map(|i| -(config.sigma * (theta[i] - config.theta_ctr[i]) + mg[i])).collect())
}

/// Averaging settings matched to the washout: burn-in measured in its time constant.
pub fn esc_averaging(config: &EscConfig) -> AveragingOptions {
    AveragingOptions { decay_rate: -config.washout.spectral_abscissa(), ..AveragingOptions::default() }
}

/// Largest gap `‖ḡ₀(θ) − approx(θ)‖` over a grid of `θ`.
pub fn meanflow_gap(config: &EscConfig, thetas: &[Vec<f64>], tol: f64) -> Result<f64> {
    let system = build_esc_system(config)?;
    let (sigma, m0) = probe_statistics(config, 1e-6)?;
    let opts = esc_averaging(config);
    let gaps: Vec<f64> = thetas
        .par_iter()
        .map(|th| {
            let g0 = mean_field_g0_with(&system, th, 1.0, tol, &opts)?.value;
            let approx = esc_meanflow_approx(config, th, &sigma, &m0)?;
            Ok(g0.iter().zip(&approx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        })
        .collect::<Result<_>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

/// Run ESC from `θ₀` with the washout state at rest.
pub fn run_esc(config: &EscConfig, rho: f64, theta0: &[f64], opts: &IntegrateOptions) -> Result<Trajectory> {
    let system = build_esc_system(config)?;
    let schedule = GainSchedule::mixed(rho, 1.0)?;
    let lambda0 = vec![0.0; system.d_fast()];
    integrate(&system, &schedule, theta0, &lambda0, &IntegrateOptions { filter: None, ..opts.clone() })
}
