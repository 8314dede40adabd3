//! Run configuration: a single JSON document, resolved so that every
//! default is written back out with the results.

use std::sync::Arc;

use qsa_core::dynamics::TwoTimescaleSystem;
use qsa_core::esc::{
    build_esc_system, EscConfig, ExternalObjective, Flat, GainKind, Objective, Quadratic, Quartic, Rosenbrock,
};
use qsa_core::filters::{SecondOrderFilter, StateSpaceFilter};
use qsa_core::models::{decoupled_test, LinearModel, SINE_PHASE};
use qsa_core::poisson::FourierField;
use qsa_core::probing::{default_basis, make_frequency_basis, FrequencyBasis};
use qsa_core::{QsaError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub probing: ProbingSection,
    pub gains: GainsSection,
    pub system: SystemSection,
    pub filter: FilterSection,
    pub esc: EscSection,
    pub experiment: ExperimentSection,
}

/// Frequency pairs `(a, b)` with `ω = ln(a/b)` and phase offsets in turns.
/// Unset entries take the system's own basis.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbingSection {
    pub pairs: Option<Vec<(u64, u64)>>,
    pub phases: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainsSection {
    pub rho: f64,
    /// Defaults to 1 for extremum seeking and 0.05 otherwise.
    pub beta: Option<f64>,
}

impl Default for GainsSection {
    fn default() -> Self {
        GainsSection { rho: 0.7, beta: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    /// `linear-3.1` (or `linear`), `decoupled-test`, `esc-quadratic` (or `esc`), `custom`.
    pub name: String,
    pub alpha: f64,
    pub offset: [f64; 2],
    pub row_scale: [f64; 2],
    pub theta0: Option<Vec<f64>>,
    pub lambda0: Option<Vec<f64>>,
    /// Stacked `(g; h)` in Fourier form, for `custom`.
    pub fourier: Option<serde_json::Value>,
    pub theta_star: Option<Vec<f64>>,
}

impl Default for SystemSection {
    fn default() -> Self {
        let m = LinearModel::default();
        SystemSection {
            name: "linear-3.1".into(),
            alpha: m.alpha,
            offset: m.offset,
            row_scale: m.row_scale,
            theta0: None,
            lambda0: None,
            fourier: None,
            theta_star: None,
        }
    }
}

/// Second-order low-pass on the fast state, natural frequency `η β`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub enabled: bool,
    pub zeta: f64,
    pub eta: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection { enabled: false, zeta: SecondOrderFilter::DEFAULT_ZETA, eta: SecondOrderFilter::DEFAULT_ETA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    Quadratic {
        center: Vec<f64>,
        #[serde(default)]
        curvature: Option<Vec<f64>>,
    },
    Rosenbrock {
        #[serde(default = "one")]
        a: f64,
        #[serde(default = "hundred")]
        b: f64,
    },
    Quartic {
        center: Vec<f64>,
    },
    Flat {
        value: f64,
    },
    /// A persistent process reading `θ` per line and answering `Γ(θ)`.
    External {
        command: Vec<String>,
        dim: usize,
    },
}

fn one() -> f64 {
    1.0
}

fn hundred() -> f64 {
    100.0
}

impl ObjectiveSpec {
    fn dim(&self) -> usize {
        match self {
            ObjectiveSpec::Quadratic { center, .. } | ObjectiveSpec::Quartic { center } => center.len(),
            ObjectiveSpec::Rosenbrock { .. } => 2,
            ObjectiveSpec::Flat { .. } => 1,
            ObjectiveSpec::External { dim, .. } => *dim,
        }
    }

    /// Known minimizer, if any.
    pub fn optimum(&self) -> Option<Vec<f64>> {
        match self {
            ObjectiveSpec::Quadratic { center, .. } | ObjectiveSpec::Quartic { center } => Some(center.clone()),
            ObjectiveSpec::Rosenbrock { a, .. } => Some(vec![*a, a * a]),
            _ => None,
        }
    }

    fn resolve(&mut self) {
        if let ObjectiveSpec::Quadratic { center, curvature } = self {
            curvature.get_or_insert_with(|| vec![1.0; center.len()]);
        }
    }

    fn build(&self) -> Result<Arc<dyn Objective>> {
        Ok(match self {
            ObjectiveSpec::Quadratic { center, curvature } => {
                let curvature = curvature.clone().unwrap_or_else(|| vec![1.0; center.len()]);
                if curvature.len() != center.len() {
                    return Err(QsaError::Dimension("quadratic curvature and center differ in length".into()));
                }
                Arc::new(Quadratic { center: center.clone(), curvature })
            }
            ObjectiveSpec::Rosenbrock { a, b } => Arc::new(Rosenbrock { a: *a, b: *b }),
            ObjectiveSpec::Quartic { center } => Arc::new(Quartic { center: center.clone() }),
            ObjectiveSpec::Flat { value } => Arc::new(Flat(*value)),
            ObjectiveSpec::External { command, dim } => Arc::new(ExternalObjective::new(command.clone(), Some(*dim))?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainKindSpec {
    ObjectiveScaled,
    PriorScaled,
    Constant,
}

impl From<GainKindSpec> for GainKind {
    fn from(k: GainKindSpec) -> Self {
        match k {
            GainKindSpec::ObjectiveScaled => GainKind::ObjectiveScaled,
            GainKindSpec::PriorScaled => GainKind::PriorScaled,
            GainKindSpec::Constant => GainKind::Constant,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EscSection {
    pub objective: ObjectiveSpec,
    pub epsilon: f64,
    pub gain_kind: GainKindSpec,
    pub theta_ctr: Option<Vec<f64>>,
    pub sigma_p: f64,
    pub sigma: f64,
    /// Corner frequency of the washout `s / (s + ω_h)`.
    pub washout_corner: f64,
    /// One factor of the slow gain on the correlation term instead of two.
    pub single_at: bool,
    pub horizon: f64,
    /// Allowed distance of the final parameter from a known optimum.
    pub tolerance: f64,
}

impl Default for EscSection {
    fn default() -> Self {
        EscSection {
            objective: ObjectiveSpec::Quadratic { center: vec![1.0], curvature: None },
            epsilon: 0.1,
            gain_kind: GainKindSpec::Constant,
            theta_ctr: None,
            sigma_p: 1.0,
            sigma: 0.0,
            washout_corner: 1.0,
            single_at: true,
            horizon: 5000.0,
            tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridQuantitySpec {
    FastEquilibrium,
    SlowField,
}

/// Scalar bounds applied to every coordinate of a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { lower: -2.0, upper: 2.0, points: 11 }
    }
}

impl GridSection {
    pub fn points(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        if self.points == 0 || !(self.upper >= self.lower) {
            return Err(QsaError::InvalidInput(format!(
                "grid needs at least one point and lower <= upper, got {} points on [{}, {}]",
                self.points, self.lower, self.upper
            )));
        }
        let axis: Vec<f64> = (0..self.points)
            .map(|i| {
                if self.points == 1 {
                    self.lower
                } else {
                    self.lower + (self.upper - self.lower) * i as f64 / (self.points - 1) as f64
                }
            })
            .collect();
        let mut out = vec![Vec::new()];
        for _ in 0..dim {
            out = out.into_iter().flat_map(|p| axis.iter().map(move |&v| [p.clone(), vec![v]].concat())).collect();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Horizon of `simulate`, `check-slow` (doubled for the comparison run) and `pmf`.
    pub horizon: f64,
    /// Store every `stride`-th integration step in trajectory files.
    pub stride: usize,
    /// Integration step; `None` takes the largest step the step policy allows.
    pub step: Option<f64>,
    pub tol: f64,
    pub betas: Vec<f64>,
    /// Sweep horizon is `horizon_scale / β`, capped by `horizon_cap` if set.
    pub horizon_scale: f64,
    pub horizon_cap: Option<f64>,
    pub slope_band: (f64, f64),
    pub filtered_slope_band: (f64, f64),
    pub r_squared_min: f64,
    pub bias_betas: Vec<f64>,
    pub bias_slope_band: (f64, f64),
    /// Allowed factor between the slow-error ratios at `T` and `2T`.
    pub slow_ratio_change: f64,
    pub pmf_horizon: f64,
    pub pmf_tol: f64,
    pub grid: GridSection,
    pub grid_quantity: GridQuantitySpec,
    pub lyapunov_horizon: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            horizon: 4000.0,
            stride: 10,
            step: None,
            tol: 1e-6,
            betas: vec![0.02, 0.04, 0.08, 0.16],
            horizon_scale: 200.0,
            horizon_cap: None,
            slope_band: (0.8, 1.2),
            filtered_slope_band: (1.7, 2.3),
            r_squared_min: 0.95,
            bias_betas: vec![0.025, 0.05, 0.1, 0.2],
            bias_slope_band: (0.8, 3.0),
            slow_ratio_change: 2.0,
            pmf_horizon: 50.0,
            pmf_tol: 1e-8,
            grid: GridSection::default(),
            grid_quantity: GridQuantitySpec::SlowField,
            lyapunov_horizon: 200.0,
        }
    }
}

/// What the `system` section names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Linear,
    Decoupled,
    Esc,
    Custom,
}

impl SystemKind {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "linear-3.1" | "linear" => Ok(SystemKind::Linear),
            "decoupled-test" => Ok(SystemKind::Decoupled),
            "esc-quadratic" | "esc" => Ok(SystemKind::Esc),
            "custom" => Ok(SystemKind::Custom),
            other => Err(QsaError::InvalidInput(format!(
                "unknown system {other:?}; expected linear-3.1, decoupled-test, esc-quadratic or custom"
            ))),
        }
    }
}

/// A validated configuration with its built system.
pub struct Resolved {
    pub config: Config,
    pub kind: SystemKind,
    pub system: TwoTimescaleSystem,
    pub esc: Option<EscConfig>,
    pub beta: f64,
    pub theta0: Vec<f64>,
    pub lambda0: Vec<f64>,
}

impl std::fmt::Debug for Resolved {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Resolved").field("config", &self.config).field("system", &self.system).finish()
    }
}

fn basis_from(probing: &ProbingSection, default_pairs: &[(u64, u64)]) -> Result<FrequencyBasis> {
    let pairs = probing.pairs.clone().unwrap_or_else(|| default_pairs.to_vec());
    make_frequency_basis(&pairs, probing.phases.as_deref().unwrap_or(&[]))
}

fn check_len(what: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(QsaError::Dimension(format!("{what} has {} entries, system expects {n}", v.len())));
    }
    Ok(())
}

/// Validate, build the system, and fill every unset entry of `config`.
pub fn resolve(mut config: Config) -> Result<Resolved> {
    let kind = SystemKind::parse(&config.system.name)?;
    let beta = config.gains.beta.unwrap_or(if kind == SystemKind::Esc { 1.0 } else { 0.05 });
    config.gains.beta = Some(beta);
    qsa_core::dynamics::GainSchedule::mixed(config.gains.rho, beta)?;
    SecondOrderFilter::new(config.filter.zeta, config.filter.eta, beta)?;
    if config.experiment.stride == 0 {
        return Err(QsaError::InvalidInput("experiment.stride must be at least 1".into()));
    }

    config.esc.objective.resolve();
    let esc_dim = config.esc.objective.dim();
    config.esc.theta_ctr.get_or_insert_with(|| vec![0.0; esc_dim]);

    let mut esc = None;
    let system = match kind {
        SystemKind::Linear => {
            if let Some(ph) = &config.probing.phases {
                if ph.iter().any(|&p| p != SINE_PHASE) {
                    return Err(QsaError::InvalidInput(format!(
                        "the linear model probes with sines, realized by phase offsets of {SINE_PHASE} turns"
                    )));
                }
            }
            let mut model = LinearModel {
                alpha: config.system.alpha,
                offset: config.system.offset,
                row_scale: config.system.row_scale,
                ..LinearModel::default()
            };
            if let Some(p) = &config.probing.pairs {
                model.pairs = p.clone();
            }
            model.system()?
        }
        SystemKind::Decoupled => {
            let basis = basis_from(&config.probing, &[(2, 1)])?;
            if basis.len() != 1 {
                return Err(QsaError::InvalidInput("the decoupled test problem uses one probing frequency".into()));
            }
            decoupled_test(basis.pairs()[0])?.with_basis(basis)?
        }
        SystemKind::Esc => {
            let d = esc_dim;
            let mut cfg = EscConfig::new(config.esc.objective.build()?, d)?;
            cfg.epsilon = config.esc.epsilon;
            cfg.gain_kind = config.esc.gain_kind.into();
            cfg.theta_ctr = config.esc.theta_ctr.clone().unwrap_or_default();
            cfg.sigma_p = config.esc.sigma_p;
            cfg.sigma = config.esc.sigma;
            cfg.washout = StateSpaceFilter::washout(config.esc.washout_corner)?;
            cfg.single_at = config.esc.single_at;
            if config.probing.pairs.is_some() || config.probing.phases.is_some() {
                let default: Vec<(u64, u64)> = default_basis(d)?.pairs().to_vec();
                cfg.basis = basis_from(&config.probing, &default)?;
            }
            if beta != 1.0 {
                return Err(QsaError::InvalidInput(format!(
                    "extremum seeking runs with unit fast gain; gains.beta is {beta}"
                )));
            }
            let sys = build_esc_system(&cfg)?;
            esc = Some(cfg);
            sys
        }
        SystemKind::Custom => {
            let value = config.system.fourier.as_ref().ok_or_else(|| {
                QsaError::InvalidInput("system custom needs a `fourier` field stacking g over h".into())
            })?;
            let field = FourierField::from_json_value(value)?;
            let default: Vec<(u64, u64)> = default_basis(field.n_freq())?.pairs().to_vec();
            let basis = basis_from(&config.probing, &default)?;
            let mut sys = TwoTimescaleSystem::from_fourier("custom", field, basis)?;
            if let Some(ts) = &config.system.theta_star {
                check_len("system.theta_star", ts, sys.d_slow())?;
                sys = sys.with_theta_star(ts.clone());
            }
            sys
        }
    };

    config.probing.pairs = Some(system.basis().pairs().to_vec());
    config.probing.phases = Some(system.basis().phases().to_vec());
    let default_theta0 = match kind {
        SystemKind::Linear => vec![1.0],
        _ => vec![0.0; system.d_slow()],
    };
    let theta0 = config.system.theta0.get_or_insert(default_theta0).clone();
    check_len("system.theta0", &theta0, system.d_slow())?;
    let lambda0 = config
        .system
        .lambda0
        .get_or_insert_with(|| system.lambda_star(&theta0).unwrap_or_else(|| vec![0.0; system.d_fast()]))
        .clone();
    check_len("system.lambda0", &lambda0, system.d_fast())?;
    if config.system.theta_star.is_none() {
        config.system.theta_star = system.theta_star().map(<[f64]>::to_vec);
    }
    Ok(Resolved { config, kind, system, esc, beta, theta0, lambda0 })
}
