//! Linear time-invariant filters: the SISO washout used by extremum seeking
//! and the second-order low-pass applied to the fast variable.

use std::fmt::Write as _;

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{QsaError, Result};

pub type C64 = Complex<f64>;

/// SISO state-space filter `dx/dt = F x + G u`, `y = Hᵀx + J u`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceFilter {
    f: DMatrix<f64>,
    g: DVector<f64>,
    h: DVector<f64>,
    j: f64,
}

impl StateSpaceFilter {
    pub fn new(f: DMatrix<f64>, g: DVector<f64>, h: DVector<f64>, j: f64) -> Result<Self> {
        let n = f.nrows();
        if n == 0 || f.ncols() != n || g.len() != n || h.len() != n {
            return Err(QsaError::Dimension(format!(
                "filter needs square F with matching G, H; got F {}x{}, G {}, H {}",
                f.nrows(),
                f.ncols(),
                g.len(),
                h.len()
            )));
        }
        if f.iter().chain(g.iter()).chain(h.iter()).any(|v| !v.is_finite()) || !j.is_finite() {
            return Err(QsaError::InvalidInput("filter matrices must be finite".into()));
        }
        Ok(StateSpaceFilter { f, g, h, j })
    }

    pub fn scalar(f: f64, g: f64, h: f64, j: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, f), DVector::from_element(1, g), DVector::from_element(1, h), j)
    }

    /// High-pass `s / (s + ω_h)`: `F = −ω_h`, `G = 1`, `H = −ω_h`, `J = 1`.
    pub fn washout(omega_h: f64) -> Result<Self> {
        if !(omega_h > 0.0) || !omega_h.is_finite() {
            return Err(QsaError::InvalidInput(format!("washout corner frequency must be positive, got {omega_h}")));
        }
        let filter = Self::scalar(-omega_h, 1.0, -omega_h, 1.0)?;
        filter.check_hurwitz()?;
        Ok(filter)
    }

    pub fn order(&self) -> usize {
        self.f.nrows()
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn g(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn j(&self) -> f64 {
        self.j
    }

    pub fn eigenvalues(&self) -> Vec<C64> {
        self.f.complex_eigenvalues().iter().copied().collect()
    }

    /// Largest real part among the eigenvalues of F.
    pub fn spectral_abscissa(&self) -> f64 {
        self.eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_hurwitz(&self) -> Result<()> {
        let max_re = self.spectral_abscissa();
        if max_re >= 0.0 {
            return Err(QsaError::NonHurwitz { max_re });
        }
        Ok(())
    }

    /// `dx/dt` for input `u`.
    pub fn state_derivative(&self, x: &[f64], u: f64, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..x.len()).map(|c| self.f[(r, c)] * x[c]).sum::<f64>() + self.g[r] * u;
        }
    }

    /// `Hᵀx + J u`.
    pub fn output(&self, x: &[f64], u: f64) -> f64 {
        self.h.iter().zip(x).map(|(h, x)| h * x).sum::<f64>() + self.j * u
    }
}

/// `M(s) = Hᵀ(sI − F)⁻¹G + J`.
pub fn transfer(filter: &StateSpaceFilter, s: C64) -> Result<C64> {
    if filter.eigenvalues().iter().any(|l| (s - l).norm() < 1e-12) {
        return Err(QsaError::SingularResolvent { s: format!("{s}") });
    }
    let n = filter.order();
    let resolvent = DMatrix::<C64>::from_fn(n, n, |r, c| {
        let diag = if r == c { s } else { C64::new(0.0, 0.0) };
        diag - C64::new(filter.f[(r, c)], 0.0)
    });
    let rhs = DVector::<C64>::from_iterator(n, filter.g.iter().map(|&v| C64::new(v, 0.0)));
    let v = resolvent
        .lu()
        .solve(&rhs)
        .ok_or_else(|| QsaError::SingularResolvent { s: format!("{s}") })?;
    let hv: C64 = filter.h.iter().zip(v.iter()).map(|(h, v)| v * *h).sum();
    Ok(hv + filter.j)
}

/// `γ₀ = −Hᵀ F⁻¹ G`, the DC gain of the strictly proper part.
pub fn gamma0(filter: &StateSpaceFilter) -> Result<f64> {
    let v = filter.f.clone().lu().solve(&filter.g).ok_or(QsaError::SingularF)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(QsaError::SingularF);
    }
    Ok(-filter.h.dot(&v))
}

/// Smallest eigenvalue of the symmetric part of `Σ + M₀`.
pub fn passivity_metric(sigma_check: &DMatrix<f64>, m0: &DMatrix<f64>) -> Result<f64> {
    let d = sigma_check.nrows();
    if sigma_check.ncols() != d || m0.nrows() != d || m0.ncols() != d {
        return Err(QsaError::Dimension("passivity metric needs two square matrices of equal size".into()));
    }
    let m = sigma_check + m0;
    let sym = (&m + m.transpose()) * 0.5;
    Ok(sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min))
}

/// Bode table `omega,abs_M,arg_M` at the given angular frequencies.
pub fn bode_csv(filter: &StateSpaceFilter, omegas: &[f64]) -> Result<String> {
    let mut out = String::from("omega,abs_M,arg_M\n");
    for &w in omegas {
        let m = transfer(filter, C64::new(0.0, w))?;
        writeln!(out, "{:.16e},{:.16e},{:.16e}", w, m.norm(), m.arg()).expect("write to string");
    }
    Ok(out)
}

/// Low-pass `Λ̈^F + 2γζΛ̇^F + γ²Λ^F = γ²Λ` with natural frequency `γ = ηβ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondOrderFilter {
    zeta: f64,
    eta: f64,
    gamma: f64,
}

impl SecondOrderFilter {
    pub const DEFAULT_ZETA: f64 = 0.7;
    pub const DEFAULT_ETA: f64 = 1.0;

    pub fn new(zeta: f64, eta: f64, beta: f64) -> Result<Self> {
        if !(zeta > 0.0 && zeta < 1.0) {
            return Err(QsaError::InvalidInput(format!("damping ratio must lie in (0, 1), got {zeta}")));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(QsaError::InvalidInput(format!("eta must be positive, got {eta}")));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(QsaError::InvalidInput(format!("beta must be positive, got {beta}")));
        }
        Ok(SecondOrderFilter { zeta, eta, gamma: eta * beta })
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `(d/dt Λ^F, d/dt V)` with `V = d/dt Λ^F`.
    #[inline]
    pub fn rates(&self, lambda: f64, lf: f64, v: f64) -> (f64, f64) {
        let g = self.gamma;
        (v, g * g * (lambda - lf) - 2.0 * g * self.zeta * v)
    }

    pub fn transfer(&self, s: C64) -> C64 {
        let g2 = self.gamma * self.gamma;
        C64::new(g2, 0.0) / (s * s + s * (2.0 * self.gamma * self.zeta) + g2)
    }

    /// Response to a unit step from rest.
    pub fn step_response(&self, t: f64) -> f64 {
        let wd = self.gamma * (1.0 - self.zeta * self.zeta).sqrt();
        let decay = (-self.zeta * self.gamma * t).exp();
        1.0 - decay * ((wd * t).cos() + self.zeta * self.gamma / wd * (wd * t).sin())
    }

    /// Two-state realization `(Λ^F, V)`.
    pub fn state_space(&self) -> Result<StateSpaceFilter> {
        let g = self.gamma;
        StateSpaceFilter::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -g * g, -2.0 * g * self.zeta]),
            DVector::from_column_slice(&[0.0, g * g]),
            DVector::from_column_slice(&[1.0, 0.0]),
            0.0,
        )
    }
}
