//! Exact solutions of Poisson's equation for trigonometric-polynomial forcing,
//! and the terms of the perturbative mean flow built from them.

pub mod expr;
pub mod field;
pub mod pmf;

use std::f64::consts::TAU;

use nalgebra::Complex;

pub use expr::Expr;
pub use field::{CExpr, Coefficient, FourierField, JacobianSource, NumericCoef, Slot};
pub use pmf::{
    identity_residuals, pmeanflow_residual, pmeanflow_terms, DerivativeMode, Derivatives, FieldDerivatives, GainFn,
    MeanFn, PMeanFlowTerms, PmfResiduals, PmfSample, WeightedField,
};

use crate::error::{QsaError, Result};
use crate::probing::{rational_dependence, FrequencyBasis};

/// `ũ = u − ū`: drop the k = 0 term.
pub fn zero_mean_part(u: &FourierField) -> FourierField {
    u.zero_mean_part()
}

/// Solve `d/dt û(x, Φ_t) = −ũ(x, Φ_t)` with zero-mean normalization.
///
/// Each coefficient becomes `ĉ_k = −c_k / (2πj⟨k, ω⟩)`. Frequencies with
/// `⟨k, ω⟩ = 0` are detected exactly, never by a floating comparison.
pub fn solve_poisson(u_tilde: &FourierField, basis: &FrequencyBasis) -> Result<FourierField> {
    u_tilde.check_basis(basis)?;
    for k in u_tilde.terms().keys() {
        if k.iter().all(|&v| v == 0) {
            return Err(QsaError::NotZeroMean);
        }
        if rational_dependence(basis, k)? {
            return Err(QsaError::ZeroDivisor { k: k.clone() });
        }
    }
    Ok(u_tilde.map_coefficients(|k, c| {
        let divisor = Complex::new(0.0, TAU * basis.dot_omega(k));
        c.scale(-divisor.inv())
    }))
}

/// The four blocks of `Υ = −∂_x f̂ · f`, split by slow/fast output and
/// slow/fast differentiation.
#[derive(Debug, Clone)]
pub struct UpsilonBlocks {
    /// `−∂_θ ĝ · g`
    pub ss: FourierField,
    /// `−∂_θ ĥ · g`
    pub sf: FourierField,
    /// `−∂_λ ĝ · h`
    pub fs: FourierField,
    /// `−∂_λ ĥ · h`
    pub ff: FourierField,
}

/// Split `f = (g; h)` into its slow and fast outputs.
pub fn split_field(f: &FourierField) -> Result<(FourierField, FourierField)> {
    let d = f.d_slow();
    if f.dim_out() != f.d_slow() + f.d_fast() {
        return Err(QsaError::Dimension(format!(
            "field has {} outputs, expected d_slow + d_fast = {}",
            f.dim_out(),
            f.d_slow() + f.d_fast()
        )));
    }
    Ok((f.select(0..d)?, f.select(d..f.dim_out())?))
}

pub fn upsilon_blocks(f: &FourierField, basis: &FrequencyBasis) -> Result<UpsilonBlocks> {
    let (g, h) = split_field(f)?;
    let g_hat = solve_poisson(&g.zero_mean_part(), basis)?;
    let h_hat = solve_poisson(&h.zero_mean_part(), basis)?;
    Ok(UpsilonBlocks {
        ss: g_hat.directional_derivative(&g, Slot::Slow)?.scale(-1.0),
        sf: h_hat.directional_derivative(&g, Slot::Slow)?.scale(-1.0),
        fs: g_hat.directional_derivative(&h, Slot::Fast)?.scale(-1.0),
        ff: h_hat.directional_derivative(&h, Slot::Fast)?.scale(-1.0),
    })
}
