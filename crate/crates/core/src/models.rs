//! Built-in test systems.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dynamics::{FastJacobianFn, FieldArgs, FieldFn, TwoTimescaleSystem};
use crate::error::{QsaError, Result};
use crate::poisson::{Expr, FourierField};
use crate::poisson::expr::{add, mul};
use crate::probing::{make_frequency_basis, ProbingMap};

/// Parameters of the scalar linear model with multiplicative noise
///
/// ```text
/// g = α θ + α λ + b₁ + ξ₁ (c₁ θ + 1)
/// h = −2 θ − λ + b₂ + ξ₂ (c₂ λ + 1)
/// ```
///
/// with `ξ_i = sin(2π ω_i t)`, realized as a cosine probe with phase ¾.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub alpha: f64,
    /// Mean of the additive input.
    pub offset: [f64; 2],
    /// Scale of the multiplicative noise in each row.
    pub row_scale: [f64; 2],
    pub pairs: Vec<(u64, u64)>,
}

impl Default for LinearModel {
    fn default() -> Self {
        LinearModel { alpha: 2.0, offset: [0.0, 0.0], row_scale: [1.0, 1.0], pairs: vec![(2, 1), (3, 1)] }
    }
}

/// Phase offset in turns turning `cos(2π(ωt + φ))` into `sin(2πωt)`.
pub const SINE_PHASE: f64 = 0.75;

impl LinearModel {
    /// `(θ*, λ*)` solving `Ā x + b = 0`.
    pub fn root(&self) -> (f64, f64) {
        let [b1, b2] = self.offset;
        let a = self.alpha;
        ((b1 + a * b2) / a, (-2.0 * b1 - a * b2) / a)
    }

    /// `λ*(θ) = b₂ − 2θ`.
    pub fn lambda_star(&self, theta: f64) -> f64 {
        self.offset[1] - 2.0 * theta
    }

    /// Fourier form of `f = (g; h)` over the model's basis.
    pub fn fourier(&self) -> Result<FourierField> {
        let [b1, b2] = self.offset;
        let [c1, c2] = self.row_scale;
        let (th, la) = (Expr::var(0), Expr::var(1));
        let lin = |c: f64, e: &Expr| mul(Expr::Const(c), e.clone());
        let mut f = FourierField::zero(self.pairs.len(), 1, 1, 2);
        f.add_mean(vec![
            add(add(lin(self.alpha, &th), lin(self.alpha, &la)), Expr::Const(b1)),
            add(add(lin(-2.0, &th), lin(-1.0, &la)), Expr::Const(b2)),
        ])?;
        f.add_cosine(0, vec![add(lin(c1, &th), Expr::one()), Expr::zero()])?;
        f.add_cosine(1, vec![Expr::zero(), add(lin(c2, &la), Expr::one())])?;
        Ok(f)
    }

    pub fn system(&self) -> Result<TwoTimescaleSystem> {
        if self.pairs.len() != 2 {
            return Err(QsaError::InvalidInput(format!(
                "the linear model uses two probing frequencies, got {}",
                self.pairs.len()
            )));
        }
        if self.alpha == 0.0 {
            return Err(QsaError::InvalidInput("alpha must be nonzero".into()));
        }
        let basis = make_frequency_basis(&self.pairs, &[SINE_PHASE, SINE_PHASE])?;
        let (alpha, [b1, b2], [c1, c2]) = (self.alpha, self.offset, self.row_scale);
        let g: FieldFn = Arc::new(move |a: &FieldArgs<'_>, out: &mut [f64]| {
            out[0] = alpha * a.theta[0] + alpha * a.lambda[0] + b1 + a.xi[0] * (c1 * a.theta[0] + 1.0);
            Ok(())
        });
        let h: FieldFn = Arc::new(move |a: &FieldArgs<'_>, out: &mut [f64]| {
            out[0] = -2.0 * a.theta[0] - a.lambda[0] + b2 + a.xi[1] * (c2 * a.lambda[0] + 1.0);
            Ok(())
        });
        let jac: FastJacobianFn = Arc::new(move |a: &FieldArgs<'_>, out: &mut DMatrix<f64>| {
            out[(0, 0)] = -1.0 + c2 * a.xi[1];
            Ok(())
        });
        let model = self.clone();
        let (theta_star, _) = self.root();
        TwoTimescaleSystem::new("linear-3.1", 1, 1, basis, ProbingMap::Identity, g, h)?
            .with_fourier(self.fourier()?)
            .map(|s| {
                s.with_fast_jacobian(jac)
                    .with_lambda_star(Arc::new(move |th: &[f64]| vec![model.lambda_star(th[0])]))
                    .with_theta_star(vec![theta_star])
            })
    }
}

/// `dΘ/dt = a_t ξ_t`, `dΛ/dt = −β Λ` with `ξ_t = cos(2π ω t)`, `ω = ln(a/b)`.
///
/// The slow state is an oscillatory integral of the gain, which makes it a
/// convenient check of the integrator order.
pub fn decoupled_test(pair: (u64, u64)) -> Result<TwoTimescaleSystem> {
    let basis = make_frequency_basis(&[pair], &[])?;
    let g: FieldFn = Arc::new(|a: &FieldArgs<'_>, out: &mut [f64]| {
        out[0] = a.xi[0];
        Ok(())
    });
    let h: FieldFn = Arc::new(|a: &FieldArgs<'_>, out: &mut [f64]| {
        out[0] = -a.lambda[0];
        Ok(())
    });
    let mut f = FourierField::zero(1, 1, 1, 2);
    f.add_mean(vec![Expr::zero(), mul(Expr::Const(-1.0), Expr::var(1))])?;
    f.add_cosine(0, vec![Expr::one(), Expr::zero()])?;
    Ok(TwoTimescaleSystem::new("decoupled-test", 1, 1, basis, ProbingMap::Identity, g, h)?
        .with_fourier(f)?
        .with_lambda_star(Arc::new(|_: &[f64]| vec![0.0])))
}
