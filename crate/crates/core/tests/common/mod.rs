//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{Complex, DMatrix};
use qsa_core::dynamics::{FieldArgs, FieldFn, TwoTimescaleSystem};
use qsa_core::poisson::{Coefficient, FourierField, JacobianSource};
use qsa_core::probing::{default_basis, FrequencyBasis, ProbingMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type C64 = Complex<f64>;

/// Random real trig polynomial over the four-frequency basis with
/// `‖k‖∞ ≤ 3` and coefficients affine in `θ`.
pub struct Forcing {
    /// `(k, c₀, c₁)` with coefficient `c₀ + c₁ θ`; conjugate terms are implicit.
    pub terms: Vec<(Vec<i32>, C64, C64)>,
}

impl Forcing {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=8);
        let mut terms: Vec<(Vec<i32>, C64, C64)> = Vec::new();
        while terms.len() < n {
            let k: Vec<i32> = (0..4).map(|_| rng.gen_range(-3..=3)).collect();
            let neg: Vec<i32> = k.iter().map(|v| -v).collect();
            if k.iter().all(|&v| v == 0) || terms.iter().any(|(q, _, _)| *q == k || *q == neg) {
                continue;
            }
            let mut c = || C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (c0, c1) = (c(), c());
            terms.push((k, c0, c1));
        }
        Forcing { terms }
    }

    pub fn field(&self) -> FourierField {
        let mut f = FourierField::zero(4, 1, 1, 1);
        for (k, c0, c1) in &self.terms {
            for (key, a, b) in [(k.clone(), *c0, *c1), (k.iter().map(|v| -v).collect(), c0.conj(), c1.conj())] {
                let value = Arc::new(move |x: &[f64]| vec![a + b * x[0]]);
                f.insert(key, Coefficient::numeric(1, value, JacobianSource::FiniteDifference)).unwrap();
            }
        }
        f
    }

    pub fn phase(basis: &FrequencyBasis, k: &[i32], t: f64) -> C64 {
        let turns = basis.turns(t);
        let angle: f64 = k.iter().zip(&turns).map(|(&ki, u)| ki as f64 * u).sum();
        C64::from_polar(1.0, TAU * angle)
    }

    pub fn value(&self, basis: &FrequencyBasis, theta: f64, t: f64) -> f64 {
        self.terms.iter().map(|(k, c0, c1)| 2.0 * ((c0 + c1 * theta) * Self::phase(basis, k, t)).re).sum()
    }
}

/// Derivative in `t` of a field, from its coefficients and the frequencies.
pub fn time_derivative_at(f: &FourierField, basis: &FrequencyBasis, x: &[f64], t: f64) -> f64 {
    f.terms()
        .iter()
        .map(|(k, c)| {
            let w: f64 = k.iter().zip(basis.omega()).map(|(&ki, w)| ki as f64 * w).sum();
            (c.eval(x)[0] * C64::new(0.0, TAU * w) * Forcing::phase(basis, k, t)).re
        })
        .sum()
}

/// Composite five-point Gauss–Legendre on `[a, b]`.
pub fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    const NODES: [f64; 5] = [0.0, -0.538_469_310_105_683_1, 0.538_469_310_105_683_1, -0.906_179_845_938_664, 0.906_179_845_938_664];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|p| {
            let mid = a + (p as f64 + 0.5) * h;
            NODES.iter().zip(WEIGHTS).map(|(x, w)| w * f(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h
        })
        .sum()
}

/// `h = F λ + (1 + θ) ξ₁ e₁` with constant `F`.
pub fn linear_fast(f: DMatrix<f64>, analytic: bool) -> TwoTimescaleSystem {
    let n = f.nrows();
    let fm = f.clone();
    let h: FieldFn = Arc::new(move |a: &FieldArgs<'_>, out: &mut [f64]| {
        for i in 0..n {
            out[i] = (0..n).map(|k| fm[(i, k)] * a.lambda[k]).sum::<f64>();
        }
        out[0] += (1.0 + a.theta[0]) * a.xi[0];
        Ok(())
    });
    let g: FieldFn = Arc::new(|_: &FieldArgs<'_>, out: &mut [f64]| {
        out[0] = 0.0;
        Ok(())
    });
    let sys = TwoTimescaleSystem::new("linear-fast", 1, n, default_basis(1).unwrap(), ProbingMap::Identity, g, h)
        .unwrap();
    if analytic {
        sys.with_fast_jacobian(Arc::new(move |_: &FieldArgs<'_>, out: &mut DMatrix<f64>| {
            out.copy_from(&f);
            Ok(())
        }))
    } else {
        sys
    }
}

