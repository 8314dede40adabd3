//! Deterministic probing signals and the clock process.
//!
//! The clock is the K-torus process `Φ_t^i = exp(2πj[ω_i t + φ_i])` with
//! frequencies `ω_i = ln(a_i / b_i)`. It is advanced analytically: the phase
//! in turns is `(ω_i t + φ_i) mod 1`, so no drift accumulates along long runs.

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{Complex, DMatrix};
use num_bigint::BigUint;

use crate::error::{QsaError, Result};

/// Generators used by [`default_basis`], in order.
///
/// Every prime appears in at most one pair beyond the first two, so the
/// logarithms are linearly independent over the rationals.
pub const DEFAULT_PAIRS: [(u64, u64); 4] = [(2, 1), (3, 1), (5, 2), (7, 3)];

/// Largest `|k_i|` accepted by [`rational_dependence`].
pub const MAX_K_ORDER: i32 = 64;

/// The K probing frequencies with their integer generators and phases.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBasis {
    pairs: Vec<(u64, u64)>,
    omega: Vec<f64>,
    phases: Vec<f64>,
}

impl FrequencyBasis {
    pub fn pairs(&self) -> &[(u64, u64)] {
        &self.pairs
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// Number of frequencies K.
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn max_omega(&self) -> f64 {
        self.omega.iter().cloned().fold(0.0, f64::max)
    }

    pub fn min_omega(&self) -> f64 {
        self.omega.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Phases in turns, `(ω_i t + φ_i) mod 1`.
    pub fn turns_into(&self, t: f64, out: &mut [f64]) {
        for ((o, w), p) in out.iter_mut().zip(&self.omega).zip(&self.phases) {
            *o = (w * t + p).rem_euclid(1.0);
        }
    }

    pub fn turns(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.turns_into(t, &mut out);
        out
    }

    /// `<k, ω>`.
    pub fn dot_omega(&self, k: &[i32]) -> f64 {
        k.iter().zip(&self.omega).map(|(&ki, w)| ki as f64 * w).sum()
    }

    /// `<k, φ>`.
    pub fn dot_phase(&self, k: &[i32]) -> f64 {
        k.iter().zip(&self.phases).map(|(&ki, p)| ki as f64 * p).sum()
    }

    /// Same frequencies with new phases.
    pub fn with_phases(&self, phases: &[f64]) -> Result<Self> {
        make_frequency_basis(&self.pairs, phases)
    }
}

/// Build a basis from integer pairs `(a_i, b_i)` with `a_i > b_i ≥ 1`.
///
/// An empty `phases` slice means all phases are zero. Phases are reduced
/// modulo one.
pub fn make_frequency_basis(pairs: &[(u64, u64)], phases: &[f64]) -> Result<FrequencyBasis> {
    if pairs.is_empty() {
        return Err(QsaError::InvalidInput("frequency basis needs at least one pair".into()));
    }
    if !phases.is_empty() && phases.len() != pairs.len() {
        return Err(QsaError::Dimension(format!(
            "{} phases for {} frequency pairs",
            phases.len(),
            pairs.len()
        )));
    }
    for &(a, b) in pairs {
        if b == 0 || a <= b {
            return Err(QsaError::InvalidPair { a, b });
        }
    }
    // Equal ratios are detected exactly: a_i b_j == a_j b_i.
    for i in 0..pairs.len() {
        for j in (i + 1)..pairs.len() {
            let (ai, bi) = pairs[i];
            let (aj, bj) = pairs[j];
            if (ai as u128) * (bj as u128) == (aj as u128) * (bi as u128) {
                return Err(QsaError::DuplicateFrequency { first: i, second: j });
            }
        }
    }
    let omega = pairs.iter().map(|&(a, b)| (a as f64 / b as f64).ln()).collect();
    let phases = if phases.is_empty() {
        vec![0.0; pairs.len()]
    } else {
        for p in phases {
            if !p.is_finite() {
                return Err(QsaError::InvalidInput(format!("phase {p} is not finite")));
            }
        }
        phases.iter().map(|p| p.rem_euclid(1.0)).collect()
    };
    Ok(FrequencyBasis { pairs: pairs.to_vec(), omega, phases })
}

/// The first `k` pairs of [`DEFAULT_PAIRS`] with zero phases.
pub fn default_basis(k: usize) -> Result<FrequencyBasis> {
    if k == 0 || k > DEFAULT_PAIRS.len() {
        return Err(QsaError::InvalidInput(format!(
            "default basis supports 1..={} frequencies, asked for {k}",
            DEFAULT_PAIRS.len()
        )));
    }
    make_frequency_basis(&DEFAULT_PAIRS[..k], &[])
}

/// Decide exactly whether `Σ k_i ω_i = 0`.
///
/// With `ω_i = ln(a_i/b_i)` this holds iff
/// `∏ a_i^{k_i⁺} b_i^{k_i⁻} = ∏ b_i^{k_i⁺} a_i^{k_i⁻}`, which is checked with
/// arbitrary-precision integers.
pub fn rational_dependence(basis: &FrequencyBasis, k: &[i32]) -> Result<bool> {
    if k.len() != basis.len() {
        return Err(QsaError::InvalidFrequencyIndex {
            k: k.to_vec(),
            reason: format!("expected {} entries", basis.len()),
        });
    }
    if let Some(&bad) = k.iter().find(|ki| ki.abs() > MAX_K_ORDER) {
        return Err(QsaError::InvalidFrequencyIndex {
            k: k.to_vec(),
            reason: format!("|k_i| = {} exceeds {MAX_K_ORDER}", bad.abs()),
        });
    }
    let mut lhs = BigUint::from(1u32);
    let mut rhs = BigUint::from(1u32);
    for (&ki, &(a, b)) in k.iter().zip(basis.pairs()) {
        let e = ki.unsigned_abs();
        if ki > 0 {
            lhs *= BigUint::from(a).pow(e);
            rhs *= BigUint::from(b).pow(e);
        } else if ki < 0 {
            lhs *= BigUint::from(b).pow(e);
            rhs *= BigUint::from(a).pow(e);
        }
    }
    Ok(lhs == rhs)
}

/// Snapshot of the clock process at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockState {
    pub t: f64,
    /// Phases in turns, each in `[0, 1)`.
    pub turns: Vec<f64>,
    /// `Φ^i_t = exp(2πj·turns_i)`.
    pub phi: Vec<Complex<f64>>,
}

impl ClockState {
    pub fn at(basis: &FrequencyBasis, t: f64) -> Self {
        let turns = basis.turns(t);
        let phi = turns.iter().map(|&u| Complex::from_polar(1.0, TAU * u)).collect();
        ClockState { t, turns, phi }
    }

    /// Real parts of Φ: the cosine vector `ξ⁰_t`.
    pub fn cosines(&self) -> Vec<f64> {
        self.phi.iter().map(|z| z.re).collect()
    }
}

pub type CosineMapFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type ClockMapFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// The map `G` from the clock state to the probing signal `ξ_t ∈ R^m`.
#[derive(Clone)]
pub enum ProbingMap {
    /// `ξ = ξ⁰` (m = K).
    Identity,
    /// `ξ = A ξ⁰`.
    Linear(DMatrix<f64>),
    /// `ξ = G_0(ξ⁰)` for a user map. Analyticity is a user assertion.
    Cosine { dim: usize, g0: CosineMapFn },
    /// A general map of the clock phases in turns. Used for signals such as
    /// filtered probes that are not functions of the cosines alone.
    Clock { dim: usize, g: ClockMapFn },
}

impl std::fmt::Debug for ProbingMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbingMap::Identity => write!(f, "Identity"),
            ProbingMap::Linear(a) => write!(f, "Linear({}x{})", a.nrows(), a.ncols()),
            ProbingMap::Cosine { dim, .. } => write!(f, "Cosine {{ dim: {dim} }}"),
            ProbingMap::Clock { dim, .. } => write!(f, "Clock {{ dim: {dim} }}"),
        }
    }
}

impl ProbingMap {
    pub fn scaled(scale: &[f64]) -> Self {
        ProbingMap::Linear(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(scale)))
    }

    /// Output dimension m for a basis with `k` frequencies.
    pub fn dim(&self, k: usize) -> usize {
        match self {
            ProbingMap::Identity => k,
            ProbingMap::Linear(a) => a.nrows(),
            ProbingMap::Cosine { dim, .. } | ProbingMap::Clock { dim, .. } => *dim,
        }
    }

    pub fn check(&self, basis: &FrequencyBasis) -> Result<()> {
        if let ProbingMap::Linear(a) = self {
            if a.ncols() != basis.len() {
                return Err(QsaError::Dimension(format!(
                    "linear probing map has {} columns for {} frequencies",
                    a.ncols(),
                    basis.len()
                )));
            }
        }
        Ok(())
    }

    /// Evaluate `G` given the clock phases in turns.
    pub fn eval_turns(&self, turns: &[f64], out: &mut [f64]) {
        match self {
            ProbingMap::Identity => {
                for (o, u) in out.iter_mut().zip(turns) {
                    *o = (TAU * u).cos();
                }
            }
            ProbingMap::Linear(a) => {
                for (r, o) in out.iter_mut().enumerate() {
                    *o = turns.iter().enumerate().map(|(c, u)| a[(r, c)] * (TAU * u).cos()).sum();
                }
            }
            ProbingMap::Cosine { g0, .. } => {
                let c: Vec<f64> = turns.iter().map(|u| (TAU * u).cos()).collect();
                out.copy_from_slice(&g0(&c));
            }
            ProbingMap::Clock { g, .. } => g(turns, out),
        }
    }
}

/// Clock state and probe value `ξ_t = G(Φ_t)` at time `t`.
pub fn probe_at(map: &ProbingMap, basis: &FrequencyBasis, t: f64) -> (ClockState, Vec<f64>) {
    let clock = ClockState::at(basis, t);
    let mut xi = vec![0.0; map.dim(basis.len())];
    map.eval_turns(&clock.turns, &mut xi);
    (clock, xi)
}

#[derive(Debug, Clone, Copy)]
pub struct ErgodicOptions {
    pub initial_horizon: f64,
    pub max_horizon: f64,
}

impl Default for ErgodicOptions {
    fn default() -> Self {
        ErgodicOptions { initial_horizon: 32.0, max_horizon: (1u64 << 20) as f64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicAverage {
    pub value: Vec<f64>,
    /// Final horizon T used.
    pub horizon: f64,
}

/// Long-run time average of `u(x, ξ_t)`.
///
/// The horizon doubles until successive averages agree to `tol` in the max
/// norm on two consecutive doublings, which guards against a chance
/// agreement of oscillating partial averages. Integrals use composite Simpson with at least 40 nodes per
/// period of the fastest probe.
pub fn ergodic_average<F>(u: F, x: &[f64], basis: &FrequencyBasis, map: &ProbingMap, tol: f64) -> Result<ErgodicAverage>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    ergodic_average_with(u, x, basis, map, tol, ErgodicOptions::default())
}

pub fn ergodic_average_with<F>(
    u: F,
    x: &[f64],
    basis: &FrequencyBasis,
    map: &ProbingMap,
    tol: f64,
    opts: ErgodicOptions,
) -> Result<ErgodicAverage>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    if !(tol > 0.0) {
        return Err(QsaError::InvalidInput(format!("ergodic tolerance must be positive, got {tol}")));
    }
    map.check(basis)?;
    let m = map.dim(basis.len());
    let mut turns = vec![0.0; basis.len()];
    let mut xi = vec![0.0; m];
    let mut sample = |t: f64| {
        basis.turns_into(t, &mut turns);
        map.eval_turns(&turns, &mut xi);
        u(x, &xi)
    };
    let max_step = 1.0 / (40.0 * basis.max_omega());

    let mut integral = simpson(&mut sample, 0.0, opts.initial_horizon, max_step);
    let mut horizon = opts.initial_horizon;
    let mut prev: Vec<f64> = integral.iter().map(|v| v / horizon).collect();
    let mut agreed = 0;
    loop {
        let next_horizon = 2.0 * horizon;
        if next_horizon > opts.max_horizon {
            return Err(QsaError::NonConvergent(format!(
                "ergodic average did not reach tolerance {tol} within horizon {}",
                opts.max_horizon
            )));
        }
        let seg = simpson(&mut sample, horizon, next_horizon, max_step);
        for (acc, s) in integral.iter_mut().zip(&seg) {
            *acc += s;
        }
        horizon = next_horizon;
        let cur: Vec<f64> = integral.iter().map(|v| v / horizon).collect();
        let diff = cur.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if diff < tol {
            agreed += 1;
            if agreed == 2 {
                return Ok(ErgodicAverage { value: cur, horizon });
            }
        } else {
            agreed = 0;
        }
        prev = cur;
    }
}

fn simpson<F: FnMut(f64) -> Vec<f64>>(f: &mut F, a: f64, b: f64, max_step: f64) -> Vec<f64> {
    let mut n = ((b - a) / max_step).ceil() as usize;
    if n % 2 == 1 {
        n += 1;
    }
    let n = n.max(2);
    let h = (b - a) / n as f64;
    let mut acc = f(a);
    let end = f(b);
    for (s, e) in acc.iter_mut().zip(&end) {
        *s += e;
    }
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        let v = f(a + i as f64 * h);
        for (s, vi) in acc.iter_mut().zip(&v) {
            *s += w * vi;
        }
    }
    acc.iter().map(|s| s * h / 3.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_single_pair() {
        let b = make_frequency_basis(&[(2, 1)], &[]).unwrap();
        assert!((b.omega()[0] - 0.693147).abs() < 1e-6);
        assert_eq!(b.omega()[0], 2f64.ln());
        assert_eq!(b.phases(), &[0.0]);
    }

    #[test]
    fn basis_duplicate_ratio() {
        let err = make_frequency_basis(&[(2, 1), (4, 2)], &[]).unwrap_err();
        assert_eq!(err, QsaError::DuplicateFrequency { first: 0, second: 1 });
    }

    #[test]
    fn basis_three_pairs() {
        let b = make_frequency_basis(&[(2, 1), (3, 1), (3, 2)], &[]).unwrap();
        let want = [0.693147, 1.098612, 0.405465];
        for (w, o) in want.iter().zip(b.omega()) {
            assert!((w - o).abs() < 1e-6);
        }
    }

    #[test]
    fn basis_rejects_bad_pairs() {
        assert_eq!(make_frequency_basis(&[(1, 2)], &[]).unwrap_err(), QsaError::InvalidPair { a: 1, b: 2 });
        assert_eq!(make_frequency_basis(&[(3, 3)], &[]).unwrap_err(), QsaError::InvalidPair { a: 3, b: 3 });
        assert_eq!(make_frequency_basis(&[(3, 0)], &[]).unwrap_err(), QsaError::InvalidPair { a: 3, b: 0 });
        assert!(make_frequency_basis(&[], &[]).is_err());
        assert!(make_frequency_basis(&[(2, 1)], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn dependence_examples() {
        let b = make_frequency_basis(&[(2, 1), (3, 1)], &[]).unwrap();
        assert!(rational_dependence(&b, &[0, 0]).unwrap());
        assert!(!rational_dependence(&b, &[1, -1]).unwrap());
        let b = make_frequency_basis(&[(2, 1), (4, 1)], &[]).unwrap();
        assert!(rational_dependence(&b, &[2, -1]).unwrap());
        assert!(rational_dependence(&b, &[-4, 2]).unwrap());
        assert!(!rational_dependence(&b, &[1, -1]).unwrap());
    }

    #[test]
    fn dependence_rejects_large_orders() {
        let b = default_basis(2).unwrap();
        assert!(rational_dependence(&b, &[65, 0]).is_err());
        assert!(rational_dependence(&b, &[64, -64]).is_ok());
        assert!(rational_dependence(&b, &[1]).is_err());
    }

    #[test]
    fn three_halves_is_dependent_on_two_and_three() {
        // ln(3/2) = ln 3 - ln 2, which is why (3, 2) is not in the default basis.
        let b = make_frequency_basis(&[(2, 1), (3, 1), (3, 2)], &[]).unwrap();
        assert!(rational_dependence(&b, &[1, -1, 1]).unwrap());
    }

    #[test]
    fn probe_examples() {
        let b = make_frequency_basis(&[(2, 1)], &[]).unwrap();
        let (_, xi) = probe_at(&ProbingMap::Identity, &b, 0.0);
        assert_eq!(xi, vec![1.0]);
        let (_, xi) = probe_at(&ProbingMap::Identity, &b, 1.0);
        assert!((xi[0] - (TAU * 2f64.ln()).cos()).abs() < 1e-15);
        assert!((xi[0] + 0.349668).abs() < 1e-6);
        let (_, xi) = probe_at(&ProbingMap::scaled(&[2.0]), &b, 0.0);
        assert_eq!(xi, vec![2.0]);
        let g0 = ProbingMap::Cosine { dim: 1, g0: Arc::new(|c: &[f64]| vec![2.0 * c[0]]) };
        let (_, xi) = probe_at(&g0, &b, 0.0);
        assert_eq!(xi, vec![2.0]);
    }

    #[test]
    fn clock_state_unit_modulus_and_recomputation() {
        let b = default_basis(4).unwrap().with_phases(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        for &t in &[0.0, 1.5, 1234.5678, 1.0e4] {
            let c = ClockState::at(&b, t);
            for (i, z) in c.phi.iter().enumerate() {
                assert!((z.norm() - 1.0).abs() < 1e-12);
                let direct = Complex::from_polar(1.0, TAU * (b.omega()[i] * t + b.phases()[i]));
                assert!((z - direct).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn ergodic_examples() {
        let b = make_frequency_basis(&[(2, 1)], &[]).unwrap();
        let tol = 1e-4;
        let sq = ergodic_average(|_, xi| vec![xi[0] * xi[0]], &[], &b, &ProbingMap::Identity, tol).unwrap();
        assert!((sq.value[0] - 0.5).abs() < 2.0 * tol);
        let lin = ergodic_average(|_, xi| vec![xi[0]], &[], &b, &ProbingMap::Identity, tol).unwrap();
        assert!(lin.value[0].abs() < 2.0 * tol);
    }

    #[test]
    fn ergodic_cross_product() {
        let b = default_basis(2).unwrap();
        let tol = 1e-4;
        let avg = ergodic_average(|_, xi| vec![xi[0] * xi[1]], &[], &b, &ProbingMap::Identity, tol).unwrap();
        // Oracle: midpoint rule on [0, 1e5].
        let n = 4_000_000usize;
        let h = 1.0e5 / n as f64;
        let (w1, w2) = (2f64.ln(), 3f64.ln());
        let brute: f64 = (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) * h;
                (TAU * w1 * t).cos() * (TAU * w2 * t).cos()
            })
            .sum::<f64>()
            * h
            / 1.0e5;
        assert!(brute.abs() < 1e-4);
        assert!((avg.value[0] - brute).abs() < 2.0 * tol);
    }

    #[test]
    fn ergodic_cap() {
        let b = default_basis(1).unwrap();
        let opts = ErgodicOptions { initial_horizon: 8.0, max_horizon: 64.0 };
        let r = ergodic_average_with(|_, xi| vec![xi[0] * xi[0]], &[], &b, &ProbingMap::Identity, 1e-12, opts);
        assert!(matches!(r, Err(QsaError::NonConvergent(_))));
    }
}
