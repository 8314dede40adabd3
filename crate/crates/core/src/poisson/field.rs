//! Trigonometric polynomials over the clock torus with `x`-dependent
//! coefficients.
//!
//! A [`FourierField`] stores `c_k(x)` for finitely many `k ∈ Z^K` and evaluates
//! `Σ_k c_k(x) exp(2πj⟨k, ωt + φ⟩)`. Coefficients are written in the frame of
//! the clock phases, so the phase offsets enter only at evaluation time.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use super::expr::{self, Expr};
use crate::error::{QsaError, Result};
use crate::probing::FrequencyBasis;

pub type C64 = Complex<f64>;

/// Symbolic coefficients with magnitude below this are dropped.
pub const PRUNE_TOL: f64 = 1e-14;

/// A complex scalar written as a pair of real expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct CExpr {
    pub re: Expr,
    pub im: Expr,
}

impl CExpr {
    pub fn real(re: Expr) -> Self {
        CExpr { re, im: Expr::zero() }
    }

    pub fn constant(z: C64) -> Self {
        CExpr { re: Expr::Const(z.re), im: Expr::Const(z.im) }
    }

    pub fn eval(&self, x: &[f64]) -> C64 {
        C64::new(self.re.eval(x), self.im.eval(x))
    }

    pub fn add(&self, o: &CExpr) -> CExpr {
        CExpr { re: expr::add(self.re.clone(), o.re.clone()), im: expr::add(self.im.clone(), o.im.clone()) }
    }

    pub fn mul(&self, o: &CExpr) -> CExpr {
        let re = expr::sub(expr::mul(self.re.clone(), o.re.clone()), expr::mul(self.im.clone(), o.im.clone()));
        let im = expr::add(expr::mul(self.re.clone(), o.im.clone()), expr::mul(self.im.clone(), o.re.clone()));
        CExpr { re, im }
    }

    pub fn scale(&self, z: C64) -> CExpr {
        self.mul(&CExpr::constant(z))
    }

    pub fn diff(&self, var: usize) -> CExpr {
        CExpr { re: self.re.diff(var), im: self.im.diff(var) }
    }

    fn is_negligible(&self) -> bool {
        self.re.is_negligible(PRUNE_TOL) && self.im.is_negligible(PRUNE_TOL)
    }
}

pub type CoefFn = Arc<dyn Fn(&[f64]) -> Vec<C64> + Send + Sync>;
/// Jacobian rows indexed `[output][state variable]`.
pub type JacFn = Arc<dyn Fn(&[f64]) -> Vec<Vec<C64>> + Send + Sync>;

#[derive(Clone)]
pub enum JacobianSource {
    Analytic(JacFn),
    /// Central differences with step `cbrt(ε)·max(1, |x_i|)`.
    FiniteDifference,
    Unavailable,
}

/// A closure-backed coefficient, for fields that have no expression form.
#[derive(Clone)]
pub struct NumericCoef {
    pub dim: usize,
    pub value: CoefFn,
    pub jacobian: JacobianSource,
}

#[derive(Clone)]
pub enum Coefficient {
    Symbolic(Vec<CExpr>),
    Numeric(NumericCoef),
}

impl std::fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coefficient::Symbolic(v) => f.debug_tuple("Symbolic").field(v).finish(),
            Coefficient::Numeric(n) => write!(f, "Numeric {{ dim: {} }}", n.dim),
        }
    }
}

pub fn fd_jacobian(f: &dyn Fn(&[f64]) -> Vec<C64>, x: &[f64]) -> Vec<Vec<C64>> {
    let step_scale = f64::EPSILON.cbrt();
    let mut cols = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = step_scale * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    let p = cols.first().map_or(0, |c| c.len());
    (0..p).map(|r| cols.iter().map(|c| c[r]).collect()).collect()
}

impl Coefficient {
    pub fn real_exprs(exprs: Vec<Expr>) -> Self {
        Coefficient::Symbolic(exprs.into_iter().map(CExpr::real).collect())
    }

    pub fn constant(values: &[C64]) -> Self {
        Coefficient::Symbolic(values.iter().map(|&z| CExpr::constant(z)).collect())
    }

    pub fn numeric(dim: usize, value: CoefFn, jacobian: JacobianSource) -> Self {
        Coefficient::Numeric(NumericCoef { dim, value, jacobian })
    }

    pub fn dim(&self) -> usize {
        match self {
            Coefficient::Symbolic(v) => v.len(),
            Coefficient::Numeric(n) => n.dim,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<C64> {
        match self {
            Coefficient::Symbolic(v) => v.iter().map(|c| c.eval(x)).collect(),
            Coefficient::Numeric(n) => (n.value)(x),
        }
    }

    pub fn has_jacobian(&self) -> bool {
        !matches!(self, Coefficient::Numeric(NumericCoef { jacobian: JacobianSource::Unavailable, .. }))
    }

    /// Jacobian `[output][variable]`, or `None` when unavailable.
    pub fn jacobian(&self, x: &[f64]) -> Option<Vec<Vec<C64>>> {
        match self {
            Coefficient::Symbolic(v) => {
                Some(v.iter().map(|c| (0..x.len()).map(|j| c.diff(j).eval(x)).collect()).collect())
            }
            Coefficient::Numeric(n) => match &n.jacobian {
                JacobianSource::Analytic(j) => Some(j(x)),
                JacobianSource::FiniteDifference => Some(fd_jacobian(&*n.value, x)),
                JacobianSource::Unavailable => None,
            },
        }
    }

    fn is_negligible(&self) -> bool {
        match self {
            Coefficient::Symbolic(v) => v.iter().all(CExpr::is_negligible),
            Coefficient::Numeric(_) => false,
        }
    }

    /// Closure form; symbolic coefficients keep an exact Jacobian.
    pub fn to_numeric(&self) -> NumericCoef {
        match self {
            Coefficient::Numeric(n) => n.clone(),
            Coefficient::Symbolic(v) => {
                let vals = v.clone();
                let value: CoefFn = Arc::new(move |x: &[f64]| vals.iter().map(|c| c.eval(x)).collect());
                let vj = v.clone();
                let jac: JacFn = Arc::new(move |x: &[f64]| {
                    vj.iter().map(|c| (0..x.len()).map(|j| c.diff(j).eval(x)).collect()).collect()
                });
                NumericCoef { dim: v.len(), value, jacobian: JacobianSource::Analytic(jac) }
            }
        }
    }

    pub fn scale(&self, z: C64) -> Coefficient {
        match self {
            Coefficient::Symbolic(v) => Coefficient::Symbolic(v.iter().map(|c| c.scale(z)).collect()),
            Coefficient::Numeric(n) => {
                let f = n.value.clone();
                let value: CoefFn = Arc::new(move |x: &[f64]| f(x).into_iter().map(|c| c * z).collect());
                let jacobian = match &n.jacobian {
                    JacobianSource::Analytic(j) => {
                        let j = j.clone();
                        JacobianSource::Analytic(Arc::new(move |x: &[f64]| {
                            j(x).into_iter().map(|row| row.into_iter().map(|c| c * z).collect()).collect()
                        }))
                    }
                    other => other.clone(),
                };
                Coefficient::numeric(n.dim, value, jacobian)
            }
        }
    }

    pub fn add(&self, other: &Coefficient) -> Coefficient {
        match (self, other) {
            (Coefficient::Symbolic(a), Coefficient::Symbolic(b)) => {
                Coefficient::Symbolic(a.iter().zip(b).map(|(x, y)| x.add(y)).collect())
            }
            _ => {
                let (a, b) = (self.to_numeric(), other.to_numeric());
                let (fa, fb) = (a.value.clone(), b.value.clone());
                let value: CoefFn =
                    Arc::new(move |x: &[f64]| fa(x).into_iter().zip(fb(x)).map(|(p, q)| p + q).collect());
                let jacobian = match (&a.jacobian, &b.jacobian) {
                    (JacobianSource::Analytic(ja), JacobianSource::Analytic(jb)) => {
                        let (ja, jb) = (ja.clone(), jb.clone());
                        JacobianSource::Analytic(Arc::new(move |x: &[f64]| {
                            ja(x)
                                .into_iter()
                                .zip(jb(x))
                                .map(|(r, s)| r.into_iter().zip(s).map(|(p, q)| p + q).collect())
                                .collect()
                        }))
                    }
                    (JacobianSource::Unavailable, _) | (_, JacobianSource::Unavailable) => JacobianSource::Unavailable,
                    _ => JacobianSource::FiniteDifference,
                };
                Coefficient::numeric(a.dim, value, jacobian)
            }
        }
    }

    fn select(&self, rows: Range<usize>) -> Coefficient {
        match self {
            Coefficient::Symbolic(v) => Coefficient::Symbolic(v[rows].to_vec()),
            Coefficient::Numeric(n) => {
                let f = n.value.clone();
                let r = rows.clone();
                let value: CoefFn = Arc::new(move |x: &[f64]| f(x)[r.clone()].to_vec());
                let jacobian = match &n.jacobian {
                    JacobianSource::Analytic(j) => {
                        let j = j.clone();
                        let r = rows.clone();
                        JacobianSource::Analytic(Arc::new(move |x: &[f64]| j(x)[r.clone()].to_vec()))
                    }
                    other => other.clone(),
                };
                Coefficient::numeric(rows.len(), value, jacobian)
            }
        }
    }

    /// `∂_{slot} c · v` where `slot` selects state variables.
    fn directional(&self, v: &Coefficient, slot: Range<usize>) -> Option<Coefficient> {
        match (self, v) {
            (Coefficient::Symbolic(c), Coefficient::Symbolic(dir)) => Some(Coefficient::Symbolic(
                c.iter()
                    .map(|ci| {
                        slot.clone()
                            .zip(dir)
                            .fold(CExpr::real(Expr::zero()), |acc, (var, vj)| acc.add(&ci.diff(var).mul(vj)))
                    })
                    .collect(),
            )),
            _ => {
                if !self.has_jacobian() {
                    return None;
                }
                let c = self.clone();
                let dir = v.clone();
                let slot = slot.clone();
                let value: CoefFn = Arc::new(move |x: &[f64]| {
                    let jac = c.jacobian(x).expect("checked above");
                    let vx = dir.eval(x);
                    jac.iter().map(|row| slot.clone().zip(&vx).map(|(var, vj)| row[var] * vj).sum()).collect()
                });
                Some(Coefficient::numeric(self.dim(), value, JacobianSource::FiniteDifference))
            }
        }
    }
}

/// Which block of `x = (θ; λ)` a directional derivative differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// `∂_θ`, the operator `D^g` when the direction is the slow field.
    Slow,
    /// `∂_λ`, the operator `D^h` when the direction is the fast field.
    Fast,
}

#[derive(Clone, Debug)]
pub struct FourierField {
    n_freq: usize,
    d_slow: usize,
    d_fast: usize,
    dim_out: usize,
    terms: BTreeMap<Vec<i32>, Coefficient>,
}

impl FourierField {
    pub fn zero(n_freq: usize, d_slow: usize, d_fast: usize, dim_out: usize) -> Self {
        FourierField { n_freq, d_slow, d_fast, dim_out, terms: BTreeMap::new() }
    }

    pub fn n_freq(&self) -> usize {
        self.n_freq
    }

    pub fn d_slow(&self) -> usize {
        self.d_slow
    }

    pub fn d_fast(&self) -> usize {
        self.d_fast
    }

    pub fn dim_state(&self) -> usize {
        self.d_slow + self.d_fast
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn terms(&self) -> &BTreeMap<Vec<i32>, Coefficient> {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, k: &[i32]) -> Option<&Coefficient> {
        self.terms.get(k)
    }

    fn zero_key(&self) -> Vec<i32> {
        vec![0; self.n_freq]
    }

    /// Add `coef` to the coefficient at `k`.
    pub fn insert(&mut self, k: Vec<i32>, coef: Coefficient) -> Result<()> {
        if k.len() != self.n_freq {
            return Err(QsaError::Dimension(format!("k has {} entries, field has {} frequencies", k.len(), self.n_freq)));
        }
        if coef.dim() != self.dim_out {
            return Err(QsaError::Dimension(format!(
                "coefficient has dimension {}, field has {}",
                coef.dim(),
                self.dim_out
            )));
        }
        self.insert_unchecked(k, coef);
        Ok(())
    }

    fn insert_unchecked(&mut self, k: Vec<i32>, coef: Coefficient) {
        let merged = match self.terms.remove(&k) {
            Some(prev) => prev.add(&coef),
            None => coef,
        };
        if !merged.is_negligible() {
            self.terms.insert(k, merged);
        }
    }

    /// Add `amplitude(x) · cos(2π·turn_i)` for each output, split over `±e_i`.
    pub fn add_cosine(&mut self, freq: usize, amplitude: Vec<Expr>) -> Result<()> {
        let half: Vec<Expr> = amplitude.into_iter().map(|e| expr::mul(Expr::Const(0.5), e)).collect();
        let mut k = self.zero_key();
        k[freq] = 1;
        self.insert(k.clone(), Coefficient::real_exprs(half.clone()))?;
        k[freq] = -1;
        self.insert(k, Coefficient::real_exprs(half))
    }

    /// Add a mean (k = 0) term.
    pub fn add_mean(&mut self, value: Vec<Expr>) -> Result<()> {
        let k = self.zero_key();
        self.insert(k, Coefficient::real_exprs(value))
    }

    pub fn eval_complex(&self, x: &[f64], turns: &[f64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.dim_out];
        for (k, c) in &self.terms {
            let angle: f64 = k.iter().zip(turns).map(|(&ki, u)| ki as f64 * u).sum();
            let phase = C64::from_polar(1.0, TAU * angle.rem_euclid(1.0));
            for (o, v) in out.iter_mut().zip(c.eval(x)) {
                *o += v * phase;
            }
        }
        out
    }

    /// Real value at state `x` and clock phases `turns` (from [`FrequencyBasis::turns`]).
    pub fn eval(&self, x: &[f64], turns: &[f64]) -> Vec<f64> {
        self.eval_complex(x, turns).into_iter().map(|z| z.re).collect()
    }

    pub fn eval_at(&self, x: &[f64], basis: &FrequencyBasis, t: f64) -> Vec<f64> {
        self.eval(x, &basis.turns(t))
    }

    /// The mean `ū(x)`, the k = 0 coefficient.
    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        match self.terms.get(&self.zero_key()) {
            Some(c) => c.eval(x).into_iter().map(|z| z.re).collect(),
            None => vec![0.0; self.dim_out],
        }
    }

    /// Max deviation from `c_{-k} = conj(c_k)` over the sample points.
    pub fn reality_defect(&self, points: &[Vec<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, c) in &self.terms {
            let negk: Vec<i32> = k.iter().map(|v| -v).collect();
            for x in points {
                let a = c.eval(x);
                let b = match self.terms.get(&negk) {
                    Some(cm) => cm.eval(x),
                    None => vec![C64::new(0.0, 0.0); self.dim_out],
                };
                for (p, q) in a.iter().zip(&b) {
                    worst = worst.max((p - q.conj()).norm());
                }
            }
        }
        worst
    }

    pub fn map_coefficients<F: Fn(&[i32], &Coefficient) -> Coefficient>(&self, f: F) -> FourierField {
        let mut out = FourierField::zero(self.n_freq, self.d_slow, self.d_fast, self.dim_out);
        for (k, c) in &self.terms {
            out.insert_unchecked(k.clone(), f(k, c));
        }
        out
    }

    pub fn scale(&self, s: f64) -> FourierField {
        self.map_coefficients(|_, c| c.scale(C64::new(s, 0.0)))
    }

    pub fn add(&self, other: &FourierField) -> Result<FourierField> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (k, c) in &other.terms {
            out.insert_unchecked(k.clone(), c.clone());
        }
        Ok(out)
    }

    pub fn sub(&self, other: &FourierField) -> Result<FourierField> {
        self.add(&other.scale(-1.0))
    }

    fn check_compatible(&self, other: &FourierField) -> Result<()> {
        if self.n_freq != other.n_freq
            || self.d_slow != other.d_slow
            || self.d_fast != other.d_fast
            || self.dim_out != other.dim_out
        {
            return Err(QsaError::Dimension("incompatible Fourier fields".into()));
        }
        Ok(())
    }

    /// Keep outputs `rows`.
    pub fn select(&self, rows: Range<usize>) -> Result<FourierField> {
        if rows.end > self.dim_out || rows.start >= rows.end {
            return Err(QsaError::Dimension(format!("row range {rows:?} out of 0..{}", self.dim_out)));
        }
        let mut out = FourierField::zero(self.n_freq, self.d_slow, self.d_fast, rows.len());
        for (k, c) in &self.terms {
            out.insert_unchecked(k.clone(), c.select(rows.clone()));
        }
        Ok(out)
    }

    /// Stack outputs of `self` above those of `lower`.
    pub fn stack(&self, lower: &FourierField) -> Result<FourierField> {
        if self.n_freq != lower.n_freq || self.d_slow != lower.d_slow || self.d_fast != lower.d_fast {
            return Err(QsaError::Dimension("cannot stack fields over different spaces".into()));
        }
        let mut out = FourierField::zero(self.n_freq, self.d_slow, self.d_fast, self.dim_out + lower.dim_out);
        let keys: std::collections::BTreeSet<&Vec<i32>> = self.terms.keys().chain(lower.terms.keys()).collect();
        for k in keys {
            let top = self.terms.get(k);
            let bot = lower.terms.get(k);
            let coef = match (top, bot) {
                (Some(Coefficient::Symbolic(a)), Some(Coefficient::Symbolic(b))) => {
                    Coefficient::Symbolic(a.iter().chain(b).cloned().collect())
                }
                (Some(Coefficient::Symbolic(a)), None) => Coefficient::Symbolic(
                    a.iter().cloned().chain((0..lower.dim_out).map(|_| CExpr::real(Expr::zero()))).collect(),
                ),
                (None, Some(Coefficient::Symbolic(b))) => Coefficient::Symbolic(
                    (0..self.dim_out).map(|_| CExpr::real(Expr::zero())).chain(b.iter().cloned()).collect(),
                ),
                _ => stack_numeric(top, bot, self.dim_out, lower.dim_out),
            };
            out.insert_unchecked(k.clone(), coef);
        }
        Ok(out)
    }

    /// The field with its k = 0 term removed: `ũ = u − ū`.
    pub fn zero_mean_part(&self) -> FourierField {
        let mut out = self.clone();
        out.terms.remove(&self.zero_key());
        out
    }

    /// Multiply each coefficient by `2πj⟨k, ω⟩`: the partial time derivative
    /// at fixed `x`.
    pub fn time_derivative(&self, basis: &FrequencyBasis) -> Result<FourierField> {
        self.check_basis(basis)?;
        Ok(self.map_coefficients(|k, c| c.scale(C64::new(0.0, TAU * basis.dot_omega(k)))))
    }

    pub(crate) fn check_basis(&self, basis: &FrequencyBasis) -> Result<()> {
        if basis.len() != self.n_freq {
            return Err(QsaError::Dimension(format!(
                "field has {} frequencies, basis has {}",
                self.n_freq,
                basis.len()
            )));
        }
        Ok(())
    }

    /// `∂_slot u · v`, where `v` has one output per variable of the slot.
    pub fn directional_derivative(&self, v: &FourierField, slot: Slot) -> Result<FourierField> {
        let range = match slot {
            Slot::Slow => 0..self.d_slow,
            Slot::Fast => self.d_slow..self.d_slow + self.d_fast,
        };
        if v.dim_out != range.len() || v.n_freq != self.n_freq || v.dim_state() != self.dim_state() {
            return Err(QsaError::Dimension(format!(
                "direction field has {} outputs, slot needs {}",
                v.dim_out,
                range.len()
            )));
        }
        let mut out = FourierField::zero(self.n_freq, self.d_slow, self.d_fast, self.dim_out);
        for (k1, c1) in &self.terms {
            for (k2, c2) in &v.terms {
                let key: Vec<i32> = k1.iter().zip(k2).map(|(a, b)| a + b).collect();
                let coef = c1.directional(c2, range.clone()).ok_or(QsaError::MissingJacobian { k: k1.clone() })?;
                out.insert_unchecked(key, coef);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for (k, c) in &self.terms {
            let Coefficient::Symbolic(v) = c else {
                return Err(QsaError::Unsupported("closure coefficients cannot be serialized".into()));
            };
            let enc = |e: &Expr| match e.as_const() {
                Some(c) if c.is_finite() => Ok(JsonValue::Number(c)),
                Some(c) => Err(QsaError::Unsupported(format!("non-finite constant {c}"))),
                None => Ok(JsonValue::Text(e.render(self.d_slow))),
            };
            terms.push(TermDoc {
                k: k.clone(),
                re: JsonList::Many(v.iter().map(|c| enc(&c.re)).collect::<Result<_>>()?),
                im: Some(JsonList::Many(v.iter().map(|c| enc(&c.im)).collect::<Result<_>>()?)),
            });
        }
        let doc = FieldDoc {
            n_freq: self.n_freq,
            d_slow: self.d_slow,
            d_fast: self.d_fast,
            dim_out: self.dim_out,
            terms,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| QsaError::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<FourierField> {
        let doc: FieldDoc = serde_json::from_str(text).map_err(|e| QsaError::InvalidInput(e.to_string()))?;
        FourierField::from_doc(&doc)
    }

    pub fn from_json_value(value: &serde_json::Value) -> Result<FourierField> {
        let doc: FieldDoc = serde_json::from_value(value.clone()).map_err(|e| QsaError::InvalidInput(e.to_string()))?;
        FourierField::from_doc(&doc)
    }

    fn from_doc(doc: &FieldDoc) -> Result<FourierField> {
        let mut field = FourierField::zero(doc.n_freq, doc.d_slow, doc.d_fast, doc.dim_out);
        for t in &doc.terms {
            let dec = |v: &JsonValue| match v {
                JsonValue::Number(c) => Ok(Expr::Const(*c)),
                JsonValue::Text(s) => expr::parse(s, doc.d_slow, doc.d_fast),
            };
            let re: Vec<Expr> = t.re.items().into_iter().map(dec).collect::<Result<_>>()?;
            let im: Vec<Expr> = match &t.im {
                Some(list) => list.items().into_iter().map(dec).collect::<Result<_>>()?,
                None => vec![Expr::zero(); re.len()],
            };
            if re.len() != im.len() {
                return Err(QsaError::Dimension(format!("term {:?}: re and im lengths differ", t.k)));
            }
            let coef = Coefficient::Symbolic(re.into_iter().zip(im).map(|(re, im)| CExpr { re, im }).collect());
            field.insert(t.k.clone(), coef)?;
        }
        Ok(field)
    }
}

fn stack_numeric(top: Option<&Coefficient>, bot: Option<&Coefficient>, p_top: usize, p_bot: usize) -> Coefficient {
    let zero = |p: usize| Coefficient::constant(&vec![C64::new(0.0, 0.0); p]);
    let a = top.cloned().unwrap_or_else(|| zero(p_top)).to_numeric();
    let b = bot.cloned().unwrap_or_else(|| zero(p_bot)).to_numeric();
    let (fa, fb) = (a.value.clone(), b.value.clone());
    let value: CoefFn = Arc::new(move |x: &[f64]| {
        let mut v = fa(x);
        v.extend(fb(x));
        v
    });
    let jacobian = match (&a.jacobian, &b.jacobian) {
        (JacobianSource::Analytic(ja), JacobianSource::Analytic(jb)) => {
            let (ja, jb) = (ja.clone(), jb.clone());
            JacobianSource::Analytic(Arc::new(move |x: &[f64]| {
                let mut j = ja(x);
                j.extend(jb(x));
                j
            }))
        }
        (JacobianSource::Unavailable, _) | (_, JacobianSource::Unavailable) => JacobianSource::Unavailable,
        _ => JacobianSource::FiniteDifference,
    };
    Coefficient::numeric(p_top + p_bot, value, jacobian)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum JsonValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum JsonList {
    Many(Vec<JsonValue>),
    One(JsonValue),
}

impl JsonList {
    fn items(&self) -> Vec<&JsonValue> {
        match self {
            JsonList::Many(v) => v.iter().collect(),
            JsonList::One(v) => vec![v],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TermDoc {
    k: Vec<i32>,
    re: JsonList,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    im: Option<JsonList>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldDoc {
    n_freq: usize,
    d_slow: usize,
    d_fast: usize,
    dim_out: usize,
    terms: Vec<TermDoc>,
}
