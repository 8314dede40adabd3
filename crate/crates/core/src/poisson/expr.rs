//! A small expression language for coefficient functions of `x = (θ; λ)`.
//!
//! Grammar: numbers, `pi`, variables `theta_1..theta_d` and `lambda_1..lambda_d`,
//! binary `+ - * / ^`, unary minus, and the functions `sin`, `cos`, `exp`,
//! `ln` and `pow(a, b)`. Expressions differentiate symbolically, which keeps
//! every Jacobian used by the Poisson machinery exact.

use std::fmt;
use std::sync::Arc;

use crate::error::{QsaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Index into the stacked state `x = (θ; λ)`.
    Var(usize),
    Neg(Arc<Expr>),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    Pow(Arc<Expr>, Arc<Expr>),
    Sin(Arc<Expr>),
    Cos(Arc<Expr>),
    Exp(Arc<Expr>),
    Ln(Arc<Expr>),
}

use Expr::*;

impl Expr {
    pub fn zero() -> Expr {
        Const(0.0)
    }

    pub fn one() -> Expr {
        Const(1.0)
    }

    pub fn var(i: usize) -> Expr {
        Var(i)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Const(c) if *c == 0.0)
    }

    /// Constant with magnitude below `tol`.
    pub fn is_negligible(&self, tol: f64) -> bool {
        matches!(self, Const(c) if c.abs() < tol)
    }

    fn is_one(&self) -> bool {
        matches!(self, Const(c) if *c == 1.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Const(c) => *c,
            Var(i) => x[*i],
            Neg(a) => -a.eval(x),
            Add(a, b) => a.eval(x) + b.eval(x),
            Sub(a, b) => a.eval(x) - b.eval(x),
            Mul(a, b) => a.eval(x) * b.eval(x),
            Div(a, b) => a.eval(x) / b.eval(x),
            Pow(a, b) => a.eval(x).powf(b.eval(x)),
            Sin(a) => a.eval(x).sin(),
            Cos(a) => a.eval(x).cos(),
            Exp(a) => a.eval(x).exp(),
            Ln(a) => a.eval(x).ln(),
        }
    }

    /// Symbolic partial derivative with respect to `x[var]`.
    pub fn diff(&self, var: usize) -> Expr {
        match self {
            Const(_) => Expr::zero(),
            Var(i) => Const(if *i == var { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.diff(var)),
            Add(a, b) => add(a.diff(var), b.diff(var)),
            Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Mul(a, b) => add(mul((**a).clone(), b.diff(var)), mul(a.diff(var), (**b).clone())),
            Div(a, b) => {
                // (a' b - a b') / b^2
                let num = sub(mul(a.diff(var), (**b).clone()), mul((**a).clone(), b.diff(var)));
                div(num, mul((**b).clone(), (**b).clone()))
            }
            Pow(a, b) => {
                let da = a.diff(var);
                let db = b.diff(var);
                if db.is_zero() {
                    // b a^(b-1) a'
                    let exp = sub((**b).clone(), Expr::one());
                    mul(mul((**b).clone(), pow((**a).clone(), exp)), da)
                } else {
                    // a^b (b' ln a + b a' / a)
                    let inner = add(mul(db, ln((**a).clone())), div(mul((**b).clone(), da), (**a).clone()));
                    mul(self.clone(), inner)
                }
            }
            Sin(a) => mul(cos((**a).clone()), a.diff(var)),
            Cos(a) => neg(mul(sin((**a).clone()), a.diff(var))),
            Exp(a) => mul(self.clone(), a.diff(var)),
            Ln(a) => div(a.diff(var), (**a).clone()),
        }
    }

    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Const(_) => None,
            Var(i) => Some(*i),
            Neg(a) | Sin(a) | Cos(a) | Exp(a) | Ln(a) => a.max_var(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => match (a.max_var(), b.max_var()) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
        }
    }

    /// Render with named variables; `d_slow` splits θ from λ.
    pub fn render(&self, d_slow: usize) -> String {
        Rendered { e: self, d_slow }.to_string()
    }
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Const(c) => Const(-c),
        Neg(inner) => (*inner).clone(),
        other => Neg(Arc::new(other)),
    }
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Const(x), Const(y)) => Const(x + y),
        _ if a.is_zero() => b,
        _ if b.is_zero() => a,
        (_, Neg(inner)) => sub(a.clone(), (**inner).clone()),
        _ => Add(Arc::new(a), Arc::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Const(x), Const(y)) => Const(x - y),
        _ if b.is_zero() => a,
        _ if a == b && a.max_var().is_some() => Expr::zero(),
        _ if a.is_zero() => neg(b),
        _ => Sub(Arc::new(a), Arc::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Const(x), Const(y)) => Const(x * y),
        _ if a.is_zero() || b.is_zero() => Expr::zero(),
        _ if a.is_one() => b,
        _ if b.is_one() => a,
        (_, Const(_)) => mul(b, a),
        (Neg(p), _) => neg(mul((**p).clone(), b)),
        (_, Neg(q)) => neg(mul(a.clone(), (**q).clone())),
        _ => Mul(Arc::new(a), Arc::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Const(x), Const(y)) => Const(x / y),
        _ if a.is_zero() => Expr::zero(),
        _ if b.is_one() => a,
        _ => Div(Arc::new(a), Arc::new(b)),
    }
}

pub fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Const(x), Const(y)) => Const(x.powf(*y)),
        _ if b.is_zero() => Expr::one(),
        _ if b.is_one() => a,
        _ => Pow(Arc::new(a), Arc::new(b)),
    }
}

pub fn sin(a: Expr) -> Expr {
    match a {
        Const(c) => Const(c.sin()),
        other => Sin(Arc::new(other)),
    }
}

pub fn cos(a: Expr) -> Expr {
    match a {
        Const(c) => Const(c.cos()),
        other => Cos(Arc::new(other)),
    }
}

pub fn exp(a: Expr) -> Expr {
    match a {
        Const(c) => Const(c.exp()),
        other => Exp(Arc::new(other)),
    }
}

pub fn ln(a: Expr) -> Expr {
    match a {
        Const(c) => Const(c.ln()),
        other => Ln(Arc::new(other)),
    }
}

struct Rendered<'a> {
    e: &'a Expr,
    d_slow: usize,
}

impl<'a> fmt::Display for Rendered<'a> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = |e: &'a Expr| Rendered { e, d_slow: self.d_slow };
        match self.e {
            // {:?} prints the shortest string that parses back to the same bits.
            Const(c) if c.is_nan() => write!(f, "(0.0 / 0.0)"),
            Const(c) if c.is_infinite() => write!(f, "({:?} / 0.0)", c.signum()),
            Const(c) => write!(f, "{c:?}"),
            Var(i) if *i < self.d_slow => write!(f, "theta_{}", i + 1),
            Var(i) => write!(f, "lambda_{}", i - self.d_slow + 1),
            Neg(a) => write!(f, "(-{})", r(a)),
            Add(a, b) => write!(f, "({} + {})", r(a), r(b)),
            Sub(a, b) => write!(f, "({} - {})", r(a), r(b)),
            Mul(a, b) => write!(f, "({} * {})", r(a), r(b)),
            Div(a, b) => write!(f, "({} / {})", r(a), r(b)),
            Pow(a, b) => write!(f, "pow({}, {})", r(a), r(b)),
            Sin(a) => write!(f, "sin({})", r(a)),
            Cos(a) => write!(f, "cos({})", r(a)),
            Exp(a) => write!(f, "exp({})", r(a)),
            Ln(a) => write!(f, "ln({})", r(a)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(s: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse::<f64>().map_err(|_| QsaError::Expr(format!("bad number '{text}'")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^(),".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(QsaError::Expr(format!("unexpected character '{c}'")));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    d_slow: usize,
    d_fast: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat_op(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: char) -> Result<()> {
        if self.eat_op(op) {
            Ok(())
        } else {
            Err(QsaError::Expr(format!("expected '{op}' at token {}", self.pos)))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_op('+') {
                lhs = add(lhs, self.term()?);
            } else if self.eat_op('-') {
                lhs = sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_op('*') {
                lhs = mul(lhs, self.unary()?);
            } else if self.eat_op('/') {
                lhs = div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat_op('-') {
            return Ok(neg(self.unary()?));
        }
        if self.eat_op('+') {
            return self.unary();
        }
        let base = self.atom()?;
        if self.eat_op('^') {
            let e = self.unary()?;
            return Ok(pow(base, e));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Const(v))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_op(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.eat_op('(') {
                    let a = self.expr()?;
                    let out = match name.as_str() {
                        "sin" => sin(a),
                        "cos" => cos(a),
                        "exp" => exp(a),
                        "ln" => ln(a),
                        "pow" => {
                            self.expect_op(',')?;
                            let b = self.expr()?;
                            pow(a, b)
                        }
                        other => return Err(QsaError::Expr(format!("unknown function '{other}'"))),
                    };
                    self.expect_op(')')?;
                    return Ok(out);
                }
                self.variable(&name)
            }
            other => Err(QsaError::Expr(format!("unexpected token {other:?}"))),
        }
    }

    fn variable(&self, name: &str) -> Result<Expr> {
        if name == "pi" {
            return Ok(Const(std::f64::consts::PI));
        }
        let (offset, dim, idx) = if let Some(rest) = name.strip_prefix("theta_") {
            (0, self.d_slow, rest)
        } else if let Some(rest) = name.strip_prefix("lambda_") {
            (self.d_slow, self.d_fast, rest)
        } else {
            return Err(QsaError::Expr(format!("unknown variable '{name}'")));
        };
        let i: usize = idx.parse().map_err(|_| QsaError::Expr(format!("bad variable index in '{name}'")))?;
        if i == 0 || i > dim {
            return Err(QsaError::Expr(format!("variable '{name}' out of range 1..={dim}")));
        }
        Ok(Var(offset + i - 1))
    }
}

/// Parse an expression over `theta_1..theta_{d_slow}` and `lambda_1..lambda_{d_fast}`.
pub fn parse(s: &str, d_slow: usize, d_fast: usize) -> Result<Expr> {
    let toks = tokenize(s)?;
    if toks.is_empty() {
        return Err(QsaError::Expr("empty expression".into()));
    }
    let mut p = Parser { toks, pos: 0, d_slow, d_fast };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(QsaError::Expr(format!("trailing input after token {}", p.pos)));
    }
    Ok(e)
}
