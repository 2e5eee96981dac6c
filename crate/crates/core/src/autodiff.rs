//! Scalar reverse-mode differentiation.
//!
//! Model code is written once against the [`Real`] trait and evaluated either
//! with plain `f64` or with [`Var`], which records every operation on a
//! [`Tape`]. A tape is rebuilt for every forward pass, so data-dependent
//! branches (constraint clips, clamps) are differentiated exactly as taken.
//!
//! Kinks (`relu`, `abs`, `sign`, `max`, `min` at ties) use a zero
//! subgradient. Memory is one node plus its edges per recorded operation, so
//! an unrolled simulation costs O(timesteps x ops-per-step); a 15,706-step
//! run at ~60 ops/step is on the order of a million nodes (~40 MB).

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Arithmetic shared by `f64` and taped variables.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A value that carries no derivative.
    fn constant(v: f64) -> Self;
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn relu(self) -> Self;
    fn abs(self) -> Self;
    fn sign(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    /// `c - self`
    fn rsub(self, c: f64) -> Self;

    fn sum(xs: &[Self]) -> Self;
    /// `sum_i w_i * x_i`
    fn lincomb(xs: &[Self], ws: &[f64]) -> Self;
    /// `sum_i x_i^2`
    fn sum_sq(xs: &[Self]) -> Self;

    fn softplus(self) -> Self {
        let v = self.value();
        if v > 30.0 {
            self
        } else if v < -30.0 {
            self.exp()
        } else {
            (self.exp() + 1.0).ln()
        }
    }
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign_f64(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Real for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sign(self) -> Self {
        sign_f64(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
    fn rsub(self, c: f64) -> Self {
        c - self
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn lincomb(xs: &[Self], ws: &[f64]) -> Self {
        xs.iter().zip(ws).map(|(x, w)| x * w).sum()
    }
    fn sum_sq(xs: &[Self]) -> Self {
        xs.iter().map(|x| x * x).sum()
    }
}

/// Operation recorded for a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Abs,
    Sign,
    Sqrt,
    Power,
    Max,
    Min,
    Sum,
    LinComb,
    SumSq,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    parent: u32,
    partial: f64,
}

#[derive(Debug, Default)]
struct TapeInner {
    values: Vec<f64>,
    ops: Vec<OpKind>,
    // Edge range of node i is starts[i]..starts[i + 1] (or ..edges.len()).
    starts: Vec<u32>,
    edges: Vec<Edge>,
    min_kink: f64,
}

/// Append-only record of one forward computation.
///
/// Parents always precede children, so a single reverse sweep yields all
/// adjoints.
#[derive(Debug)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(0)
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                values: Vec::with_capacity(nodes),
                ops: Vec::with_capacity(nodes),
                starts: Vec::with_capacity(nodes),
                edges: Vec::with_capacity(nodes * 2),
                min_kink: f64::INFINITY,
            }),
        }
    }

    /// Drop all nodes, keeping allocations.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.values.clear();
        inner.ops.clear();
        inner.starts.clear();
        inner.edges.clear();
        inner.min_kink = f64::INFINITY;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest distance to a kink seen by `relu`, `abs`, `sign`, `max` or `min`.
    pub fn min_kink_distance(&self) -> f64 {
        self.inner.borrow().min_kink
    }

    pub fn input(&self, v: f64) -> Var<'_> {
        self.push(OpKind::Input, v, std::iter::empty())
    }

    pub fn inputs(&self, vs: &[f64]) -> Vec<Var<'_>> {
        vs.iter().map(|&v| self.input(v)).collect()
    }

    fn note_kink(&self, distance: f64) {
        let mut inner = self.inner.borrow_mut();
        if distance < inner.min_kink {
            inner.min_kink = distance;
        }
    }

    fn push(&self, op: OpKind, val: f64, edges: impl Iterator<Item = (u32, f64)>) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len() as u32;
        let start = inner.edges.len() as u32;
        inner.starts.push(start);
        inner.values.push(val);
        inner.ops.push(op);
        inner.edges.extend(edges.map(|(parent, partial)| Edge { parent, partial }));
        Var {
            tape: Some(self),
            idx,
            val,
        }
    }

    /// Index and kind of the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, OpKind)> {
        let inner = self.inner.borrow();
        inner
            .values
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i, inner.ops[i]))
    }

    /// Adjoints of every node with respect to `output`.
    pub fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let inner = self.inner.borrow();
        let n = inner.values.len();
        let mut adj = vec![0.0; n];
        let Some(out) = output.index() else {
            return adj;
        };
        adj[out] = 1.0;
        for i in (0..=out).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let start = inner.starts[i] as usize;
            let end = inner
                .starts
                .get(i + 1)
                .map_or(inner.edges.len(), |&s| s as usize);
            for e in &inner.edges[start..end] {
                adj[e.parent as usize] += a * e.partial;
            }
        }
        adj
    }
}

/// A value that may be recorded on a tape. Constants carry no tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index() {
            Some(i) => write!(f, "Var(#{i} = {})", self.val),
            None => write!(f, "Const({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> Option<usize> {
        self.tape.map(|_| self.idx as usize)
    }

    fn unary(self, op: OpKind, val: f64, partial: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => t.push(op, val, std::iter::once((self.idx, partial))),
        }
    }

    fn binary(self, other: Self, op: OpKind, val: f64, da: f64, db: f64) -> Self {
        let tape = self.tape.or(other.tape);
        match tape {
            None => Var::constant(val),
            Some(t) => {
                let a = self.tape.map(|_| (self.idx, da));
                let b = other.tape.map(|_| (other.idx, db));
                t.push(op, val, a.into_iter().chain(b))
            }
        }
    }

    fn nary(xs: &[Self], op: OpKind, val: f64, partial: impl Fn(usize) -> f64) -> Self {
        match xs.iter().find_map(|x| x.tape) {
            None => Var::constant(val),
            Some(t) => t.push(
                op,
                val,
                xs.iter()
                    .enumerate()
                    .filter(|(_, x)| x.tape.is_some())
                    .map(|(i, x)| (x.idx, partial(i))),
            ),
        }
    }

    fn kink(self, distance: f64) {
        if let Some(t) = self.tape {
            t.note_kink(distance);
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, OpKind::Add, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, OpKind::Sub, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, OpKind::Mul, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, OpKind::Div, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(OpKind::Neg, -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(OpKind::Add, self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(OpKind::Sub, self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(OpKind::Mul, self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(OpKind::Div, self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Real for Var<'t> {
    fn constant(v: f64) -> Self {
        Var {
            tape: None,
            idx: 0,
            val: v,
        }
    }

    fn value(self) -> f64 {
        self.val
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(OpKind::Exp, e, e)
    }

    fn ln(self) -> Self {
        self.unary(OpKind::Log, self.val.ln(), 1.0 / self.val)
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(OpKind::Tanh, t, 1.0 - t * t)
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.val);
        self.unary(OpKind::Sigmoid, s, s * (1.0 - s))
    }

    fn relu(self) -> Self {
        self.kink(self.val.abs());
        if self.val > 0.0 {
            self.unary(OpKind::Relu, self.val, 1.0)
        } else {
            self.unary(OpKind::Relu, 0.0, 0.0)
        }
    }

    fn abs(self) -> Self {
        self.kink(self.val.abs());
        self.unary(OpKind::Abs, self.val.abs(), sign_f64(self.val))
    }

    fn sign(self) -> Self {
        self.kink(self.val.abs());
        self.unary(OpKind::Sign, sign_f64(self.val), 0.0)
    }

    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        self.unary(OpKind::Sqrt, r, 0.5 / r)
    }

    fn powi(self, n: i32) -> Self {
        let p = self.val.powi(n);
        let d = f64::from(n) * self.val.powi(n - 1);
        self.unary(OpKind::Power, p, d)
    }

    fn max(self, other: Self) -> Self {
        self.kink((self.val - other.val).abs());
        other.kink((self.val - other.val).abs());
        if other.val > self.val {
            self.binary(other, OpKind::Max, other.val, 0.0, 1.0)
        } else {
            self.binary(other, OpKind::Max, self.val, 1.0, 0.0)
        }
    }

    fn min(self, other: Self) -> Self {
        self.kink((self.val - other.val).abs());
        other.kink((self.val - other.val).abs());
        if other.val < self.val {
            self.binary(other, OpKind::Min, other.val, 0.0, 1.0)
        } else {
            self.binary(other, OpKind::Min, self.val, 1.0, 0.0)
        }
    }

    fn rsub(self, c: f64) -> Self {
        self.unary(OpKind::Sub, c - self.val, -1.0)
    }

    fn sum(xs: &[Self]) -> Self {
        let v = xs.iter().map(|x| x.val).sum();
        Var::nary(xs, OpKind::Sum, v, |_| 1.0)
    }

    fn lincomb(xs: &[Self], ws: &[f64]) -> Self {
        debug_assert_eq!(xs.len(), ws.len());
        let v = xs.iter().zip(ws).map(|(x, w)| x.val * w).sum();
        Var::nary(xs, OpKind::LinComb, v, |i| ws[i])
    }

    fn sum_sq(xs: &[Self]) -> Self {
        let v = xs.iter().map(|x| x.val * x.val).sum();
        Var::nary(xs, OpKind::SumSq, v, |i| 2.0 * xs[i].val)
    }
}

/// Value and gradient of a recorded scalar computation.
pub fn grad<F>(params: &[f64], f: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut tape = Tape::new();
    let (loss, g, ()) = grad_with(&mut tape, params, |p| f(p).map(|l| (l, ())))?;
    Ok((loss, g))
}

/// Like [`grad`] but reuses `tape` and passes through a side result computed
/// during the forward pass.
pub fn grad_with<F, T>(tape: &mut Tape, params: &[f64], f: F) -> Result<(f64, Vec<f64>, T)>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Result<(Var<'t>, T)>,
{
    tape.reset();
    let tape = &*tape;
    let vars = tape.inputs(params);
    let (loss, side) = f(&vars)?;
    if let Some((node, op)) = tape.first_non_finite() {
        return Err(Error::NumericFault {
            location: format!("tape node {node} ({op:?})"),
            message: "non-finite value in forward pass".into(),
        });
    }
    let adj = tape.adjoints(loss);
    let g: Vec<f64> = adj[..params.len()].to_vec();
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericFault {
            location: format!("gradient component {i}"),
            message: "non-finite derivative".into(),
        });
    }
    Ok((loss.value(), g, side))
}

/// Evaluate a recorded computation without a tape.
pub fn eval<F>(params: &[f64], f: F) -> Result<f64>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Result<Var<'t>>,
{
    let vars: Vec<Var<'static>> = params.iter().map(|&v| Var::constant(v)).collect();
    f(&vars).map(|l| l.value())
}

/// Denominator floor for relative gradient errors; below it errors are
/// effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    /// Parameters whose error exceeded the tolerance.
    pub flagged: Vec<usize>,
    /// Closest approach to a kink during the analytic pass.
    pub min_kink_distance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compare reverse-mode derivatives of `f` against central differences with
/// step `h * max(1, |p_i|)`. Never fails on disagreement; it reports.
pub fn check_grad<F>(params: &[f64], h: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let (_, analytic, kink) = grad_with(&mut tape, params, |p| {
        let l = f(p)?;
        Ok((l, p.first().and_then(|v| v.tape).map_or(f64::INFINITY, Tape::min_kink_distance)))
    })?;
    let mut numeric = Vec::with_capacity(params.len());
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        let step = h * params[i].abs().max(1.0);
        probe[i] = params[i] + step;
        let up = eval(&probe, &f)?;
        probe[i] = params[i] - step;
        let down = eval(&probe, &f)?;
        probe[i] = params[i];
        numeric.push((up - down) / (2.0 * step));
    }
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    let flagged = rel_errors
        .iter()
        .enumerate()
        .filter(|(_, &e)| !(e <= tol))
        .map(|(i, _)| i)
        .collect();
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        flagged,
        min_kink_distance: kink,
    })
}
