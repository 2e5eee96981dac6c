//! Gate functions: conductivities in `[0, kappa]`, the physical loss
//! constraint, mass-relaxation and input bias-correction adjustments.

use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureSpec;
use crate::autodiff::Real;
use crate::error::{Error, Result};

/// State below which the loss constraint is vacuous (mm).
pub const LOSS_CONSTRAINT_EPS: f64 = 1e-9;

/// Information flow a gate may be conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    /// Cell state at the current step.
    #[serde(rename = "state@t")]
    State,
    /// Cell state one step earlier.
    #[serde(rename = "state@t-1")]
    PrevState,
    /// Potential loss driver at the current step.
    #[serde(rename = "pot_loss@t")]
    PotLoss,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::State => "state@t",
            Channel::PrevState => "state@t-1",
            Channel::PotLoss => "pot_loss@t",
        }
    }

    /// Key of the scaling statistics used to standardize this channel.
    pub fn scaling_key(self) -> &'static str {
        match self {
            Channel::State | Channel::PrevState => "state",
            Channel::PotLoss => "pot_loss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    Constant,
    Sigmoid,
    SigmoidMulti,
    AnnPiecewise(usize),
    AnnPiecewiseMulti(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSpec {
    pub kind: GateKind,
    pub context: Vec<Channel>,
    /// Clip the realized loss at the potential loss (Loss gate only).
    pub constrained: bool,
}

impl GateSpec {
    pub fn constant() -> Self {
        GateSpec {
            kind: GateKind::Constant,
            context: Vec::new(),
            constrained: false,
        }
    }

    pub fn new(kind: GateKind, context: Vec<Channel>) -> Self {
        GateSpec {
            kind,
            context,
            constrained: false,
        }
    }

    pub fn with_constraint(mut self) -> Self {
        self.constrained = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.context.len();
        match self.kind {
            GateKind::Constant if k != 0 => {
                Err(Error::Semantic("constant gate takes no context".into()))
            }
            GateKind::Sigmoid | GateKind::AnnPiecewise(_) if k != 1 => Err(Error::Semantic(
                format!("single-context gate needs exactly one channel, got {k}"),
            )),
            GateKind::SigmoidMulti | GateKind::AnnPiecewiseMulti(_) if k < 1 => {
                Err(Error::Semantic("multi-context gate needs at least one channel".into()))
            }
            GateKind::AnnPiecewise(0) | GateKind::AnnPiecewiseMulti(0) => {
                Err(Error::Semantic("ANN gate needs at least one hidden node".into()))
            }
            _ => Ok(()),
        }
    }

    /// Shape parameter names (excluding the log-conductivity), in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        let k = self.context.len();
        let mut names = Vec::new();
        match self.kind {
            GateKind::Constant => {}
            GateKind::Sigmoid | GateKind::SigmoidMulti => {
                names.push("a".to_string());
                names.extend((1..=k).map(|i| format!("b{i}")));
            }
            GateKind::AnnPiecewise(n) | GateKind::AnnPiecewiseMulti(n) => {
                names.push("a".to_string());
                names.extend((0..n).map(|j| format!("slope[{j}]")));
                names.extend((0..n).map(|j| format!("knot[{j}]")));
                if matches!(self.kind, GateKind::AnnPiecewiseMulti(_)) {
                    for j in 0..n {
                        names.extend((0..k).map(|i| format!("w[{j}][{i}]")));
                    }
                }
            }
        }
        names
    }

    pub fn shape_param_count(&self) -> usize {
        let k = self.context.len();
        match self.kind {
            GateKind::Constant => 0,
            GateKind::Sigmoid | GateKind::SigmoidMulti => 1 + k,
            GateKind::AnnPiecewise(n) => 1 + 2 * n,
            GateKind::AnnPiecewiseMulti(n) => 1 + n * (k + 2),
        }
    }
}

/// Shape parameters of one gate. `slopes` holds the sigmoid input weights
/// for sigmoid gates and the per-node output slopes for ANN gates.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<R> {
    pub a: R,
    pub slopes: Vec<R>,
    pub knots: Vec<R>,
    /// Row-major `[node][input]`, multi-context ANN gates only.
    pub input_weights: Vec<R>,
}

impl<R: Real> GateParams<R> {
    pub fn empty() -> Self {
        GateParams {
            a: R::constant(0.0),
            slopes: Vec::new(),
            knots: Vec::new(),
            input_weights: Vec::new(),
        }
    }

    /// Read parameters in the order of [`GateSpec::param_names`].
    pub(crate) fn take(spec: &GateSpec, it: &mut impl Iterator<Item = R>) -> Self {
        let mut next = || it.next().expect("parameter vector shorter than layout");
        let k = spec.context.len();
        match spec.kind {
            GateKind::Constant => Self::empty(),
            GateKind::Sigmoid | GateKind::SigmoidMulti => {
                let a = next();
                let slopes = (0..k).map(|_| next()).collect();
                GateParams {
                    a,
                    slopes,
                    knots: Vec::new(),
                    input_weights: Vec::new(),
                }
            }
            GateKind::AnnPiecewise(n) | GateKind::AnnPiecewiseMulti(n) => {
                let a = next();
                let slopes = (0..n).map(|_| next()).collect();
                let knots = (0..n).map(|_| next()).collect();
                let input_weights = if matches!(spec.kind, GateKind::AnnPiecewiseMulti(_)) {
                    (0..n * k).map(|_| next()).collect()
                } else {
                    Vec::new()
                };
                GateParams {
                    a,
                    slopes,
                    knots,
                    input_weights,
                }
            }
        }
    }
}

/// `exp(c_i) / sum_j exp(c_j)`, max-subtracted. Needs at least three gates;
/// with two the remember gate is simply the complement.
pub fn softmax_conductivities<R: Real>(c: &[R]) -> Result<Vec<R>> {
    if c.len() < 3 {
        return Err(Error::Contract(format!(
            "softmax over conductivities needs >= 3 entries, got {}",
            c.len()
        )));
    }
    if let Some(bad) = c.iter().find(|v| !v.value().is_finite()) {
        return Err(Error::Contract(format!("non-finite log-conductivity {bad:?}")));
    }
    // Shifting by a constant leaves both value and derivative unchanged.
    let m = c.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<R> = c.iter().map(|&v| (v - m).exp()).collect();
    let total = R::sum(&e);
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// Gate value in `[0, kappa]` from standardized context values.
pub fn eval_gate<R: Real>(spec: &GateSpec, params: &GateParams<R>, kappa: R, ctx: &[R]) -> Result<R> {
    if ctx.len() != spec.context.len() {
        return Err(Error::Contract(format!(
            "gate expects {} context values, got {}",
            spec.context.len(),
            ctx.len()
        )));
    }
    let pre = match spec.kind {
        GateKind::Constant => return Ok(kappa),
        GateKind::Sigmoid | GateKind::SigmoidMulti => {
            let mut s = params.a;
            for (&b, &i) in params.slopes.iter().zip(ctx) {
                s = s + b * i;
            }
            s
        }
        GateKind::AnnPiecewise(n) => {
            let i = ctx[0];
            let mut s = params.a;
            for j in 0..n {
                s = s + params.slopes[j] * (i - params.knots[j]).relu();
            }
            s
        }
        GateKind::AnnPiecewiseMulti(n) => {
            let k = ctx.len();
            let mut s = params.a;
            for j in 0..n {
                let mut h = -params.knots[j];
                for (w, &i) in params.input_weights[j * k..(j + 1) * k].iter().zip(ctx) {
                    h = h + *w * i;
                }
                s = s + params.slopes[j] * h.relu();
            }
            s
        }
    };
    Ok(kappa * pre.sigmoid())
}

/// Clip a loss conductivity so the realized loss never exceeds the
/// potential loss: `g - relu(g - d / x)`.
pub fn constrain_loss<R: Real>(g_loss: R, pot_loss: f64, state: R) -> R {
    if state.value() <= LOSS_CONSTRAINT_EPS {
        return g_loss;
    }
    g_loss - (g_loss - state.rdiv(pot_loss)).relu()
}

trait RDiv {
    fn rdiv(self, c: f64) -> Self;
}

impl<R: Real> RDiv for R {
    fn rdiv(self, c: f64) -> Self {
        R::constant(c) / self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MrVariant {
    /// `kappa * tanh(a * (x~ - c~))`
    StateDependent,
    /// `kappa * sign(x - c)`
    StateIndependent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrGateSpec {
    pub variant: MrVariant,
    /// Keep the equilibrium state strictly positive.
    pub c_positive: bool,
}

impl MrGateSpec {
    pub fn param_names(&self) -> Vec<String> {
        match self.variant {
            MrVariant::StateDependent => vec!["kappa".into(), "a".into(), "c".into()],
            MrVariant::StateIndependent => vec!["kappa".into(), "c".into()],
        }
    }
}

/// Raw mass-relaxation parameters. `kappa_logit` maps to `kappa` through a
/// sigmoid, the slope `a` through softplus (so it stays positive); `c_raw` is
/// the equilibrium state in standardized units.
#[derive(Debug, Clone, Copy)]
pub struct MrParams<R> {
    pub kappa_logit: R,
    pub a: R,
    pub c_raw: R,
}

/// Equilibrium state after reparameterization: `(c in mm, c standardized)`.
pub fn mr_equilibrium<R: Real>(spec: &MrGateSpec, c_raw: R, state_mean: f64, state_std: f64) -> (R, R) {
    let c_mm = c_raw * state_std + state_mean;
    if spec.c_positive {
        let c_mm = c_mm.softplus();
        (c_mm, (c_mm - state_mean) / state_std)
    } else {
        (c_mm, c_raw)
    }
}

/// Mass-relaxation conductivity and flux.
///
/// `c_mm`/`c_scaled` come from [`mr_equilibrium`]. The conductivity is
/// clipped at `remember_pre` so the gate alone cannot extract more than the
/// remaining state; negative values mean inflow.
pub fn eval_mr_gate<R: Real>(
    spec: &MrGateSpec,
    params: &MrParams<R>,
    (c_mm, c_scaled): (R, R),
    state: R,
    scaled_state: R,
    remember_pre: R,
) -> (R, R) {
    let kappa = params.kappa_logit.sigmoid();
    let f = match spec.variant {
        MrVariant::StateDependent => kappa * (params.a.softplus() * (scaled_state - c_scaled)).tanh(),
        MrVariant::StateIndependent => kappa * (state - c_mm).sign(),
    };
    let g = f - (f - remember_pre).relu();
    let q = g * (state - c_mm).abs();
    (g, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BcVariant {
    PiecewiseLinear,
    PiecewiseQuadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcGateSpec {
    pub variant: BcVariant,
    pub nodes: usize,
    /// Input scale `U^max` (mm/day), normally the maximum observed precipitation.
    pub u_max: f64,
}

impl BcGateSpec {
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.nodes).map(|j| format!("omega[{j}]")).collect();
        names.extend((0..self.nodes).map(|j| format!("gamma[{j}]")));
        if self.variant == BcVariant::PiecewiseQuadratic {
            names.push("gamma0".into());
        }
        names
    }
}

#[derive(Debug, Clone)]
pub struct BcParams<R> {
    pub omega: Vec<R>,
    pub gamma: Vec<R>,
    pub gamma0: R,
}

/// Corrected input and whether the non-negativity clamp fired.
pub fn bias_correct<R: Real>(spec: &BcGateSpec, params: &BcParams<R>, u: f64) -> (R, bool) {
    let scaled = u / spec.u_max;
    let mut g = R::constant(0.0);
    for (&w, &gam) in params.omega.iter().zip(&params.gamma) {
        g = g + w * (gam.sigmoid().rsub(scaled)).relu();
    }
    let corrected = match spec.variant {
        BcVariant::PiecewiseLinear => g * spec.u_max + u,
        BcVariant::PiecewiseQuadratic => (g + params.gamma0) * u,
    };
    if corrected.value() < 0.0 {
        (R::constant(0.0), true)
    } else {
        (corrected, false)
    }
}

/// Number of trainable scalars in an architecture.
pub fn count_parameters(arch: &ArchitectureSpec) -> usize {
    arch.param_names().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid_f64;

    fn sig(context: Vec<Channel>) -> GateSpec {
        GateSpec::new(GateKind::Sigmoid, context)
    }

    #[test]
    fn softmax_examples() {
        let k = softmax_conductivities(&[0.0, 0.0, 0.0]).unwrap();
        for v in &k {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let k = softmax_conductivities(&[2f64.ln(), 0.0, 0.0]).unwrap();
        assert!((k[0] - 0.5).abs() < 1e-15 && (k[1] - 0.25).abs() < 1e-15 && (k[2] - 0.25).abs() < 1e-15);
        let k = softmax_conductivities(&[1000.0, 0.0, 0.0]).unwrap();
        assert!(k.iter().all(|v| v.is_finite()));
        assert!((k[0] - 1.0).abs() < 1e-15 && k[1] < 1e-300);
        assert!(softmax_conductivities(&[0.0, 0.0]).is_err());
        assert!(softmax_conductivities(&[0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn eval_gate_examples() {
        let spec = sig(vec![Channel::State]);
        let p = GateParams {
            a: 0.0,
            slopes: vec![1.0],
            knots: vec![],
            input_weights: vec![],
        };
        assert_eq!(eval_gate(&spec, &p, 0.5, &[0.0]).unwrap(), 0.25);

        let ann = GateSpec::new(GateKind::AnnPiecewise(2), vec![Channel::State]);
        let p = GateParams {
            a: 0.0,
            slopes: vec![0.0, 0.0],
            knots: vec![0.3, -1.0],
            input_weights: vec![],
        };
        for i in [-5.0, 0.0, 0.3, 7.0] {
            assert_eq!(eval_gate(&ann, &p, 1.0, &[i]).unwrap(), 0.5);
        }

        let c = GateSpec::constant();
        assert_eq!(eval_gate(&c, &GateParams::empty(), 0.048, &[]).unwrap(), 0.048);
    }

    #[test]
    fn eval_gate_multi_forms() {
        let spec = GateSpec::new(GateKind::SigmoidMulti, vec![Channel::PotLoss, Channel::State]);
        let p = GateParams {
            a: 0.1,
            slopes: vec![0.5, -2.0],
            knots: vec![],
            input_weights: vec![],
        };
        let want = 0.7 * sigmoid_f64(0.1 + 0.5 * 1.2 - 2.0 * 0.3);
        assert!((eval_gate(&spec, &p, 0.7, &[1.2, 0.3]).unwrap() - want).abs() < 1e-15);

        let spec = GateSpec::new(GateKind::AnnPiecewiseMulti(2), vec![Channel::State, Channel::PrevState]);
        let p = GateParams {
            a: -0.2,
            slopes: vec![1.5, -0.5],
            knots: vec![0.1, 0.4],
            input_weights: vec![1.0, 2.0, -1.0, 0.5],
        };
        let (i1, i2) = (0.6, -0.2);
        let h0 = (1.0 * i1 + 2.0 * i2 - 0.1_f64).max(0.0);
        let h1 = (-1.0 * i1 + 0.5 * i2 - 0.4_f64).max(0.0);
        let want = sigmoid_f64(-0.2 + 1.5 * h0 - 0.5 * h1);
        assert!((eval_gate(&spec, &p, 1.0, &[i1, i2]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn eval_gate_arity_mismatch() {
        let spec = sig(vec![Channel::State]);
        let p = GateParams {
            a: 0.0,
            slopes: vec![1.0],
            knots: vec![],
            input_weights: vec![],
        };
        assert!(matches!(eval_gate(&spec, &p, 1.0, &[0.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn constrain_loss_examples() {
        assert!((constrain_loss(0.5, 2.0, 10.0) - 0.2).abs() < 1e-15);
        assert_eq!(constrain_loss(0.1, 5.0, 10.0), 0.1);
        assert_eq!(constrain_loss(0.3, 1.0, 0.0), 0.3);
    }

    #[test]
    fn mr_gate_examples() {
        let dep = MrGateSpec {
            variant: MrVariant::StateDependent,
            c_positive: false,
        };
        let p = MrParams {
            kappa_logit: 0.0,
            a: 2.0,
            c_raw: 0.5,
        };
        let eq = mr_equilibrium(&dep, 0.5, 100.0, 20.0);
        assert_eq!(eq, (110.0, 0.5));
        let (g, q) = eval_mr_gate(&dep, &p, eq, 110.0, 0.5, 0.9);
        assert_eq!((g, q), (0.0, 0.0));

        // kappa * sign(+) = 0.3 with kappa = sigmoid(logit) = 0.3
        let ind = MrGateSpec {
            variant: MrVariant::StateIndependent,
            c_positive: false,
        };
        let logit = (0.3_f64 / 0.7).ln();
        let p = MrParams {
            kappa_logit: logit,
            a: 0.0,
            c_raw: 0.0,
        };
        let (g, q) = eval_mr_gate(&ind, &p, (50.0, 0.0), 80.0, 0.0, 0.2);
        assert!((g - 0.2).abs() < 1e-15);
        assert!((q - 0.2 * 30.0).abs() < 1e-12);

        let logit = (0.4_f64 / 0.6).ln();
        let p = MrParams {
            kappa_logit: logit,
            a: 0.0,
            c_raw: 0.0,
        };
        let (g, q) = eval_mr_gate(&ind, &p, (100.0, 0.0), 80.0, 0.0, 0.1);
        assert!((g + 0.4).abs() < 1e-15);
        assert!(q < 0.0);
    }

    #[test]
    fn mr_positive_equilibrium() {
        let spec = MrGateSpec {
            variant: MrVariant::StateDependent,
            c_positive: true,
        };
        let (c_mm, c_scaled) = mr_equilibrium(&spec, -10.0, 100.0, 20.0);
        assert!(c_mm > 0.0);
        assert!((c_scaled - (c_mm - 100.0) / 20.0).abs() < 1e-15);
    }

    #[test]
    fn bias_correct_examples() {
        let pl = BcGateSpec {
            variant: BcVariant::PiecewiseLinear,
            nodes: 2,
            u_max: 200.0,
        };
        let zero = BcParams {
            omega: vec![0.0, 0.0],
            gamma: vec![0.3, -0.2],
            gamma0: 0.0,
        };
        assert_eq!(bias_correct(&pl, &zero, 42.0), (42.0, false));

        let one = BcGateSpec { nodes: 1, ..pl.clone() };
        let p = BcParams {
            omega: vec![0.1],
            gamma: vec![0.0],
            gamma0: 0.0,
        };
        let (u, clamped) = bias_correct(&one, &p, 150.0);
        assert!((u - 155.0).abs() < 1e-12 && !clamped);

        let pq = BcGateSpec {
            variant: BcVariant::PiecewiseQuadratic,
            nodes: 2,
            u_max: 200.0,
        };
        let ident = BcParams {
            omega: vec![0.0, 0.0],
            gamma: vec![0.0, 0.0],
            gamma0: 1.0,
        };
        assert_eq!(bias_correct(&pq, &ident, 17.5), (17.5, false));

        let neg = BcParams {
            omega: vec![0.0, 0.0],
            gamma: vec![0.0, 0.0],
            gamma0: -0.5,
        };
        assert_eq!(bias_correct(&pq, &neg, 10.0), (0.0, true));
    }

    #[test]
    fn gate_spec_validation() {
        assert!(GateSpec::new(GateKind::Constant, vec![Channel::State]).validate().is_err());
        assert!(GateSpec::new(GateKind::AnnPiecewise(0), vec![Channel::State]).validate().is_err());
        assert!(GateSpec::new(GateKind::Sigmoid, vec![]).validate().is_err());
        assert!(GateSpec::new(GateKind::AnnPiecewise(3), vec![Channel::State]).validate().is_ok());
    }

    #[test]
    fn shape_counts_match_names() {
        for spec in [
            GateSpec::constant(),
            sig(vec![Channel::State]),
            GateSpec::new(GateKind::SigmoidMulti, vec![Channel::State, Channel::PrevState]),
            GateSpec::new(GateKind::AnnPiecewise(4), vec![Channel::PotLoss]),
            GateSpec::new(GateKind::AnnPiecewiseMulti(3), vec![Channel::State, Channel::PrevState]),
        ] {
            assert_eq!(spec.param_names().len(), spec.shape_param_count());
        }
    }
}
