//! Architecture descriptions and their text grammar.
//!
//! ```text
//! MC{O=sig,L=sig:con}
//! MC{O=ann:5,L=sig:con}
//! MC{O=sig+,L=sig+:con,MR=tanh}
//! MC{O=sig,L=sig:con,BC=pl:3}
//! ```
//!
//! `O`/`L`/`U` take `const`, `sig` or `ann:N`; a trailing `+` selects the
//! two-channel context. `:con` caps the loss at the potential loss (Loss gate
//! only). `MR` is `tanh` or `sign`, optionally `:pos`. `BC` is `pl:N` or `pq:N`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::data::ScalingStats;
use crate::error::{Error, Result};
use crate::gates::{
    BcGateSpec, BcParams, BcVariant, Channel, GateKind, GateParams, GateSpec, MrGateSpec, MrParams,
    MrVariant,
};

#[derive(Debug, Clone, PartialEq, Default)]
pub enum InputGate {
    #[default]
    FixedOne,
    Gated(GateSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub output_gate: GateSpec,
    pub loss_gate: GateSpec,
    pub input_gate: InputGate,
    pub mr_gate: Option<MrGateSpec>,
    pub bc_gate: Option<BcGateSpec>,
    /// Standardization per scaling key (`state`, `pot_loss`).
    pub scaling: BTreeMap<String, ScalingStats>,
}

/// Default contexts: single-channel and `+` (two-channel) variants.
fn output_context(multi: bool) -> Vec<Channel> {
    if multi {
        vec![Channel::State, Channel::PrevState]
    } else {
        vec![Channel::State]
    }
}

fn loss_context(multi: bool) -> Vec<Channel> {
    if multi {
        vec![Channel::PotLoss, Channel::State]
    } else {
        vec![Channel::PotLoss]
    }
}

fn input_context(multi: bool) -> Vec<Channel> {
    if multi {
        vec![Channel::State, Channel::PrevState]
    } else {
        vec![Channel::State]
    }
}

impl ArchitectureSpec {
    /// Architecture with the given gates and identity scaling.
    pub fn new(output_gate: GateSpec, loss_gate: GateSpec) -> Self {
        let mut spec = ArchitectureSpec {
            output_gate,
            loss_gate,
            input_gate: InputGate::FixedOne,
            mr_gate: None,
            bc_gate: None,
            scaling: BTreeMap::new(),
        };
        spec.fill_identity_scaling();
        spec
    }

    pub fn parse(text: &str) -> Result<Self> {
        parse_arch(text)
    }

    /// Scaling keys referenced by any gate.
    pub fn scaling_keys(&self) -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = self
            .gates()
            .flat_map(|(_, g)| g.context.iter().map(|c| c.scaling_key()))
            .collect();
        if self.mr_gate.is_some() {
            keys.push("state");
        }
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    fn gates(&self) -> impl Iterator<Item = (&'static str, &GateSpec)> {
        let input = match &self.input_gate {
            InputGate::FixedOne => None,
            InputGate::Gated(g) => Some(("in", g)),
        };
        [("out", &self.output_gate), ("loss", &self.loss_gate)]
            .into_iter()
            .chain(input)
    }

    pub fn fill_identity_scaling(&mut self) {
        for key in self.scaling_keys() {
            self.scaling
                .entry(key.to_string())
                .or_insert_with(ScalingStats::identity);
        }
    }

    pub fn with_scaling(mut self, scaling: BTreeMap<String, ScalingStats>) -> Self {
        self.scaling = scaling;
        self.fill_identity_scaling();
        self
    }

    pub fn uses_scaling(&self) -> bool {
        !self.scaling_keys().is_empty()
    }

    pub fn stats(&self, key: &str) -> ScalingStats {
        self.scaling.get(key).copied().unwrap_or_else(ScalingStats::identity)
    }

    pub fn validate(&self) -> Result<()> {
        for (_, g) in self.gates() {
            g.validate()?;
        }
        if self.output_gate.constrained {
            return Err(Error::Semantic("the potential-loss constraint applies to the Loss gate only".into()));
        }
        if let InputGate::Gated(g) = &self.input_gate {
            if g.constrained {
                return Err(Error::Semantic("the potential-loss constraint applies to the Loss gate only".into()));
            }
        }
        if let Some(bc) = &self.bc_gate {
            if bc.nodes == 0 {
                return Err(Error::Semantic("bias correction needs at least one node".into()));
            }
            if !(bc.u_max > 0.0 && bc.u_max.is_finite()) {
                return Err(Error::Semantic(format!("bias correction scale must be > 0, got {}", bc.u_max)));
            }
        }
        for key in self.scaling_keys() {
            match self.scaling.get(key) {
                None => return Err(Error::Validation(format!("no scaling for channel `{key}`"))),
                Some(s) if !(s.std > 0.0) => return Err(Error::DegenerateChannel(key.to_string())),
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Fully qualified trainable parameter names in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "out.c".to_string(),
            "loss.c".to_string(),
            "rem.c".to_string(),
        ];
        for (prefix, g) in self.gates() {
            names.extend(g.param_names().into_iter().map(|n| format!("{prefix}.{n}")));
        }
        if let Some(mr) = &self.mr_gate {
            names.extend(mr.param_names().into_iter().map(|n| format!("mr.{n}")));
        }
        if let Some(bc) = &self.bc_gate {
            names.extend(bc.param_names().into_iter().map(|n| format!("bc.{n}")));
        }
        names
    }

    pub fn canonical(&self) -> String {
        self.to_string()
    }

    /// File-system friendly identifier derived from the canonical text.
    pub fn id(&self) -> String {
        arch_id(&self.canonical())
    }
}

/// Map grammar text to a directory-safe identifier.
pub fn arch_id(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '{' | ',' => out.push('_'),
            '}' => {}
            '=' | ':' => out.push('-'),
            '+' => out.push('p'),
            c if c.is_ascii_alphanumeric() || c == '_' || c == '-' => out.push(c),
            _ => out.push('_'),
        }
    }
    out
}

/// Typed view of one parameter vector.
#[derive(Debug, Clone)]
pub struct ModelParams<R> {
    pub c_out: R,
    pub c_loss: R,
    pub c_rem: R,
    pub out: GateParams<R>,
    pub loss: GateParams<R>,
    pub input: Option<GateParams<R>>,
    pub mr: Option<MrParams<R>>,
    pub bc: Option<BcParams<R>>,
}

impl<R: Real> ModelParams<R> {
    pub fn unpack(arch: &ArchitectureSpec, values: &[R]) -> Result<Self> {
        let n = arch.param_names().len();
        if values.len() != n {
            return Err(Error::Contract(format!(
                "architecture {} has {n} parameters, got {}",
                arch.canonical(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        let c_out = it.next().expect("length checked");
        let c_loss = it.next().expect("length checked");
        let c_rem = it.next().expect("length checked");
        let out = GateParams::take(&arch.output_gate, &mut it);
        let loss = GateParams::take(&arch.loss_gate, &mut it);
        let input = match &arch.input_gate {
            InputGate::FixedOne => None,
            InputGate::Gated(g) => Some(GateParams::take(g, &mut it)),
        };
        let mr = arch.mr_gate.as_ref().map(|mr| {
            let kappa_logit = it.next().expect("layout");
            let a = match mr.variant {
                MrVariant::StateDependent => it.next().expect("layout"),
                MrVariant::StateIndependent => R::constant(0.0),
            };
            let c_raw = it.next().expect("layout");
            MrParams { kappa_logit, a, c_raw }
        });
        let bc = arch.bc_gate.as_ref().map(|bc| {
            let omega = (0..bc.nodes).map(|_| it.next().expect("layout")).collect();
            let gamma = (0..bc.nodes).map(|_| it.next().expect("layout")).collect();
            let gamma0 = match bc.variant {
                BcVariant::PiecewiseQuadratic => it.next().expect("layout"),
                BcVariant::PiecewiseLinear => R::constant(0.0),
            };
            BcParams { omega, gamma, gamma0 }
        });
        debug_assert!(it.next().is_none());
        Ok(ModelParams {
            c_out,
            c_loss,
            c_rem,
            out,
            loss,
            input,
            mr,
            bc,
        })
    }
}

fn fmt_gate(g: &GateSpec) -> String {
    let multi = g.context.len() > 1;
    let mut s = match g.kind {
        GateKind::Constant => "const".to_string(),
        GateKind::Sigmoid | GateKind::SigmoidMulti => "sig".to_string(),
        GateKind::AnnPiecewise(n) | GateKind::AnnPiecewiseMulti(n) => format!("ann:{n}"),
    };
    if multi {
        s.push('+');
    }
    if g.constrained {
        s.push_str(":con");
    }
    s
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MC{{O={},L={}", fmt_gate(&self.output_gate), fmt_gate(&self.loss_gate))?;
        if let InputGate::Gated(g) = &self.input_gate {
            write!(f, ",U={}", fmt_gate(g))?;
        }
        if let Some(mr) = &self.mr_gate {
            let v = match mr.variant {
                MrVariant::StateDependent => "tanh",
                MrVariant::StateIndependent => "sign",
            };
            write!(f, ",MR={v}{}", if mr.c_positive { ":pos" } else { "" })?;
        }
        if let Some(bc) = &self.bc_gate {
            let v = match bc.variant {
                BcVariant::PiecewiseLinear => "pl",
                BcVariant::PiecewiseQuadratic => "pq",
            };
            write!(f, ",BC={v}:{}", bc.nodes)?;
        }
        write!(f, "}}")
    }
}

impl FromStr for ArchitectureSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_arch(s)
    }
}

fn syntax(offset: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        offset,
        message: message.into(),
    }
}

/// Parse a gate value such as `sig+:con` or `ann:3`.
fn parse_gate(value: &str, offset: usize, which: char) -> Result<GateSpec> {
    let mut parts = value.split(':');
    let head = parts.next().unwrap_or_default();
    let (family, multi) = match head.strip_suffix('+') {
        Some(f) => (f, true),
        None => (head, false),
    };
    let rest: Vec<&str> = parts.collect();
    let mut idx = 0;
    let kind = match family {
        "const" => {
            if multi {
                return Err(Error::Semantic("a constant gate has no context to extend with `+`".into()));
            }
            GateKind::Constant
        }
        "sig" => {
            if multi {
                GateKind::SigmoidMulti
            } else {
                GateKind::Sigmoid
            }
        }
        "ann" => {
            let n_text = rest
                .first()
                .ok_or_else(|| syntax(offset + value.len(), "`ann` needs a node count, e.g. `ann:3`"))?;
            // `ann:3+` puts the marker after the count
            let (n_text, multi_after) = match n_text.strip_suffix('+') {
                Some(t) => (t, true),
                None => (*n_text, false),
            };
            let n: usize = n_text.parse().map_err(|_| {
                syntax(offset + head.len() + 1, format!("invalid node count `{n_text}`"))
            })?;
            if n == 0 {
                return Err(Error::Semantic("an ANN gate needs at least one hidden node".into()));
            }
            idx = 1;
            if multi || multi_after {
                GateKind::AnnPiecewiseMulti(n)
            } else {
                GateKind::AnnPiecewise(n)
            }
        }
        other => return Err(syntax(offset, format!("unknown gate family `{other}`"))),
    };
    let multi = matches!(kind, GateKind::SigmoidMulti | GateKind::AnnPiecewiseMulti(_));
    let context = match (kind, which) {
        (GateKind::Constant, _) => Vec::new(),
        (_, 'O') => output_context(multi),
        (_, 'L') => loss_context(multi),
        (_, _) => input_context(multi),
    };
    let mut spec = GateSpec::new(kind, context);
    for flag in &rest[idx..] {
        match *flag {
            "con" => {
                if which != 'L' {
                    return Err(Error::Semantic(format!(
                        "`:con` caps loss at potential loss and is only valid on the Loss gate, not `{which}`"
                    )));
                }
                spec.constrained = true;
            }
            other => {
                let pos = offset + value.find(other).unwrap_or(0);
                return Err(syntax(pos, format!("unknown gate flag `{other}`")));
            }
        }
    }
    Ok(spec)
}

/// Parse grammar text into an architecture with identity scaling.
pub fn parse_arch(text: &str) -> Result<ArchitectureSpec> {
    let trimmed = text.trim_end();
    let lead = text.len() - text.trim_start().len();
    let t = trimmed.trim_start();
    if t.is_empty() {
        return Err(syntax(0, "empty architecture"));
    }
    let body = t
        .strip_prefix("MC{")
        .ok_or_else(|| syntax(lead, "expected `MC{`"))?;
    let body = body
        .strip_suffix('}')
        .ok_or_else(|| syntax(lead + t.len(), "expected closing `}`"))?;
    let base = lead + 3;

    let mut output = None;
    let mut loss = None;
    let mut input = None;
    let mut mr = None;
    let mut bc = None;
    let mut pos = 0;
    for item in body.split(',') {
        let off = base + pos;
        pos += item.len() + 1;
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| syntax(off, format!("expected `KEY=VALUE`, got `{item}`")))?;
        let voff = off + key.len() + 1;
        match key {
            "O" | "L" | "U" => {
                let slot = match key {
                    "O" => &mut output,
                    "L" => &mut loss,
                    _ => &mut input,
                };
                if slot.is_some() {
                    return Err(syntax(off, format!("duplicate `{key}` gate")));
                }
                *slot = Some(parse_gate(value, voff, key.chars().next().unwrap())?);
            }
            "MR" => {
                if mr.is_some() {
                    return Err(syntax(off, "duplicate `MR` gate"));
                }
                let mut parts = value.split(':');
                let variant = match parts.next().unwrap_or_default() {
                    "tanh" => MrVariant::StateDependent,
                    "sign" => MrVariant::StateIndependent,
                    other => return Err(syntax(voff, format!("unknown MR variant `{other}`"))),
                };
                let mut c_positive = false;
                for flag in parts {
                    match flag {
                        "pos" => c_positive = true,
                        "con" => {
                            return Err(Error::Semantic("`:con` is only valid on the Loss gate".into()))
                        }
                        other => return Err(syntax(voff, format!("unknown MR flag `{other}`"))),
                    }
                }
                mr = Some(MrGateSpec { variant, c_positive });
            }
            "BC" => {
                if bc.is_some() {
                    return Err(syntax(off, "duplicate `BC` gate"));
                }
                let (v, n) = value
                    .split_once(':')
                    .ok_or_else(|| syntax(voff, "expected `pl:N` or `pq:N`"))?;
                let variant = match v {
                    "pl" => BcVariant::PiecewiseLinear,
                    "pq" => BcVariant::PiecewiseQuadratic,
                    other => return Err(syntax(voff, format!("unknown BC variant `{other}`"))),
                };
                let nodes: usize = n
                    .parse()
                    .map_err(|_| syntax(voff + v.len() + 1, format!("invalid node count `{n}`")))?;
                if nodes == 0 {
                    return Err(Error::Semantic("bias correction needs at least one node".into()));
                }
                bc = Some(BcGateSpec {
                    variant,
                    nodes,
                    u_max: 1.0,
                });
            }
            other => return Err(syntax(off, format!("unknown key `{other}`"))),
        }
    }
    let output = output.ok_or_else(|| syntax(base, "missing Output gate `O=`"))?;
    let loss = loss.ok_or_else(|| syntax(base, "missing Loss gate `L=`"))?;
    let mut spec = ArchitectureSpec::new(output, loss);
    if let Some(g) = input {
        spec.input_gate = InputGate::Gated(g);
    }
    spec.mr_gate = mr;
    spec.bc_gate = bc;
    spec.fill_identity_scaling();
    spec.validate()?;
    Ok(spec)
}

/// Serialized form: grammar text plus data-derived constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchDocument {
    pub grammar: String,
    #[serde(default)]
    pub scaling: BTreeMap<String, ScalingStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bc_u_max: Option<f64>,
}

impl From<&ArchitectureSpec> for ArchDocument {
    fn from(a: &ArchitectureSpec) -> Self {
        ArchDocument {
            grammar: a.canonical(),
            scaling: a.scaling.clone(),
            bc_u_max: a.bc_gate.as_ref().map(|b| b.u_max),
        }
    }
}

impl TryFrom<ArchDocument> for ArchitectureSpec {
    type Error = Error;
    fn try_from(d: ArchDocument) -> Result<Self> {
        let mut spec = parse_arch(&d.grammar)?.with_scaling(d.scaling);
        if let (Some(bc), Some(u)) = (spec.bc_gate.as_mut(), d.bc_u_max) {
            bc.u_max = u;
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for ArchitectureSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ArchDocument::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ArchitectureSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = ArchDocument::deserialize(d)?;
        ArchitectureSpec::try_from(doc).map_err(serde::de::Error::custom)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn gate_text() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("const".to_string()),
            Just("sig".to_string()),
            Just("sig+".to_string()),
            (1usize..6).prop_map(|n| format!("ann:{n}")),
            (1usize..6).prop_map(|n| format!("ann:{n}+")),
        ]
    }

    fn arch_text() -> impl Strategy<Value = String> {
        (
            gate_text(),
            gate_text(),
            any::<bool>(),
            prop::option::of(gate_text()),
            prop::option::of((any::<bool>(), any::<bool>())),
            prop::option::of((any::<bool>(), 1usize..6)),
        )
            .prop_map(|(o, l, con, u, mr, bc)| {
                let mut s = format!("MC{{O={o},L={l}");
                if con {
                    s.push_str(":con");
                }
                if let Some(u) = u {
                    s.push_str(&format!(",U={u}"));
                }
                if let Some((tanh, pos)) = mr {
                    s.push_str(if tanh { ",MR=tanh" } else { ",MR=sign" });
                    if pos {
                        s.push_str(":pos");
                    }
                }
                if let Some((pl, n)) = bc {
                    s.push_str(&format!(",BC={}:{n}", if pl { "pl" } else { "pq" }));
                }
                s.push('}');
                s
            })
    }

    proptest! {
        #[test]
        fn grammar_round_trips(text in arch_text()) {
            let spec = parse_arch(&text).unwrap();
            let canon = spec.canonical();
            prop_assert_eq!(&canon, &text);
            prop_assert_eq!(parse_arch(&canon).unwrap(), spec);
        }
    }
}
