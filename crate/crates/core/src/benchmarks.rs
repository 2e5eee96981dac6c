//! Non-conserving comparison models: ARX, time-delay ANN, RNN and LSTM.
//!
//! Inputs are divided by their Train-subset maxima. ARX and ANN feed back
//! their own previous (normalized) prediction, starting from zero; RNN and
//! LSTM see precipitation and potential loss only.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::data::{ForcingSeries, Label, PartitionMask};
use crate::error::{Error, Result};
use crate::metrics::{annual_distribution, PercentileSummary};
use crate::training::{
    best_seed_or_fault, init_params, parallel_map, train_seed, LrSchedule, Model, Objective, RunResult, TrainConfig,
};

pub const LSTM_SEQ_LENS: [usize; 15] = [1, 7, 15, 30, 60, 90, 120, 150, 180, 210, 240, 270, 300, 330, 390];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Arx,
    Ann,
    Rnn,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BenchmarkSpec {
    pub family: Family,
    pub n_hidden: usize,
    /// LSTM window length; `None` searches [`LSTM_SEQ_LENS`].
    pub seq_len: Option<usize>,
}

impl BenchmarkSpec {
    pub fn arx() -> Self {
        BenchmarkSpec {
            family: Family::Arx,
            n_hidden: 0,
            seq_len: None,
        }
    }

    pub fn ann(n: usize) -> Self {
        BenchmarkSpec {
            family: Family::Ann,
            n_hidden: n,
            seq_len: None,
        }
    }

    pub fn rnn(n: usize) -> Self {
        BenchmarkSpec {
            family: Family::Rnn,
            n_hidden: n,
            seq_len: None,
        }
    }

    pub fn lstm(n: usize, seq_len: Option<usize>) -> Self {
        BenchmarkSpec {
            family: Family::Lstm,
            n_hidden: n,
            seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            Family::Arx if self.n_hidden != 0 => Err(Error::Semantic("ARX has no hidden nodes".into())),
            Family::Ann | Family::Rnn | Family::Lstm if self.n_hidden == 0 => {
                Err(Error::Semantic(format!("{self} needs at least one hidden node")))
            }
            f if f != Family::Lstm && self.seq_len.is_some() => {
                Err(Error::Semantic("sequence length applies to LSTM only".into()))
            }
            _ if self.seq_len == Some(0) => Err(Error::Semantic("sequence length must be >= 1".into())),
            _ => Ok(()),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let n = self.n_hidden;
        let mut v = Vec::new();
        match self.family {
            Family::Arx => {
                v.extend(["w_prev", "w_u", "w_d", "b"].map(String::from));
            }
            Family::Ann => {
                for j in 0..n {
                    v.extend(["prev", "u", "d"].iter().map(|i| format!("hidden[{j}].w_{i}")));
                    v.push(format!("hidden[{j}].b"));
                }
                v.extend((0..n).map(|j| format!("out.w[{j}]")));
                v.push("out.b".into());
            }
            Family::Rnn => recurrent_names(&mut v, "cell", n),
            Family::Lstm => {
                for g in ["input", "forget", "cand", "output"] {
                    recurrent_names(&mut v, g, n);
                }
            }
        }
        if matches!(self.family, Family::Rnn | Family::Lstm) {
            v.extend((0..n).map(|j| format!("out.w[{j}]")));
            v.push("out.b".into());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_names().len()
    }

    pub fn epochs_default(&self) -> usize {
        match self.family {
            Family::Ann => 5000,
            _ => 2000,
        }
    }
}

fn recurrent_names(v: &mut Vec<String>, prefix: &str, n: usize) {
    for j in 0..n {
        v.push(format!("{prefix}.wx[{j}][u]"));
        v.push(format!("{prefix}.wx[{j}][d]"));
        v.extend((0..n).map(|k| format!("{prefix}.wh[{j}][{k}]")));
        v.push(format!("{prefix}.b[{j}]"));
    }
}

impl fmt::Display for BenchmarkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.family, self.seq_len) {
            (Family::Arx, _) => write!(f, "arx"),
            (Family::Ann, _) => write!(f, "ann:{}", self.n_hidden),
            (Family::Rnn, _) => write!(f, "rnn:{}", self.n_hidden),
            (Family::Lstm, None) => write!(f, "lstm:{}", self.n_hidden),
            (Family::Lstm, Some(l)) => write!(f, "lstm:{}:{l}", self.n_hidden),
        }
    }
}

impl FromStr for BenchmarkSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| Error::Validation(format!("`{s}` needs a hidden-node count")))?
                .parse()
                .map_err(|_| Error::Validation(format!("invalid number in `{s}`")))
        };
        let spec = match (parts[0], parts.len()) {
            ("arx", 1) => BenchmarkSpec::arx(),
            ("ann", 2) => BenchmarkSpec::ann(num(1)?),
            ("rnn", 2) => BenchmarkSpec::rnn(num(1)?),
            ("lstm", 2) => BenchmarkSpec::lstm(num(1)?, None),
            ("lstm", 3) => BenchmarkSpec::lstm(num(1)?, Some(num(2)?)),
            _ => {
                return Err(Error::Validation(format!(
                    "unknown benchmark `{s}`; expected arx, ann:N, rnn:N, lstm:N or lstm:N:L"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for BenchmarkSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BenchmarkSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Maxima used to scale each channel to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub precip_max: f64,
    pub pot_loss_max: f64,
    pub out_max: f64,
}

impl NormStats {
    /// Maxima over Train-labelled timesteps only.
    pub fn from_train(fs: &ForcingSeries, mask: &PartitionMask) -> Result<Self> {
        let obs = fs.require_obs()?;
        let idx = mask.indices(Label::Train);
        let max = |xs: &[f64], name: &str| -> Result<f64> {
            let m = idx.iter().map(|&i| xs[i]).fold(0.0, f64::max);
            if m > 0.0 {
                Ok(m)
            } else {
                Err(Error::DegenerateChannel(name.to_string()))
            }
        };
        Ok(NormStats {
            precip_max: max(fs.precip(), "precip")?,
            pot_loss_max: max(fs.pot_loss(), "pot_loss")?,
            out_max: max(obs, "streamflow")?,
        })
    }
}

/// A benchmark bound to normalized forcing.
pub struct BenchmarkModel {
    pub spec: BenchmarkSpec,
    pub norm: NormStats,
    u: Vec<f64>,
    d: Vec<f64>,
}

impl BenchmarkModel {
    pub fn new(spec: BenchmarkSpec, fs: &ForcingSeries, norm: NormStats) -> Result<Self> {
        spec.validate()?;
        if spec.family == Family::Lstm && spec.seq_len.is_none() {
            return Err(Error::Contract("LSTM model needs a concrete sequence length".into()));
        }
        Ok(BenchmarkModel {
            spec,
            norm,
            u: fs.precip().iter().map(|v| v / norm.precip_max).collect(),
            d: fs.pot_loss().iter().map(|v| v / norm.pot_loss_max).collect(),
        })
    }

    /// De-normalized predictions, negatives clamped to zero, and the number
    /// of clamped days.
    pub fn predict(&self, params: &[f64]) -> Result<(Vec<f64>, usize)> {
        let raw = self.forward(params)?;
        let mut clamped = 0;
        let out = raw
            .into_iter()
            .map(|v| {
                if v < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    v
                }
            })
            .collect();
        Ok((out, clamped))
    }
}

struct Recurrent<R> {
    wx: Vec<[R; 2]>,
    wh: Vec<Vec<R>>,
    b: Vec<R>,
}

impl<R: Real> Recurrent<R> {
    fn take(n: usize, it: &mut impl Iterator<Item = R>) -> Self {
        let mut wx = Vec::with_capacity(n);
        let mut wh = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            wx.push([it.next().expect("layout"), it.next().expect("layout")]);
            wh.push((0..n).map(|_| it.next().expect("layout")).collect());
            b.push(it.next().expect("layout"));
        }
        Recurrent { wx, wh, b }
    }

    fn pre(&self, j: usize, u: f64, d: f64, h: &[R]) -> R {
        let mut s = self.b[j] + self.wx[j][0] * u + self.wx[j][1] * d;
        for (w, hk) in self.wh[j].iter().zip(h) {
            s = s + *w * *hk;
        }
        s
    }
}

fn lstm_step<R: Real>(g: &[Recurrent<R>; 4], u: f64, d: f64, h: &[R], c: &[R]) -> (Vec<R>, Vec<R>) {
    let n = h.len();
    let mut h_new = Vec::with_capacity(n);
    let mut c_new = Vec::with_capacity(n);
    for j in 0..n {
        let i = g[0].pre(j, u, d, h).sigmoid();
        let f = g[1].pre(j, u, d, h).sigmoid();
        let cand = g[2].pre(j, u, d, h).tanh();
        let o = g[3].pre(j, u, d, h).sigmoid();
        let cj = f * c[j] + i * cand;
        h_new.push(o * cj.tanh());
        c_new.push(cj);
    }
    (h_new, c_new)
}

impl Model for BenchmarkModel {
    fn param_names(&self) -> Vec<String> {
        self.spec.param_names()
    }

    fn forward<R: Real>(&self, p: &[R]) -> Result<Vec<R>> {
        let n_expected = self.spec.param_count();
        if p.len() != n_expected {
            return Err(Error::Contract(format!(
                "{} has {n_expected} parameters, got {}",
                self.spec,
                p.len()
            )));
        }
        let t_len = self.u.len();
        let n = self.spec.n_hidden;
        let scale = self.norm.out_max;
        let mut out = Vec::with_capacity(t_len);
        let mut it = p.iter().copied();
        match self.spec.family {
            Family::Arx => {
                let (w_prev, w_u, w_d, b) = (p[0], p[1], p[2], p[3]);
                let mut prev = R::constant(0.0);
                for t in 0..t_len {
                    let y = w_prev * prev + w_u * self.u[t] + w_d * self.d[t] + b;
                    out.push(y * scale);
                    prev = y;
                }
            }
            Family::Ann => {
                let mut hidden = Vec::with_capacity(n);
                for _ in 0..n {
                    let w: Vec<R> = (0..3).map(|_| it.next().expect("layout")).collect();
                    hidden.push((w, it.next().expect("layout")));
                }
                let v: Vec<R> = (0..n).map(|_| it.next().expect("layout")).collect();
                let c = it.next().expect("layout");
                let mut prev = R::constant(0.0);
                for t in 0..t_len {
                    let mut y = c;
                    for (j, (w, b)) in hidden.iter().enumerate() {
                        let a = *b + w[0] * prev + w[1] * self.u[t] + w[2] * self.d[t];
                        y = y + v[j] * a.sigmoid();
                    }
                    out.push(y * scale);
                    prev = y;
                }
            }
            Family::Rnn => {
                let cell = Recurrent::take(n, &mut it);
                let wo: Vec<R> = (0..n).map(|_| it.next().expect("layout")).collect();
                let bo = it.next().expect("layout");
                let mut h = vec![R::constant(0.0); n];
                for t in 0..t_len {
                    h = (0..n).map(|j| cell.pre(j, self.u[t], self.d[t], &h).tanh()).collect();
                    out.push(readout(&wo, bo, &h) * scale);
                }
            }
            Family::Lstm => {
                let gates = [
                    Recurrent::take(n, &mut it),
                    Recurrent::take(n, &mut it),
                    Recurrent::take(n, &mut it),
                    Recurrent::take(n, &mut it),
                ];
                let wo: Vec<R> = (0..n).map(|_| it.next().expect("layout")).collect();
                let bo = it.next().expect("layout");
                let len = self.spec.seq_len.expect("checked in new");
                for t in 0..t_len {
                    let mut h = vec![R::constant(0.0); n];
                    let mut c = vec![R::constant(0.0); n];
                    for s in (t + 1).saturating_sub(len)..=t {
                        (h, c) = lstm_step(&gates, self.u[s], self.d[s], &h, &c);
                    }
                    out.push(readout(&wo, bo, &h) * scale);
                }
            }
        }
        if let Some(t) = out.iter().position(|v| !v.value().is_finite()) {
            return Err(Error::fault_at_step(t, format!("{} produced a non-finite prediction", self.spec)));
        }
        Ok(out)
    }
}

fn readout<R: Real>(w: &[R], b: R, h: &[R]) -> R {
    let mut y = b;
    for (wj, hj) in w.iter().zip(h) {
        y = y + *wj * *hj;
    }
    y
}

/// Train settings for the benchmark suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    /// Overrides the per-family default epochs when set.
    pub epochs: Option<usize>,
    pub lr: f64,
    pub seq_lens: Vec<usize>,
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seeds: crate::training::DEFAULT_SEEDS.to_vec(),
            epochs: None,
            lr: 1.25e-2,
            seq_lens: LSTM_SEQ_LENS.to_vec(),
            jobs: 0,
        }
    }
}

/// Best run of one benchmark plus its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub spec: BenchmarkSpec,
    pub norm: NormStats,
    pub runs: Vec<RunResult>,
    pub best_seed: u64,
    pub clamped_days: usize,
    pub predictions: Vec<f64>,
}

impl BenchmarkResult {
    pub fn best(&self) -> &RunResult {
        self.runs
            .iter()
            .find(|r| r.seed == self.best_seed)
            .expect("best seed is one of the runs")
    }
}

/// Train one concrete benchmark across seeds.
pub fn train_benchmark(
    spec: BenchmarkSpec,
    fs: &ForcingSeries,
    mask: &PartitionMask,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkResult> {
    let norm = NormStats::from_train(fs, mask)?;
    let model = BenchmarkModel::new(spec, fs, norm)?;
    let objective = Objective::new(fs, mask)?;
    let tc = TrainConfig {
        seeds: cfg.seeds.clone(),
        epochs: cfg.epochs.unwrap_or_else(|| spec.epochs_default()),
        lr: LrSchedule::constant(cfg.lr),
        jobs: cfg.jobs,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let names = spec.param_names();
    let runs = parallel_map(cfg.jobs, &tc.seeds, |&seed| {
        let init = init_params(&names, seed, tc.init_range, &BTreeMap::new());
        train_seed(&model, &objective, init, &tc, tc.epochs, seed)
    });
    let best_seed = best_seed_or_fault(&spec.to_string(), &runs)?;
    let best = runs.iter().find(|r| r.seed == best_seed).expect("selected");
    let (predictions, clamped_days) = model.predict(best.params.values())?;
    if clamped_days > 0 {
        log::info!("{spec}: clamped {clamped_days} negative predictions to zero");
    }
    Ok(BenchmarkResult {
        spec,
        norm,
        runs,
        best_seed,
        clamped_days,
        predictions,
    })
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub params: usize,
    pub annual: PercentileSummary,
    pub select: Option<f64>,
    pub test: Option<f64>,
    /// Set when the model failed; the numeric fields are then meaningless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Outcome of the suite: one row per requested benchmark in request order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<ComparisonRow>,
    pub results: Vec<BenchmarkResult>,
}

/// Train every requested benchmark; LSTMs without a window length are
/// searched over `cfg.seq_lens` and the best Select score kept. Faults in
/// one model are recorded in its row.
pub fn benchmark_suite(
    fs: &ForcingSeries,
    mask: &PartitionMask,
    specs: &[BenchmarkSpec],
    cfg: &BenchmarkConfig,
    wy_start_month: u32,
) -> Result<BenchmarkReport> {
    let obs = fs.require_obs()?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &spec in specs {
        let candidates: Vec<BenchmarkSpec> = match (spec.family, spec.seq_len) {
            (Family::Lstm, None) => cfg
                .seq_lens
                .iter()
                .map(|&l| BenchmarkSpec::lstm(spec.n_hidden, Some(l)))
                .collect(),
            _ => vec![spec],
        };
        let mut best: Option<BenchmarkResult> = None;
        let mut last_err = None;
        for c in candidates {
            match train_benchmark(c, fs, mask, cfg) {
                Ok(r) => {
                    let score = r.best().selection_score().unwrap_or(f64::NEG_INFINITY);
                    let better = best
                        .as_ref()
                        .is_none_or(|b| score > b.best().selection_score().unwrap_or(f64::NEG_INFINITY));
                    if better {
                        best = Some(r);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        match best {
            Some(r) => {
                let annual = annual_distribution(&r.predictions, obs, fs.dates(), wy_start_month)?;
                let b = r.best();
                rows.push(ComparisonRow {
                    model: r.spec.to_string(),
                    params: r.spec.param_count(),
                    annual: annual.kge_ss,
                    select: b.scores.select,
                    test: b.scores.test,
                    error: None,
                });
                results.push(r);
            }
            None => {
                let e = last_err.map_or_else(|| "no candidate trained".to_string(), |e| e.to_string());
                log::warn!("benchmark {spec} failed: {e}");
                rows.push(ComparisonRow {
                    model: spec.to_string(),
                    params: spec.param_count(),
                    annual: PercentileSummary {
                        min: f64::NAN,
                        p5: f64::NAN,
                        p25: f64::NAN,
                        p50: f64::NAN,
                        p75: f64::NAN,
                        p95: f64::NAN,
                    },
                    select: None,
                    test: None,
                    error: Some(e),
                });
            }
        }
    }
    Ok(BenchmarkReport { rows, results })
}
