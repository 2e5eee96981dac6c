//! ADAM, multi-seed full-batch training, best-run selection and scaling
//! pre-training.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureSpec;
use crate::autodiff::{check_grad, grad_with, GradCheckReport, Real, Tape};
use crate::cell::{run_cell, spun_up_forcing, SimOptions, SimulationTrace};
use crate::data::{compute_named_scaling, ForcingSeries, Label, PartitionMask, ScalingMap};
use crate::error::{Error, Result};
use crate::metrics::kge_terms;
use crate::params::ParameterVector;

/// Seeds used when none are given: nine from the reference protocol plus 1111.
pub const DEFAULT_SEEDS: [u64; 10] = [2925, 9998, 2025, 2525, 3410, 9899, 5555, 2520, 2828, 1111];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected ADAM update of `params` in place. A non-finite gradient
/// leaves both state and parameters untouched.
pub fn adam_step(state: &mut AdamState, grad: &[f64], params: &mut [f64]) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam: {} parameters, {} gradient entries, {} moments",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericFault {
            location: format!("gradient component {i}"),
            message: format!("non-finite gradient {}", grad[i]),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Two-level learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    /// First epoch (0-based) that uses `after`.
    pub switch_epoch: usize,
    pub after: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 2.5e-2,
            switch_epoch: 300,
            after: 1.25e-2,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            switch_epoch: 0,
            after: lr,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if epoch < self.switch_epoch {
            self.initial
        } else {
            self.after
        }
    }
}

/// Stop when the loss moved less than `tol` over the last `window` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub window: usize,
    pub tol: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence { window: 100, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub init_range: (f64, f64),
    pub convergence: Option<Convergence>,
    pub sim: SimOptions,
    /// Seed of the single unscaled pre-training run.
    pub pretrain_seed: u64,
    /// Concurrent seeds; 0 uses every available core.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seeds: DEFAULT_SEEDS.to_vec(),
            epochs: 5000,
            lr: LrSchedule::default(),
            init_range: (-1.0, 1.0),
            convergence: None,
            sim: SimOptions::default(),
            pretrain_seed: DEFAULT_SEEDS[0],
            jobs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Validation("at least one seed is required".into()));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Validation(format!("seed {s} listed twice")));
            }
        }
        let (lo, hi) = self.init_range;
        if !(lo < hi) {
            return Err(Error::Validation(format!("empty init range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Initial value of one parameter: ChaCha8 keyed by `seed`, on a stream
/// derived from the parameter name, so adding parameters never changes the
/// draws of existing ones.
pub fn init_value(seed: u64, name: &str, range: (f64, f64)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng.random_range(range.0..range.1)
}

/// Inherited values where present, fresh uniform draws elsewhere.
pub fn init_params(names: &[String], seed: u64, range: (f64, f64), inherited: &BTreeMap<String, f64>) -> Vec<f64> {
    names
        .iter()
        .map(|n| inherited.get(n).copied().unwrap_or_else(|| init_value(seed, n, range)))
        .collect()
}

/// A differentiable simulator producing one output per forcing day.
pub trait Model: Sync {
    fn param_names(&self) -> Vec<String>;
    fn forward<R: Real>(&self, params: &[R]) -> Result<Vec<R>>;
}

/// Mass-conserving cell bound to a forcing series.
pub struct McpModel<'a> {
    pub arch: &'a ArchitectureSpec,
    u: Vec<f64>,
    d: Vec<f64>,
    skip: usize,
}

impl<'a> McpModel<'a> {
    pub fn new(arch: &'a ArchitectureSpec, fs: &ForcingSeries, opts: &SimOptions) -> Result<Self> {
        arch.validate()?;
        let (u, d, skip) = spun_up_forcing(fs, opts)?;
        Ok(McpModel { arch, u, d, skip })
    }

    pub fn trace(&self, params: &[f64], fs: &ForcingSeries) -> Result<SimulationTrace> {
        let (x0, rows) = run_cell(self.arch, params, &self.u, &self.d, self.skip)?;
        Ok(SimulationTrace::from_rows(fs.dates(), x0, &rows))
    }
}

impl Model for McpModel<'_> {
    fn param_names(&self) -> Vec<String> {
        self.arch.param_names()
    }

    fn forward<R: Real>(&self, params: &[R]) -> Result<Vec<R>> {
        let (_, rows) = run_cell(self.arch, params, &self.u, &self.d, self.skip)?;
        Ok(rows.into_iter().map(|r| r.o).collect())
    }
}

/// KGE_ss on each subset; `None` where a subset is empty or degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubsetScores {
    pub train: Option<f64>,
    pub select: Option<f64>,
    pub test: Option<f64>,
}

impl SubsetScores {
    pub fn get(&self, label: Label) -> Option<f64> {
        match label {
            Label::Train => self.train,
            Label::Select => self.select,
            Label::Test => self.test,
        }
    }
}

/// Masked KGE_ss loss over a fixed observation series.
pub struct Objective {
    idx: [Vec<usize>; 3],
    obs: [Vec<f64>; 3],
    n: usize,
}

impl Objective {
    pub fn new(fs: &ForcingSeries, mask: &PartitionMask) -> Result<Self> {
        let obs = fs.require_obs()?;
        if mask.len() != fs.len() {
            return Err(Error::Contract(format!(
                "mask covers {} steps, forcing has {}",
                mask.len(),
                fs.len()
            )));
        }
        let idx = Label::ALL.map(|l| mask.indices(l));
        if idx[0].len() < 2 {
            return Err(Error::InsufficientData("training subset has fewer than 2 timesteps".into()));
        }
        let obs = idx.clone().map(|ix| ix.iter().map(|&i| obs[i]).collect());
        Ok(Objective { idx, obs, n: fs.len() })
    }

    fn subset<R: Real>(&self, k: usize, o: &[R]) -> Vec<R> {
        self.idx[k].iter().map(|&i| o[i]).collect()
    }

    /// `1 - KGE_ss` on the training subset.
    pub fn loss<R: Real>(&self, o: &[R]) -> Result<R> {
        if o.len() != self.n {
            return Err(Error::Contract(format!("model produced {} outputs for {} steps", o.len(), self.n)));
        }
        Ok(kge_terms(&self.subset(0, o), &self.obs[0])?.kge_ss.rsub(1.0))
    }

    pub fn scores(&self, o: &[f64]) -> SubsetScores {
        let score = |k: usize| -> Option<f64> {
            if self.idx[k].len() < 2 {
                return None;
            }
            kge_terms(&self.subset(k, o), &self.obs[k])
                .ok()
                .map(|t| t.kge_ss)
                .filter(|v| v.is_finite())
        };
        SubsetScores {
            train: score(0),
            select: score(1),
            test: score(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train: Option<f64>,
    pub select: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub status: RunStatus,
    /// Final parameters (last finite iterate for failed runs).
    pub params: ParameterVector,
    pub history: Vec<EpochRecord>,
    /// Scores of the final parameters.
    pub scores: SubsetScores,
    pub epochs_run: usize,
    pub converged_at: Option<usize>,
}

impl RunResult {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Selection score: Select-subset KGE_ss, or Train when no Select subset exists.
    pub fn selection_score(&self) -> Option<f64> {
        self.scores.select.or(self.scores.train)
    }
}

/// Full-batch ADAM from `init` for one seed. Faults end the run as failed
/// instead of propagating.
pub fn train_seed<M: Model>(
    model: &M,
    objective: &Objective,
    init: Vec<f64>,
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> RunResult {
    let names = model.param_names();
    let mut values = init;
    let mut adam = AdamState::new(values.len(), cfg.lr.at(0));
    let mut tape = Tape::new();
    let mut history = Vec::with_capacity(epochs);
    let mut status = RunStatus::Completed;
    let mut converged_at = None;
    for epoch in 0..epochs {
        let step = grad_with(&mut tape, &values, |p| {
            let o = model.forward(p)?;
            let loss = objective.loss(&o)?;
            let vals: Vec<f64> = o.iter().map(|v| v.value()).collect();
            Ok((loss, objective.scores(&vals)))
        });
        let (loss, g, scores) = match step {
            Ok(r) => r,
            Err(e) => {
                status = RunStatus::Failed {
                    reason: format!("epoch {epoch}: {e}"),
                };
                break;
            }
        };
        history.push(EpochRecord {
            epoch,
            loss,
            train: scores.train,
            select: scores.select,
            test: scores.test,
        });
        adam.lr = cfg.lr.at(epoch);
        if let Err(e) = adam_step(&mut adam, &g, &mut values) {
            status = RunStatus::Failed {
                reason: format!("epoch {epoch}: {e}"),
            };
            break;
        }
        if let Some(c) = cfg.convergence {
            let n = history.len();
            if n > c.window && (history[n - 1].loss - history[n - 1 - c.window].loss).abs() < c.tol {
                converged_at = Some(epoch);
                break;
            }
        }
    }
    let epochs_run = history.len();
    let mut scores = SubsetScores::default();
    if status == RunStatus::Completed {
        match model.forward(&values) {
            Ok(o) if o.iter().all(|v| v.is_finite()) => scores = objective.scores(&o),
            Ok(_) => {
                status = RunStatus::Failed {
                    reason: "non-finite output at final parameters".into(),
                }
            }
            Err(e) => status = RunStatus::Failed { reason: e.to_string() },
        }
    }
    let params = ParameterVector::new(names, values).expect("model names are distinct");
    RunResult {
        seed,
        status,
        params,
        history,
        scores,
        epochs_run,
        converged_at,
    }
}

/// Analytic versus central-difference gradient of the training loss at `params`.
pub fn check_model_grad<M: Model>(
    model: &M,
    objective: &Objective,
    params: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    check_grad(params, h, tol, |p| objective.loss(&model.forward(p)?))
}

/// Highest selection score among completed runs; ties go to the lowest seed.
pub fn select_best(runs: &[RunResult]) -> Option<&RunResult> {
    runs.iter()
        .filter(|r| r.completed())
        .filter_map(|r| r.selection_score().map(|s| (s, r)))
        .max_by(|(sa, ra), (sb, rb)| sa.total_cmp(sb).then(rb.seed.cmp(&ra.seed)))
        .map(|(_, r)| r)
}

/// Run `f` for each item on a pool bounded by `jobs` (0 = all cores),
/// keeping input order.
pub(crate) fn parallel_map<T: Sync, U: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    if jobs == 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build();
    match pool {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

/// Multi-seed results for one architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub arch: ArchitectureSpec,
    pub runs: Vec<RunResult>,
    pub best_seed: u64,
    pub inherited: Vec<String>,
    pub fresh: Vec<String>,
}

impl TrainOutcome {
    pub fn best(&self) -> &RunResult {
        self.runs
            .iter()
            .find(|r| r.seed == self.best_seed)
            .expect("best seed is one of the runs")
    }
}

/// Train `arch` from every seed (a single seed when nothing is freshly
/// initialized) and select the best run.
pub fn train_architecture(
    arch: &ArchitectureSpec,
    fs: &ForcingSeries,
    mask: &PartitionMask,
    cfg: &TrainConfig,
    inherited: &BTreeMap<String, f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = McpModel::new(arch, fs, &cfg.sim)?;
    let objective = Objective::new(fs, mask)?;
    let names = arch.param_names();
    for n in inherited.keys() {
        if !names.contains(n) {
            return Err(Error::Plan(format!("inherited `{n}` is not a parameter of {}", arch.canonical())));
        }
    }
    let fresh: Vec<String> = names.iter().filter(|n| !inherited.contains_key(*n)).cloned().collect();
    let seeds: Vec<u64> = if fresh.is_empty() {
        vec![cfg.seeds[0]]
    } else {
        cfg.seeds.clone()
    };
    let runs = parallel_map(cfg.jobs, &seeds, |&seed| {
        let init = init_params(&names, seed, cfg.init_range, inherited);
        train_seed(&model, &objective, init, cfg, cfg.epochs, seed)
    });
    finish_outcome(arch.clone(), runs, inherited.keys().cloned().collect(), fresh)
}

/// Best seed of a set of runs, or a fault listing why every run failed.
pub(crate) fn best_seed_or_fault(what: &str, runs: &[RunResult]) -> Result<u64> {
    if let Some(r) = select_best(runs) {
        return Ok(r.seed);
    }
    let reasons: Vec<String> = runs
        .iter()
        .map(|r| match &r.status {
            RunStatus::Failed { reason } => format!("seed {}: {reason}", r.seed),
            RunStatus::Completed => format!("seed {}: no selection score", r.seed),
        })
        .collect();
    Err(Error::NumericFault {
        location: what.to_string(),
        message: format!("every seed failed ({})", reasons.join("; ")),
    })
}

pub(crate) fn finish_outcome(
    arch: ArchitectureSpec,
    runs: Vec<RunResult>,
    inherited: Vec<String>,
    fresh: Vec<String>,
) -> Result<TrainOutcome> {
    let best_seed = best_seed_or_fault(&arch.canonical(), &runs)?;
    Ok(TrainOutcome {
        arch,
        runs,
        best_seed,
        inherited,
        fresh,
    })
}

/// Scaling for `target` computed from a simulation of `model_arch` with `params`:
/// state statistics from the simulated state, potential-loss statistics from
/// the forcing.
pub fn scaling_from_run(
    target: &ArchitectureSpec,
    model_arch: &ArchitectureSpec,
    params: &[f64],
    fs: &ForcingSeries,
    opts: &SimOptions,
) -> Result<ScalingMap> {
    let mut out = ScalingMap::new();
    let keys = target.scaling_keys();
    if keys.is_empty() {
        return Ok(out);
    }
    let trace = if keys.contains(&"state") {
        Some(McpModel::new(model_arch, fs, opts)?.trace(params, fs)?)
    } else {
        None
    };
    for key in keys {
        let stats = match key {
            "state" => compute_named_scaling("state", &trace.as_ref().expect("simulated").x_before())?,
            "pot_loss" => compute_named_scaling("pot_loss", fs.pot_loss())?,
            other => return Err(Error::Validation(format!("unknown scaling channel `{other}`"))),
        };
        out.insert(key.to_string(), stats);
    }
    Ok(out)
}

/// Train once without standardization from `cfg.pretrain_seed` and derive
/// the scaling statistics for regular training.
pub fn pretrain_for_scaling(
    arch: &ArchitectureSpec,
    fs: &ForcingSeries,
    mask: &PartitionMask,
    cfg: &TrainConfig,
) -> Result<ScalingMap> {
    if !arch.uses_scaling() {
        return Ok(ScalingMap::new());
    }
    let raw = arch.clone().with_scaling(ScalingMap::new());
    let model = McpModel::new(&raw, fs, &cfg.sim)?;
    let objective = Objective::new(fs, mask)?;
    let names = raw.param_names();
    let init = init_params(&names, cfg.pretrain_seed, cfg.init_range, &BTreeMap::new());
    let run = train_seed(&model, &objective, init, cfg, cfg.epochs, cfg.pretrain_seed);
    if let RunStatus::Failed { reason } = &run.status {
        return Err(Error::NumericFault {
            location: format!("pre-training {}", arch.canonical()),
            message: reason.clone(),
        });
    }
    scaling_from_run(arch, &raw, run.params.values(), fs, &cfg.sim)
}
