//! Staged training with parameter inheritance, scaling hand-over and run
//! persistence.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/runs/<stage-id>/<seed>/{params.json, history.csv, trace.csv, meta.json}
//! <out>/runs/<stage-id>/best.json
//! <out>/runs/<stage-id>/stage.json
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchDocument, ArchitectureSpec};
use crate::data::{ForcingSeries, Label, PartitionMask, ScalingMap};
use crate::error::{Error, Result};
use crate::persist::{read_json, sha256_hex, write_json};
use crate::training::{
    pretrain_for_scaling, scaling_from_run, train_architecture, McpModel, RunResult, RunStatus, SubsetScores,
    TrainConfig, TrainOutcome,
};

/// Which parent parameters a child takes over. Names absent from the parent
/// are always freshly initialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CopySpec {
    /// Every parameter the two architectures share.
    #[default]
    All,
    /// Only names starting with one of the prefixes (e.g. `"out."`).
    Only(Vec<String>),
    /// Shared names except those starting with one of the prefixes.
    Except(Vec<String>),
}

impl CopySpec {
    pub fn selects(&self, name: &str) -> bool {
        match self {
            CopySpec::All => true,
            CopySpec::Only(p) => p.iter().any(|p| name.starts_with(p.as_str())),
            CopySpec::Except(p) => !p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentLink {
    pub stage: String,
    #[serde(default)]
    pub copy: CopySpec,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Defaults to the architecture identifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub arch: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parents: Vec<ParentLink>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Standardize gate inputs (from pre-training, or from the first parent's
    /// best run when a parent exists).
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl StageSpec {
    pub fn new(arch: &str) -> Self {
        StageSpec {
            id: None,
            arch: arch.to_string(),
            parents: Vec::new(),
            epochs: None,
            standardize: true,
        }
    }

    pub fn child_of(mut self, parent: &str, copy: CopySpec) -> Self {
        self.parents.push(ParentLink {
            stage: parent.to_string(),
            copy,
        });
        self
    }

    pub fn resolved_id(&self) -> Result<String> {
        match &self.id {
            Some(id) => Ok(id.clone()),
            None => Ok(ArchitectureSpec::parse(&self.arch)?.id()),
        }
    }
}

/// Ordered training stages sharing one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolPlan {
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Where each trained parameter of a stage came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub parents: Vec<String>,
    /// Parameter name to the stage it was copied from.
    pub copied: BTreeMap<String, String>,
    pub fresh: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InheritanceLedger {
    pub stages: BTreeMap<String, LedgerEntry>,
}

/// Check ids, grammar and that every parent precedes its child.
pub fn validate_plan(plan: &ProtocolPlan) -> Result<Vec<String>> {
    if plan.stages.is_empty() {
        return Err(Error::Plan("plan has no stages".into()));
    }
    plan.train.validate()?;
    let mut ids: Vec<String> = Vec::new();
    for s in &plan.stages {
        let id = s.resolved_id()?;
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(Error::Plan(format!("invalid stage id `{id}`")));
        }
        if ids.contains(&id) {
            return Err(Error::Plan(format!("duplicate stage id `{id}`")));
        }
        if s.epochs == Some(0) {
            return Err(Error::Plan(format!("stage `{id}` has zero epochs")));
        }
        for p in &s.parents {
            if !ids.contains(&p.stage) {
                return Err(Error::Plan(format!(
                    "stage `{id}` inherits from `{}`, which is not an earlier stage",
                    p.stage
                )));
            }
        }
        ids.push(id);
    }
    Ok(ids)
}

/// Result of one stage, as stored in `stage.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub id: String,
    pub config_hash: String,
    pub outcome: TrainOutcome,
    pub ledger: LedgerEntry,
    /// Whether ADAM moments were reset at the start of this stage (always
    /// true: each stage starts a fresh optimizer).
    pub adam_restarted: bool,
    #[serde(skip)]
    pub resumed: bool,
}

impl StageResult {
    pub fn best(&self) -> &RunResult {
        self.outcome.best()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub stages: Vec<StageResult>,
    pub ledger: InheritanceLedger,
}

impl ProtocolOutcome {
    pub fn stage(&self, id: &str) -> Option<&StageResult> {
        self.stages.iter().find(|s| s.id == id)
    }
}

/// Digest of a partition mask.
pub fn mask_digest(dates: &[chrono::NaiveDate], mask: &PartitionMask) -> String {
    let mut buf = Vec::new();
    mask.write_csv(dates, &mut buf).expect("mask aligned with dates");
    sha256_hex(&buf)
}

#[derive(Serialize)]
struct HashInput<'a> {
    version: &'a str,
    stage: &'a StageSpec,
    parents: Vec<&'a str>,
    train: &'a TrainConfig,
    epochs: usize,
    data: &'a str,
    mask: &'a str,
}

/// Execute `plan` in order. With `out`, every run is persisted, a failing
/// stage leaves `failure.json` next to the completed ones, and with `resume`
/// stages whose stored config hash matches are loaded instead of retrained.
pub fn run_protocol(
    plan: &ProtocolPlan,
    fs: &ForcingSeries,
    mask: &PartitionMask,
    out: Option<&Path>,
    resume: bool,
) -> Result<ProtocolOutcome> {
    let ids = validate_plan(plan)?;
    fs.require_obs()?;
    let data_digest = fs.digest();
    let mask_digest = mask_digest(fs.dates(), mask);
    let mut result = ProtocolOutcome::default();
    for (stage, id) in plan.stages.iter().zip(ids) {
        let epochs = stage.epochs.unwrap_or(plan.train.epochs);
        let parents: Vec<&StageResult> = stage
            .parents
            .iter()
            .map(|p| result.stage(&p.stage).expect("validated order"))
            .collect();
        let hash = sha256_hex(&serde_json::to_vec(&HashInput {
            version: env!("CARGO_PKG_VERSION"),
            stage,
            parents: parents.iter().map(|p| p.config_hash.as_str()).collect(),
            train: &plan.train,
            epochs,
            data: &data_digest,
            mask: &mask_digest,
        })?);
        let stage_dir = out.map(|o| o.join("runs").join(&id));
        if resume {
            if let Some(dir) = &stage_dir {
                if let Some(mut done) = load_stage(dir, &hash)? {
                    log::info!("stage {id}: config unchanged, skipping");
                    done.resumed = true;
                    result.ledger.stages.insert(id.clone(), done.ledger.clone());
                    result.stages.push(done);
                    continue;
                }
            }
        }
        log::info!("stage {id}: training {}", stage.arch);
        let cfg = TrainConfig {
            epochs,
            ..plan.train.clone()
        };
        let done = train_stage(stage, &id, &hash, &parents, fs, mask, &cfg)
            .and_then(|done| {
                if let Some(dir) = &stage_dir {
                    persist_stage(dir, &done, fs, &cfg)?;
                }
                Ok(done)
            })
            .map_err(|e| annotate(e, &id));
        let done = match done {
            Ok(d) => d,
            Err(e) => {
                if let Some(o) = out {
                    if let Err(w) = write_failure(o, Some(&id), &e) {
                        log::error!("could not write failure manifest: {w}");
                    }
                }
                return Err(e);
            }
        };
        result.ledger.stages.insert(id.clone(), done.ledger.clone());
        result.stages.push(done);
    }
    Ok(result)
}

fn annotate(e: Error, id: &str) -> Error {
    match e {
        Error::NumericFault { location, message } => Error::NumericFault {
            location: format!("stage {id}, {location}"),
            message,
        },
        other => other,
    }
}

fn train_stage(
    stage: &StageSpec,
    id: &str,
    hash: &str,
    parents: &[&StageResult],
    fs: &ForcingSeries,
    mask: &PartitionMask,
    cfg: &TrainConfig,
) -> Result<StageResult> {
    let mut arch = ArchitectureSpec::parse(&stage.arch)?;
    if let Some(bc) = arch.bc_gate.as_mut() {
        bc.u_max = train_precip_max(fs, mask);
    }
    let mut ledger = LedgerEntry {
        parents: stage.parents.iter().map(|p| p.stage.clone()).collect(),
        ..LedgerEntry::default()
    };
    let mut inherited = BTreeMap::new();
    for name in arch.param_names() {
        let source = stage.parents.iter().zip(parents).find_map(|(link, parent)| {
            if !link.copy.selects(&name) {
                return None;
            }
            parent.best().params.get(&name).map(|v| (v, &parent.id))
        });
        match source {
            Some((v, from)) => {
                inherited.insert(name.clone(), v);
                ledger.copied.insert(name, from.clone());
            }
            None => ledger.fresh.push(name),
        }
    }
    let scaling: ScalingMap = if !stage.standardize {
        ScalingMap::new()
    } else if let Some(parent) = parents.first() {
        let p = parent.best();
        scaling_from_run(&arch, &parent.outcome.arch, p.params.values(), fs, &cfg.sim)?
    } else {
        pretrain_for_scaling(&arch, fs, mask, cfg)?
    };
    let arch = arch.with_scaling(scaling);
    let outcome = train_architecture(&arch, fs, mask, cfg, &inherited)?;
    Ok(StageResult {
        id: id.to_string(),
        config_hash: hash.to_string(),
        outcome,
        ledger,
        adam_restarted: true,
        resumed: false,
    })
}

/// Largest Train-subset precipitation (whole series when no Train days).
pub fn train_precip_max(fs: &ForcingSeries, mask: &PartitionMask) -> f64 {
    let idx = mask.indices(Label::Train);
    let m = if idx.is_empty() {
        fs.max_precip()
    } else {
        idx.iter().map(|&i| fs.precip()[i]).fold(0.0, f64::max)
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn load_stage(dir: &Path, hash: &str) -> Result<Option<StageResult>> {
    let path = dir.join("stage.json");
    if !path.exists() {
        return Ok(None);
    }
    let stored: StageResult = match read_json(&path) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("ignoring unreadable {}: {e}", path.display());
            return Ok(None);
        }
    };
    Ok((stored.config_hash == hash).then_some(stored))
}

#[derive(Serialize)]
struct RunMeta<'a> {
    stage: &'a str,
    config_hash: &'a str,
    seed: u64,
    architecture: ArchDocument,
    scaling: &'a ScalingMap,
    status: &'a RunStatus,
    epochs_run: usize,
    converged_at: Option<usize>,
    scores: SubsetScores,
    inherited_from: &'a BTreeMap<String, String>,
    fresh: &'a [String],
    adam_restarted: bool,
    sim: crate::cell::SimOptions,
}

/// Contents of `best.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRun {
    pub stage: String,
    pub config_hash: String,
    pub architecture: ArchitectureSpec,
    pub seed: u64,
    pub scores: SubsetScores,
    pub params: crate::params::ParameterVector,
    pub sim: crate::cell::SimOptions,
}

impl BestRun {
    /// Read `best.json` from a stage directory (or the file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join("best.json") } else { path.to_path_buf() };
        let best: BestRun = read_json(&file)?;
        best.params.check_layout(&best.architecture)?;
        Ok(best)
    }
}

fn write_history(path: &Path, history: &[crate::training::EpochRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(f));
    w.write_record(["epoch", "loss", "train_kge_ss", "select_kge_ss", "test_kge_ss"])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for h in history {
        w.write_record([h.epoch.to_string(), h.loss.to_string(), opt(h.train), opt(h.select), opt(h.test)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn persist_stage(dir: &Path, stage: &StageResult, fs: &ForcingSeries, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arch = &stage.outcome.arch;
    let model = McpModel::new(arch, fs, &cfg.sim)?;
    for run in &stage.outcome.runs {
        let run_dir = dir.join(run.seed.to_string());
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        write_json(&run_dir.join("params.json"), &run.params)?;
        write_history(&run_dir.join("history.csv"), &run.history)?;
        if run.completed() {
            let trace = model.trace(run.params.values(), fs)?;
            let path = run_dir.join("trace.csv");
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            trace.write_csv(std::io::BufWriter::new(f))?;
        }
        write_json(
            &run_dir.join("meta.json"),
            &RunMeta {
                stage: &stage.id,
                config_hash: &stage.config_hash,
                seed: run.seed,
                architecture: ArchDocument::from(arch),
                scaling: &arch.scaling,
                status: &run.status,
                epochs_run: run.epochs_run,
                converged_at: run.converged_at,
                scores: run.scores,
                inherited_from: &stage.ledger.copied,
                fresh: &stage.ledger.fresh,
                adam_restarted: stage.adam_restarted,
                sim: cfg.sim,
            },
        )?;
    }
    let best = stage.best();
    write_json(
        &dir.join("best.json"),
        &BestRun {
            stage: stage.id.clone(),
            config_hash: stage.config_hash.clone(),
            architecture: arch.clone(),
            seed: best.seed,
            scores: best.scores,
            params: best.params.clone(),
            sim: cfg.sim,
        },
    )?;
    // stage.json gates --resume, so it is written last
    write_json(&dir.join("stage.json"), stage)?;
    Ok(())
}

/// Directory holding a stage's persisted runs.
pub fn stage_dir(out: &Path, id: &str) -> PathBuf {
    out.join("runs").join(id)
}

/// Write the inheritance ledger as `ledger.json`.
pub fn write_ledger(out: &Path, ledger: &InheritanceLedger) -> Result<()> {
    write_json(&out.join("ledger.json"), ledger)
}

/// Write `failure.json` describing the error that stopped a run.
pub fn write_failure(out: &Path, stage: Option<&str>, err: &Error) -> Result<()> {
    #[derive(Serialize)]
    struct Failure<'a> {
        stage: Option<&'a str>,
        error: String,
        kind: &'a str,
    }
    let kind = match err {
        Error::NumericFault { .. } => "numeric",
        Error::Plan(_) => "plan",
        e if e.is_validation() => "validation",
        _ => "other",
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("failure.json");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let text = serde_json::to_string_pretty(&Failure {
        stage,
        error: err.to_string(),
        kind,
    })?;
    writeln!(f, "{text}").map_err(|e| Error::io(&path, e))
}
