//! End-to-end experiments: data, staged training, benchmarks and reports
//! driven by one JSON plan.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmarks::{benchmark_suite, BenchmarkConfig, BenchmarkReport, BenchmarkSpec};
use crate::data::{generate_synthetic, ingest_forcing, partition_by_year, ForcingSeries, PartitionMask, SyntheticTruth, SPLIT_PATTERN};
use crate::error::{Error, Result};
use crate::metrics::PercentileSummary;
use crate::persist::{read_json, write_json, write_text};
use crate::protocol::{run_protocol, write_failure, write_ledger, ProtocolOutcome, ProtocolPlan, StageSpec};
use crate::report::{hydrograph, ReportEntry, ReportFormat, ReportSet};
use crate::training::{McpModel, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    /// Inline truth, or `truth_file` pointing to one; neither uses
    /// [`SyntheticTruth::example`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<SyntheticTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_file: Option<PathBuf>,
    pub years: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    /// Overrides `train.sim.wy_start_month` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wy_start_month: Option<u32>,
    #[serde(default)]
    pub train: TrainConfig,
    pub stages: Vec<StageSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub benchmarks: Vec<BenchmarkSpec>,
    #[serde(default)]
    pub benchmark_config: BenchmarkConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hydrograph_years: Vec<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentPlan {
    /// Read a plan; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut plan: ExperimentPlan = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        plan.resolve_paths(base);
        Ok(plan)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = self.data.as_mut() {
            fix(d);
        }
        if let Some(f) = self.synthetic.as_mut().and_then(|s| s.truth_file.as_mut()) {
            fix(f);
        }
        if let Some(o) = self.out.as_mut() {
            fix(o);
        }
    }

    pub fn wy_start_month(&self) -> u32 {
        self.wy_start_month.unwrap_or(self.train.sim.wy_start_month)
    }

    pub fn protocol(&self) -> ProtocolPlan {
        let mut train = self.train.clone();
        train.sim.wy_start_month = self.wy_start_month();
        ProtocolPlan {
            stages: self.stages.clone(),
            train,
        }
    }

    /// Load or manufacture the forcing named by the plan.
    pub fn forcing(&self) -> Result<ForcingSeries> {
        match (&self.data, &self.synthetic) {
            (Some(path), None) => ingest_forcing(path),
            (None, Some(src)) => {
                let truth = match (&src.truth, &src.truth_file) {
                    (Some(t), None) => t.clone(),
                    (None, Some(f)) => {
                        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                        SyntheticTruth::from_json(&text)?
                    }
                    (None, None) => SyntheticTruth::example(),
                    (Some(_), Some(_)) => {
                        return Err(Error::Plan("synthetic source takes `truth` or `truth_file`, not both".into()))
                    }
                };
                generate_synthetic(&truth, src.years)
            }
            _ => Err(Error::Plan("plan needs exactly one of `data`, `synthetic`".into())),
        }
    }
}

/// Headline numbers for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub model: String,
    pub kind: String,
    pub params: usize,
    pub best_seed: Option<u64>,
    pub annual: Option<PercentileSummary>,
    pub train: Option<f64>,
    pub select: Option<f64>,
    pub test: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub out: PathBuf,
    pub protocol: ProtocolOutcome,
    pub benchmarks: Option<BenchmarkReport>,
    pub comparison: Vec<ComparisonEntry>,
    pub report: ReportSet,
}

/// Run a plan end to end. On error, results of finished stages stay on disk
/// and `failure.json` describes what stopped the run.
pub fn run_experiment(plan: &ExperimentPlan, resume: bool) -> Result<ExperimentOutcome> {
    let out = plan
        .out
        .clone()
        .ok_or_else(|| Error::Plan("plan has no output directory".into()))?;
    let failure = out.join("failure.json");
    if failure.exists() {
        std::fs::remove_file(&failure).map_err(|e| Error::io(&failure, e))?;
    }
    let r = execute(plan, &out, resume);
    if let Err(e) = &r {
        // a failing stage has already written its own manifest
        if !failure.exists() {
            if let Err(w) = write_failure(&out, None, e) {
                log::error!("could not write failure manifest: {w}");
            }
        }
    }
    r
}

fn execute(plan: &ExperimentPlan, out: &Path, resume: bool) -> Result<ExperimentOutcome> {
    let protocol_plan = plan.protocol();
    crate::protocol::validate_plan(&protocol_plan)?;
    for b in &plan.benchmarks {
        b.validate()?;
    }
    let wy = plan.wy_start_month();
    let fs = plan.forcing()?;
    let mask = partition_by_year(&fs, &SPLIT_PATTERN, wy)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("plan.json"), plan)?;
    fs.save_csv(out.join("forcing.csv"))?;
    save_mask(&out.join("mask.csv"), &fs, &mask)?;

    let protocol = run_protocol(&protocol_plan, &fs, &mask, Some(out), resume)?;
    write_ledger(out, &protocol.ledger)?;

    let mut entries = Vec::new();
    let mut comparison = Vec::new();
    let mut series = Vec::new();
    for stage in &protocol.stages {
        let arch = &stage.outcome.arch;
        let best = stage.best();
        let trace = McpModel::new(arch, &fs, &protocol_plan.train.sim)?.trace(best.params.values(), &fs)?;
        let name = arch.canonical();
        let entry = ReportEntry::from_simulation(&name, best.params.len(), &fs, &trace.o, wy)?;
        comparison.push(ComparisonEntry {
            model: name.clone(),
            kind: "mcp".into(),
            params: best.params.len(),
            best_seed: Some(best.seed),
            annual: Some(entry.annual.kge_ss),
            train: best.scores.train,
            select: best.scores.select,
            test: best.scores.test,
            error: None,
        });
        write_annual_csv(&out.join("reports").join("annual").join(format!("{}.csv", stage.id)), &entry)?;
        entries.push(entry);
        series.push((name, trace.o));
    }

    let benchmarks = if plan.benchmarks.is_empty() {
        None
    } else {
        let mut cfg = plan.benchmark_config.clone();
        cfg.jobs = plan.train.jobs;
        let report = benchmark_suite(&fs, &mask, &plan.benchmarks, &cfg, wy)?;
        for row in &report.rows {
            let result = report.results.iter().find(|r| r.spec.to_string() == row.model);
            comparison.push(ComparisonEntry {
                model: row.model.clone(),
                kind: "benchmark".into(),
                params: row.params,
                best_seed: result.map(|r| r.best_seed),
                annual: row.error.is_none().then_some(row.annual),
                train: result.and_then(|r| r.best().scores.train),
                select: row.select,
                test: row.test,
                error: row.error.clone(),
            });
            if let Some(r) = result {
                let entry = ReportEntry::from_simulation(&row.model, row.params, &fs, &r.predictions, wy)?;
                write_annual_csv(&out.join("reports").join("annual").join(format!("{}.csv", row.model.replace(':', "-"))), &entry)?;
                entries.push(entry);
                series.push((row.model.clone(), r.predictions.clone()));
            }
        }
        write_json(&out.join("reports").join("benchmarks.json"), &report)?;
        Some(report)
    };

    let reports = out.join("reports");
    let set = ReportSet::new(entries)?;
    set.emit(&reports, "annual", &[ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg])?;
    write_json(&reports.join("comparison.json"), &comparison)?;
    for &year in &plan.hydrograph_years {
        hydrograph(&fs, wy, year, &series)?.emit(&reports)?;
    }
    Ok(ExperimentOutcome {
        out: out.to_path_buf(),
        protocol,
        benchmarks,
        comparison,
        report: set,
    })
}

fn save_mask(path: &Path, fs: &ForcingSeries, mask: &PartitionMask) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    mask.write_csv(fs.dates(), std::io::BufWriter::new(f))
}

/// Year-by-year skill of one run.
pub fn write_annual_csv(path: &Path, entry: &ReportEntry) -> Result<()> {
    let mut s = String::from("water_year,kge_ss,kge,alpha,beta,rho,excluded\n");
    for y in &entry.annual.years {
        match y.metrics {
            Some(m) => s.push_str(&format!(
                "{},{},{},{},{},{},false\n",
                y.water_year, m.kge_ss, m.kge, m.alpha, m.beta, m.rho
            )),
            None => s.push_str(&format!("{},,,,,,true\n", y.water_year)),
        }
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_needs_exactly_one_source() {
        let plan: ExperimentPlan = serde_json::from_str(r#"{"stages": [{"arch": "MC{O=const,L=const}"}]}"#).unwrap();
        assert!(matches!(plan.forcing(), Err(Error::Plan(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: std::result::Result<ExperimentPlan, _> =
            serde_json::from_str(r#"{"stages": [], "stagse": []}"#);
        assert!(r.is_err());
    }

    #[test]
    fn relative_paths_follow_the_plan_file() {
        let mut plan: ExperimentPlan =
            serde_json::from_str(r#"{"data": "d.csv", "out": "/abs/out", "stages": []}"#).unwrap();
        plan.resolve_paths(Path::new("/plans"));
        assert_eq!(plan.data.unwrap(), PathBuf::from("/plans/d.csv"));
        assert_eq!(plan.out.unwrap(), PathBuf::from("/abs/out"));
    }
}
