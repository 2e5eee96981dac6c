use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mcp::benchmarks::{benchmark_suite, BenchmarkConfig, BenchmarkSpec};
use mcp::data::{water_years, DEFAULT_WY_START_MONTH};
use mcp::experiment::{run_experiment, ComparisonEntry, ExperimentPlan};
use mcp::metrics::metric_report;
use mcp::persist::write_json;
use mcp::protocol::{BestRun, StageSpec};
use mcp::report::{hydrograph, ReportEntry, ReportFormat, ReportSet};
use mcp::training::{check_model_grad, init_params, McpModel, Objective, TrainConfig};
use mcp::{
    generate_synthetic, ingest_forcing, partition_by_year, ArchitectureSpec, Error, ForcingSeries, Label,
    PartitionMask, SimOptions, SyntheticTruth, SPLIT_PATTERN,
};

#[derive(Parser)]
#[command(name = "mcp", version, about = "Mass-conserving perceptron rainfall-runoff experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Forcing CSV (date,precip_mm,pet_mm[,streamflow_mm])
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated training seeds
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Worker threads for per-seed training (0 = all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// First month of the water year
    #[arg(long = "wy-start", global = true)]
    wy_start: Option<u32>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a forcing CSV and summarize it
    Ingest,
    /// Generate forcing and streamflow from a known model
    Synth {
        /// Truth JSON (architecture, params, rng_seed, optional climate)
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        years: usize,
        /// Print an example truth file and exit
        #[arg(long)]
        example: bool,
    },
    /// Train architectures from a plan file or the command line
    Train {
        /// Experiment plan JSON
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Architecture(s) to train independently, e.g. "MC{O=sig,L=sig:con}"
        #[arg(long, conflicts_with = "plan", num_args = 1..)]
        arch: Vec<String>,
        /// Skip stages whose configuration hash is unchanged
        #[arg(long)]
        resume: bool,
    },
    /// Train the ARX/ANN/RNN/LSTM benchmark suite
    Benchmark {
        /// e.g. arx,ann:1,rnn:1,lstm:1
        #[arg(long, value_delimiter = ',', default_value = "arx,ann:1,rnn:1,lstm:1")]
        models: Vec<String>,
    },
    /// Score a trained run (stage directory or best.json)
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Annual-distribution tables and figures for trained runs
    Report {
        /// Stage directories or best.json files
        #[arg(long, required = true, num_args = 1..)]
        run: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "csv,json,svg")]
        format: Vec<String>,
        /// Water years to plot as hydrographs
        #[arg(long, value_delimiter = ',')]
        hydrograph: Vec<i32>,
    },
    /// Compare analytic and finite-difference gradients
    GradCheck {
        #[arg(long)]
        arch: String,
        /// Length of the loss window in days
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Number of random parameter points
        #[arg(long, default_value_t = 5)]
        points: usize,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.global.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericFault { .. } => 3,
        Error::Plan(_) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> mcp::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest => ingest(g),
        Command::Synth { truth, years, example } => synth(g, truth.as_deref(), years, example),
        Command::Train { plan, arch, resume } => train(g, plan.as_deref(), &arch, resume),
        Command::Benchmark { models } => benchmark(g, &models),
        Command::Evaluate { run } => evaluate(g, &run),
        Command::Report { run, format, hydrograph } => report(g, &run, &format, &hydrograph),
        Command::GradCheck {
            arch,
            steps,
            points,
            h,
            tol,
        } => grad_check(g, &arch, steps, points, h, tol),
    }
}

fn wy(g: &Global) -> u32 {
    g.wy_start.unwrap_or(DEFAULT_WY_START_MONTH)
}

fn require_data(g: &Global) -> mcp::Result<ForcingSeries> {
    let path = g
        .data
        .as_ref()
        .ok_or_else(|| Error::Validation("--data is required".into()))?;
    ingest_forcing(path)
}

fn require_out(g: &Global) -> mcp::Result<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| Error::Validation("--out is required".into()))
}

fn ingest(g: &Global) -> mcp::Result<()> {
    let fs = require_data(g)?;
    let years = water_years(fs.dates(), wy(g));
    let complete = years.iter().filter(|w| w.complete).count();
    println!("days            {}", fs.len());
    println!("period          {} .. {}", fs.dates()[0], fs.dates()[fs.len() - 1]);
    println!("water years     {} complete, {} partial", complete, years.len() - complete);
    println!("streamflow      {}", if fs.obs_out().is_some() { "yes" } else { "no" });
    println!("sha256          {}", fs.digest());
    if fs.obs_out().is_some() && complete > 0 {
        let mask = partition_by_year(&fs, &SPLIT_PATTERN, wy(g))?;
        for label in Label::ALL {
            println!("{:<16}{} days", label.as_str(), mask.count(label));
        }
        if let Some(out) = &g.out {
            std::fs::create_dir_all(out).map_err(|e| Error::Validation(format!("{}: {e}", out.display())))?;
            let path = out.join("mask.csv");
            let f = std::fs::File::create(&path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
            mask.write_csv(fs.dates(), std::io::BufWriter::new(f))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn synth(g: &Global, truth: Option<&Path>, years: usize, example: bool) -> mcp::Result<()> {
    if example {
        println!("{}", serde_json::to_string_pretty(&SyntheticTruth::example())?);
        return Ok(());
    }
    let truth = match truth {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
            SyntheticTruth::from_json(&text)?
        }
        None => SyntheticTruth::example(),
    };
    let fs = generate_synthetic(&truth, years)?;
    let out = require_out(g)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Validation(format!("{}: {e}", out.display())))?;
    fs.save_csv(out.join("forcing.csv"))?;
    write_json(&out.join("truth.json"), &truth)?;
    println!("wrote {} days to {}", fs.len(), out.join("forcing.csv").display());
    Ok(())
}

fn apply_overrides(g: &Global, cfg: &mut TrainConfig) {
    if let Some(s) = &g.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(e) = g.epochs {
        cfg.epochs = e;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
}

fn train(g: &Global, plan: Option<&Path>, arch: &[String], resume: bool) -> mcp::Result<()> {
    let mut plan = match plan {
        Some(p) => ExperimentPlan::load(p)?,
        None => {
            if arch.is_empty() {
                return Err(Error::Validation("give --plan or at least one --arch".into()));
            }
            ExperimentPlan {
                data: None,
                synthetic: None,
                wy_start_month: None,
                train: TrainConfig::default(),
                stages: arch.iter().map(|a| StageSpec::new(a)).collect(),
                benchmarks: Vec::new(),
                benchmark_config: BenchmarkConfig::default(),
                hydrograph_years: Vec::new(),
                out: None,
            }
        }
    };
    if let Some(d) = &g.data {
        plan.data = Some(d.clone());
        plan.synthetic = None;
    }
    if let Some(o) = &g.out {
        plan.out = Some(o.clone());
    }
    if let Some(m) = g.wy_start {
        plan.wy_start_month = Some(m);
    }
    apply_overrides(g, &mut plan.train);
    if let Some(s) = &g.seeds {
        plan.benchmark_config.seeds = s.clone();
    }
    let outcome = run_experiment(&plan, resume)?;
    for s in &outcome.protocol.stages {
        if s.resumed {
            println!("{}: unchanged, reused", s.id);
        }
    }
    print_comparison(&outcome.comparison);
    println!("results in {}", outcome.out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn print_comparison(rows: &[ComparisonEntry]) {
    println!(
        "{:<36} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "model", "params", "worst", "median", "train", "select", "test"
    );
    for r in rows {
        let (worst, median) = r.annual.map_or((None, None), |a| (Some(a.min), Some(a.p50)));
        println!(
            "{:<36} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}{}",
            r.model,
            r.params,
            fmt_opt(worst),
            fmt_opt(median),
            fmt_opt(r.train),
            fmt_opt(r.select),
            fmt_opt(r.test),
            r.error.as_ref().map_or_else(String::new, |e| format!("  ({e})"))
        );
    }
}

fn benchmark(g: &Global, models: &[String]) -> mcp::Result<()> {
    let specs = models
        .iter()
        .map(|m| m.parse::<BenchmarkSpec>())
        .collect::<mcp::Result<Vec<_>>>()?;
    let fs = require_data(g)?;
    let mask = partition_by_year(&fs, &SPLIT_PATTERN, wy(g))?;
    let mut cfg = BenchmarkConfig::default();
    if let Some(s) = &g.seeds {
        cfg.seeds = s.clone();
    }
    cfg.epochs = g.epochs;
    cfg.jobs = g.jobs.unwrap_or(0);
    let report = benchmark_suite(&fs, &mask, &specs, &cfg, wy(g))?;
    let rows: Vec<ComparisonEntry> = report
        .rows
        .iter()
        .map(|r| {
            let result = report.results.iter().find(|b| b.spec.to_string() == r.model);
            ComparisonEntry {
                model: r.model.clone(),
                kind: "benchmark".into(),
                params: r.params,
                best_seed: result.map(|b| b.best_seed),
                annual: r.error.is_none().then_some(r.annual),
                train: result.and_then(|b| b.best().scores.train),
                select: r.select,
                test: r.test,
                error: r.error.clone(),
            }
        })
        .collect();
    print_comparison(&rows);
    if let Some(out) = &g.out {
        write_json(&out.join("benchmarks.json"), &report)?;
        write_json(&out.join("comparison.json"), &rows)?;
        println!("results in {}", out.display());
    }
    Ok(())
}

/// Forcing for a persisted run: `--data`, else the experiment's own copy.
fn run_data(g: &Global, run: &Path) -> mcp::Result<ForcingSeries> {
    if g.data.is_some() {
        return require_data(g);
    }
    let stage_dir = if run.is_dir() { run } else { run.parent().unwrap_or(Path::new(".")) };
    let guess = stage_dir.join("../../forcing.csv");
    if guess.is_file() {
        ingest_forcing(guess)
    } else {
        Err(Error::Validation(format!(
            "no --data given and no forcing.csv found for {}",
            run.display()
        )))
    }
}

fn simulate_best(best: &BestRun, fs: &ForcingSeries, sim: &SimOptions) -> mcp::Result<Vec<f64>> {
    Ok(McpModel::new(&best.architecture, fs, sim)?
        .trace(best.params.values(), fs)?
        .o)
}

fn evaluate(g: &Global, run: &Path) -> mcp::Result<()> {
    let best = BestRun::load(run)?;
    let fs = run_data(g, run)?;
    let mut sim = best.sim;
    if let Some(m) = g.wy_start {
        sim.wy_start_month = m;
    }
    let o = simulate_best(&best, &fs, &sim)?;
    let mask = partition_by_year(&fs, &SPLIT_PATTERN, sim.wy_start_month)?;
    let report = metric_report(&o, fs.require_obs()?, fs.dates(), &mask, sim.wy_start_month)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &g.out {
        write_json(&out.join("evaluation.json"), &report)?;
    }
    Ok(())
}

fn report(g: &Global, runs: &[PathBuf], formats: &[String], years: &[i32]) -> mcp::Result<()> {
    let formats = formats
        .iter()
        .map(|f| f.parse::<ReportFormat>())
        .collect::<mcp::Result<Vec<_>>>()?;
    let out = require_out(g)?;
    let mut entries = Vec::new();
    let mut series = Vec::new();
    let mut first_fs = None;
    for run in runs {
        let best = BestRun::load(run)?;
        let fs = run_data(g, run)?;
        let mut sim = best.sim;
        if let Some(m) = g.wy_start {
            sim.wy_start_month = m;
        }
        let o = simulate_best(&best, &fs, &sim)?;
        let name = best.architecture.canonical();
        entries.push(ReportEntry::from_simulation(&name, best.params.len(), &fs, &o, sim.wy_start_month)?);
        series.push((name, o));
        first_fs.get_or_insert((fs, sim.wy_start_month));
    }
    let set = ReportSet::new(entries)?;
    for p in set.emit(out, "annual", &formats)? {
        println!("wrote {}", p.display());
    }
    if let Some((fs, wy)) = first_fs {
        for &year in years {
            for p in hydrograph(&fs, wy, year, &series)?.emit(out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn grad_check(g: &Global, arch: &str, steps: usize, points: usize, h: f64, tol: f64) -> mcp::Result<()> {
    let mut arch = ArchitectureSpec::parse(arch)?;
    let seeds = g.seeds.clone().unwrap_or_else(|| (1..=points as u64).collect());
    let fs = match &g.data {
        Some(_) => require_data(g)?,
        None => {
            let mut truth = SyntheticTruth::example();
            truth.climate.spinup_years = 0;
            generate_synthetic(&truth, 1 + steps / 365)?
        }
    };
    if steps < 2 || steps > fs.len() {
        return Err(Error::Validation(format!("--steps must be in 2..={}", fs.len())));
    }
    let fs = fs.slice(0..steps);
    if let Some(bc) = arch.bc_gate.as_mut() {
        bc.u_max = fs.max_precip().max(1e-9);
    }
    let arch = arch.with_scaling(Default::default());
    let sim = SimOptions {
        spinup_years: 0,
        wy_start_month: wy(g),
    };
    let model = McpModel::new(&arch, &fs, &sim)?;
    let objective = Objective::new(&fs, &PartitionMask::uniform(fs.len(), Label::Train))?;
    let names = arch.param_names();
    let mut worst: f64 = 0.0;
    println!("{} ({} params, {steps} steps, h={h:e}, tol={tol:e})", arch.canonical(), names.len());
    for seed in seeds {
        let p = init_params(&names, seed, (-1.0, 1.0), &Default::default());
        let r = check_model_grad(&model, &objective, &p, h, tol)?;
        worst = worst.max(r.max_rel_error);
        println!(
            "seed {seed:>5}: max rel error {:.3e}, nearest kink {:.3e}{}",
            r.max_rel_error,
            r.min_kink_distance,
            if r.flagged.is_empty() {
                String::new()
            } else {
                format!(
                    ", over tolerance: {}",
                    r.flagged.iter().map(|&i| names[i].as_str()).collect::<Vec<_>>().join(" ")
                )
            }
        );
    }
    println!("{} (worst {worst:.3e})", if worst < tol { "PASS" } else { "FAIL" });
    Ok(())
}
