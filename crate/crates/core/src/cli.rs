//! Command-line front end: simulate, fit, importance, benchmark, report.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{self, ExperimentConfig, Method};
use crate::conditional::PermutationMode;
use crate::error::{Error, Result};
use crate::inference::{fit_cross, score_importance, GroupResult, ImportanceConfig};
use crate::learners::{ForestConfig, LearnerConfig, MlpConfig};
use crate::model_io::{self, ModelFile};
use crate::simulation::{simulate, SimulationConfig};
use crate::types::{Dataset, GroupSpec, Task};
use crate::{io, report};

#[derive(Debug, Parser)]
#[command(name = "bcpi", version, about = "Block-based conditional permutation importance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset with known important groups.
    Simulate(SimulateArgs),
    /// Cross-fit a learner and save it for later scoring.
    Fit(FitArgs),
    /// Score every group and write importance.csv plus a JSON sidecar.
    Importance(ImportanceArgs),
    /// Run a multi-method experiment over the correlation sweep.
    Benchmark(BenchmarkArgs),
    /// Render SVG panels and a markdown summary from benchmark outputs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation or experiment config (JSON).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in experiment preset, e.g. desk-exp1.
    #[arg(long)]
    pub preset: Option<String>,
    /// Inter-block correlation when the config is an experiment sweep.
    #[arg(long)]
    pub rho_inter: Option<f64>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "y")]
    pub outcome: String,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub groups: PathBuf,
    /// Name of the outcome column in the dataset CSV.
    #[arg(long, default_value = "y")]
    pub outcome: String,
    #[arg(long, default_value = "regression", value_parser = ["regression", "binary"])]
    pub task: String,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Importance config (JSON); flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One of bcpi-dnn, bcpi-rf, bpi-dnn, gpfi.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long)]
    pub stacking: Option<Switch>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub seed: u64,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Previously fitted model; skips refitting.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Required unless a model is given (the model stores its seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated method list overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long)]
    pub stacking: Option<Switch>,
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub raw: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(flag: &str, path: &Path) -> std::result::Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{flag}: file not found: {}", path.display())))
    }
}

/// Creates `dir` and checks that every named output can be opened for writing.
fn prepare_outputs(dir: &Path, files: &[&str]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for f in files {
        fs::OpenOptions::new().create(true).append(true).open(dir.join(f))?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn simulation_from_json(value: serde_json::Value, rho: Option<f64>) -> Result<SimulationConfig> {
    if value.get("covariance").is_some() {
        return Ok(serde_json::from_value(value)?);
    }
    let exp: ExperimentConfig = serde_json::from_value(value)?;
    Ok(exp.simulation(rho.unwrap_or(exp.rho_inter_sweep[0])))
}

fn cmd_simulate(a: &SimulateArgs) -> std::result::Result<(), CliError> {
    let sim_cfg = match (&a.config, &a.preset) {
        (Some(path), _) => {
            require_file("--config", path)?;
            simulation_from_json(read_json(path)?, a.rho_inter)?
        }
        (None, Some(name)) => {
            let exp = ExperimentConfig::preset(name).map_err(|e| usage(format!("--preset: {e}")))?;
            exp.simulation(a.rho_inter.unwrap_or(exp.rho_inter_sweep[0]))
        }
        (None, None) => return Err(usage("simulate needs --config or --preset")),
    };
    prepare_outputs(&a.out, &["dataset.csv", "groups.json", "truth.json"])?;
    let sim = simulate(&sim_cfg, a.seed)?;
    io::save_dataset(&a.out.join("dataset.csv"), &sim.data, &a.outcome)?;
    io::save_group_spec(&a.out.join("groups.json"), &sim.groups)?;
    write_json(&a.out.join("truth.json"), &sim.truth)?;
    log::info!("simulated n={} p={} into {}", sim.data.n(), sim.data.p(), a.out.display());
    Ok(())
}

fn load_inputs(d: &DataArgs) -> std::result::Result<(Dataset, GroupSpec), CliError> {
    require_file("--data", &d.data)?;
    require_file("--groups", &d.groups)?;
    let task: Task = d.task.parse()?;
    let data = io::load_dataset(&d.data, &d.outcome, task)?;
    let spec = io::load_group_spec(&d.groups)?;
    spec.validate(data.p())?;
    Ok((data, spec))
}

/// Base config from the file (if any), then method, permutations and stacking flags.
fn resolve_config(p: &PipelineArgs) -> std::result::Result<(ImportanceConfig, Option<Method>), CliError> {
    let mut cfg = match &p.config {
        Some(path) => {
            require_file("--config", path)?;
            read_json::<ImportanceConfig>(path)?
        }
        None => ImportanceConfig::new(LearnerConfig::Mlp(MlpConfig::default()), PermutationMode::ConditionalAdditive),
    };
    let method = match &p.method {
        Some(m) => Some(m.parse::<Method>().map_err(|_| usage(format!("--method: unknown method {m:?}")))?),
        None if p.config.is_none() => Some(Method::BcpiDnn),
        None => None,
    };
    if let Some(m) = method {
        let mlp = match &cfg.learner {
            LearnerConfig::Mlp(c) => c.clone(),
            _ => MlpConfig::default(),
        };
        let forest = match &cfg.learner {
            LearnerConfig::Forest(c) => c.clone(),
            _ => ForestConfig::default(),
        };
        let conditional = match cfg.permutation {
            PermutationMode::Standard => PermutationMode::ConditionalAdditive,
            other => other,
        };
        match m {
            Method::BcpiDnn => {
                cfg.learner = LearnerConfig::Mlp(mlp);
                cfg.permutation = conditional;
                cfg.stacking = true;
            }
            Method::BpiDnn => {
                cfg.learner = LearnerConfig::Mlp(mlp);
                cfg.permutation = PermutationMode::Standard;
                cfg.stacking = true;
            }
            Method::BcpiRf => {
                cfg.learner = LearnerConfig::Forest(forest);
                cfg.permutation = conditional;
                cfg.stacking = false;
            }
            Method::Gpfi => {
                cfg.learner = LearnerConfig::Forest(forest);
                cfg.permutation = PermutationMode::Standard;
                cfg.stacking = false;
            }
            other => {
                return Err(usage(format!(
                    "--method: {other} has no per-group p-values; use the benchmark subcommand"
                )))
            }
        }
    }
    if let Some(b) = p.permutations {
        cfg.permutations = b;
    }
    if let Some(s) = p.stacking {
        cfg.stacking = s.on();
    }
    cfg.validate()?;
    Ok((cfg, method))
}

fn cmd_fit(a: &FitArgs) -> std::result::Result<(), CliError> {
    let (data, spec) = load_inputs(&a.data)?;
    let (cfg, _) = resolve_config(&a.pipeline)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    fs::OpenOptions::new().create(true).append(true).open(&a.out).map_err(Error::from)?;
    let fit = fit_cross(&data, &spec, &cfg, a.seed)?;
    log::info!("cross-fit took {:.3}s", fit.fit_seconds);
    let model = ModelFile::new(cfg, spec, data.task(), data.n(), data.p(), a.seed, fit);
    model_io::save_model(&a.out, &model)?;
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    method: Option<String>,
    seed: u64,
    data: &'a Path,
    groups: &'a Path,
    model: Option<&'a Path>,
    outcome: &'a str,
    task: Task,
    n_rows: usize,
    n_features: usize,
    config: &'a ImportanceConfig,
    prediction_score: f64,
    results: &'a [GroupResult],
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_importance_csv(path: &Path, results: &[GroupResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    w.write_record(["group", "name", "mean", "std", "z", "p_value"])?;
    for r in results {
        let imp = r.importance.as_ref();
        w.write_record([
            r.group.to_string(),
            r.name.clone(),
            opt_cell(imp.map(|i| i.mean)),
            opt_cell(imp.map(|i| i.std)),
            opt_cell(imp.map(|i| i.z)),
            opt_cell(imp.map(|i| i.p_value)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_importance(a: &ImportanceArgs) -> std::result::Result<(), CliError> {
    let (data, spec) = load_inputs(&a.data)?;
    if let Some(path) = &a.model {
        require_file("--model", path)?;
    }
    prepare_outputs(&a.out, &["importance.csv", "importance.json"])?;
    let (cfg, method, seed, fit) = match &a.model {
        Some(path) => {
            if a.pipeline.config.is_some() || a.pipeline.method.is_some() || a.pipeline.stacking.is_some() {
                return Err(usage("--model fixes the learner; --config, --method and --stacking cannot be combined with it"));
            }
            let model = model_io::load_model(path)?;
            if model.n_rows != data.n() || model.n_features != data.p() || model.task != data.task() {
                return Err(Error::ShapeMismatch(format!(
                    "model was fitted on {}x{} {:?} data, got {}x{} {:?}",
                    model.n_rows,
                    model.n_features,
                    model.task,
                    data.n(),
                    data.p(),
                    data.task()
                ))
                .into());
            }
            if model.groups != spec {
                return Err(Error::InvalidGroupSpec("groups differ from the ones the model was fitted with".into()).into());
            }
            let mut cfg = model.config;
            if let Some(b) = a.pipeline.permutations {
                cfg.permutations = b;
            }
            cfg.validate()?;
            let seed = a.seed.unwrap_or(model.seed);
            (cfg, None, seed, model.fit)
        }
        None => {
            let seed = a.seed.ok_or_else(|| usage("--seed is required unless --model is given"))?;
            let (cfg, method) = resolve_config(&a.pipeline)?;
            let fit = fit_cross(&data, &spec, &cfg, seed)?;
            (cfg, method, seed, fit)
        }
    };
    let report = score_importance(&data, &spec, &cfg, &fit, seed)?;
    log::info!(
        "fit {:.3}s, importance {:.3}s",
        report.fit_seconds,
        report.importance_seconds
    );
    for g in report.groups.iter().filter(|g| g.failure.is_some()) {
        log::warn!("group {} ({}) failed: {:?}", g.group, g.name, g.failure);
    }
    write_importance_csv(&a.out.join("importance.csv"), &report.groups)?;
    let sidecar = Sidecar {
        method: method.map(|m| m.name().to_string()),
        seed,
        data: &a.data.data,
        groups: &a.data.groups,
        model: a.model.as_deref(),
        outcome: &a.data.outcome,
        task: data.task(),
        n_rows: data.n(),
        n_features: data.p(),
        config: &cfg,
        prediction_score: report.prediction_score,
        results: &report.groups,
    };
    write_json(&a.out.join("importance.json"), &sidecar)?;
    Ok(())
}

fn cmd_benchmark(a: &BenchmarkArgs) -> std::result::Result<(), CliError> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => {
            require_file("--config", path)?;
            read_json::<ExperimentConfig>(path)?
        }
        (None, Some(name)) => ExperimentConfig::preset(name).map_err(|e| usage(format!("--preset: {e}")))?,
        (None, None) => return Err(usage("benchmark needs --config or --preset")),
    };
    if let Some(ms) = &a.method {
        cfg.methods = ms
            .iter()
            .map(|m| m.parse::<Method>().map_err(|_| usage(format!("--method: unknown method {m:?}"))))
            .collect::<std::result::Result<_, _>>()?;
    }
    if let Some(b) = a.permutations {
        cfg.permutations = b;
    }
    if let Some(s) = a.stacking {
        cfg.stacking = s.on();
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    cfg.validate()?;
    prepare_outputs(&a.out, &["metrics.csv", "raw.jsonl", "config.json"])?;
    write_json(
        &a.out.join("config.json"),
        &serde_json::json!({ "seed": a.seed, "experiment": &cfg }),
    )?;
    let out = bench::run_experiment(&cfg, a.seed)?;
    bench::write_metrics_csv(BufWriter::new(fs::File::create(a.out.join("metrics.csv")).map_err(Error::from)?), &out.rows)?;
    bench::write_raw_jsonl(BufWriter::new(fs::File::create(a.out.join("raw.jsonl")).map_err(Error::from)?), &out.records)?;
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> std::result::Result<(), CliError> {
    require_file("--metrics", &a.metrics)?;
    if let Some(raw) = &a.raw {
        require_file("--raw", raw)?;
    }
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(usage(format!("--alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let rows = bench::read_metrics_csv(fs::File::open(&a.metrics).map_err(Error::from)?)?;
    let raw = match &a.raw {
        Some(p) => Some(bench::read_raw_jsonl(BufReader::new(fs::File::open(p).map_err(Error::from)?))?),
        None => None,
    };
    report::render_report(&rows, raw.as_deref(), a.alpha, &a.out)?;
    Ok(())
}

pub fn execute(cli: &Cli) -> std::result::Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Importance(a) => cmd_importance(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("{}", serde_json::json!({ "error": e.name(), "message": e.to_string() }));
            2
        }
    }
}
