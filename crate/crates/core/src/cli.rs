//! Command-line front end: trace generation, training, confidence intervals
//! and fidelity experiments driven by JSON configs and presets.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibration::{train_with_observer, TrainingConfig};
use crate::confidence::{
    likelihood_ratio_intervals, monte_carlo_estimates, monte_carlo_interval_from_estimates, residuals,
    write_residuals_csv, ConfidenceInterval, ProfileOptions,
};
use crate::error::{Error, Result};
use crate::experiments::{default_training, preset, run_scenario, scenario_catalog, write_outputs, Method, ReadoutModel, Scenario};
use crate::hmm::{FrozenSet, HmmParams, SignalTrace};
use crate::traces::{GenerationSpec, TraceSet};

#[derive(Debug, Parser)]
#[command(name = "spinread", version, about = "Spin-qubit readout simulation and HMM inference")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Emit progress and errors as JSON lines on stderr.
    #[arg(long, global = true)]
    pub log_json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled trace set from a scenario point.
    Generate(GenerateArgs),
    /// Baum-Welch training on a trace file, optionally with intervals.
    Train(TrainArgs),
    /// Run a fidelity or calibration-failure scenario.
    Fidelity(FidelityArgs),
    /// Confidence intervals around given parameters.
    Ci(CiArgs),
    /// List the built-in scenarios.
    Presets,
}

/// Where a scenario comes from and how it is modified.
#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Experiment config (JSON); a manifest.json from an earlier run works too.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in scenario name; overrides the config's scenario.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scenario field override, e.g. `--set n_test=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output trace file (.csv or binary).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of traces (default: the scenario's n_test).
    #[arg(short = 'n', long)]
    pub num_traces: Option<usize>,
    /// Trace length (default: the scenario's trace_len).
    #[arg(long)]
    pub len: Option<usize>,
    /// Sweep point to generate.
    #[arg(long, default_value_t = 0)]
    pub point: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CiMethod {
    LikelihoodRatio,
    MonteCarlo,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Readout model; inferred from the number of states when omitted.
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Starting parameters (JSON) instead of the model default.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Parameters held fixed, e.g. `pi` or `pi,A_21`.
    #[arg(long)]
    pub freeze: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Psb,
    Elzerman,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub traces: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "train-out")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub ci: Option<CiMethod>,
    /// Number of disjoint subsets for Monte Carlo intervals.
    #[arg(long, default_value_t = 5)]
    pub sets: usize,
    /// Log-likelihood convergence tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CiArgs {
    pub traces: PathBuf,
    /// Maximum-likelihood parameters (JSON), e.g. lambda_star.json.
    #[arg(long)]
    pub params: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "likelihood-ratio")]
    pub ci: CiMethod,
    #[arg(long, default_value_t = 5)]
    pub sets: usize,
    #[arg(long, default_value = "ci-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FidelityArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output directory (default: out/<scenario name>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated methods: threshold, hmm, hmm-star, hmm-filtered,
    /// hmm-star-filtered.
    #[arg(long)]
    pub methods: Option<String>,
    /// Averaging-filter block size for the filtered methods.
    #[arg(long)]
    pub filter_ts: Option<usize>,
}

/// Experiment config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Preset name or an inline scenario.
    #[serde(default)]
    pub scenario: Option<Value>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Scenario fields replaced after the preset is loaded.
    #[serde(default)]
    pub overrides: serde_json::Map<String, Value>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Resolved scenario with its seed and output directory.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scenario: Scenario,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let last = k + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("override '{key}': '{part}' is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(i)
                    .ok_or_else(|| Error::Config(format!("override '{key}': index {i} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("override '{key}': '{part}' is not inside an object"))),
        };
    }
    Ok(())
}

fn parse_override(item: &str) -> Result<(String, Value)> {
    let (k, v) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{item}' is not KEY=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Builds the scenario with precedence flags > config file > preset and
/// validates it before anything runs.
pub fn resolve_scenario(args: &ScenarioArgs, extra: impl FnOnce(&mut Scenario) -> Result<()>) -> Result<Resolved> {
    let file = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut value = match (&args.preset, &file.scenario) {
        (Some(name), _) => serde_json::to_value(preset(name)?)?,
        (None, Some(Value::String(name))) => serde_json::to_value(preset(name)?)?,
        (None, Some(v @ Value::Object(_))) => v.clone(),
        (None, Some(_)) => return Err(Error::Config("config 'scenario' must be a preset name or an object".into())),
        (None, None) => return Err(Error::Config("no scenario: pass --preset or --config".into())),
    };
    for (k, v) in &file.overrides {
        set_path(&mut value, k, v.clone())?;
    }
    for item in &args.overrides {
        let (k, v) = parse_override(item)?;
        set_path(&mut value, &k, v)?;
    }
    let mut scenario: Scenario =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("scenario: {e}")))?;
    extra(&mut scenario)?;
    scenario.validate()?;
    let seed = args
        .seed
        .or(file.seed)
        .ok_or_else(|| Error::Config("no seed: pass --seed or set \"seed\" in the config".into()))?;
    Ok(Resolved {
        scenario,
        seed,
        output_dir: file.output_dir,
    })
}

struct Reporter {
    json: bool,
}

impl Reporter {
    fn progress(&self, msg: &str) {
        let mut err = std::io::stderr().lock();
        if self.json {
            let _ = writeln!(err, "{}", serde_json::json!({ "event": "progress", "message": msg }));
        } else {
            let _ = writeln!(err, "{msg}");
        }
    }

    fn error(&self, e: &Error) {
        let mut err = std::io::stderr().lock();
        if self.json {
            let _ = writeln!(
                err,
                "{}",
                serde_json::json!({ "event": "error", "message": e.to_string(), "exit_code": e.exit_code() })
            );
        } else {
            let _ = writeln!(err, "error: {e}");
        }
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let reporter = Reporter { json: cli.log_json };
    match run(&cli, &reporter) {
        Ok(()) => 0,
        Err(e) => {
            reporter.error(&e);
            e.exit_code()
        }
    }
}

fn run(cli: &Cli, reporter: &Reporter) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // an already initialized pool (e.g. a second call in one process) is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, reporter),
        Command::Train(a) => cmd_train(a, reporter),
        Command::Fidelity(a) => cmd_fidelity(a, reporter),
        Command::Ci(a) => cmd_ci(a, reporter),
        Command::Presets => cmd_presets(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_generate(args: &GenerateArgs, reporter: &Reporter) -> Result<()> {
    let r = resolve_scenario(&args.scenario, |s| {
        if let Some(n) = args.num_traces {
            s.n_test = n;
        }
        if let Some(t) = args.len {
            s.trace_len = t;
        }
        Ok(())
    })?;
    let points = r.scenario.points();
    let point = points
        .get(args.point)
        .ok_or_else(|| Error::Config(format!("point {} out of {}", args.point, points.len())))?;
    let cfg = &point.config;
    let spec = GenerationSpec {
        params: cfg.truth()?,
        noise: Some(cfg.noise()),
        num_traces: cfg.n_test,
        trace_len: cfg.trace_len,
        initial_states: cfg.initial_states(),
        seed: r.seed,
        first_id: 0,
    };
    let out = args
        .out
        .clone()
        .or_else(|| r.output_dir.as_ref().map(|d| d.join("traces.csv")))
        .unwrap_or_else(|| PathBuf::from("traces.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let set = TraceSet::generate(&spec)?;
    set.write(&out)?;
    reporter.progress(&format!(
        "wrote {} traces of length {} to {} (noise: {})",
        set.len(),
        cfg.trace_len,
        out.display(),
        serde_json::to_string(&spec.noise)?
    ));
    Ok(())
}

fn load_traces(path: &Path) -> Result<TraceSet> {
    let set = TraceSet::read(path)?;
    if set.is_empty() {
        return Err(Error::InvalidTrace(format!("{} holds no traces", path.display())));
    }
    Ok(set)
}

fn training_config(args: &ModelArgs, set: &TraceSet, params_hint: Option<&HmmParams>) -> Result<TrainingConfig> {
    let generated = set.metadata.generation.as_ref().map(|g| g.params.num_states());
    let states = params_hint.map(HmmParams::num_states).or(generated);
    let model = match (args.model, states) {
        (Some(ModelArg::Psb), _) | (None, Some(2)) => ReadoutModel::Psb,
        (Some(ModelArg::Elzerman), _) | (None, Some(3)) => ReadoutModel::Elzerman,
        _ => return Err(Error::Config("cannot tell the readout model; pass --model".into())),
    };
    let mut cfg = default_training(model);
    if let Some(p) = &args.init {
        cfg.init_params = read_params(p)?;
    }
    if let Some(list) = &args.freeze {
        for id in FrozenSet::parse(list, cfg.init_params.num_states())?.iter() {
            cfg.frozen.insert(id);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_params(path: &Path) -> Result<HmmParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn intervals(
    method: CiMethod,
    star: &HmmParams,
    cfg: &TrainingConfig,
    traces: &[SignalTrace],
    sets: usize,
    reporter: &Reporter,
) -> Result<Vec<ConfidenceInterval>> {
    let targets = star.free_parameters(&cfg.frozen);
    match method {
        CiMethod::LikelihoodRatio => {
            reporter.progress(&format!("likelihood-ratio intervals for {} parameters", targets.len()));
            likelihood_ratio_intervals(star, traces, &targets, &ProfileOptions::for_training(cfg))
        }
        CiMethod::MonteCarlo => {
            if sets < 2 || traces.len() < sets {
                return Err(Error::Config(format!(
                    "Monte Carlo intervals need 2 <= sets <= traces, got {sets} sets for {} traces",
                    traces.len()
                )));
            }
            let size = traces.len() / sets;
            let chunks: Vec<&[SignalTrace]> = traces.chunks_exact(size).take(sets).collect();
            reporter.progress(&format!("Monte Carlo intervals from {sets} sets of {size} traces"));
            let estimates = monte_carlo_estimates(cfg, &chunks)?;
            targets
                .iter()
                .map(|&t| monte_carlo_interval_from_estimates(&estimates, t))
                .collect()
        }
    }
}

fn report_intervals(out: &Path, set: &TraceSet, list: &[ConfidenceInterval], reporter: &Reporter) -> Result<()> {
    write_json(&out.join("intervals.json"), &list)?;
    if let Some(g) = &set.metadata.generation {
        let rows = residuals(list, &g.params);
        write_residuals_csv(&rows, &out.join("residuals.csv"))?;
        let mut table = String::from("parameter  estimate-truth  lower-truth  upper-truth\n");
        for r in &rows {
            table.push_str(&format!(
                "{:<9}  {:>+14.4e}  {:>+11.4e}  {:>+11.4e}\n",
                r.parameter.to_string(),
                r.estimate_minus_truth,
                r.lower_minus_truth,
                r.upper_minus_truth
            ));
        }
        print!("{table}");
    } else {
        for ci in list {
            println!("{}  {:.6e}  [{:.6e}, {:.6e}]", ci.parameter, ci.estimate, ci.lower, ci.upper);
        }
    }
    reporter.progress(&format!("wrote {}", out.join("intervals.json").display()));
    Ok(())
}

fn cmd_train(args: &TrainArgs, reporter: &Reporter) -> Result<()> {
    let set = load_traces(&args.traces)?;
    let mut cfg = training_config(&args.model, &set, None)?;
    if let Some(t) = args.tolerance {
        cfg = cfg.with_tolerance(t);
    }
    cfg.validate()?;
    create_dir(&args.out)?;
    let result = train_with_observer(&cfg, &set.traces, |p| {
        reporter.progress(&format!("iteration {} log-likelihood {:.6}", p.iteration, p.log_likelihood))
    })?;
    write_json(&args.out.join("lambda_star.json"), &result.params)?;
    let mut csv = String::from("iteration,log_likelihood\n");
    for (k, ll) in result.ll_history.iter().enumerate() {
        csv.push_str(&format!("{k},{ll:.17e}\n"));
    }
    let p = args.out.join("ll_history.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    reporter.progress(&format!(
        "{} after {} iterations, log-likelihood {:.6}",
        if result.converged { "converged" } else { "stopped" },
        result.iterations,
        result.log_likelihood()
    ));
    if let Some(method) = args.ci {
        let list = intervals(method, &result.params, &cfg, &set.traces, args.sets, reporter)?;
        report_intervals(&args.out, &set, &list, reporter)?;
    }
    Ok(())
}

fn cmd_ci(args: &CiArgs, reporter: &Reporter) -> Result<()> {
    let set = load_traces(&args.traces)?;
    let star = read_params(&args.params)?;
    let cfg = training_config(&args.model, &set, Some(&star))?;
    create_dir(&args.out)?;
    let list = intervals(args.ci, &star, &cfg, &set.traces, args.sets, reporter)?;
    report_intervals(&args.out, &set, &list, reporter)
}

fn cmd_fidelity(args: &FidelityArgs, reporter: &Reporter) -> Result<()> {
    let r = resolve_scenario(&args.scenario, |s| {
        if let Some(list) = &args.methods {
            s.methods = Method::parse_list(list)?;
        }
        if let Some(ts) = args.filter_ts {
            s.filter_ts = Some(ts);
        }
        Ok(())
    })?;
    let dir = args
        .out
        .clone()
        .or(r.output_dir.clone())
        .unwrap_or_else(|| Path::new("out").join(&r.scenario.name));
    create_dir(&dir)?;
    reporter.progress(&format!(
        "scenario {} with {} points, seed {}",
        r.scenario.name,
        r.scenario.num_points(),
        r.seed
    ));
    let results = run_scenario(&r.scenario, r.seed, &mut |line| reporter.progress(line))?;
    write_outputs(&dir, &r.scenario, &results)?;
    reporter.progress(&format!("wrote results.json, sweep.csv and manifest.json to {}", dir.display()));
    Ok(())
}

fn cmd_presets() -> Result<()> {
    let mut out = std::io::stdout().lock();
    for s in scenario_catalog() {
        writeln!(
            out,
            "{:<22} {:>3} points  {}",
            s.name,
            s.num_points(),
            s.description
        )
        .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}
