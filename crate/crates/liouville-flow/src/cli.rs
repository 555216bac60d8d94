//! Batch front end: six subcommands that wire the library into reproducible
//! experiments, each driven by a JSON config file and writing its artifacts
//! into an output directory.
//!
//! # Commands
//!
//! | command    | what it does                                                      | artifacts written to `--out`                                            |
//! |------------|-------------------------------------------------------------------|-------------------------------------------------------------------------|
//! | `train`    | fit a flow density model by projected-gradient ERM                | `checkpoint.json`, `training_log.csv`, `bound_ledger.json`, `dataset.csv`¹ |
//! | `sample`   | draw points from a trained model                                   | `samples.csv`                                                           |
//! | `evaluate` | negative log-likelihood (and KL against a known target) of a model | `evaluation.json`²                                                      |
//! | `beckmann` | build a radial transport problem and verify it end to end          | `problem.json`, `field_grid.csv`, `transport_report.json`               |
//! | `bounds`   | evaluate the capacity ledger and the PAC schedule / sample size    | `bounds_report.json`²                                                   |
//! | `verify`   | run the built-in numerical verification suite                      | `verify_report.json`²                                                   |
//!
//! ¹ only when the training data was synthesized; ² also printed to stdout,
//! written only when `--out` is given.
//!
//! # Invocation
//!
//! Every subcommand takes the same flags: `--config <file.json>` (required),
//! `--seed <u64>` (required exactly when the command consumes randomness),
//! `--out <dir>` (required when the command's artifacts only make sense on
//! disk), and `--threads <n>` (worker threads; the `LIOUVILLE_FLOW_THREADS`
//! environment variable is the fallback, and results never depend on the
//! choice). The config file must carry a `"command"` key naming the
//! subcommand it configures, so a config can never be applied to the wrong
//! verb silently. Unknown config keys are rejected, not ignored: a typo in
//! `"learning_rate"` should fail loudly rather than train with the default.
//!
//! Relative paths inside a config (`dataset`, `checkpoint`) resolve against
//! the config file's own directory, so a config directory can be shipped as
//! a self-contained unit.
//!
//! # Exit codes and errors
//!
//! * `0` — success (including a `bounds` run whose schedule is infeasible:
//!   that is a *finding*, reported in `warnings`, not a failure).
//! * `1` — the computation itself failed (step-size guard violation,
//!   diverged inversion, non-finite loss, unwritable output, …) or the
//!   `verify` suite found a failing check.
//! * `2` — the request was unusable: malformed flags (via clap), unreadable
//!   or invalid config, missing dataset/checkpoint file, missing `--seed`
//!   or `--out`.
//!
//! Every failure prints a single-line machine-readable JSON object
//! `{"kind": …, "message": …}` to stdout. The `kind` is stable: library
//! failures carry their error kind (`guard_violation`, `outside_domain`, …)
//! and front-end problems use `config_not_found`, `config_invalid`,
//! `dataset_not_found`, `checkpoint_not_found`, `seed_required`, or
//! `output_required`.
//!
//! # Determinism
//!
//! All randomness flows from `--seed` through named counter-derived
//! substreams, every parallel reduction is order-preserving, and floats are
//! rendered with a round-trip format — so rerunning a command with the same
//! config and seed reproduces every artifact byte for byte, regardless of
//! `--threads`.

use crate::artifact::{fmt_f64, json_escape};
use crate::beckmann::RadialBeckmannProblem;
use crate::bounds::{
    capacity_ledger, default_input_radius, pac_sample_size, pac_schedule, pac_schedule_from_log_n,
};
use crate::density::{
    read_dataset_csv, rescheduled, train_erm, write_samples_csv, FlowDensityModel, TrainConfig,
};
use crate::error::{Error, Result};
use crate::flow::{
    empirical_lipschitz, integrate, integrate_with_jacobians, invert_flow, lipschitz_probes,
    FlowSchedule, GuardMode, VectorField,
};
use crate::linalg::{Lu, Mat};
use crate::quad::polar_grid;
use crate::requ_net::{CutoffField, ReQUNetwork};
use crate::rng::{self, Stream};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::Value;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

/// Flow-matching density estimation with certified invertibility.
#[derive(Debug, Parser)]
#[command(name = "liouville-flow", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a density model to data by projected-gradient ERM.
    Train(RunArgs),
    /// Draw samples from a trained checkpoint.
    Sample(RunArgs),
    /// Score a checkpoint: negative log-likelihood, optionally KL to a known target.
    Evaluate(RunArgs),
    /// Build and verify a radial transport problem.
    Beckmann(RunArgs),
    /// Evaluate the capacity ledger and PAC sample-complexity formulas.
    Bounds(RunArgs),
    /// Run the numerical verification suite.
    Verify(RunArgs),
}

/// The shared flag set; which flags are *required* depends on the command
/// (see the module docs) and is enforced after parsing so the error can be
/// reported in the machine-readable form.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON config file for this command.
    #[arg(long)]
    pub config: PathBuf,
    /// Seed for every random choice the command makes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory to write artifacts into (created if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores; results do not depend on this).
    #[arg(long)]
    pub threads: Option<usize>,
}

// ---------------------------------------------------------------------------
// Failure taxonomy
// ---------------------------------------------------------------------------

/// A command failure, split by whose fault it is: `Usage` means the request
/// could not be acted on (exit 2), `Run` means the computation itself failed
/// (exit 1).
#[derive(Debug)]
enum Failure {
    Usage { kind: String, message: String },
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(kind: &str, message: impl Into<String>) -> Failure {
    Failure::Usage { kind: kind.to_string(), message: message.into() }
}

/// Reclassifies a library error raised while *loading inputs* (config
/// values, datasets, checkpoints) as a usage failure: the computation never
/// started, so the request itself was bad.
fn input_stage<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure::Usage { kind: e.kind().to_string(), message: e.to_string() })
}

fn failure_json(f: &Failure) -> String {
    let (kind, message) = match f {
        Failure::Usage { kind, message } => (kind.as_str(), message.clone()),
        Failure::Run(e) => (e.kind(), e.to_string()),
    };
    format!("{{\"kind\": \"{}\", \"message\": \"{}\"}}", kind, json_escape(&message))
}

fn failure_code(f: &Failure) -> i32 {
    match f {
        Failure::Usage { .. } => EXIT_USAGE,
        Failure::Run(_) => EXIT_FAILURE,
    }
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn run() -> i32 {
    execute(Cli::parse())
}

/// Runs an already-parsed invocation; returns the process exit code.
/// Reports and failure JSON go to stdout.
pub fn execute(cli: Cli) -> i32 {
    let args = cli.command.args();
    configure_threads(args.threads);
    match dispatch(&cli) {
        Ok((stdout, code)) => {
            print!("{stdout}");
            code
        }
        Err(f) => {
            println!("{}", failure_json(&f));
            failure_code(&f)
        }
    }
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Train(a)
            | Command::Sample(a)
            | Command::Evaluate(a)
            | Command::Beckmann(a)
            | Command::Bounds(a)
            | Command::Verify(a) => a,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Evaluate(_) => "evaluate",
            Command::Beckmann(_) => "beckmann",
            Command::Bounds(_) => "bounds",
            Command::Verify(_) => "verify",
        }
    }
}

/// Sizes the global worker pool from `--threads`, falling back to the
/// `LIOUVILLE_FLOW_THREADS` environment variable. Results never depend on
/// the pool size (all reductions are order-preserving), so failure to
/// resize — e.g. because a pool already exists — is not an error.
fn configure_threads(requested: Option<usize>) {
    let n = requested.or_else(|| {
        std::env::var("LIOUVILLE_FLOW_THREADS").ok().and_then(|s| s.parse().ok())
    });
    if let Some(n) = n {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<(String, i32)> {
    let args = cli.command.args();
    let name = cli.command.name();
    let doc = load_config(&args.config)?;
    let declared = doc
        .get("command")
        .and_then(Value::as_str)
        .ok_or_else(|| usage("config_invalid", "config must declare its command, e.g. {\"command\": \"train\", …}"))?;
    if declared != name {
        return Err(usage(
            "config_invalid",
            format!("config file is for command `{declared}`, but `{name}` was invoked"),
        ));
    }
    let config_dir = args.config.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    match name {
        "train" => run_train(&doc, &config_dir, args),
        "sample" => run_sample(&doc, &config_dir, args),
        "evaluate" => run_evaluate(&doc, &config_dir, args),
        "beckmann" => run_beckmann(&doc, args),
        "bounds" => run_bounds(&doc, args),
        "verify" => run_verify(&doc, args),
        _ => unreachable!("command names are exhaustive"),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_config(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| {
        usage("config_not_found", format!("cannot read config `{}`: {e}", path.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| {
        usage("config_invalid", format!("config `{}` is not valid JSON: {e}", path.display()))
    })
}

/// Parses the typed config for one command, rejecting unknown keys.
fn typed_config<T: for<'de> Deserialize<'de>>(doc: &Value) -> CliResult<T> {
    serde_json::from_value(doc.clone())
        .map_err(|e| usage("config_invalid", format!("config does not fit the command: {e}")))
}

fn require_seed(args: &RunArgs, why: &str) -> CliResult<u64> {
    args.seed.ok_or_else(|| usage("seed_required", format!("{why}; pass --seed <u64>")))
}

fn require_out(args: &RunArgs) -> CliResult<&Path> {
    args.out
        .as_deref()
        .ok_or_else(|| usage("output_required", "this command writes artifacts; pass --out <dir>"))
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(Error::Io)?;
    fs::write(dir.join(name), contents).map_err(|e| Failure::Run(Error::Io(e)))
}

/// Resolves a path from a config file relative to that config's directory.
fn resolve(config_dir: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        config_dir.join(pb)
    }
}

/// Synthetic data request: a named radial target plus a sample count.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticSpec {
    family: String,
    #[serde(default)]
    beta: Option<f64>,
    n: usize,
}

/// Known radial target named in a config (`evaluate`'s KL reference).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetSpec {
    family: String,
    #[serde(default)]
    beta: Option<f64>,
}

/// Builds the named radial problem, checking it lives in the expected
/// dimension.
fn problem_from_family(
    family: &str,
    beta: Option<f64>,
    quadrature_n: Option<usize>,
    dimension: usize,
) -> CliResult<RadialBeckmannProblem> {
    let problem = match family {
        "uniform" => input_stage(RadialBeckmannProblem::uniform(dimension))?,
        "bump" => {
            let beta = beta.ok_or_else(|| {
                usage("config_invalid", "family `bump` needs a `beta` amplitude in (-1, 1)")
            })?;
            input_stage(RadialBeckmannProblem::bump(beta))?
        }
        other => {
            return Err(usage(
                "config_invalid",
                format!("unknown density family `{other}` (expected `uniform` or `bump`)"),
            ))
        }
    };
    if problem.dimension() != dimension {
        return Err(usage(
            "config_invalid",
            format!(
                "family `{family}` lives in dimension {}, config asks for {dimension}",
                problem.dimension()
            ),
        ));
    }
    match quadrature_n {
        Some(n) => input_stage(problem.with_quadrature(n)),
        None => Ok(problem),
    }
}

fn read_dataset_file(config_dir: &Path, rel: &str) -> CliResult<Vec<Vec<f64>>> {
    let path = resolve(config_dir, rel);
    if !path.exists() {
        return Err(usage(
            "dataset_not_found",
            format!("dataset file `{}` does not exist", path.display()),
        ));
    }
    let file = input_stage(fs::File::open(&path).map_err(Error::Io))?;
    input_stage(read_dataset_csv(BufReader::new(file)))
}

fn load_checkpoint(config_dir: &Path, rel: &str) -> CliResult<FlowDensityModel> {
    let path = resolve(config_dir, rel);
    if !path.exists() {
        return Err(usage(
            "checkpoint_not_found",
            format!("checkpoint file `{}` does not exist", path.display()),
        ));
    }
    let text = input_stage(fs::read_to_string(&path).map_err(Error::Io))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| {
        usage("artifact_invalid", format!("checkpoint `{}` is not valid JSON: {e}", path.display()))
    })?;
    input_stage(FlowDensityModel::from_checkpoint_json(&doc))
}

fn check_dims(samples: &[Vec<f64>], d: usize, what: &str) -> CliResult<()> {
    if let Some(x) = samples.first() {
        if x.len() != d {
            return Err(usage(
                "config_invalid",
                format!("{what} has dimension {}, expected {d}", x.len()),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn default_segments() -> usize {
    12
}
fn default_degree() -> usize {
    4
}
fn default_steps() -> usize {
    16
}
fn default_init_scale() -> f64 {
    1.0
}
fn default_guard_mode() -> String {
    "empirical".to_string()
}
fn default_grid_resolution() -> usize {
    256
}
fn default_time() -> f64 {
    0.5
}
fn default_grid_samples() -> usize {
    200
}
fn default_verify_steps() -> usize {
    64
}
fn default_verify_grid() -> usize {
    256
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSpec {
    #[allow(dead_code)]
    command: String,
    /// CSV dataset path (relative to the config file); mutually exclusive
    /// with `beckmann`.
    #[serde(default)]
    dataset: Option<String>,
    /// Synthetic data: sample `n` points from a named radial target.
    #[serde(default)]
    beckmann: Option<SyntheticSpec>,
    spatial_dim: usize,
    hidden: Vec<usize>,
    #[serde(default = "default_segments")]
    segments: usize,
    #[serde(default = "default_degree")]
    degree: usize,
    #[serde(default = "default_steps")]
    steps: usize,
    /// Multiplier applied to the seeded initial weights (clamped to the
    /// parameter box). The default initialization is deliberately tiny;
    /// training from it can start in a flat region of the loss.
    #[serde(default = "default_init_scale")]
    init_scale: f64,
    learning_rate: f64,
    iterations: usize,
    #[serde(default)]
    batch_size: usize,
    #[serde(default = "default_guard_mode")]
    guard_mode: String,
    #[serde(default)]
    fd_fallback: bool,
}

fn parse_guard_mode(s: &str) -> CliResult<GuardMode> {
    match s {
        "empirical" => Ok(GuardMode::Empirical),
        "formula" => Ok(GuardMode::Formula),
        other => Err(usage(
            "config_invalid",
            format!("unknown guard_mode `{other}` (expected `empirical` or `formula`)"),
        )),
    }
}

fn run_train(doc: &Value, config_dir: &Path, args: &RunArgs) -> CliResult<(String, i32)> {
    let spec: TrainSpec = typed_config(doc)?;
    let seed = require_seed(args, "training draws its initial weights and batches from the seed")?;
    let out = require_out(args)?;
    if !(spec.learning_rate > 0.0 && spec.learning_rate.is_finite()) {
        return Err(usage(
            "config_invalid",
            format!("learning_rate must be positive and finite, got {}", spec.learning_rate),
        ));
    }
    if !(spec.init_scale > 0.0 && spec.init_scale.is_finite()) {
        return Err(usage(
            "config_invalid",
            format!("init_scale must be positive and finite, got {}", spec.init_scale),
        ));
    }
    let guard_mode = parse_guard_mode(&spec.guard_mode)?;

    // Data: a CSV on disk or a synthetic draw from a named target.
    let (samples, synthetic) = match (&spec.dataset, &spec.beckmann) {
        (Some(path), None) => {
            let samples = read_dataset_file(config_dir, path)?;
            check_dims(&samples, spec.spatial_dim, "dataset")?;
            (samples, false)
        }
        (None, Some(synth)) => {
            if synth.n == 0 {
                return Err(usage("config_invalid", "beckmann.n must be at least 1"));
            }
            let problem =
                problem_from_family(&synth.family, synth.beta, None, spec.spatial_dim)?;
            (problem.sample_target(synth.n, seed), true)
        }
        _ => {
            return Err(usage(
                "config_invalid",
                "training data must come from exactly one of `dataset` or `beckmann`",
            ))
        }
    };

    // Initial model: seeded weights, optionally rescaled out of the tiny
    // default band, wrapped in the cutoff and certified against the guard.
    let mut net = input_stage(ReQUNetwork::seeded(
        spec.spatial_dim,
        &spec.hidden,
        &mut rng::substream(seed, Stream::Init),
    ))?;
    if spec.init_scale != 1.0 {
        let scaled: Vec<f64> = net
            .params_flat()
            .iter()
            .map(|p| (p * spec.init_scale).clamp(-1.0, 1.0))
            .collect();
        input_stage(net.set_params_flat(&scaled))?;
    }
    let field = input_stage(CutoffField::new(net, spec.segments, spec.degree))?;
    let model = FlowDensityModel::certified(field, spec.steps, guard_mode)?;

    let config = TrainConfig {
        learning_rate: spec.learning_rate,
        iterations: spec.iterations,
        batch_size: spec.batch_size,
        seed,
        guard_mode,
        fd_fallback: spec.fd_fallback,
    };
    let (trained, trace) = train_erm(model, &samples, &config)?;

    // Artifacts: the checkpoint, the loss trace, and the capacity ledger of
    // the architecture that was actually trained (at the final step size).
    let net = trained.field().network();
    let ledger = capacity_ledger(
        net.spatial_dim(),
        net.depth(),
        net.max_width(),
        trained.schedule().h(),
        default_input_radius(),
    )?;
    write_artifact(out, "checkpoint.json", &trained.to_checkpoint_json())?;
    write_artifact(out, "training_log.csv", &trace.to_csv(seed))?;
    write_artifact(out, "bound_ledger.json", &ledger.to_json())?;
    let mut artifacts =
        vec!["checkpoint.json", "training_log.csv", "bound_ledger.json"];
    if synthetic {
        write_artifact(out, "dataset.csv", &write_samples_csv(&samples, seed))?;
        artifacts.push("dataset.csv");
    }

    let listed: Vec<String> = artifacts.iter().map(|a| format!("\"{a}\"")).collect();
    let summary = format!(
        "{{\"command\": \"train\", \"n\": {}, \"iterations\": {}, \"initial_nll\": {}, \"final_nll\": {}, \"steps\": {}, \"artifacts\": [{}]}}\n",
        samples.len(),
        spec.iterations,
        fmt_f64(trace.initial_nll()),
        fmt_f64(trace.final_nll()),
        trained.schedule().steps(),
        listed.join(", ")
    );
    Ok((summary, EXIT_OK))
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleSpec {
    #[allow(dead_code)]
    command: String,
    checkpoint: String,
    count: usize,
}

fn run_sample(doc: &Value, config_dir: &Path, args: &RunArgs) -> CliResult<(String, i32)> {
    let spec: SampleSpec = typed_config(doc)?;
    let seed = require_seed(args, "sampling draws base points from the seed")?;
    let out = require_out(args)?;
    if spec.count == 0 {
        return Err(usage("config_invalid", "count must be at least 1"));
    }
    let model = load_checkpoint(config_dir, &spec.checkpoint)?;
    let samples = model.sample(spec.count, seed)?;
    write_artifact(out, "samples.csv", &write_samples_csv(&samples, seed))?;
    let summary = format!(
        "{{\"command\": \"sample\", \"count\": {}, \"artifacts\": [\"samples.csv\"]}}\n",
        samples.len()
    );
    Ok((summary, EXIT_OK))
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateSpec {
    #[allow(dead_code)]
    command: String,
    checkpoint: String,
    #[serde(default)]
    dataset: Option<String>,
    #[serde(default)]
    beckmann: Option<SyntheticSpec>,
    /// Known target to measure KL divergence against (by quadrature, not
    /// from the samples).
    #[serde(default)]
    target: Option<TargetSpec>,
    #[serde(default = "default_grid_resolution")]
    grid_resolution: usize,
}

fn run_evaluate(doc: &Value, config_dir: &Path, args: &RunArgs) -> CliResult<(String, i32)> {
    let spec: EvaluateSpec = typed_config(doc)?;
    let model = load_checkpoint(config_dir, &spec.checkpoint)?;
    let d = model.spatial_dim();

    let (samples, seed_used) = match (&spec.dataset, &spec.beckmann) {
        (Some(path), None) => {
            let samples = read_dataset_file(config_dir, path)?;
            check_dims(&samples, d, "dataset")?;
            (samples, None)
        }
        (None, Some(synth)) => {
            if synth.n == 0 {
                return Err(usage("config_invalid", "beckmann.n must be at least 1"));
            }
            let seed = require_seed(args, "synthetic evaluation data is drawn from the seed")?;
            let problem = problem_from_family(&synth.family, synth.beta, None, d)?;
            (problem.sample_target(synth.n, seed), Some(seed))
        }
        _ => {
            return Err(usage(
                "config_invalid",
                "evaluation data must come from exactly one of `dataset` or `beckmann`",
            ))
        }
    };

    let nll = model.nll(&samples)?;
    let (kl_json, target_json) = match &spec.target {
        Some(target) => {
            let problem = problem_from_family(&target.family, target.beta, None, d)?;
            let logdensity = move |x: &[f64]| {
                let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
                problem.target_density(r).ln()
            };
            let kl = model.kl_estimate(&logdensity, spec.grid_resolution)?;
            let beta = match target.beta {
                Some(b) => fmt_f64(b),
                None => "null".to_string(),
            };
            (
                format!(
                    "{{\"raw\": {}, \"clipped\": {}, \"grid_resolution\": {}}}",
                    fmt_f64(kl.raw),
                    fmt_f64(kl.clipped),
                    spec.grid_resolution
                ),
                format!("{{\"family\": \"{}\", \"beta\": {}}}", target.family, beta),
            )
        }
        None => ("null".to_string(), "null".to_string()),
    };
    let seed_json = match seed_used {
        Some(s) => s.to_string(),
        None => "null".to_string(),
    };
    let report = format!(
        "{{\"schema\": \"liouville-flow/evaluation.v1\", \"n\": {}, \"nll\": {}, \"kl\": {}, \"target\": {}, \"seed\": {}}}\n",
        samples.len(),
        fmt_f64(nll),
        kl_json,
        target_json,
        seed_json
    );
    if let Some(out) = args.out.as_deref() {
        write_artifact(out, "evaluation.json", &report)?;
    }
    Ok((report, EXIT_OK))
}

// ---------------------------------------------------------------------------
// beckmann
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BeckmannSpec {
    #[allow(dead_code)]
    command: String,
    family: String,
    #[serde(default)]
    beta: Option<f64>,
    #[serde(default = "default_spatial_dim")]
    dimension: usize,
    #[serde(default)]
    quadrature_n: Option<usize>,
    /// Interior time at which the field grid is tabulated.
    #[serde(default = "default_time")]
    time: f64,
    /// Radial sample count of the field grid artifact.
    #[serde(default = "default_grid_samples")]
    grid_samples: usize,
    /// Step count for the transport verification flow.
    #[serde(default = "default_verify_steps")]
    verify_steps: usize,
    /// Polar grid resolution for the transported-mass KL check.
    #[serde(default = "default_verify_grid")]
    verify_grid: usize,
}

fn default_spatial_dim() -> usize {
    2
}

fn run_beckmann(doc: &Value, args: &RunArgs) -> CliResult<(String, i32)> {
    let spec: BeckmannSpec = typed_config(doc)?;
    let out = require_out(args)?;
    if !(spec.time > 0.0 && spec.time < 1.0) {
        return Err(usage(
            "config_invalid",
            format!("time must be interior to (0, 1), got {}", spec.time),
        ));
    }
    let problem = problem_from_family(&spec.family, spec.beta, spec.quadrature_n, spec.dimension)?;
    problem.validate()?;

    // Honest continuity scan at the tabulation time.
    let mut max_residual = 0.0f64;
    for i in 0..100 {
        let r = 0.005 + 0.49 * i as f64 / 99.0;
        max_residual = max_residual.max(problem.continuity_residual(r, spec.time)?);
    }

    // Transport verification: push source mass through the field and compare
    // with the target on a polar grid, with a guard-certified schedule.
    let field = problem.field()?;
    let probes = lipschitz_probes(problem.dimension(), 64, 29);
    let lambda = empirical_lipschitz(&field, &probes);
    let schedule = rescheduled(spec.verify_steps, lambda, GuardMode::Empirical)?;
    let kl = problem.verify_transport(&schedule, spec.verify_grid)?;

    let problem_json = problem.to_json();
    let report = format!(
        "{{\"schema\": \"liouville-flow/transport-report.v1\", \"problem\": {}, \"time\": {}, \"max_continuity_residual\": {}, \"steps\": {}, \"grid_resolution\": {}, \"kl\": {}}}\n",
        problem_json.trim_end(),
        fmt_f64(spec.time),
        fmt_f64(max_residual),
        schedule.steps(),
        spec.verify_grid,
        fmt_f64(kl)
    );
    write_artifact(out, "problem.json", &problem_json)?;
    write_artifact(out, "field_grid.csv", &problem.field_grid_csv(spec.time, spec.grid_samples)?)?;
    write_artifact(out, "transport_report.json", &report)?;
    Ok((report, EXIT_OK))
}

// ---------------------------------------------------------------------------
// bounds
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsSpec {
    #[allow(dead_code)]
    command: String,
    spatial_dim: usize,
    depth: usize,
    width: usize,
    step_size: f64,
    #[serde(default)]
    r0: Option<f64>,
    /// Optional model-error section: smoothness order and the two
    /// approximation constants (in logs).
    #[serde(default)]
    smoothness: Option<SmoothnessSpec>,
    /// Optional PAC sample-size request.
    #[serde(default)]
    pac: Option<PacSpec>,
    /// Optional architecture schedule request at a sample count.
    #[serde(default)]
    schedule: Option<ScheduleSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SmoothnessSpec {
    k: usize,
    segments: u64,
    log_c_xi: f64,
    log_c_hat_xi: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PacSpec {
    epsilon: f64,
    delta: f64,
    p: f64,
    k: usize,
    log_c_h: f64,
    log_c_hat_h: f64,
    n_tilde: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleSpec {
    /// Sample count; use `log_n` instead for counts beyond `u64`.
    #[serde(default)]
    n: Option<u64>,
    #[serde(default)]
    log_n: Option<f64>,
    p: f64,
}

fn run_bounds(doc: &Value, args: &RunArgs) -> CliResult<(String, i32)> {
    let spec: BoundsSpec = typed_config(doc)?;
    let r0 = spec.r0.unwrap_or_else(default_input_radius);
    let mut ledger = input_stage(capacity_ledger(
        spec.spatial_dim,
        spec.depth,
        spec.width,
        spec.step_size,
        r0,
    ))?;
    if let Some(s) = &spec.smoothness {
        ledger = ledger.with_smoothness(s.k, s.segments, s.log_c_xi, s.log_c_hat_xi);
    }

    let mut warnings: Vec<String> = Vec::new();
    if !ledger.guard_satisfied() {
        warnings.push(
            "step-size guard violated: h·Λ ≥ 1/2 under the sound capacity bound".to_string(),
        );
    }

    let schedule_json = match &spec.schedule {
        Some(s) => {
            let schedule = match (s.n, s.log_n) {
                (Some(n), None) => input_stage(pac_schedule(n, s.p, spec.spatial_dim, r0))?,
                (None, Some(log_n)) => {
                    input_stage(pac_schedule_from_log_n(log_n, s.p, spec.spatial_dim, r0))?
                }
                _ => {
                    return Err(usage(
                        "config_invalid",
                        "schedule needs exactly one of `n` or `log_n`",
                    ))
                }
            };
            if !schedule.feasible {
                warnings.push(
                    "schedule infeasible: the sample count affords no network depth".to_string(),
                );
            }
            schedule.to_json()
        }
        None => "null".to_string(),
    };

    let sample_size_json = match &spec.pac {
        Some(p) => {
            let req = input_stage(pac_sample_size(
                p.epsilon,
                p.delta,
                p.p,
                spec.spatial_dim,
                p.k,
                p.log_c_h,
                p.log_c_hat_h,
                p.n_tilde,
            ))?;
            if req.n.is_none() {
                warnings.push(
                    "sample requirement exceeds u64; reported in log form only".to_string(),
                );
            }
            req.to_json()
        }
        None => "null".to_string(),
    };

    let warnings_json: Vec<String> =
        warnings.iter().map(|w| format!("\"{}\"", json_escape(w))).collect();
    let report = format!(
        "{{\"schema\": \"liouville-flow/bounds-report.v1\", \"ledger\": {}, \"pac_schedule\": {}, \"pac_sample_size\": {}, \"warnings\": [{}]}}\n",
        ledger.to_json().trim_end(),
        schedule_json,
        sample_size_json,
        warnings_json.join(", ")
    );
    if let Some(out) = args.out.as_deref() {
        write_artifact(out, "bounds_report.json", &report)?;
    }
    Ok((report, EXIT_OK))
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifySpec {
    #[allow(dead_code)]
    command: String,
    /// Deliberately corrupt one check's inputs to prove the suite detects
    /// defects. Only `"continuity"` is recognized.
    #[serde(default)]
    inject_defect: Option<String>,
}

/// One verification check: pass iff `measured` is finite and at most
/// `threshold`.
struct CheckOutcome {
    name: &'static str,
    measured: f64,
    threshold: f64,
    detail: String,
}

impl CheckOutcome {
    fn passed(&self) -> bool {
        self.measured.is_finite() && self.measured <= self.threshold
    }
}

fn check(
    name: &'static str,
    threshold: f64,
    body: impl FnOnce() -> Result<(f64, String)>,
) -> CheckOutcome {
    match body() {
        Ok((measured, detail)) => CheckOutcome { name, measured, threshold, detail },
        Err(e) => CheckOutcome {
            name,
            measured: f64::NAN,
            threshold,
            detail: format!("check aborted: {e}"),
        },
    }
}

/// `ξ(y, t) = sin(t)·y` in one dimension — a field with a known closed-form
/// flow (`y(t) = y₀·e^{1−cos t}` at `t = 1`) used to measure the
/// integrator's convergence order.
struct SineField;

impl VectorField for SineField {
    fn spatial_dim(&self) -> usize {
        1
    }
    fn eval(&self, y: &[f64], t: f64) -> Vec<f64> {
        vec![t.sin() * y[0]]
    }
    fn spatial_jacobian(&self, _y: &[f64], t: f64) -> Mat {
        Mat::from_flat(1, 1, &[t.sin()]).expect("1x1 shape is static")
    }
}

/// A deterministic scaled network field for the self-checks: seeded weights
/// pushed out of the near-zero band so the flow actually moves mass.
fn verification_field(seed: u64, hidden: &[usize], scale: f64) -> Result<CutoffField> {
    let mut net = ReQUNetwork::seeded(2, hidden, &mut rng::substream(seed, Stream::Init))?;
    let scaled: Vec<f64> =
        net.params_flat().iter().map(|p| (p * scale).clamp(-1.0, 1.0)).collect();
    net.set_params_flat(&scaled)?;
    CutoffField::new(net, 12, 4)
}

fn run_checks(inject_continuity_defect: bool) -> Vec<CheckOutcome> {
    let mut checks = Vec::with_capacity(6);

    // 1. The integrator converges at second order on a known flow.
    checks.push(check("rk2_order", 0.5, || {
        let exact = 0.3 * (1.0 - 1.0f64.cos()).exp();
        let mut errors = Vec::new();
        for m in [8usize, 16, 32] {
            let schedule = FlowSchedule::new(m, 1.0, GuardMode::Empirical)?;
            let tape = integrate(&SineField, &schedule, &[0.3])?;
            errors.push((tape.endpoint()[0] - exact).abs());
        }
        let r1 = errors[0] / errors[1];
        let r2 = errors[1] / errors[2];
        let measured = (r1 - 4.0).abs().max((r2 - 4.0).abs());
        Ok((measured, format!("halving-step error ratios {r1:.3}, {r2:.3} (want 4)")))
    }));

    // 2. The analytic field Jacobian matches central finite differences.
    checks.push(check("network_jacobian_fd", 1e-6, || {
        let field = verification_field(101, &[5, 4], 4.0)?;
        let delta = 1e-6;
        let mut worst = 0.0f64;
        for (y, t) in lipschitz_probes(2, 20, 102) {
            let y: Vec<f64> = y.iter().map(|c| c * 0.999).collect();
            let jac = field.spatial_jacobian(&y, t)?;
            for j in 0..2 {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += delta;
                ym[j] -= delta;
                let fp = field.forward(&yp, t)?;
                let fm = field.forward(&ym, t)?;
                for i in 0..2 {
                    let fd = (fp[i] - fm[i]) / (2.0 * delta);
                    worst = worst.max((jac[(i, j)] - fd).abs());
                }
            }
        }
        Ok((worst, "max |∂ξ/∂y − FD| over 20 probes".to_string()))
    }));

    // 3. Forward flow then fixed-point inversion returns to the start.
    checks.push(check("inversion_round_trip", 1e-8, || {
        let field = verification_field(101, &[5, 4], 4.0)?;
        let model = FlowDensityModel::certified(field, 16, GuardMode::Empirical)?;
        let mut probe_rng = rng::substream(103, Stream::Probes);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x = rng::uniform_in_ball(&mut probe_rng, 2);
            let tape = integrate(model.field(), model.schedule(), &x)?;
            let back = invert_flow(model.field(), model.schedule(), tape.endpoint())?;
            let err = x
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(err);
        }
        Ok((worst, "max round-trip distance over 100 points".to_string()))
    }));

    // 4. The accumulated step log-determinants equal the log-determinant of
    //    the end-to-end map measured by finite differences.
    checks.push(check("logdet_endpoint_fd", 1e-5, || {
        let field = verification_field(101, &[5, 4], 4.0)?;
        let model = FlowDensityModel::certified(field, 32, GuardMode::Empirical)?;
        let delta = 1e-5;
        let mut probe_rng = rng::substream(104, Stream::Probes);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let x = rng::uniform_in_ball(&mut probe_rng, 2);
            let tape = integrate_with_jacobians(model.field(), model.schedule(), &x)?;
            let mut jac = Mat::zeros(2, 2);
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += delta;
                xm[j] -= delta;
                let zp = integrate(model.field(), model.schedule(), &xp)?;
                let zm = integrate(model.field(), model.schedule(), &xm)?;
                for i in 0..2 {
                    jac[(i, j)] = (zp.endpoint()[i] - zm.endpoint()[i]) / (2.0 * delta);
                }
            }
            let fd_logdet = Lu::factor(&jac)?.log_abs_det();
            worst = worst.max((tape.logdet() - fd_logdet).abs());
        }
        Ok((worst, "max |Σ step log-dets − log|det FD Jacobian|| over 10 points".to_string()))
    }));

    // 5. The transport field satisfies the stationary continuity equation.
    checks.push(check("continuity_residual", 1e-6, || {
        let problem = RadialBeckmannProblem::bump(0.5)?;
        let mut worst = 0.0f64;
        for i in 0..100 {
            let r = 0.005 + 0.49 * i as f64 / 99.0;
            let residual = if inject_continuity_defect {
                problem.continuity_residual_for_flux(r, &|s| {
                    problem.radial_flux(s).map(|w| w + 0.1 * s)
                })?
            } else {
                problem.continuity_residual(r, 0.5)?
            };
            worst = worst.max(residual);
        }
        let detail = if inject_continuity_defect {
            "flux deliberately corrupted by +0.1r; the residual must expose it".to_string()
        } else {
            "max |f_ν − f_μ + div w| over 100 radii".to_string()
        };
        Ok((worst, detail))
    }));

    // 6. The model density integrates to one.
    checks.push(check("normalization", 2e-3, || {
        let field = verification_field(105, &[4, 4], 6.0)?;
        let model = FlowDensityModel::certified(field, 8, GuardMode::Empirical)?;
        let grid = polar_grid(2, 128)?;
        let mut mass = 0.0;
        for (x, w) in grid.points.iter().zip(&grid.weights) {
            mass += w * model.model_logdensity(x)?.exp();
        }
        Ok(((mass - 1.0).abs(), format!("|∫p̂ − 1| on a 128² polar grid, mass {mass:.6}")))
    }));

    checks
}

fn render_verify_report(checks: &[CheckOutcome]) -> (String, bool) {
    let all_pass = checks.iter().all(CheckOutcome::passed);
    let mut out = String::new();
    out.push_str("{\n  \"schema\": \"liouville-flow/verify-report.v1\",\n");
    out.push_str(&format!("  \"status\": \"{}\",\n", if all_pass { "pass" } else { "fail" }));
    out.push_str("  \"checks\": [\n");
    for (i, c) in checks.iter().enumerate() {
        let measured = if c.measured.is_finite() {
            fmt_f64(c.measured)
        } else {
            "null".to_string()
        };
        out.push_str(&format!(
            "    {{\"name\": \"{}\", \"status\": \"{}\", \"measured\": {}, \"threshold\": {}, \"detail\": \"{}\"}}{}\n",
            c.name,
            if c.passed() { "pass" } else { "fail" },
            measured,
            fmt_f64(c.threshold),
            json_escape(&c.detail),
            if i + 1 < checks.len() { "," } else { "" }
        ));
    }
    out.push_str("  ]\n}\n");
    (out, all_pass)
}

fn run_verify(doc: &Value, args: &RunArgs) -> CliResult<(String, i32)> {
    let spec: VerifySpec = typed_config(doc)?;
    let inject = match spec.inject_defect.as_deref() {
        None => false,
        Some("continuity") => true,
        Some(other) => {
            return Err(usage(
                "config_invalid",
                format!("unknown inject_defect `{other}` (only `continuity` is recognized)"),
            ))
        }
    };
    let checks = run_checks(inject);
    let (report, all_pass) = render_verify_report(&checks);
    if let Some(out) = args.out.as_deref() {
        write_artifact(out, "verify_report.json", &report)?;
    }
    Ok((report, if all_pass { EXIT_OK } else { EXIT_FAILURE }))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
