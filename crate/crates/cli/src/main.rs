//! `simulsense` command-line driver.
//!
//! Exit codes: 0 on success, 1 on runtime or I/O failure, 2 on usage errors.
//! Set `SIMULSENSE_LOG` (for example `debug`) for diagnostics on stderr.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{error::ErrorKind, CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;

use simulsense::datagen::{generate_corpus, read_manifest, write_manifest, GenConfig};
use simulsense::policies::{parse_policy, PolicyConfig};
use simulsense::report::{
    aggregate, emit, evaluate_policy, parse_gammas, read_utterance_csv, run_sweep, summary_csv,
    sweep_points, utterance_csv, SummaryRow,
};
use simulsense::sat::{
    evaluate_boundaries, train_toy_predictor, QuantityTarget, TrainConfig,
    BOUNDARY_TOLERANCE_FRAMES,
};
use simulsense::simulator::{OracleSpec, DEFAULT_CHUNK_MS};
use simulsense::sud::LatencyTag;

#[derive(Debug, Parser)]
#[command(
    name = "simulsense",
    version,
    about = "Simulated simultaneous translation driven by sense-unit detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus manifest.
    GenData(GenDataArgs),
    /// Simulate one policy over a corpus and write per-utterance metrics.
    Simulate(SimulateArgs),
    /// Evaluate policies over a threshold range, one summary row per configuration.
    Sweep(SweepArgs),
    /// Aggregate per-utterance metric CSVs into a summary table.
    Metrics(MetricsArgs),
    /// Train the toy boundary detector and report held-out boundary F1.
    TrainToy(TrainToyArgs),
}

/// A configuration problem found after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// Every subcommand accepts `--config FILE`: a JSON object whose keys are
/// the subcommand's long option names in snake_case. Options given on the
/// command line take precedence over the file.
trait FromConfig: for<'de> Deserialize<'de> {
    const SUBCOMMAND: &'static str;
    fn config_path(&self) -> Option<&Path>;
    fn fill_from(&mut self, file: Self);

    fn merged(mut self) -> Result<Self> {
        if let Some(path) = self.config_path() {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            let bad = |m: String| usage(format!("{}: {m}", path.display()));
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            let object = value
                .as_object()
                .ok_or_else(|| bad("expected a JSON object".into()))?;
            let cmd = Cli::command();
            let sub = cmd
                .find_subcommand(Self::SUBCOMMAND)
                .expect("subcommand exists");
            for key in object.keys() {
                let known =
                    key != "config" && sub.get_arguments().any(|a| a.get_id() == key.as_str());
                if !known {
                    return Err(bad(format!(
                        "unknown option `{key}` for {}",
                        Self::SUBCOMMAND
                    )));
                }
            }
            let file: Self = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            self.fill_from(file);
        }
        Ok(self)
    }
}

macro_rules! config_fields {
    ($ty:ty, $name:literal { $($field:ident),* $(,)? }) => {
        impl FromConfig for $ty {
            const SUBCOMMAND: &'static str = $name;
            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }
            fn fill_from(&mut self, file: Self) {
                $(fill(&mut self.$field, file.$field);)*
            }
        }
    };
}

trait Fill {
    fn fill(&mut self, other: Self);
}

impl<T> Fill for Option<T> {
    fn fill(&mut self, other: Self) {
        if self.is_none() {
            *self = other;
        }
    }
}

impl<T> Fill for Vec<T> {
    fn fill(&mut self, other: Self) {
        if self.is_empty() {
            *self = other;
        }
    }
}

fn fill<T: Fill>(target: &mut T, other: T) {
    target.fill(other);
}

/// Report a missing option the way clap does, with usage text and exit 2.
fn require<T>(value: Option<T>, subcommand: &str, flag: &str) -> T {
    match value {
        Some(v) => v,
        None => {
            let mut cmd = Cli::command();
            let sub = cmd
                .find_subcommand_mut(subcommand)
                .expect("subcommand exists")
                .clone();
            sub.bin_name(format!("simulsense {subcommand}"))
                .error(
                    ErrorKind::MissingRequiredArgument,
                    format!("the following required argument was not provided: --{flag}"),
                )
                .exit()
        }
    }
}

fn parse_tag(s: &str) -> std::result::Result<LatencyTag, String> {
    s.parse()
}

#[derive(Debug, clap::Args, Deserialize)]
#[serde(default)]
#[derive(Default)]
struct GenDataArgs {
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of utterances.
    #[arg(long)]
    n: Option<usize>,
    /// Shortest utterance in seconds.
    #[arg(long)]
    min_duration_s: Option<f64>,
    /// Longest utterance in seconds.
    #[arg(long)]
    max_duration_s: Option<f64>,
    /// Feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Feature frames per second.
    #[arg(long)]
    frame_rate: Option<f64>,
    /// Mean unit lengths in seconds for the low, medium and high tiers, as `L,M,H`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    mean_unit_s: Vec<f64>,
    /// Reference tokens per second of audio.
    #[arg(long)]
    tokens_per_s: Option<f64>,
    /// Per-utterance speaking-rate spread factor (at least 1).
    #[arg(long)]
    rate_spread: Option<f64>,
    /// Manifest path (`-` for standard output).
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    /// JSON file with default option values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

config_fields!(GenDataArgs, "gen-data" {
    seed, n, min_duration_s, max_duration_s, dim, frame_rate, mean_unit_s, tokens_per_s, rate_spread, out
});

#[derive(Debug, Default, clap::Args, Deserialize)]
#[serde(default)]
struct SimulationOptions {
    /// Oracle spec, e.g. `weights=gt,sud_ms=38.6,seed=3`.
    #[arg(long)]
    oracle: Option<String>,
    /// Source chunk length in milliseconds (a policy's own chunk_ms wins).
    #[arg(long)]
    chunk_ms: Option<f64>,
    /// Latency tag for sense-unit policies, overriding the policy spec.
    #[arg(long, value_parser = parse_tag)]
    tag: Option<LatencyTag>,
    /// Translator seed, overriding the oracle spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; output does not depend on this.
    #[arg(long)]
    parallelism: Option<usize>,
}

impl SimulationOptions {
    fn fill_from(&mut self, other: Self) {
        fill(&mut self.oracle, other.oracle);
        fill(&mut self.chunk_ms, other.chunk_ms);
        fill(&mut self.tag, other.tag);
        fill(&mut self.seed, other.seed);
        fill(&mut self.parallelism, other.parallelism);
    }

    fn oracle(&self) -> Result<OracleSpec> {
        let mut spec = match &self.oracle {
            Some(s) => OracleSpec::parse(s)?,
            None => OracleSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        Ok(spec)
    }

    fn chunk_ms(&self) -> Result<f64> {
        let ms = self.chunk_ms.unwrap_or(DEFAULT_CHUNK_MS);
        if !(ms > 0.0) || !ms.is_finite() {
            return Err(usage(format!("--chunk-ms must be positive, got {ms}")));
        }
        Ok(ms)
    }

    fn parallelism(&self) -> Result<usize> {
        match self.parallelism {
            Some(0) => Err(usage("--parallelism must be at least 1")),
            Some(n) => Ok(n),
            None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }

    fn policy(&self, spec: &str) -> Result<PolicyConfig> {
        let mut policy = parse_policy(spec)?;
        if let Some(tag) = self.tag {
            policy.kind = policy.kind.with_tag(tag);
        }
        Ok(policy)
    }
}

#[derive(Debug, clap::Args, Deserialize)]
#[serde(default)]
#[derive(Default)]
struct SimulateArgs {
    /// Corpus manifest.
    #[arg(long, required_unless_present = "config")]
    manifest: Option<PathBuf>,
    /// Policy spec, e.g. `sense:gamma=1.0,tag=high`, `waitk:k=3`, `la`.
    #[arg(long, required_unless_present = "config")]
    policy: Option<String>,
    /// Per-utterance metrics CSV (`-` for standard output).
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    /// Directory for per-utterance JSONL event logs.
    #[arg(long)]
    events_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    sim: SimulationOptions,
    /// JSON file with default option values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

impl FromConfig for SimulateArgs {
    const SUBCOMMAND: &'static str = "simulate";
    fn config_path(&self) -> Option<&Path> {
        self.config.as_deref()
    }
    fn fill_from(&mut self, file: Self) {
        fill(&mut self.manifest, file.manifest);
        fill(&mut self.policy, file.policy);
        fill(&mut self.out, file.out);
        fill(&mut self.events_dir, file.events_dir);
        self.sim.fill_from(file.sim);
    }
}

#[derive(Debug, clap::Args, Deserialize)]
#[serde(default)]
#[derive(Default)]
struct SweepArgs {
    /// Corpus manifest.
    #[arg(long, required_unless_present = "config")]
    manifest: Option<PathBuf>,
    /// Policy spec; repeat for several policies.
    #[arg(long = "policy", id = "policy", required_unless_present = "config")]
    #[serde(rename = "policy")]
    policies: Vec<String>,
    /// Thresholds as `start:stop:step` (inclusive) or a comma list.
    #[arg(long, required_unless_present = "config")]
    gammas: Option<String>,
    /// Summary CSV (`-` for standard output).
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    sim: SimulationOptions,
    /// JSON file with default option values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

impl FromConfig for SweepArgs {
    const SUBCOMMAND: &'static str = "sweep";
    fn config_path(&self) -> Option<&Path> {
        self.config.as_deref()
    }
    fn fill_from(&mut self, file: Self) {
        fill(&mut self.manifest, file.manifest);
        fill(&mut self.policies, file.policies);
        fill(&mut self.gammas, file.gammas);
        fill(&mut self.out, file.out);
        self.sim.fill_from(file.sim);
    }
}

#[derive(Debug, clap::Args, Deserialize)]
#[serde(default)]
#[derive(Default)]
struct MetricsArgs {
    /// Per-utterance metrics CSV written by `simulate`; repeat to combine runs.
    #[arg(long = "input", id = "input", required_unless_present = "config")]
    #[serde(rename = "input")]
    inputs: Vec<PathBuf>,
    /// Summary CSV (`-` for standard output).
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    /// JSON file with default option values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

config_fields!(MetricsArgs, "metrics" { inputs, out });

#[derive(Debug, Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Qua1Target {
    /// Total weight should equal the unit count.
    Units,
    /// Total weight should equal the unit count minus one.
    UnitsMinusOne,
}

#[derive(Debug, clap::Args, Deserialize)]
#[serde(default)]
#[derive(Default)]
struct TrainToyArgs {
    /// Training corpus manifest.
    #[arg(long, required_unless_present = "config")]
    manifest: Option<PathBuf>,
    /// Held-out manifest. Without it the last fifth of the training manifest is held out.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Tier whose boundaries are learned.
    #[arg(long, value_parser = parse_tag)]
    tag: Option<LatencyTag>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Subgradient step size.
    #[arg(long)]
    step_size: Option<f64>,
    /// Target of the total-weight loss.
    #[arg(long, value_enum)]
    qua1_target: Option<Qua1Target>,
    /// Training-curve CSV (`-` for standard output).
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    /// Trained detector parameters as JSON.
    #[arg(long, required_unless_present = "config")]
    model_out: Option<PathBuf>,
    /// JSON file with default option values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

config_fields!(TrainToyArgs, "train-toy" {
    manifest, heldout, tag, epochs, step_size, qua1_target, out, model_out
});

fn gen_data(args: GenDataArgs) -> Result<()> {
    let args = args.merged()?;
    let out = require(args.out, "gen-data", "out");
    let defaults = GenConfig::default();
    let config = GenConfig {
        seed: args.seed.unwrap_or(defaults.seed),
        n_utterances: args.n.unwrap_or(defaults.n_utterances),
        min_duration_s: args.min_duration_s.unwrap_or(defaults.min_duration_s),
        max_duration_s: args.max_duration_s.unwrap_or(defaults.max_duration_s),
        dim: args.dim.unwrap_or(defaults.dim),
        frame_rate: args.frame_rate.unwrap_or(defaults.frame_rate),
        mean_unit_s: match args.mean_unit_s[..] {
            [] => defaults.mean_unit_s,
            [l, m, h] => [l, m, h],
            _ => return Err(usage("--mean-unit-s takes exactly three values")),
        },
        tokens_per_s: args.tokens_per_s.unwrap_or(defaults.tokens_per_s),
        vocab_size: defaults.vocab_size,
        rate_spread: args.rate_spread.unwrap_or(defaults.rate_spread),
    };
    let manifest = generate_corpus(&config)?;
    if out.as_os_str() == "-" {
        emit(&manifest.to_jsonl(), &out)?;
    } else {
        write_manifest(&manifest, &out)?;
    }
    let seconds: f64 = manifest.records.iter().map(|r| r.duration_s).sum();
    let [low, med, high] = manifest.tier_unit_totals();
    eprintln!(
        "wrote {} utterances ({seconds:.1} s) to {}; units per second: low {:.3}, medium {:.3}, high {:.3}",
        manifest.records.len(),
        out.display(),
        low as f64 / seconds,
        med as f64 / seconds,
        high as f64 / seconds,
    );
    Ok(())
}

fn print_summary(rows: &[SummaryRow]) {
    for row in rows {
        let point = match (row.gamma, row.tag) {
            (Some(g), Some(t)) => format!(" gamma={g} tag={t}"),
            _ => String::new(),
        };
        eprintln!(
            "{}{point}: {} utterances, BLEU {:.4}, LAAL {:.3} s ideal / {:.3} s computation-aware, \
             {:.2} ms per decision, RTF {:.4}, {} writes",
            row.policy,
            row.utterances,
            row.bleu,
            row.laal_ideal_s,
            row.laal_ca_s,
            row.avg_decision_ms,
            row.rtf,
            row.num_writes,
        );
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let args = args.merged()?;
    let manifest_path = require(args.manifest, "simulate", "manifest");
    let policy = require(args.policy, "simulate", "policy");
    let out = require(args.out, "simulate", "out");
    let policy = args.sim.policy(&policy)?;
    let oracles = args.sim.oracle()?;
    let chunk_ms = args.sim.chunk_ms()?;
    let parallelism = args.sim.parallelism()?;

    let manifest = read_manifest(&manifest_path)?;
    info!(
        "simulating {} utterances with {policy}",
        manifest.records.len()
    );
    let (results, rows) =
        evaluate_policy(&manifest.records, &policy, &oracles, chunk_ms, parallelism)?;
    emit(&utterance_csv(&rows)?, &out)?;
    if let Some(dir) = &args.events_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for result in &results {
            let path = dir.join(format!("{}.jsonl", result.utterance_id));
            fs::write(&path, result.events_jsonl())
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    print_summary(&aggregate(&rows));
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let args = args.merged()?;
    let manifest_path = require(args.manifest, "sweep", "manifest");
    let gammas = require(args.gammas, "sweep", "gammas");
    let out = require(args.out, "sweep", "out");
    if args.policies.is_empty() {
        require::<()>(None, "sweep", "policy");
    }
    let gammas = parse_gammas(&gammas)?;
    let policies = args
        .policies
        .iter()
        .map(|p| args.sim.policy(p))
        .collect::<Result<Vec<_>>>()?;
    let oracles = args.sim.oracle()?;
    let chunk_ms = args.sim.chunk_ms()?;
    let parallelism = args.sim.parallelism()?;

    let manifest = read_manifest(&manifest_path)?;
    let points = sweep_points(&policies, &gammas);
    info!(
        "sweeping {} configurations over {} utterances",
        points.len(),
        manifest.records.len()
    );
    let summary = run_sweep(&manifest.records, &points, &oracles, chunk_ms, parallelism)?;
    emit(&summary_csv(&summary)?, &out)?;
    print_summary(&summary);
    Ok(())
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let args = args.merged()?;
    let out = require(args.out, "metrics", "out");
    if args.inputs.is_empty() {
        require::<()>(None, "metrics", "input");
    }
    let mut rows = Vec::new();
    for input in &args.inputs {
        let text = fs::read_to_string(input)
            .with_context(|| format!("cannot read {}", input.display()))?;
        rows.extend(read_utterance_csv(&text, &input.display().to_string())?);
    }
    let summary = aggregate(&rows);
    emit(&summary_csv(&summary)?, &out)?;
    print_summary(&summary);
    Ok(())
}

fn train_toy(args: TrainToyArgs) -> Result<()> {
    let args = args.merged()?;
    let manifest_path = require(args.manifest, "train-toy", "manifest");
    let out = require(args.out, "train-toy", "out");
    let model_out = require(args.model_out, "train-toy", "model-out");
    let defaults = TrainConfig::default();
    let step_size = args.step_size.unwrap_or(defaults.step_size);
    if !(step_size > 0.0) || !step_size.is_finite() {
        return Err(usage(format!(
            "--step-size must be positive, got {step_size}"
        )));
    }
    let cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(defaults.epochs),
        step_size,
        qua1_target: match args.qua1_target {
            Some(Qua1Target::UnitsMinusOne) => QuantityTarget::UnitsMinusOne,
            Some(Qua1Target::Units) => QuantityTarget::Units,
            None => defaults.qua1_target,
        },
        ..defaults
    };
    let tag = args.tag.unwrap_or(LatencyTag::High);

    let manifest = read_manifest(&manifest_path)?;
    let mut train = manifest.records;
    let heldout = match &args.heldout {
        Some(path) => read_manifest(path)?.records,
        None => {
            let keep = train.len() - train.len() / 5;
            if keep == 0 || keep == train.len() {
                anyhow::bail!(
                    "{}: need at least two utterances to hold some out (or pass --heldout)",
                    manifest_path.display()
                );
            }
            train.split_off(keep)
        }
    };
    info!(
        "training on {} utterances, scoring on {} held out",
        train.len(),
        heldout.len()
    );
    let outcome = train_toy_predictor(&train, tag, &cfg)?;
    emit(&outcome.curve_csv(), &out)?;
    fs::write(&model_out, outcome.detector.to_json())
        .with_context(|| format!("cannot write {}", model_out.display()))?;
    let score = evaluate_boundaries(
        &outcome.detector,
        &heldout,
        tag,
        1.0,
        BOUNDARY_TOLERANCE_FRAMES,
    )?;
    let last = outcome.curve.last().expect("curve has the initial row");
    eprintln!(
        "epochs {}: final mean loss {:.4} ({} rising epochs); held-out boundary F1 {:.4} \
         (precision {:.4}, recall {:.4})",
        cfg.epochs,
        last.mean_total,
        outcome.non_monotone_epochs(),
        score.f1(),
        score.precision(),
        score.recall(),
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage_error = err.chain().any(|cause| {
        cause.downcast_ref::<UsageError>().is_some()
            || cause
                .downcast_ref::<simulsense::Error>()
                .is_some_and(simulsense::Error::is_usage)
    });
    if usage_error {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIMULSENSE_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Simulate(args) => simulate(args),
        Command::Sweep(args) => sweep(args),
        Command::Metrics(args) => metrics(args),
        Command::TrainToy(args) => train_toy(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
