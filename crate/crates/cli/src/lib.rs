//! Command implementations of the `bialign` binary.
//!
//! Every command writes its parameters (the run config) into each artifact it
//! produces: as the header line of JSONL files, in checkpoint metadata and
//! inside JSON reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use bialign_core::aligner::{complete_case, deep_align, AlignmentRecord, SearchConfig};
use bialign_core::corpus::{read_log, read_records, write_log, write_records, AttributeSchema, Direction, EventLog};
use bialign_core::evalkit::{self, Correction, EvaluationReport};
use bialign_core::neuralnet::{self, init_model, load_model, save_model, NextEventModel, TrainConfig};
use bialign_core::procgen::{self, AnomalyContext, RandomGraphParams};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// A user error in the command line or its inputs; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(name = "bialign", version, about = "Event-log anomaly correction by bidirectional beam search")]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file whose keys mirror the subcommand's flags; flags given on the
    /// command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a clean log from a process and inject anomalies.
    Generate(GenerateArgs),
    /// Train the forward and backward models on a log.
    Train(TrainArgs),
    /// Align every case of a log.
    Align(AlignArgs),
    /// Generate the most likely case for given case attributes.
    Complete(CompleteArgs),
    /// Score alignments against ground truth.
    Evaluate(EvaluateArgs),
    /// Align a log against the variants of its ground truth.
    Reference(ReferenceArgs),
    /// Run generate, train, align and evaluate over noise levels and variants.
    Sweep(SweepArgs),
}

/// Which attributes a model sees. Without event attributes only the
/// activity head exists, so `none` and `C` score control flow alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "none")]
    Plain,
    C,
    E,
    CE,
}

impl Variant {
    pub fn uses_event_attributes(self) -> bool {
        matches!(self, Variant::E | Variant::CE)
    }

    pub fn uses_case_attributes(self) -> bool {
        matches!(self, Variant::C | Variant::CE)
    }

    pub fn project(self, schema: &AttributeSchema) -> AttributeSchema {
        schema.project(self.uses_event_attributes(), self.uses_case_attributes())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "none",
            Variant::C => "C",
            Variant::E => "E",
            Variant::CE => "CE",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" | "null" | "0" | "∅" => Ok(Variant::Plain),
            "C" | "c" => Ok(Variant::C),
            "E" | "e" => Ok(Variant::E),
            "CE" | "ce" | "EC" | "ec" => Ok(Variant::CE),
            _ => Err(format!("unknown variant {s:?} (expected none, C, E or CE)")),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GraphArgs {
    /// `paper`, `random`, or a path to a graph JSON file.
    #[arg(long, default_value = "paper")]
    pub process: String,
    /// Random graphs: distinct activities including start and end.
    #[arg(long, default_value_t = 14)]
    pub activities: usize,
    /// Random graphs: most alternatives in one block.
    #[arg(long, default_value_t = 3)]
    pub breadth: usize,
    /// Random graphs: number of sequential blocks.
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    /// Random graphs: number of event attributes.
    #[arg(long, default_value_t = 2)]
    pub event_attributes: usize,
    /// Random graphs: number of case attributes.
    #[arg(long, default_value_t = 2)]
    pub case_attributes: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long, default_value_t = 5000)]
    pub cases: usize,
    /// Fraction of cases that receive an anomaly.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainOptions {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// none, C, E or CE.
    #[arg(long, default_value = "CE")]
    pub variant: Variant,
    /// Checkpoints go to `<prefix>.fwd.ckpt` and `<prefix>.bwd.ckpt`.
    #[arg(long)]
    pub out_prefix: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainOptions,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 5)]
    pub beam_width: usize,
    #[arg(long, default_value_t = 3)]
    pub max_deletion: usize,
    #[arg(long, default_value_t = 10)]
    pub max_iterations: usize,
    /// Score events by their activity alone.
    #[arg(long)]
    pub control_flow_only: bool,
    /// Divide scores by sequence length plus one.
    #[arg(long)]
    pub length_normalize: bool,
}

impl SearchArgs {
    pub fn config(&self) -> SearchConfig {
        SearchConfig {
            beam_width: self.beam_width,
            max_deletion: self.max_deletion,
            max_iterations: self.max_iterations,
            control_flow_only: self.control_flow_only,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AlignArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub fwd: PathBuf,
    #[arg(long)]
    pub bwd: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompleteArgs {
    #[arg(long)]
    pub fwd: PathBuf,
    #[arg(long)]
    pub bwd: PathBuf,
    /// Case attribute assignment `NAME=VALUE`; repeatable.
    #[arg(long = "attr")]
    pub attrs: Vec<String>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub alignments: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// JSON report path; a text table is written next to it with `.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row name in the printed table.
    #[arg(long, default_value = "bialign")]
    pub name: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReferenceArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Ground-truth log whose activity sequences form the variant set.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long, default_value_t = 5000)]
    pub cases: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    pub noise_levels: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "none,CE")]
    pub variants: Vec<Variant>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub train: TrainOptions,
    #[command(flatten)]
    pub search: SearchArgs,
}

fn run_config(command: &str, args: &impl Serialize) -> Value {
    json!({ "command": command, "version": env!("CARGO_PKG_VERSION"), "args": args })
}

/// Splits one seed into independent streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Inserts the keys of a TOML config file as `--key=value` flags directly
/// after the subcommand, so that later command-line flags override them.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = if let Some(p) = args[pos].strip_prefix("--config=") {
        p.to_string()
    } else {
        match args.get(pos + 1) {
            Some(p) => p.clone(),
            None => return usage("--config needs a path"),
        }
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let table: toml::Table = match toml::from_str(&text) {
        Ok(t) => t,
        Err(e) => return usage(format!("config {path}: {e}")),
    };
    let mut flags = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &toml::Value| -> Result<String> {
            Ok(match v {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => return usage(format!("config key {key}: unsupported value {other}")),
            })
        };
        match &value {
            toml::Value::Boolean(true) => flags.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let items = items.iter().map(scalar).collect::<Result<Vec<_>>>()?;
                flags.push(format!("{flag}={}", items.join(",")));
            }
            v => flags.push(format!("{flag}={}", scalar(v)?)),
        }
    }
    let sub = args
        .iter()
        .enumerate()
        .skip(1)
        .find(|(i, a)| !a.starts_with('-') && *i != pos + 1)
        .map(|(i, _)| i);
    let Some(sub) = sub else {
        return Ok(args);
    };
    let mut out = args[..=sub].to_vec();
    out.extend(flags);
    out.extend(args[sub + 1..].iter().cloned());
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => {
            let (fwd, bwd) = train(&a)?;
            for (name, losses) in [("forward", &fwd), ("backward", &bwd)] {
                let first = losses.first().copied().unwrap_or(f64::NAN);
                let last = losses.last().copied().unwrap_or(f64::NAN);
                eprintln!("train: {name} loss {first:.4} -> {last:.4} over {} epochs", losses.len());
            }
            Ok(())
        }
        Command::Align(a) => align(&a),
        Command::Complete(a) => {
            let seq = complete(&a)?;
            println!("{}", serde_json::to_string(&seq)?);
            Ok(())
        }
        Command::Evaluate(a) => {
            let report = evaluate(&a)?;
            print!("{}", evalkit::render_table(&[(a.name.clone(), &report)]));
            print!("{}", evalkit::render_kinds(&report));
            Ok(())
        }
        Command::Reference(a) => reference(&a),
        Command::Sweep(a) => sweep(&a),
    }
}

fn load_process(
    args: &GraphArgs,
    rng: &mut ChaCha8Rng,
) -> Result<(procgen::LikelihoodGraph, procgen::CaseAttributeRule)> {
    match args.process.as_str() {
        "paper" => Ok(procgen::paper_process()),
        "random" => {
            let params = RandomGraphParams {
                n_activities: args.activities,
                breadth: args.breadth,
                depth: args.depth,
                n_event_attributes: args.event_attributes,
                n_case_attributes: args.case_attributes,
            };
            match procgen::random_likelihood_graph(params, rng) {
                Ok(g) => Ok(g),
                Err(e) => usage(format!("random graph: {e}")),
            }
        }
        path => {
            let path = Path::new(path);
            if !path.is_file() {
                return usage(format!("--process must be paper, random or a graph file; got {path:?}"));
            }
            match procgen::load_graph(path) {
                Ok(g) => Ok(g),
                Err(e) => usage(format!("graph file {path:?}: {e}")),
            }
        }
    }
}

pub const NOISY_LOG: &str = "noisy.jsonl";
pub const TRUTH_LOG: &str = "truth.jsonl";
pub const GRAPH_FILE: &str = "graph.json";

pub fn generate(args: &GenerateArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.noise) {
        return usage(format!("--noise must lie in [0, 1], got {}", args.noise));
    }
    if args.cases == 0 {
        return usage("--cases must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (graph, rule) = load_process(&args.graph, &mut rng)?;
    let clean = procgen::generate_log(&graph, &rule, args.cases, &mut rng)?;
    let ctx = AnomalyContext::for_graph(&graph);
    let (mut noisy, mut truth) = procgen::apply_noise(&clean, args.noise, &ctx, &mut rng)?;
    let config = run_config("generate", args);
    noisy.run_config = Some(config.clone());
    truth.run_config = Some(config.clone());
    std::fs::create_dir_all(&args.out_dir)?;
    write_log(&noisy, &args.out_dir.join(NOISY_LOG))?;
    write_log(&truth, &args.out_dir.join(TRUTH_LOG))?;
    procgen::save_graph(&graph, &rule, Some(&config), &args.out_dir.join(GRAPH_FILE))?;
    Ok(())
}

pub fn checkpoint_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".fwd.ckpt"), with(".bwd.ckpt"))
}

/// Trains both directions (in parallel threads, each deterministic) and
/// writes the checkpoints. Returns the per-epoch losses of each direction.
pub fn train(args: &TrainArgs) -> Result<(Vec<f64>, Vec<f64>)> {
    let log = read_log(&args.log).with_context(|| format!("reading {:?}", args.log))?;
    let schema = args.variant.project(&AttributeSchema::build(&log)?);
    let max_len = log.max_case_len() + 2;
    let config = run_config("train", args);
    let train_one = |direction: Direction, stream: u64| -> Result<(NextEventModel, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, stream));
        let model = init_model(&schema, direction, max_len, &mut rng)?;
        let data = log
            .cases
            .iter()
            .map(|c| model.encode(c))
            .collect::<neuralnet::Result<Vec<_>>>()?;
        let tc = TrainConfig {
            epochs: args.train.epochs,
            batch_size: args.train.batch_size,
            learning_rate: args.train.learning_rate,
            seed: derive_seed(args.seed, stream + 2),
            ..TrainConfig::default()
        };
        let (mut model, losses) = neuralnet::train(model, &data, &tc)?;
        model.run_config = Some(config.clone());
        Ok((model, losses))
    };
    let (fwd, bwd) = std::thread::scope(|s| {
        let f = s.spawn(|| train_one(Direction::Forward, 0));
        let b = train_one(Direction::Backward, 1);
        (f.join().expect("training thread panicked"), b)
    });
    let (fwd, fwd_loss) = fwd?;
    let (bwd, bwd_loss) = bwd?;
    if let Some(parent) = args.out_prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let (fp, bp) = checkpoint_paths(&args.out_prefix);
    save_model(&fwd, &fp)?;
    save_model(&bwd, &bp)?;
    Ok((fwd_loss, bwd_loss))
}

pub fn load_pair(fwd: &Path, bwd: &Path) -> Result<(NextEventModel, NextEventModel)> {
    let f = load_model(fwd, None).with_context(|| format!("loading {fwd:?}"))?;
    let b = load_model(bwd, Some(&f.schema)).with_context(|| format!("loading {bwd:?}"))?;
    Ok((f, b))
}

/// Aligns every case of `log` in parallel; output order follows the log.
pub fn align_log(
    fwd: &NextEventModel,
    bwd: &NextEventModel,
    log: &EventLog,
    config: &SearchConfig,
) -> Result<Vec<AlignmentRecord>> {
    log.cases
        .par_iter()
        .map(|case| {
            let result = deep_align(fwd, bwd, case, config)
                .with_context(|| format!("aligning case {}", case.id))?;
            Ok(AlignmentRecord::from_result(case, &result))
        })
        .collect()
}

pub fn align(args: &AlignArgs) -> Result<()> {
    let (fwd, bwd) = load_pair(&args.fwd, &args.bwd)?;
    let log = read_log(&args.log).with_context(|| format!("reading {:?}", args.log))?;
    let config = args.search.config();
    if let Err(e) = config.validate() {
        return usage(e.to_string());
    }
    let records = align_log(&fwd, &bwd, &log, &config)?;
    write_records(&args.out, &records, Some(&run_config("align", args)))?;
    Ok(())
}

pub fn complete(args: &CompleteArgs) -> Result<Vec<String>> {
    let (fwd, bwd) = load_pair(&args.fwd, &args.bwd)?;
    let mut attrs = BTreeMap::new();
    for a in &args.attrs {
        let Some((k, v)) = a.split_once('=') else {
            return usage(format!("--attr expects NAME=VALUE, got {a:?}"));
        };
        attrs.insert(k.to_string(), v.to_string());
    }
    let config = args.search.config();
    if let Err(e) = config.validate() {
        return usage(e.to_string());
    }
    let case = complete_case(&fwd, &bwd, &attrs, &config)?;
    Ok(case.activities().iter().map(|a| a.to_string()).collect())
}

fn write_report(report: &EvaluationReport, name: &str, out: &Path) -> Result<()> {
    std::fs::write(out, serde_json::to_string_pretty(report)? + "\n")?;
    let table = evalkit::render_table(&[(name.to_string(), report)]) + "\n" + &evalkit::render_kinds(report);
    std::fs::write(out.with_extension("txt"), table)?;
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<EvaluationReport> {
    let (corrections, _) = read_records::<Correction>(&args.alignments)
        .with_context(|| format!("reading {:?}", args.alignments))?;
    let truth = read_log(&args.truth).with_context(|| format!("reading {:?}", args.truth))?;
    let mut report = evalkit::evaluate(&corrections, &truth)?;
    report.run_config = Some(run_config("evaluate", args));
    if let Some(out) = &args.out {
        write_report(&report, &args.name, out)?;
    }
    Ok(report)
}

pub fn reference(args: &ReferenceArgs) -> Result<()> {
    let log = read_log(&args.log)?;
    let truth = read_log(&args.truth)?;
    let variants = evalkit::variants(&truth);
    let records = log
        .cases
        .par_iter()
        .map(|case| {
            let (variant, alignment) = evalkit::reference_align(case, &variants)?;
            Ok(AlignmentRecord {
                id: case.id.clone(),
                score: 0.0,
                alignment,
                corrected: variant,
                converged: true,
                iterations: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_records(&args.out, &records, Some(&run_config("reference", args)))?;
    Ok(())
}

/// Outcome of one sweep cell, as written to `results.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub noise: f64,
    pub method: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvaluationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn noise_dir(out: &Path, noise: f64) -> PathBuf {
    out.join(format!("noise-{noise:.2}"))
}

fn run_cell(
    args: &SweepArgs,
    data: &Path,
    method: &str,
    variant: Option<Variant>,
) -> Result<EvaluationReport> {
    let dir = data.join(method);
    let report_path = dir.join("report.json");
    if report_path.is_file() {
        let text = std::fs::read_to_string(&report_path)?;
        return Ok(serde_json::from_str(&text)?);
    }
    std::fs::create_dir_all(&dir)?;
    let alignments = dir.join("alignments.jsonl");
    match variant {
        Some(variant) => {
            let prefix = dir.join("model");
            train(&TrainArgs {
                log: data.join(NOISY_LOG),
                variant,
                out_prefix: prefix.clone(),
                seed: args.seed,
                train: args.train.clone(),
            })?;
            let (fwd, bwd) = checkpoint_paths(&prefix);
            align(&AlignArgs {
                log: data.join(NOISY_LOG),
                fwd,
                bwd,
                out: alignments.clone(),
                search: args.search.clone(),
            })?;
        }
        None => reference(&ReferenceArgs {
            log: data.join(NOISY_LOG),
            truth: data.join(TRUTH_LOG),
            out: alignments.clone(),
        })?,
    }
    evaluate(&EvaluateArgs {
        alignments,
        truth: data.join(TRUTH_LOG),
        out: Some(report_path),
        name: method.to_string(),
    })
}

/// Runs the grid. Cells with an existing `report.json` are reused; a failed
/// cell is recorded and the sweep moves on.
pub fn sweep(args: &SweepArgs) -> Result<()> {
    if args.noise_levels.is_empty() || args.variants.is_empty() {
        return usage("--noise-levels and --variants must not be empty");
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let mut results = Vec::new();
    for &noise in &args.noise_levels {
        let data = noise_dir(&args.out_dir, noise);
        if !(data.join(NOISY_LOG).is_file() && data.join(TRUTH_LOG).is_file()) {
            generate(&GenerateArgs {
                graph: args.graph.clone(),
                cases: args.cases,
                noise,
                seed: args.seed,
                out_dir: data.clone(),
            })?;
        }
        let mut methods: Vec<(String, Option<Variant>)> =
            args.variants.iter().map(|v| (v.to_string(), Some(*v))).collect();
        methods.push(("reference".into(), None));
        for (method, variant) in methods {
            eprintln!("sweep: noise {noise:.2} {method}");
            let cell = match run_cell(args, &data, &method, variant) {
                Ok(report) => CellResult {
                    noise,
                    method,
                    status: "ok".into(),
                    report: Some(report),
                    error: None,
                },
                Err(e) => CellResult {
                    noise,
                    method,
                    status: "failed".into(),
                    report: None,
                    error: Some(format!("{e:#}")),
                },
            };
            results.push(cell);
        }
    }
    write_records(&args.out_dir.join("results.jsonl"), &results, Some(&run_config("sweep", args)))?;
    let rows: Vec<(String, &EvaluationReport)> = results
        .iter()
        .filter_map(|c| c.report.as_ref().map(|r| (format!("{:.2} {}", c.noise, c.method), r)))
        .collect();
    let mut summary = evalkit::render_table(&rows);
    for c in results.iter().filter(|c| c.error.is_some()) {
        summary.push_str(&format!(
            "failed: {:.2} {}: {}\n",
            c.noise,
            c.method,
            c.error.as_deref().unwrap_or_default()
        ));
    }
    std::fs::write(args.out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    if results.iter().all(|c| c.error.is_some()) {
        bail!("every sweep cell failed");
    }
    Ok(())
}
