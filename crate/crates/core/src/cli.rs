//! `reage` command line: `synth`, `train`, `infer`, `eval`, `report`.
//!
//! Each subcommand resolves its configuration (JSON file, then `--set
//! path=value` overrides, then dedicated flags), writes the result to
//! `resolved_config.json` under its output directory, and only then starts
//! work. Success prints one JSON object on stdout; failure prints
//! `{"error": {...}}` on stderr and exits 1 (runtime) or 2 (usage, config).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datamodel::io::{frame_to_rgb8, load_clip, read_json, save_clip, write_json};
use crate::datamodel::manifest::DatasetManifest;
use crate::datamodel::AgeValue;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::metrics::{evaluate_corpus, EvalBackends, EvalConfig, TAgeMode};
use crate::report::{write_report, ReportInput};
use crate::synthpipeline::{build_dataset, Backends, PipelineConfig};
use crate::training::{TrainRunConfig, Trainer, CONFIG_FILE};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Same-age probe windows used for the recorded reconstruction threshold.
const PROBE_WINDOWS: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "reage", version, about = "Video face re-aging: synthetic data, training, inference, metrics")]
pub struct Cli {
    /// Worker threads for data synthesis and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a paired multi-age video dataset.
    Synth(SynthArgs),
    /// Train (or resume) a model on a dataset.
    Train(TrainArgs),
    /// Re-age one clip with a checkpoint.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Tabulate and chart one or more evaluations per target age.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config (a plain config or a previous resolved_config.json).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one field, e.g. `--set train.learning_rate=2e-4`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset root.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub first_subject: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run root; the run lives in `<out>/<name>`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    /// `full` (full-size networks) or `desk` (small networks for CPU).
    #[arg(long, default_value = "full")]
    pub preset: String,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Clip directory (frames plus meta.json).
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the clip's recorded apparent age.
    #[arg(long)]
    pub input_age: Option<f64>,
    #[arg(long)]
    pub target_age: f64,
    #[arg(long, default_value_t = 1)]
    pub interval: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated target ages.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<f64>>,
    #[arg(long)]
    pub input_age: Option<f64>,
    /// TRWC frame interval.
    #[arg(long)]
    pub interval: Option<usize>,
    /// `expected_diff` or `cosine`.
    #[arg(long)]
    pub t_age_mode: Option<String>,
    #[arg(long)]
    pub debug_roi: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation directory, optionally labelled: `label=dir`. Repeatable.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// What `resolved_config.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub subcommand: String,
    pub version: String,
    pub workers: usize,
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub ckpt: PathBuf,
    pub input: PathBuf,
    pub input_age: AgeValue,
    pub target_age: AgeValue,
    pub interval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub eval: EvalConfig,
}

/// Written next to a run's checkpoints when `train` finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub iterations: usize,
    pub checkpoint: PathBuf,
    /// Same-age L1 on the fixed probe windows before the first step.
    pub probe_l1_initial: f64,
    pub probe_l1_final: f64,
    /// Same-age inference should land below this: half the untrained
    /// probe L1.
    pub self_reconstruction_threshold: f64,
}

/// Sets `path` (dot-separated) inside `root` to `value`, parsed as JSON
/// when possible and as a string otherwise. The path must already exist.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not PATH=VALUE")))?;
    let mut node = &mut *root;
    for key in path.split('.') {
        node = node
            .get_mut(key)
            .ok_or_else(|| Error::config(format!("unknown config field {path:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::config(format!("unknown config field {sub:?}")))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Default → file → overrides. The file may hold any subset of fields, or
/// be a previous `resolved_config.json`; a snapshot whose config nests the
/// settings under `section` is unwrapped to that section.
pub fn resolve_config<T: Serialize + DeserializeOwned>(
    default: T,
    args: &ConfigArgs,
    section: Option<&str>,
) -> Result<T> {
    let mut value = serde_json::to_value(default)?;
    if let Some(path) = &args.config {
        if !path.is_file() {
            return Err(Error::config(format!("config file {} not found", path.display())));
        }
        let mut file: Value = read_json(path).map_err(|e| Error::config(e.to_string()))?;
        if file.get("subcommand").is_some() {
            if let Some(c) = file.get_mut("config") {
                file = c.take();
            }
            if let Some(inner) = section.and_then(|k| file.get_mut(k)) {
                file = inner.take();
            }
        }
        merge(&mut value, file, "")?;
    }
    for o in &args.overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| Error::config(format!("invalid config: {e}")))
}

fn write_snapshot(dir: &Path, subcommand: &str, workers: usize, config: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let snap = RunSnapshot {
        subcommand: subcommand.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        workers,
        config: serde_json::to_value(config)?,
    };
    write_json(&snap, &dir.join(RESOLVED_CONFIG_FILE))
}

fn age(years: f64) -> Result<AgeValue> {
    AgeValue::new(years).map_err(|e| Error::config(e.to_string()))
}

pub fn cmd_synth(args: &SynthArgs, workers: usize) -> Result<Value> {
    let mut cfg = resolve_config(PipelineConfig::default(), &args.config, None)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.subjects {
        cfg.subjects = n;
    }
    if let Some(n) = args.first_subject {
        cfg.first_subject = n;
    }
    if let Some(r) = args.resolution {
        cfg.resolution = r;
    }
    write_snapshot(&args.out, "synth", workers, &cfg)?;
    let manifest = build_dataset(&cfg, &Backends::procedural(), &args.out, workers)?;
    Ok(json!({
        "dataset": args.out,
        "subjects": manifest.subjects.len(),
        "errata": manifest.errata.len(),
        "frames_per_video": manifest.frames_per_video,
    }))
}

pub fn cmd_train(args: &TrainArgs) -> Result<Value> {
    let name = args.name.clone().unwrap_or_else(|| "default".into());
    let run_dir = args.out.join(&name);
    let resuming = run_dir.join(CONFIG_FILE).exists();
    let mut trainer = if resuming {
        let mut t = Trainer::resume(&run_dir)?;
        if let Some(n) = args.iterations {
            t.set_iterations(n)?;
        }
        t
    } else {
        let data = args
            .data
            .clone()
            .ok_or_else(|| Error::config("--data is required for a new run"))?;
        let base = match args.preset.as_str() {
            "full" => TrainRunConfig {
                dataset: data.clone(),
                ..Default::default()
            },
            "desk" => TrainRunConfig::desk(&data),
            p => return Err(Error::config(format!("unknown preset {p:?} (full | desk)"))),
        };
        let mut cfg = resolve_config(base, &args.config, None)?;
        cfg.dataset = data;
        cfg.run_root = args.out.clone();
        cfg.name = name;
        if let Some(n) = args.iterations {
            cfg.train.iterations = n;
        }
        if let Some(s) = args.seed {
            cfg.train.seed = s;
        }
        Trainer::new(cfg)?
    };
    write_snapshot(&run_dir, "train", 1, trainer.config())?;

    let previous: Option<TrainOutcome> = if resuming && run_dir.join(TRAIN_SUMMARY_FILE).exists() {
        Some(read_json(&run_dir.join(TRAIN_SUMMARY_FILE))?)
    } else {
        None
    };
    let initial = match previous {
        Some(p) => p.probe_l1_initial,
        None if trainer.iteration() == 0 => trainer.probe_l1(PROBE_WINDOWS)?,
        None => {
            return Err(Error::Checkpoint(format!(
                "{} lacks {TRAIN_SUMMARY_FILE}; cannot recover the untrained baseline",
                run_dir.display()
            )))
        }
    };
    let summary = trainer.run()?;
    let outcome = TrainOutcome {
        iterations: summary.iterations,
        checkpoint: summary
            .checkpoint
            .ok_or_else(|| Error::Checkpoint("training left no checkpoint".into()))?,
        probe_l1_initial: initial,
        probe_l1_final: trainer.probe_l1(PROBE_WINDOWS)?,
        self_reconstruction_threshold: initial / 2.0,
    };
    write_json(&outcome, &run_dir.join(TRAIN_SUMMARY_FILE))?;
    Ok(serde_json::to_value(outcome)?)
}

pub fn cmd_infer(args: &InferArgs) -> Result<Value> {
    let clip = load_clip(&args.input)?;
    let input_age = match args.input_age {
        Some(a) => age(a)?,
        None => clip
            .apparent_age
            .ok_or_else(|| Error::config("clip has no recorded age; pass --input-age"))?,
    };
    let cfg = InferConfig {
        ckpt: args.ckpt.clone(),
        input: args.input.clone(),
        input_age,
        target_age: age(args.target_age)?,
        interval: args.interval,
    };
    write_snapshot(&args.out, "infer", 1, &cfg)?;
    let generator = Generator::load(&cfg.ckpt, DType::F32)?;
    let output = generator.generate_video(&clip, cfg.input_age, cfg.target_age, cfg.interval)?;
    save_clip(&output, &args.out.join("clip"))?;
    let grid_path = args.out.join("grid.png");
    side_by_side_grid(&clip, &output, GRID_COLUMNS)?
        .save(&grid_path)
        .map_err(|e| Error::io(format!("writing {}", grid_path.display()), std::io::Error::other(e)))?;
    let mut l1 = 0.0;
    for (a, b) in clip.frames().iter().zip(output.frames()) {
        l1 += a.mean_abs_diff(b)?;
    }
    Ok(json!({
        "output": args.out.join("clip"),
        "grid": grid_path,
        "frames": output.frame_count(),
        "l1_to_input": l1 / clip.frame_count() as f64,
    }))
}

const GRID_COLUMNS: usize = 8;

/// Inputs on the top row, outputs below, at up to `columns` evenly spaced
/// frame indices.
pub fn side_by_side_grid(
    input: &crate::datamodel::VideoClip,
    output: &crate::datamodel::VideoClip,
    columns: usize,
) -> Result<image::RgbImage> {
    if input.frame_count() != output.frame_count() || input.height() != output.height() || input.width() != output.width() {
        return Err(Error::validation("grid clips differ in shape"));
    }
    let n = input.frame_count();
    let cols = columns.clamp(1, n);
    let picks: Vec<usize> = (0..cols)
        .map(|i| if cols == 1 { 0 } else { i * (n - 1) / (cols - 1) })
        .collect();
    let (h, w) = (input.height() as u32, input.width() as u32);
    let mut img = image::RgbImage::new(w * cols as u32, 2 * h);
    for (c, &i) in picks.iter().enumerate() {
        image::imageops::replace(&mut img, &frame_to_rgb8(&input.frames()[i]), (c as u32 * w) as i64, 0);
        image::imageops::replace(&mut img, &frame_to_rgb8(&output.frames()[i]), (c as u32 * w) as i64, h as i64);
    }
    Ok(img)
}

pub fn cmd_eval(args: &EvalArgs, workers: usize) -> Result<Value> {
    let mut eval = resolve_config(EvalConfig::default(), &args.config, Some("eval"))?;
    if let Some(t) = &args.targets {
        eval.targets = t.iter().map(|a| age(*a)).collect::<Result<_>>()?;
    }
    if let Some(a) = args.input_age {
        eval.input_age = Some(age(a)?);
    }
    if let Some(i) = args.interval {
        eval.trwc_interval = i;
    }
    if let Some(m) = &args.t_age_mode {
        eval.t_age_mode = m.parse::<TAgeMode>()?;
    }
    eval.debug_roi |= args.debug_roi;
    eval.workers = workers;
    let cfg = EvalRunConfig {
        ckpt: args.ckpt.clone(),
        data: args.data.clone(),
        eval,
    };
    write_snapshot(&args.out, "eval", workers, &cfg)?;
    let manifest = DatasetManifest::load(&cfg.data)?;
    let generator = Generator::load(&cfg.ckpt, DType::F32)?;
    let backends = EvalBackends::procedural(manifest.resolution)?;
    let report = evaluate_corpus(&cfg.data, &generator, &cfg.eval, &backends, Some(&args.out))?;
    Ok(serde_json::to_value(&report.summary)?)
}

pub fn cmd_report(args: &ReportArgs) -> Result<Value> {
    let inputs = args
        .inputs
        .iter()
        .map(|s| ReportInput::parse(s))
        .collect::<Result<Vec<_>>>()?;
    write_snapshot(&args.out, "report", 1, &inputs)?;
    let written = write_report(&inputs, &args.out)?;
    Ok(json!({ "written": written }))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn error_json(kind: &str, message: &str, code: i32) -> String {
    json!({ "error": { "kind": kind, "message": message }, "exit_code": code }).to_string()
}

/// Parses `args` (including the program name) and runs the subcommand;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprintln!("{}", error_json("usage", e.to_string().trim(), EXIT_USAGE));
            return EXIT_USAGE;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let workers = cli.workers.max(1);
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a, workers),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a, workers),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(v) => {
            println!("{v}");
            EXIT_OK
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_json(e.kind(), &e.to_string(), code));
            code
        }
    }
}
