//! Command-line front end for the stagenet library: cohort synthesis,
//! class balancing, training, evaluation, single-sequence prediction, and
//! architecture inspection.
//!
//! Every option can also come from a `--config` file of `key=value` lines
//! whose keys mirror the long flag names; explicit flags win over file
//! values, file values win over defaults. Exit codes: 0 success, 1
//! internal failure (training divergence, golden-table mismatch), 2
//! usage or contract error.

use clap::{Args, Parser, Subcommand};
use stagenet::data::{
    balance_dataset, builtin_templates, generate_synthetic_cohort, load_sequences_jobs,
    parse_affine_templates, preprocess_volume, read_nifti, DatasetManifest, SyntheticSpec,
};
use stagenet::metrics::{metrics_csv, roc_points_text, summary_key_values, ConfusionMatrix};
use stagenet::model::{
    check_against_reference, count_parameters, format_table, load_checkpoint, save_checkpoint,
    ArchitectureId, Model, ScaleProfile,
};
use stagenet::train::{evaluate, train_model, OptimizerKind, TrainConfig};
use stagenet::Error;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "stagenet",
    version,
    about = "Disease-stage classification of longitudinal 3D scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal cohort plus its manifest.
    Synth(SynthArgs),
    /// Balance class counts by warping and flipping existing scans.
    Augment(AugmentArgs),
    /// Train an architecture on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint against a manifest and write a metrics bundle.
    Evaluate(EvaluateArgs),
    /// Classify one visit sequence with a trained checkpoint.
    Predict(PredictArgs),
    /// Print an architecture's per-layer shape and parameter table.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write volumes and manifest.csv into.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Patients per class (four classes).
    #[arg(long)]
    per_class: Option<usize>,
    /// Scans per patient.
    #[arg(long)]
    visits: Option<usize>,
    /// Volume grid as D1xD2xD3, at least 16 per axis.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// key=value file supplying any of the above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    /// Manifest of the cohort to balance.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Transform file: 12 numbers per line (3x3 linear row-major, then
    /// translation). Defaults to the built-in template set.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Scan count every populated class is raised to.
    #[arg(long)]
    target: Option<usize>,
    /// Defaults to the input manifest's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Path of the balanced manifest to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for generated volumes; defaults to "augmented" next to
    /// the output manifest.
    #[arg(long)]
    volumes: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// One of gru|sgru|sbigru|lstm|slstm|sbilstm.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// full or reduced.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Epoch history CSV; defaults to the checkpoint path with extension
    /// history.csv.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// adam or momentum.
    #[arg(long)]
    optimizer: Option<String>,
    /// Momentum coefficient, used only with --optimizer momentum.
    #[arg(long)]
    momentum: Option<f64>,
    /// Dropout rate override in [0, 1).
    #[arg(long)]
    dropout: Option<f64>,
    /// true (default) keeps every reduction sequential for bitwise
    /// reproducibility.
    #[arg(long)]
    deterministic: Option<bool>,
    /// Worker threads for data loading.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for the metrics bundle (metrics.txt, metrics.csv,
    /// confusion.csv, roc_class_K.txt).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Worker threads for data loading.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Visit scans in chronological order.
    #[arg(long, num_args = 1.., required = true)]
    sequence: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Architecture id to build fresh (mutually exclusive with
    /// --checkpoint).
    #[arg(long)]
    arch: Option<String>,
    /// Checkpoint whose architecture to inspect.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Compare the table against the published reference; mismatch exits 1.
    #[arg(long)]
    golden: bool,
    /// full or reduced; only with --arch.
    #[arg(long)]
    profile: Option<String>,
    /// Only with --arch.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Usage failures exit 2, internal failures exit 1.
enum Failure {
    Usage(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence(_) => Failure::Internal(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

/// Values read from a `--config` file, keyed by long flag name.
struct FileValues {
    values: BTreeMap<String, String>,
}

impl FileValues {
    fn load(path: Option<&Path>, allowed: &[&str]) -> CmdResult<Self> {
        let mut values = BTreeMap::new();
        let Some(path) = path else {
            return Ok(FileValues { values });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("config file {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Failure::Usage(format!(
                    "config line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if !allowed.contains(&key.as_str()) {
                return Err(Failure::Usage(format!(
                    "config line {}: unknown key {key:?}; allowed keys: {}",
                    lineno + 1,
                    allowed.join(", ")
                )));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Failure::Usage(format!(
                    "config line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
        }
        Ok(FileValues { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> CmdResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Failure::Usage(format!("config key {key:?}: bad value {raw:?}: {e}"))
            }),
        }
    }
}

fn require<T>(value: Option<T>, name: &str) -> CmdResult<T> {
    value.ok_or_else(|| {
        Failure::Usage(format!("missing --{name} (pass the flag or set {name}= in --config)"))
    })
}

fn parse_shape(text: &str) -> CmdResult<[usize; 3]> {
    let parts: Vec<&str> = text.split('x').collect();
    if parts.len() != 3 {
        return Err(Failure::Usage(format!(
            "shape must be D1xD2xD3, got {text:?}"
        )));
    }
    let mut dims = [0usize; 3];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = part.parse().map_err(|_| {
            Failure::Usage(format!("shape must be D1xD2xD3 of integers, got {text:?}"))
        })?;
    }
    Ok(dims)
}

fn parse_optimizer(name: &str, learning_rate: f64, momentum: f64) -> CmdResult<OptimizerKind> {
    match name {
        "adam" => Ok(OptimizerKind::adam(learning_rate)),
        "momentum" => Ok(OptimizerKind::momentum(learning_rate, momentum)),
        other => Err(Failure::Usage(format!(
            "unknown optimizer {other:?}; expected adam|momentum"
        ))),
    }
}

fn braces(counts: [usize; 4]) -> String {
    format!("{{{}, {}, {}, {}}}", counts[0], counts[1], counts[2], counts[3])
}

fn input_dims(profile: &ScaleProfile) -> [usize; 3] {
    [profile.input_shape[0], profile.input_shape[1], profile.input_shape[2]]
}

fn write_text(path: &Path, text: &str) -> CmdResult<()> {
    std::fs::write(path, text)
        .map_err(|e| Failure::Usage(format!("writing {}: {e}", path.display())))
}

fn confusion_text(cm: &ConfusionMatrix) -> String {
    let rows = cm.rows();
    let width = rows
        .iter()
        .flatten()
        .map(|c| c.to_string().len())
        .max()
        .unwrap_or(1);
    let mut out = String::from("confusion matrix (rows true, cols predicted):\n");
    for row in rows {
        out.push_str(" ");
        for count in row {
            let _ = write!(out, " {count:>width$}");
        }
        out.push('\n');
    }
    out
}

fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true_class");
    for j in 0..cm.k() {
        let _ = write!(out, ",pred_class_{}", j + 1);
    }
    out.push('\n');
    for (i, row) in cm.rows().into_iter().enumerate() {
        let _ = write!(out, "class_{}", i + 1);
        for count in row {
            let _ = write!(out, ",{count}");
        }
        out.push('\n');
    }
    out
}

fn run_synth(args: SynthArgs) -> CmdResult<()> {
    let file = FileValues::load(
        args.config.as_deref(),
        &["out", "per-class", "visits", "shape", "seed"],
    )?;
    let out = require(args.out.or(file.get("out")?), "out")?;
    let per_class = args.per_class.or(file.get("per-class")?).unwrap_or(10);
    let visits = args.visits.or(file.get("visits")?).unwrap_or(2);
    let shape = args
        .shape
        .or(file.get("shape")?)
        .unwrap_or_else(|| "32x32x16".into());
    let seed = args.seed.or(file.get("seed")?).unwrap_or(0);

    let spec = SyntheticSpec { per_class, dims: parse_shape(&shape)?, visits, seed };
    let manifest = generate_synthetic_cohort(&spec, &out)?;
    let manifest_path = out.join("manifest.csv");
    manifest.write(&manifest_path)?;

    println!("wrote {} volumes under {}", manifest.rows.len(), out.display());
    println!("class counts: {}", braces(manifest.class_counts()));
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn run_augment(args: AugmentArgs) -> CmdResult<()> {
    let file = FileValues::load(
        args.config.as_deref(),
        &["manifest", "templates", "target", "seed", "out", "volumes"],
    )?;
    let manifest_path = require(args.manifest.or(file.get("manifest")?), "manifest")?;
    let target = require(args.target.or(file.get("target")?), "target")?;
    let out = require(args.out.or(file.get("out")?), "out")?;

    let manifest = DatasetManifest::read(&manifest_path)?;
    let seed = args.seed.or(file.get("seed")?).unwrap_or(manifest.seed);
    let templates = match args.templates.or(file.get("templates")?) {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Failure::Usage(format!("templates file {}: {e}", path.display())))?;
            parse_affine_templates(&text)?
        }
        None => builtin_templates(),
    };
    let volumes_dir = args.volumes.or(file.get("volumes")?).unwrap_or_else(|| {
        out.parent().unwrap_or_else(|| Path::new("")).join("augmented")
    });

    let before = manifest.class_counts();
    let balanced = balance_dataset(&manifest, &templates, target, seed, &volumes_dir)?;
    balanced.write(&out)?;

    println!("before: {}", braces(before));
    println!("after:  {}", braces(balanced.class_counts()));
    println!("manifest: {}", out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> CmdResult<()> {
    let file = FileValues::load(
        args.config.as_deref(),
        &[
            "manifest", "arch", "epochs", "profile", "seed", "out", "history", "batch-size",
            "learning-rate", "optimizer", "momentum", "dropout", "deterministic", "jobs",
        ],
    )?;
    let manifest_path = require(args.manifest.or(file.get("manifest")?), "manifest")?;
    let arch = ArchitectureId::parse(&require(args.arch.or(file.get("arch")?), "arch")?)?;
    let out = require(args.out.or(file.get("out")?), "out")?;
    let epochs = args.epochs.or(file.get("epochs")?).unwrap_or(35);
    let profile_name = args
        .profile
        .or(file.get("profile")?)
        .unwrap_or_else(|| "full".into());
    let profile = ScaleProfile::parse(&profile_name)?;
    let seed = args.seed.or(file.get("seed")?).unwrap_or(0);
    let history_path = args
        .history
        .or(file.get("history")?)
        .unwrap_or_else(|| out.with_extension("history.csv"));
    let batch_size = args.batch_size.or(file.get("batch-size")?).unwrap_or(4);
    let learning_rate = args
        .learning_rate
        .or(file.get("learning-rate")?)
        .unwrap_or(1e-3);
    let optimizer_name = args
        .optimizer
        .or(file.get("optimizer")?)
        .unwrap_or_else(|| "adam".into());
    let momentum = args.momentum.or(file.get("momentum")?).unwrap_or(0.9);
    let dropout_override = match args.dropout {
        Some(rate) => Some(rate),
        None => file.get("dropout")?,
    };
    let deterministic = args
        .deterministic
        .or(file.get("deterministic")?)
        .unwrap_or(true);
    let jobs = args.jobs.or(file.get("jobs")?).unwrap_or(1);

    let cfg = TrainConfig {
        epochs,
        batch_size,
        optimizer: parse_optimizer(&optimizer_name, learning_rate, momentum)?,
        dropout_override,
        seed,
        deterministic,
        profile: profile.clone(),
    };
    cfg.validate()?;

    let manifest = DatasetManifest::read(&manifest_path)?;
    let (data, skipped) = load_sequences_jobs(&manifest, input_dims(&profile), jobs.max(1))?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} single-visit lineages");
    }

    let mut model = Model::build(arch, &profile, seed)?;
    let history = train_model(&mut model, &data, &cfg)?;
    write_text(&history_path, &history.csv())?;
    let meta = vec![
        ("architecture".to_string(), arch.as_str().to_string()),
        ("profile".to_string(), profile.name.clone()),
        ("seed".to_string(), seed.to_string()),
        ("epochs".to_string(), epochs.to_string()),
    ];
    save_checkpoint(&model, &meta, &out)?;

    println!("trained {arch} ({}) on {} sequences for {epochs} epochs", profile.name, data.len());
    if let Some(last) = history.epochs.last() {
        println!("final epoch: loss={:.6} accuracy={:.6}", last.loss, last.accuracy);
    }
    println!("checkpoint: {}", out.display());
    println!("history: {}", history_path.display());
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> CmdResult<()> {
    let file = FileValues::load(
        args.config.as_deref(),
        &["checkpoint", "manifest", "report", "jobs"],
    )?;
    let checkpoint = require(args.checkpoint.or(file.get("checkpoint")?), "checkpoint")?;
    let manifest_path = require(args.manifest.or(file.get("manifest")?), "manifest")?;
    let report_dir = require(args.report.or(file.get("report")?), "report")?;
    let jobs = args.jobs.or(file.get("jobs")?).unwrap_or(1);

    let (model, _) = load_checkpoint(&checkpoint)?;
    let manifest = DatasetManifest::read(&manifest_path)?;
    let (data, skipped) =
        load_sequences_jobs(&manifest, input_dims(&model.profile), jobs.max(1))?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} single-visit lineages");
    }
    let report = evaluate(&model, &data)?;

    std::fs::create_dir_all(&report_dir)
        .map_err(|e| Failure::Usage(format!("report dir {}: {e}", report_dir.display())))?;
    let summary = summary_key_values(&report.summary, Some(report.macro_auc));
    let per_class = report.per_class_auc();
    let mut metrics_txt = summary.clone();
    for (i, auc) in per_class.iter().enumerate() {
        let _ = writeln!(metrics_txt, "ovr_auc_class_{}={auc:.6}", i + 1);
    }
    write_text(&report_dir.join("metrics.txt"), &metrics_txt)?;
    write_text(
        &report_dir.join("metrics.csv"),
        &metrics_csv(&report.summary, &per_class),
    )?;
    write_text(&report_dir.join("confusion.csv"), &confusion_csv(&report.confusion))?;
    for (i, curve) in report.roc.iter().enumerate() {
        write_text(
            &report_dir.join(format!("roc_class_{}.txt", i + 1)),
            &roc_points_text(curve),
        )?;
    }

    print!("{summary}");
    print!("{}", confusion_text(&report.confusion));
    println!("report: {}", report_dir.display());
    Ok(())
}

fn run_predict(args: PredictArgs) -> CmdResult<()> {
    let file = FileValues::load(args.config.as_deref(), &["checkpoint"])?;
    let checkpoint = require(args.checkpoint.or(file.get("checkpoint")?), "checkpoint")?;

    let (model, _) = load_checkpoint(&checkpoint)?;
    let dims = input_dims(&model.profile);
    let mut volumes = Vec::with_capacity(args.sequence.len());
    for path in &args.sequence {
        let volume = read_nifti(path)?;
        volumes.push(preprocess_volume(&volume, dims, None)?);
    }
    let probabilities = model.predict(&volumes)?;
    let probs = probabilities.data();

    let mut line = String::new();
    let mut best = 0usize;
    for (i, p) in probs.iter().enumerate() {
        if !line.is_empty() {
            line.push(' ');
        }
        let _ = write!(line, "class_{}={p:.6}", i + 1);
        if *p > probs[best] {
            best = i;
        }
    }
    println!("{line}");
    println!("label={}", best + 1);
    Ok(())
}

fn run_inspect(args: InspectArgs) -> CmdResult<()> {
    let file = FileValues::load(
        args.config.as_deref(),
        &["arch", "checkpoint", "golden", "profile", "seed"],
    )?;
    let arch_name: Option<String> = args.arch.or(file.get("arch")?);
    let checkpoint: Option<PathBuf> = args.checkpoint.or(file.get("checkpoint")?);
    let golden = args.golden || file.get("golden")?.unwrap_or(false);

    let model = match (arch_name, checkpoint) {
        (Some(_), Some(_)) => {
            return Err(Failure::Usage(
                "--arch and --checkpoint are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(Failure::Usage("one of --arch or --checkpoint is required".into()))
        }
        (Some(name), None) => {
            let arch = ArchitectureId::parse(&name)?;
            let profile_name = args
                .profile
                .or(file.get("profile")?)
                .unwrap_or_else(|| "full".into());
            let seed = args.seed.or(file.get("seed")?).unwrap_or(0);
            Model::build(arch, &ScaleProfile::parse(&profile_name)?, seed)?
        }
        (None, Some(path)) => load_checkpoint(&path)?.0,
    };

    let (rows, total) = count_parameters(&model);
    print!("{}", format_table(&rows, total));
    if golden {
        check_against_reference(model.architecture, &rows)?;
        println!("golden: ok ({})", model.architecture);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Augment(args) => run_augment(args),
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Predict(args) => run_predict(args),
        Command::Inspect(args) => run_inspect(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
