//! Command-line surface: `synth`, `train`, `eval` and `predict`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::datamodel::{generate_synthetic_corpus, load_corpus, SynthRecipe};
use crate::inference::{predict, write_prediction, InferenceConfig};
use crate::metrics::{evaluate_split, format_table};
use crate::overlay::render_overlay;
use crate::raster::RgbImage;
use crate::training::{model_from_checkpoint, train, TrainConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "docseg", version, about = "Unified document image segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config file: a recipe for `synth`, a training config for `train`, an
    /// inference config for `eval` and `predict`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Single-threaded kernels for bit-reproducible runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus from a recipe.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a corpus, resuming from the latest checkpoint in the run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Start over even if checkpoints exist.
        #[arg(long)]
        fresh: bool,
    },
    /// Evaluate a checkpoint on one split of every dataset in a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "heldout")]
        split: String,
    },
    /// Predict one image for the given class names.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Also write a rendered overlay.
        #[arg(long)]
        overlay: bool,
        #[arg(required = true)]
        class_names: Vec<String>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Predict { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
        }
    }
}

/// Exit code for an error: 2 for bad inputs, 3 for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Recipe(_)
        | Error::Schema { .. }
        | Error::MissingManifest(_)
        | Error::Image(_)
        | Error::Checkpoint(_)
        | Error::DuplicateClass(_)
        | Error::NoClasses
        | Error::NotPadded { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn inference_config(common: &Common) -> Result<InferenceConfig> {
    let cfg = match &common.config {
        None => InferenceConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Records the invocation and its artifacts in `<out>/run.toml`.
fn write_manifest(out: &Path, command: &str, args: &[OsString], seed: Option<u64>, artifacts: &[PathBuf]) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "command = {:?}", command);
    let args: Vec<String> = args.iter().map(|a| format!("{:?}", a.to_string_lossy())).collect();
    let _ = writeln!(s, "args = [{}]", args.join(", "));
    if let Some(seed) = seed {
        let _ = writeln!(s, "seed = {seed}");
    }
    let files: Vec<String> = artifacts
        .iter()
        .map(|p| format!("{:?}", p.strip_prefix(out).unwrap_or(p).display().to_string()))
        .collect();
    let _ = writeln!(s, "artifacts = [{}]", files.join(", "));
    write(&out.join("run.toml"), s)
}

fn cmd_synth(common: &Common) -> Result<(Option<u64>, Vec<PathBuf>)> {
    let recipe_path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("synth needs --config <recipe>".into()))?;
    let recipe = SynthRecipe::from_file(recipe_path)?;
    let out = out_dir(common)?;
    let seed = common.seed.unwrap_or(0);
    let summary = generate_synthetic_corpus(seed, &recipe, &out)?;
    print!("{summary}");
    let corpus = load_corpus(&out)?;
    for (_, index) in &corpus {
        if let Some(e) = index.check_all().into_iter().next() {
            return Err(e);
        }
    }
    Ok((Some(seed), corpus.iter().map(|(d, _)| out.join(&d.name)).collect()))
}

fn cmd_train(common: &Common, corpus_dir: &Path, iterations: Option<usize>, fresh: bool) -> Result<(Option<u64>, Vec<PathBuf>)> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    let out = out_dir(common)?;
    let corpus = load_corpus(corpus_dir)?;
    let outcome = train(&cfg, &corpus, &out, !fresh, &mut |r| {
        if r.iteration % 50 == 0 {
            println!("{}", r.log_line());
        }
    })?;
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok((Some(cfg.seed), vec![outcome.checkpoint, outcome.log]))
}

fn cmd_eval(common: &Common, checkpoint: &Path, corpus_dir: &Path, split: &str) -> Result<(Option<u64>, Vec<PathBuf>)> {
    let cfg = inference_config(common)?;
    let (train_cfg, model) = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let corpus = load_corpus(corpus_dir)?;
    let out = out_dir(common)?;
    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for (_, index) in &corpus {
        let report = evaluate_split(&model, index, split, &cfg)?;
        let path = out.join(format!("{}.report.toml", report.dataset));
        write(&path, report.to_toml())?;
        artifacts.push(path);
        reports.push(report);
    }
    let table = format_table(&reports);
    print!("{table}");
    let path = out.join("metrics.txt");
    write(&path, &table)?;
    artifacts.push(path);
    Ok((Some(common.seed.unwrap_or(train_cfg.seed)), artifacts))
}

fn cmd_predict(common: &Common, checkpoint: &Path, image: &Path, overlay: bool, names: &[String]) -> Result<(Option<u64>, Vec<PathBuf>)> {
    let cfg = inference_config(common)?;
    let bytes = std::fs::read(image).map_err(|e| Error::Config(format!("{}: {e}", image.display())))?;
    let img = RgbImage::decode(&bytes)?;
    let (train_cfg, model) = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let pred = predict(&model, &img, names, &cfg)?;
    let out = out_dir(common)?;
    let path = out.join("prediction.txt");
    write(&path, write_prediction(&pred, names))?;
    let mut artifacts = vec![path];
    for d in &pred.instances {
        println!("{} {:.3}", names[d.class_index], d.score);
    }
    if overlay {
        let path = out.join("overlay.png");
        write(&path, render_overlay(&img, &pred, names).encode_png()?)?;
        artifacts.push(path);
    }
    Ok((Some(common.seed.unwrap_or(train_cfg.seed)), artifacts))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let common = cli.command.common().clone();
    if common.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let result = match &cli.command {
        Command::Synth { common } => cmd_synth(common),
        Command::Train {
            common,
            corpus,
            iterations,
            fresh,
        } => cmd_train(common, corpus, *iterations, *fresh),
        Command::Eval {
            common,
            checkpoint,
            corpus,
            split,
        } => cmd_eval(common, checkpoint, corpus, split),
        Command::Predict {
            common,
            checkpoint,
            image,
            overlay,
            class_names,
        } => cmd_predict(common, checkpoint, image, *overlay, class_names),
    };
    let result = result.and_then(|(seed, artifacts)| {
        let out = common.out.as_deref().expect("commands require --out");
        write_manifest(out, cli.command.name(), &args[1..], seed, &artifacts)
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
