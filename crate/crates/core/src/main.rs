use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use deformcaps::capsule::{CountConfig, CountMode};
use deformcaps::data::{Augmentation, Dataset, DatasetKind, DatasetSpec};
use deformcaps::pipeline::{self, Checkpoint, RunConfig};
use deformcaps::{Error, Result};

/// Held-out synthetic data is drawn from the training seed plus this offset.
const HELD_OUT_SEED_OFFSET: u64 = 1_000_000;

#[derive(Parser)]
#[command(name = "deformcaps", version, about = "Deformable capsule object detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file; any `--section.key value` pair overrides it.
    /// Output goes to `train.output_dir`, by default `runs/<ablation>-seed<seed>`.
    Train(TrainArgs),
    /// Average precision of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Detections for one image, one JSON record per line.
    Detect(DetectArgs),
    /// Capsule-layer parameter and memory arithmetic.
    ParamCount(CountArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `section.key = value` file; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// deform, non-deform or no-routing.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// COCO-style annotation file, or `synthetic` for a held-out synthetic split.
    #[arg(long)]
    dataset: String,
    /// Number of held-out synthetic images.
    #[arg(long, default_value_t = 200)]
    size: usize,
    /// Synthetic seed; defaults to the dataset seed plus 1000000.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = deformcaps::geometry::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Include the reconstructed mask of each detection.
    #[arg(long)]
    masks: bool,
}

#[derive(Args)]
struct CountArgs {
    /// Print the five reference layer configurations.
    #[arg(long, conflicts_with = "mode")]
    paper_table: bool,
    /// fully-connected, conv-caps, deform-caps, splitcaps-detect or splitcaps-imagenet.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long = "c-i")]
    c_i: Option<u64>,
    #[arg(long = "a-i")]
    a_i: Option<u64>,
    #[arg(long = "c-j")]
    c_j: Option<u64>,
    #[arg(long = "a-j")]
    a_j: Option<u64>,
    #[arg(long)]
    k: Option<u64>,
    /// Number of classes; used as the parent type count when `--c-j` is absent.
    #[arg(long)]
    classes: Option<u64>,
    #[arg(long)]
    height: Option<u64>,
    #[arg(long)]
    width: Option<u64>,
    #[arg(long)]
    batch: Option<u64>,
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::desk(),
    };
    cfg.apply_flags(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(a) = &args.ablation {
        cfg.ablation = a.parse()?;
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from(format!("runs/{}-seed{}", cfg.ablation, cfg.seed)));
    }
    let out = pipeline::train(&cfg)?;
    let last = out.records.last();
    println!(
        "{}",
        json!({
            "status": "ok",
            "steps": out.checkpoint.step,
            "epochs": out.checkpoint.epoch,
            "final": last,
            "output_dir": cfg.output_dir,
        })
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let det = ckpt.detector()?;
    let cfg = &ckpt.config;
    let mut spec = DatasetSpec {
        augmentation: Augmentation::none(),
        ..cfg.dataset.clone()
    };
    if args.dataset == "synthetic" {
        spec.kind = DatasetKind::Synthetic;
        spec.seed = args.seed.unwrap_or(cfg.dataset.seed + HELD_OUT_SEED_OFFSET);
        spec.size = args.size;
    } else {
        spec.kind = DatasetKind::CocoJson(PathBuf::from(&args.dataset));
        spec.size = 0;
    }
    let dataset = Dataset::open(&spec)?;
    let report = pipeline::evaluate(&det, &dataset, args.threshold.unwrap_or(cfg.eval_threshold), cfg.eval_top_n)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn detect(args: DetectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    for rec in pipeline::detect(&ckpt, &args.image, args.threshold, args.masks)? {
        println!("{}", serde_json::to_string(&rec).expect("record serializes"));
    }
    Ok(())
}

fn param_count(args: CountArgs) -> Result<()> {
    if args.paper_table {
        print!("{}", pipeline::reference_table()?);
        return Ok(());
    }
    let mode: CountMode = args
        .mode
        .as_deref()
        .ok_or_else(|| Error::Config("param-count needs --paper-table or --mode".into()))?
        .parse()?;
    let cfg = CountConfig {
        child_types: args.c_i,
        child_atoms: args.a_i,
        parent_types: args.c_j.or(args.classes),
        parent_atoms: args.a_j,
        kernel: args.k,
        height: args.height,
        width: args.width,
        batch: args.batch,
    };
    print!("{}", pipeline::count_table(mode, &cfg)?);
    Ok(())
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "));
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Detect(a) => detect(a),
        Command::ParamCount(a) => param_count(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
