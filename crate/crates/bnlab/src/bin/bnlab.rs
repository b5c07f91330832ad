//! Command-line front end: train/eval/percentiles/fold/gradcheck plus a
//! synthetic-corpus generator for machines without the real digit data.
//!
//! Exit codes: 0 success, 2 configuration or state error, 3 data or format
//! error, 4 verification failure, 1 anything else.

use bnlab::config::{parse_bool, parse_probe, TrainConfig};
use bnlab::data::{write_synthetic_dataset, SynthConfig};
use bnlab::error::Error;
use bnlab::experiment::{run_eval, run_fold, run_percentiles, run_train};
use bnlab::gradcheck;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "bnlab", version, about = "Batch-normalized network trainer and verifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)] // exactly one command is ever constructed
enum Command {
    /// Train a network, recording metrics and checkpoints
    Train(TrainArgs),
    /// Probe pre-nonlinearity percentiles across a stream of checkpoints
    Percentiles(PercentilesArgs),
    /// Verify every analytic gradient against central finite differences
    Gradcheck(GradcheckArgs),
    /// Fold BN layers into neighboring affine transforms and verify
    Fold(FoldArgs),
    /// Report test accuracy of a checkpoint
    Eval(EvalArgs),
    /// Generate a synthetic digit corpus in IDX format
    SynthData(SynthDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file; every flag below overrides it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// on|off
    #[arg(long)]
    bn: Option<String>,
    /// sigmoid|relu
    #[arg(long)]
    nonlinearity: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    /// Probed unit as LAYER:UNIT (hidden block index, unit index)
    #[arg(long)]
    probe: Option<String>,
    /// Comma-separated hidden layer sizes, e.g. 100,100,100
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    lr_decay_period: Option<usize>,
    #[arg(long)]
    freeze_batches: Option<usize>,
    #[arg(long)]
    init_std: Option<f64>,
    /// on|off: threshold pixels to {0,1}
    #[arg(long)]
    binarize: Option<String>,
    /// Output directory for metrics.csv, config.txt, and checkpoints
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Directory holding the IDX corpus (falls back to $BNLAB_DATA_DIR)
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PercentilesArgs {
    /// Checkpoints to probe, in order; the CSV step column is the ordinal
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    /// Probed unit as LAYER:UNIT
    #[arg(long, default_value = "2:0")]
    probe: String,
    /// Output CSV path
    #[arg(long, default_value = "percentiles.csv")]
    out: PathBuf,
    /// on|off: threshold pixels to {0,1} (match how training saw the data)
    #[arg(long, default_value = "on")]
    binarize: String,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Random instances per operation
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

#[derive(Args)]
struct FoldArgs {
    /// Inference-mode checkpoint to fold
    checkpoint: PathBuf,
    /// Where to write the folded checkpoint
    #[arg(long)]
    out: PathBuf,
    /// on|off
    #[arg(long, default_value = "on")]
    binarize: String,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// on|off
    #[arg(long, default_value = "on")]
    binarize: String,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthDataArgs {
    /// Directory to write the IDX files into
    #[arg(long)]
    out: PathBuf,
    /// Small corpora get memorized mid-run, which flattens the baseline's
    /// activation drift and muddies the comparison; keep this large.
    #[arg(long, default_value_t = 60_000)]
    n_train: usize,
    #[arg(long, default_value_t = 2_000)]
    n_test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per-pixel flip probability
    #[arg(long, default_value_t = 0.12)]
    noise: f64,
    /// Maximum glyph shift in pixels
    #[arg(long, default_value_t = 7)]
    max_shift: i32,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::State(_) => 2,
        Error::Format(_) | Error::Io(_) => 3,
        Error::Verification(_) => 4,
        _ => 1,
    }
}

fn resolve_data_dir(flag: Option<PathBuf>) -> Result<PathBuf, Error> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    if let Ok(dir) = std::env::var("BNLAB_DATA_DIR") {
        if !dir.is_empty() {
            return Ok(PathBuf::from(dir));
        }
    }
    Err(Error::Config(
        "no data directory: pass --data-dir or set BNLAB_DATA_DIR".into(),
    ))
}

fn effective_config(args: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        cfg.merge_file(path)?;
    }
    // flags share the config-file keys, so overriding reuses the same parser
    let overrides = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("steps", args.steps.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("momentum", args.momentum.map(|v| v.to_string())),
        ("bn", args.bn.clone()),
        ("nonlinearity", args.nonlinearity.clone()),
        ("eps", args.eps.map(|v| v.to_string())),
        ("probe", args.probe.clone()),
        ("hidden", args.hidden.clone()),
        ("eval_every", args.eval_every.map(|v| v.to_string())),
        (
            "lr_decay_factor",
            args.lr_decay_factor.map(|v| v.to_string()),
        ),
        (
            "lr_decay_period",
            args.lr_decay_period.map(|v| v.to_string()),
        ),
        (
            "freeze_batches",
            args.freeze_batches.map(|v| v.to_string()),
        ),
        ("init_std", args.init_std.map(|v| v.to_string())),
        ("binarize", args.binarize.clone()),
    ];
    for (key, value) in overrides {
        if let Some(value) = value {
            cfg.apply(key, &value)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => {
            let cfg = effective_config(&args)?;
            let data_dir = resolve_data_dir(args.data_dir.clone())?;
            let outcome = run_train(&cfg, &data_dir, &args.out)?;
            println!(
                "wrote {} ({} records)",
                outcome.metrics_path.display(),
                outcome.records.len()
            );
            println!("wrote {}", outcome.config_path.display());
            println!("wrote {}", outcome.checkpoint_train.display());
            if let Some(path) = &outcome.checkpoint_inference {
                println!("wrote {}", path.display());
            }
            if let Some(last) = outcome.records.last() {
                println!(
                    "final: step {} test_accuracy {:.4} train_loss {:.4}",
                    last.step, last.test_accuracy, last.train_loss
                );
            }
            Ok(())
        }
        Command::Percentiles(args) => {
            let (layer, unit) = parse_probe(&args.probe)?;
            let data_dir = resolve_data_dir(args.data_dir.clone())?;
            let binarize = parse_bool("binarize", &args.binarize)?;
            run_percentiles(
                &args.checkpoints,
                &data_dir,
                layer,
                unit,
                binarize,
                &args.out,
            )?;
            println!(
                "wrote {} ({} checkpoints probed at {}:{})",
                args.out.display(),
                args.checkpoints.len(),
                layer,
                unit
            );
            Ok(())
        }
        Command::Gradcheck(args) => {
            let report = gradcheck::run_all(args.seed, args.instances)?;
            println!("{report}");
            if report.all_passed() {
                Ok(())
            } else {
                Err(Error::Verification(
                    "gradient check failed; see report above".into(),
                ))
            }
        }
        Command::Fold(args) => {
            let data_dir = resolve_data_dir(args.data_dir.clone())?;
            let binarize = parse_bool("binarize", &args.binarize)?;
            let report = run_fold(&args.checkpoint, &args.out, &data_dir, binarize)?;
            println!(
                "wrote {} (max deviation {:.3e} over {} examples)",
                args.out.display(),
                report.max_deviation,
                report.examples_checked
            );
            Ok(())
        }
        Command::Eval(args) => {
            let data_dir = resolve_data_dir(args.data_dir.clone())?;
            let binarize = parse_bool("binarize", &args.binarize)?;
            let accuracy = run_eval(&args.checkpoint, &data_dir, binarize)?;
            println!("test_accuracy {accuracy:.6}");
            Ok(())
        }
        Command::SynthData(args) => {
            if args.max_shift < 0 {
                return Err(Error::Config("max_shift must be >= 0".into()));
            }
            let cfg = SynthConfig {
                noise: args.noise,
                max_shift: args.max_shift,
            };
            write_synthetic_dataset(&args.out, args.n_train, args.n_test, args.seed, cfg)?;
            println!(
                "wrote {} train / {} test examples to {}",
                args.n_train,
                args.n_test,
                args.out.display()
            );
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
