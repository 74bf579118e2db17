//! Command-line driver: training, evaluation, ablation, gradient checks,
//! scan benchmarking, feature export and synthetic data.
//!
//! Exit codes: 0 success, 2 usage or I/O, 3 numeric abort or failed check,
//! 4 checkpoint or file incompatibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdnet::bench::{bench_csv, bench_scan, BenchConfig};
use mdnet::checkpoint::Checkpoint;
use mdnet::data::Dataset;
use mdnet::fusion::FusionMode;
use mdnet::gradsuite::{run_gradsuite, worst_case, GradScope};
use mdnet::prior::{export_features, FrozenEncoder};
use mdnet::synth::{write_dataset, SynthConfig};
use mdnet::train::{ablation_table, open_dataset, run_ablation, run_training, RunOutput, TrainConfig, Trainer};
use mdnet::{Error, Tensor};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(name = "mdnet", version, about = "Dual-stream aesthetic score regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with best-checkpoint selection on test PC.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train the four fusion configurations and print the comparison table.
    Ablate(TrainArgs),
    /// Run finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Time the selective scan against quadratic attention.
    BenchScan(BenchArgs),
    /// Write surrogate-encoder feature pyramids as FPYR files.
    ExportFeaturesStub(ExportArgs),
    /// Write a seeded synthetic dataset.
    SynthData(SynthArgs),
}

/// Config layers: built-in defaults, then `--config`, then flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// cross_attention, concat, prior_only or mamba_only.
    #[arg(long)]
    fusion_mode: Option<FusionMode>,
    /// Directory of precomputed FPYR feature files.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Single-threaded execution with fixed permutations.
    #[arg(long)]
    deterministic: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.image_size {
            cfg.image_size = v;
        }
        if let Some(v) = self.fusion_mode {
            cfg.fusion_mode = v;
        }
        if let Some(v) = &self.features_dir {
            cfg.features_dir = Some(v.clone());
        }
        cfg.deterministic |= self.deterministic;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Image paths in manifests are relative to this directory.
    #[arg(long, default_value = ".")]
    data_root: PathBuf,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// Output directory for checkpoints and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
    /// Print the final summary as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test_manifest: PathBuf,
    #[arg(long, default_value = ".")]
    data_root: PathBuf,
    /// Runtime configuration the checkpoint must be compatible with.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// ops, block or full.
    #[arg(long, default_value = "ops")]
    scope: GradScope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Ascending comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_values_t = BenchConfig::default().lengths)]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = BenchConfig::default().repetitions)]
    repetitions: usize,
    #[arg(long, default_value_t = BenchConfig::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = BenchConfig::default().d_inner)]
    d_inner: usize,
    #[arg(long, default_value_t = BenchConfig::default().d_state)]
    d_state: usize,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = ".")]
    data_root: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = SynthConfig::default().size)]
    size: usize,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Numeric(_) | Error::DegenerateVariance(_) => EXIT_NUMERIC,
            Error::Mismatch(_) | Error::Format(_) => EXIT_MISMATCH,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn set_single_thread(deterministic: bool) -> Result<(), Failure> {
    if deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| usage(format!("cannot configure the thread pool: {e}")))?;
    }
    Ok(())
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    value.as_deref().ok_or_else(|| usage(format!("missing required flag {flag}")))
}

fn open_pair(args: &TrainArgs, cfg: &TrainConfig) -> Result<(Dataset, Dataset), Failure> {
    let train = required(&args.train_manifest, "--train-manifest")?;
    let test = required(&args.test_manifest, "--test-manifest")?;
    Ok((
        open_dataset(cfg, &args.data_root, train)?,
        open_dataset(cfg, &args.data_root, test)?,
    ))
}

fn print_config(cfg: &TrainConfig) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| usage(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = args.config.resolve()?;
    if args.print_config {
        return print_config(&cfg);
    }
    set_single_thread(cfg.deterministic)?;
    let (train, test) = open_pair(&args, &cfg)?;
    let output = RunOutput {
        dir: args.out.clone(),
        echo: true,
    };
    let run = run_training::<f32>(&cfg, &train, &test, &output)?;
    let outcome = &run.outcome;
    let best = outcome.best_result();
    let last = outcome.reports.last();
    if args.json {
        let summary = serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "pc_best": outcome.pc_best,
            "best": best,
            "last": last,
            "checkpoint_epochs": outcome.checkpoint_epochs,
        });
        println!("{summary}");
    } else {
        if let Some(b) = best {
            println!("best epoch={} PC={} MAE={} RMSE={}", b.epoch, b.pc, b.mae, b.rmse);
        }
        if let Some(l) = last {
            println!("last epoch={} PC={} MAE={} RMSE={}", l.epoch, l.pc, l.mae, l.rmse);
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    set_single_thread(args.deterministic)?;
    if !args.checkpoint.exists() {
        return Err(usage(format!("checkpoint {} not found", args.checkpoint.display())));
    }
    let runtime = match &args.config {
        Some(_) => Some(
            ConfigArgs {
                config: args.config.clone(),
                ..ConfigArgs::default()
            }
            .resolve()?,
        ),
        None => None,
    };
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let trainer = Trainer::<f32>::from_checkpoint(&ckpt, runtime.as_ref())?;
    let mut cfg = trainer.cfg.clone();
    if args.features_dir.is_some() {
        cfg.features_dir = args.features_dir.clone();
    }
    let data = open_dataset(&cfg, &args.data_root, &args.test_manifest)?;
    let r = trainer.evaluate(&data)?;
    if args.json {
        println!("{}", serde_json::json!({"pc": r.pc, "mae": r.mae, "rmse": r.rmse, "n": r.n}));
    } else {
        println!("PC={} MAE={} RMSE={} n={}", r.pc, r.mae, r.rmse, r.n);
    }
    Ok(())
}

fn ablate(args: TrainArgs) -> Result<(), Failure> {
    let cfg = args.config.resolve()?;
    if args.print_config {
        return print_config(&cfg);
    }
    set_single_thread(cfg.deterministic)?;
    let (train, test) = open_pair(&args, &cfg)?;
    let rows = run_ablation::<f32>(&cfg, &train, &test, |r| {
        eprintln!("{} {:<55} PC={:.4} MAE={:.4}", r.label, r.configuration, r.pc, r.mae);
    })?;
    let table = ablation_table(&rows);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let path = dir.join("ablation.csv");
        fs::write(&path, &table).map_err(|e| io_error(&path, e))?;
    }
    if args.json {
        println!("{}", serde_json::json!(rows));
    } else {
        print!("{table}");
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let cases = run_gradsuite(args.scope, args.seed)?;
    for c in &cases {
        println!("{}", c.summary());
    }
    let failed = cases.iter().filter(|c| !c.passed()).count();
    if let Some(w) = worst_case(&cases) {
        println!(
            "worst: op={} element=({}, {}) rel_err={:.3e}",
            w.name, w.report.worst.0, w.report.worst.1, w.report.max_rel_err
        );
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("{failed} of {} gradient checks failed", cases.len()),
        });
    }
    println!("{} gradient checks passed", cases.len());
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), Failure> {
    let cfg = BenchConfig {
        lengths: args.lengths,
        repetitions: args.repetitions,
        batch: args.batch,
        d_inner: args.d_inner,
        d_state: args.d_state,
        ..BenchConfig::default()
    };
    let rows = bench_scan(&cfg)?;
    let csv = bench_csv(&rows);
    if let Some(path) = &args.out {
        fs::write(path, &csv).map_err(|e| io_error(path, e))?;
    }
    print!("{csv}");
    Ok(())
}

fn export(args: ExportArgs) -> Result<(), Failure> {
    let cfg = args.config.resolve()?;
    set_single_thread(cfg.deterministic)?;
    let data = Dataset::open(&args.data_root, &args.manifest, cfg.preprocess_config())?;
    let encoder = FrozenEncoder::<f32>::new(&cfg.prior)?;
    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    let s = cfg.image_size;
    for record in data.records() {
        let pixels = mdnet::data::load_and_preprocess(&args.data_root, record, data.config())?;
        let image = Tensor::<f32>::new(pixels, &[1, 3, s, s])?;
        let pyramid = encoder.extract_features(&image)?.remove(0);
        let stem = record
            .image_path
            .file_stem()
            .ok_or_else(|| usage(format!("manifest entry {} has no file name", record.image_path.display())))?;
        export_features(&pyramid, &args.out.join(Path::new(stem).with_extension("fpyr")))?;
    }
    eprintln!("wrote {} feature files to {}", data.len(), args.out.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        n: args.n,
        size: args.size,
        seed: args.seed,
    };
    let records = write_dataset(&args.out, &cfg)?;
    eprintln!("wrote {} images to {}", records.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::BenchScan(a) => bench(a),
        Command::ExportFeaturesStub(a) => export(a),
        Command::SynthData(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
