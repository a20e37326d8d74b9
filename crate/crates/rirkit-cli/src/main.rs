//! Command-line harness for the dual-stream residual network library:
//! train, eval, ablate, sweep, and verify.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rirkit::data::CifarVariant;
use rirkit::harness::{
    ablation_csv, ablation_table, evaluate, load_model, prepare_data, sweep, train, RunConfig,
};
use rirkit::init::InitKind;
use rirkit::model::ModelKind;
use rirkit::optim::{OptConfig, OptKind};
use rirkit::verify::{run_all, VerifyOptions};

#[derive(Parser)]
#[command(name = "rirkit", version, about = "Dual-stream residual networks: training and verification harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and emit per-epoch metrics plus checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Zero each stream at each fused layer of a trained model, one at a
    /// time, and report accuracy per ablation.
    Ablate(AblateArgs),
    /// Train a grid of desk-scale models over blocks x layers-per-block.
    Sweep(SweepArgs),
    /// Run the algebraic verification suite (equivalences, gradients,
    /// decay centering).
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Architecture name: baseline32, wide18, tiny, or desk-b{B}-l{L}.
    #[arg(long, default_value = "tiny")]
    arch: String,
    /// Model kind: cnn, resnet, resnet-init, rir.
    #[arg(long, default_value = "rir")]
    kind: String,
    /// Dataset: cifar10, cifar100, or synthetic.
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    /// Directory with the CIFAR binary files.
    #[arg(long, env = "RIRKIT_DATA")]
    data_path: Option<PathBuf>,
    /// Stratified train subset size (default: full split; synthetic: 5000).
    #[arg(long)]
    subset: Option<usize>,
    /// Stratified test subset size (default: full split; synthetic: 2000).
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    /// Optimizer: sgdm, nesterov, adam, rmsprop.
    #[arg(long, default_value = "sgdm")]
    opt: String,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Initializer: xavier, msr, orthogonal.
    #[arg(long, default_value = "msr")]
    init: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seed for subset selection / synthetic data (separate from --seed so
    /// several run seeds can share one subset).
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value = "runs/run")]
    out: PathBuf,
    /// Run the whole model in f64 (verification mode; slower).
    #[arg(long = "f64")]
    use_f64: bool,
    /// Disable random crop / horizontal flip augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Skip per-channel standardization.
    #[arg(long)]
    no_normalize: bool,
    /// Write wall_ms as 0 so metrics files are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
    /// Disable identity-centered weight decay (negative-control runs).
    #[arg(long)]
    no_identity_centering: bool,
}

impl TrainArgs {
    fn to_config(&self, command: &str) -> Result<RunConfig> {
        let mut opt = OptConfig::new(self.opt.parse::<OptKind>()?);
        opt.base_lr = self.lr;
        opt.l2 = self.l2;
        opt.momentum = self.momentum;
        opt.identity_centering = !self.no_identity_centering;
        Ok(RunConfig {
            command: command.to_string(),
            arch: self.arch.clone(),
            kind: self.kind.parse::<ModelKind>()?,
            dataset: self.dataset.parse::<CifarVariant>()?,
            data_path: self.data_path.clone(),
            subset: self.subset,
            test_subset: self.test_subset,
            epochs: self.epochs,
            batch_size: self.batch_size,
            opt,
            init: self.init.parse::<InitKind>()?,
            seed: self.seed,
            data_seed: self.data_seed,
            out_dir: self.out.clone(),
            f64_mode: self.use_f64,
            augment: !self.no_augment,
            normalize: !self.no_normalize,
            wall_clock: !self.no_timing,
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override the data directory recorded in the checkpoint.
    #[arg(long, env = "RIRKIT_DATA")]
    data_path: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "RIRKIT_DATA")]
    data_path: Option<PathBuf>,
    /// Output CSV path (default: ablation.csv next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Blocks per stage, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    blocks: Vec<usize>,
    /// Layers per block, comma separated.
    #[arg(long = "layers-per-block", value_delimiter = ',', default_value = "2,4")]
    layers: Vec<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Random configurations for the equivalence checks.
    #[arg(long, default_value_t = 200)]
    configs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Perturb a fused kernel first; the suite must then fail.
    #[arg(long)]
    inject_fault: bool,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Train(args) => {
            let cfg = args.to_config("train")?;
            let outcome = train(&cfg).context("training failed")?;
            println!("params: {}", outcome.param_count);
            for row in &outcome.rows {
                println!(
                    "epoch {:>3}  lr {:<8} train_loss {:.4}  train_acc {:.4}  test_acc {:.4}",
                    row.epoch, row.lr, row.train_loss, row.train_acc, row.test_acc
                );
            }
            println!("metrics: {}", outcome.metrics_path.display());
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(args) => {
            let (mut model, mut cfg) = load_model(&args.checkpoint)?;
            if args.data_path.is_some() {
                cfg.data_path = args.data_path;
            }
            let (_, test) = prepare_data(&cfg)?;
            let acc = evaluate(&mut model, &test, cfg.batch_size)?;
            println!("test_acc {acc}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate(args) => {
            let (model, mut cfg) = load_model(&args.checkpoint)?;
            if args.data_path.is_some() {
                cfg.data_path = args.data_path;
            }
            let (_, test) = prepare_data(&cfg)?;
            let rows = ablation_table(&model, &test, cfg.batch_size)?;
            let csv = ablation_csv(&rows);
            let out = args.out.unwrap_or_else(|| {
                args.checkpoint.parent().unwrap_or(std::path::Path::new(".")).join("ablation.csv")
            });
            std::fs::write(&out, &csv)?;
            print!("{csv}");
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(args) => {
            if args.blocks.is_empty() || args.layers.is_empty() {
                bail!("sweep needs at least one value for --blocks and --layers-per-block");
            }
            let cfg = args.train.to_config("sweep")?;
            let rows = sweep(&cfg, &args.blocks, &args.layers)?;
            for r in &rows {
                match r.final_test_acc {
                    Some(acc) => println!("b{} l{}: {acc:.4}", r.blocks, r.layers_per_block),
                    None => println!("b{} l{}: {}", r.blocks, r.layers_per_block, r.status),
                }
            }
            println!("wrote {}", cfg.out_dir.join("sweep.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify(args) => {
            let opts = VerifyOptions {
                equivalence_configs: args.configs,
                seed: args.seed,
                inject_fault: args.inject_fault,
            };
            let (reports, ok) = run_all(&opts)?;
            for r in &reports {
                println!("{}", r.line());
            }
            if ok {
                println!("verify: all {} checks passed", reports.len());
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verify: FAILURES present");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
