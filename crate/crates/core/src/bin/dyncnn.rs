//! Command-line front end: train, fine-tune, evaluate, trace, and report on
//! instance-conditional networks.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure (non-finite loss).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dyncnn::analytics;
use dyncnn::checkpoint::{load_checkpoint, save_checkpoint};
use dyncnn::cost::{dataset_flops_report, CostConfig, Placement};
use dyncnn::data::{self, Dataset, Split};
use dyncnn::error::{Error, Result};
use dyncnn::model::{Network, NetworkArch};
use dyncnn::train::{self, TrainConfig, TrainMode};

#[derive(Parser)]
#[command(name = "dyncnn", version, about = "Train and analyze instance-conditional CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from scratch and write checkpoints plus metrics CSV
    Train(RunArgs),
    /// Fine-tune a pretrained checkpoint, typically with an L1 gate penalty
    Finetune(RunArgs),
    /// Evaluate a checkpoint: accuracy plus FLOPs under all three placements
    Eval(RunArgs),
    /// Dump per-instance gate traces as CSV
    Trace(RunArgs),
    /// Per-instance FLOPs report with extremes for one placement
    FlopsReport(RunArgs),
    /// Per-class channel activation matrix for one block
    ActivationMatrix(RunArgs),
    /// Print the fully-resolved configuration (defaults merged with file and flags)
    PrintConfig(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file; missing fields take documented defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to load (eval/trace/reports/finetune) — overrides config
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory — overrides config
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// L1 gate penalty — overrides config
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of epochs — overrides config
    #[arg(long)]
    epochs: Option<usize>,
    /// RNG seed — overrides config
    #[arg(long)]
    seed: Option<u64>,
    /// Cost placement: dense | parallel | sequential — overrides config
    #[arg(long)]
    placement: Option<String>,
    /// Block index for the activation matrix
    #[arg(long)]
    block: Option<usize>,
    /// Truncate the activation matrix to the first K channels
    #[arg(long)]
    first_k: Option<usize>,
    /// Evaluate/trace at most this many instances
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ArchConfig {
    stem_channels: usize,
    /// stages as (out_channels, blocks, stride)
    stages: Vec<(usize, usize, usize)>,
    classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            stem_channels: 16,
            stages: vec![(16, 2, 1), (32, 2, 2), (64, 2, 2)],
            classes: 10,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataConfig {
    /// "synthetic" or "cifar10"
    source: String,
    /// directory containing the CIFAR-10 binary batches
    dir: Option<PathBuf>,
    classes: usize,
    train_n: usize,
    test_n: usize,
    seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            dir: None,
            classes: 10,
            train_n: 5000,
            test_n: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    arch: ArchConfig,
    data: DataConfig,
    train: TrainConfig,
    cost: CostConfig,
    output_dir: PathBuf,
    checkpoint: Option<PathBuf>,
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if cfg.output_dir.as_os_str().is_empty() {
        cfg.output_dir = PathBuf::from("out");
    }
    if let Some(v) = &args.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    if let Some(v) = &args.out_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = args.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
        cfg.train.decay_period = cfg.train.decay_period.min(v.max(1));
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = &args.placement {
        cfg.cost.placement = match v.as_str() {
            "dense" => Placement::Dense,
            "parallel" => Placement::Parallel,
            "sequential" => Placement::Sequential,
            other => {
                return Err(Error::Config {
                    field: "placement".into(),
                    reason: format!("expected dense|parallel|sequential, got `{other}`"),
                })
            }
        };
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset<f32>> {
    let n = match split {
        Split::Train => cfg.data.train_n,
        Split::Test => cfg.data.test_n,
    };
    match cfg.data.source.as_str() {
        "synthetic" => {
            // disjoint train/test: one pool, train takes the front, test the back
            let pool = data::make_synthetic::<f32>(
                cfg.data.classes,
                cfg.data.train_n + cfg.data.test_n,
                cfg.data.seed,
            )?;
            match split {
                Split::Train => pool.take(cfg.data.train_n),
                Split::Test => {
                    let idx: Vec<usize> =
                        (cfg.data.train_n..cfg.data.train_n + cfg.data.test_n).collect();
                    let (images, labels) = pool.gather(&idx)?;
                    Ok(Dataset {
                        images,
                        labels,
                        class_names: pool.class_names.clone(),
                        norm: None,
                    })
                }
            }
        }
        "cifar10" => {
            let dir = cfg.data.dir.as_ref().ok_or_else(|| Error::Config {
                field: "data.dir".into(),
                reason: "cifar10 source requires a directory".into(),
            })?;
            let full = data::load_cifar10::<f32>(dir, split)?;
            full.take(n.min(full.len()))
        }
        other => Err(Error::Config {
            field: "data.source".into(),
            reason: format!("expected synthetic|cifar10, got `{other}`"),
        }),
    }
}

fn metrics_csv(history: &[train::EpochMetrics]) -> String {
    let mut out =
        String::from("epoch,loss,accuracy,mean_block_salience,gate_sparsity,backbone_lr,gate_lr\n");
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.epoch, m.loss, m.accuracy, m.mean_block_salience, m.gate_sparsity, m.backbone_lr, m.gate_lr
        ));
    }
    out
}

fn cmd_train(cfg: &RunConfig, finetune: bool) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let mut train_set = load_split(cfg, Split::Train)?;

    let (mut net, norm) = if finetune {
        let path = cfg.checkpoint.as_ref().ok_or_else(|| Error::Config {
            field: "checkpoint".into(),
            reason: "finetune requires a pretrained checkpoint".into(),
        })?;
        load_checkpoint::<f32>(path)?
    } else {
        let arch = NetworkArch::micro_basic(cfg.arch.stem_channels, &cfg.arch.stages, cfg.arch.classes);
        (Network::init(&arch, cfg.train.seed)?, None)
    };
    let stats = match norm {
        Some(s) => s,
        None => train_set.compute_norm(),
    };
    train_set.apply_norm(&stats);

    let mut run_cfg = cfg.train.clone();
    run_cfg.mode = if finetune { TrainMode::FineTunePretrained } else { TrainMode::FromScratch };

    let mut best_acc = f64::NEG_INFINITY;
    let mut best_net: Option<Network<f32>> = None;
    let history = train::train(&mut net, &train_set, &run_cfg, |m, snapshot| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.3}  S_L {:.3}  sparsity {:.3}",
            m.epoch, m.loss, m.accuracy, m.mean_block_salience, m.gate_sparsity
        );
        if m.accuracy > best_acc {
            best_acc = m.accuracy;
            best_net = Some(snapshot.clone());
        }
    })?;
    save_checkpoint(&net, Some(stats), &cfg.output_dir.join("final.ckpt"))?;
    save_checkpoint(
        best_net.as_ref().unwrap_or(&net),
        Some(stats),
        &cfg.output_dir.join("best.ckpt"),
    )?;
    fs::write(cfg.output_dir.join("metrics.csv"), metrics_csv(&history))?;
    fs::write(
        cfg.output_dir.join("run-config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    println!(
        "trained {} epochs, final train accuracy {:.3}; artifacts in {}",
        history.len(),
        history.last().map_or(0.0, |m| m.accuracy),
        cfg.output_dir.display()
    );
    Ok(())
}

fn load_eval_inputs(cfg: &RunConfig) -> Result<(Network<f32>, Dataset<f32>)> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| Error::Config {
        field: "checkpoint".into(),
        reason: "this command requires a checkpoint".into(),
    })?;
    let (net, norm) = load_checkpoint::<f32>(path)?;
    let mut test = load_split(cfg, Split::Test)?;
    let stats = norm.ok_or_else(|| Error::CheckpointFormat {
        reason: "checkpoint carries no normalization stats".into(),
    })?;
    test.apply_norm(&stats);
    Ok((net, test))
}

fn limited(test: Dataset<f32>, limit: Option<usize>) -> Result<Dataset<f32>> {
    match limit {
        Some(k) if k < test.len() => test.take(k),
        _ => Ok(test),
    }
}

fn cmd_eval(cfg: &RunConfig, limit: Option<usize>) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let (net, test) = load_eval_inputs(cfg)?;
    let test = limited(test, limit)?;
    let accuracy = train::evaluate(&net, &test, 96)?;
    println!("test accuracy: {accuracy:.4} ({} instances)", test.len());
    let traces = net.trace_dataset(&test.images, &test.labels, Placement::Sequential)?;
    for placement in [Placement::Dense, Placement::Parallel, Placement::Sequential] {
        let cost_cfg = CostConfig { placement, ..cfg.cost.clone() };
        let report = dataset_flops_report(&traces, &net, &cost_cfg)?;
        println!(
            "{placement:>10}: mean {:.1} FLOPs  min {}  max {}",
            report.mean, report.min, report.max
        );
        fs::write(cfg.output_dir.join(format!("flops_{placement}.csv")), report.to_csv())?;
    }
    Ok(())
}

fn cmd_trace(cfg: &RunConfig, limit: Option<usize>) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let (net, test) = load_eval_inputs(cfg)?;
    let test = limited(test, limit)?;
    let traces = net.trace_dataset(&test.images, &test.labels, cfg.cost.placement)?;
    let mut csv = String::from("instance_id,label,predicted,block,executed,block_salience,active_channels,channel_saliences\n");
    for t in &traces {
        for b in &t.blocks {
            let chans: Vec<String> = b.record.channel_salience.iter().map(|s| format!("{s}")).collect();
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                t.id,
                t.label,
                t.predicted,
                b.block_index,
                b.executed as u8,
                b.record.block_salience,
                b.active_channels,
                chans.join(";")
            ));
        }
    }
    let path = cfg.output_dir.join("traces.csv");
    fs::write(&path, csv)?;
    println!("wrote {} instance traces to {}", traces.len(), path.display());
    Ok(())
}

fn cmd_flops_report(cfg: &RunConfig, limit: Option<usize>) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let (net, test) = load_eval_inputs(cfg)?;
    let test = limited(test, limit)?;
    let traces = net.trace_dataset(&test.images, &test.labels, cfg.cost.placement)?;
    let report = dataset_flops_report(&traces, &net, &cfg.cost)?;
    let k = 10.min(report.instances.len());
    let (lowest, highest) = analytics::extreme_instances(&report, k)?;
    let placement = cfg.cost.placement;
    fs::write(cfg.output_dir.join(format!("flops_{placement}.csv")), report.to_csv())?;
    fs::write(
        cfg.output_dir.join(format!("flops_{placement}_lowest.csv")),
        analytics::extremes_to_csv(&lowest),
    )?;
    fs::write(
        cfg.output_dir.join(format!("flops_{placement}_highest.csv")),
        analytics::extremes_to_csv(&highest),
    )?;
    println!(
        "{placement} FLOPs over {} instances: mean {:.1}, min {}, max {}",
        report.instances.len(),
        report.mean,
        report.min,
        report.max
    );
    Ok(())
}

fn cmd_activation_matrix(cfg: &RunConfig, args: &RunArgs) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let (net, test) = load_eval_inputs(cfg)?;
    let test = limited(test, args.limit)?;
    let traces = net.trace_dataset(&test.images, &test.labels, cfg.cost.placement)?;
    let block = args.block.unwrap_or(0);
    let matrix = analytics::channel_activation_matrix(&traces, &test.class_names, block, args.first_k)?;
    let path = cfg.output_dir.join(format!("activation_matrix_block{block}.csv"));
    fs::write(&path, matrix.to_csv())?;
    println!("wrote activation matrix for block {block} to {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(&load_config(args)?, false),
        Command::Finetune(args) => cmd_train(&load_config(args)?, true),
        Command::Eval(args) => cmd_eval(&load_config(args)?, args.limit),
        Command::Trace(args) => cmd_trace(&load_config(args)?, args.limit),
        Command::FlopsReport(args) => cmd_flops_report(&load_config(args)?, args.limit),
        Command::ActivationMatrix(args) => {
            let cfg = load_config(args)?;
            cmd_activation_matrix(&cfg, args)
        }
        Command::PrintConfig(args) => {
            let cfg = load_config(args)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
