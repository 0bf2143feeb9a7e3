//! `molmix` command-line driver.

mod commands;
mod run;

use clap::{Args, CommandFactory, Parser, Subcommand};
use molmix_core::data::TargetSpec;
use molmix_core::fusion::ModalityMask;
use molmix_core::tensor::Precision;
use molmix_core::trainer::{LossKind, MetricKind};
use run::Preset;
use serde::de::DeserializeOwned;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "molmix", version, about = "Multimodal molecular transformer: data, training, ablations and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic molecule dataset.
    Gen(GenArgs),
    /// Train a model and write metrics, report and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train once per (modality mask, seed) and tabulate test metrics.
    Ablate(AblateArgs),
    /// Fit only the final readout layer on a pretrained and on a random backbone.
    Transfer(TransferArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Measure attention scratch memory for the naive and tiled kernels.
    Attnbench(AttnbenchArgs),
    /// Write downstream pre-softmax attention scores for one molecule.
    Attndump(AttndumpArgs),
}

fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn split_fractions(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated fractions".to_string())
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory; created if missing. Nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SeedArg {
    /// Random seed. When omitted: the config file value, then MOLMIX_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn env_fallback() -> anyhow::Result<Option<u64>> {
        match std::env::var("MOLMIX_SEED") {
            Ok(v) => Ok(Some(v.trim().parse().map_err(|_| anyhow::anyhow!("MOLMIX_SEED=`{v}` is not an integer"))?)),
            Err(_) => Ok(None),
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    seed: SeedArg,
    /// JSON generator settings; flags override them.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run the generation recorded in a manifest.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    min_atoms: Option<usize>,
    #[arg(long)]
    max_atoms: Option<usize>,
    #[arg(long)]
    k_conformers: Option<usize>,
    /// geom, topo, str, mix or all.
    #[arg(long)]
    target: Option<TargetSpec>,
    /// Coordinate noise per conformer, Å.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    ring_prob: Option<f64>,
}

/// Settings shared by the training-type commands.
#[derive(Args, Debug)]
struct RunArgs {
    /// JSONL dataset (with its `.meta.json` sidecar).
    #[arg(long, required_unless_present = "manifest")]
    data: Option<PathBuf>,
    /// JSON run config with `model`, `train`, `split` and `split_seed` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run exactly what a manifest describes; other run flags are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Model size preset used before the config file is applied.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// JSON file with `train`, `val` and `test` molecule ids.
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Train/val/test fractions, e.g. 0.8,0.1,0.1.
    #[arg(long, value_parser = split_fractions)]
    split: Option<[f64; 3]>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Enabled modalities, e.g. `1d+2d+3d` or `1d,3d`.
    #[arg(long)]
    modalities: Option<ModalityMask>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// mae or mse.
    #[arg(long, value_parser = serde_value::<LossKind>)]
    loss: Option<LossKind>,
    /// Model-selection metric: mae or rmse.
    #[arg(long, value_parser = serde_value::<MetricKind>)]
    metric: Option<MetricKind>,
    /// Dataset target column to fit.
    #[arg(long)]
    target: Option<String>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<Precision>,
    /// naive or tiled.
    #[arg(long, value_parser = ["naive", "tiled"])]
    attention: Option<String>,
    /// Tile size of the tiled attention kernel.
    #[arg(long)]
    block: Option<usize>,
    /// Stop once train MAE drops below this value.
    #[arg(long)]
    stop_at_train_mae: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    out: OutArg,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "val", value_parser = serde_value::<molmix_core::data::Split>)]
    split: molmix_core::data::Split,
    /// Override the modalities stored with the checkpoint.
    #[arg(long)]
    modalities: Option<ModalityMask>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    run: RunArgs,
    /// Masks to train, e.g. `1d 2d 3d 1d+2d`. Defaults to all seven.
    #[arg(long, num_args = 1..)]
    masks: Vec<ModalityMask>,
    /// Seeds per mask. Defaults to five consecutive seeds from --seed.
    #[arg(long, num_args = 1..)]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    run: RunArgs,
    /// Pretrained checkpoint written by `train`.
    #[arg(long, required_unless_present = "manifest")]
    checkpoint: Option<PathBuf>,
    /// Defaults to five consecutive seeds from --seed.
    #[arg(long, num_args = 1..)]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    seed: SeedArg,
    /// Coordinates probed per parameter tensor (all when omitted).
    #[arg(long)]
    max_per_group: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    /// Test hook: perturb the analytic gradient of this parameter.
    #[arg(long)]
    corrupt: Option<String>,
    /// Check a model without parameters.
    #[arg(long)]
    empty: bool,
    #[arg(long)]
    modalities: Option<ModalityMask>,
    #[arg(long, value_parser = ["naive", "tiled"], default_value = "tiled")]
    attention: String,
    #[arg(long, default_value_t = 4)]
    block: usize,
}

#[derive(Args, Debug)]
struct AttnbenchArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    lengths: Vec<usize>,
    /// Segments per packed batch.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Model width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    block: usize,
}

#[derive(Args, Debug)]
struct AttndumpArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Molecule id in the dataset.
    #[arg(long)]
    molecule: String,
    #[arg(long)]
    modalities: Option<ModalityMask>,
}

/// Long flags accepted by the subcommand named in `args`, or by the top level.
fn valid_flags(args: &[String]) -> Vec<String> {
    let root = Cli::command();
    let cmd = args
        .iter()
        .skip(1)
        .find_map(|a| root.find_subcommand(a))
        .unwrap_or(&root);
    cmd.get_arguments()
        .filter_map(|a| a.get_long().map(|l| format!("--{l}")))
        .chain(["--help".to_string()])
        .collect()
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let unknown = e.kind() == clap::error::ErrorKind::UnknownArgument;
            let code = e.exit_code();
            let _ = e.print();
            if unknown {
                eprintln!("valid flags: {}", valid_flags(&args).join(" "));
            }
            return ExitCode::from(code as u8);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
