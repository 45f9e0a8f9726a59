mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use idcnet_core::data::{Normalization, SplitUnit};

use crate::commands::Failure;
use crate::config::Preset;

/// Train, evaluate and visualize the batch-normalized Inception patch
/// classifier. Set IDC_LOG (error, warn, info, debug, trace) for verbosity.
#[derive(Parser, Debug)]
#[command(name = "idcnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a dataset tree; writes the split, log, best checkpoint and test report.
    Train(TrainArgs),
    /// Score one split of a saved plan and print the metrics report.
    Eval(EvalArgs),
    /// Print the positive-class probability of patch files as CSV.
    Predict(PredictArgs),
    /// Reassemble one patient's slide and render its probability heatmap.
    Heatmap(HeatmapArgs),
    /// Compare every backward rule against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset tree of coloured blob patches.
    SynthData(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (one directory per patient).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for run outputs.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, value_enum)]
    split_unit: Option<UnitArg>,
    /// Decode every patch into memory before training.
    #[arg(long)]
    preload: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split plan written by `train`.
    #[arg(long)]
    split: PathBuf,
    /// Dataset root the plan's paths are relative to.
    #[arg(long)]
    data: PathBuf,
    /// Which part of the plan to score.
    #[arg(long, value_enum, default_value_t = PartArg::Test)]
    part: PartArg,
    #[arg(long, default_value_t = idcnet_core::metrics::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = NormArg::Global)]
    normalization: NormArg,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write ROC points as CSV.
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A patch image or a directory searched recursively for `.png` files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = NormArg::Global)]
    normalization: NormArg,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    patient: String,
    #[arg(long, default_value = "heatmaps")]
    output: PathBuf,
    #[arg(long, default_value_t = idcnet_core::heatmap::DEFAULT_KERNEL)]
    kernel: usize,
    /// Gaussian deviation; defaults to kernel / 6.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = idcnet_core::heatmap::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = idcnet_core::metrics::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = NormArg::Global)]
    normalization: NormArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Number of random instances per check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = idcnet_core::gradcheck::WIDE_TOLERANCE)]
    tolerance: f64,
    /// Double the upstream gradient of one op kind (harness self-test).
    #[arg(long, hide = true)]
    corrupt_backward: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 2)]
    patients: usize,
    #[arg(long, default_value_t = 4)]
    rows: u32,
    #[arg(long, default_value_t = 4)]
    cols: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Standard,
    Miniature,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum UnitArg {
    Patch,
    Patient,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    Global,
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PartArg {
    Train,
    Val,
    Test,
}

impl From<NormArg> for Normalization {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Global => Normalization::Global,
            NormArg::PerChannel => Normalization::PerChannel,
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => {
            let overrides = config::Overrides {
                data: a.data,
                output: a.output,
                seed: a.seed,
                max_epochs: a.epochs,
                batch_size: a.batch_size,
                lr_init: a.lr,
                preset: a.preset.map(|p| match p {
                    PresetArg::Standard => Preset::Standard,
                    PresetArg::Miniature => Preset::Miniature,
                }),
                split_unit: a.split_unit.map(|u| match u {
                    UnitArg::Patch => SplitUnit::Patch,
                    UnitArg::Patient => SplitUnit::Patient,
                }),
                preload: a.preload,
            };
            commands::train(a.config.as_deref(), &overrides)
        }
        Command::Eval(a) => commands::eval(&commands::EvalRequest {
            checkpoint: a.checkpoint,
            split: a.split,
            data: a.data,
            part: a.part,
            threshold: a.threshold,
            normalization: a.normalization.into(),
            report: a.report,
            roc: a.roc,
        }),
        Command::Predict(a) => commands::predict(&a.checkpoint, &a.input, a.normalization.into(), a.output.as_deref()),
        Command::Heatmap(a) => {
            let opts = idcnet_core::heatmap::HeatmapOptions {
                kernel_size: a.kernel,
                sigma: a.sigma,
                alpha: a.alpha,
                threshold: a.threshold,
            };
            commands::heatmap(&a.checkpoint, &a.data, &a.patient, &a.output, &opts, a.normalization.into())
        }
        Command::Gradcheck(a) => commands::gradcheck(a.seeds, a.tolerance, a.corrupt_backward.as_deref()),
        Command::SynthData(a) => commands::synth_data(&a.output, a.patients, a.rows, a.cols, a.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IDC_LOG", "info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
