//! `painvit` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use painvit::fusion::{FusionMethod, Source};

#[derive(Parser, Debug)]
#[command(name = "painvit", version, about = "Twin vision transformers for multimodal pain assessment")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run-config TOML file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root for run directories (default: $PAINVIT_RUN_ROOT, then ./runs).
    #[arg(long, global = true)]
    pub run_root: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    #[arg(long, default_value = "fusion", value_parser = parse_source)]
    pub modality: Source,
    #[arg(long, default_value = "single-diagram", value_parser = parse_fusion)]
    pub fusion: FusionMethod,
}

fn parse_source(s: &str) -> Result<Source, String> {
    s.parse().map_err(|e: painvit::Error| e.to_string())
}

fn parse_fusion(s: &str) -> Result<FusionMethod, String> {
    s.parse().map_err(|e: painvit::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a class-separable synthetic dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: Option<usize>,
        /// Noise amplitude; smaller is easier.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        fnirs_len: Option<usize>,
        /// Comma-separated channel names to list as excluded.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
    },
    /// Render one fNIRS channel (or two, on one diagram) to PNG.
    RenderWaveform {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        channel: String,
        /// Second channel drawn in blue on the same diagram.
        #[arg(long)]
        with: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a plain-text PGM/PPM grid.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Embed every frame and channel with the first model.
    ExtractEmbeddings {
        #[arg(long)]
        data: PathBuf,
        /// Extractor checkpoint; a fresh, calibrated model is built if absent.
        #[arg(long)]
        model1: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the second model's input diagram for every sample.
    Fuse {
        #[arg(long)]
        embeddings: PathBuf,
        /// Dataset supplying labels.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the diagram classifier.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        model1: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Evaluate saved checkpoints and write a metrics CSV.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model1: PathBuf,
        #[arg(long)]
        model2: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-head attention overlays and weight dumps for one image.
    AttentionMap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG input at the model's resolution.
        #[arg(long, conflicts_with_all = ["data", "sample"])]
        image: Option<PathBuf>,
        /// Dataset and sample id; the sample's first frame is used.
        #[arg(long, requires = "sample")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        sample: Option<String>,
        /// Defaults to the last stage.
        #[arg(long)]
        stage: Option<usize>,
        /// Defaults to the last block of the stage.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Parameter and FLOP counts of both models.
    CountParams {
        #[arg(long)]
        image_size: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
