//! `modiff` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modiff::pipeline::Arm;

#[derive(Parser, Debug)]
#[command(name = "modiff", version, about = "Two-stage diffusion for 4D motion synthesis on synthetic phantoms")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// Run config (TOML). Overrides --preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Shipped preset: paper, desk or smoke.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// Output directory; relative paths of other options resolve against it.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the phantom train/val/test splits as T4D files.
    GenData,
    /// Train the volumetric VAE.
    TrainVae,
    /// Train the Stage-1 field diffusion model.
    TrainTddm {
        #[arg(long, default_value = "full")]
        arm: Arm,
    },
    /// Train the Stage-2 image-to-video model on ground-truth fields.
    TrainI2v {
        #[arg(long, default_value = "full")]
        arm: Arm,
    },
    /// Sample N temporal differential fields for a prompting frame.
    SampleFields {
        /// T4D volume, or a video whose first frame is used.
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "fields.t4d")]
        output: PathBuf,
        #[arg(long, default_value = "full")]
        arm: Arm,
    },
    /// Synthesize an N-frame video from a prompting frame.
    Synthesize {
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synth.t4d")]
        output: PathBuf,
        /// Also write a PNG montage next to the output.
        #[arg(long)]
        montage: bool,
        #[arg(long, default_value = "full")]
        arm: Arm,
    },
    /// Synthesize the test split and report PSNR, lpips_proxy and fvd_proxy.
    Evaluate {
        #[arg(long, default_value = "full")]
        arm: Arm,
    },
    /// Run the ablation grid over the test split and write a CSV table.
    Ablate {
        #[arg(long, default_value = "full,no-fal,no-n,no-pal", value_delimiter = ',')]
        arms: Vec<Arm>,
    },
    /// Write a PNG montage (axial mid-slice per frame) of a T4D video or field stack.
    Plot {
        #[arg(long)]
        input: PathBuf,
        /// Plot temporal error maps against this reference video instead.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "montage.png")]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
