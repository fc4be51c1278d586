//! `voldiff`: scenes, datasets, encoder and diffusion training, sampling,
//! noise analysis, caption filtering and image metrics.

mod config;
mod diffuse;
mod encoding;
mod noise;
mod quality;
mod run;
mod scenes;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Common;

#[derive(Parser, Debug)]
#[command(name = "voldiff", version, about = "Feature-volume diffusion toolkit", propagate_version = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Random primitive scenes with captions (scenes.json).
    SceneGen(scenes::SceneGenArgs),
    /// Multi-view RGB-D renders of scenes.
    MakeDataset(scenes::MakeDatasetArgs),
    /// Render a feature volume or an analytic scene from an orbit camera.
    Render(scenes::RenderArgs),
    /// Encode every scene of a dataset into feature volumes.
    Encode(encoding::EncodeArgs),
    /// Train the multi-view encoder and decoder.
    TrainEncoder(encoding::TrainEncoderArgs),
    /// Train the caption-conditioned denoiser on baked volumes.
    TrainDiffusion(diffuse::TrainDiffusionArgs),
    /// Draw volumes from a trained denoiser.
    Sample(diffuse::SampleArgs),
    /// Patch perturbation formulas and Monte Carlo checks.
    NoiseLab {
        #[command(subcommand)]
        cmd: noise::NoiseCmd,
    },
    /// Caption-consistency filtering.
    Filter(quality::FilterArgs),
    /// PSNR / SSIM between images, or MSE between volumes.
    Metrics(quality::MetricsArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match &cli.cmd {
        Cmd::SceneGen(a) => scenes::scene_gen_cmd(c, a),
        Cmd::MakeDataset(a) => scenes::make_dataset_cmd(c, a),
        Cmd::Render(a) => scenes::render_cmd(c, a),
        Cmd::Encode(a) => encoding::encode_cmd(c, a),
        Cmd::TrainEncoder(a) => encoding::train_encoder_cmd(c, a),
        Cmd::TrainDiffusion(a) => diffuse::train_diffusion_cmd(c, a),
        Cmd::Sample(a) => diffuse::sample_cmd(c, a),
        Cmd::NoiseLab { cmd } => noise::noise_cmd(c, cmd),
        Cmd::Filter(a) => quality::filter_cmd(c, a),
        Cmd::Metrics(a) => quality::metrics_cmd(c, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already embed their source in the message
            let mut msg = String::new();
            for cause in e.chain() {
                let s = cause.to_string();
                if !msg.ends_with(&s) {
                    msg = if msg.is_empty() { s } else { format!("{msg}: {s}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
