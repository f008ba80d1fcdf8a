//! `train`: fine-tune the image tower on noisy-latent previews.

use std::path::PathBuf;

use latent_align::error::{Error, Result};
use latent_align::store::DatasetManifest;
use latent_align::trainer::{train_resumed, CheckpointSidecar, TrainConfig, TrainInputs};
use serde::{Deserialize, Serialize};

use crate::common::{build_backend_world, load_gateway, load_projection, Context};

#[derive(clap::Args)]
pub struct Args {
    /// Dataset root (must contain manifest.jsonl).
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    /// Epoch count override.
    #[arg(long)]
    epochs: Option<usize>,
    /// Resume from a previous run's checkpoint.
    #[arg(long)]
    resume_from: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub dataset_root: PathBuf,
    /// "toy-pretrained" or a checkpoint path.
    pub gateway: String,
    pub world_salt: u64,
    pub projection_config: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("runs/latest/dataset"),
            gateway: "toy-pretrained".into(),
            world_salt: 7,
            projection_config: None,
            resume_from: None,
            train: TrainConfig::default(),
        }
    }
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut config: Config = ctx.load_config()?;
    if let Some(root) = args.dataset_root {
        config.dataset_root = root;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(resume) = args.resume_from {
        config.resume_from = Some(resume);
    }
    if let Some(seed) = ctx.seed {
        config.train.seed = seed;
    }
    ctx.write_snapshot("train", &config)?;

    let manifest = DatasetManifest::load(&config.dataset_root.join("manifest.jsonl"))?;
    let projection = load_projection(config.projection_config.as_deref())?;
    let world = build_backend_world("toy", config.world_salt, 1.0)?;

    // resume: load the checkpoint as the starting gateway and continue the
    // step counter from its sidecar
    let (mut gateway, start_step) = match &config.resume_from {
        None => (load_gateway(&config.gateway, &world)?, 0),
        Some(ckpt) => {
            let gateway = load_gateway(&ckpt.to_string_lossy(), &world)?;
            let sidecar_path = ckpt.with_file_name("checkpoint.meta.json");
            let start = match std::fs::read_to_string(&sidecar_path) {
                Ok(text) => serde_json::from_str::<CheckpointSidecar>(&text)
                    .map(|s| s.steps_completed)
                    .unwrap_or(0),
                Err(_) => 0,
            };
            (gateway, start)
        }
    };

    let inputs = TrainInputs {
        root: &config.dataset_root,
        manifest: &manifest,
        projection: &projection,
    };
    let report = train_resumed(
        &mut gateway,
        &inputs,
        &config.train,
        &ctx.output_dir,
        start_step,
    )
    .map_err(|e| match e {
        Error::Divergence { step, checkpoint } => {
            eprintln!("training diverged at step {step}; last good checkpoint: {checkpoint:?}");
            Error::Divergence { step, checkpoint }
        }
        other => other,
    })?;
    println!(
        "trained {} steps: loss {:.4} -> {:.4}; checkpoint {:?}",
        report.steps_completed - start_step,
        report.initial_loss,
        report.final_loss,
        report.checkpoint_path
    );
    Ok(())
}
