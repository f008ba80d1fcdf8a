//! `score`: dump `s_latent` of every sample's own prompt at chosen steps,
//! plus `s_final` on the stored final image when present.

use std::path::PathBuf;

use latent_align::error::Result;
use latent_align::parallel::par_map_indexed;
use latent_align::scoring::{s_final, s_latent, write_score_records, ScoreRecord, ScoreStep};
use latent_align::store::{read_image_blob, read_trajectory, DatasetManifest, StepRange};
use serde::{Deserialize, Serialize};

use crate::common::{build_backend_world, load_gateway, load_projection, Context};

#[derive(clap::Args)]
pub struct Args {
    /// Dataset root (must contain manifest.jsonl).
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    /// Gateway override: "toy-pretrained" or a checkpoint path.
    #[arg(long)]
    gateway: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub dataset_root: PathBuf,
    pub gateway: String,
    pub world_salt: u64,
    pub projection_config: Option<PathBuf>,
    /// Steps to score; empty scores every stored step.
    pub steps: Vec<u32>,
    /// Also score stored final images.
    pub include_final: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("runs/latest/dataset"),
            gateway: "toy-pretrained".into(),
            world_salt: 7,
            projection_config: None,
            steps: Vec::new(),
            include_final: true,
        }
    }
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut config: Config = ctx.load_config()?;
    if let Some(root) = args.dataset_root {
        config.dataset_root = root;
    }
    if let Some(g) = args.gateway {
        config.gateway = g;
    }
    ctx.write_snapshot("score", &config)?;

    let manifest = DatasetManifest::load(&config.dataset_root.join("manifest.jsonl"))?;
    let projection = load_projection(config.projection_config.as_deref())?;
    let world = build_backend_world("toy", config.world_salt, 1.0)?;
    let gateway = load_gateway(&config.gateway, &world)?;

    let per_sample: Vec<Vec<ScoreRecord>> =
        par_map_indexed(manifest.entries.len(), ctx.workers, |i| {
            let entry = &manifest.entries[i];
            let filter = if config.steps.is_empty() {
                None
            } else {
                let lo = *config.steps.iter().min().unwrap();
                let hi = *config.steps.iter().max().unwrap();
                Some(StepRange::new(lo, hi))
            };
            let traj = read_trajectory(&entry.sample_id, &config.dataset_root, filter)?;
            let mut records = Vec::new();
            for frame in &traj.frames {
                if !config.steps.is_empty() && !config.steps.contains(&frame.step) {
                    continue;
                }
                let score = s_latent(&gateway, frame, &projection, &traj.prompt)?;
                records.push(ScoreRecord {
                    sample_id: entry.sample_id.clone(),
                    step: ScoreStep::Latent(frame.step),
                    prompt_id: entry.sample_id.clone(),
                    score: score.value,
                });
            }
            if config.include_final {
                if let Some(rel) = &traj.final_image_ref {
                    let image =
                        read_image_blob(&config.dataset_root.join(&entry.sample_id).join(rel))?;
                    let score = s_final(&gateway, &image, &traj.prompt)?;
                    records.push(ScoreRecord {
                        sample_id: entry.sample_id.clone(),
                        step: ScoreStep::Final,
                        prompt_id: entry.sample_id.clone(),
                        score: score.value,
                    });
                }
            }
            Ok(records)
        })?;

    let records: Vec<ScoreRecord> = per_sample.into_iter().flatten().collect();
    let path = ctx.out("scores.jsonl");
    write_score_records(&path, &records)?;
    println!(
        "scored {} records over {} samples with {} -> {:?}",
        records.len(),
        manifest.entries.len(),
        config.gateway,
        path
    );
    Ok(())
}
