//! `build-dataset`: synthesize trajectories + manifest with the toy backend.

use latent_align::error::Result;
use latent_align::store::{DType, SubsetTag};
use latent_align::toy::{build_toy_corpus_with_prompts, ToyCorpusSpec};
use serde::{Deserialize, Serialize};

use crate::common::{build_backend_world, resolve_prompts, Context};

#[derive(clap::Args)]
pub struct Args {
    /// Number of template prompts when no prompts file is configured.
    #[arg(long)]
    n_prompts: Option<usize>,
    /// Trajectories per prompt.
    #[arg(long)]
    images_per_prompt: Option<usize>,
    /// Denoising iterations per trajectory.
    #[arg(long)]
    t_total: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub backend: String,
    pub world_salt: u64,
    pub noise_scale: f64,
    pub prompts_file: Option<std::path::PathBuf>,
    pub n_prompts: usize,
    pub prompt_offset: usize,
    pub images_per_prompt: usize,
    pub t_total: u32,
    pub seed: u64,
    pub jitter_base: f64,
    pub jitter_step: f64,
    pub dtype: DType,
    pub subset_tag: SubsetTag,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            world_salt: 7,
            noise_scale: 1.0,
            prompts_file: None,
            n_prompts: 20,
            prompt_offset: 0,
            images_per_prompt: 1,
            t_total: 10,
            seed: 0,
            jitter_base: 0.15,
            jitter_step: 0.0,
            dtype: DType::F16,
            subset_tag: SubsetTag::Custom,
        }
    }
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut config: Config = ctx.load_config()?;
    if let Some(n) = args.n_prompts {
        config.n_prompts = n;
    }
    if let Some(m) = args.images_per_prompt {
        config.images_per_prompt = m;
    }
    if let Some(t) = args.t_total {
        config.t_total = t;
    }
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    ctx.write_snapshot("build-dataset", &config)?;

    let world = build_backend_world(&config.backend, config.world_salt, config.noise_scale)?;
    let prompts = resolve_prompts(
        config.prompts_file.as_deref(),
        config.n_prompts,
        config.prompt_offset,
    )?;
    let spec = ToyCorpusSpec {
        n_prompts: prompts.len(),
        images_per_prompt: config.images_per_prompt,
        t_total: config.t_total,
        seed: config.seed,
        jitter_base: config.jitter_base,
        jitter_step: config.jitter_step,
        dtype: config.dtype,
        subset_tag: config.subset_tag,
        prompt_offset: config.prompt_offset,
    };
    let root = ctx.out("dataset");
    let manifest = build_toy_corpus_with_prompts(&world, &spec, &prompts, &root)?;
    println!(
        "dataset: {} samples ({} prompts x {} images, T={}) under {:?}",
        manifest.entries.len(),
        prompts.len(),
        config.images_per_prompt,
        config.t_total,
        root
    );
    Ok(())
}
