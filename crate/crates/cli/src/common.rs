//! Shared config plumbing for the subcommands.

use std::path::{Path, PathBuf};

use latent_align::error::{Error, Result};
use latent_align::preview::{default_projection, LatentProjection};
use latent_align::toy::{template_prompts, ToyDualEncoder, ToyWorld};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub struct Context {
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Context {
    /// Loads the subcommand config, starting from defaults when no file is
    /// given.
    pub fn load_config<T: DeserializeOwned + Default>(&self) -> Result<T> {
        match &self.config_path {
            None => Ok(T::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|_| Error::Config(format!("config file not found: {path:?}")))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("config file {path:?}: {e}")))
            }
        }
    }

    /// Writes the resolved configuration snapshot beside the outputs.
    pub fn write_snapshot<T: Serialize>(&self, command: &str, config: &T) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir)?;
        let snapshot = serde_json::json!({
            "command": command,
            "seed": self.seed,
            "workers": self.workers,
            "output_dir": self.output_dir,
            "config": config,
        });
        std::fs::write(
            self.output_dir.join("resolved_config.json"),
            serde_json::to_string_pretty(&snapshot)?,
        )?;
        Ok(())
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

/// Builds the toy generation/scoring universe. Any backend other than
/// "toy" needs external model weights that this build does not ship.
pub fn build_backend_world(backend: &str, salt: u64, noise_scale: f64) -> Result<ToyWorld> {
    match backend {
        "toy" => Ok(ToyWorld::new(salt).with_noise_scale(noise_scale)),
        other => Err(Error::Config(format!(
            "generation backend {other:?} is not available in this build; \
             use \"toy\" or point the pipeline at an external checkpoint via its adapter"
        ))),
    }
}

/// Resolves a gateway spec: the literal "toy-pretrained" or a checkpoint
/// path produced by `train`.
pub fn load_gateway(spec: &str, world: &ToyWorld) -> Result<ToyDualEncoder> {
    if spec == "toy-pretrained" {
        return Ok(world.pretrained_encoder());
    }
    ToyDualEncoder::load(Path::new(spec))
}

pub fn load_projection(path: Option<&Path>) -> Result<LatentProjection> {
    match path {
        Some(p) => LatentProjection::load_file(p),
        None => default_projection(),
    }
}

/// Prompt list: a file with one prompt per line, or `n` template prompts
/// starting at `offset`.
pub fn resolve_prompts(
    prompts_file: Option<&Path>,
    n_prompts: usize,
    prompt_offset: usize,
) -> Result<Vec<String>> {
    match prompts_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|_| Error::Config(format!("prompts file not found: {path:?}")))?;
            let prompts: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect();
            if prompts.is_empty() {
                return Err(Error::Data(format!("prompts file {path:?} is empty")));
            }
            Ok(prompts)
        }
        None => Ok(template_prompts(n_prompts, prompt_offset)),
    }
}
