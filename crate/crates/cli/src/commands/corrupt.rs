//! `corrupt`: build FactualSets through an LLM endpoint, mock or replay.

use latent_align::corruption::{
    write_factual_sets, ChatClient, FactualSetRecord, HttpChatClient, LlmClientConfig,
    PromptCorruptor, ReplayChatClient, TranscriptCache,
};
use latent_align::error::{Error, Result};
use latent_align::toy::MockChatClient;
use serde::{Deserialize, Serialize};

use crate::common::{resolve_prompts, Context};

#[derive(clap::Args)]
pub struct Args {
    /// Client kind override: mock, http or replay.
    #[arg(long)]
    client: Option<String>,
    /// Number of template prompts when no prompts file is configured.
    #[arg(long)]
    n_prompts: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// "mock" (offline slot swapper), "http" (chat-completions endpoint,
    /// credentials from LLM_API_KEY), or "replay" (recorded transcripts).
    pub client: String,
    pub endpoint: String,
    pub model_tag: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub prompts_file: Option<std::path::PathBuf>,
    pub n_prompts: usize,
    pub prompt_offset: usize,
    /// Transcript directory; defaults to `<output_dir>/transcripts`.
    pub transcripts_dir: Option<std::path::PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        let llm = LlmClientConfig::default();
        Self {
            client: "mock".into(),
            endpoint: llm.endpoint,
            model_tag: llm.model_tag,
            temperature: llm.temperature,
            timeout_secs: llm.timeout_secs,
            max_retries: llm.max_retries,
            prompts_file: None,
            n_prompts: 10,
            prompt_offset: 0,
            transcripts_dir: None,
        }
    }
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut config: Config = ctx.load_config()?;
    if let Some(c) = args.client {
        config.client = c;
    }
    if let Some(n) = args.n_prompts {
        config.n_prompts = n;
    }
    ctx.write_snapshot("corrupt", &config)?;

    let prompts = resolve_prompts(
        config.prompts_file.as_deref(),
        config.n_prompts,
        config.prompt_offset,
    )?;
    let transcripts_dir = config
        .transcripts_dir
        .clone()
        .unwrap_or_else(|| ctx.out("transcripts"));

    let client: Box<dyn ChatClient> = match config.client.as_str() {
        "mock" => Box::new(MockChatClient::new()),
        "http" => Box::new(HttpChatClient::new(LlmClientConfig {
            endpoint: config.endpoint.clone(),
            model_tag: config.model_tag.clone(),
            temperature: config.temperature,
            timeout_secs: config.timeout_secs,
            max_retries: config.max_retries,
        })?),
        "replay" => Box::new(ReplayChatClient::new(&transcripts_dir)?),
        other => {
            return Err(Error::Config(format!(
                "unknown corruption client {other:?}; expected mock, http or replay"
            )))
        }
    };

    // replay reads the cache; the other clients record into it
    let cache = if config.client == "replay" {
        None
    } else {
        Some(TranscriptCache::new(&transcripts_dir)?)
    };
    let mut corruptor = PromptCorruptor::new(client.as_ref(), config.max_retries);
    if let Some(cache) = cache.as_ref() {
        corruptor = corruptor.with_cache(cache);
    }

    // prompts are independent; fan out up to the request-parallelism limit
    let records: Vec<FactualSetRecord> =
        latent_align::parallel::par_map_indexed(prompts.len(), ctx.workers, |i| {
            let set = corruptor.build_factual_set(&prompts[i])?;
            Ok(FactualSetRecord::from_set(&format!("p{i:04}"), &set))
        })?;
    let path = ctx.out("factual_sets.jsonl");
    write_factual_sets(&path, &records)?;
    println!(
        "corrupted {} prompts x 4 dimensions via {} -> {:?}",
        records.len(),
        client.tag(),
        path
    );
    Ok(())
}
