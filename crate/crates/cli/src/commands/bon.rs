//! `bon`: Best-of-N generation with early pruning, or a cost/selection
//! sweep over several plans.

use std::path::PathBuf;
use std::sync::Arc;

use latent_align::bon::{
    cost_of, records_from_run, run_bon_with_workers, sweep, write_bon_records, BoNPlan,
    GatewayScorer,
};
use latent_align::error::Result;
use latent_align::toy::ToyDenoiser;
use serde::{Deserialize, Serialize};

use crate::common::{build_backend_world, load_gateway, load_projection, resolve_prompts, Context};

#[derive(clap::Args)]
pub struct Args {
    /// Candidate count override.
    #[arg(long)]
    n: Option<usize>,
    /// Pruning step override.
    #[arg(long)]
    stop_step: Option<u32>,
    /// Total denoising iterations override.
    #[arg(long)]
    t_total: Option<u32>,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct PlanShape {
    pub n: usize,
    pub stop_step: u32,
    #[serde(default = "default_keep")]
    pub keep: usize,
}

fn default_keep() -> usize {
    1
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub backend: String,
    pub world_salt: u64,
    pub noise_scale: f64,
    pub t_total: u32,
    pub gateway: String,
    pub projection_config: Option<PathBuf>,
    pub n: usize,
    pub stop_step: u32,
    pub keep: usize,
    pub score_window: u32,
    pub seed: u64,
    /// Explicit candidate seeds; generated from `seed` when empty.
    pub seeds: Vec<u64>,
    pub prompts_file: Option<PathBuf>,
    pub n_prompts: usize,
    pub prompt_offset: usize,
    /// When set, evaluates every plan shape over shared trajectories
    /// instead of a single live run per prompt.
    pub sweep: Option<Vec<PlanShape>>,
    pub jitter_base: f64,
    pub jitter_spread: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            world_salt: 7,
            noise_scale: 1.0,
            t_total: 50,
            gateway: "toy-pretrained".into(),
            projection_config: None,
            n: 6,
            stop_step: 20,
            keep: 1,
            score_window: 1,
            seed: 0,
            seeds: Vec::new(),
            prompts_file: None,
            n_prompts: 1,
            prompt_offset: 0,
            sweep: None,
            jitter_base: 0.2,
            jitter_spread: 0.8,
        }
    }
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut config: Config = ctx.load_config()?;
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(stop) = args.stop_step {
        config.stop_step = stop;
    }
    if let Some(t) = args.t_total {
        config.t_total = t;
    }
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    ctx.write_snapshot("bon", &config)?;

    let world = Arc::new(build_backend_world(
        &config.backend,
        config.world_salt,
        config.noise_scale,
    )?);
    let mut backend = ToyDenoiser::new(Arc::clone(&world), config.t_total);
    backend.jitter_base = config.jitter_base;
    backend.jitter_spread = config.jitter_spread;
    let gateway = load_gateway(&config.gateway, &world)?;
    let projection = load_projection(config.projection_config.as_deref())?;
    let scorer = GatewayScorer {
        gateway: &gateway,
        projection,
    };
    let prompts = resolve_prompts(
        config.prompts_file.as_deref(),
        config.n_prompts,
        config.prompt_offset,
    )?;

    let seeds_for = |n: usize| -> Vec<u64> {
        if config.seeds.len() >= n {
            config.seeds[..n].to_vec()
        } else {
            (0..n as u64).map(|i| config.seed.wrapping_add(i)).collect()
        }
    };

    if let Some(shapes) = &config.sweep {
        let plans: Vec<BoNPlan> = shapes
            .iter()
            .map(|s| {
                let mut plan = BoNPlan::new(s.n, s.stop_step, s.keep, seeds_for(s.n))?;
                plan.score_window = config.score_window;
                plan.scorer_tag = config.gateway.clone();
                Ok(plan)
            })
            .collect::<Result<_>>()?;
        let rows = sweep(&plans, &prompts, &backend, &scorer)?;
        let path = ctx.out("bon_frontier.jsonl");
        let mut out = String::new();
        println!("stop_step\tn\tkeep\tcost");
        for row in &rows {
            println!("{}\t{}\t{}\t{}", row.stop_step, row.n, row.keep, row.cost);
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        std::fs::write(&path, out)?;
        println!(
            "frontier table ({} rows, sorted by cost) -> {path:?}",
            rows.len()
        );
        return Ok(());
    }

    let mut plan = BoNPlan::new(config.n, config.stop_step, config.keep, seeds_for(config.n))?;
    plan.score_window = config.score_window;
    plan.scorer_tag = config.gateway.clone();

    let mut records = Vec::new();
    let mut total_cost = 0u64;
    for (i, prompt) in prompts.iter().enumerate() {
        let run = run_bon_with_workers(&plan, prompt, &backend, &scorer, ctx.workers).map_err(
            |failure| {
                eprintln!(
                    "backend failed after {} iterations were spent",
                    failure.partial_ledger.total
                );
                failure.error
            },
        )?;
        total_cost += run.ledger.total;
        records.extend(records_from_run(&format!("p{i:04}"), &run));
        println!(
            "prompt {i}: selected seed {} (candidate {}) at ledger cost {}",
            run.selected_seed, run.selected_index, run.ledger.total
        );
    }
    let path = ctx.out("bon_records.jsonl");
    write_bon_records(&path, &records)?;
    let per_prompt = cost_of(config.n, config.stop_step, config.t_total, config.keep)?;
    println!(
        "plan n={} stop_step={} keep={} T={}: cost {} per prompt ({} total over {} prompts) -> {:?}",
        config.n,
        config.stop_step,
        config.keep,
        config.t_total,
        per_prompt,
        total_cost,
        prompts.len(),
        path
    );
    Ok(())
}
