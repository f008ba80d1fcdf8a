//! `eval`: metric reports over a stored dataset or live BoN runs.
//!
//! Kinds:
//! - `consistency`: Recall@1 caption-selection curve over steps
//! - `delta`: per-step mean score by oracle rank with best-worst gap
//! - `bon`: cost/alignment table over live toy BoN runs
//! - `range-grid`: scorers x inference-range oracle grid

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use latent_align::bon::{run_bon_with_workers, BoNPlan, GatewayScorer};
use latent_align::corruption::read_factual_sets;
use latent_align::error::{Error, Result};
use latent_align::eval::{
    bon_alignment_eval, consistency_curve, delta_curve, range_grid, render_bon_table,
    render_consistency_report, render_delta_report, render_range_grid, CorpusRef, OracleAdapter,
};
use latent_align::scoring::EncoderGateway;
use latent_align::store::{DatasetManifest, StepRange};
use latent_align::toy::{GatewayOracle, ToyDenoiser, ToyDualEncoder, ToyWorld};
use serde::{Deserialize, Serialize};

use super::bon::PlanShape;
use crate::common::{build_backend_world, load_gateway, load_projection, resolve_prompts, Context};

#[derive(clap::Args)]
pub struct Args {
    /// Report kind override: consistency, delta, bon or range-grid.
    #[arg(long)]
    kind: Option<String>,
    /// Dataset root override.
    #[arg(long)]
    dataset_root: Option<PathBuf>,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub label: String,
    pub path: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub kind: String,
    pub dataset_root: PathBuf,
    pub factual_sets: Option<PathBuf>,
    pub gateway: String,
    pub world_salt: u64,
    pub noise_scale: f64,
    pub projection_config: Option<PathBuf>,
    /// Steps evaluated; empty means every step stored on the first sample.
    pub steps: Vec<u32>,
    pub images_per_prompt: usize,
    /// Extra scorer rows for the range grid; missing files are skipped
    /// and reported.
    pub checkpoints: Vec<CheckpointRef>,
    pub eval_ranges: Vec<(u32, u32)>,
    /// "toy-judge" or a checkpoint path used as the judging gateway.
    pub oracle: String,
    // bon-kind knobs
    pub t_total: u32,
    pub plans: Vec<PlanShape>,
    pub seed: u64,
    pub prompts_file: Option<PathBuf>,
    pub n_prompts: usize,
    pub prompt_offset: usize,
    pub jitter_base: f64,
    pub jitter_spread: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            kind: "consistency".into(),
            dataset_root: PathBuf::from("runs/latest/dataset"),
            factual_sets: None,
            gateway: "toy-pretrained".into(),
            world_salt: 7,
            noise_scale: 1.0,
            projection_config: None,
            steps: Vec::new(),
            images_per_prompt: 4,
            checkpoints: Vec::new(),
            eval_ranges: vec![(2, 5), (8, 10)],
            oracle: "toy-judge".into(),
            t_total: 50,
            plans: vec![
                PlanShape {
                    n: 6,
                    stop_step: 20,
                    keep: 1,
                },
                PlanShape {
                    n: 6,
                    stop_step: 30,
                    keep: 1,
                },
                PlanShape {
                    n: 6,
                    stop_step: 50,
                    keep: 1,
                },
            ],
            seed: 0,
            prompts_file: None,
            n_prompts: 8,
            prompt_offset: 0,
            jitter_base: 0.2,
            jitter_spread: 0.8,
        }
    }
}

fn build_oracle(spec: &str, world: &ToyWorld) -> Result<GatewayOracle<ToyDualEncoder>> {
    if spec == "toy-judge" {
        return Ok(GatewayOracle::new(world.judge_encoder()));
    }
    Ok(GatewayOracle::new(ToyDualEncoder::load(
        std::path::Path::new(spec),
    )?))
}

fn default_steps(manifest: &DatasetManifest, configured: &[u32]) -> Vec<u32> {
    if !configured.is_empty() {
        return configured.to_vec();
    }
    manifest
        .entries
        .first()
        .map(|e| e.step_set.clone())
        .unwrap_or_default()
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut config: Config = ctx.load_config()?;
    if let Some(kind) = args.kind {
        config.kind = kind;
    }
    if let Some(root) = args.dataset_root {
        config.dataset_root = root;
    }
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    ctx.write_snapshot("eval", &config)?;
    std::fs::create_dir_all(&ctx.output_dir)?;

    let world = build_backend_world("toy", config.world_salt, config.noise_scale)?;
    let projection = load_projection(config.projection_config.as_deref())?;

    match config.kind.as_str() {
        "consistency" | "delta" | "range-grid" => {
            let manifest = DatasetManifest::load(&config.dataset_root.join("manifest.jsonl"))?;
            if manifest.entries.is_empty() {
                // empty eval set: empty report, success
                std::fs::write(ctx.out("report.txt"), "# empty evaluation set\n")?;
                println!("empty evaluation set; wrote empty report");
                return Ok(());
            }
            let corpus = CorpusRef {
                root: &config.dataset_root,
                manifest: &manifest,
            };
            let gateway = load_gateway(&config.gateway, &world)?;
            let steps = default_steps(&manifest, &config.steps);
            match config.kind.as_str() {
                "consistency" => {
                    let sets_path = config.factual_sets.clone().ok_or_else(|| {
                        Error::Config("consistency eval needs factual_sets".into())
                    })?;
                    let by_prompt: BTreeMap<String, latent_align::corruption::FactualSet> =
                        read_factual_sets(&sets_path)?
                            .iter()
                            .map(|r| Ok((r.original.clone(), r.to_set()?)))
                            .collect::<Result<_>>()?;
                    // key factual sets by sample via the sample's prompt
                    let mut sets = BTreeMap::new();
                    for entry in &manifest.entries {
                        if let Some(set) = by_prompt.get(&entry.prompt) {
                            sets.insert(entry.sample_id.clone(), set.clone());
                        }
                    }
                    let curve = consistency_curve(
                        &gateway,
                        corpus,
                        &projection,
                        &sets,
                        &steps,
                        ctx.workers,
                    )?;
                    std::fs::write(ctx.out("report.txt"), render_consistency_report(&curve))?;
                    std::fs::write(
                        ctx.out("consistency.json"),
                        serde_json::to_string_pretty(&curve)?,
                    )?;
                    println!(
                        "consistency curve over {} steps -> {:?}",
                        curve.steps.len(),
                        ctx.out("report.txt")
                    );
                }
                "delta" => {
                    let oracle = build_oracle(&config.oracle, &world)?;
                    let curve = delta_curve(
                        &gateway,
                        corpus,
                        &projection,
                        &oracle,
                        config.images_per_prompt,
                        &steps,
                        ctx.workers,
                    )?;
                    std::fs::write(ctx.out("report.txt"), render_delta_report(&curve))?;
                    std::fs::write(ctx.out("delta.json"), serde_json::to_string_pretty(&curve)?)?;
                    println!(
                        "delta curve: {} prompts evaluated, {} excluded -> {:?}",
                        curve.prompts_evaluated,
                        curve.prompts_excluded,
                        ctx.out("report.txt")
                    );
                }
                _ => {
                    let oracle = build_oracle(&config.oracle, &world)?;
                    // missing checkpoint files: skip the row, report it
                    let mut loaded: Vec<(String, ToyDualEncoder)> = Vec::new();
                    for ckpt in &config.checkpoints {
                        match ToyDualEncoder::load(&ckpt.path) {
                            Ok(encoder) => loaded.push((ckpt.label.clone(), encoder)),
                            Err(_) => eprintln!(
                                "checkpoint {:?} missing; row {:?} skipped",
                                ckpt.path, ckpt.label
                            ),
                        }
                    }
                    let rows: Vec<(String, &dyn EncoderGateway)> = loaded
                        .iter()
                        .map(|(l, e)| (l.clone(), e as &dyn EncoderGateway))
                        .collect();
                    let ranges: Vec<StepRange> = config
                        .eval_ranges
                        .iter()
                        .map(|&(lo, hi)| StepRange::new(lo, hi))
                        .collect();
                    let grid = range_grid(
                        &gateway,
                        &rows,
                        corpus,
                        &projection,
                        &ranges,
                        &oracle,
                        config.images_per_prompt,
                        ctx.workers,
                    )?;
                    std::fs::write(ctx.out("report.txt"), render_range_grid(&grid))?;
                    std::fs::write(
                        ctx.out("range_grid.json"),
                        serde_json::to_string_pretty(&grid)?,
                    )?;
                    println!(
                        "range grid {}x{} -> {:?}",
                        grid.row_labels.len(),
                        grid.col_labels.len(),
                        ctx.out("report.txt")
                    );
                }
            }
        }
        "bon" => {
            let prompts = resolve_prompts(
                config.prompts_file.as_deref(),
                config.n_prompts,
                config.prompt_offset,
            )?;
            let mut backend = ToyDenoiser::new(
                Arc::new(build_backend_world(
                    "toy",
                    config.world_salt,
                    config.noise_scale,
                )?),
                config.t_total,
            );
            backend.jitter_base = config.jitter_base;
            backend.jitter_spread = config.jitter_spread;
            let gateway = load_gateway(&config.gateway, &world)?;
            let scorer = GatewayScorer {
                gateway: &gateway,
                projection,
            };
            let oracle = build_oracle(&config.oracle, &world)?;
            let mut runs = Vec::new();
            for shape in &config.plans {
                let seeds: Vec<u64> = (0..shape.n as u64)
                    .map(|i| config.seed.wrapping_add(i))
                    .collect();
                let plan = BoNPlan::new(shape.n, shape.stop_step, shape.keep, seeds)?;
                for prompt in &prompts {
                    runs.push(
                        run_bon_with_workers(&plan, prompt, &backend, &scorer, ctx.workers)
                            .map_err(|f| f.error)?,
                    );
                }
            }
            let table = bon_alignment_eval(&runs, &oracle)?;
            std::fs::write(ctx.out("report.txt"), render_bon_table(&table))?;
            std::fs::write(
                ctx.out("bon_table.json"),
                serde_json::to_string_pretty(&table)?,
            )?;
            println!(
                "bon table: {} rows over {} runs (oracle {}) -> {:?}",
                table.rows.len(),
                runs.len(),
                oracle.backend_tag(),
                ctx.out("report.txt")
            );
        }
        other => {
            return Err(Error::Config(format!(
                "unknown eval kind {other:?}; expected consistency, delta, bon or range-grid"
            )))
        }
    }
    Ok(())
}
