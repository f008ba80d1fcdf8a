//! Noise-robust fine-tuning of the image tower.
//!
//! The trainer draws batches of (latent preview, prompt) pairs from a fixed
//! step interval of stored trajectories and minimizes the symmetric InfoNCE
//! objective over in-batch negatives: both directions of cross-entropy over
//! the scaled cosine-similarity matrix, diagonal as targets. Only the image
//! tower's parameters move by default; the text tower stays frozen so the
//! shared text space is preserved.
//!
//! Trainable backends expose each tower as a fixed featurizer followed by a
//! linear head; the trainer owns the backward pass through the head, the
//! normalization, and the loss. Full-backbone fine-tuning belongs to the
//! heavyweight external backends and is out of scope here.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::preview::{latent_to_rgb, LatentProjection};
use crate::scoring::EncoderGateway;
use crate::store::{read_trajectory, DatasetManifest, StepRange};
use crate::tensor::RgbImage;

const EMB_TOL: f64 = 1e-3;

/// Which towers receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainedTowers {
    #[serde(rename = "image_only")]
    ImageOnly,
    #[serde(rename = "image_and_text")]
    ImageAndText,
}

/// How `corpus_size` is counted. The ambiguity is whether a "corpus of N
/// latents" means N sampled (frame, prompt) pairs or N source trajectories;
/// both readings are supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusUnit {
    /// An epoch draws `corpus_size` (frame, prompt) pairs: batches of
    /// distinct samples, resampled with replacement across batches.
    #[serde(rename = "pairs")]
    Pairs,
    /// An epoch visits `min(corpus_size, eligible)` trajectories exactly
    /// once each, one frame drawn per visit.
    #[serde(rename = "trajectories")]
    Trajectories,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Fraction of total optimizer steps spent in linear warmup.
    pub warmup_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[serde(rename = "cosine-annealing")]
    CosineAnnealing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Inclusive step interval the training frames are drawn from.
    pub latent_range: StepRange,
    pub learning_rate: f64,
    pub schedule: ScheduleConfig,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub corpus_size: usize,
    pub corpus_unit: CorpusUnit,
    pub temperature_init: f64,
    pub trained_towers: TrainedTowers,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The reference fine-tuning recipe: lr 5.7e-5, cosine annealing with
    /// warmup ratio 0.1, weight decay 0.1, batch 128, 10 epochs over a
    /// 50,000-latent corpus drawn from steps 20-29.
    fn default() -> Self {
        Self {
            latent_range: StepRange::new(20, 29),
            learning_rate: 5.7e-5,
            schedule: ScheduleConfig {
                kind: ScheduleKind::CosineAnnealing,
                warmup_ratio: 0.1,
            },
            weight_decay: 0.1,
            batch_size: 128,
            epochs: 10,
            corpus_size: 50_000,
            corpus_unit: CorpusUnit::Pairs,
            temperature_init: 0.07,
            trained_towers: TrainedTowers::ImageOnly,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, t_total_hint: Option<u32>) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Argument(
                "batch_size must be >= 2: the contrastive loss needs at least one negative".into(),
            ));
        }
        if self.latent_range.is_empty() {
            return Err(Error::Argument("latent_range is empty".into()));
        }
        if let Some(t) = t_total_hint {
            if self.latent_range.hi > t {
                return Err(Error::Argument(format!(
                    "latent_range {:?} exceeds T_total {t}",
                    self.latent_range
                )));
            }
        }
        if self.learning_rate <= 0.0 || self.temperature_init <= 0.0 {
            return Err(Error::Argument(
                "learning_rate and temperature_init must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.schedule.warmup_ratio) {
            return Err(Error::Argument("warmup_ratio must be in [0, 1]".into()));
        }
        if self.epochs == 0 || self.corpus_size == 0 {
            return Err(Error::Argument(
                "epochs and corpus_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A batch of previews and their prompts; no two items share a sample_id so
/// a prompt never appears as its own negative.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub previews: Vec<RgbImage>,
    pub prompts: Vec<String>,
    pub steps: Vec<u32>,
    pub sample_ids: Vec<String>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.previews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.previews.is_empty()
    }
}

/// Where the training data lives.
pub struct TrainInputs<'a> {
    pub root: &'a Path,
    pub manifest: &'a DatasetManifest,
    pub projection: &'a LatentProjection,
}

/// Draws one batch: `batch_size` distinct samples, one frame each with the
/// step uniform over `latent_range` intersected with the sample's stored
/// steps.
pub fn sample_training_batch(
    inputs: &TrainInputs,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainingBatch> {
    let eligible = eligible_entries(inputs.manifest, config.latent_range);
    if eligible.is_empty() {
        return Err(Error::Data(format!(
            "no samples with frames in step range {}..={}",
            config.latent_range.lo, config.latent_range.hi
        )));
    }
    let take = config.batch_size.min(eligible.len());
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(rng);
    build_batch(inputs, config, &order[..take], &eligible, rng)
}

fn eligible_entries(
    manifest: &DatasetManifest,
    range: StepRange,
) -> Vec<(String, String, Vec<u32>)> {
    manifest
        .entries
        .iter()
        .filter_map(|e| {
            let steps: Vec<u32> = e
                .step_set
                .iter()
                .copied()
                .filter(|&s| range.contains(s))
                .collect();
            if steps.is_empty() {
                None
            } else {
                Some((e.sample_id.clone(), e.prompt.clone(), steps))
            }
        })
        .collect()
}

fn build_batch(
    inputs: &TrainInputs,
    _config: &TrainConfig,
    chosen: &[usize],
    eligible: &[(String, String, Vec<u32>)],
    rng: &mut impl Rng,
) -> Result<TrainingBatch> {
    let mut batch = TrainingBatch {
        previews: Vec::with_capacity(chosen.len()),
        prompts: Vec::with_capacity(chosen.len()),
        steps: Vec::with_capacity(chosen.len()),
        sample_ids: Vec::with_capacity(chosen.len()),
    };
    for &idx in chosen {
        let (sample_id, prompt, steps) = &eligible[idx];
        let step = steps[rng.gen_range(0..steps.len())];
        let traj = read_trajectory(sample_id, inputs.root, Some(StepRange::new(step, step)))?;
        let frame = traj
            .frame_at(step)
            .ok_or_else(|| Error::Data(format!("sample {sample_id}: frame {step} vanished")))?;
        batch
            .previews
            .push(latent_to_rgb(frame, inputs.projection)?);
        batch.prompts.push(prompt.clone());
        batch.steps.push(step);
        batch.sample_ids.push(sample_id.clone());
    }
    Ok(batch)
}

fn check_embeddings(embs: &[Vec<f64>], side: &str) -> Result<()> {
    for (i, e) in embs.iter().enumerate() {
        let n = math::l2_norm(e);
        if !n.is_finite() || (n - 1.0).abs() > EMB_TOL {
            return Err(Error::Argument(format!(
                "{side} embedding {i} has norm {n}, beyond unit tolerance {EMB_TOL}"
            )));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over in-batch negatives.
///
/// `loss = (CE over rows + CE over columns) / 2` of the `B x B` matrix
/// `dot(image_i, text_j) / temperature`, with the diagonal as targets.
pub fn info_nce_loss(
    image_embs: &[Vec<f64>],
    text_embs: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    Ok(info_nce_loss_and_grads(image_embs, text_embs, temperature)?.loss)
}

/// Loss plus analytic gradients with respect to every embedding entry and
/// the temperature. The gradients treat the entries as free variables of
/// the written formula, which is what a finite-difference probe perturbs.
pub struct InfoNceGrads {
    pub loss: f64,
    pub grad_image: Vec<Vec<f64>>,
    pub grad_text: Vec<Vec<f64>>,
    pub grad_temperature: f64,
}

pub fn info_nce_loss_and_grads(
    image_embs: &[Vec<f64>],
    text_embs: &[Vec<f64>],
    temperature: f64,
) -> Result<InfoNceGrads> {
    let b = image_embs.len();
    if b < 2 || text_embs.len() != b {
        return Err(Error::Argument(format!(
            "InfoNCE needs matched batches of size >= 2, got {b} and {}",
            text_embs.len()
        )));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_embeddings(image_embs, "image")?;
    check_embeddings(text_embs, "text")?;
    let dim = image_embs[0].len();
    if text_embs[0].len() != dim {
        return Err(Error::Argument("image/text embedding dims differ".into()));
    }

    // logits[i][j] = dot(image_i, text_j) / temperature
    let mut logits = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            logits[i][j] = math::dot(&image_embs[i], &text_embs[j]) / temperature;
        }
    }

    let mut loss = 0.0;
    // dLoss/dlogits accumulated from both directions
    let mut dlogits = vec![vec![0.0; b]; b];

    // rows: image i against all texts
    for i in 0..b {
        let row = &logits[i];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += (z.ln() + m - row[i]) / (2.0 * b as f64);
        for j in 0..b {
            let p = exps[j] / z;
            dlogits[i][j] += (p - if i == j { 1.0 } else { 0.0 }) / (2.0 * b as f64);
        }
    }
    // columns: text j against all images
    for j in 0..b {
        let col: Vec<f64> = (0..b).map(|i| logits[i][j]).collect();
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += (z.ln() + m - col[j]) / (2.0 * b as f64);
        for i in 0..b {
            let p = exps[i] / z;
            dlogits[i][j] += (p - if i == j { 1.0 } else { 0.0 }) / (2.0 * b as f64);
        }
    }

    let mut grad_image = vec![vec![0.0; dim]; b];
    let mut grad_text = vec![vec![0.0; dim]; b];
    let mut grad_temperature = 0.0;
    for i in 0..b {
        for j in 0..b {
            let g = dlogits[i][j] / temperature;
            for k in 0..dim {
                grad_image[i][k] += g * text_embs[j][k];
                grad_text[j][k] += g * image_embs[i][k];
            }
            // logits = dot / temperature, so d logits / d temperature = -logits / temperature
            grad_temperature -= dlogits[i][j] * logits[i][j] / temperature;
        }
    }

    Ok(InfoNceGrads {
        loss,
        grad_image,
        grad_text,
        grad_temperature,
    })
}

/// A gateway whose towers end in trainable linear heads over fixed
/// features: `embedding = normalize(head * features)`.
pub trait TrainableGateway: EncoderGateway {
    fn image_feature_dim(&self) -> usize;
    fn text_feature_dim(&self) -> usize;
    fn image_features(&self, image: &RgbImage) -> Result<Vec<f64>>;
    fn text_features(&self, prompt: &str) -> Result<Vec<f64>>;
    /// Row-major `embed_dim x image_feature_dim`.
    fn image_head(&self) -> &[f64];
    fn image_head_mut(&mut self) -> &mut [f64];
    /// Row-major `embed_dim x text_feature_dim`.
    fn text_head(&self) -> &[f64];
    fn text_head_mut(&mut self) -> &mut [f64];
    fn log_logit_scale(&self) -> f64;
    fn set_log_logit_scale(&mut self, v: f64);
    fn save_checkpoint(&self, path: &Path) -> Result<()>;
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub config_hash: String,
    pub git_hash: String,
    pub corpus_manifest_hash: String,
    pub steps_completed: u64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub log: Vec<TrainLogRecord>,
    pub checkpoint_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub log_path: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_completed: u64,
}

fn cosine_warmup_lr(base_lr: f64, step: u64, total: u64, warmup_ratio: f64) -> f64 {
    let warmup = ((total as f64) * warmup_ratio).round() as u64;
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
}

impl AdamW {
    fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, decay_mask: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut update = mhat / (vhat.sqrt() + self.eps);
            if decay_mask[i] {
                update += self.weight_decay * params[i];
            }
            params[i] -= lr * update;
        }
    }
}

fn git_hash() -> String {
    if let Ok(h) = std::env::var("GIT_COMMIT") {
        return h;
    }
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Runs the fine-tuning loop and writes `checkpoint.json`, its sidecar and
/// `train_log.jsonl` under `out_dir`. Deterministic for a fixed seed with
/// the single-worker data order used here.
pub fn train<G: TrainableGateway>(
    gateway: &mut G,
    inputs: &TrainInputs,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    train_resumed(gateway, inputs, config, out_dir, 0)
}

/// Same as [`train`] but continues the step counter from `start_step`,
/// for resume-from-checkpoint runs.
pub fn train_resumed<G: TrainableGateway>(
    gateway: &mut G,
    inputs: &TrainInputs,
    config: &TrainConfig,
    out_dir: &Path,
    start_step: u64,
) -> Result<TrainReport> {
    config.validate(None)?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let eligible = eligible_entries(inputs.manifest, config.latent_range);
    if eligible.is_empty() {
        return Err(Error::Data(format!(
            "no samples with frames in step range {}..={}",
            config.latent_range.lo, config.latent_range.hi
        )));
    }

    // epoch length in optimizer steps
    let pairs_per_epoch = match config.corpus_unit {
        CorpusUnit::Pairs => config.corpus_size,
        CorpusUnit::Trajectories => config.corpus_size.min(eligible.len()),
    };
    let steps_per_epoch = pairs_per_epoch.div_ceil(config.batch_size).max(1);
    let total_steps = (steps_per_epoch * config.epochs) as u64;

    let train_text = config.trained_towers == TrainedTowers::ImageAndText;
    let img_len = gateway.image_head().len();
    let txt_len = gateway.text_head().len();
    let n_params = img_len + if train_text { txt_len } else { 0 } + 1;

    // parameter vector: image head ++ (text head) ++ log_logit_scale
    let mut opt = AdamW::new(n_params, config.weight_decay);
    let mut decay_mask = vec![true; n_params];
    decay_mask[n_params - 1] = false; // no decay on the temperature

    gateway.set_log_logit_scale((1.0 / config.temperature_init).ln());

    let mut log: Vec<TrainLogRecord> = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut last_good: Option<Vec<f64>> = None;
    let checkpoint_path = out_dir.join("checkpoint.json");
    let sidecar_path = out_dir.join("checkpoint.meta.json");
    let log_path = out_dir.join("train_log.jsonl");

    let embed_dim = gateway.embed_dim();
    let mut step_counter = start_step;

    if config.batch_size.min(eligible.len()) < 2 {
        return Err(Error::Data(
            "fewer than 2 eligible samples; cannot form a contrastive batch".into(),
        ));
    }

    for epoch in 0..config.epochs {
        // Trajectories mode walks a fresh shuffle so every eligible sample
        // is visited at most once per epoch; Pairs mode resamples per batch.
        let epoch_order: Option<Vec<usize>> = match config.corpus_unit {
            CorpusUnit::Pairs => None,
            CorpusUnit::Trajectories => {
                let mut order: Vec<usize> = (0..eligible.len()).collect();
                order.shuffle(&mut rng);
                order.truncate(pairs_per_epoch);
                Some(order)
            }
        };
        for step_in_epoch in 0..steps_per_epoch {
            let batch = {
                let take = config.batch_size.min(eligible.len());
                let chosen: Vec<usize> = match &epoch_order {
                    None => {
                        let mut order: Vec<usize> = (0..eligible.len()).collect();
                        order.shuffle(&mut rng);
                        order[..take].to_vec()
                    }
                    Some(order) => {
                        let start = step_in_epoch * config.batch_size;
                        let end = (start + config.batch_size).min(order.len());
                        if start >= end || end - start < 2 {
                            continue;
                        }
                        order[start..end].to_vec()
                    }
                };
                build_batch(inputs, config, &chosen, &eligible, &mut rng)?
            };

            // forward
            let img_feats: Vec<Vec<f64>> = batch
                .previews
                .iter()
                .map(|p| gateway.image_features(p))
                .collect::<Result<_>>()?;
            let txt_feats: Vec<Vec<f64>> = batch
                .prompts
                .iter()
                .map(|p| gateway.text_features(p))
                .collect::<Result<_>>()?;

            let fi = gateway.image_feature_dim();
            let ft = gateway.text_feature_dim();
            let (img_pre, img_emb) = head_forward(gateway.image_head(), &img_feats, embed_dim, fi);
            let (txt_pre, txt_emb) = head_forward(gateway.text_head(), &txt_feats, embed_dim, ft);

            let log_scale = gateway.log_logit_scale();
            let temperature = (-log_scale).exp();
            // overflowed heads can hide behind normalization; detect them at
            // the pre-activation and abort with the last sane parameters
            let pre_diverged = img_pre
                .iter()
                .chain(txt_pre.iter())
                .any(|v| !math::l2_norm(v).is_finite())
                || !temperature.is_finite();
            let grads = if pre_diverged {
                None
            } else {
                Some(info_nce_loss_and_grads(&img_emb, &txt_emb, temperature)?)
            };

            let loss = grads.as_ref().map(|g| g.loss).unwrap_or(f64::NAN);
            if !loss.is_finite() {
                let ckpt = if let Some(p) = last_good {
                    write_params(gateway, &p, img_len, train_text);
                    gateway.save_checkpoint(&checkpoint_path)?;
                    Some(checkpoint_path.clone())
                } else {
                    None
                };
                write_log(&log_path, &log)?;
                return Err(Error::Divergence {
                    step: step_counter,
                    checkpoint: ckpt,
                });
            }
            let grads = grads.expect("finite loss implies grads");
            if initial_loss.is_nan() {
                initial_loss = loss;
            }
            // current parameters produced a finite loss: they are the
            // last-good snapshot if the coming update blows up
            last_good = Some(read_params(gateway, img_len, train_text));

            // backward through the heads
            let mut grad = vec![0.0; n_params];
            head_backward(
                &grads.grad_image,
                &img_pre,
                &img_emb,
                &img_feats,
                embed_dim,
                fi,
                &mut grad[..img_len],
            );
            if train_text {
                head_backward(
                    &grads.grad_text,
                    &txt_pre,
                    &txt_emb,
                    &txt_feats,
                    embed_dim,
                    ft,
                    &mut grad[img_len..img_len + txt_len],
                );
            }
            // d temperature / d log_scale = -temperature
            grad[n_params - 1] = -grads.grad_temperature * temperature;

            let lr = cosine_warmup_lr(
                config.learning_rate,
                step_counter - start_step,
                total_steps,
                config.schedule.warmup_ratio,
            );

            let mut params = read_params(gateway, img_len, train_text);
            opt.step(&mut params, &grad, lr, &decay_mask);
            write_params(gateway, &params, img_len, train_text);

            step_counter += 1;
            log.push(TrainLogRecord {
                step: step_counter,
                epoch,
                loss,
                lr,
                temperature,
            });
        }
    }

    gateway.save_checkpoint(&checkpoint_path)?;
    write_log(&log_path, &log)?;

    let config_json = serde_json::to_string(config)?;
    let manifest_json = serde_json::to_string(inputs.manifest)?;
    let sidecar = CheckpointSidecar {
        config_hash: format!("{:016x}", crate::math::fnv1a64(config_json.as_bytes())),
        git_hash: git_hash(),
        corpus_manifest_hash: format!("{:016x}", crate::math::fnv1a64(manifest_json.as_bytes())),
        steps_completed: step_counter,
    };
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;

    let final_loss = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(TrainReport {
        log,
        checkpoint_path,
        sidecar_path,
        log_path,
        initial_loss,
        final_loss,
        steps_completed: step_counter,
    })
}

fn write_log(path: &Path, log: &[TrainLogRecord]) -> Result<()> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_params<G: TrainableGateway>(gateway: &G, img_len: usize, train_text: bool) -> Vec<f64> {
    let mut p = Vec::with_capacity(img_len + 1);
    p.extend_from_slice(gateway.image_head());
    if train_text {
        p.extend_from_slice(gateway.text_head());
    }
    p.push(gateway.log_logit_scale());
    p
}

fn write_params<G: TrainableGateway>(
    gateway: &mut G,
    params: &[f64],
    img_len: usize,
    train_text: bool,
) {
    gateway.image_head_mut().copy_from_slice(&params[..img_len]);
    let mut off = img_len;
    if train_text {
        let txt_len = gateway.text_head().len();
        gateway
            .text_head_mut()
            .copy_from_slice(&params[off..off + txt_len]);
        off += txt_len;
    }
    gateway.set_log_logit_scale(params[off]);
}

/// `pre = head * features`, `emb = pre / ||pre||`, per batch item.
fn head_forward(
    head: &[f64],
    feats: &[Vec<f64>],
    embed_dim: usize,
    feat_dim: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut pre = Vec::with_capacity(feats.len());
    let mut emb = Vec::with_capacity(feats.len());
    for f in feats {
        let mut v = vec![0.0; embed_dim];
        for (d, vd) in v.iter_mut().enumerate() {
            *vd = math::dot(&head[d * feat_dim..(d + 1) * feat_dim], f);
        }
        emb.push(math::normalized(&v));
        pre.push(v);
    }
    (pre, emb)
}

/// Accumulates dLoss/dHead given dLoss/dEmbedding, back through the
/// normalization: dv = (I - e e^T) de / ||v||, then dW = dv f^T.
fn head_backward(
    grad_emb: &[Vec<f64>],
    pre: &[Vec<f64>],
    emb: &[Vec<f64>],
    feats: &[Vec<f64>],
    embed_dim: usize,
    feat_dim: usize,
    out: &mut [f64],
) {
    for i in 0..grad_emb.len() {
        let norm = math::l2_norm(&pre[i]).max(1e-12);
        let proj = math::dot(&grad_emb[i], &emb[i]);
        for d in 0..embed_dim {
            let dv = (grad_emb[i][d] - proj * emb[i][d]) / norm;
            if dv == 0.0 {
                continue;
            }
            let row = &mut out[d * feat_dim..(d + 1) * feat_dim];
            for (k, r) in row.iter_mut().enumerate() {
                *r += dv * feats[i][k];
            }
        }
    }
}
