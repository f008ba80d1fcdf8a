//! Deterministic toy backends for desk-scale runs and tests.
//!
//! The toy world is a closed little universe where ground truth is known:
//! prompts come from a slot template, a pseudo-denoiser interpolates from
//! seeded noise toward a target latent rendered from the prompt's text
//! embedding, and a dual encoder with linear heads over fixed features can
//! actually be trained. Everything is seeded and reproducible, so tests
//! can assert exact behavior without any model checkpoint.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bon::{CandidateScorer, CandidateState, DenoiserBackend};
use crate::corruption::{ChatClient, ErrorType, FactualSet};
use crate::error::{Error, Result};
use crate::eval::OracleAdapter;
use crate::math::{self, fnv1a64};
use crate::preview::{project_latent, LatentProjection};
use crate::scoring::{
    s_final, AlignmentScore, EmbeddingVector, EncoderGateway, PreprocessRecipe, ResizeMode,
    ScoreStep,
};
use crate::store::{
    build_manifest, write_image_blob, write_trajectory, DType, DatasetManifest, LatentFrame,
    LatentTrajectory, SubsetTag,
};
use crate::tensor::{Chw, RgbImage};
use crate::trainer::TrainableGateway;

pub const COUNTS: [&str; 4] = ["one", "two", "three", "four"];
pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "black", "white", "purple", "orange",
];
pub const SUBJECTS: [&str; 10] = [
    "apple", "dog", "cat", "bird", "car", "house", "tree", "boat", "cup", "lamp",
];
pub const BACKGROUNDS: [&str; 8] = [
    "forest", "beach", "kitchen", "street", "field", "garden", "mountain", "harbor",
];

/// The `index`-th prompt of the template universe
/// `"{count} {color} {subject} in the {background}"`.
///
/// Indices are scrambled through a bijection on the 2560 distinct
/// combinations so that even a short prefix of the universe varies every
/// slot; otherwise small corpora would share one background word and
/// in-batch contrastive training would never see that slot discriminated.
pub fn template_prompt(index: usize) -> String {
    const UNIVERSE: usize = 2560; // 4 * 8 * 10 * 8
                                  // 1597 is coprime with 2560, so this permutes each block of 2560
    let scrambled = (index % UNIVERSE) * 1597 % UNIVERSE;
    let count = COUNTS[scrambled % COUNTS.len()];
    let color = COLORS[(scrambled / COUNTS.len()) % COLORS.len()];
    let subject = SUBJECTS[(scrambled / (COUNTS.len() * COLORS.len())) % SUBJECTS.len()];
    let background = BACKGROUNDS
        [(scrambled / (COUNTS.len() * COLORS.len() * SUBJECTS.len())) % BACKGROUNDS.len()];
    format!("{count} {color} {subject} in the {background}")
}

/// `n` distinct template prompts starting at `offset`. Offsets keep train
/// and eval prompt sets disjoint.
pub fn template_prompts(n: usize, offset: usize) -> Vec<String> {
    (0..n).map(|i| template_prompt(offset + i)).collect()
}

fn vocab_for(error_type: ErrorType) -> &'static [&'static str] {
    match error_type {
        ErrorType::Color => &COLORS,
        ErrorType::Count => &COUNTS,
        ErrorType::Background => &BACKGROUNDS,
        ErrorType::MainSubject => &SUBJECTS,
    }
}

/// Replaces the first word of the prompt that belongs to the dimension's
/// vocabulary with the next vocabulary entry. Returns None when the prompt
/// has no word in that vocabulary.
pub fn swap_slot(prompt: &str, error_type: ErrorType) -> Option<String> {
    let vocab = vocab_for(error_type);
    let mut words: Vec<&str> = prompt.split(' ').collect();
    for w in words.iter_mut() {
        if let Some(pos) = vocab.iter().position(|v| v == w) {
            *w = vocab[(pos + 1) % vocab.len()];
            return Some(words.join(" "));
        }
    }
    None
}

/// A factual set built by deterministic slot swapping; only works on
/// prompts that carry all four slots (template prompts do).
pub fn slot_swap_factual_set(prompt: &str) -> Result<FactualSet> {
    let mut corruptions = BTreeMap::new();
    for et in ErrorType::ALL {
        let swapped = swap_slot(prompt, et)
            .ok_or_else(|| Error::Data(format!("prompt {prompt:?} has no {et} slot to corrupt")))?;
        corruptions.insert(et, swapped);
    }
    FactualSet::new(prompt.to_string(), corruptions)
}

/// Offline stand-in for the corruption LLM: parses the instruction it is
/// given and applies the matching slot swap. `fail_on` makes one dimension
/// echo the prompt back unchanged, which validation rejects.
pub struct MockChatClient {
    pub fail_on: Option<ErrorType>,
}

impl MockChatClient {
    pub fn new() -> Self {
        Self { fail_on: None }
    }

    pub fn failing_on(error_type: ErrorType) -> Self {
        Self {
            fail_on: Some(error_type),
        }
    }

    fn parse(instruction: &str) -> Option<(ErrorType, String)> {
        let prompt = instruction.rsplit("PROMPT: ").next()?.to_string();
        let tail = instruction.split("Change the ").nth(2).or_else(|| {
            // the first "Change the" in the template is the instruction line
            instruction.split("Change the ").nth(1)
        })?;
        let label = tail.split(" in the following PROMPT:").next()?;
        let et = ErrorType::ALL
            .into_iter()
            .find(|et| et.label() == label.trim())?;
        Some((et, prompt))
    }
}

impl Default for MockChatClient {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatClient for MockChatClient {
    fn complete(&self, instruction: &str) -> Result<String> {
        let (et, prompt) = Self::parse(instruction)
            .ok_or_else(|| Error::Transport("mock client could not parse instruction".into()))?;
        if self.fail_on == Some(et) {
            return Ok(prompt);
        }
        Ok(swap_slot(&prompt, et).unwrap_or(prompt))
    }

    fn tag(&self) -> &str {
        "mock-slot-swap"
    }
}

fn seeded_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    // uniform entries scaled to unit variance
    let s = 3.0f64.sqrt();
    (0..rows * cols)
        .map(|_| rng.gen_range(-1.0..1.0) * s)
        .collect()
}

fn matvec(mat: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| math::dot(&mat[r * cols..(r + 1) * cols], v))
        .collect()
}

/// Parameters and seeded matrices of a toy universe. A fixed `salt` pins
/// every derived quantity: text embeddings, render patterns, noise.
pub struct ToyWorld {
    pub salt: u64,
    pub embed_dim: usize,
    pub text_feat_dim: usize,
    pub latent_size: usize,
    pub input_size: usize,
    /// Multiplier on the pure-noise component of early frames.
    pub noise_scale: f64,
    /// Relative weight of the fine (per-pixel) render pattern against the
    /// smooth coarse pattern.
    pub fine_amp: f64,
    pub projection: LatentProjection,
    text_head0: Vec<f64>,
    render_coarse: Vec<f64>,
    render_fine: Vec<f64>,
}

impl ToyWorld {
    pub fn new(salt: u64) -> Self {
        let embed_dim = 32;
        let text_feat_dim = 128;
        let latent_size = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(salt ^ 0x746f_7977_6f72_6c64);
        let text_head0 = seeded_matrix(&mut rng, embed_dim, text_feat_dim);
        let render_coarse = seeded_matrix(&mut rng, 4 * 2 * 2, embed_dim);
        let render_fine = seeded_matrix(&mut rng, 4 * latent_size * latent_size, embed_dim);
        Self {
            salt,
            embed_dim,
            text_feat_dim,
            latent_size,
            input_size: latent_size,
            noise_scale: 1.0,
            fine_amp: 0.35,
            projection: crate::preview::default_projection()
                .expect("embedded projection config parses"),
            text_head0,
            render_coarse,
            render_fine,
        }
    }

    pub fn with_noise_scale(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    pub fn recipe(&self) -> PreprocessRecipe {
        PreprocessRecipe {
            input_size: self.input_size,
            mean: [0.5; 3],
            std: [0.5; 3],
            resize: ResizeMode::Bilinear,
        }
    }

    /// Hashed bag-of-words features.
    pub fn text_features(&self, prompt: &str) -> Vec<f64> {
        let mut feats = vec![0.0; self.text_feat_dim];
        for word in prompt.split_whitespace() {
            let lower = word.to_lowercase();
            let bucket = (fnv1a64(lower.as_bytes()) ^ self.salt) as usize % self.text_feat_dim;
            feats[bucket] += 1.0;
        }
        feats
    }

    pub fn text_embed(&self, prompt: &str) -> Vec<f64> {
        let feats = self.text_features(prompt);
        math::normalized(&matvec(
            &self.text_head0,
            self.embed_dim,
            self.text_feat_dim,
            &feats,
        ))
    }

    /// The clean target latent for (prompt, seed): a smooth pattern plus a
    /// fine pattern, both linear in a direction that is the prompt's text
    /// embedding deflected by a seed-specific jitter. Larger jitter means a
    /// worse-aligned candidate.
    pub fn render_target(&self, prompt: &str, seed: u64, jitter: f64) -> Chw {
        let t = self.text_embed(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(
            fnv1a64(prompt.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.salt,
        );
        let q: Vec<f64> = (0..self.embed_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let q = math::normalized(&q);
        let dir: Vec<f64> = t.iter().zip(&q).map(|(a, b)| a + jitter * b).collect();
        let dir = math::normalized(&dir);

        let s = self.latent_size;
        let coarse_vals = matvec(&self.render_coarse, 16, self.embed_dim, &dir);
        let coarse_small = Chw::new(4, 2, 2, coarse_vals.iter().map(|&v| v as f32).collect())
            .expect("coarse shape");
        let coarse = coarse_small.resize_bilinear(s, s);
        let fine_vals = matvec(&self.render_fine, 4 * s * s, self.embed_dim, &dir);
        let data: Vec<f32> = coarse
            .data()
            .iter()
            .zip(&fine_vals)
            .map(|(&c, &f)| c + (self.fine_amp * f) as f32)
            .collect();
        Chw::new(4, s, s, data).expect("target shape")
    }

    /// Seeded pure-noise latent, the state at step 0.
    pub fn render_noise(&self, prompt: &str, seed: u64) -> Chw {
        let s = self.latent_size;
        let mut rng = ChaCha8Rng::seed_from_u64(
            fnv1a64(prompt.as_bytes())
                .wrapping_add(seed)
                .wrapping_mul(0x2545_f491_4f6c_dd1d)
                ^ self.salt,
        );
        let data: Vec<f32> = (0..4 * s * s)
            .map(|_| (rng.gen_range(-1.0f64..1.0) * 3.0f64.sqrt()) as f32)
            .collect();
        Chw::new(4, s, s, data).expect("noise shape")
    }

    /// The latent after `step` of `t_total` iterations: linear
    /// interpolation from scaled noise to the clean target.
    pub fn frame_data(&self, target: &Chw, noise: &Chw, step: u32, t_total: u32) -> Chw {
        let gamma = step as f64 / t_total as f64;
        let data: Vec<f32> = noise
            .data()
            .iter()
            .zip(target.data())
            .map(|(&e, &z)| ((1.0 - gamma) * self.noise_scale * e as f64 + gamma * z as f64) as f32)
            .collect();
        Chw::new(4, self.latent_size, self.latent_size, data).expect("frame shape")
    }

    /// Fits the "pretrained" image head by ridge regression from clean
    /// target previews to text embeddings over a probe prompt set. This is
    /// the frozen baseline: good on clean images, never shown noise.
    pub fn pretrained_encoder(&self) -> ToyDualEncoder {
        self.fit_encoder("toy-pretrained", 5000, 320)
    }

    /// An independently fitted judge used as the deterministic oracle.
    pub fn judge_encoder(&self) -> ToyDualEncoder {
        self.fit_encoder("toy-judge", 9000, 400)
    }

    fn fit_encoder(&self, tag: &str, probe_offset: usize, probes: usize) -> ToyDualEncoder {
        let mut encoder = ToyDualEncoder::blank(self, tag);
        let f = encoder.image_feat_dim;
        let d = self.embed_dim;

        let mut xtx = vec![vec![0.0; f]; f];
        let mut xty = vec![vec![0.0; f]; d];
        for k in 0..probes {
            let prompt = template_prompt(probe_offset + k);
            let target = self.render_target(&prompt, k as u64, 0.0);
            let preview = project_latent(&target, &self.projection).expect("preview");
            let feats = encoder.image_features_from(&preview);
            let t = self.text_embed(&prompt);
            for i in 0..f {
                if feats[i] == 0.0 {
                    continue;
                }
                for j in i..f {
                    xtx[i][j] += feats[i] * feats[j];
                }
                for (dd, row) in xty.iter_mut().enumerate() {
                    row[i] += feats[i] * t[dd];
                }
            }
        }
        for i in 0..f {
            for j in 0..i {
                xtx[i][j] = xtx[j][i];
            }
        }
        let trace: f64 = (0..f).map(|i| xtx[i][i]).sum();
        let lambda = 1e-4 * trace / f as f64 + 1e-9;
        for (i, row) in xtx.iter_mut().enumerate() {
            row[i] += lambda;
        }
        let solutions = math::solve_spd(&xtx, &xty).expect("ridge system is SPD");
        for (dd, sol) in solutions.iter().enumerate() {
            encoder.image_head[dd * f..(dd + 1) * f].copy_from_slice(sol);
        }
        encoder
    }
}

/// The toy twin-tower encoder: hashed bag-of-words text features and
/// multi-resolution pixel features, each behind a trainable linear head
/// followed by L2 normalization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyDualEncoder {
    pub tag: String,
    pub embed_dim: usize,
    pub text_feat_dim: usize,
    pub salt: u64,
    pub recipe: PreprocessRecipe,
    pub pool_grid: usize,
    pub image_feat_dim: usize,
    pub image_head: Vec<f64>,
    pub text_head: Vec<f64>,
    pub log_logit_scale: f64,
}

impl ToyDualEncoder {
    fn blank(world: &ToyWorld, tag: &str) -> Self {
        let pool_grid = 2;
        let s = world.input_size;
        let image_feat_dim = 3 * s * s + 3 * pool_grid * pool_grid + 3;
        Self {
            tag: tag.to_string(),
            embed_dim: world.embed_dim,
            text_feat_dim: world.text_feat_dim,
            salt: world.salt,
            recipe: world.recipe(),
            pool_grid,
            image_feat_dim,
            image_head: vec![0.0; world.embed_dim * image_feat_dim],
            text_head: world.text_head0.clone(),
            log_logit_scale: (1.0 / 0.07f64).ln(),
        }
    }

    /// Fine pixels, block-pooled pixels and channel means of the
    /// preprocessed image.
    fn image_features_from(&self, image: &RgbImage) -> Vec<f64> {
        let x = self.recipe.apply(image);
        let s = self.recipe.input_size;
        let mut feats = Vec::with_capacity(self.image_feat_dim);
        feats.extend(x.data().iter().map(|&v| v as f64));
        let g = self.pool_grid;
        let block = s / g;
        for c in 0..3 {
            for by in 0..g {
                for bx in 0..g {
                    let mut acc = 0.0;
                    for y in 0..block {
                        for xq in 0..block {
                            acc += x.get(c, by * block + y, bx * block + xq) as f64;
                        }
                    }
                    feats.push(acc / (block * block) as f64);
                }
            }
        }
        feats.extend(x.channel_means());
        feats
    }

    fn text_features_from(&self, prompt: &str) -> Vec<f64> {
        let mut feats = vec![0.0; self.text_feat_dim];
        for word in prompt.split_whitespace() {
            let lower = word.to_lowercase();
            let bucket = (fnv1a64(lower.as_bytes()) ^ self.salt) as usize % self.text_feat_dim;
            feats[bucket] += 1.0;
        }
        feats
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::NotFound(format!("checkpoint {path:?}")))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl EncoderGateway for ToyDualEncoder {
    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        let feats = self.text_features_from(prompt);
        let v = matvec(&self.text_head, self.embed_dim, self.text_feat_dim, &feats);
        EmbeddingVector::new(math::normalized(&v))
    }

    fn encode_image(&self, image: &RgbImage) -> Result<EmbeddingVector> {
        let feats = self.image_features_from(image);
        let v = matvec(
            &self.image_head,
            self.embed_dim,
            self.image_feat_dim,
            &feats,
        );
        EmbeddingVector::new(math::normalized(&v))
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn checkpoint_tag(&self) -> &str {
        &self.tag
    }

    fn preprocess(&self) -> &PreprocessRecipe {
        &self.recipe
    }
}

impl TrainableGateway for ToyDualEncoder {
    fn image_feature_dim(&self) -> usize {
        self.image_feat_dim
    }

    fn text_feature_dim(&self) -> usize {
        self.text_feat_dim
    }

    fn image_features(&self, image: &RgbImage) -> Result<Vec<f64>> {
        Ok(self.image_features_from(image))
    }

    fn text_features(&self, prompt: &str) -> Result<Vec<f64>> {
        Ok(self.text_features_from(prompt))
    }

    fn image_head(&self) -> &[f64] {
        &self.image_head
    }

    fn image_head_mut(&mut self) -> &mut [f64] {
        &mut self.image_head
    }

    fn text_head(&self) -> &[f64] {
        &self.text_head
    }

    fn text_head_mut(&mut self) -> &mut [f64] {
        &mut self.text_head
    }

    fn log_logit_scale(&self) -> f64 {
        self.log_logit_scale
    }

    fn set_log_logit_scale(&mut self, v: f64) {
        self.log_logit_scale = v;
    }

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.save(path)
    }
}

/// The interpolating pseudo-denoiser. Deterministic in (prompt, seed):
/// candidates move from seeded noise to the seeded target over `t_total`
/// steps; `finalize` decodes the target through the world's projection.
pub struct ToyDenoiser {
    pub world: Arc<ToyWorld>,
    pub t_total: u32,
    /// Baseline candidate jitter.
    pub jitter_base: f64,
    /// Extra jitter scaled by a per-seed uniform draw, spreading candidate
    /// quality within a Best-of-N pool.
    pub jitter_spread: f64,
}

impl ToyDenoiser {
    pub fn new(world: Arc<ToyWorld>, t_total: u32) -> Self {
        Self {
            world,
            t_total,
            jitter_base: 0.2,
            jitter_spread: 0.8,
        }
    }

    fn jitter_for(&self, prompt: &str, seed: u64) -> f64 {
        let h = fnv1a64(prompt.as_bytes()) ^ seed.wrapping_mul(0x517c_c1b7_2722_0a95);
        let u = (h % 100_000) as f64 / 100_000.0;
        self.jitter_base + self.jitter_spread * u
    }
}

struct ToyCandidate {
    world: Arc<ToyWorld>,
    target: Chw,
    noise: Chw,
    step: u32,
    t_total: u32,
}

impl CandidateState for ToyCandidate {
    fn step(&mut self) -> Result<LatentFrame> {
        if self.step >= self.t_total {
            return Err(Error::Gateway(format!(
                "toy denoiser stepped past T_total {}",
                self.t_total
            )));
        }
        self.step += 1;
        let data = self
            .world
            .frame_data(&self.target, &self.noise, self.step, self.t_total);
        LatentFrame::new(self.step, data, DType::F32)
    }

    fn steps_completed(&self) -> u32 {
        self.step
    }

    fn finalize(self: Box<Self>) -> Result<RgbImage> {
        if self.step < self.t_total {
            return Err(Error::Gateway(format!(
                "finalize called after {} of {} steps",
                self.step, self.t_total
            )));
        }
        project_latent(&self.target, &self.world.projection)
    }
}

impl DenoiserBackend for ToyDenoiser {
    fn t_total(&self) -> u32 {
        self.t_total
    }

    fn init(&self, prompt: &str, seed: u64) -> Result<Box<dyn CandidateState>> {
        let jitter = self.jitter_for(prompt, seed);
        Ok(Box::new(ToyCandidate {
            target: self.world.render_target(prompt, seed, jitter),
            noise: self.world.render_noise(prompt, seed),
            world: Arc::clone(&self.world),
            step: 0,
            t_total: self.t_total,
        }))
    }
}

/// Planted per-candidate score curves for exercising pruning logic with
/// exact control over orderings.
#[derive(Clone, Debug)]
pub struct ScoreScript {
    pub t_total: u32,
    /// Per seed: the score at steps `1..=t_total`; the final-image score
    /// equals the last entry.
    pub curves: BTreeMap<u64, Vec<f64>>,
}

impl ScoreScript {
    /// Order-preserving curves: at every step the candidate ordering
    /// equals the final ordering.
    pub fn monotone(seeds: &[u64], t_total: u32, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut qualities: Vec<f64> = (0..seeds.len())
            .map(|i| (i as f64 + rng.gen_range(0.05..0.95)) / seeds.len() as f64)
            .collect();
        // shuffle which seed gets which quality
        for i in (1..qualities.len()).rev() {
            qualities.swap(i, rng.gen_range(0..=i));
        }
        let curves = seeds
            .iter()
            .zip(&qualities)
            .map(|(&seed, &q)| {
                let curve = (1..=t_total)
                    .map(|t| (t as f64 / t_total as f64) * (0.2 + 0.75 * q))
                    .collect();
                (seed, curve)
            })
            .collect();
        Self { t_total, curves }
    }

    /// Curves whose early ordering differs from the final ordering.
    pub fn crossing(seeds: &[u64], t_total: u32, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let curves = seeds
            .iter()
            .map(|&seed| {
                let start = rng.gen_range(-0.5..0.5);
                let end = rng.gen_range(-0.5..0.9);
                let curve = (1..=t_total)
                    .map(|t| {
                        let g = t as f64 / t_total as f64;
                        start + (end - start) * g
                    })
                    .collect();
                (seed, curve)
            })
            .collect();
        Self { t_total, curves }
    }

    /// Monotone trend plus per-step wiggle.
    pub fn noisy(seeds: &[u64], t_total: u32, rng_seed: u64, wiggle: f64) -> Self {
        let base = Self::monotone(seeds, t_total, rng_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0xabcd);
        let curves = base
            .curves
            .into_iter()
            .map(|(seed, curve)| {
                let jittered = curve
                    .into_iter()
                    .map(|v| (v + rng.gen_range(-wiggle..wiggle)).clamp(-0.99, 0.99))
                    .collect();
                (seed, jittered)
            })
            .collect();
        Self { t_total, curves }
    }

    /// The candidate (by position in `seeds`) winning a full generation.
    pub fn full_bon_winner(&self, seeds: &[u64]) -> usize {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (i, seed) in seeds.iter().enumerate() {
            let s = *self.curves[seed].last().expect("nonempty curve");
            if s > best_score {
                best_score = s;
                best = i;
            }
        }
        best
    }
}

/// Emits frames that tag the candidate seed and nothing else; paired with
/// [`ScriptedScorer`] which reads the tags and looks scores up.
pub struct ScriptedDenoiser {
    pub script: Arc<ScoreScript>,
}

struct ScriptedCandidate {
    seed: u64,
    step: u32,
    t_total: u32,
}

fn tagged_latent(seed: u64, step: u32) -> Chw {
    let mut data = vec![0.0f32; 4 * 2 * 2];
    data[0] = seed as f32;
    data[1] = step as f32;
    Chw::new(4, 2, 2, data).expect("tag latent")
}

fn tagged_image(seed: u64) -> RgbImage {
    let mut data = vec![0.0f32; 3 * 2 * 2];
    data[0] = seed as f32;
    Chw::new(3, 2, 2, data).expect("tag image")
}

impl CandidateState for ScriptedCandidate {
    fn step(&mut self) -> Result<LatentFrame> {
        if self.step >= self.t_total {
            return Err(Error::Gateway(
                "scripted denoiser stepped past T_total".into(),
            ));
        }
        self.step += 1;
        LatentFrame::new(self.step, tagged_latent(self.seed, self.step), DType::F32)
    }

    fn steps_completed(&self) -> u32 {
        self.step
    }

    fn finalize(self: Box<Self>) -> Result<RgbImage> {
        if self.step < self.t_total {
            return Err(Error::Gateway("scripted finalize before completion".into()));
        }
        Ok(tagged_image(self.seed))
    }
}

impl DenoiserBackend for ScriptedDenoiser {
    fn t_total(&self) -> u32 {
        self.script.t_total
    }

    fn init(&self, _prompt: &str, seed: u64) -> Result<Box<dyn CandidateState>> {
        if !self.script.curves.contains_key(&seed) {
            return Err(Error::Argument(format!(
                "no scripted curve for seed {seed}"
            )));
        }
        Ok(Box::new(ScriptedCandidate {
            seed,
            step: 0,
            t_total: self.script.t_total,
        }))
    }
}

/// Looks scores up from the script by the tag a [`ScriptedDenoiser`] put
/// into each frame.
pub struct ScriptedScorer {
    pub script: Arc<ScoreScript>,
}

impl CandidateScorer for ScriptedScorer {
    fn score_frame(&self, frame: &LatentFrame, _prompt: &str) -> Result<AlignmentScore> {
        let seed = frame.data.data()[0].round() as u64;
        let step = frame.step;
        let curve = self
            .script
            .curves
            .get(&seed)
            .ok_or_else(|| Error::Argument(format!("no curve for seed {seed}")))?;
        let value = curve
            .get(step.saturating_sub(1) as usize)
            .copied()
            .ok_or_else(|| Error::Argument(format!("no scripted score at step {step}")))?;
        AlignmentScore::new(value, ScoreStep::Latent(step))
    }

    fn score_image(&self, image: &RgbImage, _prompt: &str) -> Result<AlignmentScore> {
        let seed = image.data()[0].round() as u64;
        let curve = self
            .script
            .curves
            .get(&seed)
            .ok_or_else(|| Error::Argument(format!("no curve for seed {seed}")))?;
        AlignmentScore::new(*curve.last().expect("nonempty curve"), ScoreStep::Final)
    }

    fn tag(&self) -> &str {
        "scripted"
    }
}

/// Deterministic alignment judge: cosine similarity under a fixed gateway
/// mapped into `[0, 1]`.
pub struct GatewayOracle<G: EncoderGateway> {
    pub gateway: G,
    tag: String,
}

impl<G: EncoderGateway> GatewayOracle<G> {
    pub fn new(gateway: G) -> Self {
        let tag = format!("gateway-oracle:{}", gateway.checkpoint_tag());
        Self { gateway, tag }
    }
}

impl<G: EncoderGateway> OracleAdapter for GatewayOracle<G> {
    fn score(&self, image: &RgbImage, prompt: &str) -> Result<f64> {
        let s = s_final(&self.gateway, image, prompt)?;
        Ok(((1.0 + s.value) / 2.0).clamp(0.0, 1.0))
    }

    fn backend_tag(&self) -> &str {
        &self.tag
    }
}

/// Knobs for synthesizing a stored toy corpus.
#[derive(Clone, Debug)]
pub struct ToyCorpusSpec {
    pub n_prompts: usize,
    pub images_per_prompt: usize,
    pub t_total: u32,
    pub seed: u64,
    /// Jitter of the best candidate per prompt.
    pub jitter_base: f64,
    /// Added jitter per candidate rank; > 0 plants a known quality order
    /// (candidate 0 best).
    pub jitter_step: f64,
    pub dtype: DType,
    pub subset_tag: SubsetTag,
    /// Offset into the template prompt universe.
    pub prompt_offset: usize,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_prompts: 50,
            images_per_prompt: 1,
            t_total: 10,
            seed: 0,
            jitter_base: 0.15,
            jitter_step: 0.0,
            dtype: DType::F32,
            subset_tag: SubsetTag::Custom,
            prompt_offset: 0,
        }
    }
}

/// Synthesizes trajectories with frames at every step `1..=t_total` plus a
/// decoded final image, writes them under `root`, and returns the saved
/// manifest. Prompts come from the template universe at `prompt_offset`.
pub fn build_toy_corpus(
    world: &ToyWorld,
    spec: &ToyCorpusSpec,
    root: &Path,
) -> Result<DatasetManifest> {
    let prompts = template_prompts(spec.n_prompts, spec.prompt_offset);
    build_toy_corpus_with_prompts(world, spec, &prompts, root)
}

/// Same synthesis over caller-supplied prompts; `spec.n_prompts` is
/// ignored in favor of the list length.
pub fn build_toy_corpus_with_prompts(
    world: &ToyWorld,
    spec: &ToyCorpusSpec,
    prompts: &[String],
    root: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(root)?;
    for (pi, prompt) in prompts.iter().enumerate() {
        for ci in 0..spec.images_per_prompt {
            let seed = spec
                .seed
                .wrapping_add((pi * spec.images_per_prompt + ci) as u64);
            let jitter = spec.jitter_base + spec.jitter_step * ci as f64;
            let target = world.render_target(prompt, seed, jitter);
            let noise = world.render_noise(prompt, seed);
            let mut frames = Vec::with_capacity(spec.t_total as usize);
            for step in 1..=spec.t_total {
                let mut data = world.frame_data(&target, &noise, step, spec.t_total);
                for v in data.data_mut() {
                    *v = spec.dtype.quantize(*v);
                }
                frames.push(LatentFrame::new(step, data, spec.dtype)?);
            }
            let sample_id = format!("p{:04}_c{:02}", spec.prompt_offset + pi, ci);
            let trajectory = LatentTrajectory {
                sample_id: sample_id.clone(),
                prompt: prompt.clone(),
                seed,
                t_total: spec.t_total,
                frames,
                final_image_ref: Some("final.img".into()),
            };
            write_trajectory(&trajectory, root)?;
            let image = project_latent(&target, &world.projection)?;
            write_image_blob(&root.join(&sample_id).join("final.img"), &image)?;
        }
    }
    let manifest = build_manifest(root, spec.subset_tag)?;
    manifest.save(&root.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Slot-swap factual sets for every sample in a manifest.
pub fn toy_factual_sets(manifest: &DatasetManifest) -> Result<BTreeMap<String, FactualSet>> {
    manifest
        .entries
        .iter()
        .map(|e| Ok((e.sample_id.clone(), slot_swap_factual_set(&e.prompt)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::PromptCorruptor;
    use crate::scoring::encode_text;

    #[test]
    fn template_prompts_are_distinct_and_sloted() {
        let prompts = template_prompts(64, 0);
        let unique: std::collections::BTreeSet<_> = prompts.iter().collect();
        assert_eq!(unique.len(), 64);
        for p in &prompts {
            for et in ErrorType::ALL {
                assert!(swap_slot(p, et).is_some(), "{p} missing {et}");
            }
        }
    }

    #[test]
    fn swap_slot_changes_exactly_one_word() {
        let p = "two red apple in the forest";
        let swapped = swap_slot(p, ErrorType::Count).unwrap();
        assert_eq!(swapped, "three red apple in the forest");
        let swapped = swap_slot(p, ErrorType::MainSubject).unwrap();
        assert_eq!(swapped, "two red dog in the forest");
        let swapped = swap_slot(p, ErrorType::Background).unwrap();
        assert_eq!(swapped, "two red apple in the beach");
        let swapped = swap_slot(p, ErrorType::Color).unwrap();
        assert_eq!(swapped, "two green apple in the forest");
    }

    #[test]
    fn mock_client_builds_full_factual_sets() {
        let client = MockChatClient::new();
        let corruptor = PromptCorruptor::new(&client, 2);
        let set = corruptor
            .build_factual_set("two red apple in the forest")
            .unwrap();
        assert_eq!(set.corruptions.len(), 4);
        assert_eq!(
            set.corruptions[&ErrorType::Count],
            "three red apple in the forest"
        );
    }

    #[test]
    fn mock_client_failure_names_the_dimension() {
        let client = MockChatClient::failing_on(ErrorType::Count);
        let corruptor = PromptCorruptor::new(&client, 1);
        match corruptor.build_factual_set("two red apple in the forest") {
            Err(Error::Corruption { failed, .. }) => {
                assert_eq!(failed, vec!["count".to_string()]);
            }
            other => panic!("expected Corruption, got {other:?}"),
        }
    }

    #[test]
    fn text_embedding_is_deterministic_unit() {
        let world = ToyWorld::new(7);
        let a = world.text_embed("two red apple in the forest");
        let b = world.text_embed("two red apple in the forest");
        assert_eq!(a, b);
        assert!((math::l2_norm(&a) - 1.0).abs() < 1e-12);
        // one-word change keeps the embedding close but distinct
        let c = world.text_embed("three red apple in the forest");
        let cos = math::dot(&a, &c);
        assert!(cos > 0.3 && cos < 0.999, "cos {cos}");
    }

    #[test]
    fn pretrained_encoder_aligns_clean_targets() {
        let world = ToyWorld::new(7);
        let encoder = world.pretrained_encoder();
        let mut self_cos = 0.0;
        let mut cross_cos: f64 = 0.0;
        let n = 20;
        for i in 0..n {
            let prompt = template_prompt(100 + i);
            let target = world.render_target(&prompt, i as u64, 0.0);
            let preview = project_latent(&target, &world.projection).unwrap();
            let img = encoder.encode_image(&preview).unwrap();
            let txt = encode_text(&encoder, &prompt).unwrap();
            self_cos += img.cosine(&txt) / n as f64;
            let other = encode_text(&encoder, &template_prompt(100 + (i + 1) % n)).unwrap();
            cross_cos += img.cosine(&other) / n as f64;
        }
        assert!(self_cos > 0.85, "self-alignment {self_cos}");
        assert!(
            self_cos - cross_cos > 0.1,
            "self {self_cos} vs cross {cross_cos}"
        );
    }

    #[test]
    fn toy_denoiser_contract() {
        let world = Arc::new(ToyWorld::new(3));
        let denoiser = ToyDenoiser::new(Arc::clone(&world), 10);
        let mut state = denoiser.init("two red apple in the forest", 9).unwrap();
        for t in 1..=10u32 {
            let frame = state.step().unwrap();
            assert_eq!(frame.step, t);
            assert_eq!(frame.data.shape(), (4, 8, 8));
        }
        assert!(state.step().is_err(), "stepping past T_total must fail");
        let image = state.finalize().unwrap();
        assert_eq!(image.shape(), (3, 8, 8));
        // determinism across re-init
        let mut again = denoiser.init("two red apple in the forest", 9).unwrap();
        let f1 = again.step().unwrap();
        let mut third = denoiser.init("two red apple in the forest", 9).unwrap();
        let f2 = third.step().unwrap();
        assert_eq!(f1.data.data(), f2.data.data());
    }

    #[test]
    fn finalize_before_completion_fails() {
        let world = Arc::new(ToyWorld::new(3));
        let denoiser = ToyDenoiser::new(world, 5);
        let mut state = denoiser.init("p", 0).unwrap();
        state.step().unwrap();
        assert!(state.finalize().is_err());
    }

    #[test]
    fn scripted_monotone_preserves_order_at_every_step() {
        let seeds: Vec<u64> = (0..6).collect();
        let script = ScoreScript::monotone(&seeds, 10, 42);
        let final_order: Vec<u64> = {
            let mut s = seeds.clone();
            s.sort_by(|a, b| {
                script.curves[b]
                    .last()
                    .unwrap()
                    .total_cmp(script.curves[a].last().unwrap())
            });
            s
        };
        for t in 0..10 {
            let mut order = seeds.clone();
            order.sort_by(|a, b| script.curves[b][t].total_cmp(&script.curves[a][t]));
            assert_eq!(order, final_order, "order differs at step {}", t + 1);
        }
    }

    #[test]
    fn corpus_builder_writes_manifest_and_finals() {
        let dir = tempfile::tempdir().unwrap();
        let world = ToyWorld::new(5);
        let spec = ToyCorpusSpec {
            n_prompts: 4,
            images_per_prompt: 2,
            t_total: 6,
            ..Default::default()
        };
        let manifest = build_toy_corpus(&world, &spec, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 8);
        for e in &manifest.entries {
            assert_eq!(e.n_frames, 6);
            assert!(dir.path().join(&e.sample_id).join("final.img").exists());
        }
        let sets = toy_factual_sets(&manifest).unwrap();
        assert_eq!(sets.len(), 8);
        // deterministic rebuild
        let dir2 = tempfile::tempdir().unwrap();
        let manifest2 = build_toy_corpus(&world, &spec, dir2.path()).unwrap();
        assert_eq!(manifest.entries, manifest2.entries);
    }

    #[test]
    fn checkpoint_round_trip_preserves_gateway() {
        let dir = tempfile::tempdir().unwrap();
        let world = ToyWorld::new(5);
        let encoder = world.pretrained_encoder();
        let path = dir.path().join("ckpt.json");
        encoder.save(&path).unwrap();
        let loaded = ToyDualEncoder::load(&path).unwrap();
        assert_eq!(loaded.image_head, encoder.image_head);
        let t1 = encoder.encode_text("two red apple in the forest").unwrap();
        let t2 = loaded.encode_text("two red apple in the forest").unwrap();
        assert_eq!(t1.values(), t2.values());
    }
}
