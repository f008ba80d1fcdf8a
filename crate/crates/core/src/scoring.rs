//! Twin-tower encoder gateway and alignment scores.
//!
//! A gateway pairs a text tower and an image tower emitting L2-normalized
//! vectors in a shared space. `s_final` scores a prompt against a decoded
//! image; `s_latent` scores it against a mid-generation latent by first
//! projecting the latent to an RGB preview. By construction the two agree
//! exactly on the preview image, and tests pin that down rather than assume
//! it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::preview::{latent_to_rgb, LatentProjection};
use crate::store::LatentFrame;
use crate::tensor::RgbImage;

pub const UNIT_NORM_TOL: f64 = 1e-5;
pub const SCORE_EPS: f64 = 1e-6;

/// A unit-norm embedding from either tower.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Wraps a vector that must already be unit-norm to within `1e-5`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = math::l2_norm(&values);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Argument(format!(
                "embedding norm {norm} deviates from 1 beyond {UNIT_NORM_TOL}"
            )));
        }
        Ok(Self { values })
    }

    /// Normalizes an arbitrary finite vector onto the unit sphere.
    pub fn from_unnormalized(values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("embedding contains NaN or Inf".into()));
        }
        Ok(Self {
            values: math::normalized(values),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Cosine similarity; embeddings are unit vectors so this is the dot
    /// product.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        math::dot(&self.values, &other.values)
    }
}

/// Which point of the generation a score refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreStep {
    /// After `step` completed denoising iterations.
    Latent(u32),
    /// On the decoded final image.
    Final,
}

/// A cosine alignment score in `[-1, 1]` tagged with its generation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub value: f64,
    pub step: ScoreStep,
}

impl AlignmentScore {
    pub fn new(value: f64, step: ScoreStep) -> Result<Self> {
        if !value.is_finite() || value.abs() > 1.0 + SCORE_EPS {
            return Err(Error::Data(format!(
                "alignment score {value} outside [-1, 1]"
            )));
        }
        Ok(Self { value, step })
    }
}

/// Resize and normalization applied to images before the image tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRecipe {
    /// Square side length the image is resized to.
    pub input_size: usize,
    /// Per-channel mean subtracted after resize.
    pub mean: [f32; 3],
    /// Per-channel std divided after mean subtraction.
    pub std: [f32; 3],
    /// Resize kernel; only bilinear is implemented.
    pub resize: ResizeMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizeMode {
    #[serde(rename = "bilinear")]
    Bilinear,
}

impl PreprocessRecipe {
    pub fn apply(&self, image: &RgbImage) -> RgbImage {
        let mut out = image.resize_bilinear(self.input_size, self.input_size);
        let plane = self.input_size * self.input_size;
        let data = out.data_mut();
        for c in 0..3 {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Declared thread-safety of a gateway's inference calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatewayConcurrency {
    /// Read-only inference may run from any number of threads.
    ConcurrentSafe,
    /// Calls must be serialized; the scoring layer wraps such gateways in
    /// a lock before fanning out work.
    SingleThreaded,
}

/// The twin-tower contract: both towers emit unit vectors of `embed_dim`.
pub trait EncoderGateway: Send + Sync {
    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector>;
    fn encode_image(&self, image: &RgbImage) -> Result<EmbeddingVector>;
    fn embed_dim(&self) -> usize;
    fn checkpoint_tag(&self) -> &str;
    fn preprocess(&self) -> &PreprocessRecipe;
    fn concurrency(&self) -> GatewayConcurrency {
        GatewayConcurrency::ConcurrentSafe
    }
}

/// Serializes every call to a gateway that declares itself
/// single-threaded, so the parallel metric paths can treat any gateway as
/// concurrent-safe. [`serialize_if_needed`] wraps only when required.
pub struct SerializedGateway<'a> {
    inner: &'a dyn EncoderGateway,
    lock: std::sync::Mutex<()>,
}

impl<'a> SerializedGateway<'a> {
    pub fn new(inner: &'a dyn EncoderGateway) -> Self {
        Self {
            inner,
            lock: std::sync::Mutex::new(()),
        }
    }
}

impl EncoderGateway for SerializedGateway<'_> {
    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        let _guard = self.lock.lock().unwrap();
        self.inner.encode_text(prompt)
    }

    fn encode_image(&self, image: &RgbImage) -> Result<EmbeddingVector> {
        let _guard = self.lock.lock().unwrap();
        self.inner.encode_image(image)
    }

    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    fn checkpoint_tag(&self) -> &str {
        self.inner.checkpoint_tag()
    }

    fn preprocess(&self) -> &PreprocessRecipe {
        self.inner.preprocess()
    }
}

/// Encodes a prompt, enforcing the gateway's output contract.
pub fn encode_text(gateway: &dyn EncoderGateway, prompt: &str) -> Result<EmbeddingVector> {
    if prompt.is_empty() {
        return Err(Error::Argument("prompt must be nonempty".into()));
    }
    let emb = gateway.encode_text(prompt)?;
    check_output(gateway, &emb, "text tower")?;
    Ok(emb)
}

/// Encodes an image, enforcing the gateway's output contract.
pub fn encode_image(gateway: &dyn EncoderGateway, image: &RgbImage) -> Result<EmbeddingVector> {
    let emb = gateway.encode_image(image)?;
    check_output(gateway, &emb, "image tower")?;
    Ok(emb)
}

fn check_output(gateway: &dyn EncoderGateway, emb: &EmbeddingVector, tower: &str) -> Result<()> {
    if emb.dim() != gateway.embed_dim() {
        return Err(Error::Gateway(format!(
            "{tower} emitted dim {} but gateway declares {}",
            emb.dim(),
            gateway.embed_dim()
        )));
    }
    let norm = math::l2_norm(emb.values());
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Gateway(format!(
            "{tower} emitted non-unit embedding (norm {norm})"
        )));
    }
    Ok(())
}

/// Alignment of a prompt with a decoded image: the dot product of the two
/// unit embeddings.
pub fn s_final(
    gateway: &dyn EncoderGateway,
    image: &RgbImage,
    prompt: &str,
) -> Result<AlignmentScore> {
    let t = encode_text(gateway, prompt)?;
    let v = encode_image(gateway, image)?;
    AlignmentScore::new(t.cosine(&v), ScoreStep::Final)
}

/// Alignment of a prompt with a latent frame: `s_final` applied to the
/// frame's RGB preview, tagged with the frame's step.
pub fn s_latent(
    gateway: &dyn EncoderGateway,
    frame: &LatentFrame,
    proj: &LatentProjection,
    prompt: &str,
) -> Result<AlignmentScore> {
    let preview = latent_to_rgb(frame, proj)?;
    let score = s_final(gateway, &preview, prompt)?;
    AlignmentScore::new(score.value, ScoreStep::Latent(frame.step))
}

/// Candidate indices ordered by descending score; ties broken by the
/// lowest original index so rankings are reproducible.
pub fn rank_candidates(scores: &[AlignmentScore]) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Argument(
            "rank_candidates needs at least one score".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps original index order among equal values
    order.sort_by(|&i, &j| scores[j].value.total_cmp(&scores[i].value));
    Ok(order)
}

/// Gateway configuration as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub checkpoint_tag: String,
    pub embed_dim: usize,
    pub input_size: usize,
    pub normalization: NormalizationConfig,
    pub preprocess: ResizeMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl GatewayConfig {
    pub fn recipe(&self) -> PreprocessRecipe {
        PreprocessRecipe {
            input_size: self.input_size,
            mean: self.normalization.mean,
            std: self.normalization.std,
            resize: self.preprocess,
        }
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::Config(format!("gateway config not found: {path:?}")))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("gateway config: {e}")))
    }
}

/// One line of a score dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub step: ScoreStep,
    pub prompt_id: String,
    pub score: f64,
}

pub fn write_score_records(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_score_records(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::NotFound(format!("score records {path:?}")))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Chw;
    use proptest::prelude::*;

    /// Planted-embedding gateway: text and image lookups come from fixed
    /// rules, so every expected score is hand-computable.
    struct FixtureGateway {
        recipe: PreprocessRecipe,
    }

    impl FixtureGateway {
        fn new() -> Self {
            Self {
                recipe: PreprocessRecipe {
                    input_size: 2,
                    mean: [0.0; 3],
                    std: [1.0; 3],
                    resize: ResizeMode::Bilinear,
                },
            }
        }
    }

    impl EncoderGateway for FixtureGateway {
        fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector> {
            // axis-aligned vectors keyed by first byte
            let mut v = vec![0.0; 4];
            v[(prompt.as_bytes()[0] as usize) % 4] = 1.0;
            EmbeddingVector::new(v)
        }

        fn encode_image(&self, image: &RgbImage) -> Result<EmbeddingVector> {
            // mean pixel selects an axis
            let m = image.channel_means()[0];
            let mut v = vec![0.0; 4];
            v[(m * 4.0).min(3.0).max(0.0) as usize] = 1.0;
            EmbeddingVector::new(v)
        }

        fn embed_dim(&self) -> usize {
            4
        }

        fn checkpoint_tag(&self) -> &str {
            "fixture"
        }

        fn preprocess(&self) -> &PreprocessRecipe {
            &self.recipe
        }
    }

    fn score(v: f64) -> AlignmentScore {
        AlignmentScore::new(v, ScoreStep::Final).unwrap()
    }

    #[test]
    fn embedding_rejects_non_unit() {
        assert!(EmbeddingVector::new(vec![1.0, 1.0]).is_err());
        assert!(EmbeddingVector::new(vec![0.6, 0.8]).is_ok());
    }

    #[test]
    fn encode_text_contract() {
        let g = FixtureGateway::new();
        let e = encode_text(&g, "a dog").unwrap();
        assert_eq!(e.dim(), 4);
        assert!((math::l2_norm(e.values()) - 1.0).abs() < 1e-12);
        // determinism
        assert_eq!(encode_text(&g, "a dog").unwrap(), e);
        // distinct prompts land on distinct axes here
        let f = encode_text(&g, "blue car").unwrap();
        assert!(e.cosine(&f) < 1.0 - 1e-9);
        assert!((e.cosine(&e) - 1.0).abs() < 1e-12);
        // empty prompt rejected
        assert!(matches!(encode_text(&g, ""), Err(Error::Argument(_))));
    }

    #[test]
    fn s_final_matches_hand_computed_dot() {
        let g = FixtureGateway::new();
        // image with mean 0 -> axis 0; prompt starting with byte 'a' (97) -> axis 1
        let img_axis0 = Chw::new(3, 2, 2, vec![0.0; 12]).unwrap();
        let p_axis1 = "a dog"; // 97 % 4 == 1
        let s = s_final(&g, &img_axis0, p_axis1).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(s.step, ScoreStep::Final);

        let p_axis0 = "dog"; // 'd' = 100, 100 % 4 == 0
        let s = s_final(&g, &img_axis0, p_axis0).unwrap();
        assert!((s.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn s_latent_equals_s_final_on_preview_exactly() {
        use crate::preview::{default_projection, latent_to_rgb};
        use crate::store::DType;
        let g = FixtureGateway::new();
        let proj = default_projection().unwrap();
        let frame = LatentFrame::new(
            21,
            Chw::new(4, 4, 4, (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap(),
            DType::F32,
        )
        .unwrap();
        let sl = s_latent(&g, &frame, &proj, "a dog").unwrap();
        let preview = latent_to_rgb(&frame, &proj).unwrap();
        let sf = s_final(&g, &preview, "a dog").unwrap();
        assert_eq!(sl.value.to_bits(), sf.value.to_bits());
        assert_eq!(sl.step, ScoreStep::Latent(21));
    }

    #[test]
    fn rank_candidates_basic_and_ties() {
        let order = rank_candidates(&[score(0.2), score(0.9), score(0.5)]).unwrap();
        assert_eq!(order, vec![1, 2, 0]);
        let order = rank_candidates(&[score(0.5), score(0.5)]).unwrap();
        assert_eq!(order, vec![0, 1]);
        assert!(rank_candidates(&[]).is_err());
    }

    proptest! {
        #[test]
        fn rank_matches_brute_force_stable_sort(values in prop::collection::vec(-1.0f64..1.0, 1..30)) {
            let scores: Vec<AlignmentScore> = values.iter().map(|&v| score(v)).collect();
            let got = rank_candidates(&scores).unwrap();
            // brute-force oracle: enumerate pairs, verify a valid descending
            // order with ties by index
            let mut expected: Vec<usize> = (0..values.len()).collect();
            expected.sort_by(|&i, &j| {
                values[j].partial_cmp(&values[i]).unwrap().then(i.cmp(&j))
            });
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn rank_invariant_under_increasing_transform(
            values in prop::collection::vec(-0.99f64..0.99, 1..20),
            scale in 0.1f64..3.0,
            shift in -0.5f64..0.5,
        ) {
            let scores: Vec<AlignmentScore> = values.iter().map(|&v| score(v)).collect();
            // tanh(scale*v + shift) is strictly increasing and stays in [-1,1]
            let transformed: Vec<AlignmentScore> = values
                .iter()
                .map(|&v| score((scale * v + shift).tanh()))
                .collect();
            prop_assert_eq!(
                rank_candidates(&scores).unwrap(),
                rank_candidates(&transformed).unwrap()
            );
        }
    }

    #[test]
    fn gateway_config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = GatewayConfig {
            checkpoint_tag: "clip-l14".into(),
            embed_dim: 768,
            input_size: 224,
            normalization: NormalizationConfig {
                mean: [0.481, 0.457, 0.408],
                std: [0.268, 0.261, 0.275],
            },
            preprocess: ResizeMode::Bilinear,
        };
        let path = dir.path().join("gateway.json");
        std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        let loaded = GatewayConfig::load_file(&path).unwrap();
        assert_eq!(loaded, config);
        let recipe = loaded.recipe();
        assert_eq!(recipe.input_size, 224);
        assert!(matches!(
            GatewayConfig::load_file(&dir.path().join("missing.json")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn score_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            ScoreRecord {
                sample_id: "s1".into(),
                step: ScoreStep::Latent(20),
                prompt_id: "p0".into(),
                score: 0.25,
            },
            ScoreRecord {
                sample_id: "s1".into(),
                step: ScoreStep::Final,
                prompt_id: "p0".into(),
                score: 0.5,
            },
        ];
        let path = dir.path().join("scores.jsonl");
        write_score_records(&path, &records).unwrap();
        assert_eq!(read_score_records(&path).unwrap(), records);
    }
}
