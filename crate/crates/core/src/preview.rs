//! Fixed linear projection from 4-channel latents to RGB-like previews.
//!
//! The projection exists so an image encoder can consume mid-generation
//! latents without running a full decoder: per pixel, a 3x4 affine map
//! followed by clamping and a rescale into `[0, 1]`.
//!
//! Coefficients are config data, not code constants: the defaults ship in
//! `config/latent_projection.json` at the repo root and are embedded at
//! build time. Whether the diffusion backend's latent scaling should be
//! folded in is backend-dependent, so an optional `pre_scale` factor
//! (default 1.0) is applied to the latent before the matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::LatentFrame;
use crate::tensor::{Chw, RgbImage};

const DEFAULT_PROJECTION_JSON: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../config/latent_projection.json"
));

/// The 4-channel-to-RGB affine map with its clamp bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentProjection {
    /// Row-major 3x4 matrix: output channel c = sum_k weights[c][k] * z[k].
    pub weights: [[f64; 4]; 3],
    pub bias: [f64; 3],
    /// Values are clamped to `[lo, hi]` before rescaling to `[0, 1]`.
    /// Non-finite bounds disable both clamp and rescale, leaving the raw
    /// affine map.
    pub output_range: (f64, f64),
    /// Multiplier applied to the latent before the matrix.
    pub pre_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct ProjectionConfig {
    weights: Vec<f64>,
    bias: Vec<f64>,
    clamp: (f64, f64),
    #[serde(default = "default_pre_scale")]
    pre_scale: f64,
}

fn default_pre_scale() -> f64 {
    1.0
}

impl LatentProjection {
    pub fn new(
        weights: [[f64; 4]; 3],
        bias: [f64; 3],
        output_range: (f64, f64),
        pre_scale: f64,
    ) -> Result<Self> {
        let proj = Self {
            weights,
            bias,
            output_range,
            pre_scale,
        };
        proj.validate()?;
        Ok(proj)
    }

    fn validate(&self) -> Result<()> {
        let finite_weights = self
            .weights
            .iter()
            .flatten()
            .chain(self.bias.iter())
            .all(|v| v.is_finite());
        if !finite_weights || !self.pre_scale.is_finite() {
            return Err(Error::Config("projection has non-finite entries".into()));
        }
        let (lo, hi) = self.output_range;
        if !(lo < hi) {
            return Err(Error::Config(format!(
                "projection clamp bounds must satisfy lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    pub fn from_config_str(text: &str) -> Result<Self> {
        let cfg: ProjectionConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid projection config: {e}")))?;
        if cfg.weights.len() != 12 {
            return Err(Error::Config(format!(
                "projection weights must have 12 entries (3x4 row-major), got {}",
                cfg.weights.len()
            )));
        }
        if cfg.bias.len() != 3 {
            return Err(Error::Config(format!(
                "projection bias must have 3 entries, got {}",
                cfg.bias.len()
            )));
        }
        let mut weights = [[0.0; 4]; 3];
        for (i, v) in cfg.weights.iter().enumerate() {
            weights[i / 4][i % 4] = *v;
        }
        let mut bias = [0.0; 3];
        bias.copy_from_slice(&cfg.bias);
        LatentProjection::new(weights, bias, cfg.clamp, cfg.pre_scale)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::Config(format!("projection config not found: {path:?}")))?;
        Self::from_config_str(&text)
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let cfg = ProjectionConfig {
            weights: self.weights.iter().flatten().copied().collect(),
            bias: self.bias.to_vec(),
            clamp: self.output_range,
            pre_scale: self.pre_scale,
        };
        std::fs::write(path, serde_json::to_string_pretty(&cfg)?)?;
        Ok(())
    }
}

/// The projection shipped with the repo.
pub fn default_projection() -> Result<LatentProjection> {
    LatentProjection::from_config_str(DEFAULT_PROJECTION_JSON)
}

/// Applies the projection to a 4-channel latent frame: per-pixel affine
/// map, clamp to the configured range, then affine rescale to `[0, 1]`.
/// No spatial resampling happens here.
pub fn latent_to_rgb(frame: &LatentFrame, proj: &LatentProjection) -> Result<RgbImage> {
    project_latent(&frame.data, proj)
}

/// Same map, operating on the raw latent array.
pub fn project_latent(latent: &Chw, proj: &LatentProjection) -> Result<RgbImage> {
    let (c, h, w) = latent.shape();
    if c != 4 {
        return Err(Error::Shape {
            context: "latent_to_rgb".into(),
            expected: "4 channels".into(),
            got: format!("{c}"),
        });
    }
    let (lo, hi) = proj.output_range;
    let rescale = lo.is_finite() && hi.is_finite();
    let span = hi - lo;
    let plane = h * w;
    let mut out = Chw::zeros(3, h, w);
    let z = latent.data();
    let o = out.data_mut();
    for p in 0..plane {
        let z0 = z[p] as f64 * proj.pre_scale;
        let z1 = z[plane + p] as f64 * proj.pre_scale;
        let z2 = z[2 * plane + p] as f64 * proj.pre_scale;
        let z3 = z[3 * plane + p] as f64 * proj.pre_scale;
        for ch in 0..3 {
            let wrow = &proj.weights[ch];
            let mut v = wrow[0] * z0 + wrow[1] * z1 + wrow[2] * z2 + wrow[3] * z3 + proj.bias[ch];
            if rescale {
                v = (v.clamp(lo, hi) - lo) / span;
            }
            o[ch * plane + p] = v as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_from(data: Vec<f32>, h: usize, w: usize) -> LatentFrame {
        LatentFrame::new(5, Chw::new(4, h, w, data).unwrap(), DType::F32).unwrap()
    }

    #[test]
    fn default_projection_is_well_formed() {
        let proj = default_projection().unwrap();
        assert!(proj.weights.iter().flatten().all(|v| v.is_finite()));
        assert!(proj.output_range.0 < proj.output_range.1);
    }

    #[test]
    fn rejects_config_with_wrong_matrix_shape() {
        // 3x5 matrix: 15 weights
        let text = format!(
            r#"{{"weights": {:?}, "bias": [0,0,0], "clamp": [-1,1]}}"#,
            vec![0.1; 15]
        );
        assert!(matches!(
            LatentProjection::from_config_str(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let proj = default_projection().unwrap();
        let path = dir.path().join("proj.json");
        proj.save_file(&path).unwrap();
        assert_eq!(LatentProjection::load_file(&path).unwrap(), proj);
    }

    #[test]
    fn zero_latent_gives_constant_rescaled_bias() {
        let proj = LatentProjection::new(
            [[1.0, 0.0, 0.0, 0.0]; 3],
            [0.25, -0.5, 2.0],
            (-1.0, 1.0),
            1.0,
        )
        .unwrap();
        let frame = frame_from(vec![0.0; 4 * 2 * 2], 2, 2);
        let img = latent_to_rgb(&frame, &proj).unwrap();
        // channel c is clamp(bias_c) rescaled from [-1,1] to [0,1]
        let expected = [0.625f32, 0.25, 1.0];
        for c in 0..3 {
            for &v in img.channel(c) {
                assert!((v - expected[c]).abs() < 1e-6, "c={c} v={v}");
            }
        }
    }

    #[test]
    fn shape_of_output_is_3xhxw() {
        let proj = default_projection().unwrap();
        let frame = frame_from(vec![0.1; 4 * 128 * 128], 128, 128);
        let img = latent_to_rgb(&frame, &proj).unwrap();
        assert_eq!(img.shape(), (3, 128, 128));
    }

    #[test]
    fn non_four_channel_latent_rejected() {
        let proj = default_projection().unwrap();
        let bad = Chw::zeros(3, 2, 2);
        assert!(matches!(
            project_latent(&bad, &proj),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn unclamped_map_is_exactly_affine() {
        // linearity oracle: with infinite bounds the map must satisfy
        // f(a*z1 + b*z2) = a*f(z1) + b*f(z2) + (1-a-b)*bias
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let proj = LatentProjection::new(
            [
                [0.3, -0.2, 0.5, 0.1],
                [-0.4, 0.25, 0.0, 0.6],
                [0.15, 0.15, -0.35, 0.2],
            ],
            [0.05, -0.1, 0.2],
            (f64::NEG_INFINITY, f64::INFINITY),
            1.0,
        )
        .unwrap();
        for _ in 0..20 {
            let (h, w) = (3, 4);
            let z1: Vec<f32> = (0..4 * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z2: Vec<f32> = (0..4 * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a: f32 = rng.gen_range(-1.5..1.5);
            let b: f32 = rng.gen_range(-1.5..1.5);
            let mix: Vec<f32> = z1.iter().zip(&z2).map(|(x, y)| a * x + b * y).collect();

            let f1 = project_latent(&Chw::new(4, h, w, z1).unwrap(), &proj).unwrap();
            let f2 = project_latent(&Chw::new(4, h, w, z2).unwrap(), &proj).unwrap();
            let fm = project_latent(&Chw::new(4, h, w, mix).unwrap(), &proj).unwrap();

            let plane = h * w;
            for c in 0..3 {
                for p in 0..plane {
                    let lhs = fm.data()[c * plane + p] as f64;
                    let rhs = a as f64 * f1.data()[c * plane + p] as f64
                        + b as f64 * f2.data()[c * plane + p] as f64
                        + (1.0 - a as f64 - b as f64) * proj.bias[c];
                    assert!((lhs - rhs).abs() < 1e-4, "c={c} p={p}: {lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn output_always_in_unit_interval_with_finite_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let proj = default_projection().unwrap();
        for _ in 0..50 {
            let data: Vec<f32> = (0..4 * 4 * 4)
                .map(|_| rng.gen_range(-100.0..100.0))
                .collect();
            let img = project_latent(&Chw::new(4, 4, 4, data).unwrap(), &proj).unwrap();
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn deterministic_bit_identical() {
        let proj = default_projection().unwrap();
        let frame = frame_from((0..4 * 8 * 8).map(|i| (i as f32).sin()).collect(), 8, 8);
        let a = latent_to_rgb(&frame, &proj).unwrap();
        let b = latent_to_rgb(&frame, &proj).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
