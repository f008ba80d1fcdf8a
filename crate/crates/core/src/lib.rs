//! Alignment scoring inside the reverse diffusion process.
//!
//! This crate measures how well a text prompt matches an image while the
//! image is still being denoised, by projecting intermediate latents to
//! RGB previews and scoring them with a twin-tower encoder. On top of that
//! sit a noise-robust fine-tuning loop for the image tower, a Best-of-N
//! orchestrator that prunes poorly aligned candidates mid-generation with
//! exact iteration-cost accounting, a prompt-corruption builder for
//! factual-consistency benchmarks, and the evaluation harness that turns
//! all of it into reports.
//!
//! Modules:
//! - [`store`]: trajectory data model and the on-disk dataset format
//! - [`preview`]: the fixed 4-channel-to-RGB latent projection
//! - [`scoring`]: encoder gateways, `s_final` / `s_latent`, ranking
//! - [`trainer`]: InfoNCE fine-tuning of the image tower
//! - [`bon`]: Best-of-N with early pruning and cost ledgers
//! - [`corruption`]: targeted non-factual prompt generation
//! - [`eval`]: Recall@1 curves, rank-delta curves, BoN tables, range grids
//! - [`toy`]: deterministic desk-scale backends and fixtures

pub mod bon;
pub mod corruption;
pub mod error;
pub mod eval;
mod math;
pub mod parallel;
pub mod preview;
pub mod scoring;
pub mod store;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use store::StepRange;
pub use tensor::{Chw, RgbImage};
