//! Trajectory data model and on-disk dataset format.
//!
//! A dataset is a directory tree with one directory per sample:
//!
//! ```text
//! root/
//!   manifest.jsonl            # header line + one entry line per sample
//!   <sample_id>/
//!     meta.json               # prompt, seed, T_total, shape, dtype, checksums
//!     frame_00007.lat         # one binary blob per stored step
//!     final.img               # optional decoded image blob
//! ```
//!
//! Frame blobs are raw little-endian arrays behind a 16-byte header
//! `{magic, dtype, C, H, W}`. Each blob carries a CRC32 recorded in
//! `meta.json` so partial writes and bit rot are detected at read time.
//!
//! The `step` index counts completed denoising iterations: step 0 is pure
//! noise, step `T_total` is the fully denoised latent.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Chw, RgbImage};

const FRAME_MAGIC: &[u8; 4] = b"LAT1";
const IMAGE_MAGIC: &[u8; 4] = b"IMG1";
pub const FORMAT_VERSION: u32 = 1;

/// Storage dtype of frame payloads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f16")]
    F16,
    #[serde(rename = "f32")]
    F32,
}

impl DType {
    fn code(self) -> u16 {
        match self {
            DType::F16 => 1,
            DType::F32 => 2,
        }
    }

    fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(DType::F16),
            2 => Some(DType::F32),
            _ => None,
        }
    }

    /// Quantizes a value to what this dtype can represent.
    pub fn quantize(self, v: f32) -> f32 {
        match self {
            DType::F16 => half::f16::from_f32(v).to_f32(),
            DType::F32 => v,
        }
    }
}

/// Inclusive step interval. `lo > hi` denotes the empty range, which is
/// valid everywhere and simply selects nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub lo: u32,
    pub hi: u32,
}

impl StepRange {
    pub fn new(lo: u32, hi: u32) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, step: u32) -> bool {
        self.lo <= step && step <= self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    /// Intersection of two inclusive ranges: `[max(lo), min(hi)]`.
    pub fn intersect(&self, other: &StepRange) -> StepRange {
        StepRange::new(self.lo.max(other.lo), self.hi.min(other.hi))
    }

    /// Steps in the range, ascending.
    pub fn steps(&self) -> impl Iterator<Item = u32> {
        self.lo..=self.hi
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

/// One stored denoising step: the latent state after `step` completed
/// iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrame {
    pub step: u32,
    pub data: Chw,
    pub dtype: DType,
}

impl LatentFrame {
    pub fn new(step: u32, data: Chw, dtype: DType) -> Result<Self> {
        if !data.is_finite() {
            return Err(Error::Data(format!(
                "frame at step {step} contains NaN or Inf"
            )));
        }
        Ok(Self { step, data, dtype })
    }
}

/// The per-prompt record: prompt, seed, total iteration count, stored
/// frames, and an optional reference to the decoded final image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub sample_id: String,
    pub prompt: String,
    pub seed: u64,
    pub t_total: u32,
    pub frames: Vec<LatentFrame>,
    pub final_image_ref: Option<PathBuf>,
}

impl LatentTrajectory {
    /// Checks every structural invariant, naming the offending step when a
    /// frame disagrees with the first frame's shape.
    pub fn validate(&self) -> Result<()> {
        if self.t_total < 1 {
            return Err(Error::Data(format!(
                "sample {}: T_total must be >= 1",
                self.sample_id
            )));
        }
        if let Some(first) = self.frames.first() {
            let shape = first.data.shape();
            if shape.0 != 4 {
                return Err(Error::Shape {
                    context: format!("sample {} frame step {}", self.sample_id, first.step),
                    expected: "4 latent channels".into(),
                    got: format!("{}", shape.0),
                });
            }
            let dtype = first.dtype;
            let mut prev_step: Option<u32> = None;
            for frame in &self.frames {
                if frame.data.shape() != shape {
                    return Err(Error::Shape {
                        context: format!("sample {} frame step {}", self.sample_id, frame.step),
                        expected: format!("{:?}", shape),
                        got: format!("{:?}", frame.data.shape()),
                    });
                }
                if frame.dtype != dtype {
                    return Err(Error::Data(format!(
                        "sample {} frame step {}: dtype differs from trajectory dtype",
                        self.sample_id, frame.step
                    )));
                }
                if !frame.data.is_finite() {
                    return Err(Error::Data(format!(
                        "sample {} frame step {}: NaN or Inf",
                        self.sample_id, frame.step
                    )));
                }
                if let Some(prev) = prev_step {
                    if frame.step <= prev {
                        return Err(Error::Data(format!(
                            "sample {}: frame steps not strictly increasing at step {}",
                            self.sample_id, frame.step
                        )));
                    }
                }
                if frame.step > self.t_total {
                    return Err(Error::Data(format!(
                        "sample {} frame step {} exceeds T_total {}",
                        self.sample_id, frame.step, self.t_total
                    )));
                }
                prev_step = Some(frame.step);
            }
        }
        Ok(())
    }

    /// Shape of the stored frames, if any.
    pub fn frame_shape(&self) -> Option<(usize, usize, usize)> {
        self.frames.first().map(|f| f.data.shape())
    }

    /// In-memory step filtering with the same inclusive-range convention as
    /// [`read_trajectory`].
    pub fn filter_steps(&self, range: StepRange) -> LatentTrajectory {
        LatentTrajectory {
            sample_id: self.sample_id.clone(),
            prompt: self.prompt.clone(),
            seed: self.seed,
            t_total: self.t_total,
            frames: self
                .frames
                .iter()
                .filter(|f| range.contains(f.step))
                .cloned()
                .collect(),
            final_image_ref: self.final_image_ref.clone(),
        }
    }

    pub fn frame_at(&self, step: u32) -> Option<&LatentFrame> {
        self.frames.iter().find(|f| f.step == step)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleMeta {
    sample_id: String,
    prompt: String,
    seed: u64,
    t_total: u32,
    shape: Option<(usize, usize, usize)>,
    dtype: Option<DType>,
    /// step -> CRC32 of the frame blob bytes, hex.
    checksums: BTreeMap<u32, String>,
    final_image_ref: Option<PathBuf>,
}

/// Benchmark subset tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsetTag {
    #[serde(rename = "noisy-conceptual-captions")]
    NoisyConceptualCaptions,
    #[serde(rename = "noisy-genai-bench")]
    NoisyGenaiBench,
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub relative_path: PathBuf,
    pub prompt: String,
    pub n_frames: usize,
    pub step_set: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub subset_tag: SubsetTag,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format_version: u32,
    subset_tag: SubsetTag,
    entry_count: usize,
}

fn sample_dir_name_ok(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && id != "."
        && id != ".."
}

fn frame_file_name(step: u32) -> String {
    format!("frame_{step:05}.lat")
}

fn encode_frame_blob(frame: &LatentFrame) -> Vec<u8> {
    let (c, h, w) = frame.data.shape();
    let mut out = Vec::with_capacity(16 + frame.data.data().len() * 4);
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&frame.dtype.code().to_le_bytes());
    out.extend_from_slice(&(c as u16).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    match frame.dtype {
        DType::F32 => {
            for &v in frame.data.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F16 => {
            for &v in frame.data.data() {
                out.extend_from_slice(&half::f16::from_f32(v).to_le_bytes());
            }
        }
    }
    out
}

fn decode_frame_blob(bytes: &[u8], context: &str) -> Result<(Chw, DType)> {
    if bytes.len() < 16 || &bytes[0..4] != FRAME_MAGIC {
        return Err(Error::Data(format!("{context}: bad frame blob header")));
    }
    let dtype_code = u16::from_le_bytes([bytes[4], bytes[5]]);
    let dtype = DType::from_code(dtype_code)
        .ok_or_else(|| Error::Data(format!("{context}: unknown dtype code {dtype_code}")))?;
    let c = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let h = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let w = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
    let n = c * h * w;
    let payload = &bytes[16..];
    let elem = match dtype {
        DType::F16 => 2,
        DType::F32 => 4,
    };
    if payload.len() != n * elem {
        return Err(Error::Data(format!(
            "{context}: payload length {} does not match shape ({c},{h},{w})",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    match dtype {
        DType::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
        }
        DType::F16 => {
            for chunk in payload.chunks_exact(2) {
                data.push(half::f16::from_le_bytes([chunk[0], chunk[1]]).to_f32());
            }
        }
    }
    Ok((Chw::new(c, h, w, data)?, dtype))
}

/// Persists a trajectory under `root/<sample_id>/`, one blob per frame plus
/// a metadata record. Overwriting the same `sample_id` replaces the sample
/// wholesale, so repeated writes of identical data are idempotent.
pub fn write_trajectory(trajectory: &LatentTrajectory, root: &Path) -> Result<String> {
    trajectory.validate()?;
    if !sample_dir_name_ok(&trajectory.sample_id) {
        return Err(Error::Argument(format!(
            "sample_id {:?} is not filesystem-safe",
            trajectory.sample_id
        )));
    }
    let dir = root.join(&trajectory.sample_id);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;

    let mut checksums = BTreeMap::new();
    for frame in &trajectory.frames {
        let blob = encode_frame_blob(frame);
        let crc = crc32fast::hash(&blob);
        checksums.insert(frame.step, format!("{crc:08x}"));
        let mut f = fs::File::create(dir.join(frame_file_name(frame.step)))?;
        f.write_all(&blob)?;
    }

    let meta = SampleMeta {
        sample_id: trajectory.sample_id.clone(),
        prompt: trajectory.prompt.clone(),
        seed: trajectory.seed,
        t_total: trajectory.t_total,
        shape: trajectory.frame_shape(),
        dtype: trajectory.frames.first().map(|f| f.dtype),
        checksums,
        final_image_ref: trajectory.final_image_ref.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(dir.join("meta.json"), json)?;
    Ok(trajectory.sample_id.clone())
}

/// Loads a trajectory, optionally restricted to steps inside `step_filter`
/// (inclusive). Header fields are returned unchanged regardless of the
/// filter. Every loaded blob is checksum-verified.
pub fn read_trajectory(
    sample_id: &str,
    root: &Path,
    step_filter: Option<StepRange>,
) -> Result<LatentTrajectory> {
    let dir = root.join(sample_id);
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::NotFound(format!(
            "sample {sample_id} under {root:?}"
        )));
    }
    let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;

    let mut frames = Vec::new();
    for (&step, recorded) in &meta.checksums {
        if let Some(range) = &step_filter {
            if !range.contains(step) {
                continue;
            }
        }
        let path = dir.join(frame_file_name(step));
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .map_err(|_| Error::NotFound(format!("frame blob {path:?}")))?
            .read_to_end(&mut bytes)?;
        let crc = format!("{:08x}", crc32fast::hash(&bytes));
        if &crc != recorded {
            return Err(Error::Integrity {
                sample_id: sample_id.to_string(),
                step,
            });
        }
        let (data, dtype) = decode_frame_blob(&bytes, &format!("sample {sample_id} step {step}"))?;
        if let Some(shape) = meta.shape {
            if data.shape() != shape {
                return Err(Error::Shape {
                    context: format!("sample {sample_id} frame step {step}"),
                    expected: format!("{shape:?}"),
                    got: format!("{:?}", data.shape()),
                });
            }
        }
        frames.push(LatentFrame { step, data, dtype });
    }

    Ok(LatentTrajectory {
        sample_id: meta.sample_id,
        prompt: meta.prompt,
        seed: meta.seed,
        t_total: meta.t_total,
        frames,
        final_image_ref: meta.final_image_ref,
    })
}

/// Scans `root` for sample directories and builds a manifest with entries
/// ordered by `sample_id`. Duplicate ids (two directories whose metadata
/// claims the same sample) are an error naming the offenders.
pub fn build_manifest(root: &Path, subset_tag: SubsetTag) -> Result<DatasetManifest> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut duplicates: Vec<String> = Vec::new();

    if root.exists() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir() && p.join("meta.json").exists())
            .collect();
        dirs.sort();
        for dir in dirs {
            let meta: SampleMeta =
                serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
            let rel = dir.strip_prefix(root).unwrap_or(&dir).to_path_buf();
            if let Some(prev) = seen.insert(meta.sample_id.clone(), rel.clone()) {
                duplicates.push(format!("{} ({:?} and {:?})", meta.sample_id, prev, rel));
                continue;
            }
            entries.push(ManifestEntry {
                sample_id: meta.sample_id.clone(),
                relative_path: rel,
                prompt: meta.prompt.clone(),
                n_frames: meta.checksums.len(),
                step_set: meta.checksums.keys().copied().collect(),
            });
        }
    }

    if !duplicates.is_empty() {
        return Err(Error::Data(format!(
            "duplicate sample ids in manifest: {}",
            duplicates.join(", ")
        )));
    }
    entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(DatasetManifest {
        format_version: FORMAT_VERSION,
        subset_tag,
        entries,
    })
}

impl DatasetManifest {
    /// Serializes as line-delimited JSON: one header line, one line per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header = ManifestHeader {
            format_version: self.format_version,
            subset_tag: self.subset_tag,
            entry_count: self.entries.len(),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Loads a manifest and checks that every referenced sample directory
    /// still exists relative to the manifest file's location.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|_| Error::NotFound(format!("manifest {path:?}")))?;
        let mut lines = text.lines();
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Data("empty manifest file".into()))?,
        )?;
        let mut entries = Vec::with_capacity(header.entry_count);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line)?);
        }
        let manifest = DatasetManifest {
            format_version: header.format_version,
            subset_tag: header.subset_tag,
            entries,
        };
        if let Some(root) = path.parent() {
            manifest.validate_paths(root)?;
        }
        Ok(manifest)
    }

    /// Verifies that every referenced sample directory still exists.
    pub fn validate_paths(&self, root: &Path) -> Result<()> {
        for entry in &self.entries {
            let dir = root.join(&entry.relative_path);
            if !dir.join("meta.json").exists() {
                return Err(Error::NotFound(format!(
                    "manifest entry {} points at missing {:?}",
                    entry.sample_id, dir
                )));
            }
        }
        Ok(())
    }
}

/// Writes an RGB image blob (same header layout as frames, `IMG1` magic,
/// f32 payload).
pub fn write_image_blob(path: &Path, image: &RgbImage) -> Result<()> {
    let (c, h, w) = image.shape();
    let mut out = Vec::with_capacity(16 + image.data().len() * 4);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&DType::F32.code().to_le_bytes());
    out.extend_from_slice(&(c as u16).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_image_blob(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|_| Error::NotFound(format!("image blob {path:?}")))?;
    if bytes.len() < 16 || &bytes[0..4] != IMAGE_MAGIC {
        return Err(Error::Data(format!("{path:?}: bad image blob header")));
    }
    let c = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let h = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let w = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
    let payload = &bytes[16..];
    if payload.len() != c * h * w * 4 {
        return Err(Error::Data(format!("{path:?}: truncated image payload")));
    }
    let data = payload
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]))
        .collect();
    Chw::new(c, h, w, data)
}


#[cfg(test)]
mod load_validation_tests {
    use super::*;
    use crate::tensor::Chw;

    #[test]
    fn load_rejects_manifest_with_missing_sample() {
        let dir = tempfile::tempdir().unwrap();
        let traj = LatentTrajectory {
            sample_id: "gone".into(),
            prompt: "p".into(),
            seed: 0,
            t_total: 2,
            frames: vec![LatentFrame::new(1, Chw::zeros(4, 2, 2), DType::F32).unwrap()],
            final_image_ref: None,
        };
        write_trajectory(&traj, dir.path()).unwrap();
        let manifest = build_manifest(dir.path(), SubsetTag::Custom).unwrap();
        let path = dir.path().join("manifest.jsonl");
        manifest.save(&path).unwrap();
        assert!(DatasetManifest::load(&path).is_ok());
        fs::remove_dir_all(dir.path().join("gone")).unwrap();
        assert!(matches!(
            DatasetManifest::load(&path),
            Err(Error::NotFound(_))
        ));
    }
}
