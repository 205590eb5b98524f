//! Slice records, dataset splits, normalization, file formats, and a
//! synthetic multimodal phantom generator for self-contained experiments.
//!
//! # On-disk format
//!
//! A dataset is a JSON manifest plus raw blobs, all paths relative to the
//! manifest's directory:
//!
//! ```json
//! {"version":1,"c":4,"h":64,"w":64,
//!  "records":[{"id":"normal_000","modality_blob":"blobs/normal_000.mod.f32",
//!              "mask_blob":"blobs/normal_000.mask.u8","label":0,"split":"train"}]}
//! ```
//!
//! - modality blob: `c*h*w` little-endian float32 values, channel-major
//!   (channel, then row, then column; row-major within a channel)
//! - mask blob: `h*w` uint8 values in {0,1}, row-major
//!
//! # Importing real scanner data
//!
//! Real multi-modal slices map in directly: export each slice's co-registered
//! modality stack (e.g. T1/T1ce/T2/FLAIR) as one float32 blob in the channel
//! order above, the expert mask as a uint8 blob, and list them in the
//! manifest with `label` equal to 1 iff the mask is nonempty. The loader
//! re-derives labels and normalizes intensities, so exports need no
//! preprocessing beyond slicing and stacking. The conversion tooling itself
//! is out of scope here.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dimensions c={c}, h={h}, w={w}: need c >= 1 and h, w >= 32")]
    InvalidDimensions { c: usize, h: usize, w: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no healthy (label 0) slices: normal-only training set would be empty")]
    NoHealthySlices,
    #[error("mask contains non-binary value {0}")]
    NonBinaryMask(u8),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("blob {path} has wrong size: expected {expected} bytes, got {got}")]
    BlobShapeMismatch {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("corrupt blob {path}: {reason}")]
    CorruptBlob { path: PathBuf, reason: String },
    #[error("record {id}: manifest label {declared} disagrees with mask-derived label {derived}")]
    LabelMismatch { id: String, declared: u8, derived: u8 },
    #[error("unsupported manifest version {0} (expected {MANIFEST_VERSION})")]
    UnsupportedVersion(u32),
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest parse failure: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One 2D training/evaluation example: a stack of modality channels, its
/// lesion mask, and the slice-level label derived from that mask.
#[derive(Debug, Clone)]
pub struct SliceRecord {
    pub id: String,
    /// C×H×W intensities, normalized per channel (min-max by default).
    pub modalities: Array3<f32>,
    /// H×W lesion mask in {0,1}.
    pub mask: Array2<u8>,
    /// 1 iff the mask has any foreground pixel.
    pub label: u8,
    pub split: Split,
}

/// 1 if any pixel is foreground, else 0. Rejects values outside {0,1}.
pub fn derive_label(mask: ArrayView2<'_, u8>) -> Result<u8, DataError> {
    let mut any = false;
    for &v in mask.iter() {
        match v {
            0 => {}
            1 => any = true,
            other => return Err(DataError::NonBinaryMask(other)),
        }
    }
    Ok(u8::from(any))
}

/// Splits into (healthy-only, everything): the first set trains the
/// normal-only ensemble, the second the mixture ensemble. Errors if no
/// healthy slice exists, since the normal-only set would be empty.
pub fn split_datasets(
    records: &[SliceRecord],
) -> Result<(Vec<&SliceRecord>, Vec<&SliceRecord>), DataError> {
    if records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let healthy: Vec<&SliceRecord> = records.iter().filter(|r| r.label == 0).collect();
    if healthy.is_empty() {
        return Err(DataError::NoHealthySlices);
    }
    Ok((healthy, records.iter().collect()))
}

/// Indices of a label-balanced subset: min(#normal, #abnormal) records from
/// each class, chosen by a seeded shuffle, in ascending index order.
pub fn balanced_indices(labels: &[u8], seed: u64) -> Vec<usize> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[usize::from(l > 0)].push(i);
    }
    let k = by_class[0].len().min(by_class[1].len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(2 * k);
    for class in &mut by_class {
        shuffle(class, &mut rng);
        picked.extend_from_slice(&class[..k]);
    }
    picked.sort_unstable();
    picked
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Min-max normalizes each channel in place to [0,1]; a constant channel
/// becomes all zeros (degenerate-case convention).
pub fn normalize_minmax(modalities: &mut Array3<f32>) {
    for mut ch in modalities.axis_iter_mut(Axis(0)) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in ch.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            ch.mapv_inplace(|v| (v - lo) * scale);
        } else {
            ch.fill(0.0);
        }
    }
}

/// How loaded intensities are rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    /// Per slice, per channel, to [0,1]. The default throughout.
    #[default]
    MinMaxPerSlice,
    /// Per channel over the whole dataset: subtract mean, divide by std.
    /// Output is not confined to [0,1]; reports record which mode ran.
    ZScorePerDataset,
}

fn zscore_per_dataset(records: &mut [SliceRecord]) {
    if records.is_empty() {
        return;
    }
    let c = records[0].modalities.shape()[0];
    for ch in 0..c {
        let mut n = 0u64;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for r in records.iter() {
            for &v in r.modalities.index_axis(Axis(0), ch).iter() {
                sum += v as f64;
                sum_sq += (v as f64) * (v as f64);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let inv_std = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for r in records.iter_mut() {
            r.modalities
                .index_axis_mut(Axis(0), ch)
                .mapv_inplace(|v| ((v as f64 - mean) * inv_std) as f32);
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic phantom generation

/// Parameters of the synthetic corpus. Lesion area is drawn per record from
/// `lesion_frac_min..lesion_frac_max` (fraction of total pixels, before
/// lesion overlap is merged away).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub lesion_frac_min: f64,
    pub lesion_frac_max: f64,
    /// Fraction of each class assigned to the test split (tail records).
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal: 64,
            n_abnormal: 64,
            channels: 4,
            height: 64,
            width: 64,
            seed: 7,
            lesion_frac_min: 0.02,
            lesion_frac_max: 0.08,
            test_fraction: 0.2,
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

impl Ellipse {
    /// Squared normalized elliptical distance: <= 1 inside.
    fn dist2(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = dy * c + dx * s;
        let v = -dy * s + dx * c;
        (u / self.ry).powi(2) + (v / self.rx).powi(2)
    }
}

pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one slice. Anatomy is a large head ellipse plus a few soft
/// interior structures, each with its own per-modality contrast; abnormal
/// slices add 1-3 hard-edged lesions whose interiors define the mask.
fn render_record(
    id: String,
    abnormal: bool,
    cfg: &SynthConfig,
    record_seed: u64,
    split: Split,
) -> SliceRecord {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed);
    let (hf, wf) = (h as f64, w as f64);

    let head = Ellipse {
        cy: hf * rng.random_range(0.47..0.53),
        cx: wf * rng.random_range(0.47..0.53),
        ry: hf * rng.random_range(0.36..0.44),
        rx: wf * rng.random_range(0.36..0.44),
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    // Structures: (shape, per-modality amplitude, profile sharpness)
    let n_structs = rng.random_range(3..=5usize);
    let mut structures = Vec::with_capacity(n_structs);
    for _ in 0..n_structs {
        let shape = Ellipse {
            cy: head.cy + hf * rng.random_range(-0.18..0.18),
            cx: head.cx + wf * rng.random_range(-0.18..0.18),
            ry: hf * rng.random_range(0.06..0.22),
            rx: wf * rng.random_range(0.06..0.22),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let amps: Vec<f64> = (0..c)
            .map(|_| {
                let mag = rng.random_range(0.15..0.55);
                if rng.random_range(0.0..1.0) < 0.25 {
                    -mag
                } else {
                    mag
                }
            })
            .collect();
        let sharp: f64 = rng.random_range(2.0..4.0);
        structures.push((shape, amps, sharp));
    }
    let head_amps: Vec<f64> = (0..c).map(|_| rng.random_range(0.3..0.5)).collect();

    // Lesions (abnormal records only).
    let mut lesions: Vec<(Ellipse, Vec<f64>)> = Vec::new();
    if abnormal {
        let n_lesions = rng.random_range(1..=3usize);
        let frac = rng.random_range(cfg.lesion_frac_min..cfg.lesion_frac_max);
        let weights: Vec<f64> = (0..n_lesions).map(|_| rng.random_range(0.5..1.5)).collect();
        let wsum: f64 = weights.iter().sum();
        for weight in weights {
            let area = frac * (weight / wsum) * hf * wf;
            let ratio = rng.random_range(0.6..1.6);
            let ry = (area / (std::f64::consts::PI * ratio)).sqrt().max(1.3);
            let rx = (ratio * ry).max(1.3);
            let shape = Ellipse {
                cy: (head.cy + hf * rng.random_range(-0.22..0.22)).clamp(ry + 1.0, hf - ry - 2.0),
                cx: (head.cx + wf * rng.random_range(-0.22..0.22)).clamp(rx + 1.0, wf - rx - 2.0),
                ry,
                rx,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            };
            let shifts: Vec<f64> = (0..c)
                .map(|_| {
                    let mag = rng.random_range(0.4..0.85);
                    if rng.random_range(0.0..1.0) < 0.35 {
                        -mag
                    } else {
                        mag
                    }
                })
                .collect();
            lesions.push((shape, shifts));
        }
    }

    let mut modalities = Array3::<f32>::zeros((c, h, w));
    let mut mask = Array2::<u8>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64, j as f64);
            let head_d2 = head.dist2(y, x);
            if head_d2 > 1.0 {
                continue;
            }
            // soft falloff toward the head boundary
            let head_profile = 1.0 - head_d2.powi(2) * 0.35;
            let mut lesion_boost = vec![0.0f64; c];
            let mut inside_lesion = false;
            for (shape, shifts) in &lesions {
                let d2 = shape.dist2(y, x);
                if d2 <= 1.0 {
                    inside_lesion = true;
                    let profile = 0.65 + 0.35 * (-2.0 * d2).exp();
                    for ch in 0..c {
                        lesion_boost[ch] += shifts[ch] * profile;
                    }
                }
            }
            if inside_lesion {
                mask[[i, j]] = 1;
            }
            for ch in 0..c {
                let mut v = head_amps[ch] * head_profile;
                for (shape, amps, sharp) in &structures {
                    let d2 = shape.dist2(y, x);
                    if d2 < 4.0 {
                        v += amps[ch] * (-sharp * d2).exp();
                    }
                }
                modalities[[ch, i, j]] = (v + lesion_boost[ch]) as f32;
            }
        }
    }

    // Rasterization of a degenerate ellipse can miss every pixel center;
    // guarantee abnormal slices carry at least one lesion pixel.
    if abnormal && mask.iter().all(|&v| v == 0) {
        let (ci, cj) = (h / 2, w / 2);
        for i in ci.saturating_sub(1)..=(ci + 1).min(h - 1) {
            for j in cj.saturating_sub(1)..=(cj + 1).min(w - 1) {
                mask[[i, j]] = 1;
                for ch in 0..c {
                    modalities[[ch, i, j]] += 0.6;
                }
            }
        }
    }

    normalize_minmax(&mut modalities);
    let label = u8::from(abnormal);
    SliceRecord {
        id,
        modalities,
        mask,
        label,
        split,
    }
}

/// Deterministic synthetic corpus: `n_normal` healthy slices followed by
/// `n_abnormal` lesioned ones. Each record is rendered from its own derived
/// seed, so the corpus is byte-stable for a fixed config. The tail
/// `test_fraction` of each class is tagged as the test split.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<SliceRecord>, DataError> {
    if cfg.channels == 0 || cfg.height < 32 || cfg.width < 32 {
        return Err(DataError::InvalidDimensions {
            c: cfg.channels,
            h: cfg.height,
            w: cfg.width,
        });
    }
    if cfg.n_normal + cfg.n_abnormal == 0 {
        return Err(DataError::EmptyDataset);
    }
    let test_of = |n: usize| ((n as f64) * cfg.test_fraction).round() as usize;
    let mut records = Vec::with_capacity(cfg.n_normal + cfg.n_abnormal);
    for i in 0..cfg.n_normal {
        let split = if i < cfg.n_normal - test_of(cfg.n_normal) {
            Split::Train
        } else {
            Split::Test
        };
        records.push(render_record(
            format!("normal_{i:04}"),
            false,
            cfg,
            derive_seed(cfg.seed, i as u64),
            split,
        ));
    }
    for i in 0..cfg.n_abnormal {
        let split = if i < cfg.n_abnormal - test_of(cfg.n_abnormal) {
            Split::Train
        } else {
            Split::Test
        };
        records.push(render_record(
            format!("abnormal_{i:04}"),
            true,
            cfg,
            derive_seed(cfg.seed, (1 << 32) | i as u64),
            split,
        ));
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Manifest + blob IO

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub modality_blob: String,
    pub mask_blob: String,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub records: Vec<ManifestRecord>,
}

/// Writes blobs under `dir/blobs/` and the manifest at `dir/manifest.json`;
/// returns the manifest path.
pub fn save_dataset(dir: &Path, records: &[SliceRecord]) -> Result<PathBuf, DataError> {
    let first = records.first().ok_or(DataError::EmptyDataset)?;
    let (c, h, w) = {
        let s = first.modalities.shape();
        (s[0], s[1], s[2])
    };
    let blob_dir = dir.join("blobs");
    std::fs::create_dir_all(&blob_dir)?;

    let mut manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        c,
        h,
        w,
        records: Vec::with_capacity(records.len()),
    };
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(r.id.clone()) {
            return Err(DataError::DuplicateId(r.id.clone()));
        }
        let mod_rel = format!("blobs/{}.mod.f32", r.id);
        let mask_rel = format!("blobs/{}.mask.u8", r.id);

        let mut bytes = Vec::with_capacity(r.modalities.len() * 4);
        for &v in r.modalities.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(dir.join(&mod_rel))?.write_all(&bytes)?;

        let mask_bytes: Vec<u8> = r.mask.iter().cloned().collect();
        std::fs::File::create(dir.join(&mask_rel))?.write_all(&mask_bytes)?;

        manifest.records.push(ManifestRecord {
            id: r.id.clone(),
            modality_blob: mod_rel,
            mask_blob: mask_rel,
            label: r.label,
            split: r.split,
        });
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, json)?;
    Ok(manifest_path)
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<u8>, DataError> {
    let mut f = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io(e)
        }
    })?;
    let mut bytes = Vec::with_capacity(expected);
    f.read_to_end(&mut bytes)?;
    if bytes.len() != expected {
        return Err(DataError::BlobShapeMismatch {
            path: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    Ok(bytes)
}

/// Loads and validates a dataset with the default per-slice min-max
/// normalization. Labels are re-derived from masks and must agree with the
/// manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SliceRecord>, DataError> {
    load_dataset_with(manifest_path, NormalizeMode::MinMaxPerSlice)
}

pub fn load_dataset_with(
    manifest_path: &Path,
    mode: NormalizeMode,
) -> Result<Vec<SliceRecord>, DataError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(manifest_path.to_path_buf())
        } else {
            DataError::Io(e)
        }
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DataError::UnsupportedVersion(manifest.version));
    }
    if manifest.records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let (c, h, w) = (manifest.c, manifest.h, manifest.w);

    let mut records = Vec::with_capacity(manifest.records.len());
    for m in &manifest.records {
        let mod_path = base.join(&m.modality_blob);
        let bytes = read_blob(&mod_path, c * h * w * 4)?;
        let mut values = Vec::with_capacity(c * h * w);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(DataError::CorruptBlob {
                    path: mod_path.clone(),
                    reason: format!("non-finite intensity {v}"),
                });
            }
            values.push(v);
        }
        let modalities = Array3::from_shape_vec((c, h, w), values).expect("sized above");

        let mask_path = base.join(&m.mask_blob);
        let mask_bytes = read_blob(&mask_path, h * w)?;
        if let Some(&bad) = mask_bytes.iter().find(|&&b| b > 1) {
            return Err(DataError::CorruptBlob {
                path: mask_path.clone(),
                reason: format!("mask value {bad} outside {{0,1}}"),
            });
        }
        let mask = Array2::from_shape_vec((h, w), mask_bytes).expect("sized above");

        let derived = derive_label(mask.view())?;
        if derived != m.label {
            return Err(DataError::LabelMismatch {
                id: m.id.clone(),
                declared: m.label,
                derived,
            });
        }

        let mut record = SliceRecord {
            id: m.id.clone(),
            modalities,
            mask,
            label: derived,
            split: m.split,
        };
        if mode == NormalizeMode::MinMaxPerSlice {
            normalize_minmax(&mut record.modalities);
        }
        records.push(record);
    }
    if mode == NormalizeMode::ZScorePerDataset {
        zscore_per_dataset(&mut records);
    }
    Ok(records)
}
