//! Stage orchestration over a run directory.
//!
//! Every stage reads and writes one subdirectory of the run directory and
//! drops a `stage.json` manifest recording the config hash it ran under and
//! the SHA-256 of every file it consumed and produced. Later stages check
//! their prerequisites' manifests: a missing one is a hard error with a
//! hint, a config-hash mismatch is an error under `--strict` and a warning
//! otherwise. Manifests carry no timestamps, so reruns of identical work
//! produce identical trees.
//!
//! Layout: `dataset/`, `ensembles/`, `features/`, `diffusion/`, `samples/`,
//! `eval/`. A `.lock` sentinel at the root serializes stages against
//! concurrent runs on the same directory.

use crate::checkpoint::{
    load_denoiser, load_ensemble, save_denoiser, save_ensemble, CheckpointError,
};
use crate::config::{sha256_hex, ConfigError, ExperimentConfig};
use crate::data::{load_dataset, save_dataset, DataError, SliceRecord, Split};
use crate::denoiser::{ConditioningPack, Denoiser, DenoiserError};
use crate::discrepancy::{
    DiscrepancyError, DiscrepancyFeatures, DiscrepancyScores, EnsemblePair, EnsembleRole,
};
use crate::metrics::{
    aggregate, auroc, histogram_report, score_pair, HistogramReport, MetricsError, SegAggregate,
};
use crate::sampler::{predict_mask, SampleError};
use crate::schedule::ScheduleError;
use crate::trainer::{train_denoiser, FeatureSource, TrainError};
use ndarray::{s, Array2, Array4};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad json {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0} is locked by another run (remove .lock if that run is dead)")]
    Locked(PathBuf),
    #[error("missing prerequisite: {what}; {hint}")]
    MissingPrerequisite { what: String, hint: String },
    #[error("{what} was produced under config {got}, current config is {expected}; rerun it or drop --strict")]
    StaleInput {
        what: String,
        expected: String,
        got: String,
    },
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Discrepancy(#[from] DiscrepancyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Resolved invocation state shared by every stage.
pub struct StageContext {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub strict: bool,
}

impl StageContext {
    /// Resolves the run directory: the `MASKDIFF_OUT` environment variable
    /// wins over the config's `paths.out_dir`.
    pub fn new(cfg: ExperimentConfig, strict: bool) -> Self {
        let out = std::env::var_os("MASKDIFF_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| cfg.paths.out_dir.clone());
        Self { cfg, out, strict }
    }

    /// Same, with an explicit directory (tests, embedding).
    pub fn with_out_dir(cfg: ExperimentConfig, out: PathBuf, strict: bool) -> Self {
        Self { cfg, out, strict }
    }
}

/// What a stage did, for the caller to print.
#[derive(Debug)]
pub struct StageSummary {
    pub stage: &'static str,
    pub notes: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl StageSummary {
    fn new(stage: &'static str) -> Self {
        Self {
            stage,
            notes: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn note(&mut self, key: &str, value: impl std::fmt::Display) {
        self.notes.push((key.to_string(), value.to_string()));
    }
}

/// Exclusive claim on a run directory while a stage works. The sentinel file
/// is created atomically and removed on drop, so a crash leaves it behind on
/// purpose: evidence that outputs may be half-written.
pub struct StageLock {
    path: PathBuf,
}

impl StageLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(".lock");
        match File::create_new(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(dir.to_path_buf()))
            }
            Err(source) => Err(PipelineError::Io {
                path: path.clone(),
                source,
            }),
        }
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Stage manifests

#[derive(Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Relative path -> SHA-256 of every file the stage read.
    pub inputs: BTreeMap<String, String>,
    /// Same for every file it wrote.
    pub outputs: BTreeMap<String, String>,
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn is_stage_manifest(name: &str) -> bool {
    name == "stage.json" || name.ends_with(".stage.json")
}

/// SHA-256 of every regular file under `dir` (recursive), keyed by relative
/// path, skipping stage manifests themselves.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(io_err(&d))? {
            let entry = entry.map_err(io_err(&d))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if is_stage_manifest(&name) {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            let rel = path
                .strip_prefix(dir)
                .expect("walked under dir")
                .to_string_lossy()
                .replace('\\', "/");
            out.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(out)
}

fn write_stage_manifest(
    path: &Path,
    stage: &str,
    ctx: &StageContext,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
) -> Result<(), PipelineError> {
    save_json(
        path,
        &StageManifest {
            stage: stage.to_string(),
            config_hash: ctx.cfg.hash(),
            seeds,
            inputs,
            outputs,
        },
    )
}

/// Loads a prerequisite's manifest, failing with a hint when it has never
/// run and (under --strict) when it ran under a different config.
fn require_stage(
    ctx: &StageContext,
    summary: &mut StageSummary,
    manifest_path: &Path,
    what: &str,
    command: &str,
) -> Result<StageManifest, PipelineError> {
    if !manifest_path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            what: what.to_string(),
            hint: format!("run `maskdiff {command}` first"),
        });
    }
    let manifest: StageManifest = load_json(manifest_path)?;
    let expected = ctx.cfg.hash();
    if manifest.config_hash != expected {
        if ctx.strict {
            return Err(PipelineError::StaleInput {
                what: what.to_string(),
                expected,
                got: manifest.config_hash,
            });
        }
        summary.warnings.push(format!(
            "{what} was produced under a different config ({}); continuing without --strict",
            &manifest.config_hash[..12]
        ));
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Shared paths and small binary formats

fn dataset_manifest_path(out: &Path) -> PathBuf {
    out.join("dataset").join("manifest.json")
}

fn ensemble_json_path(out: &Path, role: EnsembleRole) -> PathBuf {
    out.join("ensembles").join(format!("{role}.json"))
}

fn write_f32_maps(path: &Path, maps: &[&Array2<f32>]) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for m in maps {
        for &v in m.as_slice().expect("standard layout") {
            w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn read_f32_maps(
    path: &Path,
    count: usize,
    h: usize,
    w: usize,
) -> Result<Vec<Array2<f32>>, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let want = count * h * w * 4;
    if bytes.len() != want {
        return Err(PipelineError::Mismatch(format!(
            "{} holds {} bytes, expected {want}",
            path.display(),
            bytes.len()
        )));
    }
    let mut maps = Vec::with_capacity(count);
    for i in 0..count {
        let mut m = Array2::<f32>::zeros((h, w));
        let base = i * h * w * 4;
        for (j, v) in m.iter_mut().enumerate() {
            let at = base + j * 4;
            *v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        }
        maps.push(m);
    }
    Ok(maps)
}

fn write_u8_maps(path: &Path, maps: &[&Array2<u8>]) -> Result<(), PipelineError> {
    let mut bytes = Vec::new();
    for m in maps {
        bytes.extend_from_slice(m.as_slice().expect("standard layout"));
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_u8_maps(
    path: &Path,
    count: usize,
    h: usize,
    w: usize,
) -> Result<Vec<Array2<u8>>, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let want = count * h * w;
    if bytes.len() != want {
        return Err(PipelineError::Mismatch(format!(
            "{} holds {} bytes, expected {want}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(h * w)
        .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("sized chunk"))
        .collect())
}

fn train_refs(records: &[SliceRecord]) -> Vec<&SliceRecord> {
    records.iter().filter(|r| r.split == Split::Train).collect()
}

fn test_refs(records: &[SliceRecord]) -> Vec<&SliceRecord> {
    records.iter().filter(|r| r.split == Split::Test).collect()
}

// ---------------------------------------------------------------------------
// Stage: synth

pub fn stage_synth(ctx: &StageContext) -> Result<StageSummary, PipelineError> {
    let _lock = StageLock::acquire(&ctx.out)?;
    let mut summary = StageSummary::new("synth");

    let records = crate::data::generate_synthetic(&ctx.cfg.data)?;
    let dir = ctx.out.join("dataset");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    save_dataset(&dir, &records)?;

    let n_train = train_refs(&records).len();
    let n_test = test_refs(&records).len();
    let n_abnormal = records.iter().filter(|r| r.label == 1).count();
    summary.note("records", records.len());
    summary.note("train/test", format!("{n_train}/{n_test}"));
    summary.note("abnormal", n_abnormal);

    let outputs = hash_tree(&dir)?;
    write_stage_manifest(
        &dir.join("stage.json"),
        "synth",
        ctx,
        BTreeMap::from([("data".to_string(), ctx.cfg.data.seed)]),
        BTreeMap::new(),
        outputs,
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Stage: train-ae

pub fn stage_train_ae(
    ctx: &StageContext,
    role: EnsembleRole,
) -> Result<StageSummary, PipelineError> {
    let _lock = StageLock::acquire(&ctx.out)?;
    let mut summary = StageSummary::new(match role {
        EnsembleRole::Mixture => "train-ae (mixture)",
        EnsembleRole::NormalOnly => "train-ae (normal_only)",
    });

    let dataset_manifest = ctx.out.join("dataset").join("stage.json");
    require_stage(ctx, &mut summary, &dataset_manifest, "dataset", "synth")?;
    let records = load_dataset(&dataset_manifest_path(&ctx.out))?;
    let train = train_refs(&records);

    let cfg = ctx.cfg.ensemble_train_config();
    let (module, histories) = crate::discrepancy::train_ensemble(&train, role, &cfg)?;

    let dir = ctx.out.join("ensembles");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    save_ensemble(&dir, &role.to_string(), &module, &cfg)?;

    summary.note("members", module.members().len());
    summary.note("training slices", {
        match role {
            EnsembleRole::Mixture => train.len(),
            EnsembleRole::NormalOnly => train.iter().filter(|r| r.label == 0).count(),
        }
    });
    for (j, h) in histories.iter().enumerate() {
        if let Some(last) = h.last() {
            summary.note(&format!("member {j} final loss"), format!("{last:.6}"));
        }
    }
    summary.note("fingerprint", format!("{:016x}", module.fingerprint()));

    let inputs = hash_tree(&ctx.out.join("dataset"))?;
    let stem = role.to_string();
    let outputs: BTreeMap<String, String> = hash_tree(&dir)?
        .into_iter()
        .filter(|(name, _)| name.starts_with(&stem))
        .collect();
    write_stage_manifest(
        &dir.join(format!("{stem}.stage.json")),
        summary.stage,
        ctx,
        BTreeMap::from([("ensembles".to_string(), ctx.cfg.ensembles.seed)]),
        inputs,
        outputs,
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Stage: features

#[derive(Debug, Serialize, Deserialize)]
struct FeatureSetDescriptor {
    version: u32,
    count: usize,
    height: usize,
    width: usize,
    /// Record ids in map order (dataset manifest order).
    ids: Vec<String>,
    normalized: bool,
    maps_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    id: String,
    label: u8,
    split: Split,
    scores: DiscrepancyScores,
}

/// Per-slice min-max to [0, 1]; a constant map becomes all 0.5, matching the
/// score-normalization convention in the metrics module.
fn minmax_map(m: &mut Array2<f32>) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in m.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        m.mapv_inplace(|v| (v - lo) * inv);
    } else {
        m.fill(0.5);
    }
}

pub fn stage_features(ctx: &StageContext) -> Result<StageSummary, PipelineError> {
    let _lock = StageLock::acquire(&ctx.out)?;
    let mut summary = StageSummary::new("features");

    require_stage(
        ctx,
        &mut summary,
        &ctx.out.join("dataset").join("stage.json"),
        "dataset",
        "synth",
    )?;
    for role in [EnsembleRole::Mixture, EnsembleRole::NormalOnly] {
        require_stage(
            ctx,
            &mut summary,
            &ctx.out.join("ensembles").join(format!("{role}.stage.json")),
            &format!("{role} ensemble"),
            &format!("train-ae --role {role}"),
        )?;
    }

    let records = load_dataset(&dataset_manifest_path(&ctx.out))?;
    let (mixture, _) = load_ensemble(&ensemble_json_path(&ctx.out, EnsembleRole::Mixture))?;
    let (normal, _) = load_ensemble(&ensemble_json_path(&ctx.out, EnsembleRole::NormalOnly))?;
    let pair = EnsemblePair::new(mixture, normal)?;

    let mut maps = Vec::with_capacity(records.len());
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        let mut f = pair.features(&r.modalities)?;
        let scores = pair.scores(&r.modalities)?;
        if ctx.cfg.features.normalize {
            minmax_map(&mut f.inter);
            minmax_map(&mut f.intra);
        }
        maps.push(f);
        rows.push(ScoreRow {
            id: r.id.clone(),
            label: r.label,
            split: r.split,
            scores,
        });
    }

    let dir = ctx.out.join("features");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut flat: Vec<&Array2<f32>> = Vec::with_capacity(maps.len() * 2);
    for f in &maps {
        flat.push(&f.inter);
        flat.push(&f.intra);
    }
    write_f32_maps(&dir.join("maps.bin"), &flat)?;
    save_json(
        &dir.join("features.json"),
        &FeatureSetDescriptor {
            version: 1,
            count: records.len(),
            height: ctx.cfg.data.height,
            width: ctx.cfg.data.width,
            ids: records.iter().map(|r| r.id.clone()).collect(),
            normalized: ctx.cfg.features.normalize,
            maps_file: "maps.bin".to_string(),
        },
    )?;
    save_json(&dir.join("scores.json"), &rows)?;

    let mean_of = |label: u8, pick: &dyn Fn(&ScoreRow) -> f64| -> f64 {
        let vals: Vec<f64> = rows.iter().filter(|r| r.label == label).map(pick).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    summary.note("slices", records.len());
    summary.note(
        "mean inter (normal/abnormal)",
        format!(
            "{:.5}/{:.5}",
            mean_of(0, &|r| r.scores.inter_global),
            mean_of(1, &|r| r.scores.inter_global)
        ),
    );
    summary.note(
        "mean intra (normal/abnormal)",
        format!(
            "{:.5}/{:.5}",
            mean_of(0, &|r| r.scores.intra_global),
            mean_of(1, &|r| r.scores.intra_global)
        ),
    );

    let mut inputs = hash_tree(&ctx.out.join("dataset"))?;
    for (k, v) in hash_tree(&ctx.out.join("ensembles"))? {
        inputs.insert(format!("ensembles/{k}"), v);
    }
    let outputs = hash_tree(&dir)?;
    write_stage_manifest(
        &dir.join("stage.json"),
        "features",
        ctx,
        BTreeMap::new(),
        inputs,
        outputs,
    )?;
    Ok(summary)
}

/// Loads the feature maps back, keyed by record id.
fn load_feature_maps(
    out: &Path,
) -> Result<(FeatureSetDescriptor, Vec<DiscrepancyFeatures>), PipelineError> {
    let dir = out.join("features");
    let desc: FeatureSetDescriptor = load_json(&dir.join("features.json"))?;
    let flat = read_f32_maps(
        &dir.join(&desc.maps_file),
        desc.count * 2,
        desc.height,
        desc.width,
    )?;
    let mut maps = Vec::with_capacity(desc.count);
    let mut it = flat.into_iter();
    while let (Some(inter), Some(intra)) = (it.next(), it.next()) {
        maps.push(DiscrepancyFeatures { inter, intra });
    }
    Ok((desc, maps))
}

fn feature_index<'d>(desc: &'d FeatureSetDescriptor) -> BTreeMap<&'d str, usize> {
    desc.ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect()
}

// ---------------------------------------------------------------------------
// Stage: train-diff

pub fn stage_train_diff(ctx: &StageContext) -> Result<StageSummary, PipelineError> {
    let _lock = StageLock::acquire(&ctx.out)?;
    let mut summary = StageSummary::new("train-diff");

    require_stage(
        ctx,
        &mut summary,
        &ctx.out.join("dataset").join("stage.json"),
        "dataset",
        "synth",
    )?;
    let records = load_dataset(&dataset_manifest_path(&ctx.out))?;
    let train = train_refs(&records);

    let dcfg = ctx.cfg.denoiser_config();
    let wants_features = dcfg.variant.wants_inter();

    // Gather the training subset's maps only when the variant uses them; the
    // plain variant must be runnable without the ensemble stages existing.
    let subset_maps: Vec<DiscrepancyFeatures>;
    let source = if wants_features {
        require_stage(
            ctx,
            &mut summary,
            &ctx.out.join("features").join("stage.json"),
            "features",
            "features",
        )?;
        let (desc, maps) = load_feature_maps(&ctx.out)?;
        let index = feature_index(&desc);
        let mut picked = Vec::with_capacity(train.len());
        for r in &train {
            let &i = index.get(r.id.as_str()).ok_or_else(|| {
                PipelineError::Mismatch(format!("no feature maps for record {}", r.id))
            })?;
            picked.push(maps[i].clone());
        }
        subset_maps = picked;
        FeatureSource::Precomputed(&subset_maps)
    } else {
        FeatureSource::None
    };

    let mut net = Denoiser::<f32>::build(&dcfg, ctx.cfg.denoiser.seed)?;
    let tcfg = ctx.cfg.diffusion_train_config();
    let report = train_denoiser(&mut net, &train, source, &tcfg)?;

    let dir = ctx.out.join("diffusion");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    save_denoiser(&dir, "predictor", &net, ctx.cfg.denoiser.seed, &ctx.cfg.schedule)?;
    save_json(&dir.join("loss_history.json"), &report.epoch_losses)?;

    summary.note("variant", dcfg.variant);
    summary.note("training slices", train.len());
    summary.note("optimizer steps", report.steps);
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        summary.note("loss first/last", format!("{first:.5}/{last:.5}"));
    }
    summary.note("fingerprint", format!("{:016x}", net.fingerprint()));

    let mut inputs = hash_tree(&ctx.out.join("dataset"))?;
    if wants_features {
        for (k, v) in hash_tree(&ctx.out.join("features"))? {
            inputs.insert(format!("features/{k}"), v);
        }
    }
    let outputs = hash_tree(&dir)?;
    write_stage_manifest(
        &dir.join("stage.json"),
        "train-diff",
        ctx,
        BTreeMap::from([
            ("denoiser_init".to_string(), ctx.cfg.denoiser.seed),
            ("train".to_string(), ctx.cfg.train.seed),
        ]),
        inputs,
        outputs,
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Stage: sample

#[derive(Debug, Serialize, Deserialize)]
struct SampleSetDescriptor {
    version: u32,
    count: usize,
    height: usize,
    width: usize,
    ids: Vec<String>,
    n_samples: usize,
    threshold: f32,
    predictor_fingerprint: u64,
    prob_file: String,
    mask_file: String,
}

pub fn stage_sample(ctx: &StageContext) -> Result<StageSummary, PipelineError> {
    let _lock = StageLock::acquire(&ctx.out)?;
    let mut summary = StageSummary::new("sample");

    require_stage(
        ctx,
        &mut summary,
        &ctx.out.join("dataset").join("stage.json"),
        "dataset",
        "synth",
    )?;
    require_stage(
        ctx,
        &mut summary,
        &ctx.out.join("diffusion").join("stage.json"),
        "trained denoiser",
        "train-diff",
    )?;

    let records = load_dataset(&dataset_manifest_path(&ctx.out))?;
    let test = test_refs(&records);
    if test.is_empty() {
        return Err(PipelineError::Mismatch(
            "dataset has no test slices; raise data.test_fraction".to_string(),
        ));
    }

    let (net, spec, _) = load_denoiser(&ctx.out.join("diffusion").join("predictor.json"))?;
    let schedule = spec.build()?;
    let variant = net.config().variant;

    let features = if variant.wants_inter() {
        require_stage(
            ctx,
            &mut summary,
            &ctx.out.join("features").join("stage.json"),
            "features",
            "features",
        )?;
        Some(load_feature_maps(&ctx.out)?)
    } else {
        None
    };

    let (c, h, w) = (
        net.config().modalities,
        net.config().height,
        net.config().width,
    );
    let mut probs = Vec::with_capacity(test.len());
    let mut masks = Vec::with_capacity(test.len());
    for r in &test {
        let mut modalities = Array4::<f32>::zeros((1, c, h, w));
        modalities.slice_mut(s![0, .., .., ..]).assign(&r.modalities);
        let (inter, intra) = match &features {
            Some((desc, maps)) => {
                let index = feature_index(desc);
                let &i = index.get(r.id.as_str()).ok_or_else(|| {
                    PipelineError::Mismatch(format!("no feature maps for record {}", r.id))
                })?;
                let lift = |m: &Array2<f32>| m.clone().insert_axis(ndarray::Axis(0));
                (
                    variant.wants_inter().then(|| lift(&maps[i].inter)),
                    variant.wants_intra().then(|| lift(&maps[i].intra)),
                )
            }
            None => (None, None),
        };
        let pack = ConditioningPack {
            modalities,
            inter,
            intra,
        };
        let pred = predict_mask(&net, &schedule, &pack, &ctx.cfg.sampler)?;
        probs.push(pred.mean);
        masks.push(pred.mask);
    }

    let dir = ctx.out.join("samples");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_f32_maps(&dir.join("prob.bin"), &probs.iter().collect::<Vec<_>>())?;
    write_u8_maps(&dir.join("mask.bin"), &masks.iter().collect::<Vec<_>>())?;
    save_json(
        &dir.join("samples.json"),
        &SampleSetDescriptor {
            version: 1,
            count: test.len(),
            height: h,
            width: w,
            ids: test.iter().map(|r| r.id.clone()).collect(),
            n_samples: ctx.cfg.sampler.n_samples,
            threshold: ctx.cfg.sampler.threshold,
            predictor_fingerprint: net.fingerprint(),
            prob_file: "prob.bin".to_string(),
            mask_file: "mask.bin".to_string(),
        },
    )?;

    let lesion_fraction: f64 = masks
        .iter()
        .map(|m| m.iter().filter(|&&v| v == 1).count() as f64 / m.len() as f64)
        .sum::<f64>()
        / masks.len() as f64;
    summary.note("test slices", test.len());
    summary.note("trajectories per slice", ctx.cfg.sampler.n_samples);
    summary.note("mean predicted lesion fraction", format!("{lesion_fraction:.4}"));

    let mut inputs = hash_tree(&ctx.out.join("dataset"))?;
    for (k, v) in hash_tree(&ctx.out.join("diffusion"))? {
        inputs.insert(format!("diffusion/{k}"), v);
    }
    if features.is_some() {
        for (k, v) in hash_tree(&ctx.out.join("features"))? {
            inputs.insert(format!("features/{k}"), v);
        }
    }
    let outputs = hash_tree(&dir)?;
    write_stage_manifest(
        &dir.join("stage.json"),
        "sample",
        ctx,
        BTreeMap::from([("sampler".to_string(), ctx.cfg.sampler.seed)]),
        inputs,
        outputs,
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Stage: eval

#[derive(Debug, Serialize, Deserialize)]
struct SliceEvalRow {
    id: String,
    label: u8,
    dice: f64,
    miou: f64,
    pixel_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreAurocs {
    inter_global: f64,
    intra_global: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalReport {
    per_slice: Vec<SliceEvalRow>,
    aggregate: SegAggregate,
    /// Present when the features stage ran and the test split holds both
    /// classes.
    score_aurocs: Option<ScoreAurocs>,
    histograms: Option<HistogramReport>,
}

const HIST_BINS: usize = 20;

pub fn stage_eval(ctx: &StageContext) -> Result<StageSummary, PipelineError> {
    let _lock = StageLock::acquire(&ctx.out)?;
    let mut summary = StageSummary::new("eval");

    require_stage(
        ctx,
        &mut summary,
        &ctx.out.join("dataset").join("stage.json"),
        "dataset",
        "synth",
    )?;
    require_stage(
        ctx,
        &mut summary,
        &ctx.out.join("samples").join("stage.json"),
        "sampled masks",
        "sample",
    )?;

    let records = load_dataset(&dataset_manifest_path(&ctx.out))?;
    let test = test_refs(&records);
    let desc: SampleSetDescriptor = load_json(&ctx.out.join("samples").join("samples.json"))?;
    let masks = read_u8_maps(
        &ctx.out.join("samples").join(&desc.mask_file),
        desc.count,
        desc.height,
        desc.width,
    )?;
    if desc.ids != test.iter().map(|r| r.id.clone()).collect::<Vec<_>>() {
        return Err(PipelineError::Mismatch(
            "sampled mask ids do not match the dataset's test split; rerun `maskdiff sample`"
                .to_string(),
        ));
    }

    let mut per_slice = Vec::with_capacity(test.len());
    let mut seg_scores = Vec::with_capacity(test.len());
    for (r, m) in test.iter().zip(&masks) {
        let s = score_pair(m.view(), r.mask.view())?;
        per_slice.push(SliceEvalRow {
            id: r.id.clone(),
            label: r.label,
            dice: s.dice,
            miou: s.miou,
            pixel_accuracy: s.pa,
        });
        seg_scores.push(s);
    }
    let agg = aggregate(&seg_scores)?;

    // Score-based separation metrics ride on the features stage when present.
    let scores_path = ctx.out.join("features").join("scores.json");
    let (score_aurocs, histograms) = if scores_path.exists() {
        let rows: Vec<ScoreRow> = load_json(&scores_path)?;
        let test_rows: Vec<&ScoreRow> =
            rows.iter().filter(|r| r.split == Split::Test).collect();
        let normal_inter: Vec<f64> = test_rows
            .iter()
            .filter(|r| r.label == 0)
            .map(|r| r.scores.inter_global)
            .collect();
        let abnormal_inter: Vec<f64> = test_rows
            .iter()
            .filter(|r| r.label == 1)
            .map(|r| r.scores.inter_global)
            .collect();
        if normal_inter.is_empty() || abnormal_inter.is_empty() {
            summary
                .warnings
                .push("test split lacks one class; skipping score separation metrics".to_string());
            (None, None)
        } else {
            let normal_intra: Vec<f64> = test_rows
                .iter()
                .filter(|r| r.label == 0)
                .map(|r| r.scores.intra_global)
                .collect();
            let abnormal_intra: Vec<f64> = test_rows
                .iter()
                .filter(|r| r.label == 1)
                .map(|r| r.scores.intra_global)
                .collect();
            let aurocs = ScoreAurocs {
                inter_global: auroc(&normal_inter, &abnormal_inter)?,
                intra_global: auroc(&normal_intra, &abnormal_intra)?,
            };
            let score_list: Vec<DiscrepancyScores> =
                test_rows.iter().map(|r| r.scores.clone()).collect();
            let labels: Vec<u8> = test_rows.iter().map(|r| r.label).collect();
            let hist = histogram_report(&score_list, &labels, HIST_BINS)?;
            (Some(aurocs), Some(hist))
        }
    } else {
        summary.warnings.push(
            "features stage has not run; segmentation metrics only".to_string(),
        );
        (None, None)
    };

    let dir = ctx.out.join("eval");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let report = EvalReport {
        per_slice,
        aggregate: agg,
        score_aurocs,
        histograms,
    };
    save_json(&dir.join("report.json"), &report)?;

    let mut csv = String::from("id,label,dice,miou,pixel_accuracy\n");
    for row in &report.per_slice {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            row.id, row.label, row.dice, row.miou, row.pixel_accuracy
        ));
    }
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;

    summary.note("test slices", report.per_slice.len());
    summary.note("mean dice", format!("{:.4}", report.aggregate.mean.dice));
    summary.note("mean miou", format!("{:.4}", report.aggregate.mean.miou));
    if let Some(a) = &report.score_aurocs {
        summary.note("auroc inter/intra", format!("{:.4}/{:.4}", a.inter_global, a.intra_global));
    }

    let mut inputs = hash_tree(&ctx.out.join("dataset"))?;
    for (k, v) in hash_tree(&ctx.out.join("samples"))? {
        inputs.insert(format!("samples/{k}"), v);
    }
    if scores_path.exists() {
        let bytes = std::fs::read(&scores_path).map_err(io_err(&scores_path))?;
        inputs.insert("features/scores.json".to_string(), sha256_hex(&bytes));
    }
    let outputs = hash_tree(&dir)?;
    write_stage_manifest(
        &dir.join("stage.json"),
        "eval",
        ctx,
        BTreeMap::new(),
        inputs,
        outputs,
    )?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ConditioningVariant;
    use crate::discrepancy::{feature_ae_calls, COUNTER_LOCK};

    /// A config small enough that the whole pipeline runs in seconds.
    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.n_normal = 5;
        cfg.data.n_abnormal = 3;
        cfg.data.channels = 1;
        cfg.data.height = 32;
        cfg.data.width = 32;
        cfg.data.test_fraction = 0.25;
        cfg.schedule.steps = 8;
        cfg.ensembles.members = 2;
        cfg.ensembles.latent_dim = 4;
        cfg.ensembles.widths = vec![2, 2, 2, 2];
        cfg.ensembles.epochs = 1;
        cfg.ensembles.batch_size = 2;
        cfg.ensembles.lr = 1e-3;
        cfg.denoiser.base_width = 4;
        cfg.denoiser.depth = 2;
        cfg.denoiser.res_blocks = 1;
        cfg.denoiser.time_embed_dim = 8;
        cfg.denoiser.groups = 4;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 6;
        cfg.train.lr = 1e-3;
        cfg.sampler.n_samples = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn ctx_in(dir: &Path, cfg: ExperimentConfig) -> StageContext {
        StageContext::with_out_dir(cfg, dir.to_path_buf(), false)
    }

    #[test]
    fn plain_variant_pipeline_runs_without_ensembles() {
        let _guard = COUNTER_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.denoiser.variant = ConditioningVariant::Mini;
        let ctx = ctx_in(tmp.path(), cfg);

        let before = feature_ae_calls();
        stage_synth(&ctx).unwrap();
        stage_train_diff(&ctx).unwrap();
        stage_sample(&ctx).unwrap();
        let summary = stage_eval(&ctx).unwrap();
        assert_eq!(
            feature_ae_calls(),
            before,
            "plain conditioning must never query the ensembles"
        );

        assert!(summary
            .warnings
            .iter()
            .any(|w| w.contains("features stage has not run")));
        let report: EvalReport =
            load_json(&tmp.path().join("eval").join("report.json")).unwrap();
        assert_eq!(report.per_slice.len(), 2);
        assert!(report.score_aurocs.is_none());
        for row in &report.per_slice {
            assert!((0.0..=1.0).contains(&row.dice));
            assert!((0.0..=1.0).contains(&row.miou));
        }
        assert!(tmp.path().join("eval").join("report.csv").exists());
        assert!(!tmp.path().join(".lock").exists(), "lock released");
    }

    #[test]
    fn full_variant_pipeline_produces_score_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.denoiser.variant = ConditioningVariant::Full;
        let ctx = ctx_in(tmp.path(), cfg);

        stage_synth(&ctx).unwrap();
        stage_train_ae(&ctx, EnsembleRole::Mixture).unwrap();
        stage_train_ae(&ctx, EnsembleRole::NormalOnly).unwrap();
        stage_features(&ctx).unwrap();
        stage_train_diff(&ctx).unwrap();
        stage_sample(&ctx).unwrap();
        let summary = stage_eval(&ctx).unwrap();
        assert!(summary.warnings.is_empty(), "warnings: {:?}", summary.warnings);

        let report: EvalReport =
            load_json(&tmp.path().join("eval").join("report.json")).unwrap();
        let aurocs = report.score_aurocs.expect("score metrics present");
        assert!((0.0..=1.0).contains(&aurocs.inter_global));
        assert!((0.0..=1.0).contains(&aurocs.intra_global));
        let hist = report.histograms.expect("histograms present");
        assert!(hist.families.iter().any(|f| f.name == "inter_global"));

        // stage manifests exist and carry the right config hash
        for rel in [
            "dataset/stage.json",
            "ensembles/mixture.stage.json",
            "ensembles/normal_only.stage.json",
            "features/stage.json",
            "diffusion/stage.json",
            "samples/stage.json",
            "eval/stage.json",
        ] {
            let m: StageManifest = load_json(&tmp.path().join(rel)).unwrap();
            assert_eq!(m.config_hash, ctx.cfg.hash(), "{rel}");
            assert!(!m.outputs.is_empty() || m.stage == "eval");
        }
    }

    #[test]
    fn missing_prerequisites_name_the_fix() {
        let tmp = tempfile::tempdir().unwrap();
        let ctx = ctx_in(tmp.path(), tiny_cfg());
        let err = stage_features(&ctx).unwrap_err();
        match err {
            PipelineError::MissingPrerequisite { hint, .. } => {
                assert!(hint.contains("maskdiff synth"), "hint: {hint}");
            }
            other => panic!("expected MissingPrerequisite, got {other}"),
        }

        stage_synth(&ctx).unwrap();
        let err = stage_features(&ctx).unwrap_err();
        match err {
            PipelineError::MissingPrerequisite { what, hint } => {
                assert!(what.contains("mixture"), "what: {what}");
                assert!(hint.contains("train-ae"), "hint: {hint}");
            }
            other => panic!("expected MissingPrerequisite, got {other}"),
        }
    }

    #[test]
    fn lock_sentinel_blocks_and_releases() {
        let tmp = tempfile::tempdir().unwrap();
        let ctx = ctx_in(tmp.path(), tiny_cfg());

        let held = StageLock::acquire(tmp.path()).unwrap();
        let err = stage_synth(&ctx).unwrap_err();
        assert!(matches!(err, PipelineError::Locked(_)));
        drop(held);

        stage_synth(&ctx).unwrap();
        assert!(!tmp.path().join(".lock").exists());
    }

    #[test]
    fn strict_mode_rejects_config_drift() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        stage_synth(&ctx_in(tmp.path(), cfg.clone())).unwrap();

        let mut drifted = cfg;
        drifted.train.epochs += 1;
        drifted.denoiser.variant = ConditioningVariant::Mini;

        let strict = StageContext::with_out_dir(drifted.clone(), tmp.path().to_path_buf(), true);
        let err = stage_train_diff(&strict).unwrap_err();
        assert!(matches!(err, PipelineError::StaleInput { .. }));

        let lax = StageContext::with_out_dir(drifted, tmp.path().to_path_buf(), false);
        let summary = stage_train_diff(&lax).unwrap();
        assert!(summary
            .warnings
            .iter()
            .any(|w| w.contains("different config")));
    }

    #[test]
    fn normalize_flag_bounds_the_stored_maps() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.features.normalize = true;
        let ctx = ctx_in(tmp.path(), cfg);

        stage_synth(&ctx).unwrap();
        stage_train_ae(&ctx, EnsembleRole::Mixture).unwrap();
        stage_train_ae(&ctx, EnsembleRole::NormalOnly).unwrap();
        stage_features(&ctx).unwrap();

        let (desc, maps) = load_feature_maps(tmp.path()).unwrap();
        assert!(desc.normalized);
        for f in &maps {
            for m in [&f.inter, &f.intra] {
                let lo = m.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = m.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                assert!(lo >= 0.0 && hi <= 1.0, "normalized to [0,1]: {lo}..{hi}");
            }
        }
    }

    #[test]
    fn minmax_map_constant_convention() {
        let mut m = Array2::<f32>::from_elem((2, 2), 3.5);
        minmax_map(&mut m);
        assert!(m.iter().all(|&v| v == 0.5));

        let mut m = ndarray::arr2(&[[1.0f32, 3.0], [2.0, 1.0]]);
        minmax_map(&mut m);
        assert_eq!(m, ndarray::arr2(&[[0.0f32, 1.0], [0.5, 0.0]]));
    }
}
