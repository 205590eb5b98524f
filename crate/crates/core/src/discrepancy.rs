//! Inter/intra discrepancy features from the two autoencoder ensembles.
//!
//! One ensemble (role `Mixture`) is trained on every slice, healthy or not;
//! the other (role `NormalOnly`) sees only healthy anatomy. Lesions are the
//! one thing the second ensemble systematically fails to reconstruct, so the
//! pixel-wise gap between the two ensembles' mean reconstructions (the
//! "inter" map) lights up on lesions, while the spread among the
//! normal-ensemble members (the "intra" map) captures ordinary model
//! uncertainty. Both maps condition the diffusion denoiser; their spatial
//! means serve as scalar anomaly scores.

use crate::autoencoder::{Autoencoder, AutoencoderConfig, ModelError};
use crate::data::{derive_seed, SliceRecord};
use crate::nn::adam::{Adam, AdamConfig};
use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiscrepancyError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no normal slices available for normal-only training")]
    NoNormalSlices,
    #[error("non-finite loss at member {member} epoch {epoch}")]
    NonFiniteLoss { member: usize, epoch: usize },
    #[error("ensemble built for role {expected} used as {got}")]
    RoleMismatch {
        expected: EnsembleRole,
        got: EnsembleRole,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which portion of the data an ensemble is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRole {
    /// Trained on the full mixture of healthy and lesioned slices.
    Mixture,
    /// Trained on healthy slices only.
    NormalOnly,
}

impl std::fmt::Display for EnsembleRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnsembleRole::Mixture => write!(f, "mixture"),
            EnsembleRole::NormalOnly => write!(f, "normal_only"),
        }
    }
}

/// Pixel-wise conditioning maps handed to the denoiser.
#[derive(Debug, Clone)]
pub struct DiscrepancyFeatures {
    /// Mean absolute gap between the two ensembles' mean reconstructions,
    /// averaged over modalities. Nonnegative.
    pub inter: Array2<f32>,
    /// Root-mean-square spread of the normal-only ensemble members around
    /// their own mean, pooled over members and modalities. Nonnegative.
    pub intra: Array2<f32>,
}

/// Scalar anomaly scores: spatial means of the feature maps, plus the same
/// quantities restricted to each modality channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyScores {
    pub inter_global: f64,
    pub intra_global: f64,
    pub inter_per_modality: Vec<f64>,
    pub intra_per_modality: Vec<f64>,
}

fn check_same_shape(a: &ArrayView3<'_, f32>, b: &ArrayView3<'_, f32>) -> Result<(), DiscrepancyError> {
    if a.shape() != b.shape() {
        return Err(DiscrepancyError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `(1/C) * sum_c |mu_mixture[c] - mu_normal[c]|` per pixel.
pub fn inter_discrepancy(
    mu_mixture: ArrayView3<'_, f32>,
    mu_normal: ArrayView3<'_, f32>,
) -> Result<Array2<f32>, DiscrepancyError> {
    check_same_shape(&mu_mixture, &mu_normal)?;
    let (c, h, w) = (mu_mixture.shape()[0], mu_mixture.shape()[1], mu_mixture.shape()[2]);
    let mut out = Array2::<f32>::zeros((h, w));
    let mut acc = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        let a = mu_mixture.index_axis(Axis(0), ch);
        let b = mu_normal.index_axis(Axis(0), ch);
        ndarray::Zip::from(&mut acc).and(&a).and(&b).for_each(|s, &x, &y| {
            *s += (x as f64 - y as f64).abs();
        });
    }
    let inv_c = 1.0 / c as f64;
    ndarray::Zip::from(&mut out).and(&acc).for_each(|o, &s| *o = (s * inv_c) as f32);
    Ok(out)
}

/// `sqrt( (1/L)(1/C) * sum_j sum_c (member_j[c] - mu[c])^2 )` per pixel.
///
/// `members` are the normal-only ensemble outputs and `mu` their mean; the
/// mean is passed in rather than recomputed so that the caller's averaging
/// (which also feeds the inter map) is the single source of truth.
pub fn intra_discrepancy(
    members: &[Array3<f32>],
    mu: ArrayView3<'_, f32>,
) -> Result<Array2<f32>, DiscrepancyError> {
    if members.len() < 2 {
        return Err(DiscrepancyError::TooFewMembers(members.len()));
    }
    for m in members {
        check_same_shape(&m.view(), &mu)?;
    }
    let (c, h, w) = (mu.shape()[0], mu.shape()[1], mu.shape()[2]);
    let mut acc = Array2::<f64>::zeros((h, w));
    for m in members {
        for ch in 0..c {
            let a = m.index_axis(Axis(0), ch);
            let b = mu.index_axis(Axis(0), ch);
            ndarray::Zip::from(&mut acc).and(&a).and(&b).for_each(|s, &x, &y| {
                let d = x as f64 - y as f64;
                *s += d * d;
            });
        }
    }
    let norm = 1.0 / (members.len() as f64 * c as f64);
    let mut out = Array2::<f32>::zeros((h, w));
    ndarray::Zip::from(&mut out).and(&acc).for_each(|o, &s| *o = (s * norm).sqrt() as f32);
    Ok(out)
}

/// Average of member outputs (the ensemble's reconstruction of `b`).
pub fn mean_of_members(members: &[Array3<f32>]) -> Result<Array3<f32>, DiscrepancyError> {
    let first = members.first().ok_or(DiscrepancyError::EmptyDataset)?;
    let mut acc = Array3::<f64>::zeros(first.raw_dim());
    for m in members {
        check_same_shape(&m.view(), &first.view())?;
        ndarray::Zip::from(&mut acc).and(m).for_each(|s, &x| *s += x as f64);
    }
    let inv = 1.0 / members.len() as f64;
    Ok(acc.mapv(|s| (s * inv) as f32))
}

/// Builds both conditioning maps from raw ensemble outputs.
pub fn features_from_outputs(
    mu_mixture: ArrayView3<'_, f32>,
    mu_normal: ArrayView3<'_, f32>,
    members_normal: &[Array3<f32>],
) -> Result<DiscrepancyFeatures, DiscrepancyError> {
    Ok(DiscrepancyFeatures {
        inter: inter_discrepancy(mu_mixture, mu_normal)?,
        intra: intra_discrepancy(members_normal, mu_normal)?,
    })
}

fn spatial_mean(map: &Array2<f32>) -> f64 {
    let n = map.len().max(1) as f64;
    map.iter().map(|&v| v as f64).sum::<f64>() / n
}

/// Global and per-modality scalar scores from raw ensemble outputs.
///
/// Per-modality variants restrict the channel sum in both formulas to one
/// channel `c` (the `1/C` factor drops out).
pub fn scores_from_outputs(
    mu_mixture: ArrayView3<'_, f32>,
    mu_normal: ArrayView3<'_, f32>,
    members_normal: &[Array3<f32>],
) -> Result<DiscrepancyScores, DiscrepancyError> {
    let features = features_from_outputs(mu_mixture, mu_normal, members_normal)?;
    let c = mu_mixture.shape()[0];
    let mut inter_per_modality = Vec::with_capacity(c);
    let mut intra_per_modality = Vec::with_capacity(c);
    for ch in 0..c {
        let a = mu_mixture.index_axis(Axis(0), ch).insert_axis(Axis(0));
        let b = mu_normal.index_axis(Axis(0), ch).insert_axis(Axis(0));
        let members_ch: Vec<Array3<f32>> = members_normal
            .iter()
            .map(|m| m.index_axis(Axis(0), ch).insert_axis(Axis(0)).to_owned())
            .collect();
        inter_per_modality.push(spatial_mean(&inter_discrepancy(a.view(), b.view())?));
        intra_per_modality.push(spatial_mean(&intra_discrepancy(&members_ch, b.view())?));
    }
    Ok(DiscrepancyScores {
        inter_global: spatial_mean(&features.inter),
        intra_global: spatial_mean(&features.intra),
        inter_per_modality,
        intra_per_modality,
    })
}

// ---------------------------------------------------------------------------
// Trained ensembles

/// Counter for autoencoder forward passes made while computing conditioning
/// features. The plain-conditioning denoiser variant must never trigger one;
/// tests assert that by sampling this counter around a run.
static FEATURE_AE_CALLS: AtomicU64 = AtomicU64::new(0);

pub fn feature_ae_calls() -> u64 {
    FEATURE_AE_CALLS.load(Ordering::Relaxed)
}

pub fn reset_feature_ae_calls() {
    FEATURE_AE_CALLS.store(0, Ordering::Relaxed);
}

// Unit tests that read the counter take this lock so a concurrently running
// test in another module cannot inflate their deltas.
#[cfg(test)]
pub(crate) static COUNTER_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// Hyperparameters for training one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTrainConfig {
    pub ae: AutoencoderConfig,
    /// Number of members (at least 2; the intra map needs a spread).
    pub members: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EnsembleTrainConfig {
    fn default() -> Self {
        Self {
            ae: AutoencoderConfig::default(),
            members: 3,
            epochs: 200,
            batch_size: 10,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// An ensemble of independently initialized autoencoders sharing one role.
#[derive(Debug, Clone)]
pub struct EnsembleModule {
    role: EnsembleRole,
    member_seeds: Vec<u64>,
    members: Vec<Autoencoder<f32>>,
}

impl EnsembleModule {
    /// Assembles an ensemble from already-built members (used by training
    /// and by checkpoint loading).
    pub fn from_parts(
        role: EnsembleRole,
        member_seeds: Vec<u64>,
        members: Vec<Autoencoder<f32>>,
    ) -> Result<Self, DiscrepancyError> {
        if members.len() < 2 {
            return Err(DiscrepancyError::TooFewMembers(members.len()));
        }
        assert_eq!(member_seeds.len(), members.len(), "one seed per member");
        Ok(Self {
            role,
            member_seeds,
            members,
        })
    }

    pub fn role(&self) -> EnsembleRole {
        self.role
    }

    pub fn member_seeds(&self) -> &[u64] {
        &self.member_seeds
    }

    pub fn members(&self) -> &[Autoencoder<f32>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Autoencoder<f32>] {
        &mut self.members
    }

    /// Order-sensitive digest of every member's parameters. Changes when any
    /// weight changes; used to assert the ensembles stay frozen during
    /// downstream training.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for m in &self.members {
            for byte in m.store().fingerprint().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }

    /// Runs every member on one slice. This is the feature path, so it
    /// advances the forward-call counter by the member count.
    pub fn reconstruct_members(&self, b: &Array3<f32>) -> Result<Vec<Array3<f32>>, DiscrepancyError> {
        FEATURE_AE_CALLS.fetch_add(self.members.len() as u64, Ordering::Relaxed);
        self.members
            .iter()
            .map(|m| m.reconstruct(b).map_err(DiscrepancyError::from))
            .collect()
    }

    /// Member outputs plus their pixel-wise mean.
    pub fn reconstruct_mean(
        &self,
        b: &Array3<f32>,
    ) -> Result<(Array3<f32>, Vec<Array3<f32>>), DiscrepancyError> {
        let members = self.reconstruct_members(b)?;
        let mu = mean_of_members(&members)?;
        Ok((mu, members))
    }
}

fn gather_batch(records: &[&SliceRecord], idx: &[usize]) -> Array4<f32> {
    let (c, h, w) = records[idx[0]].modalities.dim();
    let mut x = Array4::<f32>::zeros((idx.len(), c, h, w));
    for (bi, &ri) in idx.iter().enumerate() {
        x.index_axis_mut(Axis(0), bi).assign(&records[ri].modalities);
    }
    x
}

/// Trains one ensemble on the given training records. The role decides the
/// subset: `Mixture` sees every record, `NormalOnly` only those with label 0.
/// Members are trained independently (fresh init, own shuffle stream, own
/// optimizer) against per-element mean squared reconstruction error.
///
/// Returns the ensemble and per-member average epoch losses.
pub fn train_ensemble(
    records: &[&SliceRecord],
    role: EnsembleRole,
    cfg: &EnsembleTrainConfig,
) -> Result<(EnsembleModule, Vec<Vec<f64>>), DiscrepancyError> {
    if records.is_empty() {
        return Err(DiscrepancyError::EmptyDataset);
    }
    if cfg.members < 2 {
        return Err(DiscrepancyError::TooFewMembers(cfg.members));
    }
    let subset: Vec<&SliceRecord> = match role {
        EnsembleRole::Mixture => records.to_vec(),
        EnsembleRole::NormalOnly => records.iter().filter(|r| r.label == 0).copied().collect(),
    };
    if subset.is_empty() {
        return Err(DiscrepancyError::NoNormalSlices);
    }
    for r in &subset {
        let (c, h, w) = r.modalities.dim();
        if (c, h, w) != (cfg.ae.in_channels, cfg.ae.height, cfg.ae.width) {
            return Err(DiscrepancyError::ShapeMismatch {
                left: vec![c, h, w],
                right: vec![cfg.ae.in_channels, cfg.ae.height, cfg.ae.width],
            });
        }
    }

    let role_tag = match role {
        EnsembleRole::Mixture => 1u64,
        EnsembleRole::NormalOnly => 2u64,
    };
    let batch = cfg.batch_size.max(1);
    let mut members = Vec::with_capacity(cfg.members);
    let mut member_seeds = Vec::with_capacity(cfg.members);
    let mut histories = Vec::with_capacity(cfg.members);

    for j in 0..cfg.members {
        let member_seed = derive_seed(cfg.seed, (role_tag << 32) | j as u64);
        member_seeds.push(member_seed);
        let mut ae = Autoencoder::<f32>::build(&cfg.ae, member_seed)?;
        let mut opt = Adam::new(ae.store(), AdamConfig::with_lr(cfg.lr));
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(member_seed, 0x5848));
        let mut idx: Vec<usize> = (0..subset.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            idx.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0f64;
            let mut batches = 0usize;
            for chunk in idx.chunks(batch) {
                let x = gather_batch(&subset, chunk);
                let (y, tape) = ae.forward_train(&x)?;
                let n_elems = y.len() as f64;
                let loss = y
                    .iter()
                    .zip(x.iter())
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / n_elems;
                if !loss.is_finite() {
                    return Err(DiscrepancyError::NonFiniteLoss { member: j, epoch });
                }
                let scale = (2.0 / n_elems) as f32;
                let dy = (&y - &x) * scale;
                ae.store_mut().zero_grads();
                ae.backward(&tape, &dy);
                opt.step(ae.store_mut());
                epoch_loss += loss;
                batches += 1;
            }
            history.push(epoch_loss / batches as f64);
        }
        members.push(ae);
        histories.push(history);
    }

    let module = EnsembleModule::from_parts(role, member_seeds, members)?;
    Ok((module, histories))
}

/// The two trained ensembles bundled for feature computation.
#[derive(Debug, Clone)]
pub struct EnsemblePair {
    mixture: EnsembleModule,
    normal: EnsembleModule,
}

impl EnsemblePair {
    pub fn new(mixture: EnsembleModule, normal: EnsembleModule) -> Result<Self, DiscrepancyError> {
        if mixture.role() != EnsembleRole::Mixture {
            return Err(DiscrepancyError::RoleMismatch {
                expected: EnsembleRole::Mixture,
                got: mixture.role(),
            });
        }
        if normal.role() != EnsembleRole::NormalOnly {
            return Err(DiscrepancyError::RoleMismatch {
                expected: EnsembleRole::NormalOnly,
                got: normal.role(),
            });
        }
        Ok(Self { mixture, normal })
    }

    pub fn mixture(&self) -> &EnsembleModule {
        &self.mixture
    }

    pub fn normal(&self) -> &EnsembleModule {
        &self.normal
    }

    pub fn fingerprint(&self) -> u64 {
        self.mixture.fingerprint() ^ self.normal.fingerprint().rotate_left(17)
    }

    /// Conditioning maps for one slice: run both ensembles, average, compare.
    pub fn features(&self, b: &Array3<f32>) -> Result<DiscrepancyFeatures, DiscrepancyError> {
        let (mu1, _) = self.mixture.reconstruct_mean(b)?;
        let (mu2, members2) = self.normal.reconstruct_mean(b)?;
        features_from_outputs(mu1.view(), mu2.view(), &members2)
    }

    /// Scalar anomaly scores for one slice.
    pub fn scores(&self, b: &Array3<f32>) -> Result<DiscrepancyScores, DiscrepancyError> {
        let (mu1, _) = self.mixture.reconstruct_mean(b)?;
        let (mu2, members2) = self.normal.reconstruct_mean(b)?;
        scores_from_outputs(mu1.view(), mu2.view(), &members2)
    }
}
