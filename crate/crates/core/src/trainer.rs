//! Noise-prediction training loop for the mask denoiser.
//!
//! Each step draws a timestep and a Gaussian noise field per sample, noises
//! the signed mask to that timestep, and regresses the network's output onto
//! the drawn noise. Conditioning maps come from frozen ensembles (computed
//! once up front), from a caller-supplied cache, or not at all for the plain
//! variant; the three routes must be interchangeable where they overlap, and
//! tests hold them to that.

use crate::data::{derive_seed, SliceRecord};
use crate::denoiser::{ConditioningPack, Denoiser, DenoiserError};
use crate::discrepancy::{DiscrepancyError, DiscrepancyFeatures, EnsemblePair};
use crate::nn::adam::{Adam, AdamConfig};
use crate::schedule::{ScheduleError, ScheduleSpec};
use ndarray::{s, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("record {id}: {what} has shape {got:?}, the denoiser expects {expected:?}")]
    ShapeMismatch {
        id: String,
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("the configured conditioning variant needs discrepancy features but none were supplied")]
    MissingFeatureSource,
    #[error("plain conditioning takes no feature source; drop it or switch variants")]
    UnexpectedFeatureSource,
    #[error("feature cache holds {got} entries for {expected} records")]
    FeatureCountMismatch { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch} step {step}; aborting before the optimizer spreads it")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Discrepancy(#[from] DiscrepancyError),
}

/// Where the denoiser's conditioning maps come from during training.
pub enum FeatureSource<'a> {
    /// Plain variant only: modalities and the noisy mask, nothing else.
    None,
    /// Run the frozen ensembles over every record once before the loop.
    Ensembles(&'a EnsemblePair),
    /// Maps computed elsewhere, parallel to the record list.
    Precomputed(&'a [DiscrepancyFeatures]),
}

/// Hyperparameters for the denoiser loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub schedule: ScheduleSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::default(),
            epochs: 200,
            batch_size: 10,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// What the loop did, for logs and for tests that audit its draws.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean per-element loss across each epoch, sample-weighted.
    pub epoch_losses: Vec<f64>,
    /// How often each timestep was drawn; index `t - 1`.
    pub t_counts: Vec<u64>,
    /// Optimizer steps taken.
    pub steps: usize,
}

/// Maps a {0,1} mask to the {-1,+1} range the diffusion process runs in.
pub fn signed_mask(mask: &Array2<u8>) -> Array2<f32> {
    mask.mapv(|m| if m == 0 { -1.0 } else { 1.0 })
}

/// Mean squared error over all elements, accumulated in f64.
pub fn mse_loss(target: &Array4<f32>, pred: &Array4<f32>) -> f64 {
    debug_assert_eq!(target.shape(), pred.shape());
    let n = target.len().max(1) as f64;
    ndarray::Zip::from(target)
        .and(pred)
        .fold(0.0, |acc, &t, &p| acc + (p as f64 - t as f64).powi(2))
        / n
}

/// Gradient of [`mse_loss`] with respect to the prediction.
pub fn mse_grad(target: &Array4<f32>, pred: &Array4<f32>) -> Array4<f32> {
    debug_assert_eq!(target.shape(), pred.shape());
    let scale = (2.0 / target.len().max(1) as f64) as f32;
    (pred - target) * scale
}

fn stack_maps<'m>(
    maps: &'m [DiscrepancyFeatures],
    chunk: &[usize],
    pick: impl Fn(&'m DiscrepancyFeatures) -> &'m Array2<f32>,
    h: usize,
    w: usize,
) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros((chunk.len(), h, w));
    for (bi, &ri) in chunk.iter().enumerate() {
        out.slice_mut(s![bi, .., ..]).assign(pick(&maps[ri]));
    }
    out
}

/// Trains the denoiser in place and returns the loss history.
///
/// The ensembles (when given) are only read, and their fingerprint is checked
/// around the feature pass: this stage of the method treats them as frozen
/// inputs, never as trainable parts.
pub fn train_denoiser(
    net: &mut Denoiser<f32>,
    records: &[&SliceRecord],
    features: FeatureSource<'_>,
    cfg: &DiffusionTrainConfig,
) -> Result<TrainReport, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(TrainError::InvalidConfig(format!(
            "learning rate {} must be positive and finite",
            cfg.lr
        )));
    }

    let dcfg = net.config().clone();
    let (c, h, w) = (dcfg.modalities, dcfg.height, dcfg.width);
    for r in records {
        if r.modalities.dim() != (c, h, w) {
            return Err(TrainError::ShapeMismatch {
                id: r.id.clone(),
                what: "modalities",
                expected: vec![c, h, w],
                got: r.modalities.shape().to_vec(),
            });
        }
        if r.mask.dim() != (h, w) {
            return Err(TrainError::ShapeMismatch {
                id: r.id.clone(),
                what: "mask",
                expected: vec![h, w],
                got: r.mask.shape().to_vec(),
            });
        }
    }

    let wants_features = dcfg.variant.wants_inter();
    let computed: Vec<DiscrepancyFeatures>;
    let cache: Option<&[DiscrepancyFeatures]> = match features {
        FeatureSource::None => {
            if wants_features {
                return Err(TrainError::MissingFeatureSource);
            }
            None
        }
        FeatureSource::Ensembles(pair) => {
            if !wants_features {
                return Err(TrainError::UnexpectedFeatureSource);
            }
            let frozen = pair.fingerprint();
            computed = records
                .iter()
                .map(|r| pair.features(&r.modalities))
                .collect::<Result<_, _>>()?;
            assert_eq!(
                pair.fingerprint(),
                frozen,
                "ensembles must stay frozen while conditioning maps are computed"
            );
            Some(&computed)
        }
        FeatureSource::Precomputed(maps) => {
            if !wants_features {
                return Err(TrainError::UnexpectedFeatureSource);
            }
            if maps.len() != records.len() {
                return Err(TrainError::FeatureCountMismatch {
                    expected: records.len(),
                    got: maps.len(),
                });
            }
            Some(maps)
        }
    };
    if let Some(maps) = cache {
        for (r, f) in records.iter().zip(maps) {
            for (what, map) in [("inter map", &f.inter), ("intra map", &f.intra)] {
                if map.dim() != (h, w) {
                    return Err(TrainError::ShapeMismatch {
                        id: r.id.clone(),
                        what,
                        expected: vec![h, w],
                        got: map.shape().to_vec(),
                    });
                }
            }
        }
    }

    let schedule = cfg.schedule.build()?;
    let t_max = schedule.steps();
    let x0: Vec<Array2<f32>> = records.iter().map(|r| signed_mask(&r.mask)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7D1F));
    let mut opt = Adam::new(net.store(), AdamConfig::with_lr(cfg.lr));
    let mut idx: Vec<usize> = (0..records.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut t_counts = vec![0u64; t_max];
    let mut steps = 0usize;

    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (step, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let n = chunk.len();
            let mut modalities = Array4::<f32>::zeros((n, c, h, w));
            for (bi, &ri) in chunk.iter().enumerate() {
                modalities
                    .slice_mut(s![bi, .., .., ..])
                    .assign(&records[ri].modalities);
            }
            let pack = ConditioningPack {
                modalities,
                inter: cache.filter(|_| dcfg.variant.wants_inter()).map(|maps| {
                    stack_maps(maps, chunk, |f| &f.inter, h, w)
                }),
                intra: cache.filter(|_| dcfg.variant.wants_intra()).map(|maps| {
                    stack_maps(maps, chunk, |f| &f.intra, h, w)
                }),
            };

            let mut ts = Vec::with_capacity(n);
            let mut eps = Array4::<f32>::zeros((n, 1, h, w));
            let mut noisy = Array4::<f32>::zeros((n, 1, h, w));
            for (bi, &ri) in chunk.iter().enumerate() {
                let t = rng.random_range(1..=t_max);
                t_counts[t - 1] += 1;
                ts.push(t);
                let mut e = Array2::<f32>::zeros((h, w));
                for v in e.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let x_t = schedule.q_sample(x0[ri].view(), t, e.view())?;
                eps.slice_mut(s![bi, 0, .., ..]).assign(&e);
                noisy.slice_mut(s![bi, 0, .., ..]).assign(&x_t);
            }

            let x = pack.assemble(dcfg.variant, &noisy)?;
            let (eps_hat, tape) = net.forward_train(&x, &ts)?;
            let loss = mse_loss(&eps, &eps_hat);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            let dy = mse_grad(&eps, &eps_hat);
            net.store_mut().zero_grads();
            net.backward(&tape, &dy);
            opt.step(net.store_mut());
            steps += 1;
            loss_sum += loss * n as f64;
        }
        epoch_losses.push(loss_sum / records.len() as f64);
    }

    Ok(TrainReport {
        epoch_losses,
        t_counts,
        steps,
    })
}
