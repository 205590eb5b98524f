//! Reverse-diffusion sampling of segmentation masks.
//!
//! A single trajectory starts from unit Gaussian noise and walks the
//! schedule backwards, asking the noise model for its prediction at every
//! step. The conditioning maps are fixed for the whole trajectory; only the
//! mask channel evolves. Because one trajectory is itself a random variable,
//! the final prediction averages several independently seeded trajectories
//! and thresholds the mean.

use crate::data::SliceRecord;
use crate::denoiser::{ConditioningPack, DenoiserError, NoiseModel};
use crate::schedule::{NoiseSchedule, ScheduleError};
use ndarray::{s, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("sampling runs one slice at a time; the pack holds {0} slices")]
    BatchedPack(usize),
    #[error("snapshot step {step} outside the schedule's 1..={steps}")]
    SnapshotOutOfRange { step: usize, steps: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Whether the reverse walk adds the schedule's per-step Gaussian kick.
/// `Deterministic` pins every injected draw to zero, which turns the walk
/// into a repeatable function of its starting noise; useful for closed-loop
/// checks against a known clean input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseInjection {
    Stochastic,
    Deterministic,
}

/// Options for one trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryOptions {
    pub seed: u64,
    /// Record the raw mask-channel state when the walk reaches these steps,
    /// before the model runs there. Values must lie in `1..=steps`.
    pub snapshot_steps: Vec<usize>,
    pub inject: NoiseInjection,
}

impl TrajectoryOptions {
    pub fn stochastic(seed: u64) -> Self {
        Self {
            seed,
            snapshot_steps: Vec::new(),
            inject: NoiseInjection::Stochastic,
        }
    }
}

/// One finished trajectory.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Final state mapped from signed mask space to [0, 1].
    pub probability: Array2<f32>,
    /// Requested intermediate states, raw (signed, unclamped), keyed by the
    /// step at which they were observed, in descending step order.
    pub snapshots: Vec<(usize, Array2<f32>)>,
}

/// Averaging and thresholding knobs for the final prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Trajectories to average; trajectory `i` is seeded `seed + i`.
    pub n_samples: usize,
    /// A pixel becomes lesion when the averaged probability is strictly
    /// greater than this.
    pub threshold: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 5,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.n_samples == 0 {
            return Err(SampleError::InvalidConfig("n_samples must be positive".into()));
        }
        if !(self.threshold.is_finite() && (0.0..1.0).contains(&self.threshold)) {
            return Err(SampleError::InvalidConfig(format!(
                "threshold {} must lie in [0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Averaged trajectories plus the thresholded mask.
#[derive(Debug, Clone)]
pub struct MaskPrediction {
    /// Per-trajectory probability maps, in seed order.
    pub samples: Vec<Array2<f32>>,
    /// Pixelwise mean of `samples`.
    pub mean: Array2<f32>,
    /// `mean > threshold`.
    pub mask: Array2<u8>,
}

/// Signed mask space to probability space: `(x + 1) / 2`, clamped to [0, 1].
pub fn to_probability(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Strictly-greater threshold; ties fall to background.
pub fn threshold_mask(prob: &Array2<f32>, threshold: f32) -> Array2<u8> {
    prob.mapv(|p| u8::from(p > threshold))
}

fn checksum_pack(pack: &ConditioningPack<f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f32| {
        h ^= u64::from(v.to_bits());
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    pack.modalities.iter().copied().for_each(&mut eat);
    if let Some(m) = &pack.inter {
        m.iter().copied().for_each(&mut eat);
    }
    if let Some(m) = &pack.intra {
        m.iter().copied().for_each(&mut eat);
    }
    h
}

/// Runs one reverse trajectory for a single slice and returns the final
/// probability map.
///
/// The conditioning pack must describe exactly one slice and is treated as
/// constant for the whole walk; a checksum asserts nothing drifted while the
/// model was being queried.
pub fn sample_mask<M: NoiseModel<f32>>(
    model: &M,
    schedule: &NoiseSchedule,
    pack: &ConditioningPack<f32>,
    opts: &TrajectoryOptions,
) -> Result<SampleOutput, SampleError> {
    let (n, _, h, w) = pack.modalities.dim();
    if n != 1 {
        return Err(SampleError::BatchedPack(n));
    }
    let steps = schedule.steps();
    for &t in &opts.snapshot_steps {
        if t == 0 || t > steps {
            return Err(SampleError::SnapshotOutOfRange { step: t, steps });
        }
    }
    let frozen = checksum_pack(pack);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = Array4::<f32>::zeros((1, 1, h, w));
    for v in x.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }

    let mut snapshots = Vec::with_capacity(opts.snapshot_steps.len());
    let zeros = Array4::<f32>::zeros((1, 1, h, w));
    for t in (1..=steps).rev() {
        if opts.snapshot_steps.contains(&t) {
            snapshots.push((t, x.slice(s![0, 0, .., ..]).to_owned()));
        }
        let eps_hat = model.predict(pack, &x, &[t])?;
        let z = if t > 1 && opts.inject == NoiseInjection::Stochastic {
            let mut z = Array4::<f32>::zeros((1, 1, h, w));
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            z
        } else {
            zeros.clone()
        };
        x = schedule.reverse_step(x.view(), eps_hat.view(), t, z.view())?;
    }

    assert_eq!(
        checksum_pack(pack),
        frozen,
        "conditioning must stay constant across the walk"
    );
    Ok(SampleOutput {
        probability: to_probability(&x.slice(s![0, 0, .., ..]).to_owned()),
        snapshots,
    })
}

/// Full prediction for one slice: average `n_samples` independently seeded
/// trajectories, then threshold the mean. Each trajectory depends only on
/// its own seed, so the set of maps is the same regardless of the order
/// they are produced in.
pub fn predict_mask<M: NoiseModel<f32>>(
    model: &M,
    schedule: &NoiseSchedule,
    pack: &ConditioningPack<f32>,
    cfg: &SamplerConfig,
) -> Result<MaskPrediction, SampleError> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let opts = TrajectoryOptions::stochastic(cfg.seed + i as u64);
        samples.push(sample_mask(model, schedule, pack, &opts)?.probability);
    }
    let (h, w) = samples[0].dim();
    let mut acc = Array2::<f64>::zeros((h, w));
    for s in &samples {
        ndarray::Zip::from(&mut acc).and(s).for_each(|a, &v| *a += v as f64);
    }
    let inv = 1.0 / cfg.n_samples as f64;
    let mean = acc.mapv(|a| (a * inv) as f32);
    let mask = threshold_mask(&mean, cfg.threshold);
    Ok(MaskPrediction { samples, mean, mask })
}

/// Convenience for evaluation flows: a plain conditioning pack around one
/// record's modalities.
pub fn pack_for_record(record: &SliceRecord) -> ConditioningPack<f32> {
    let (c, h, w) = record.modalities.dim();
    let mut modalities = Array4::<f32>::zeros((1, c, h, w));
    modalities
        .slice_mut(s![0, .., .., ..])
        .assign(&record.modalities);
    ConditioningPack::plain(modalities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ConditioningVariant, Denoiser, DenoiserConfig};
    use crate::schedule::NoiseSchedule;
    use ndarray::Array3;

    /// A model that always knows exactly which noise was mixed in: given the
    /// clean target, solve the forward-noising identity for the noise term.
    struct PerfectOracle {
        x0: Array4<f32>,
        abar: Vec<f64>,
    }

    impl NoiseModel<f32> for PerfectOracle {
        fn variant(&self) -> ConditioningVariant {
            ConditioningVariant::Mini
        }

        fn predict(
            &self,
            _pack: &ConditioningPack<f32>,
            noisy: &Array4<f32>,
            ts: &[usize],
        ) -> Result<Array4<f32>, DenoiserError> {
            let ab = self.abar[ts[0] - 1];
            let signal = ab.sqrt();
            let inv_noise = 1.0 / (1.0 - ab).sqrt();
            let mut out = Array4::<f32>::zeros(noisy.raw_dim());
            ndarray::Zip::from(&mut out)
                .and(noisy)
                .and(&self.x0)
                .for_each(|o, &xt, &x0| {
                    *o = ((xt as f64 - signal * x0 as f64) * inv_noise) as f32;
                });
            Ok(out)
        }
    }

    fn blob_target(h: usize, w: usize) -> Array4<f32> {
        let mut x0 = Array4::<f32>::from_elem((1, 1, h, w), -1.0);
        for i in h / 4..3 * h / 4 {
            for j in w / 4..3 * w / 4 {
                x0[[0, 0, i, j]] = 1.0;
            }
        }
        x0
    }

    fn plain_pack(h: usize, w: usize) -> ConditioningPack<f32> {
        ConditioningPack::plain(Array4::<f32>::zeros((1, 1, h, w)))
    }

    fn tiny_net(seed: u64) -> Denoiser<f32> {
        let cfg = DenoiserConfig {
            modalities: 1,
            height: 32,
            width: 32,
            variant: ConditioningVariant::Mini,
            base_width: 4,
            depth: 2,
            res_blocks: 1,
            time_embed_dim: 8,
            groups: 4,
        };
        Denoiser::<f32>::build(&cfg, seed).unwrap()
    }

    #[test]
    fn perfect_noise_knowledge_recovers_the_target() {
        let (h, w) = (16, 16);
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = blob_target(h, w);
        let oracle = PerfectOracle {
            x0: x0.clone(),
            abar: schedule.alpha_bar_table().to_vec(),
        };
        let opts = TrajectoryOptions {
            seed: 4,
            snapshot_steps: Vec::new(),
            inject: NoiseInjection::Deterministic,
        };
        let out = sample_mask(&oracle, &schedule, &plain_pack(h, w), &opts).unwrap();
        let want = to_probability(&x0.slice(s![0, 0, .., ..]).to_owned());
        let worst = out
            .probability
            .iter()
            .zip(want.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-4, "worst pixel error {worst}");
    }

    #[test]
    fn trajectory_is_a_function_of_its_seed() {
        let net = tiny_net(3);
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let pack = plain_pack(32, 32);
        let a = sample_mask(&net, &schedule, &pack, &TrajectoryOptions::stochastic(5)).unwrap();
        let b = sample_mask(&net, &schedule, &pack, &TrajectoryOptions::stochastic(5)).unwrap();
        let c = sample_mask(&net, &schedule, &pack, &TrajectoryOptions::stochastic(6)).unwrap();
        assert_eq!(a.probability, b.probability);
        assert_ne!(a.probability, c.probability);
    }

    #[test]
    fn noise_injection_mode_changes_the_walk() {
        let net = tiny_net(3);
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let pack = plain_pack(32, 32);
        let det = TrajectoryOptions {
            inject: NoiseInjection::Deterministic,
            ..TrajectoryOptions::stochastic(5)
        };
        let a = sample_mask(&net, &schedule, &pack, &TrajectoryOptions::stochastic(5)).unwrap();
        let b = sample_mask(&net, &schedule, &pack, &det).unwrap();
        assert_ne!(a.probability, b.probability);
    }

    #[test]
    fn averaged_samples_depend_only_on_their_own_seeds() {
        let net = tiny_net(7);
        let schedule = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let pack = plain_pack(32, 32);
        let cfg = SamplerConfig {
            n_samples: 3,
            threshold: 0.5,
            seed: 20,
        };
        let pred = predict_mask(&net, &schedule, &pack, &cfg).unwrap();
        assert_eq!(pred.samples.len(), 3);

        // regenerate each trajectory in reverse order; same maps come out
        for (i, sample) in pred.samples.iter().enumerate().rev() {
            let solo = sample_mask(
                &net,
                &schedule,
                &pack,
                &TrajectoryOptions::stochastic(cfg.seed + i as u64),
            )
            .unwrap();
            assert_eq!(&solo.probability, sample);
        }

        // and the mean is the plain average of those maps
        let (h, w) = pred.mean.dim();
        for i in 0..h {
            for j in 0..w {
                let m: f64 = pred.samples.iter().map(|s| s[[i, j]] as f64).sum::<f64>() / 3.0;
                assert!((pred.mean[[i, j]] as f64 - m).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn probability_mapping_and_threshold_edges() {
        let x = ndarray::arr2(&[[-3.0f32, -1.0, 0.0], [1.0, 3.0, 0.5]]);
        let p = to_probability(&x);
        assert_eq!(p, ndarray::arr2(&[[0.0f32, 0.0, 0.5], [1.0, 1.0, 0.75]]));

        // exactly 0.5 stays background; anything above flips
        let prob = ndarray::arr2(&[[0.5f32, 0.5 + 1e-6], [0.49, 1.0]]);
        let mask = threshold_mask(&prob, 0.5);
        assert_eq!(mask, ndarray::arr2(&[[0u8, 1], [0, 1]]));
    }

    #[test]
    fn snapshots_are_taken_where_asked() {
        let (h, w) = (16, 16);
        let schedule = NoiseSchedule::linear(12, 1e-4, 0.02).unwrap();
        let x0 = blob_target(h, w);
        let oracle = PerfectOracle {
            x0,
            abar: schedule.alpha_bar_table().to_vec(),
        };
        let opts = TrajectoryOptions {
            seed: 9,
            snapshot_steps: vec![12, 6, 1],
            inject: NoiseInjection::Stochastic,
        };
        let out = sample_mask(&oracle, &schedule, &plain_pack(h, w), &opts).unwrap();
        let keys: Vec<usize> = out.snapshots.iter().map(|(t, _)| *t).collect();
        assert_eq!(keys, vec![12, 6, 1]);
        for (_, snap) in &out.snapshots {
            assert_eq!(snap.dim(), (h, w));
        }

        let bad = TrajectoryOptions {
            seed: 9,
            snapshot_steps: vec![13],
            inject: NoiseInjection::Stochastic,
        };
        let err = sample_mask(&oracle, &schedule, &plain_pack(h, w), &bad).unwrap_err();
        assert!(matches!(
            err,
            SampleError::SnapshotOutOfRange { step: 13, steps: 12 }
        ));
    }

    #[test]
    fn sampler_config_is_validated() {
        assert!(SamplerConfig::default().validate().is_ok());
        let bad = SamplerConfig {
            n_samples: 0,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig {
            threshold: 1.0,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn record_pack_wraps_modalities_unchanged() {
        let record = SliceRecord {
            id: "s0".into(),
            modalities: Array3::<f32>::from_elem((2, 4, 4), 0.25),
            mask: Array2::<u8>::zeros((4, 4)),
            label: 0,
            split: crate::data::Split::Test,
        };
        let pack = pack_for_record(&record);
        assert_eq!(pack.modalities.dim(), (1, 2, 4, 4));
        assert!(pack.inter.is_none() && pack.intra.is_none());
        assert_eq!(pack.modalities[[0, 1, 2, 3]], 0.25);
    }
}
