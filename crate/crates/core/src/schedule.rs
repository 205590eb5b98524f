//! Closed-form diffusion arithmetic: the noise schedule, forward noising,
//! and the single reverse denoising step. No learned parameters live here.
//!
//! Step indices are 1-based everywhere in the public API. Tables are built
//! once in f64 and the elementwise ops run their arithmetic in f64 even
//! though the image buffers are f32, so repeated steps don't accumulate
//! single-precision drift.

use ndarray::{Array, ArrayView, Dimension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("beta range ({start}, {end}) invalid: need 0 < start <= end < 1")]
    InvalidBetaRange { start: f64, end: f64 },
    #[error("step {t} out of range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
}

/// Serializable recipe for a schedule, kept in configs and checkpoints so a
/// trained predictor is always paired with the exact noise process it was
/// trained against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed per-step constants of the diffusion process.
///
/// `sigma` holds the reverse-step noise scale: `sqrt(beta[t])` for every step
/// except the last one taken (t=1), which is pinned to 0 so the final
/// denoising step is deterministic.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule whose `beta` interpolates linearly from `beta_start`
    /// to `beta_end` over `steps` steps (a single step uses `beta_start`).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, ScheduleError> {
        if steps == 0 {
            return Err(ScheduleError::EmptySchedule);
        }
        let ok = beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0;
        if !ok {
            return Err(ScheduleError::InvalidBetaRange {
                start: beta_start,
                end: beta_end,
            });
        }

        let mut beta = Vec::with_capacity(steps);
        let mut alpha = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        let mut running = 1.0f64;
        for i in 0..steps {
            let b = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            let a = 1.0 - b;
            running *= a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(running);
            sigma.push(if i == 0 { 0.0 } else { b.sqrt() });
        }

        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.steps() {
            Err(ScheduleError::StepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    fn idx(&self, t: usize) -> usize {
        assert!(
            t >= 1 && t <= self.steps(),
            "step {} out of range 1..={}",
            t,
            self.steps()
        );
        t - 1
    }

    /// Variance increment at step `t` (1-based).
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    /// Cumulative signal retention `prod_{i<=t} alpha_i`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[self.idx(t)]
    }

    /// Full cumulative-product table, index 0 holding step 1.
    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Forward noising: `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
    ///
    /// The caller supplies `eps` so that noise draws stay under its control
    /// (reproducibility, and the trainer reuses the same draw as the target).
    pub fn q_sample<D: Dimension>(
        &self,
        x0: ArrayView<'_, f32, D>,
        t: usize,
        eps: ArrayView<'_, f32, D>,
    ) -> Result<Array<f32, D>, ScheduleError> {
        self.check_step(t)?;
        if x0.shape() != eps.shape() {
            return Err(ScheduleError::ShapeMismatch {
                left: x0.shape().to_vec(),
                right: eps.shape().to_vec(),
            });
        }
        let ab = self.alpha_bar[t - 1];
        let signal = ab.sqrt();
        let noise = (1.0 - ab).sqrt();
        let mut out = Array::zeros(x0.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(&x0)
            .and(&eps)
            .for_each(|o, &x, &e| {
                *o = (signal * x as f64 + noise * e as f64) as f32;
            });
        Ok(out)
    }

    /// One reverse denoising step from `x_t` to `x_{t-1}`:
    ///
    /// `(1/sqrt(alpha_t)) * (x_t - ((1-alpha_t)/sqrt(1-abar_t)) * eps_hat) + sigma_t * z`
    ///
    /// `z` is the caller's unit Gaussian draw; at t=1 it is ignored (the last
    /// step is deterministic regardless of what is passed).
    pub fn reverse_step<D: Dimension>(
        &self,
        x_t: ArrayView<'_, f32, D>,
        eps_hat: ArrayView<'_, f32, D>,
        t: usize,
        z: ArrayView<'_, f32, D>,
    ) -> Result<Array<f32, D>, ScheduleError> {
        self.check_step(t)?;
        if x_t.shape() != eps_hat.shape() {
            return Err(ScheduleError::ShapeMismatch {
                left: x_t.shape().to_vec(),
                right: eps_hat.shape().to_vec(),
            });
        }
        if x_t.shape() != z.shape() {
            return Err(ScheduleError::ShapeMismatch {
                left: x_t.shape().to_vec(),
                right: z.shape().to_vec(),
            });
        }
        let i = t - 1;
        let inv_sqrt_alpha = 1.0 / self.alpha[i].sqrt();
        let eps_coeff = (1.0 - self.alpha[i]) / (1.0 - self.alpha_bar[i]).sqrt();
        let sigma = if t == 1 { 0.0 } else { self.sigma[i] };
        let mut out = Array::zeros(x_t.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(&x_t)
            .and(&eps_hat)
            .and(&z)
            .for_each(|o, &x, &e, &n| {
                let mean = inv_sqrt_alpha * (x as f64 - eps_coeff * e as f64);
                *o = (mean + sigma * n as f64) as f32;
            });
        Ok(out)
    }
}
