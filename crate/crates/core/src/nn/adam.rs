//! Adam optimizer with bias correction, plus global-norm gradient clipping
//! and an optional exponential moving average of weights.

use super::{ParamStore, Scalar};
use ndarray::ArrayD;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment accumulators, one slot per store parameter.
#[derive(Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let m = store.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let v = store.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the store's accumulated gradients. Does not zero the
    /// gradients; callers decide when accumulation windows end.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        assert_eq!(store.len(), self.m.len(), "optimizer built for another store");
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..store.len() {
            let g = &store.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.values[i];
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let gf = g.as_f64();
                    let mf = b1 * m.as_f64() + (1.0 - b1) * gf;
                    let vf = b2 * v.as_f64() + (1.0 - b2) * gf * gf;
                    *m = T::of_f64(mf);
                    *v = T::of_f64(vf);
                    let update = self.cfg.lr * (mf / bc1) / ((vf / bc2).sqrt() + self.cfg.eps);
                    *p = T::of_f64(p.as_f64() - update);
                });
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in &store.grads {
        for v in g.iter() {
            let f = v.as_f64();
            sq += f * f;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::of_f64(max_norm / norm);
        for g in &mut store.grads {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Exponential moving average of weights: shadow = d*shadow + (1-d)*value.
#[derive(Debug)]
pub struct Ema<T> {
    decay: f64,
    shadow: Vec<ArrayD<T>>,
}

impl<T: Scalar> Ema<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "decay must be in [0,1)");
        Self {
            decay,
            shadow: store.values.clone(),
        }
    }

    pub fn update(&mut self, store: &ParamStore<T>) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(&store.values) {
            ndarray::Zip::from(s).and(p).for_each(|s, &p| {
                *s = T::of_f64(d * s.as_f64() + (1.0 - d) * p.as_f64());
            });
        }
    }

    /// Writes the averaged weights back into the store (typically right
    /// before checkpointing).
    pub fn apply_to(&self, store: &mut ParamStore<T>) {
        for (s, p) in self.shadow.iter().zip(&mut store.values) {
            p.assign(s);
        }
    }
}
