//! Minimal CPU neural-network toolkit: named parameter storage, conv /
//! deconv / linear / group-norm layers with hand-written backward passes,
//! sinusoidal timestep embeddings, and an Adam optimizer.
//!
//! Everything is generic over [`Scalar`] so networks run in f32 for training
//! and inference but can be instantiated in f64 where finite-difference
//! gradient verification needs the extra precision. Layers are stateless
//! descriptors holding [`ParamId`]s into a [`ParamStore`]; activations and
//! other intermediates live in per-network tape structs owned by the models.

pub mod adam;
pub mod embed;
pub mod im2col;
pub mod layers;

use ndarray::ArrayD;
use num_traits::Float;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Element type the toolkit works over: f32 in production, f64 for
/// finite-difference verification.
pub trait Scalar:
    ndarray::LinalgScalar
    + Float
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat registry of parameter tensors and their gradient accumulators.
/// Registration order is deterministic, which makes seeded initialization
/// and checkpoint layout reproducible.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    pub(crate) names: Vec<String>,
    pub(crate) values: Vec<ArrayD<T>>,
    pub(crate) grads: Vec<ArrayD<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.names.push(name);
        self.values.push(value);
        self.grads.push(grad);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<T> {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Iterates (name, value) pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore<f32> {
    /// Order-sensitive FNV-1a hash over names, shapes, and value bits.
    /// Detects any parameter mutation, e.g. to assert ensembles stay frozen
    /// while the diffusion model trains.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        for (name, value) in self.names.iter().zip(&self.values) {
            for b in name.as_bytes() {
                eat(*b);
            }
            for d in value.shape() {
                for b in (*d as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for v in value.iter() {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// Draws from N(0, std^2); the building block for weight initialization.
pub fn normal_init<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
) -> ArrayD<T> {
    let mut out = ArrayD::zeros(ndarray::IxDyn(shape));
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = T::of_f64(z * std);
    }
    out
}
