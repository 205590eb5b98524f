//! Sinusoidal timestep embeddings: each step index maps to a fixed vector of
//! sines and cosines at geometrically spaced frequencies, giving the network
//! a smooth, unique encoding of "how noisy is this input".

use super::Scalar;
use ndarray::Array2;

/// Embeds each timestep into a `dim`-vector: the first half holds
/// `sin(t * f_i)`, the second `cos(t * f_i)`, with `f_i = 10000^(-i/half)`.
/// `dim` must be even.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Array2<T> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut out = Array2::<T>::zeros((ts.len(), dim));
    for (row, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[[row, i]] = T::of_f64(arg.sin());
            out[[row, half + i]] = T::of_f64(arg.cos());
        }
    }
    out
}
