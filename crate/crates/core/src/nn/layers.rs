//! Layers: conv, transposed conv, linear, group norm, and activations.
//!
//! Layers are plain descriptors (hyperparameters + parameter handles); they
//! own no activations. `forward` reads the store, `backward` takes whatever
//! the forward pass needed cached (usually its input), accumulates parameter
//! gradients with `+=` semantics, and returns the input gradient. Batched
//! image tensors are (N, C, H, W); feature matrices are (N, F).

use super::im2col::{col2im, conv_out_dim, deconv_out_dim, im2col};
use super::{normal_init, ParamId, ParamStore, Scalar};
use ndarray::{Array1, Array2, Array4, ArrayView2, Axis, Dimension, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;

fn as4<T: Scalar>(store: &ParamStore<T>, id: ParamId) -> ndarray::ArrayView4<'_, T> {
    store.values[id.0]
        .view()
        .into_dimensionality::<Ix4>()
        .expect("registered as 4-d")
}

fn as1<T: Scalar>(store: &ParamStore<T>, id: ParamId) -> ndarray::ArrayView1<'_, T> {
    store.values[id.0]
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("registered as 1-d")
}

fn add_to_grad<T: Scalar>(store: &mut ParamStore<T>, id: ParamId, delta: &[T]) {
    let g = store.grads[id.0]
        .as_slice_mut()
        .expect("grads are standard layout");
    debug_assert_eq!(g.len(), delta.len());
    for (a, b) in g.iter_mut().zip(delta) {
        *a = *a + *b;
    }
}

// ---------------------------------------------------------------------------
// Conv2d

/// 2-D convolution with square kernel, implemented as im2col + GEMM.
/// Weight shape (out_ch, in_ch, k, k), bias (out_ch).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialization: std = sqrt(2 / fan_in).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal_init(rng, &[out_ch, in_ch, k, k], std),
        );
        let bias = store.add(format!("{name}.bias"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    /// All-zero weights and bias, so the layer's initial output is zero.
    /// Used for the network's final projection so an untrained model
    /// predicts zero noise.
    pub fn new_zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch, in_ch, k, k])),
        );
        let bias = store.add(format!("{name}.bias"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.k, self.stride, self.pad),
            conv_out_dim(w, self.k, self.stride, self.pad),
        )
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (oh, ow) = self.out_dims(h, w);
        let wmat = as4(store, self.weight)
            .into_shape_with_order((self.out_ch, self.in_ch * self.k * self.k))
            .expect("contiguous weight");
        let bias = as1(store, self.bias);
        let mut y = Array4::<T>::zeros((n, self.out_ch, oh, ow));
        for s in 0..n {
            let xs = x.index_axis(Axis(0), s);
            let cols = im2col(
                xs.as_slice().expect("standard layout"),
                c,
                h,
                w,
                self.k,
                self.stride,
                self.pad,
            );
            let prod = wmat.dot(&cols); // (out_ch, oh*ow)
            let mut ys = y.index_axis_mut(Axis(0), s);
            let ys_flat = ys.as_slice_mut().expect("standard layout");
            let prod_flat = prod.as_slice().expect("standard layout");
            for oc in 0..self.out_ch {
                let b = bias[oc];
                let off = oc * oh * ow;
                for i in 0..oh * ow {
                    ys_flat[off + i] = prod_flat[off + i] + b;
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns dL/dx. `x` is the same
    /// input that produced `dy` (patches are regathered rather than cached,
    /// trading a little compute for a lot of memory).
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Array4<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (_, oc, oh, ow) = dy.dim();
        assert_eq!(oc, self.out_ch);
        let ckk = self.in_ch * self.k * self.k;

        let mut dw = Array2::<T>::zeros((self.out_ch, ckk));
        let mut db = Array1::<T>::zeros(self.out_ch);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        {
            let wmat = as4(store, self.weight)
                .into_shape_with_order((self.out_ch, ckk))
                .expect("contiguous weight");
            for s in 0..n {
                let xs = x.index_axis(Axis(0), s);
                let cols = im2col(
                    xs.as_slice().expect("standard layout"),
                    c,
                    h,
                    w,
                    self.k,
                    self.stride,
                    self.pad,
                );
                let dys: ArrayView2<'_, T> = dy
                    .index_axis(Axis(0), s)
                    .into_shape_with_order((self.out_ch, oh * ow))
                    .expect("contiguous activation");
                dw = dw + dys.dot(&cols.t());
                db = db + dys.sum_axis(Axis(1));
                let dcols = wmat.t().dot(&dys); // (ckk, oh*ow)
                let dxs = col2im(
                    dcols.view(),
                    c,
                    h,
                    w,
                    self.k,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                );
                dx.index_axis_mut(Axis(0), s).assign(&dxs);
            }
        }
        add_to_grad(store, self.weight, dw.as_slice().expect("standard layout"));
        add_to_grad(store, self.bias, db.as_slice().expect("standard layout"));
        dx
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d

/// 2-D transposed convolution (fractionally strided upsampling).
/// Weight shape (in_ch, out_ch, k, k), bias (out_ch).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal_init(rng, &[in_ch, out_ch, k, k], std),
        );
        let bias = store.add(format!("{name}.bias"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            deconv_out_dim(h, self.k, self.stride, self.pad),
            deconv_out_dim(w, self.k, self.stride, self.pad),
        )
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "deconv input channels");
        let (oh, ow) = self.out_dims(h, w);
        let okk = self.out_ch * self.k * self.k;
        let wmat = as4(store, self.weight)
            .into_shape_with_order((self.in_ch, okk))
            .expect("contiguous weight");
        let bias = as1(store, self.bias);
        let mut y = Array4::<T>::zeros((n, self.out_ch, oh, ow));
        for s in 0..n {
            let xs: ArrayView2<'_, T> = x
                .index_axis(Axis(0), s)
                .into_shape_with_order((self.in_ch, h * w))
                .expect("contiguous activation");
            let cols = wmat.t().dot(&xs); // (okk, h*w)
            let img = col2im(
                cols.view(),
                self.out_ch,
                oh,
                ow,
                self.k,
                self.stride,
                self.pad,
                h,
                w,
            );
            let mut ys = y.index_axis_mut(Axis(0), s);
            ys.assign(&img);
            for oc in 0..self.out_ch {
                let b = bias[oc];
                ys.index_axis_mut(Axis(0), oc).mapv_inplace(|v| v + b);
            }
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Array4<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (_, oc, oh, ow) = dy.dim();
        assert_eq!(oc, self.out_ch);
        let okk = self.out_ch * self.k * self.k;

        let mut dw = Array2::<T>::zeros((self.in_ch, okk));
        let mut db = Array1::<T>::zeros(self.out_ch);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        {
            let wmat = as4(store, self.weight)
                .into_shape_with_order((self.in_ch, okk))
                .expect("contiguous weight");
            for s in 0..n {
                let dys = dy.index_axis(Axis(0), s);
                // adjoint of col2im is im2col over the same grid geometry
                let dcols = im2col(
                    dys.as_slice().expect("standard layout"),
                    self.out_ch,
                    oh,
                    ow,
                    self.k,
                    self.stride,
                    self.pad,
                ); // (okk, h*w)
                let xs: ArrayView2<'_, T> = x
                    .index_axis(Axis(0), s)
                    .into_shape_with_order((self.in_ch, h * w))
                    .expect("contiguous activation");
                dw = dw + xs.dot(&dcols.t());
                let dxs = wmat.dot(&dcols); // (in_ch, h*w)
                dx.index_axis_mut(Axis(0), s)
                    .into_shape_with_order((self.in_ch, h * w))
                    .expect("contiguous activation")
                    .assign(&dxs);
                for ch in 0..self.out_ch {
                    let sum = dys.index_axis(Axis(0), ch).sum();
                    db[ch] = db[ch] + sum;
                }
            }
        }
        add_to_grad(store, self.weight, dw.as_slice().expect("standard layout"));
        add_to_grad(store, self.bias, db.as_slice().expect("standard layout"));
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear

/// Fully connected layer. Weight shape (out, in), bias (out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_f: usize,
        out_f: usize,
    ) -> Self {
        let std = (2.0 / in_f as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_init(rng, &[out_f, in_f], std));
        let bias = store.add(format!("{name}.bias"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_f])));
        Self {
            weight,
            bias,
            in_f,
            out_f,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array2<T>) -> Array2<T> {
        assert_eq!(x.dim().1, self.in_f, "linear input features");
        let w = store.values[self.weight.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("registered as 2-d");
        let b = as1(store, self.bias);
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            row.zip_mut_with(&b, |v, &bb| *v = *v + bb);
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Array2<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let (dw, dx) = {
            let w = store.values[self.weight.0]
                .view()
                .into_dimensionality::<Ix2>()
                .expect("registered as 2-d");
            (dy.t().dot(x), dy.dot(&w))
        };
        let db = dy.sum_axis(Axis(0));
        add_to_grad(store, self.weight, dw.as_slice().expect("standard layout"));
        add_to_grad(store, self.bias, db.as_slice().expect("standard layout"));
        dx
    }
}

// ---------------------------------------------------------------------------
// GroupNorm

/// Group normalization over (channels/groups, H, W) statistics per sample,
/// with learned per-channel scale and shift. Statistics run in f64.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

/// Largest divisor of `channels` that is <= `preferred`: keeps group counts
/// valid for narrow layers without configuration fuss.
pub fn norm_group_count(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

pub struct GroupNormCache<T> {
    xhat: Array4<T>,
    inv_std: Array2<f64>, // (n, groups)
}

impl GroupNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        assert!(groups >= 1 && channels % groups == 0, "channels {channels} not divisible by groups {groups}");
        let gamma = store.add(
            format!("{name}.gamma"),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[channels]), T::one()),
        );
        let beta = store.add(format!("{name}.beta"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels])));
        Self {
            gamma,
            beta,
            groups,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
    ) -> (Array4<T>, GroupNormCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "group-norm channels");
        let cg = c / self.groups;
        let m = (cg * h * w) as f64;
        let gamma = as1(store, self.gamma);
        let beta = as1(store, self.beta);

        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        let mut inv_std = Array2::<f64>::zeros((n, self.groups));
        let x_flat = x.as_slice().expect("standard layout");
        let xh_flat = xhat.as_slice_mut().expect("standard layout");
        for s in 0..n {
            for g in 0..self.groups {
                let start = s * c * h * w + g * cg * h * w;
                let end = start + cg * h * w;
                let mut sum = 0.0f64;
                let mut sum_sq = 0.0f64;
                for &v in &x_flat[start..end] {
                    let v = v.as_f64();
                    sum += v;
                    sum_sq += v * v;
                }
                let mean = sum / m;
                let var = (sum_sq / m - mean * mean).max(0.0);
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[[s, g]] = istd;
                for i in start..end {
                    xh_flat[i] = T::of_f64((x_flat[i].as_f64() - mean) * istd);
                }
            }
        }

        let mut y = xhat.clone();
        for s in 0..n {
            let mut ys = y.index_axis_mut(Axis(0), s);
            for ch in 0..c {
                let (gm, bt) = (gamma[ch], beta[ch]);
                ys.index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v * gm + bt);
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &GroupNormCache<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (n, c, h, w) = dy.dim();
        let cg = c / self.groups;
        let m = (cg * h * w) as f64;

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for s in 0..n {
            let dys = dy.index_axis(Axis(0), s);
            let xhs = cache.xhat.index_axis(Axis(0), s);
            for ch in 0..c {
                let d = dys.index_axis(Axis(0), ch);
                let xh = xhs.index_axis(Axis(0), ch);
                let mut dg = 0.0f64;
                let mut db = 0.0f64;
                for (&a, &b) in d.iter().zip(xh.iter()) {
                    dg += a.as_f64() * b.as_f64();
                    db += a.as_f64();
                }
                dgamma[ch] = dgamma[ch] + T::of_f64(dg);
                dbeta[ch] = dbeta[ch] + T::of_f64(db);
            }
        }

        let gamma = as1(store, self.gamma).to_owned();
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        {
            let dy_flat = dy.as_slice().expect("standard layout");
            let xh_flat = cache.xhat.as_slice().expect("standard layout");
            let dx_flat = dx.as_slice_mut().expect("standard layout");
            for s in 0..n {
                for g in 0..self.groups {
                    let start = s * c * h * w + g * cg * h * w;
                    // dxhat = dy * gamma (per channel)
                    let mut mean_dxh = 0.0f64;
                    let mut mean_dxh_xh = 0.0f64;
                    for ci in 0..cg {
                        let gm = gamma[g * cg + ci].as_f64();
                        let off = start + ci * h * w;
                        for i in off..off + h * w {
                            let dxh = dy_flat[i].as_f64() * gm;
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh_flat[i].as_f64();
                        }
                    }
                    mean_dxh /= m;
                    mean_dxh_xh /= m;
                    let istd = cache.inv_std[[s, g]];
                    for ci in 0..cg {
                        let gm = gamma[g * cg + ci].as_f64();
                        let off = start + ci * h * w;
                        for i in off..off + h * w {
                            let dxh = dy_flat[i].as_f64() * gm;
                            let v = istd
                                * (dxh - mean_dxh - xh_flat[i].as_f64() * mean_dxh_xh);
                            dx_flat[i] = T::of_f64(v);
                        }
                    }
                }
            }
        }
        add_to_grad(store, self.gamma, &dgamma);
        add_to_grad(store, self.beta, &dbeta);
        dx
    }
}

// ---------------------------------------------------------------------------
// Activations

/// max(0, x)
pub fn relu_forward<T: Scalar, D: Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar, D: Dimension>(
    x: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// x * sigmoid(x)
pub fn silu_forward<T: Scalar, D: Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar, D: Dimension>(
    x: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (T::one() + v * (T::one() - s)));
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{RngExt, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand4(r: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dims, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut r = rng(1);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, &mut r, "c", 2, 3, 3, 2, 1);
        let x = rand4(&mut r, (2, 2, 6, 6));
        let y = conv.forward(&store, &x);
        assert_eq!(y.dim(), (2, 3, 3, 3));

        let w = as4(&store, conv.weight);
        let b = as1(&store, conv.bias);
        for n in 0..2 {
            for oc in 0..3 {
                for oi in 0..3 {
                    for oj in 0..3 {
                        let mut acc = b[oc];
                        for ic in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = (oi * 2 + ki) as isize - 1;
                                    let jj = (oj * 2 + kj) as isize - 1;
                                    if ii >= 0 && ii < 6 && jj >= 0 && jj < 6 {
                                        acc += w[[oc, ic, ki, kj]]
                                            * x[[n, ic, ii as usize, jj as usize]];
                                    }
                                }
                            }
                        }
                        assert!((y[[n, oc, oi, oj]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn deconv_forward_matches_naive() {
        let mut r = rng(2);
        let mut store = ParamStore::<f64>::new();
        let deconv = ConvTranspose2d::new(&mut store, &mut r, "d", 2, 3, 4, 2, 1);
        let x = rand4(&mut r, (1, 2, 3, 3));
        let y = deconv.forward(&store, &x);
        assert_eq!(y.dim(), (1, 3, 6, 6));

        let w = as4(&store, deconv.weight);
        let b = as1(&store, deconv.bias);
        let mut expect = Array4::<f64>::zeros((1, 3, 6, 6));
        for oc in 0..3 {
            expect.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), oc).fill(b[oc]);
        }
        for ic in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    for oc in 0..3 {
                        for ki in 0..4 {
                            for kj in 0..4 {
                                let oi = (i * 2 + ki) as isize - 1;
                                let oj = (j * 2 + kj) as isize - 1;
                                if oi >= 0 && oi < 6 && oj >= 0 && oj < 6 {
                                    expect[[0, oc, oi as usize, oj as usize]] +=
                                        x[[0, ic, i, j]] * w[[ic, oc, ki, kj]];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, e) in y.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    /// Central finite differences over every parameter and the input, against
    /// a scalar loss = weighted sum of outputs (weights fixed random).
    fn check_layer_grads<FwdF, BwdF>(
        store: &mut ParamStore<f64>,
        x: Array4<f64>,
        forward: FwdF,
        backward: BwdF,
    ) where
        FwdF: Fn(&ParamStore<f64>, &Array4<f64>) -> Array4<f64>,
        BwdF: Fn(&mut ParamStore<f64>, &Array4<f64>, &Array4<f64>) -> Array4<f64>,
    {
        let mut r = rng(99);
        let y0 = forward(store, &x);
        let lw = Array4::from_shape_fn(y0.dim(), |_| r.random_range(-1.0..1.0));
        let loss = |y: &Array4<f64>| y.iter().zip(lw.iter()).map(|(&a, &b)| a * b).sum::<f64>();

        store.zero_grads();
        let dx = backward(store, &x, &lw);

        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let count = store.value(id).len();
            for flat in (0..count).step_by(count.div_ceil(7).max(1)) {
                let orig = store.values[id.0].as_slice().unwrap()[flat];
                store.values[id.0].as_slice_mut().unwrap()[flat] = orig + h;
                let lp = loss(&forward(store, &x));
                store.values[id.0].as_slice_mut().unwrap()[flat] = orig - h;
                let lm = loss(&forward(store, &x));
                store.values[id.0].as_slice_mut().unwrap()[flat] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = store.grads[id.0].as_slice().unwrap()[flat];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                    "param grad mismatch at {}[{flat}]: fd {fd} vs analytic {an}",
                    store.name(id),
                );
            }
        }
        // input gradient, spot-checked
        let mut xp = x.clone();
        for flat in (0..x.len()).step_by(x.len().div_ceil(11).max(1)) {
            let orig = xp.as_slice().unwrap()[flat];
            xp.as_slice_mut().unwrap()[flat] = orig + h;
            let lp = loss(&forward(store, &xp));
            xp.as_slice_mut().unwrap()[flat] = orig - h;
            let lm = loss(&forward(store, &xp));
            xp.as_slice_mut().unwrap()[flat] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = dx.as_slice().unwrap()[flat];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                "input grad mismatch at [{flat}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng(3);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, &mut r, "c", 2, 3, 3, 2, 1);
        let x = rand4(&mut r, (2, 2, 6, 6));
        check_layer_grads(
            &mut store,
            x,
            |s, x| conv.forward(s, x),
            |s, x, dy| conv.backward(s, x, dy),
        );
    }

    #[test]
    fn deconv_gradients() {
        let mut r = rng(4);
        let mut store = ParamStore::<f64>::new();
        let deconv = ConvTranspose2d::new(&mut store, &mut r, "d", 3, 2, 4, 2, 1);
        let x = rand4(&mut r, (2, 3, 4, 4));
        check_layer_grads(
            &mut store,
            x,
            |s, x| deconv.forward(s, x),
            |s, x, dy| deconv.backward(s, x, dy),
        );
    }

    #[test]
    fn groupnorm_normalizes_and_gradients() {
        let mut r = rng(5);
        let mut store = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut store, "g", 4, 2);
        let x = rand4(&mut r, (2, 4, 3, 3));
        let (y, _) = gn.forward(&store, &x);
        // gamma=1, beta=0 at init: per-(sample, group) stats are ~(0, 1)
        for s in 0..2 {
            for g in 0..2 {
                let vals: Vec<f64> = (0..2)
                    .flat_map(|ci| {
                        y.index_axis(Axis(0), s)
                            .index_axis(Axis(0), g * 2 + ci)
                            .iter()
                            .cloned()
                            .collect::<Vec<_>>()
                    })
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
                assert!(m.abs() < 1e-10);
                assert!((v - 1.0).abs() < 1e-3);
            }
        }

        // make the affine params non-trivial before checking gradients
        store.value_mut(gn.gamma).as_slice_mut().unwrap().copy_from_slice(&[1.3, 0.7, -0.4, 1.1]);
        store.value_mut(gn.beta).as_slice_mut().unwrap().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        check_layer_grads(
            &mut store,
            x,
            |s, x| gn.forward(s, x).0,
            |s, x, dy| {
                let (_, cache) = gn.forward(s, x);
                gn.backward(s, &cache, dy)
            },
        );
    }

    #[test]
    fn norm_group_count_picks_divisors() {
        assert_eq!(norm_group_count(12, 8), 6);
        assert_eq!(norm_group_count(16, 8), 8);
        assert_eq!(norm_group_count(7, 8), 7);
        assert_eq!(norm_group_count(5, 4), 1);
        assert_eq!(norm_group_count(1, 32), 1);
    }

    #[test]
    fn linear_forward_and_gradients() {
        let mut r = rng(6);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut r, "l", 5, 3);
        let x = Array2::from_shape_fn((4, 5), |_| r.random_range(-1.0..1.0));
        let y = lin.forward(&store, &x);
        assert_eq!(y.dim(), (4, 3));
        // naive check of one element
        let w = store.values[lin.weight.0].view().into_dimensionality::<Ix2>().unwrap();
        let b = as1(&store, lin.bias);
        let mut acc = b[1];
        for i in 0..5 {
            acc += x[[2, i]] * w[[1, i]];
        }
        assert!((y[[2, 1]] - acc).abs() < 1e-12);

        // gradient check through an Array4 adapter shim
        let lw = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
        let loss = |s: &ParamStore<f64>, xx: &Array2<f64>| {
            lin.forward(s, xx)
                .iter()
                .zip(lw.iter())
                .map(|(&a, &b)| a * b)
                .sum::<f64>()
        };
        store.zero_grads();
        let dx = lin.backward(&mut store, &x, &lw);
        let h = 1e-6;
        for id in [lin.weight, lin.bias] {
            for flat in 0..store.value(id).len() {
                let orig = store.values[id.0].as_slice().unwrap()[flat];
                store.values[id.0].as_slice_mut().unwrap()[flat] = orig + h;
                let lp = loss(&store, &x);
                store.values[id.0].as_slice_mut().unwrap()[flat] = orig - h;
                let lm = loss(&store, &x);
                store.values[id.0].as_slice_mut().unwrap()[flat] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = store.grads[id.0].as_slice().unwrap()[flat];
                assert!((fd - an).abs() < 1e-6 + 1e-5 * an.abs());
            }
        }
        let mut xp = x.clone();
        for flat in 0..x.len() {
            let orig = xp.as_slice().unwrap()[flat];
            xp.as_slice_mut().unwrap()[flat] = orig + h;
            let lp = loss(&store, &xp);
            xp.as_slice_mut().unwrap()[flat] = orig - h;
            let lm = loss(&store, &xp);
            xp.as_slice_mut().unwrap()[flat] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[flat]).abs() < 1e-6);
        }
    }

    #[test]
    fn activation_values_and_gradients() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[5]),
            vec![-2.0f64, -0.5, 0.0, 0.5, 2.0],
        )
        .unwrap();
        let r = relu_forward(&x);
        assert_eq!(r.as_slice().unwrap(), &[0.0, 0.0, 0.0, 0.5, 2.0]);
        let s = silu_forward(&x);
        assert!((s[[2]] - 0.0).abs() < 1e-12);
        assert!((s[[4]] - 2.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);

        let dy = ArrayD::from_elem(IxDyn(&[5]), 1.0f64);
        let h = 1e-6;
        for (fwd, bwd) in [
            (
                relu_forward::<f64, IxDyn> as fn(&ArrayD<f64>) -> ArrayD<f64>,
                relu_backward::<f64, IxDyn> as fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
            ),
            (silu_forward::<f64, IxDyn>, silu_backward::<f64, IxDyn>),
        ] {
            let dx = bwd(&x, &dy);
            for i in 0..5 {
                if x[[i]] == 0.0 {
                    continue; // relu kink
                }
                let mut xp = x.clone();
                xp[[i]] += h;
                let lp: f64 = fwd(&xp).sum();
                xp[[i]] -= 2.0 * h;
                let lm: f64 = fwd(&xp).sum();
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - dx[[i]]).abs() < 1e-6, "i={i}: {fd} vs {}", dx[[i]]);
            }
        }
    }

    #[test]
    fn zero_init_conv_outputs_zero() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new_zeroed(&mut store, "out", 3, 1, 3, 1, 1);
        let mut r = rng(8);
        let x = Array4::from_shape_fn((1, 3, 4, 4), |_| r.random_range(-1.0f32..1.0));
        let y = conv.forward(&store, &x);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
