//! Patch-matrix transforms turning convolutions into matrix products.
//!
//! `im2col` lays out every receptive-field patch of a (C,H,W) image as one
//! column of a (C*K*K, OH*OW) matrix; a convolution is then a single GEMM
//! against the (OC, C*K*K) weight matrix. `col2im` is its exact adjoint
//! (scatter-add back into image space), which is what both the convolution
//! backward pass and the transposed-convolution forward pass need.

use super::Scalar;
use ndarray::{Array2, Array3, ArrayView2};

/// Output spatial size of a convolution: floor((n + 2p - k)/s) + 1.
pub fn conv_out_dim(n: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(n + 2 * p >= k, "kernel {k} larger than padded input {}", n + 2 * p);
    (n + 2 * p - k) / s + 1
}

/// Output spatial size of a transposed convolution: (n-1)*s + k - 2p.
pub fn deconv_out_dim(n: usize, k: usize, s: usize, p: usize) -> usize {
    assert!((n - 1) * s + k >= 2 * p, "padding {p} too large");
    (n - 1) * s + k - 2 * p
}

/// Gathers conv patches of `x` (contiguous C,H,W) into (C*K*K, OH*OW).
/// Out-of-bounds taps read as zero.
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Array2<T> {
    debug_assert_eq!(x.len(), c * h * w);
    let oh = conv_out_dim(h, k, s, p);
    let ow = conv_out_dim(w, k, s, p);
    let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
    let cs = cols.as_slice_mut().expect("freshly allocated, standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row_off = ((ci * k + ki) * k + kj) * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let x_off = ci * h * w + ii as usize * w;
                    let c_off = row_off + oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj >= 0 && jj < w as isize {
                            cs[c_off + oj] = x[x_off + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds columns back into a (C, H, W) image: the adjoint of
/// [`im2col`] over a (grid_h, grid_w) output grid. Used directly as the
/// transposed-convolution forward pass, where the grid is the small input
/// and (h, w) the enlarged output.
pub fn col2im<T: Scalar>(
    cols: ArrayView2<'_, T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array3<T> {
    debug_assert_eq!(cols.shape(), &[c * k * k, grid_h * grid_w]);
    let mut img = Array3::<T>::zeros((c, h, w));
    let im = img.as_slice_mut().expect("freshly allocated, standard layout");
    let cview = cols.as_standard_layout();
    let cs = cview.as_slice().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row_off = ((ci * k + ki) * k + kj) * grid_h * grid_w;
                for gi in 0..grid_h {
                    let ii = (gi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let i_off = ci * h * w + ii as usize * w;
                    let c_off = row_off + gi * grid_w;
                    for gj in 0..grid_w {
                        let jj = (gj * s + kj) as isize - p as isize;
                        if jj >= 0 && jj < w as isize {
                            im[i_off + jj as usize] =
                                im[i_off + jj as usize] + cs[c_off + gj];
                        }
                    }
                }
            }
        }
    }
    img
}
