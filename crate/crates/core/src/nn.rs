//! Dense building blocks shared by the encoder, correlation and predictor
//! stages, each with its hand-derived backward pass.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayView4, Axis, Dimension, Zip};
use rand::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise softmax, shifted by the row max for stability.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient w.r.t. the scores given the softmax output `a` and upstream `da`:
/// `ds_ij = a_ij * (da_ij - sum_k da_ik a_ik)`.
pub fn softmax_rows_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(a.raw_dim());
    for ((a_row, da_row), mut ds_row) in a.rows().into_iter().zip(da.rows()).zip(ds.rows_mut()) {
        let dot = a_row.dot(&da_row);
        Zip::from(&mut ds_row).and(&a_row).and(&da_row).for_each(|d, &a, &g| *d = a * (g - dot));
    }
    ds
}

pub fn relu<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    // `v < 0` rather than `max` so NaN propagates instead of being clamped to 0.
    x.mapv(|v| if v < 0.0 { 0.0 } else { v })
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub fn relu_backward_inplace<D: Dimension>(grad: &mut ndarray::Array<f64, D>, pre: &ndarray::Array<f64, D>) {
    Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Normalizes each row over its features, then applies gain and bias.
pub fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d;
        *is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * *is);
    }
    let y = &normalized * gain + bias;
    (y, LayerNormCache { normalized, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    gain: &Array1<f64>,
    cache: &LayerNormCache,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgain = (dy * &cache.normalized).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let du = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let du_row = du.row(i);
        let u_row = cache.normalized.row(i);
        let mean_du = du_row.sum() / d;
        let mean_du_u = du_row.dot(&u_row) / d;
        let is = cache.inv_std[i];
        Zip::from(dx.row_mut(i))
            .and(&du_row)
            .and(&u_row)
            .for_each(|o, &g, &u| *o = is * (g - mean_du - u * mean_du_u));
    }
    (dx, dgain, dbias)
}

/// Unfolds a `[T, H, W, C]` volume into rows of 3×3×3 zero-padded
/// neighbourhoods: row `(t, h, w)`, column `((dt, dh, dw), c)`.
pub fn im2col_3d(x: ArrayView4<f64>) -> Array2<f64> {
    let (t_len, h_len, w_len, c) = x.dim();
    let mut col = Array2::zeros((t_len * h_len * w_len, 27 * c));
    for t in 0..t_len {
        for h in 0..h_len {
            for w in 0..w_len {
                let row_idx = (t * h_len + h) * w_len + w;
                let mut row = col.row_mut(row_idx);
                for dt in 0..3 {
                    let Some(tt) = (t + dt).checked_sub(1).filter(|&v| v < t_len) else { continue };
                    for dh in 0..3 {
                        let Some(hh) = (h + dh).checked_sub(1).filter(|&v| v < h_len) else { continue };
                        for dw in 0..3 {
                            let Some(ww) = (w + dw).checked_sub(1).filter(|&v| v < w_len) else { continue };
                            let off = ((dt * 3 + dh) * 3 + dw) * c;
                            row.slice_mut(s![off..off + c]).assign(&x.slice(s![tt, hh, ww, ..]));
                        }
                    }
                }
            }
        }
    }
    col
}

/// Unfolds an `[H, W, C]` plane into rows of 3×3 zero-padded neighbourhoods.
pub fn im2col_2d(x: ndarray::ArrayView3<f64>) -> Array2<f64> {
    let (h_len, w_len, c) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let width = 9 * c;
    let mut col = vec![0.0; h_len * w_len * width];
    for h in 0..h_len {
        for w in 0..w_len {
            let row = &mut col[(h * w_len + w) * width..][..width];
            for dh in 0..3 {
                let Some(hh) = (h + dh).checked_sub(1).filter(|&v| v < h_len) else { continue };
                for dw in 0..3 {
                    let Some(ww) = (w + dw).checked_sub(1).filter(|&v| v < w_len) else { continue };
                    let off = (dh * 3 + dw) * c;
                    row[off..off + c].copy_from_slice(&src[(hh * w_len + ww) * c..][..c]);
                }
            }
        }
    }
    Array2::from_shape_vec((h_len * w_len, width), col).expect("sized above")
}

/// Adjoint of [`im2col_2d`]: scatters column gradients back onto the plane.
pub fn col2im_2d(dcol: ArrayView2<f64>, h_len: usize, w_len: usize, c: usize) -> ndarray::Array3<f64> {
    let dcol = dcol.as_standard_layout();
    let src = dcol.as_slice().expect("standard layout");
    let width = 9 * c;
    let mut dx = vec![0.0; h_len * w_len * c];
    for h in 0..h_len {
        for w in 0..w_len {
            let row = &src[(h * w_len + w) * width..][..width];
            for dh in 0..3 {
                let Some(hh) = (h + dh).checked_sub(1).filter(|&v| v < h_len) else { continue };
                for dw in 0..3 {
                    let Some(ww) = (w + dw).checked_sub(1).filter(|&v| v < w_len) else { continue };
                    let off = (dh * 3 + dw) * c;
                    let dst = &mut dx[(hh * w_len + ww) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(&row[off..off + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    ndarray::Array3::from_shape_vec((h_len, w_len, c), dx).expect("sized above")
}

/// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng, Sh: ndarray::ShapeBuilder>(
    rng: &mut R,
    shape: Sh,
    fan_in: usize,
    fan_out: usize,
) -> ndarray::Array<f64, Sh::Dim> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ndarray::Array::from_shape_simple_fn(shape, || rng.random_range(-a..=a))
}

/// Fixed sinusoidal positional encoding `[n, d]`.
pub fn sinusoidal_encoding(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
