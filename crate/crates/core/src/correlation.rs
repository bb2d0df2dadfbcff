//! Temporal correlation matrices between frame embeddings.
//!
//! Attention mode projects each scale's embeddings to per-head queries and
//! keys and uses the row-normalized scaled dot-product scores themselves as
//! the correlation (there is no value path). TSM mode uses the softmax of
//! negative squared distances. Scales are fused by channel concatenation,
//! scale-major and head-minor.

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::nn::{softmax_rows, softmax_rows_backward};
use crate::{Error, Result};

/// Query and key projections for every head of one scale, `[H, d_e, d_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections {
    pub wq: Array3<f64>,
    pub wk: Array3<f64>,
}

impl HeadProjections {
    pub fn zeros(heads: usize, embed_dim: usize, head_dim: usize) -> Self {
        Self { wq: Array3::zeros((heads, embed_dim, head_dim)), wk: Array3::zeros((heads, embed_dim, head_dim)) }
    }

    /// Uniform in `[-a, a]`, `a = sqrt(6 / (d_e + d_h))`.
    pub fn init<R: Rng>(rng: &mut R, heads: usize, embed_dim: usize, head_dim: usize) -> Self {
        let a = (6.0 / (embed_dim + head_dim) as f64).sqrt();
        let mut draw = || Array3::from_shape_simple_fn((heads, embed_dim, head_dim), || rng.random_range(-a..=a));
        let wq = draw();
        let wk = draw();
        Self { wq, wk }
    }

    pub fn heads(&self) -> usize {
        self.wq.dim().0
    }
}

/// One set of head projections per scale; empty in TSM mode.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub scales: Vec<HeadProjections>,
}

/// Fused correlation `[N, N, C]`, channels grouped by scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTensor {
    pub values: Array3<f64>,
    pub channels_per_scale: usize,
}

impl CorrelationTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn num_scales(&self) -> usize {
        self.values.dim().2 / self.channels_per_scale
    }

    /// Channels belonging to scale number `i` (position in the fused order).
    pub fn scale_slice(&self, i: usize) -> ArrayView3<'_, f64> {
        let c = self.channels_per_scale;
        self.values.slice(s![.., .., i * c..(i + 1) * c])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    a: Vec<Array2<f64>>,
}

pub(crate) fn attention_forward(x: &Array2<f64>, proj: &HeadProjections) -> Result<(Array3<f64>, AttentionCache)> {
    let (n, d_e) = x.dim();
    let (heads, pe, d_h) = proj.wq.dim();
    if pe != d_e || proj.wk.dim() != proj.wq.dim() {
        return Err(Error::shape(format!("embeddings have width {d_e}, projections expect {pe}")));
    }
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut out = Array3::zeros((n, n, heads));
    let mut cache = AttentionCache { q: Vec::new(), k: Vec::new(), a: Vec::new() };
    for h in 0..heads {
        let q = x.dot(&proj.wq.index_axis(Axis(0), h));
        let k = x.dot(&proj.wk.index_axis(Axis(0), h));
        let scores = q.dot(&k.t()) * scale;
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("attention scores, head {h}")));
        }
        let a = softmax_rows(&scores);
        out.slice_mut(s![.., .., h]).assign(&a);
        cache.q.push(q);
        cache.k.push(k);
        cache.a.push(a);
    }
    Ok((out, cache))
}

/// Per-head attention maps `[N, N, H]`:
/// `softmax_rows((X Wq_h)(X Wk_h)^T / sqrt(d_h))`.
pub fn attention_correlation(x: &Array2<f64>, proj: &HeadProjections) -> Result<Array3<f64>> {
    attention_forward(x, proj).map(|(out, _)| out)
}

/// Returns `dx` and accumulates into `grad`.
pub(crate) fn attention_backward(
    x: &Array2<f64>,
    proj: &HeadProjections,
    cache: &AttentionCache,
    d_out: ArrayView3<f64>,
    grad: &mut HeadProjections,
) -> Array2<f64> {
    let d_h = proj.wq.dim().2;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut dx = Array2::zeros(x.raw_dim());
    for h in 0..proj.heads() {
        let da = d_out.slice(s![.., .., h]).to_owned();
        let ds = softmax_rows_backward(&cache.a[h], &da) * scale;
        let dq = ds.dot(&cache.k[h]);
        let dk = ds.t().dot(&cache.q[h]);
        let mut gq = grad.wq.index_axis_mut(Axis(0), h);
        gq += &x.t().dot(&dq);
        let mut gk = grad.wk.index_axis_mut(Axis(0), h);
        gk += &x.t().dot(&dk);
        dx += &dq.dot(&proj.wq.index_axis(Axis(0), h).t());
        dx += &dk.dot(&proj.wk.index_axis(Axis(0), h).t());
    }
    dx
}

/// Pre-softmax TSM scores `-||x_i - x_j||^2 / sqrt(d_e)`.
pub fn tsm_scores(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let dist: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            s[[i, j]] = -dist * scale;
            s[[j, i]] = -dist * scale;
        }
    }
    s
}

/// Single-channel temporal self-similarity `[N, N, 1]`.
pub fn tsm_correlation(x: &Array2<f64>) -> Array3<f64> {
    let a = softmax_rows(&tsm_scores(x));
    let n = a.nrows();
    a.into_shape_with_order((n, n, 1)).expect("contiguous")
}

/// `dx = -2/sqrt(d) (diag(rowsum G) X - G X)` with `G = dS + dS^T`.
pub(crate) fn tsm_backward(x: &Array2<f64>, a: &Array2<f64>, d_out: ArrayView3<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let da = d_out.slice(s![.., .., 0]).to_owned();
    let ds = softmax_rows_backward(a, &da);
    let g = &ds + &ds.t();
    let rowsum = g.sum_axis(Axis(1));
    let gx = g.dot(x);
    let mut dx = x * &rowsum.insert_axis(Axis(1));
    dx -= &gx;
    dx * (-2.0 / d.sqrt())
}

/// Concatenates per-scale tensors along channels in the given order.
pub fn fuse_scales(per_scale: &[Array3<f64>]) -> Result<CorrelationTensor> {
    let first = per_scale.first().ok_or_else(|| Error::shape("fuse_scales needs at least one scale"))?;
    let (n, n2, c) = first.dim();
    if n != n2 {
        return Err(Error::shape(format!("correlation must be square, got {n}x{n2}")));
    }
    if let Some(bad) = per_scale.iter().find(|t| t.dim() != (n, n, c)) {
        return Err(Error::shape(format!("scale tensor {:?} differs from {:?}", bad.dim(), (n, n, c))));
    }
    let views: Vec<_> = per_scale.iter().map(|t| t.view()).collect();
    let values = ndarray::concatenate(Axis(2), &views).expect("shapes checked");
    Ok(CorrelationTensor { values, channels_per_scale: c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_rows_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let row = rand2(&mut rng, 1, 8);
        let x = ndarray::concatenate(Axis(0), &[row.view(); 5]).unwrap();
        let proj = HeadProjections::init(&mut rng, 2, 8, 4);
        for v in attention_correlation(&x, &proj).unwrap().iter() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }
        for v in tsm_correlation(&x).iter() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn singleton_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand2(&mut rng, 1, 4);
        let proj = HeadProjections::init(&mut rng, 2, 4, 2);
        let c = attention_correlation(&x, &proj).unwrap();
        assert_eq!(c.dim(), (1, 1, 2));
        assert!(c.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_matches_per_entry_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d_e, heads) = (4, 6, 2);
        let d_h = d_e / heads;
        let x = rand2(&mut rng, n, d_e);
        let proj = HeadProjections::init(&mut rng, heads, d_e, d_h);
        let got = attention_correlation(&x, &proj).unwrap();
        for h in 0..heads {
            let score = |i: usize, j: usize| {
                let mut acc = 0.0;
                for k in 0..d_h {
                    let mut q = 0.0;
                    let mut kk = 0.0;
                    for c in 0..d_e {
                        q += x[[i, c]] * proj.wq[[h, c, k]];
                        kk += x[[j, c]] * proj.wk[[h, c, k]];
                    }
                    acc += q * kk;
                }
                acc / (d_h as f64).sqrt()
            };
            for i in 0..n {
                let exps: Vec<f64> = (0..n).map(|j| score(i, j).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..n {
                    assert_abs_diff_eq!(got[[i, j, h]], exps[j] / z, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_finite_scores_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = rand2(&mut rng, 3, 4);
        x[[1, 2]] = f64::INFINITY;
        let proj = HeadProjections::init(&mut rng, 2, 4, 2);
        assert!(matches!(attention_correlation(&x, &proj), Err(Error::NonFinite(_))));
    }

    #[test]
    fn tsm_score_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand2(&mut rng, 6, 5);
        let s = tsm_scores(&x);
        for i in 0..6 {
            assert_eq!(s[[i, i]], 0.0);
            for j in 0..6 {
                assert_eq!(s[[i, j]], s[[j, i]]);
                assert!(s[[i, j]] <= 0.0);
            }
        }
    }

    #[test]
    fn tsm_argmax_on_diagonal() {
        let x = ndarray::array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let c = tsm_correlation(&x);
        for i in 0..3 {
            let row: Vec<f64> = (0..3).map(|j| c[[i, j, 0]]).collect();
            let arg = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, i);
        }
    }

    #[test]
    fn fuse_shapes() {
        let t = Array3::<f64>::zeros((64, 64, 4));
        let f = fuse_scales(&[t.clone(), t.clone(), t.clone()]).unwrap();
        assert_eq!(f.shape(), (64, 64, 12));
        let single = fuse_scales(&[t.clone()]).unwrap();
        assert_eq!(single.values, t);
        let one = Array3::<f64>::zeros((64, 64, 1));
        assert_eq!(fuse_scales(&[one.clone(), one.clone(), one]).unwrap().shape(), (64, 64, 3));
        assert!(fuse_scales(&[t, Array3::zeros((64, 64, 3))]).is_err());
        assert!(fuse_scales(&[]).is_err());
    }

    #[test]
    fn attention_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand2(&mut rng, 5, 4);
        let proj = HeadProjections::init(&mut rng, 2, 4, 2);
        let w = Array3::from_shape_simple_fn((5, 5, 2), || rng.random_range(-1.0..1.0));
        let loss = |x: &Array2<f64>, p: &HeadProjections| (attention_correlation(x, p).unwrap() * &w).sum();
        let (_, cache) = attention_forward(&x, &proj).unwrap();
        let mut grad = HeadProjections::zeros(2, 4, 2);
        let dx = attention_backward(&x, &proj, &cache, w.view(), &mut grad);
        let eps = 1e-6;
        for ((i, j), &g) in dx.indexed_iter() {
            let mut p = x.clone();
            p[[i, j]] += eps;
            let mut m = x.clone();
            m[[i, j]] -= eps;
            assert_abs_diff_eq!((loss(&p, &proj) - loss(&m, &proj)) / (2.0 * eps), g, epsilon = 1e-8);
        }
        for (idx, &g) in grad.wk.indexed_iter() {
            let mut p = proj.clone();
            p.wk[idx] += eps;
            let mut m = proj.clone();
            m.wk[idx] -= eps;
            assert_abs_diff_eq!((loss(&x, &p) - loss(&x, &m)) / (2.0 * eps), g, epsilon = 1e-8);
        }
    }

    #[test]
    fn tsm_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand2(&mut rng, 5, 3);
        let w = Array3::from_shape_simple_fn((5, 5, 1), || rng.random_range(-1.0..1.0));
        let loss = |x: &Array2<f64>| (tsm_correlation(x) * &w).sum();
        let a = softmax_rows(&tsm_scores(&x));
        let dx = tsm_backward(&x, &a, w.view());
        let eps = 1e-6;
        for ((i, j), &g) in dx.indexed_iter() {
            let mut p = x.clone();
            p[[i, j]] += eps;
            let mut m = x.clone();
            m[[i, j]] -= eps;
            assert_abs_diff_eq!((loss(&p) - loss(&m)) / (2.0 * eps), g, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn attention_rows_are_distributions(seed in any::<u64>(), n in 1usize..10, heads in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d_e = heads * 3;
            let x = rand2(&mut rng, n, d_e) * 3.0;
            let proj = HeadProjections::init(&mut rng, heads, d_e, 3);
            let c = attention_correlation(&x, &proj).unwrap();
            for h in 0..heads {
                for i in 0..n {
                    let row = c.slice(s![i, .., h]);
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
                    prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }

        #[test]
        fn softmax_shift_invariance(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand2(&mut rng, 6, 8);
            let proj = HeadProjections::init(&mut rng, 2, 8, 4);
            let (_, cache) = attention_forward(&x, &proj).unwrap();
            let scores = cache.q[0].dot(&cache.k[0].t()) / 2.0;
            let shifted = softmax_rows(&(scores + shift));
            for (a, b) in shifted.iter().zip(cache.a[0].iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn fuse_then_slice_recovers(seed in any::<u64>(), m in 1usize..4, c in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<Array3<f64>> = (0..m).map(|_| Array3::from_shape_simple_fn((4, 4, c), || rng.random())).collect();
            let fused = fuse_scales(&parts).unwrap();
            prop_assert_eq!(fused.num_scales(), m);
            for (i, p) in parts.iter().enumerate() {
                prop_assert_eq!(&fused.scale_slice(i).to_owned(), p);
            }
        }
    }
}
