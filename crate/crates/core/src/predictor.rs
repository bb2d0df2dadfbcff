//! Density-map period predictor.
//!
//! Stages: 3×3 fusion convolution over the `N×N` correlation plane (ReLU),
//! one token per frame from the flattened correlation row, linear
//! projection plus positional encoding, pre-norm transformer encoder
//! layers, and a scalar ReLU head per frame.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::correlation::CorrelationTensor;
use crate::nn::{self, LayerNormCache};
use crate::{Error, Result};

/// Initial head bias; places every frame's output in the active ReLU region.
pub const HEAD_BIAS_INIT: f64 = 0.1;
/// Head weights start at this fraction of their Xavier range. Attention
/// maps are near-uniform at initialization, so every frame's token is
/// nearly the same; a full-size head would push all frames to the same side
/// of the output ReLU, and on the negative side no gradient flows at all.
pub const HEAD_WEIGHT_INIT_SCALE: f64 = 0.02;

/// Length-`N` nonnegative per-frame density; its sum is the count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation("density values must be finite and nonnegative"));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Linear sum of the density map; not rounded.
pub fn count_from_density(density: &DensityMap) -> f64 {
    density.values.iter().sum()
}

/// Pre-norm encoder layer: self-attention and feed-forward sublayers, each
/// with a residual connection around a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl TransformerLayerParams {
    pub fn zeros(d: usize, ff: usize) -> Self {
        let m = || Array2::zeros((d, d));
        let v = || Array1::zeros(d);
        Self {
            ln1_gain: v(),
            ln1_bias: v(),
            wq: m(),
            bq: v(),
            wk: m(),
            bk: v(),
            wv: m(),
            bv: v(),
            wo: m(),
            bo: v(),
            ln2_gain: v(),
            ln2_bias: v(),
            w1: Array2::zeros((d, ff)),
            b1: Array1::zeros(ff),
            w2: Array2::zeros((ff, d)),
            b2: v(),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, d: usize, ff: usize) -> Self {
        let mut p = Self::zeros(d, ff);
        p.ln1_gain.fill(1.0);
        p.ln2_gain.fill(1.0);
        p.wq = nn::xavier_uniform(rng, (d, d), d, d);
        p.wk = nn::xavier_uniform(rng, (d, d), d, d);
        p.wv = nn::xavier_uniform(rng, (d, d), d, d);
        p.wo = nn::xavier_uniform(rng, (d, d), d, d);
        p.w1 = nn::xavier_uniform(rng, (d, ff), d, ff);
        p.w2 = nn::xavier_uniform(rng, (ff, d), ff, d);
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    /// `[3, 3, C_in, C_f]`
    pub fuse_weight: Array4<f64>,
    pub fuse_bias: Array1<f64>,
    /// `[N·C_f, d_p]`
    pub token_weight: Array2<f64>,
    pub token_bias: Array1<f64>,
    /// Fixed (not trained) `[N, d_p]`; all zeros when disabled.
    pub pos_encoding: Array2<f64>,
    pub layers: Vec<TransformerLayerParams>,
    /// `[d_p, 1]`
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub heads: usize,
}

/// Shape parameters of a predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorShape {
    pub num_frames: usize,
    pub in_channels: usize,
    pub fusion_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
}

impl PredictorParams {
    pub fn zeros(shape: PredictorShape) -> Self {
        let PredictorShape { num_frames: n, in_channels, fusion_channels: cf, dim: d, heads, ff_dim, layers } = shape;
        Self {
            fuse_weight: Array4::zeros((3, 3, in_channels, cf)),
            fuse_bias: Array1::zeros(cf),
            token_weight: Array2::zeros((n * cf, d)),
            token_bias: Array1::zeros(d),
            pos_encoding: Array2::zeros((n, d)),
            layers: (0..layers).map(|_| TransformerLayerParams::zeros(d, ff_dim)).collect(),
            head_weight: Array2::zeros((d, 1)),
            head_bias: Array1::zeros(1),
            heads,
        }
    }

    pub fn init<R: Rng>(rng: &mut R, shape: PredictorShape, positional_encoding: bool) -> Self {
        let PredictorShape { num_frames: n, in_channels, fusion_channels: cf, dim: d, ff_dim, .. } = shape;
        let mut p = Self::zeros(shape);
        p.fuse_weight = nn::xavier_uniform(rng, (3, 3, in_channels, cf), 9 * in_channels, cf);
        p.token_weight = nn::xavier_uniform(rng, (n * cf, d), n * cf, d);
        for layer in p.layers.iter_mut() {
            *layer = TransformerLayerParams::init(rng, d, ff_dim);
        }
        p.head_weight = nn::xavier_uniform(rng, (d, 1), d, 1) * HEAD_WEIGHT_INIT_SCALE;
        p.head_bias.fill(HEAD_BIAS_INIT);
        if positional_encoding {
            p.pos_encoding = nn::sinusoidal_encoding(n, d);
        }
        p
    }

    pub fn shape(&self) -> PredictorShape {
        let (_, _, in_channels, fusion_channels) = self.fuse_weight.dim();
        let (num_frames, dim) = self.pos_encoding.dim();
        PredictorShape {
            num_frames,
            in_channels,
            fusion_channels,
            dim,
            heads: self.heads,
            ff_dim: self.layers.first().map(|l| l.w1.ncols()).unwrap_or(dim),
            layers: self.layers.len(),
        }
    }

    fn fuse_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        let (_, _, c, f) = self.fuse_weight.dim();
        self.fuse_weight.view().into_shape_with_order((9 * c, f)).expect("contiguous kernel")
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LayerNormCache,
    u: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
    ln2: LayerNormCache,
    u2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct PredictorCache {
    col: Array2<f64>,
    fuse_pre: Array2<f64>,
    tokens_in: Array2<f64>,
    layers: Vec<LayerCache>,
    out: Array2<f64>,
    head_pre: Array2<f64>,
}

fn head_slice(h: usize, dh: usize) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
    s![.., h * dh..(h + 1) * dh]
}

fn layer_forward(x: &Array2<f64>, p: &TransformerLayerParams, heads: usize) -> (Array2<f64>, LayerCache) {
    let (n, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (u, ln1) = nn::layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let q = u.dot(&p.wq) + &p.bq;
    let k = u.dot(&p.wk) + &p.bk;
    let v = u.dot(&p.wv) + &p.bv;
    let mut concat = Array2::zeros((n, d));
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = q.slice(head_slice(h, dh));
        let ks = k.slice(head_slice(h, dh));
        let a = nn::softmax_rows(&(qs.dot(&ks.t()) * scale));
        concat.slice_mut(head_slice(h, dh)).assign(&a.dot(&v.slice(head_slice(h, dh))));
        attn.push(a);
    }
    let r1 = x + &(concat.dot(&p.wo) + &p.bo);
    let (u2, ln2) = nn::layer_norm(&r1, &p.ln2_gain, &p.ln2_bias);
    let ff_pre = u2.dot(&p.w1) + &p.b1;
    let ff_act = nn::relu(&ff_pre);
    let out = &r1 + &(ff_act.dot(&p.w2) + &p.b2);
    let cache = LayerCache { ln1, u, q, k, v, attn, concat, ln2, u2, ff_pre, ff_act };
    (out, cache)
}

fn layer_backward(
    d_out: &Array2<f64>,
    p: &TransformerLayerParams,
    c: &LayerCache,
    heads: usize,
    g: &mut TransformerLayerParams,
) -> Array2<f64> {
    let d = d_out.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward sublayer
    g.w2 += &c.ff_act.t().dot(d_out);
    g.b2 += &d_out.sum_axis(Axis(0));
    let mut d_ff = d_out.dot(&p.w2.t());
    nn::relu_backward_inplace(&mut d_ff, &c.ff_pre);
    g.w1 += &c.u2.t().dot(&d_ff);
    g.b1 += &d_ff.sum_axis(Axis(0));
    let d_u2 = d_ff.dot(&p.w1.t());
    let (d_r1_ln, dg2, db2) = nn::layer_norm_backward(&d_u2, &p.ln2_gain, &c.ln2);
    g.ln2_gain += &dg2;
    g.ln2_bias += &db2;
    let d_r1 = d_out + &d_r1_ln;

    // attention sublayer
    g.wo += &c.concat.t().dot(&d_r1);
    g.bo += &d_r1.sum_axis(Axis(0));
    let d_concat = d_r1.dot(&p.wo.t());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for h in 0..heads {
        let a = &c.attn[h];
        let d_head = d_concat.slice(head_slice(h, dh));
        let da = d_head.dot(&c.v.slice(head_slice(h, dh)).t());
        dv.slice_mut(head_slice(h, dh)).assign(&a.t().dot(&d_head));
        let ds = nn::softmax_rows_backward(a, &da) * scale;
        dq.slice_mut(head_slice(h, dh)).assign(&ds.dot(&c.k.slice(head_slice(h, dh))));
        dk.slice_mut(head_slice(h, dh)).assign(&ds.t().dot(&c.q.slice(head_slice(h, dh))));
    }
    g.wq += &c.u.t().dot(&dq);
    g.bq += &dq.sum_axis(Axis(0));
    g.wk += &c.u.t().dot(&dk);
    g.bk += &dk.sum_axis(Axis(0));
    g.wv += &c.u.t().dot(&dv);
    g.bv += &dv.sum_axis(Axis(0));
    let d_u = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    let (d_x_ln, dg1, db1) = nn::layer_norm_backward(&d_u, &p.ln1_gain, &c.ln1);
    g.ln1_gain += &dg1;
    g.ln1_bias += &db1;
    d_r1 + d_x_ln
}

/// Transformer layers and head applied to per-frame tokens `[N, d_p]`
/// (positional encoding already added). Returns the ReLU'd density.
pub fn tokens_to_density(tokens: &Array2<f64>, params: &PredictorParams) -> Array1<f64> {
    let mut x = tokens.clone();
    for layer in &params.layers {
        x = layer_forward(&x, layer, params.heads).0;
    }
    (x.dot(&params.head_weight) + &params.head_bias).column(0).mapv(|v| if v < 0.0 { 0.0 } else { v })
}

pub(crate) fn predictor_forward(c: &CorrelationTensor, params: &PredictorParams) -> Result<(DensityMap, PredictorCache)> {
    let shape = params.shape();
    let (n, n2, cin) = c.shape();
    if n != shape.num_frames || n2 != n || cin != shape.in_channels {
        return Err(Error::shape(format!(
            "correlation {:?} does not match predictor ({}, {}, {})",
            c.shape(),
            shape.num_frames,
            shape.num_frames,
            shape.in_channels
        )));
    }
    let cf = shape.fusion_channels;
    let col = nn::im2col_2d(c.values.view());
    let fuse_pre = col.dot(&params.fuse_matrix()) + &params.fuse_bias;
    let tokens_in = nn::relu(&fuse_pre).into_shape_with_order((n, n * cf)).expect("row-major");
    let mut x = tokens_in.dot(&params.token_weight) + &params.token_bias + &params.pos_encoding;
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = layer_forward(&x, layer, params.heads);
        layers.push(cache);
        x = next;
    }
    let head_pre = x.dot(&params.head_weight) + &params.head_bias;
    let values = head_pre.column(0).iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
    let cache = PredictorCache { col, fuse_pre, tokens_in, layers, out: x, head_pre };
    Ok((DensityMap { values }, cache))
}

/// Per-frame density for a fused correlation tensor.
pub fn predict_density(c: &CorrelationTensor, params: &PredictorParams) -> Result<DensityMap> {
    predictor_forward(c, params).map(|(d, _)| d)
}

/// Accumulates parameter gradients into `grad` and returns the gradient
/// with respect to the correlation tensor.
pub(crate) fn predictor_backward(
    d_density: &[f64],
    params: &PredictorParams,
    cache: &PredictorCache,
    grad: &mut PredictorParams,
) -> Array3<f64> {
    let shape = params.shape();
    let n = shape.num_frames;
    let cf = shape.fusion_channels;

    let mut d_head = Array2::from_shape_vec((n, 1), d_density.to_vec()).expect("length N");
    nn::relu_backward_inplace(&mut d_head, &cache.head_pre);
    grad.head_weight += &cache.out.t().dot(&d_head);
    grad.head_bias += &d_head.sum_axis(Axis(0));
    let mut dx = d_head.dot(&params.head_weight.t());

    for (i, layer) in params.layers.iter().enumerate().rev() {
        dx = layer_backward(&dx, layer, &cache.layers[i], params.heads, &mut grad.layers[i]);
    }

    grad.token_weight += &cache.tokens_in.t().dot(&dx);
    grad.token_bias += &dx.sum_axis(Axis(0));
    let d_tokens = dx.dot(&params.token_weight.t());
    let mut d_fuse = d_tokens.into_shape_with_order((n * n, cf)).expect("row-major");
    nn::relu_backward_inplace(&mut d_fuse, &cache.fuse_pre);
    {
        let (_, _, c, f) = grad.fuse_weight.dim();
        let mut gw = grad.fuse_weight.view_mut().into_shape_with_order((9 * c, f)).expect("contiguous kernel");
        gw += &cache.col.t().dot(&d_fuse);
    }
    grad.fuse_bias += &d_fuse.sum_axis(Axis(0));
    let d_col = d_fuse.dot(&params.fuse_matrix().t());
    nn::col2im_2d(d_col.view(), n, n, shape.in_channels)
}
