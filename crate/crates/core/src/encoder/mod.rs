//! Clip encoder: frozen feature provider, temporal-context 3D convolution
//! with ReLU, and spatial global max-pooling.

mod racf;

pub use racf::{load_racf, read_racf, save_racf, write_racf, RACF_MAGIC, RACF_VERSION};

use ndarray::{Array1, Array2, Array3, Array4, Array5, Axis};
use rand::Rng;

use crate::nn;
use crate::sampling::{ClipSet, SampledIndexMap, Scale};
use crate::{Error, Result};

/// Stand-in for a frozen video backbone: maps the source frames of one clip
/// to a `[S1, S2, d_f]` grid feature.
pub trait FeatureProvider {
    /// `(S1, S2, d_f)`, constant across calls.
    fn dims(&self) -> (usize, usize, usize);

    fn clip_features(&self, frames: &[usize]) -> Result<Array3<f64>>;
}

/// Per-frame grid features (synthetic or loaded from RACF). A clip is
/// summarized by the mean of its frames' grids.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub features: Array4<f64>,
}

impl FrameFeatures {
    pub fn new(features: Array4<f64>) -> Self {
        Self { features }
    }

    pub fn num_frames(&self) -> usize {
        self.features.dim().0
    }
}

impl FeatureProvider for FrameFeatures {
    fn dims(&self) -> (usize, usize, usize) {
        let (_, a, b, c) = self.features.dim();
        (a, b, c)
    }

    fn clip_features(&self, frames: &[usize]) -> Result<Array3<f64>> {
        let (a, b, c) = self.dims();
        let mut acc = Array3::zeros((a, b, c));
        for &f in frames {
            if f >= self.num_frames() {
                return Err(Error::validation(format!("frame {f} outside feature sequence of {}", self.num_frames())));
            }
            acc += &self.features.index_axis(Axis(0), f);
        }
        Ok(acc / frames.len() as f64)
    }
}

/// Returns the same grid for every clip.
#[derive(Debug, Clone)]
pub struct ConstantProvider {
    pub grid: Array3<f64>,
}

impl FeatureProvider for ConstantProvider {
    fn dims(&self) -> (usize, usize, usize) {
        self.grid.dim()
    }

    fn clip_features(&self, _frames: &[usize]) -> Result<Array3<f64>> {
        Ok(self.grid.clone())
    }
}

/// Per-scale embedding sequence `[N, d_e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub values: Array2<f64>,
    pub scale: Scale,
}

/// Temporal-context convolution: kernel `[3, 3, 3, d_f, d_e]` over
/// (time, height, width, in, out) plus `d_e` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub weight: Array5<f64>,
    pub bias: Array1<f64>,
}

impl EncoderParams {
    pub fn zeros(feature_dim: usize, embed_dim: usize) -> Self {
        Self { weight: Array5::zeros((3, 3, 3, feature_dim, embed_dim)), bias: Array1::zeros(embed_dim) }
    }

    pub fn init<R: Rng>(rng: &mut R, feature_dim: usize, embed_dim: usize) -> Self {
        let fan_in = 27 * feature_dim;
        let weight = nn::xavier_uniform(rng, (3, 3, 3, feature_dim, embed_dim), fan_in, embed_dim);
        Self { weight, bias: Array1::zeros(embed_dim) }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.dim().3
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.dim().4
    }

    /// Kernel viewed as the `[27·d_f, d_e]` matrix matching [`nn::im2col_3d`].
    pub(crate) fn kernel_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        let (_, _, _, f, e) = self.weight.dim();
        self.weight.view().into_shape_with_order((27 * f, e)).expect("contiguous kernel")
    }
}

/// Asks the provider for one grid per clip: slot `t` holds clip `t`.
pub fn provide_features(
    clipset: &ClipSet,
    sampled: &SampledIndexMap,
    provider: &dyn FeatureProvider,
) -> Result<Array4<f64>> {
    let n = clipset.clips.len();
    if sampled.len() != n {
        return Err(Error::shape(format!("clipset has {n} clips but {} sampled frames", sampled.len())));
    }
    let (a, b, c) = provider.dims();
    let mut out = Array4::zeros((n, a, b, c));
    for t in 0..n {
        let frames: Vec<usize> = clipset.resolved(t).map(|p| sampled.indices[p]).collect();
        let grid = provider.clip_features(&frames)?;
        if grid.dim() != (a, b, c) {
            return Err(Error::shape(format!("provider returned {:?} for clip {t}, declared {:?}", grid.dim(), (a, b, c))));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("provider output for clip {t}")));
        }
        out.index_axis_mut(Axis(0), t).assign(&grid);
    }
    Ok(out)
}

/// Pre-activation of the temporal-context conv from an unfolded input.
pub(crate) fn conv_preactivation(col: &Array2<f64>, params: &EncoderParams) -> Array2<f64> {
    col.dot(&params.kernel_matrix()) + &params.bias
}

/// 3D convolution over (time, height, width), stride 1, zero "same"
/// padding, followed by ReLU.
pub fn temporal_context(features: &Array4<f64>, params: &EncoderParams) -> Result<Array4<f64>> {
    let (n, a, b, c) = features.dim();
    if c != params.feature_dim() {
        return Err(Error::shape(format!("features have {c} channels, kernel expects {}", params.feature_dim())));
    }
    let col = nn::im2col_3d(features.view());
    let out = nn::relu(&conv_preactivation(&col, params));
    Ok(out.into_shape_with_order((n, a, b, params.embed_dim())).expect("row count matches"))
}

/// Global max over the spatial grid: `[N, S1, S2, d_e] -> [N, d_e]`.
pub fn spatial_maxpool(x: &Array4<f64>, scale: Scale) -> Result<EmbeddingSequence> {
    let (n, a, b, e) = x.dim();
    if a == 0 || b == 0 {
        return Err(Error::shape("spatial grid must be nonempty"));
    }
    let flat = x.view().into_shape_with_order((n, a * b, e)).expect("standard layout");
    let values = flat.fold_axis(Axis(1), f64::NEG_INFINITY, |m, &v| m.max(v));
    Ok(EmbeddingSequence { values, scale })
}

/// Max-pool over rows grouped by `cells` consecutive rows; returns the
/// pooled `[N, d_e]` values and the winning row for each output entry.
pub(crate) fn maxpool_rows(act: &Array2<f64>, cells: usize) -> (Array2<f64>, Array2<usize>) {
    let n = act.nrows() / cells;
    let e = act.ncols();
    let mut values = Array2::from_elem((n, e), f64::NEG_INFINITY);
    let mut argmax = Array2::zeros((n, e));
    for t in 0..n {
        for cell in 0..cells {
            let row = t * cells + cell;
            for ch in 0..e {
                let v = act[[row, ch]];
                if v > values[[t, ch]] {
                    values[[t, ch]] = v;
                    argmax[[t, ch]] = row;
                }
            }
        }
    }
    (values, argmax)
}

/// Full clip encoding for one scale.
pub fn encode_scale(
    clipset: &ClipSet,
    sampled: &SampledIndexMap,
    provider: &dyn FeatureProvider,
    params: &EncoderParams,
) -> Result<EmbeddingSequence> {
    let features = provide_features(clipset, sampled, provider)?;
    let context = temporal_context(&features, params)?;
    spatial_maxpool(&context, clipset.scale)
}

/// Saved state of the encoder forward pass for one scale.
#[derive(Debug, Clone)]
pub(crate) struct EncoderCache {
    pub pre: Array2<f64>,
    pub argmax: Array2<usize>,
}

/// Encoder forward from a precomputed unfolded input (the provider is
/// frozen, so the unfold is computed once per video).
pub(crate) fn encoder_forward(col: &Array2<f64>, cells: usize, params: &EncoderParams) -> (Array2<f64>, EncoderCache) {
    let pre = conv_preactivation(col, params);
    let act = nn::relu(&pre);
    let (values, argmax) = maxpool_rows(&act, cells);
    (values, EncoderCache { pre, argmax })
}

/// Accumulates kernel and bias gradients given `d_embed` `[N, d_e]`.
pub(crate) fn encoder_backward(
    col: &Array2<f64>,
    cache: &EncoderCache,
    d_embed: &Array2<f64>,
    grad: &mut EncoderParams,
) {
    let mut d_pre = Array2::zeros(cache.pre.raw_dim());
    for ((t, ch), &g) in d_embed.indexed_iter() {
        let row = cache.argmax[[t, ch]];
        if cache.pre[[row, ch]] > 0.0 {
            d_pre[[row, ch]] += g;
        }
    }
    let dw = col.t().dot(&d_pre);
    let (_, _, _, f, e) = grad.weight.dim();
    let mut gw = grad.weight.view_mut().into_shape_with_order((27 * f, e)).expect("contiguous kernel");
    gw += &dw;
    grad.bias += &d_pre.sum_axis(Axis(0));
}
