//! Full counting model: parameters of every stage, a named-tensor view used
//! by the optimizer and checkpoints, and the end-to-end forward/backward.

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CorrelationMode, ModelConfig};
use crate::correlation::{
    attention_backward, attention_forward, fuse_scales, tsm_backward, tsm_scores, AttentionCache, AttentionParams,
    CorrelationTensor, HeadProjections,
};
use crate::encoder::{encoder_backward, encoder_forward, provide_features, EncoderCache, EncoderParams, FeatureProvider};
use crate::nn;
use crate::predictor::{predictor_backward, predictor_forward, DensityMap, PredictorCache, PredictorParams, PredictorShape};
use crate::sampling::{build_clipset, sample_frames};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub correlation: AttentionParams,
    pub predictor: PredictorParams,
}

/// A named tensor view. `trainable` is false for the fixed positional encoding.
pub struct NamedView<'a> {
    pub name: String,
    pub view: ArrayViewD<'a, f64>,
    pub trainable: bool,
}

pub struct NamedViewMut<'a> {
    pub name: String,
    pub view: ArrayViewMutD<'a, f64>,
    pub trainable: bool,
}

// One listing of every tensor, instantiated for shared and mutable views so
// names and order cannot drift apart.
macro_rules! named_tensors {
    ($p:expr, $config:expr, $view:ident, $iter:ident, $item:ident) => {{
        let mut out = Vec::new();
        let mut push = |name: String, view, trainable: bool| out.push($item { name, view, trainable });
        push("encoder.conv.weight".into(), $p.encoder.weight.$view().into_dyn(), true);
        push("encoder.conv.bias".into(), $p.encoder.bias.$view().into_dyn(), true);
        for (scale, proj) in $config.scales.iter().zip($p.correlation.scales.$iter()) {
            push(format!("correlation.scale{}.wq", scale.window()), proj.wq.$view().into_dyn(), true);
            push(format!("correlation.scale{}.wk", scale.window()), proj.wk.$view().into_dyn(), true);
        }
        push("predictor.fuse.weight".into(), $p.predictor.fuse_weight.$view().into_dyn(), true);
        push("predictor.fuse.bias".into(), $p.predictor.fuse_bias.$view().into_dyn(), true);
        push("predictor.token.weight".into(), $p.predictor.token_weight.$view().into_dyn(), true);
        push("predictor.token.bias".into(), $p.predictor.token_bias.$view().into_dyn(), true);
        push("predictor.pos_encoding".into(), $p.predictor.pos_encoding.$view().into_dyn(), false);
        for (i, l) in $p.predictor.layers.$iter().enumerate() {
            let pre = format!("predictor.layer{i}");
            push(format!("{pre}.ln1.gain"), l.ln1_gain.$view().into_dyn(), true);
            push(format!("{pre}.ln1.bias"), l.ln1_bias.$view().into_dyn(), true);
            push(format!("{pre}.attn.wq"), l.wq.$view().into_dyn(), true);
            push(format!("{pre}.attn.bq"), l.bq.$view().into_dyn(), true);
            push(format!("{pre}.attn.wk"), l.wk.$view().into_dyn(), true);
            push(format!("{pre}.attn.bk"), l.bk.$view().into_dyn(), true);
            push(format!("{pre}.attn.wv"), l.wv.$view().into_dyn(), true);
            push(format!("{pre}.attn.bv"), l.bv.$view().into_dyn(), true);
            push(format!("{pre}.attn.wo"), l.wo.$view().into_dyn(), true);
            push(format!("{pre}.attn.bo"), l.bo.$view().into_dyn(), true);
            push(format!("{pre}.ln2.gain"), l.ln2_gain.$view().into_dyn(), true);
            push(format!("{pre}.ln2.bias"), l.ln2_bias.$view().into_dyn(), true);
            push(format!("{pre}.ff.w1"), l.w1.$view().into_dyn(), true);
            push(format!("{pre}.ff.b1"), l.b1.$view().into_dyn(), true);
            push(format!("{pre}.ff.w2"), l.w2.$view().into_dyn(), true);
            push(format!("{pre}.ff.b2"), l.b2.$view().into_dyn(), true);
        }
        push("predictor.head.weight".into(), $p.predictor.head_weight.$view().into_dyn(), true);
        push("predictor.head.bias".into(), $p.predictor.head_bias.$view().into_dyn(), true);
        out
    }};
}

fn predictor_shape(config: &ModelConfig) -> PredictorShape {
    let d = &config.dims;
    PredictorShape {
        num_frames: config.num_frames,
        in_channels: config.correlation_channels(),
        fusion_channels: d.fusion_channels,
        dim: d.predictor_dim,
        heads: d.predictor_heads,
        ff_dim: d.ff_dim,
        layers: d.predictor_layers,
    }
}

impl ModelParams {
    /// All-zero parameters (also the gradient accumulator layout).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = &config.dims;
        let scales = match config.correlation_mode {
            CorrelationMode::Attention => {
                config.scales.iter().map(|_| HeadProjections::zeros(d.heads, d.embed_dim, config.head_dim())).collect()
            }
            CorrelationMode::Tsm => Vec::new(),
        };
        Self {
            encoder: EncoderParams::zeros(d.feature_dim, d.embed_dim),
            correlation: AttentionParams { scales },
            predictor: PredictorParams::zeros(predictor_shape(config)),
        }
    }

    /// Seeded initialization: Xavier-uniform weights, zero biases, unit
    /// layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = &config.dims;
        let encoder = EncoderParams::init(&mut rng, d.feature_dim, d.embed_dim);
        let scales = match config.correlation_mode {
            CorrelationMode::Attention => config
                .scales
                .iter()
                .map(|_| HeadProjections::init(&mut rng, d.heads, d.embed_dim, config.head_dim()))
                .collect(),
            CorrelationMode::Tsm => Vec::new(),
        };
        let predictor = PredictorParams::init(&mut rng, predictor_shape(config), d.positional_encoding);
        Self { encoder, correlation: AttentionParams { scales }, predictor }
    }

    pub fn named<'a>(&'a self, config: &ModelConfig) -> Vec<NamedView<'a>> {
        named_tensors!(self, config, view, iter, NamedView)
    }

    pub fn named_mut<'a>(&'a mut self, config: &ModelConfig) -> Vec<NamedViewMut<'a>> {
        named_tensors!(self, config, view_mut, iter_mut, NamedViewMut)
    }

    pub fn num_trainable(&self, config: &ModelConfig) -> usize {
        self.named(config).iter().filter(|t| t.trainable).map(|t| t.view.len()).sum()
    }

    /// `self += factor * other`, over trainable tensors.
    pub fn add_scaled(&mut self, other: &ModelParams, factor: f64, config: &ModelConfig) {
        for (mut dst, src) in self.named_mut(config).into_iter().zip(other.named(config)) {
            if dst.trainable {
                dst.view.scaled_add(factor, &src.view);
            }
        }
    }
}

/// A video ready for the model: one unfolded clip-feature matrix per scale.
/// Features come from a frozen provider, so this is computed once.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub video_id: String,
    pub unfolded: Vec<Array2<f64>>,
    pub cells: usize,
}

impl PreparedVideo {
    pub fn new(video_id: &str, frame_count: usize, provider: &dyn FeatureProvider, config: &ModelConfig) -> Result<Self> {
        let (s1, s2, f) = provider.dims();
        if (s1, s2) != config.dims.grid || f != config.dims.feature_dim {
            return Err(Error::shape(format!(
                "provider dims {:?} do not match model grid {:?} x {}",
                (s1, s2, f),
                config.dims.grid,
                config.dims.feature_dim
            )));
        }
        let sampled = sample_frames(frame_count, config.num_frames)?;
        let unfolded = config
            .scales
            .iter()
            .map(|scale| {
                let clips = build_clipset(config.num_frames, scale.window())?;
                let features = provide_features(&clips, &sampled, provider)?;
                Ok(nn::im2col_3d(features.view()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { video_id: video_id.to_string(), unfolded, cells: s1 * s2 })
    }
}

#[derive(Debug, Clone)]
enum CorrelationCache {
    Attention(AttentionCache),
    Tsm(Array2<f64>),
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    embeddings: Vec<Array2<f64>>,
    encoder: Vec<EncoderCache>,
    correlation: Vec<CorrelationCache>,
    predictor: PredictorCache,
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    /// Fused correlation tensor for a prepared video.
    pub fn correlation(&self, video: &PreparedVideo) -> Result<CorrelationTensor> {
        self.forward_correlation(video).map(|(c, ..)| c)
    }

    #[allow(clippy::type_complexity)]
    fn forward_correlation(
        &self,
        video: &PreparedVideo,
    ) -> Result<(CorrelationTensor, Vec<Array2<f64>>, Vec<EncoderCache>, Vec<CorrelationCache>)> {
        if video.unfolded.len() != self.config.scales.len() {
            return Err(Error::shape("prepared video scale count differs from model"));
        }
        let mut embeddings = Vec::new();
        let mut enc_caches = Vec::new();
        let mut corr_caches = Vec::new();
        let mut per_scale = Vec::new();
        for (i, col) in video.unfolded.iter().enumerate() {
            if col.nrows() != self.config.num_frames * video.cells {
                return Err(Error::shape("prepared video frame count differs from model"));
            }
            let (x, enc) = encoder_forward(col, video.cells, &self.params.encoder);
            match self.config.correlation_mode {
                CorrelationMode::Attention => {
                    let (c, cache) = attention_forward(&x, &self.params.correlation.scales[i])?;
                    per_scale.push(c);
                    corr_caches.push(CorrelationCache::Attention(cache));
                }
                CorrelationMode::Tsm => {
                    let a = nn::softmax_rows(&tsm_scores(&x));
                    let n = a.nrows();
                    per_scale.push(a.clone().into_shape_with_order((n, n, 1)).expect("contiguous"));
                    corr_caches.push(CorrelationCache::Tsm(a));
                }
            }
            embeddings.push(x);
            enc_caches.push(enc);
        }
        Ok((fuse_scales(&per_scale)?, embeddings, enc_caches, corr_caches))
    }

    pub fn forward(&self, video: &PreparedVideo) -> Result<(DensityMap, ForwardCache)> {
        let (fused, embeddings, encoder, correlation) = self.forward_correlation(video)?;
        let (density, predictor) = predictor_forward(&fused, &self.params.predictor)?;
        if density.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("density for video {}", video.video_id)));
        }
        Ok((density, ForwardCache { embeddings, encoder, correlation, predictor }))
    }

    pub fn predict(&self, video: &PreparedVideo) -> Result<DensityMap> {
        self.forward(video).map(|(d, _)| d)
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d density`.
    pub fn backward(&self, video: &PreparedVideo, cache: &ForwardCache, d_density: &[f64], grad: &mut ModelParams) {
        let d_corr = predictor_backward(d_density, &self.params.predictor, &cache.predictor, &mut grad.predictor);
        let channels = d_corr.dim().2 / self.config.scales.len();
        for (i, col) in video.unfolded.iter().enumerate() {
            let slice = d_corr.slice(ndarray::s![.., .., i * channels..(i + 1) * channels]);
            let x = &cache.embeddings[i];
            let d_embed = match &cache.correlation[i] {
                CorrelationCache::Attention(ac) => attention_backward(
                    x,
                    &self.params.correlation.scales[i],
                    ac,
                    slice,
                    &mut grad.correlation.scales[i],
                ),
                CorrelationCache::Tsm(a) => tsm_backward(x, a, slice),
            };
            encoder_backward(col, &cache.encoder[i], &d_embed, &mut grad.encoder);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FrameFeatures;
    use ndarray::Array4;
    use rand::Rng;

    #[test]
    fn names_unique_and_views_aligned() {
        let config = ModelConfig::gradcheck();
        let mut p = ModelParams::init(&config, 0);
        let names: Vec<String> = p.named(&config).into_iter().map(|t| t.name).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let mut_names: Vec<String> = p.named_mut(&config).into_iter().map(|t| t.name).collect();
        assert_eq!(names, mut_names);
        assert!(names.contains(&"correlation.scale8.wk".to_string()));
    }

    #[test]
    fn default_fused_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let features = Array4::from_shape_simple_fn((100, 2, 2, 16), || rng.random_range(-1.0..1.0));
        let provider = FrameFeatures::new(features);
        for (mode, channels) in [(CorrelationMode::Attention, 12), (CorrelationMode::Tsm, 3)] {
            let config = ModelConfig { correlation_mode: mode, ..ModelConfig::desk() };
            let model = Model::new(config.clone(), 1).unwrap();
            let video = PreparedVideo::new("v", 100, &provider, &config).unwrap();
            let c = model.correlation(&video).unwrap();
            assert_eq!(c.shape(), (64, 64, channels));
            let d = model.predict(&video).unwrap();
            assert_eq!(d.len(), 64);
        }
    }

    #[test]
    fn provider_mismatch_rejected() {
        let provider = FrameFeatures::new(Array4::zeros((10, 3, 3, 16)));
        assert!(PreparedVideo::new("v", 10, &provider, &ModelConfig::desk()).is_err());
    }
}
