//! Density targets, loss, optimizers and the seeded training loop.

mod gradcheck;
mod targets;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradReport, GRAD_CHECK_THRESHOLD};
pub use targets::{gaussian_bin_mass, make_density_target, mse_loss, TargetVariant};

use std::io::Write;
use std::path::Path;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, OptimizerKind, TrainConfig};
use crate::data::VideoRecord;
use crate::encoder::FeatureProvider;
use crate::model::{Model, ModelParams, PreparedVideo};
use crate::predictor::DensityMap;
use crate::sampling::map_cycles_to_samples;
use crate::{Error, Result};

/// A prepared video paired with its density target.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub video: PreparedVideo,
    pub target: DensityMap,
}

impl TrainSample {
    /// Samples the record's frames, maps its cycles into sample space and
    /// builds the target for `variant`.
    pub fn from_record(
        record: &VideoRecord,
        provider: &dyn FeatureProvider,
        config: &ModelConfig,
        variant: TargetVariant,
        sigma_floor: f64,
    ) -> Result<Self> {
        let video = PreparedVideo::new(&record.video_id, record.frame_count, provider, config)?;
        let spans = map_cycles_to_samples(&record.cycles, record.frame_count, config.num_frames);
        let target = make_density_target(&spans, config.num_frames, variant, sigma_floor)?;
        Ok(Self { video, target })
    }
}

/// Mean MSE over the batch and the gradient of that mean with respect to
/// every parameter. Items are reduced in batch order.
pub fn forward_backward(model: &Model, batch: &[&TrainSample]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let mut grad = ModelParams::zeros(&model.config);
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let (pred, cache) = model.forward(&sample.video)?;
        loss += mse_loss(&pred, &sample.target)? * scale;
        let n = pred.len() as f64;
        let d: Vec<f64> = pred.values.iter().zip(&sample.target.values).map(|(p, t)| 2.0 * (p - t) / n * scale).collect();
        model.backward(&sample.video, &cache, &d, &mut grad);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok((loss, grad))
}

/// Cosine decay from `lr` at step 0 to `lr / 10` at the last step.
pub fn learning_rate_at(lr: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let progress = step as f64 / (total - 1) as f64;
    let floor = lr / 10.0;
    floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `params -= lr * grad` over trainable tensors.
pub fn sgd_step(params: &mut ModelParams, grad: &ModelParams, lr: f64, config: &ModelConfig) {
    params.add_scaled(grad, -lr, config);
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8 and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ModelParams, config: &ModelConfig) -> Self {
        let m: Vec<_> = params.named(config).iter().map(|t| ArrayD::zeros(t.view.raw_dim())).collect();
        Self { v: m.clone(), m, t: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64, config: &ModelConfig) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let tensors = params.named_mut(config).into_iter().zip(grad.named(config));
        for ((mut p, g), (m, v)) in tensors.zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if !p.trainable {
                continue;
            }
            ndarray::Zip::from(&mut p.view).and(&g.view).and(m).and(v).for_each(|p, &g, m, v| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean batch loss before each update.
    pub history: Vec<f64>,
}

/// Seeded training: parameters are initialized from `config.seed`, the
/// dataset is reshuffled every epoch, and the learning rate follows
/// [`learning_rate_at`].
pub fn train(dataset: &[TrainSample], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, config, |_, _| {})
}

/// [`train`] with a callback invoked after each step with `(step, loss)`.
pub fn train_with_progress(
    dataset: &[TrainSample],
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let model_config = config.model_config();
    let mut model = Model::new(model_config.clone(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(&model.params, &model_config);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = match forward_backward(&model, &batch) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => return Err(Error::NonFinite(format!("{what} at step {step}"))),
            Err(e) => return Err(e),
        };
        let lr = learning_rate_at(config.learning_rate, step, config.steps);
        match config.optimizer {
            OptimizerKind::Adam => adam.step(&mut model.params, &grad, lr, &model_config),
            OptimizerKind::Sgd => sgd_step(&mut model.params, &grad, lr, &model_config),
        }
        history.push(loss);
        progress(step, loss);
    }
    Ok(TrainOutcome { model, history })
}

/// Writes a `step,loss` CSV.
pub fn write_loss_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss")?;
    for (i, loss) in history.iter().enumerate() {
        writeln!(out, "{i},{loss:e}")?;
    }
    out.flush()?;
    Ok(())
}
