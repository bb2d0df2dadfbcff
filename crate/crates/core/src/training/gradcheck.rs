//! Central finite-difference verification of the analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward_backward, TrainSample};
use crate::config::TrainConfig;
use crate::data::{generate_suite, SuiteSpec};
use crate::encoder::FrameFeatures;
use crate::model::{Model, ModelParams};
use crate::Result;

/// A report passes when every checked scalar is within this relative error.
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;

/// Denominator floor of the relative error. Some gradients are exactly zero
/// (a key bias shifts every score in a softmax row equally), and central
/// differences of those return pure rounding noise, about `ε_mach·L/eps`;
/// the floor keeps that noise from reading as a 100% error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub checked: usize,
    /// Samples re-evaluated with a smaller step after a kink was detected.
    pub refined: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tensors: Vec<TensorError>,
    pub global_max: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(6).max(6);
        writeln!(f, "{:<width$}  {:>7}  {:>7}  {:>12}", "tensor", "checked", "refined", "max_rel_err")?;
        for t in &self.tensors {
            writeln!(f, "{:<width$}  {:>7}  {:>7}  {:>12.3e}", t.name, t.checked, t.refined, t.max_rel_error)?;
        }
        write!(
            f,
            "global max relative error {:.3e} (threshold {:.0e}): {}",
            self.global_max,
            self.threshold,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Scalars per tensor; larger tensors are subsampled (seeded).
    pub max_per_tensor: usize,
    /// Multiply the analytic gradient of the named tensor by a factor before
    /// comparing, to confirm the check is sensitive.
    pub corrupt: Option<(String, f64)>,
    /// How many times a sample whose step straddles a ReLU kink is retried
    /// with a ten times smaller step. A kink is diagnosed when the forward
    /// and backward one-sided slopes differ by at least the observed error;
    /// a wrong gradient is wrong at every step size and still fails.
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_per_tensor: 64, corrupt: None, kink_retries: 2 }
    }
}

/// Gradient check with default options and the given step.
pub fn grad_check(config: &TrainConfig, seed: u64, eps: f64) -> Result<GradReport> {
    grad_check_with(config, seed, &GradCheckOptions { eps, ..Default::default() })
}

/// Builds a `batch_size` batch of short synthetic videos, moves the model to
/// a generic point (random biases, perturbed gains) and compares analytic
/// gradients with `(L(p + ε) − L(p − ε)) / 2ε`.
pub fn grad_check_with(config: &TrainConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradReport> {
    config.validate()?;
    let mc = config.model_config();
    let mut suite = SuiteSpec::desk(config.batch_size, 3 * config.num_frames, (2, 4), (3, config.num_frames / 2 + 3));
    suite.feature_dim = mc.dims.feature_dim;
    suite.spatial_grid = mc.dims.grid;
    suite.noise_sigma = 0.1;
    let samples = generate_suite(&suite, seed)?
        .into_iter()
        .map(|v| {
            let provider = FrameFeatures::new(v.features);
            TrainSample::from_record(&v.record, &provider, &mc, config.variant, config.sigma_floor)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<&TrainSample> = samples.iter().collect();

    let mut model = Model::new(mc.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    for t in model.params.named_mut(&mc) {
        let name = t.name.clone();
        // the head bias stays at its positive init so the output ReLU is live
        if !t.trainable || name == "predictor.head.bias" {
            continue;
        }
        let mut view = t.view;
        if name.ends_with("bias") || name.contains(".b") {
            view.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
        } else if name.ends_with("gain") {
            view.mapv_inplace(|v| v + rng.random_range(-0.2..0.2));
        }
    }

    let (base_loss, grad) = forward_backward(&model, &batch)?;
    let loss_at = |params: &ModelParams| -> Result<f64> {
        let m = Model { config: mc.clone(), params: params.clone() };
        forward_backward(&m, &batch).map(|(l, _)| l)
    };

    let names: Vec<(String, bool, usize)> =
        model.params.named(&mc).into_iter().map(|t| (t.name, t.trainable, t.view.len())).collect();
    let grads: Vec<Vec<f64>> = grad.named(&mc).into_iter().map(|t| t.view.iter().copied().collect()).collect();

    let mut tensors = Vec::new();
    let mut params = model.params.clone();
    for (ti, (name, trainable, len)) in names.iter().enumerate() {
        if !trainable {
            continue;
        }
        let indices: Vec<usize> = if *len <= opts.max_per_tensor {
            (0..*len).collect()
        } else {
            let mut v = sample(&mut rng, *len, opts.max_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let factor = match &opts.corrupt {
            Some((target, f)) if target == name => *f,
            _ => 1.0,
        };
        let mut worst: f64 = 0.0;
        let mut refined = 0;
        for &i in &indices {
            let analytic = grads[ti][i] * factor;
            let original = scalar(&mut params, &mc, ti, i, None);
            let mut eps = opts.eps;
            let mut retries = 0;
            let rel = loop {
                scalar(&mut params, &mc, ti, i, Some(original + eps));
                let plus = loss_at(&params)?;
                scalar(&mut params, &mc, ti, i, Some(original - eps));
                let minus = loss_at(&params)?;
                scalar(&mut params, &mc, ti, i, Some(original));
                let numeric = (plus - minus) / (2.0 * eps);
                let diff = (analytic - numeric).abs();
                let rel = diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
                let kink = ((plus - base_loss) / eps - (base_loss - minus) / eps).abs() >= diff;
                if rel <= GRAD_CHECK_THRESHOLD || !kink || retries == opts.kink_retries {
                    break rel;
                }
                retries += 1;
                eps /= 10.0;
            };
            refined += usize::from(retries > 0);
            worst = worst.max(rel);
        }
        tensors.push(TensorError { name: name.clone(), checked: indices.len(), refined, max_rel_error: worst });
    }
    let global_max = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradReport { tensors, global_max, threshold: GRAD_CHECK_THRESHOLD, pass: global_max <= GRAD_CHECK_THRESHOLD })
}

/// Reads scalar `i` (logical order) of tensor `ti`, optionally overwriting it.
fn scalar(params: &mut ModelParams, config: &crate::config::ModelConfig, ti: usize, i: usize, set: Option<f64>) -> f64 {
    let mut tensors = params.named_mut(config);
    let slot = tensors[ti].view.iter_mut().nth(i).expect("index in range");
    let old = *slot;
    if let Some(v) = set {
        *slot = v;
    }
    old
}
