//! Gaussian density targets built from cycle annotations.
//!
//! Each cycle `(s, e)` becomes a Gaussian with `σ = (e − s) / 6`, so that
//! `μ ± 3σ` spans the cycle, integrated over unit-width frame bins and
//! renormalized to unit mass. The whole map therefore sums to the count.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::data::CycleSpan;
use crate::predictor::DensityMap;
use crate::{Error, Result};

/// Where each cycle's Gaussian is centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetVariant {
    Begin,
    Mid,
    End,
    /// Mean of the begin, mid and end maps.
    Merge,
}

impl std::str::FromStr for TargetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "begin" => Ok(Self::Begin),
            "mid" => Ok(Self::Mid),
            "end" => Ok(Self::End),
            "merge" => Ok(Self::Merge),
            other => Err(Error::validation(format!("unknown target variant `{other}`"))),
        }
    }
}

/// Standard normal upper tail `Q(x) = 1 − Φ(x)`, via `erfc` (msun port,
/// accurate to ~1 ulp).
fn upper_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// `Φ(b) − Φ(a)` for `a ≤ b`, choosing the form that avoids cancellation
/// in the tails.
fn normal_interval(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        upper_tail(a) - upper_tail(b)
    } else if b <= 0.0 {
        upper_tail(-b) - upper_tail(-a)
    } else {
        1.0 - upper_tail(-a) - upper_tail(b)
    }
}

/// Probability mass of `N(μ, σ²)` inside the bin `[k − 0.5, k + 0.5]`.
pub fn gaussian_bin_mass(mu: f64, sigma: f64, k: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::validation(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(normal_interval((k - 0.5 - mu) / sigma, (k + 0.5 - mu) / sigma))
}

fn single_variant(spans: &[CycleSpan], n: usize, centre: impl Fn(&CycleSpan) -> f64, sigma_floor: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    let mut raw = vec![0.0; n];
    for span in spans {
        let sigma = ((span.end_frame - span.start_frame) as f64 / 6.0).max(sigma_floor);
        let mu = centre(span);
        for (k, r) in raw.iter_mut().enumerate() {
            *r = gaussian_bin_mass(mu, sigma, k as f64)?;
        }
        let total: f64 = raw.iter().sum();
        for (o, r) in out.iter_mut().zip(&raw) {
            *o += r / total;
        }
    }
    Ok(out)
}

/// Density target over `n` sampled frames for cycles already mapped into
/// sample space.
pub fn make_density_target(spans: &[CycleSpan], n: usize, variant: TargetVariant, sigma_floor: f64) -> Result<DensityMap> {
    if let Some(bad) = spans.iter().find(|s| s.end_frame >= n || s.start_frame > s.end_frame) {
        return Err(Error::validation(format!("span {bad:?} outside [0, {n})")));
    }
    if !(sigma_floor > 0.0) {
        return Err(Error::validation("sigma_floor must be > 0"));
    }
    let begin = |s: &CycleSpan| s.start_frame as f64;
    let mid = |s: &CycleSpan| (s.start_frame + s.end_frame) as f64 / 2.0;
    let end = |s: &CycleSpan| s.end_frame as f64;
    let values = match variant {
        TargetVariant::Begin => single_variant(spans, n, begin, sigma_floor)?,
        TargetVariant::Mid => single_variant(spans, n, mid, sigma_floor)?,
        TargetVariant::End => single_variant(spans, n, end, sigma_floor)?,
        TargetVariant::Merge => {
            let b = single_variant(spans, n, begin, sigma_floor)?;
            let m = single_variant(spans, n, mid, sigma_floor)?;
            let e = single_variant(spans, n, end, sigma_floor)?;
            b.iter().zip(&m).zip(&e).map(|((x, y), z)| (x + y + z) / 3.0).collect()
        }
    };
    Ok(DensityMap { values })
}

/// Mean squared error over frames.
pub fn mse_loss(pred: &DensityMap, target: &DensityMap) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!("prediction length {} vs target {}", pred.len(), target.len())));
    }
    let n = pred.len() as f64;
    Ok(pred.values.iter().zip(&target.values).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Composite Simpson integration of the normal density; independent of erf.
    fn simpson_mass(mu: f64, sigma: f64, k: f64) -> f64 {
        let pdf = |y: f64| (-(y - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let (a, b) = (k - 0.5, k + 0.5);
        let m = 2000;
        let h = (b - a) / m as f64;
        let mut acc = pdf(a) + pdf(b);
        for i in 1..m {
            acc += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn bin_mass_reference_values() {
        let centre = gaussian_bin_mass(13.0, 1.0, 13.0).unwrap();
        let side = gaussian_bin_mass(13.0, 1.0, 12.0).unwrap();
        assert_abs_diff_eq!(centre, simpson_mass(13.0, 1.0, 13.0), epsilon = 1e-12);
        assert_abs_diff_eq!(side, simpson_mass(13.0, 1.0, 12.0), epsilon = 1e-12);
        assert_abs_diff_eq!(centre, 0.382925, epsilon = 1e-6);
        assert_abs_diff_eq!(side, 0.241730, epsilon = 1e-6);
    }

    #[test]
    fn far_tail_negligible() {
        for mu in [-3.7, 0.0, 13.0, 100.25] {
            for off in [8.6, 9.0, 20.0, -8.6, -12.0] {
                assert!(gaussian_bin_mass(mu, 1.0, (mu + off as f64).round()).unwrap() < 1e-14);
            }
        }
    }

    #[test]
    fn non_positive_sigma() {
        assert!(gaussian_bin_mass(0.0, 0.0, 0.0).is_err());
        assert!(gaussian_bin_mass(0.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn single_mid_span() {
        let t = make_density_target(&[CycleSpan::new(10, 16)], 32, TargetVariant::Mid, 0.1).unwrap();
        assert_abs_diff_eq!(t.values.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        let argmax = (0..32).max_by(|&a, &b| t.values[a].total_cmp(&t.values[b])).unwrap();
        assert_eq!(argmax, 13);
    }

    #[test]
    fn empty_and_multi_span() {
        let t = make_density_target(&[], 16, TargetVariant::Mid, 0.1).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.0));
        let spans: Vec<_> = (0..5).map(|i| CycleSpan::new(i * 6, i * 6 + 5)).collect();
        let t = make_density_target(&spans, 32, TargetVariant::Mid, 0.1).unwrap();
        assert_abs_diff_eq!(t.values.iter().sum::<f64>(), 5.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_span_uses_floor() {
        let t = make_density_target(&[CycleSpan::new(4, 4)], 8, TargetVariant::Mid, 0.1).unwrap();
        assert!(t.values[4] > 0.999);
        assert_abs_diff_eq!(t.values.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_span() {
        assert!(make_density_target(&[CycleSpan::new(3, 8)], 8, TargetVariant::Mid, 0.1).is_err());
    }

    #[test]
    fn mse_cases() {
        let d = |v: Vec<f64>| DensityMap { values: v };
        assert_eq!(mse_loss(&d(vec![0.3, 0.2]), &d(vec![0.3, 0.2])).unwrap(), 0.0);
        assert_eq!(mse_loss(&d(vec![1.5, 2.0]), &d(vec![0.5, 1.0])).unwrap(), 1.0);
        assert_eq!(mse_loss(&d(vec![0.0, 1.0]), &d(vec![1.0, 1.0])).unwrap(), 0.5);
        assert!(mse_loss(&d(vec![0.0]), &d(vec![0.0, 1.0])).is_err());
    }

    proptest! {
        #[test]
        fn bin_masses_sum_to_one(mu in -20.0f64..20.0, sigma in 0.1f64..5.0) {
            let lo = (mu - 10.0 * sigma).floor() as i64 - 1;
            let hi = (mu + 10.0 * sigma).ceil() as i64 + 1;
            let total: f64 = (lo..=hi).map(|k| gaussian_bin_mass(mu, sigma, k as f64).unwrap()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "total {}", total);
        }

        #[test]
        fn target_invariants(
            raw in prop::collection::vec((0usize..60, 0usize..12), 0..8),
            variant in prop::sample::select(vec![TargetVariant::Begin, TargetVariant::Mid, TargetVariant::End, TargetVariant::Merge]),
        ) {
            let n = 64;
            let spans: Vec<CycleSpan> = raw.iter().map(|&(s, l)| CycleSpan::new(s, (s + l).min(n - 1))).collect();
            let t = make_density_target(&spans, n, variant, 0.1).unwrap();
            prop_assert!(t.values.iter().all(|&v| v >= 0.0));
            prop_assert!((t.values.iter().sum::<f64>() - spans.len() as f64).abs() <= 1e-9);
            if variant == TargetVariant::Mid {
                for s in &spans {
                    let one = make_density_target(std::slice::from_ref(s), n, variant, 0.1).unwrap();
                    let mu = (s.start_frame + s.end_frame) as f64 / 2.0;
                    let argmax = (0..n).max_by(|&a, &b| one.values[a].total_cmp(&one.values[b])).unwrap();
                    prop_assert!((argmax as f64 - mu).abs() <= 0.5);
                }
            }
        }
    }
}
