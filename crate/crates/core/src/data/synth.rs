use std::f64::consts::TAU;

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CycleSpan, VideoRecord};
use crate::{Error, Result};

/// Parameters of one synthetic repetitive sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_frames: usize,
    pub cycle_length_range: (usize, usize),
    pub num_cycles: usize,
    /// `(start, length)` pairs of frames where the subject is present but idle.
    #[serde(default)]
    pub interruption_segments: Vec<(usize, usize)>,
    /// Cycle-length variability as a fraction of the nominal period.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    pub feature_dim: usize,
    pub spatial_grid: (usize, usize),
}

/// Per-frame grid features `[T, S1, S2, d_f]` and the exact generated cycles.
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub features: Array4<f64>,
    pub cycles: Vec<CycleSpan>,
}

impl SynthSpec {
    fn validate(&self) -> Result<Vec<(usize, usize)>> {
        let (lo, hi) = self.cycle_length_range;
        if lo < 2 || hi < lo {
            return Err(Error::validation(format!("cycle_length_range {:?} needs 2 <= min <= max", self.cycle_length_range)));
        }
        if self.num_frames == 0 || self.feature_dim == 0 || self.spatial_grid.0 == 0 || self.spatial_grid.1 == 0 {
            return Err(Error::validation("num_frames, feature_dim and spatial_grid must be positive"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) || !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation("jitter and noise_sigma must be finite and >= 0"));
        }
        let mut segs = self.interruption_segments.clone();
        segs.retain(|&(_, len)| len > 0);
        segs.sort();
        let mut end = 0;
        for &(s, len) in &segs {
            if s < end {
                return Err(Error::validation("interruption segments overlap"));
            }
            end = s + len;
            if end > self.num_frames {
                return Err(Error::validation(format!("interruption ({s}, {len}) exceeds num_frames {}", self.num_frames)));
            }
        }
        let idle: usize = segs.iter().map(|s| s.1).sum();
        if self.num_cycles * lo + idle > self.num_frames {
            return Err(Error::validation(format!(
                "infeasible packing: {} cycles of >= {lo} frames plus {idle} interrupted frames exceed {}",
                self.num_cycles, self.num_frames
            )));
        }
        Ok(segs)
    }
}

/// Places cycles of the given lengths left to right from `lead`, skipping
/// over interruptions. Returns `None` if they do not fit.
fn pack(lengths: &[usize], segs: &[(usize, usize)], lead: usize, total: usize) -> Option<Vec<CycleSpan>> {
    let mut cursor = lead;
    let mut spans = Vec::with_capacity(lengths.len());
    for &len in lengths {
        loop {
            match segs.iter().find(|&&(s, l)| cursor < s + l && cursor + len > s) {
                Some(&(s, l)) => cursor = s + l,
                None => break,
            }
        }
        if cursor + len > total {
            return None;
        }
        spans.push(CycleSpan::new(cursor, cursor + len - 1));
        cursor += len;
    }
    Some(spans)
}

/// Per-cell amplitude and phase offset of the periodic component: what a
/// particular action "looks like" in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSignature {
    pub amp: Array3<f64>,
    pub offset: Array3<f64>,
}

impl MotionSignature {
    /// Amplitudes uniform in [0.5, 1.5), offsets uniform in [0, 2π).
    pub fn random<R: Rng>(rng: &mut R, spatial_grid: (usize, usize), feature_dim: usize) -> Self {
        let shape = (spatial_grid.0, spatial_grid.1, feature_dim);
        let amp = Array3::from_shape_fn(shape, |_| rng.random_range(0.5..1.5));
        let offset = Array3::from_shape_fn(shape, |_| rng.random_range(0.0..TAU));
        Self { amp, offset }
    }
}

/// Generates a feature sequence whose grid cells oscillate with a
/// phase-locked sinusoid inside every cycle and sit at a flat base level
/// (plus noise) elsewhere, including interruptions. The motion signature is
/// drawn from `seed` as well.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthSequence> {
    generate(spec, None, seed)
}

/// As [`generate_synthetic`], with a caller-supplied motion signature so
/// that several videos can show the same action.
pub fn generate_synthetic_with_signature(spec: &SynthSpec, signature: &MotionSignature, seed: u64) -> Result<SynthSequence> {
    let (s1, s2, d) = signature.amp.dim();
    if (s1, s2) != spec.spatial_grid || d != spec.feature_dim || signature.offset.dim() != signature.amp.dim() {
        return Err(Error::validation("motion signature shape does not match the spec grid"));
    }
    generate(spec, Some(signature), seed)
}

fn generate(spec: &SynthSpec, signature: Option<&MotionSignature>, seed: u64) -> Result<SynthSequence> {
    let segs = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.cycle_length_range;

    let cycles = if spec.num_cycles == 0 {
        Vec::new()
    } else {
        let nominal = rng.random_range(lo..=hi) as f64;
        let mut lengths: Vec<usize> = (0..spec.num_cycles)
            .map(|_| {
                let u: f64 = rng.random_range(-1.0..=1.0);
                ((nominal * (1.0 + spec.jitter * u)).round() as usize).clamp(lo, hi)
            })
            .collect();
        // shrink the longest cycles until everything fits
        let packed = loop {
            if let Some(spans) = pack(&lengths, &segs, 0, spec.num_frames) {
                break spans;
            }
            let (i, &longest) = lengths.iter().enumerate().max_by_key(|&(i, l)| (*l, std::cmp::Reverse(i))).unwrap();
            if longest <= lo {
                return Err(Error::validation("infeasible packing: cycles do not fit around interruptions"));
            }
            lengths[i] -= 1;
        };
        // random idle lead-in using part of the leftover room
        let slack = spec.num_frames - 1 - packed.last().unwrap().end_frame;
        let lead = if slack > 0 { rng.random_range(0..=slack / 2) } else { 0 };
        pack(&lengths, &segs, lead, spec.num_frames).unwrap_or(packed)
    };

    let (s1, s2) = spec.spatial_grid;
    let d = spec.feature_dim;
    let base = Array3::from_shape_fn((s1, s2, d), |_| { let z: f64 = StandardNormal.sample(&mut rng); 0.5 * z });
    let own;
    let MotionSignature { amp, offset } = match signature {
        Some(sig) => sig,
        None => {
            own = MotionSignature::random(&mut rng, spec.spatial_grid, d);
            &own
        }
    };

    let mut phase = vec![None; spec.num_frames];
    for c in &cycles {
        let len = c.len() as f64;
        for t in c.start_frame..=c.end_frame {
            phase[t] = Some((t - c.start_frame) as f64 / len);
        }
    }

    let mut features = Array4::zeros((spec.num_frames, s1, s2, d));
    for (t, p) in phase.iter().enumerate() {
        for a in 0..s1 {
            for b in 0..s2 {
                for c in 0..d {
                    let mut v = base[[a, b, c]];
                    if let Some(p) = p {
                        v += amp[[a, b, c]] * (TAU * p + offset[[a, b, c]]).sin();
                    }
                    if spec.noise_sigma > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v += spec.noise_sigma * z;
                    }
                    features[[t, a, b, c]] = v;
                }
            }
        }
    }
    Ok(SynthSequence { features, cycles })
}

/// Recipe for a whole synthetic dataset. Per video, the cycle count and the
/// interruptions are drawn first; the cycle-length range is then capped so
/// the video stays feasible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub num_videos: usize,
    pub num_frames: usize,
    pub num_cycles: (usize, usize),
    pub cycle_length_range: (usize, usize),
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Inclusive range of interruption counts per video.
    #[serde(default)]
    pub interruptions: (usize, usize),
    #[serde(default = "default_interruption_length")]
    pub interruption_length: (usize, usize),
    pub feature_dim: usize,
    pub spatial_grid: (usize, usize),
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default = "default_action_types")]
    pub action_types: Vec<String>,
    #[serde(default = "default_id_prefix")]
    pub id_prefix: String,
    /// Motion signatures are a function of this seed and the action type
    /// name only, so suites generated with different seeds but the same
    /// `signature_seed` show the same actions performed in new videos.
    #[serde(default)]
    pub signature_seed: u64,
}

fn default_interruption_length() -> (usize, usize) {
    (4, 8)
}
fn default_fps() -> f64 {
    30.0
}
fn default_action_types() -> Vec<String> {
    vec!["synthetic".into()]
}
fn default_id_prefix() -> String {
    "synth".into()
}

impl SuiteSpec {
    /// Desk-preset defaults: 2×2 grid, 16 feature channels.
    pub fn desk(num_videos: usize, num_frames: usize, num_cycles: (usize, usize), cycle_length_range: (usize, usize)) -> Self {
        Self {
            num_videos,
            num_frames,
            num_cycles,
            cycle_length_range,
            jitter: 0.0,
            noise_sigma: 0.0,
            interruptions: (0, 0),
            interruption_length: default_interruption_length(),
            feature_dim: 16,
            spatial_grid: (2, 2),
            fps: default_fps(),
            action_types: default_action_types(),
            id_prefix: default_id_prefix(),
            signature_seed: 0,
        }
    }
}

/// FNV-1a over the action name, mixed with the signature seed.
fn action_seed(signature_seed: u64, action: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ signature_seed;
    for b in action.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// The signature every video of `action` shares under `signature_seed`.
pub fn action_signature(signature_seed: u64, action: &str, spatial_grid: (usize, usize), feature_dim: usize) -> MotionSignature {
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed(signature_seed, action));
    MotionSignature::random(&mut rng, spatial_grid, feature_dim)
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub record: VideoRecord,
    pub features: Array4<f64>,
}

pub fn generate_suite(suite: &SuiteSpec, seed: u64) -> Result<Vec<SynthVideo>> {
    if suite.num_cycles.0 > suite.num_cycles.1 || suite.interruptions.0 > suite.interruptions.1 {
        return Err(Error::validation("suite ranges must satisfy min <= max"));
    }
    if suite.interruption_length.0 == 0 || suite.interruption_length.0 > suite.interruption_length.1 {
        return Err(Error::validation("interruption_length must satisfy 1 <= min <= max"));
    }
    if suite.action_types.is_empty() {
        return Err(Error::validation("action_types must be nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(suite.num_videos);
    for i in 0..suite.num_videos {
        let num_cycles = rng.random_range(suite.num_cycles.0..=suite.num_cycles.1);
        let n_int = rng.random_range(suite.interruptions.0..=suite.interruptions.1);
        let (lo, hi) = suite.cycle_length_range;

        // interruptions: disjoint, placed in equal-width strata of the timeline
        let mut segments = Vec::with_capacity(n_int);
        if n_int > 0 {
            let stratum = suite.num_frames / n_int;
            for k in 0..n_int {
                let len = rng.random_range(suite.interruption_length.0..=suite.interruption_length.1).min(stratum.saturating_sub(1));
                if len == 0 {
                    continue;
                }
                let start = k * stratum + rng.random_range(0..=(stratum - len));
                segments.push((start, len));
            }
        }
        let idle: usize = segments.iter().map(|s| s.1).sum();
        // each interruption can displace at most one cycle length of frames
        let fit = (suite.num_frames - idle) / (num_cycles + segments.len()).max(1);
        let spec = SynthSpec {
            num_frames: suite.num_frames,
            cycle_length_range: (lo, hi.min(fit).max(lo)),
            num_cycles,
            interruption_segments: segments,
            jitter: suite.jitter,
            noise_sigma: suite.noise_sigma,
            feature_dim: suite.feature_dim,
            spatial_grid: suite.spatial_grid,
        };
        let action_type = suite.action_types[i % suite.action_types.len()].clone();
        // same action, individual performance: the overall amplitude varies ±20%
        let mut signature = action_signature(suite.signature_seed, &action_type, suite.spatial_grid, suite.feature_dim);
        let strength: f64 = rng.random_range(0.8..1.2);
        signature.amp *= strength;
        let seq = generate_synthetic_with_signature(&spec, &signature, rng.random())?;
        let record = VideoRecord {
            video_id: format!("{}_{i:04}", suite.id_prefix),
            action_type,
            frame_count: suite.num_frames,
            fps: suite.fps,
            cycles: seq.cycles,
        };
        record.validate()?;
        out.push(SynthVideo { record, features: seq.features });
    }
    Ok(out)
}
