//! Fixed-length frame sampling and multi-scale sliding-window clips.

use crate::data::CycleSpan;
use crate::{Error, Result};

/// Source frame index for each of the `N` sampled positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledIndexMap {
    pub indices: Vec<usize>,
    pub source_frame_count: usize,
}

impl SampledIndexMap {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform floor-spaced sampling of `n` frames. Short videos keep every
/// frame and repeat the last one.
pub fn sample_frames(frame_count: usize, n: usize) -> Result<SampledIndexMap> {
    if frame_count == 0 || n == 0 {
        return Err(Error::validation("sample_frames needs frame_count >= 1 and N >= 1"));
    }
    let indices = if frame_count >= n {
        (0..n).map(|k| k * frame_count / n).collect()
    } else {
        (0..n).map(|k| k.min(frame_count - 1)).collect()
    };
    Ok(SampledIndexMap { indices, source_frame_count: frame_count })
}

/// Maps cycle boundaries from source frames to sampled positions:
/// `b -> round(b * N / frame_count)` clamped to `[0, N-1]`.
pub fn map_cycles_to_samples(cycles: &[CycleSpan], frame_count: usize, n: usize) -> Vec<CycleSpan> {
    let map = |b: usize| -> usize {
        let v = (b as f64 * n as f64 / frame_count as f64).round() as usize;
        v.min(n - 1)
    };
    cycles
        .iter()
        .map(|c| {
            let s = map(c.start_frame);
            let e = map(c.end_frame);
            if s > e {
                CycleSpan::new(s, s)
            } else {
                CycleSpan::new(s, e)
            }
        })
        .collect()
}

/// Temporal scale of a clip: number of sampled frames per window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scale {
    One,
    Four,
    Eight,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::One, Scale::Four, Scale::Eight];

    pub fn window(self) -> usize {
        match self {
            Scale::One => 1,
            Scale::Four => 4,
            Scale::Eight => 8,
        }
    }

    pub fn stride(self) -> usize {
        match self {
            Scale::One => 1,
            Scale::Four => 2,
            Scale::Eight => 4,
        }
    }

    pub fn from_window(w: usize) -> Result<Self> {
        match w {
            1 => Ok(Scale::One),
            4 => Ok(Scale::Four),
            8 => Ok(Scale::Eight),
            other => Err(Error::validation(format!("unsupported scale {other}; expected 1, 4 or 8"))),
        }
    }
}

impl serde::Serialize for Scale {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u64(self.window() as u64)
    }
}

impl<'de> serde::Deserialize<'de> for Scale {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = u64::deserialize(d)?;
        Scale::from_window(w as usize).map_err(serde::de::Error::custom)
    }
}

/// A sampled position inside a clip, or padding past the end of the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipPos {
    Frame(usize),
    Pad,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipSet {
    pub scale: Scale,
    pub clips: Vec<Vec<ClipPos>>,
}

impl ClipSet {
    pub fn stride(&self) -> usize {
        self.scale.stride()
    }

    /// Sampled positions of clip `t` with padding resolved to the last
    /// valid sampled frame.
    pub fn resolved(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        let last = self.clips.len() - 1;
        self.clips[t].iter().map(move |p| match p {
            ClipPos::Frame(i) => *i,
            ClipPos::Pad => last,
        })
    }
}

/// Builds `n` clips for one scale. Raw windows start every `stride` sampled
/// frames; since that gives only `ceil(n / stride)` windows, clip `t` takes
/// window `t / stride`, so each window is repeated `stride` times.
pub fn build_clipset(n: usize, scale: usize) -> Result<ClipSet> {
    let scale = Scale::from_window(scale)?;
    if n == 0 {
        return Err(Error::validation("build_clipset needs N >= 1"));
    }
    let stride = scale.stride();
    let clips = (0..n)
        .map(|t| {
            let start = (t / stride) * stride;
            (start..start + scale.window())
                .map(|p| if p < n { ClipPos::Frame(p) } else { ClipPos::Pad })
                .collect()
        })
        .collect();
    Ok(ClipSet { scale, clips })
}
