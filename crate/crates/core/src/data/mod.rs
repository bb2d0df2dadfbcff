//! Annotated videos: annotation CSV parsing, dataset statistics, splits and
//! a synthetic generator of repetitive feature sequences.

mod annotations;
mod split;
mod stats;
mod synth;

pub use annotations::{parse_annotations, serialize_annotations, ANNOTATION_HEADER};
pub use split::{split_dataset, Split, SplitMode};
pub use stats::{dataset_stats, DatasetStats};
pub use synth::{
    action_signature, generate_suite, generate_synthetic, generate_synthetic_with_signature, MotionSignature, SuiteSpec, SynthSequence,
    SynthSpec, SynthVideo,
};

/// One annotated action cycle, inclusive frame bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CycleSpan {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl CycleSpan {
    pub fn new(start_frame: usize, end_frame: usize) -> Self {
        Self { start_frame, end_frame }
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A video with per-cycle annotations. Frame indices are authoritative;
/// seconds are derived from `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub action_type: String,
    pub frame_count: usize,
    pub fps: f64,
    pub cycles: Vec<CycleSpan>,
}

impl VideoRecord {
    pub fn count(&self) -> usize {
        self.cycles.len()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frame_count as f64 / self.fps
    }

    /// Checks frame bounds, span ordering and positivity of counts/rates.
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if self.frame_count == 0 {
            return Err(Error::validation(format!("{}: frame_count must be >= 1", self.video_id)));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::validation(format!("{}: fps must be positive", self.video_id)));
        }
        let mut prev_start = 0;
        for span in &self.cycles {
            if span.end_frame < span.start_frame {
                return Err(Error::validation(format!(
                    "{}: cycle end {} < start {}",
                    self.video_id, span.end_frame, span.start_frame
                )));
            }
            if span.end_frame >= self.frame_count {
                return Err(Error::validation(format!(
                    "{}: cycle end {} outside frame_count {}",
                    self.video_id, span.end_frame, self.frame_count
                )));
            }
            if span.start_frame < prev_start {
                return Err(Error::validation(format!("{}: cycles not sorted", self.video_id)));
            }
            prev_start = span.start_frame;
        }
        Ok(())
    }
}
