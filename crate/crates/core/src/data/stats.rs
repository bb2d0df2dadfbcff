use std::fmt;

use super::VideoRecord;
use crate::{Error, Result};

/// Duration (seconds) and count summary over a set of videos. Standard
/// deviations are population deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub num_videos: usize,
    pub duration_mean: f64,
    pub duration_std: f64,
    pub duration_min: f64,
    pub duration_max: f64,
    pub count_mean: f64,
    pub count_std: f64,
    pub count_min: usize,
    pub count_max: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn dataset_stats(records: &[VideoRecord]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::validation("dataset_stats needs at least one video"));
    }
    let durations: Vec<f64> = records.iter().map(VideoRecord::duration_seconds).collect();
    let counts: Vec<f64> = records.iter().map(|r| r.count() as f64).collect();
    let (duration_mean, duration_std) = mean_std(&durations);
    let (count_mean, count_std) = mean_std(&counts);
    Ok(DatasetStats {
        num_videos: records.len(),
        duration_mean,
        duration_std,
        duration_min: durations.iter().copied().fold(f64::INFINITY, f64::min),
        duration_max: durations.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count_mean,
        count_std,
        count_min: records.iter().map(VideoRecord::count).min().unwrap(),
        count_max: records.iter().map(VideoRecord::count).max().unwrap(),
    })
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<26}{}", "Num. of videos", self.num_videos)?;
        writeln!(f, "{:<26}{:.3} ± {:.3}", "Duration Avg. ± Std. (s)", self.duration_mean, self.duration_std)?;
        // Debug formatting keeps a trailing `.0` on whole seconds.
        writeln!(f, "{:<26}{:?}/{:?}", "Duration Min./Max (s)", self.duration_min, self.duration_max)?;
        writeln!(f, "{:<26}{:.3} ± {:.3}", "Count Avg. ± Std.", self.count_mean, self.count_std)?;
        write!(f, "{:<26}{}/{}", "Count Min./Max", self.count_min, self.count_max)
    }
}
