//! Counting metrics, end-to-end evaluation, the on-disk dataset layout and
//! density-map plots.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{parse_annotations, VideoRecord};
use crate::encoder::{load_racf, FrameFeatures};
use crate::model::{Model, PreparedVideo};
use crate::predictor::{count_from_density, DensityMap};
use crate::{Error, Result};

fn check_lengths(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::validation(format!(
            "metrics need equal nonempty lengths, got {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if gts.iter().any(|&g| !(g >= 0.0)) {
        return Err(Error::validation("ground-truth counts must be >= 0"));
    }
    Ok(())
}

/// Off-by-one accuracy: the fraction of videos whose prediction is within
/// one count of the ground truth (inclusive). Higher is better.
pub fn obo(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| (*g - *p).abs() <= 1.0).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean of `|gt − pred| / gt`. Videos with `gt = 0` are skipped (the ratio
/// is undefined); if every video has `gt = 0` this is an error.
pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let terms: Vec<f64> = preds.iter().zip(gts).filter(|(_, &g)| g > 0.0).map(|(p, g)| (g - p).abs() / g).collect();
    if terms.is_empty() {
        return Err(Error::validation("MAE undefined: every ground-truth count is 0"));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub video_id: String,
    pub gt_count: f64,
    pub pred_count: f64,
    pub abs_error: f64,
    /// `gt_count = 0`: counted for OBO, skipped for MAE.
    pub mae_excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mae: f64,
    pub obo: f64,
    /// Sorted by video id.
    pub rows: Vec<EvalRow>,
    /// Videos that could not be evaluated, with the reason.
    pub failures: Vec<(String, String)>,
}

impl EvalResult {
    /// Builds the aggregate from rows, so the two can never disagree.
    pub fn from_rows(mut rows: Vec<EvalRow>, mut failures: Vec<(String, String)>) -> Result<Self> {
        rows.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        failures.sort();
        let preds: Vec<f64> = rows.iter().map(|r| r.pred_count).collect();
        let gts: Vec<f64> = rows.iter().map(|r| r.gt_count).collect();
        Ok(Self { mae: mae(&preds, &gts)?, obo: obo(&preds, &gts)?, rows, failures })
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "video_id,gt_count,pred_count,abs_error,status")?;
        for r in &self.rows {
            let status = if r.mae_excluded { "zero_count_excluded_from_mae" } else { "ok" };
            writeln!(w, "{},{},{},{},{}", r.video_id, r.gt_count, r.pred_count, r.abs_error, status)?;
        }
        for (id, reason) in &self.failures {
            writeln!(w, "{id},,,,\"error: {}\"", reason.replace('"', "'"))?;
        }
        Ok(())
    }
}

/// Anything that maps a video to a density map.
pub trait DensityPredictor {
    fn predict_video(&self, record: &VideoRecord, features: &FrameFeatures) -> Result<DensityMap>;
}

impl DensityPredictor for Model {
    fn predict_video(&self, record: &VideoRecord, features: &FrameFeatures) -> Result<DensityMap> {
        let video = PreparedVideo::new(&record.video_id, record.frame_count, features, &self.config)?;
        self.predict(&video)
    }
}

/// Predicts every video, sums its density map into a count, and scores the
/// counts. A video whose features cannot be loaded or run becomes a failure
/// entry instead of aborting the evaluation.
pub fn evaluate(
    predictor: &dyn DensityPredictor,
    records: &[VideoRecord],
    features: &dyn Fn(&VideoRecord) -> Result<FrameFeatures>,
    round: bool,
) -> Result<EvalResult> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for record in records {
        let density = features(record).and_then(|f| predictor.predict_video(record, &f));
        match density {
            Ok(d) => {
                let raw = count_from_density(&d);
                let pred_count = if round { raw.round() } else { raw };
                let gt_count = record.count() as f64;
                rows.push(EvalRow {
                    video_id: record.video_id.clone(),
                    gt_count,
                    pred_count,
                    abs_error: (gt_count - pred_count).abs(),
                    mae_excluded: gt_count == 0.0,
                });
            }
            Err(e) => failures.push((record.video_id.clone(), e.to_string())),
        }
    }
    if rows.is_empty() {
        return Err(Error::validation(format!("no video could be evaluated ({} failures)", failures.len())));
    }
    EvalResult::from_rows(rows, failures)
}

/// Dataset directory layout shared by `synth`, `train`, `eval` and `plot`:
/// `annotations.csv` plus `features/<video_id>.racf`.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.root.join("annotations.csv")
    }

    pub fn features_path(&self, video_id: &str) -> PathBuf {
        self.root.join("features").join(format!("{video_id}.racf"))
    }

    pub fn records(&self) -> Result<Vec<VideoRecord>> {
        parse_annotations(&std::fs::read_to_string(self.annotations_path())?)
    }

    pub fn features(&self, record: &VideoRecord) -> Result<FrameFeatures> {
        let path = self.features_path(&record.video_id);
        let features = load_racf(&path).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            other => other,
        })?;
        if features.dim().0 != record.frame_count {
            return Err(Error::shape(format!(
                "{} holds {} frames, annotations say {}",
                path.display(),
                features.dim().0,
                record.frame_count
            )));
        }
        Ok(FrameFeatures::new(features))
    }
}

fn scale_row(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Writes `<prefix>.csv` (`frame,pred[,target]`) and `<prefix>.pgm`, a
/// binary greyscale strip with one row per map, each min-max scaled to
/// 0–255. Constant rows are black.
pub fn emit_plot(pred: &DensityMap, target: Option<&DensityMap>, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    if let Some(t) = target {
        if t.len() != pred.len() {
            return Err(Error::shape(format!("target length {} vs prediction {}", t.len(), pred.len())));
        }
    }
    let csv_path = prefix.with_extension("csv");
    let pgm_path = prefix.with_extension("pgm");

    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    match target {
        Some(t) => {
            writeln!(csv, "frame,pred,target")?;
            for (i, (p, t)) in pred.values.iter().zip(&t.values).enumerate() {
                writeln!(csv, "{i},{p},{t}")?;
            }
        }
        None => {
            writeln!(csv, "frame,pred")?;
            for (i, p) in pred.values.iter().enumerate() {
                writeln!(csv, "{i},{p}")?;
            }
        }
    }
    csv.flush()?;

    let mut rows = vec![scale_row(&pred.values)];
    if let Some(t) = target {
        rows.push(scale_row(&t.values));
    }
    let mut pgm = std::io::BufWriter::new(std::fs::File::create(&pgm_path)?);
    write!(pgm, "P5\n{} {}\n255\n", pred.len(), rows.len())?;
    for row in rows {
        pgm.write_all(&row)?;
    }
    pgm.flush()?;
    Ok((csv_path, pgm_path))
}
