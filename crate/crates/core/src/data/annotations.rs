use std::fmt::Write as _;

use super::{CycleSpan, VideoRecord};
use crate::{Error, Result};

pub const ANNOTATION_HEADER: &str = "video_id,action_type,frame_count,fps,start_frame,end_frame";

const COLUMNS: [&str; 6] = ["video_id", "action_type", "frame_count", "fps", "start_frame", "end_frame"];

/// Parses the per-cycle annotation CSV. Records come out in order of first
/// appearance; each record's cycles are sorted by start frame.
pub fn parse_annotations(text: &str) -> Result<Vec<VideoRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    if headers.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Parse { line: 1, msg: format!("expected header `{ANNOTATION_HEADER}`") });
    }

    let mut records: Vec<VideoRecord> = Vec::new();
    // Videos declared with an empty cycle row; further cycle rows are rejected.
    let mut declared_empty: Vec<bool> = Vec::new();

    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| row.get(i).unwrap_or("");
        let parse_err = |msg: String| Error::Parse { line, msg };

        let video_id = field(0).to_string();
        if video_id.is_empty() {
            return Err(parse_err("empty video_id".into()));
        }
        let action_type = field(1).to_string();
        let frame_count: usize = field(2)
            .parse()
            .map_err(|_| parse_err(format!("bad frame_count `{}`", field(2))))?;
        let fps: f64 = field(3).parse().map_err(|_| parse_err(format!("bad fps `{}`", field(3))))?;

        let span = match (field(4), field(5)) {
            ("", "") => None,
            (s, e) => {
                let start: usize = s.parse().map_err(|_| parse_err(format!("bad start_frame `{s}`")))?;
                let end: usize = e.parse().map_err(|_| parse_err(format!("bad end_frame `{e}`")))?;
                if end < start {
                    return Err(Error::validation(format!("line {line}: end_frame {end} < start_frame {start}")));
                }
                if end >= frame_count {
                    return Err(Error::validation(format!(
                        "line {line}: end_frame {end} >= frame_count {frame_count}"
                    )));
                }
                Some(CycleSpan::new(start, end))
            }
        };

        let idx = match records.iter().position(|r| r.video_id == video_id) {
            Some(idx) => {
                let r = &records[idx];
                if r.action_type != action_type || r.frame_count != frame_count || r.fps != fps {
                    return Err(Error::validation(format!(
                        "line {line}: inconsistent metadata for video `{video_id}`"
                    )));
                }
                if declared_empty[idx] || span.is_none() {
                    return Err(Error::validation(format!(
                        "line {line}: video `{video_id}` mixes an empty cycle row with cycle rows"
                    )));
                }
                idx
            }
            None => {
                records.push(VideoRecord { video_id, action_type, frame_count, fps, cycles: Vec::new() });
                declared_empty.push(span.is_none());
                records.len() - 1
            }
        };
        if let Some(span) = span {
            records[idx].cycles.push(span);
        }
    }

    for r in &mut records {
        r.cycles.sort();
        r.validate()?;
    }
    Ok(records)
}

/// Writes records back to the annotation CSV format (LF line endings).
pub fn serialize_annotations(records: &[VideoRecord]) -> String {
    let mut out = String::new();
    out.push_str(ANNOTATION_HEADER);
    out.push('\n');
    for r in records {
        let prefix = format!("{},{},{},{}", r.video_id, r.action_type, r.frame_count, r.fps);
        if r.cycles.is_empty() {
            writeln!(out, "{prefix},,").unwrap();
        }
        for c in &r.cycles {
            writeln!(out, "{prefix},{},{}", c.start_frame, c.end_frame).unwrap();
        }
    }
    out
}
