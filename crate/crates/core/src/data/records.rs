//! `annotations.json` and `predictions.json`: JSON arrays of records, validated one record
//! at a time so errors name the offending record and field.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::inference::ResponseTrack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRef {
    /// Path of the query image container stem, relative to the dataset root.
    pub image: String,
    /// Box of the object inside the query image.
    pub source_box: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackBox {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub query_id: String,
    pub video_id: String,
    pub frame_count: usize,
    pub fps: f64,
    pub query: QueryRef,
    pub response_track: Vec<TrackBox>,
}

impl AnnotationRecord {
    pub fn track(&self) -> ResponseTrack {
        ResponseTrack {
            s: self.response_track[0].frame,
            e: self.response_track[self.response_track.len() - 1].frame,
            boxes: self.response_track.iter().map(|b| b.bbox).collect(),
            score: 1.0,
        }
    }

    /// Ground-truth box at `frame`, if the frame belongs to the response track.
    pub fn gt_at(&self, frame: usize) -> Option<BoundingBox> {
        let s = self.response_track.first()?.frame;
        self.response_track.get(frame.checked_sub(s)?).map(|b| b.bbox)
    }

    fn check(&self, index: usize) -> Result<()> {
        let err = |path: String, message: String| Error::Schema { index, path, message };
        if self.response_track.is_empty() {
            return Err(err("response_track".into(), "must not be empty".into()));
        }
        let s = self.response_track[0].frame;
        for (k, b) in self.response_track.iter().enumerate() {
            if b.frame != s + k {
                return Err(err(
                    format!("response_track[{k}].frame"),
                    format!("expected contiguous frame {}, got {}", s + k, b.frame),
                ));
            }
            if b.frame >= self.frame_count {
                return Err(err(
                    format!("response_track[{k}].frame"),
                    format!("frame {} outside [0, {})", b.frame, self.frame_count),
                ));
            }
            if b.bbox.is_degenerate() {
                return Err(err(format!("response_track[{k}].box"), "degenerate box".into()));
            }
        }
        if !(self.fps > 0.0) {
            return Err(err("fps".into(), "must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub query_id: String,
    pub s: usize,
    pub e: usize,
    pub boxes: Vec<BoundingBox>,
    pub score: f64,
}

impl PredictionRecord {
    pub fn new(query_id: impl Into<String>, track: &ResponseTrack) -> Self {
        Self {
            query_id: query_id.into(),
            s: track.s,
            e: track.e,
            boxes: track.boxes.clone(),
            score: track.score,
        }
    }

    pub fn track(&self) -> ResponseTrack {
        ResponseTrack {
            s: self.s,
            e: self.e,
            boxes: self.boxes.clone(),
            score: self.score,
        }
    }

    fn check(&self, index: usize) -> Result<()> {
        let err = |path: &str, message: String| Error::Schema {
            index,
            path: path.into(),
            message,
        };
        if self.s > self.e {
            return Err(err("e", format!("end {} precedes start {}", self.e, self.s)));
        }
        if self.boxes.len() != self.e - self.s + 1 {
            return Err(err(
                "boxes",
                format!("expected {} boxes for frames {}..={}, got {}", self.e - self.s + 1, self.s, self.e, self.boxes.len()),
            ));
        }
        if !self.score.is_finite() {
            return Err(err("score", "must be finite".into()));
        }
        Ok(())
    }
}

fn parse_records<R: DeserializeOwned>(text: &str, file: &Path) -> Result<Vec<R>> {
    let root: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::json(file, e))?;
    let serde_json::Value::Array(items) = root else {
        return Err(Error::Schema {
            index: 0,
            path: "$".into(),
            message: "top level must be an array of records".into(),
        });
    };
    items
        .into_iter()
        .enumerate()
        .map(|(index, value)| {
            serde_path_to_error::deserialize(value).map_err(|e| {
                let mut path = e.path().to_string();
                if path == "." {
                    path.clear();
                }
                let message = e.inner().to_string();
                if let Some(field) = message
                    .strip_prefix("missing field `")
                    .and_then(|m| m.split('`').next())
                {
                    path = if path.is_empty() { field.to_string() } else { format!("{path}.{field}") };
                }
                Error::Schema { index, path, message }
            })
        })
        .collect()
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn parse_annotations(text: &str, file: &Path) -> Result<Vec<AnnotationRecord>> {
    let records: Vec<AnnotationRecord> = parse_records(text, file)?;
    for (i, r) in records.iter().enumerate() {
        r.check(i)?;
    }
    Ok(records)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn write_annotations(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    write_json(&records, path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<PredictionRecord> = parse_records(&text, path)?;
    for (i, r) in records.iter().enumerate() {
        r.check(i)?;
    }
    Ok(records)
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    write_json(&records, path)
}
