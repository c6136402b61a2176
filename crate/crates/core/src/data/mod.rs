//! Datasets: synthetic generation, the raw-frame container, annotation and prediction
//! files, and precomputed features.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! dataset.json          {"side": 64, "videos": ["v000", ...]}
//! annotations.json      one AnnotationRecord per query
//! videos/<id>.{bin,json}
//! queries/<id>.{bin,json}
//! ```

mod features;
mod records;
mod synthetic;
mod video;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use features::{load_precomputed_features, save_features, FeatureManifest, FeatureVolume};
pub use records::{
    parse_annotations, read_annotations, read_predictions, write_annotations, write_predictions, AnnotationRecord,
    PredictionRecord, QueryRef, TrackBox,
};
pub use synthetic::{
    generate_dataset, generate_scene, last_visible_run, render_query, shape_mask, Background, SceneObject, ShapeKind,
    SyntheticConfig, SyntheticScene,
};
pub use video::{read_frames, write_frames, Image, Video};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub record: AnnotationRecord,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub videos: Vec<Video>,
    pub queries: Vec<QuerySample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    side: usize,
    videos: Vec<String>,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Option<&Video> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Index of the video a query refers to.
    pub fn video_index(&self, query: &QuerySample) -> Result<usize> {
        self.videos
            .iter()
            .position(|v| v.id == query.record.video_id)
            .ok_or_else(|| Error::config(format!("query {} refers to unknown video {}", query.record.query_id, query.record.video_id)))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for v in &self.videos {
            write_frames(&v.frames, self.side, &root.join("videos").join(&v.id))?;
        }
        for q in &self.queries {
            write_frames(std::slice::from_ref(&q.image), self.side, &root.join(&q.record.query.image))?;
        }
        let records: Vec<AnnotationRecord> = self.queries.iter().map(|q| q.record.clone()).collect();
        write_annotations(&records, &root.join("annotations.json"))?;
        let manifest = DatasetManifest {
            side: self.side,
            videos: self.videos.iter().map(|v| v.id.clone()).collect(),
        };
        let path = root.join("dataset.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for id in &manifest.videos {
            let (side, frames) = read_frames(&root.join("videos").join(id))?;
            if side != manifest.side {
                return Err(Error::shape(format!("video {id} side"), &[manifest.side], &[side]));
            }
            videos.push(Video {
                id: id.clone(),
                side,
                frames,
            });
        }
        let records = read_annotations(&root.join("annotations.json"))?;
        let mut queries = Vec::with_capacity(records.len());
        for (index, record) in records.into_iter().enumerate() {
            let video = videos.iter().find(|v| v.id == record.video_id).ok_or_else(|| Error::Schema {
                index,
                path: "video_id".into(),
                message: format!("unknown video {}", record.video_id),
            })?;
            if video.len() != record.frame_count {
                return Err(Error::Schema {
                    index,
                    path: "frame_count".into(),
                    message: format!("video {} has {} frames", video.id, video.len()),
                });
            }
            let side = manifest.side as f64;
            if let Some(k) = record.response_track.iter().position(|b| {
                let [x1, y1, x2, y2] = b.bbox.to_corners();
                x1 < 0.0 || y1 < 0.0 || x2 > side || y2 > side
            }) {
                return Err(Error::Schema {
                    index,
                    path: format!("response_track[{k}].box"),
                    message: "box outside the canvas".into(),
                });
            }
            let (qside, mut frames) = read_frames(&root.join(&record.query.image))?;
            if qside != manifest.side || frames.len() != 1 {
                return Err(Error::shape("query image", &[manifest.side, 1], &[qside, frames.len()]));
            }
            queries.push(QuerySample {
                record,
                image: frames.remove(0),
            });
        }
        Ok(Self {
            side: manifest.side,
            videos,
            queries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = generate_dataset(1, 2, &SyntheticConfig::default()).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        assert_eq!(ds.video_index(&ds.queries[1]).unwrap(), 1);
    }
}
