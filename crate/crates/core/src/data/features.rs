//! Precomputed backbone features, for running the correspondence stages on features from an
//! external encoder. The manifest names a flat little-endian `f32` file holding the frame
//! volume followed by the query map.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    pub dtype: String,
    /// `[T, H, W, C]`
    pub frame_shape: [usize; 4],
    /// `[H, W, C]`
    pub query_shape: [usize; 3],
    /// Data file, relative to the manifest.
    pub data: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub frames: Tensor<f32>,
    pub query: Tensor<f32>,
}

impl FeatureManifest {
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let side = config.feature_side();
        let expected = [side, side, config.channels];
        let [_, h, w, c] = self.frame_shape;
        if [h, w, c] != expected {
            return Err(Error::shape("frame features", &expected, &[h, w, c]));
        }
        if self.query_shape != expected {
            return Err(Error::shape("query features", &expected, &self.query_shape));
        }
        Ok(())
    }
}

pub fn load_precomputed_features(manifest_path: &Path, config: &ModelConfig) -> Result<FeatureVolume> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: FeatureManifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
    if manifest.dtype != "f32le" {
        return Err(Error::config(format!("unsupported feature dtype {}", manifest.dtype)));
    }
    manifest.check_against(config)?;
    let data_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.data);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let n_frames: usize = manifest.frame_shape.iter().product();
    let n_query: usize = manifest.query_shape.iter().product();
    if bytes.len() != 4 * (n_frames + n_query) {
        return Err(Error::shape("feature file bytes", &[4 * (n_frames + n_query)], &[bytes.len()]));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(FeatureVolume {
        frames: Tensor::new(&manifest.frame_shape, values[..n_frames].to_vec())?,
        query: Tensor::new(&manifest.query_shape, values[n_frames..].to_vec())?,
    })
}

pub fn save_features(volume: &FeatureVolume, manifest_path: &Path) -> Result<()> {
    let fs_ = volume.frames.shape();
    let qs = volume.query.shape();
    if fs_.len() != 4 || qs.len() != 3 {
        return Err(Error::shape("feature volume rank", &[4, 3], &[fs_.len(), qs.len()]));
    }
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("features");
    let data_name = format!("{stem}.bin");
    let manifest = FeatureManifest {
        dtype: "f32le".into(),
        frame_shape: [fs_[0], fs_[1], fs_[2], fs_[3]],
        query_shape: [qs[0], qs[1], qs[2]],
        data: data_name.clone(),
    };
    let mut bytes = Vec::with_capacity(4 * (volume.frames.len() + volume.query.len()));
    for v in volume.frames.data().iter().chain(volume.query.data()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let data_path = manifest_path.parent().unwrap_or(Path::new(".")).join(data_name);
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(manifest_path, e))?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_shapes_are_accepted_and_wrong_width_rejected() {
        let cfg = ModelConfig::full();
        let ok = FeatureManifest {
            dtype: "f32le".into(),
            frame_shape: [30, 32, 32, 256],
            query_shape: [32, 32, 256],
            data: "x.bin".into(),
        };
        ok.check_against(&cfg).unwrap();
        let bad = FeatureManifest {
            frame_shape: [30, 32, 32, 128],
            ..ok.clone()
        };
        match bad.check_against(&cfg) {
            Err(Error::Shape { expected, actual, .. }) => {
                assert_eq!(expected, [32, 32, 256]);
                assert_eq!(actual, [32, 32, 128]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn features_round_trip() {
        let mut cfg = ModelConfig::toy();
        cfg.channels = 4;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.json");
        let vol = FeatureVolume {
            frames: Tensor::from_fn(&[3, 8, 8, 4], |i| i as f32 * 0.5),
            query: Tensor::from_fn(&[8, 8, 4], |i| -(i as f32)),
        };
        save_features(&vol, &path).unwrap();
        assert_eq!(load_precomputed_features(&path, &cfg).unwrap(), vol);
        cfg.channels = 8;
        assert!(load_precomputed_features(&path, &cfg).is_err());
    }
}
