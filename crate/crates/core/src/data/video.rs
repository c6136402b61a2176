//! Raw RGB frames and their on-disk container: `<stem>.bin` holds the frames back to back
//! as `side×side×3` bytes each, `<stem>.json` records the layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Square RGB image, row-major, channels last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub side: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(side: usize, rgb: [u8; 3]) -> Self {
        let data = (0..side * side).flat_map(|_| rgb).collect();
        Self { side, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.side + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.side + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Model input scaling: bytes map linearly onto `[-1, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.side, self.side, 3], |i| T::of(self.data[i] as f64 / 127.5 - 1.0))
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.side {
            for x in 0..self.side {
                out.set_pixel(self.side - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Video {
    pub id: String,
    pub side: usize,
    pub frames: Vec<Image>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerManifest {
    side: usize,
    frames: usize,
    dtype: String,
}

const DTYPE: &str = "rgb8";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn write_frames(frames: &[Image], side: usize, stem: &Path) -> Result<()> {
    let (bin, json) = paths(stem);
    let mut bytes = Vec::with_capacity(frames.len() * side * side * 3);
    for f in frames {
        if f.side != side {
            return Err(Error::shape("frame side", &[side], &[f.side]));
        }
        bytes.extend_from_slice(&f.data);
    }
    let manifest = ContainerManifest {
        side,
        frames: frames.len(),
        dtype: DTYPE.into(),
    };
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&json, e))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn read_frames(stem: &Path) -> Result<(usize, Vec<Image>)> {
    let (bin, json) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: ContainerManifest = serde_json::from_str(&text).map_err(|e| Error::json(&json, e))?;
    if manifest.dtype != DTYPE {
        return Err(Error::config(format!("{}: unsupported dtype {}", json.display(), manifest.dtype)));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let frame_len = manifest.side * manifest.side * 3;
    if bytes.len() != frame_len * manifest.frames {
        return Err(Error::shape(
            format!("{} byte length", bin.display()),
            &[frame_len * manifest.frames],
            &[bytes.len()],
        ));
    }
    let frames = bytes
        .chunks_exact(frame_len.max(1))
        .map(|c| Image {
            side: manifest.side,
            data: c.to_vec(),
        })
        .collect();
    Ok((manifest.side, frames))
}
