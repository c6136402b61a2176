//! Training clips are drawn so that at least one sampled frame lies on the response track.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Frame indices of a sampled clip and the ground truth of each.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub frames: Vec<usize>,
    pub gt: Vec<Option<BoundingBox>>,
}

/// Starts whose clip (`clip_len` frames, `stride` apart) hits `[s, e]`. Empty when the
/// video is shorter than one clip.
pub fn valid_starts(n_frames: usize, s: usize, e: usize, clip_len: usize, stride: usize) -> Vec<usize> {
    let span = (clip_len - 1) * stride + 1;
    if n_frames < span {
        return Vec::new();
    }
    (0..=n_frames - span)
        .filter(|&start| {
            // first sampled frame at or after s
            let k = s.saturating_sub(start).div_ceil(stride);
            k < clip_len && start + k * stride <= e
        })
        .collect()
}

/// `track` holds the contiguous ground truth starting at frame `s`. Videos shorter than one
/// clip are left-padded by repeating their first frame.
pub fn sample_training_clip(
    n_frames: usize,
    s: usize,
    track: &[BoundingBox],
    clip_len: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<ClipSample> {
    if track.is_empty() {
        return Err(Error::Domain("empty response track".into()));
    }
    if clip_len == 0 || stride == 0 || n_frames == 0 {
        return Err(Error::config("clip length, stride and video length must be positive"));
    }
    let e = s + track.len() - 1;
    if e >= n_frames {
        return Err(Error::Domain(format!("track end {e} beyond {n_frames} frames")));
    }
    let starts = valid_starts(n_frames, s, e, clip_len, stride);
    let frames: Vec<usize> = if starts.is_empty() {
        let present: Vec<usize> = (0..n_frames).step_by(stride).collect();
        let mut f = vec![0; clip_len.saturating_sub(present.len())];
        f.extend(present.iter().rev().take(clip_len).rev());
        f
    } else {
        let start = starts[rng.gen_range(0..starts.len())];
        (0..clip_len).map(|k| start + k * stride).collect()
    };
    let gt = frames
        .iter()
        .map(|&f| (s..=e).contains(&f).then(|| track[f - s]))
        .collect();
    Ok(ClipSample { frames, gt })
}
