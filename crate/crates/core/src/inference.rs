//! From per-frame anchor outputs to the response track of the most recent occurrence:
//! top-1 box per frame, optional absolute threshold, median smoothing, peak filtering
//! relative to the strongest peak, and extent extraction around the last kept peak.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorGrid;
use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::model::{FramePredictionRaw, Model};
use crate::parallel::par_map;
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub frame_idx: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTrack {
    pub s: usize,
    pub e: usize,
    pub boxes: Vec<BoundingBox>,
    pub score: f64,
}

impl ResponseTrack {
    pub fn len(&self) -> usize {
        self.e - self.s + 1
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn box_at(&self, frame: usize) -> Option<&BoundingBox> {
        if frame < self.s || frame > self.e {
            return None;
        }
        self.boxes.get(frame - self.s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Absolute probability threshold applied before smoothing; 0 disables it.
    pub phi: f64,
    /// Median filter length (odd).
    pub median_kernel: usize,
    /// Peaks below `peak_ratio · s` are dropped, `s` being the strongest peak.
    pub peak_ratio: f64,
    /// The track extends while the smoothed score stays at or above `extent_ratio · s_p`.
    pub extent_ratio: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            phi: 0.0,
            median_kernel: 5,
            peak_ratio: 0.8,
            extent_ratio: 0.7,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_kernel == 0 || self.median_kernel % 2 == 0 {
            return Err(Error::config(format!("median kernel {} must be odd", self.median_kernel)));
        }
        for (name, v) in [("phi", self.phi), ("peak_ratio", self.peak_ratio), ("extent_ratio", self.extent_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Highest-probability anchor of one frame (first index on ties) and its refined box.
pub fn select_top1<T: Real>(raw: &FramePredictionRaw<T>, grid: &AnchorGrid, frame_idx: usize) -> FramePrediction {
    let probs = raw.probs.data();
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    let d = &raw.deltas.data()[4 * best..4 * best + 4];
    FramePrediction {
        frame_idx,
        bbox: grid.refine(best, [d[0].as_f64(), d[1].as_f64(), d[2].as_f64(), d[3].as_f64()]),
        prob: probs[best].as_f64(),
    }
}

/// Centered median filter. Near the ends the window is clipped to the sequence, so the
/// last frame is still voted on by its predecessors; an even-sized window takes its lower
/// middle, which keeps every output one of the inputs.
pub fn smooth_scores(probs: &[f64], kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let n = probs.len();
    let mut window = Vec::with_capacity(kernel);
    (0..n)
        .map(|i| {
            window.clear();
            window.extend_from_slice(&probs[i.saturating_sub(half)..n.min(i + half + 1)]);
            window.sort_by(f64::total_cmp);
            window[(window.len() - 1) / 2]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Peaks {
    /// Every local maximum, in frame order.
    pub all: Vec<usize>,
    /// Those at or above `peak_ratio · s`.
    pub kept: Vec<usize>,
    /// Value of the strongest peak.
    pub s: f64,
}

/// Local maxima: strictly above both neighbours, a flat top counting once at its first
/// index, sequence ends counting as lower neighbours.
pub fn detect_peaks(smoothed: &[f64], peak_ratio: f64) -> Result<Peaks> {
    if smoothed.is_empty() {
        return Err(Error::Domain("peak detection on an empty sequence".into()));
    }
    let n = smoothed.len();
    let mut all = Vec::new();
    let mut i = 0;
    while i < n {
        let v = smoothed[i];
        let mut j = i;
        while j + 1 < n && smoothed[j + 1] == v {
            j += 1;
        }
        let left_lower = i == 0 || smoothed[i - 1] < v;
        let right_lower = j == n - 1 || smoothed[j + 1] < v;
        if left_lower && right_lower {
            all.push(i);
        }
        i = j + 1;
    }
    let s = all.iter().map(|&i| smoothed[i]).fold(f64::NEG_INFINITY, f64::max);
    let kept = all.iter().copied().filter(|&i| smoothed[i] >= peak_ratio * s).collect();
    Ok(Peaks { all, kept, s })
}

/// Track around the last kept peak: the contiguous frames whose smoothed score is at least
/// `extent_ratio · s_p`. `None` when nothing was kept or every score is zero.
pub fn extract_last_track(
    frame_preds: &[FramePrediction],
    smoothed: &[f64],
    kept: &[usize],
    extent_ratio: f64,
) -> Option<ResponseTrack> {
    let &tp = kept.last()?;
    let sp = smoothed[tp];
    if !(sp > 0.0) {
        return None;
    }
    let thr = extent_ratio * sp;
    let mut s = tp;
    while s > 0 && smoothed[s - 1] >= thr {
        s -= 1;
    }
    let mut e = tp;
    while e + 1 < smoothed.len() && smoothed[e + 1] >= thr {
        e += 1;
    }
    Some(ResponseTrack {
        s,
        e,
        boxes: frame_preds[s..=e].iter().map(|p| p.bbox).collect(),
        score: sp,
    })
}

/// Post-processing of a whole video's per-frame predictions.
pub fn localize(frame_preds: &[FramePrediction], config: &InferenceConfig) -> Result<Option<ResponseTrack>> {
    config.validate()?;
    if frame_preds.is_empty() {
        return Ok(None);
    }
    let probs: Vec<f64> = frame_preds
        .iter()
        .map(|p| if p.prob >= config.phi { p.prob } else { 0.0 })
        .collect();
    let smoothed = smooth_scores(&probs, config.median_kernel);
    let peaks = detect_peaks(&smoothed, config.peak_ratio)?;
    Ok(extract_last_track(frame_preds, &smoothed, &peaks.kept, config.extent_ratio))
}

/// `(start, valid)` of each `clip_len`-frame clip covering `n_frames`; the last clip is
/// padded by repeating its final frame and only `valid` frames are kept.
pub fn clip_ranges(n_frames: usize, clip_len: usize) -> Vec<(usize, usize)> {
    (0..n_frames.div_ceil(clip_len))
        .map(|k| (k * clip_len, clip_len.min(n_frames - k * clip_len)))
        .collect()
}

/// Stacks `clip_len` frames starting at `start`, replicating the last available frame.
pub fn clip_tensor<T: Real>(frames: &[Image], start: usize, clip_len: usize) -> Result<Tensor<T>> {
    if frames.is_empty() {
        return Err(Error::Domain("empty video".into()));
    }
    let parts: Vec<Tensor<T>> = (start..start + clip_len)
        .map(|t| frames[t.min(frames.len() - 1)].to_tensor())
        .collect();
    Tensor::stack(&parts)
}

/// Top-1 predictions of every frame of a video, clip by clip.
pub fn predict_frames<T: Real>(model: &Model, params: &ParamSet<T>, frames: &[Image], query: &Image) -> Result<Vec<FramePrediction>> {
    if frames.is_empty() {
        return Err(Error::Domain("empty video".into()));
    }
    let t_len = model.config.clip_len;
    let q = query.to_tensor();
    let mut out = Vec::with_capacity(frames.len());
    for (start, valid) in clip_ranges(frames.len(), t_len) {
        let clip = clip_tensor(frames, start, t_len)?;
        let (raw, _) = model.forward(params, &clip, &q)?;
        out.extend(raw.iter().take(valid).enumerate().map(|(k, r)| select_top1(r, &model.grid, start + k)));
    }
    Ok(out)
}

/// Same as [`predict_frames`] from precomputed `N×H×W×C` frame features.
pub fn predict_frames_from_features(
    model: &Model,
    params: &ParamSet<f32>,
    frames: &Tensor<f32>,
    query: &Tensor<f32>,
) -> Result<Vec<FramePrediction>> {
    let n = *frames.shape().first().unwrap_or(&0);
    if n == 0 {
        return Err(Error::Domain("empty feature volume".into()));
    }
    let t_len = model.config.clip_len;
    let mut out = Vec::with_capacity(n);
    for (start, valid) in clip_ranges(n, t_len) {
        let parts: Vec<Tensor<f32>> = (start..start + t_len).map(|t| frames.slice_outer(t.min(n - 1))).collect();
        let (raw, _) = model.forward_features(params, &Tensor::stack(&parts)?, query)?;
        out.extend(raw.iter().take(valid).enumerate().map(|(k, r)| select_top1(r, &model.grid, start + k)));
    }
    Ok(out)
}

/// Full inference for one query on one video.
pub fn run_video<T: Real>(
    model: &Model,
    params: &ParamSet<T>,
    frames: &[Image],
    query: &Image,
    config: &InferenceConfig,
) -> Result<(Vec<FramePrediction>, Option<ResponseTrack>)> {
    let preds = predict_frames(model, params, frames, query)?;
    let track = localize(&preds, config)?;
    Ok((preds, track))
}

/// Runs every query of a dataset; results follow the dataset's query order.
pub fn predict_dataset(
    model: &Model,
    params: &ParamSet<f32>,
    dataset: &Dataset,
    config: &InferenceConfig,
    workers: usize,
) -> Result<Vec<(String, Option<ResponseTrack>)>> {
    config.validate()?;
    let results = par_map(workers, &dataset.queries, |q| -> Result<_> {
        let video = &dataset.videos[dataset.video_index(q)?];
        let (_, track) = run_video(model, params, &video.frames, &q.image, config)?;
        Ok((q.record.query_id.clone(), track))
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{build_grid, AnchorConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn preds_from(probs: &[f64]) -> Vec<FramePrediction> {
        probs
            .iter()
            .enumerate()
            .map(|(i, &p)| FramePrediction {
                frame_idx: i,
                bbox: BoundingBox::new(10.0 + i as f64, 20.0, 8.0, 6.0),
                prob: p,
            })
            .collect()
    }

    #[test]
    fn top1_examples() {
        let grid = build_grid(&AnchorConfig::default(), 2, 2, 16.0).unwrap();
        let mut probs = Tensor::<f32>::zeros(&[2, 2, 12]);
        probs.data_mut()[17] = 0.9;
        let mut deltas = Tensor::<f32>::zeros(&[2, 2, 12, 4]);
        deltas.data_mut()[17 * 4] = 3.0;
        let raw = FramePredictionRaw {
            logits: probs.clone(),
            probs,
            deltas,
        };
        let p = select_top1(&raw, &grid, 4);
        assert_eq!(p.frame_idx, 4);
        assert_eq!(p.bbox, grid.anchors[17].translated(3.0, 0.0));
        assert!((p.prob - 0.9).abs() < 1e-6);

        let flat = FramePredictionRaw {
            logits: Tensor::<f32>::zeros(&[2, 2, 12]),
            probs: Tensor::from_fn(&[2, 2, 12], |_| 0.3),
            deltas: Tensor::<f32>::zeros(&[2, 2, 12, 4]),
        };
        assert_eq!(select_top1(&flat, &grid, 0).bbox, grid.anchors[0]);
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth_scores(&[0.0, 0.0, 1.0, 0.0, 0.0], 5)[2], 0.0);
        assert_eq!(smooth_scores(&[0.4; 7], 5), vec![0.4; 7]);
        assert_eq!(smooth_scores(&[0.7], 5), vec![0.7]);
        // ends use windows of 3 and 4
        assert_eq!(smooth_scores(&[0.9, 0.1, 0.5, 0.3, 0.2], 5), vec![0.5, 0.3, 0.3, 0.2, 0.3]);
        // a spike on the last frame is removed like any other
        assert_eq!(smooth_scores(&[0.0, 0.0, 0.0, 0.0, 1.0], 5)[4], 0.0);
    }

    #[test]
    fn peak_examples() {
        let p = detect_peaks(&[0.1, 0.2, 0.9, 0.2, 0.1], 0.8).unwrap();
        assert_eq!((p.all, p.kept, p.s), (vec![2], vec![2], 0.9));
        let p = detect_peaks(&[0.1, 0.9, 0.1, 0.5, 0.1], 0.8).unwrap();
        assert_eq!(p.all, [1, 3]);
        assert_eq!(p.kept, [1]);
        let p = detect_peaks(&[0.1, 0.2, 0.3, 0.4], 0.8).unwrap();
        assert_eq!(p.all, [3]);
        let p = detect_peaks(&[0.1, 0.5, 0.5, 0.5, 0.2], 0.8).unwrap();
        assert_eq!(p.all, [1]);
        assert!(detect_peaks(&[], 0.8).is_err());
    }

    #[test]
    fn track_examples() {
        let sm = [0.1, 0.8, 0.9, 0.85, 0.1];
        let preds = preds_from(&sm);
        let t = extract_last_track(&preds, &sm, &[2], 0.7).unwrap();
        assert_eq!((t.s, t.e, t.score), (1, 3, 0.9));
        assert_eq!(t.boxes, preds[1..=3].iter().map(|p| p.bbox).collect::<Vec<_>>());

        let spike = [0.1, 0.1, 0.9, 0.1, 0.1];
        let t = extract_last_track(&preds_from(&spike), &spike, &[2], 0.7).unwrap();
        assert_eq!((t.s, t.e), (2, 2));

        let two = [0.9, 0.1, 0.1, 0.85, 0.1];
        let t = extract_last_track(&preds_from(&two), &two, &[0, 3], 0.7).unwrap();
        assert_eq!((t.s, t.e), (3, 3));
        assert!(extract_last_track(&preds_from(&two), &two, &[], 0.7).is_none());
        let zeros = [0.0; 4];
        assert!(localize(&preds_from(&zeros), &InferenceConfig::default()).unwrap().is_none());
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clip_ranges(30, 30), vec![(0, 30)]);
        let r = clip_ranges(65, 30);
        assert_eq!(r, vec![(0, 30), (30, 30), (60, 5)]);
        assert_eq!(r.len() * 30 - 65, 25);
    }

    // Independent restatements of the post-processing rules.
    fn brute_median(x: &[f64], k: usize) -> Vec<f64> {
        let n = x.len() as isize;
        (0..n)
            .map(|i| {
                let r = (k / 2) as isize;
                let mut w: Vec<f64> = (i - r..=i + r).filter(|j| (0..n).contains(j)).map(|j| x[j as usize]).collect();
                w.sort_by(|a, b| a.partial_cmp(b).unwrap());
                w[(w.len() - 1) / 2]
            })
            .collect()
    }

    fn brute_peaks(x: &[f64]) -> Vec<usize> {
        let n = x.len();
        (0..n)
            .filter(|&i| {
                if i > 0 && x[i - 1] >= x[i] {
                    return false;
                }
                let mut j = i;
                while j + 1 < n && x[j + 1] == x[i] {
                    j += 1;
                }
                j + 1 == n || x[j + 1] < x[i]
            })
            .collect()
    }

    fn brute_track(preds: &[FramePrediction], cfg: &InferenceConfig) -> Option<(usize, usize, Vec<BoundingBox>)> {
        let probs: Vec<f64> = preds.iter().map(|p| if p.prob >= cfg.phi { p.prob } else { 0.0 }).collect();
        let sm = brute_median(&probs, cfg.median_kernel);
        let peaks = brute_peaks(&sm);
        let s = peaks.iter().map(|&i| sm[i]).fold(f64::MIN, f64::max);
        let tp = *peaks.iter().filter(|&&i| sm[i] >= cfg.peak_ratio * s).max()?;
        if sm[tp] <= 0.0 {
            return None;
        }
        let inside: Vec<usize> = (0..sm.len()).filter(|&i| sm[i] >= cfg.extent_ratio * sm[tp]).collect();
        // contiguous run through tp
        let mut lo = tp;
        while lo > 0 && inside.contains(&(lo - 1)) {
            lo -= 1;
        }
        let mut hi = tp;
        while inside.contains(&(hi + 1)) {
            hi += 1;
        }
        Some((lo, hi, preds[lo..=hi].iter().map(|p| p.bbox).collect()))
    }

    #[test]
    fn pipeline_matches_brute_force_on_random_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = InferenceConfig::default();
        for _ in 0..1000 {
            let n = rng.gen_range(1..60);
            // quantized scores create plateaus and ties
            let probs: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 19.0).collect();
            let preds = preds_from(&probs);
            assert_eq!(smooth_scores(&probs, 5), brute_median(&probs, 5));
            assert_eq!(detect_peaks(&probs, 0.8).unwrap().all, brute_peaks(&probs));
            let got = localize(&preds, &cfg).unwrap().map(|t| (t.s, t.e, t.boxes));
            assert_eq!(got, brute_track(&preds, &cfg));
        }
    }

    proptest! {
        #[test]
        fn scaling_probabilities_keeps_the_track(
            probs in prop::collection::vec(0.0..1.0f64, 1..80),
            c in 0.01..=1.0f64,
        ) {
            let preds = preds_from(&probs);
            let scaled: Vec<FramePrediction> = preds.iter().map(|p| FramePrediction { prob: p.prob * c, ..*p }).collect();
            let cfg = InferenceConfig::default();
            let a = localize(&preds, &cfg).unwrap().map(|t| (t.s, t.e, t.boxes));
            let b = localize(&scaled, &cfg).unwrap().map(|t| (t.s, t.e, t.boxes));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn track_contains_its_peak(probs in prop::collection::vec(0.0..1.0f64, 1..80)) {
            let preds = preds_from(&probs);
            let sm = smooth_scores(&probs, 5);
            let peaks = detect_peaks(&sm, 0.8).unwrap();
            if let Some(t) = extract_last_track(&preds, &sm, &peaks.kept, 0.7) {
                let tp = *peaks.kept.last().unwrap();
                prop_assert!(t.s <= tp && tp <= t.e);
                prop_assert_eq!(t.boxes.len(), t.len());
            }
        }
    }
}
