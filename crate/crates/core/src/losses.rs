//! Training objective: box regression on positive anchors plus an occurrence loss that is
//! either BCE over hard-mined negatives, plain BCE, or focal loss.
//!
//! All losses are evaluated in `f64` and return gradients with respect to the head logits
//! and the per-anchor pixel refinements, which is what [`Model::backward`] consumes.
//!
//! [`Model::backward`]: crate::model::Model::backward

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorGrid, AnchorLabels};
use crate::error::{Error, Result};
use crate::geometry::{giou_with_grad, BoundingBox, MIN_SIDE};
use crate::model::{ClipGrads, FramePredictionRaw};
use crate::tensor::Real;

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbLoss {
    /// BCE on all positives plus the hardest negatives pooled over the batch.
    BceHnm,
    /// BCE on every anchor of the batch's own (query, clip) pairs.
    Bce,
    /// Focal loss on every anchor of the own pairs.
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BboxReduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_p: f64,
    pub lambda_giou: f64,
    pub prob_loss: ProbLoss,
    /// Negatives mined per positive.
    pub neg_per_pos: usize,
    /// Negatives mined when the batch has no positive anchor.
    pub neg_floor: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub bbox_reduction: BboxReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_giou: 0.3,
            prob_loss: ProbLoss::BceHnm,
            neg_per_pos: 3,
            neg_floor: 16,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            bbox_reduction: BboxReduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_p, self.lambda_giou, self.focal_gamma, self.focal_alpha];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.neg_per_pos == 0 {
            return Err(Error::config("neg_per_pos must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_bbox: f64,
    pub l_prob: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_neg_sampled: usize,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `L1(center, w, h) / side + λ_giou·(1 − GIoU)` and its gradient with respect to
/// `b_hat = (cx, cy, w, h)` in pixels.
pub fn l_reg_with_grad(b_hat: &BoundingBox, b: &BoundingBox, lambda_giou: f64, side: f64) -> Result<(f64, [f64; 4])> {
    if b.is_degenerate() {
        return Err(Error::Domain(format!("degenerate ground truth: {b:?}")));
    }
    let (g, dg) = giou_with_grad(b_hat, b)?;
    let diffs = [b_hat.cx - b.cx, b_hat.cy - b.cy, b_hat.w - b.w, b_hat.h - b.h];
    let l1: f64 = diffs.iter().map(|d| d.abs()).sum::<f64>() / side;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = sign(diffs[k]) / side - lambda_giou * dg[k];
    }
    Ok((l1 + lambda_giou * (1.0 - g), grad))
}

pub fn l_reg(b_hat: &BoundingBox, b: &BoundingBox, lambda_giou: f64, side: f64) -> Result<f64> {
    Ok(l_reg_with_grad(b_hat, b, lambda_giou, side)?.0)
}

/// Per-anchor BCE term on a clamped probability.
pub fn bce_term(p: f64, positive: bool) -> f64 {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -pc.ln()
    } else {
        -(1.0 - pc).ln()
    }
}

/// Derivative of [`bce_term`] with respect to the logit behind `p`.
fn bce_logit_grad(p: f64, positive: bool) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    if positive {
        p - 1.0
    } else {
        p
    }
}

/// Focal term `−α·(1 − p_t)^γ·ln p_t` with a class-independent `α`.
pub fn focal_term(p: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    let pt = if positive { p } else { 1.0 - p };
    let bce = bce_term(p, positive);
    if gamma == 0.0 {
        alpha * bce
    } else {
        alpha * (1.0 - pt).powf(gamma) * bce
    }
}

fn focal_logit_grad(p: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    let (pt, s) = if positive { (p, 1.0) } else { (1.0 - p, -1.0) };
    let unclamped = if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) { 1.0 } else { 0.0 };
    let log_pt = pt.clamp(PROB_EPS, 1.0 - PROB_EPS).ln();
    let modulation = if gamma == 0.0 { 1.0 } else { (1.0 - pt).powf(gamma) };
    s * alpha * modulation * (gamma * pt * log_pt - (1.0 - pt) * unclamped)
}

/// Mean BCE over the selected `(probability, label)` pairs.
pub fn l_prob_bce(selection: &[(f64, bool)]) -> Result<f64> {
    if selection.is_empty() {
        return Err(Error::Domain("BCE over an empty anchor selection".into()));
    }
    Ok(selection.iter().map(|&(p, y)| bce_term(p, y)).sum::<f64>() / selection.len() as f64)
}

pub fn l_prob_focal(selection: &[(f64, bool)], gamma: f64, alpha: f64) -> Result<f64> {
    if selection.is_empty() {
        return Err(Error::Domain("focal loss over an empty anchor selection".into()));
    }
    Ok(selection
        .iter()
        .map(|&(p, y)| focal_term(p, y, gamma, alpha))
        .sum::<f64>()
        / selection.len() as f64)
}

/// A negative candidate in the mining pool. Keys order ties lexicographically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeCandidate {
    pub loss: f64,
    /// `(query video, clip video, frame, anchor)`.
    pub key: (usize, usize, usize, usize),
}

fn hardest_first(a: &NegativeCandidate, b: &NegativeCandidate) -> Ordering {
    b.loss.total_cmp(&a.loss).then(a.key.cmp(&b.key))
}

/// Selects the `k` candidates with the largest loss, ties broken by key; returns them in
/// that order.
pub fn mine_hard_negatives(mut pool: Vec<NegativeCandidate>, k: usize) -> Vec<NegativeCandidate> {
    let k = k.min(pool.len());
    if k == 0 {
        return Vec::new();
    }
    if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, hardest_first);
        pool.truncate(k);
    }
    pool.sort_by(hardest_first);
    pool
}

/// Number of negatives to mine for `n_pos` positives.
pub fn negative_budget(n_pos: usize, config: &LossConfig) -> usize {
    if n_pos == 0 {
        config.neg_floor
    } else {
        config.neg_per_pos * n_pos
    }
}

/// Head outputs of one (query, clip) pair in a batch.
#[derive(Debug, Clone, Copy)]
pub struct PairPrediction<'a, T> {
    pub query_video: usize,
    pub clip_video: usize,
    pub frames: &'a [FramePredictionRaw<T>],
    /// Per-frame labels; only read for own pairs (`query_video == clip_video`).
    pub labels: &'a [AnchorLabels],
    /// `false` on padded frames, which contribute nothing.
    pub valid: &'a [bool],
}

impl<T> PairPrediction<'_, T> {
    pub fn is_own(&self) -> bool {
        self.query_video == self.clip_video
    }
}

fn refined_with_mask(anchor: &BoundingBox, d: [f64; 4]) -> (BoundingBox, [f64; 4]) {
    let w = anchor.w + d[2];
    let h = anchor.h + d[3];
    let pass = [1.0, 1.0, if w > MIN_SIDE { 1.0 } else { 0.0 }, if h > MIN_SIDE { 1.0 } else { 0.0 }];
    let b = BoundingBox::new(anchor.cx + d[0], anchor.cy + d[1], w, h).clamped();
    (b, pass)
}

/// `L = L_bbox + λ_p·L_prob` over a batch of (query, clip) pairs; gradients are returned per
/// pair, aligned with `batch`. Cross pairs only feed the negative pool in `BceHnm` mode.
pub fn total_loss<T: Real>(
    batch: &[PairPrediction<'_, T>],
    grid: &AnchorGrid,
    side: f64,
    config: &LossConfig,
) -> Result<(LossReport, Vec<ClipGrads<T>>)> {
    config.validate()?;
    let n_anchor = grid.len();
    let mut grads: Vec<ClipGrads<f64>> = Vec::with_capacity(batch.len());
    for pair in batch {
        if pair.frames.len() != pair.valid.len() || (pair.is_own() && pair.labels.len() != pair.frames.len()) {
            return Err(Error::shape("loss pair frames", &[pair.frames.len()], &[pair.valid.len(), pair.labels.len()]));
        }
        for f in pair.frames {
            if f.probs.len() != n_anchor || f.deltas.len() != 4 * n_anchor {
                return Err(Error::shape("loss frame", &[n_anchor, 4 * n_anchor], &[f.probs.len(), f.deltas.len()]));
            }
        }
        grads.push(ClipGrads::zeros(pair.frames.len(), n_anchor));
    }

    // regression on positives
    let mut reg_terms = Vec::new();
    for (pi, pair) in batch.iter().enumerate().filter(|(_, p)| p.is_own()) {
        for (t, (frame, labels)) in pair.frames.iter().zip(pair.labels).enumerate() {
            if !pair.valid[t] {
                continue;
            }
            let Some(gt) = labels.assigned_gt else { continue };
            let deltas = frame.deltas.data();
            for a in (0..n_anchor).filter(|&a| labels.positive[a]) {
                let d = [0, 1, 2, 3].map(|k| deltas[4 * a + k].as_f64());
                let (b_hat, pass) = refined_with_mask(&grid.anchors[a], d);
                let (l, g) = l_reg_with_grad(&b_hat, &gt, config.lambda_giou, side)?;
                reg_terms.push((pi, t, a, l, [0, 1, 2, 3].map(|k| g[k] * pass[k])));
            }
        }
    }
    let n_pos = reg_terms.len();
    let bbox_scale = match config.bbox_reduction {
        BboxReduction::Sum => 1.0,
        BboxReduction::Mean if n_pos > 0 => 1.0 / n_pos as f64,
        BboxReduction::Mean => 0.0,
    };
    let mut l_bbox = 0.0;
    for &(pi, t, a, l, g) in &reg_terms {
        l_bbox += l;
        for k in 0..4 {
            grads[pi].d_deltas[t][4 * a + k] += bbox_scale * g[k];
        }
    }
    l_bbox *= bbox_scale;

    // occurrence loss on the selected anchors
    let mut selection: Vec<(usize, usize, usize, bool)> = Vec::new();
    let mut n_neg_sampled = 0;
    match config.prob_loss {
        ProbLoss::BceHnm => {
            let mut pool = Vec::new();
            for (pi, pair) in batch.iter().enumerate() {
                for (t, frame) in pair.frames.iter().enumerate() {
                    if !pair.valid[t] {
                        continue;
                    }
                    let probs = frame.probs.data();
                    for a in 0..n_anchor {
                        if pair.is_own() && pair.labels[t].positive[a] {
                            selection.push((pi, t, a, true));
                        } else {
                            pool.push(NegativeCandidate {
                                loss: bce_term(probs[a].as_f64(), false),
                                key: (pair.query_video, pair.clip_video, t, a),
                            });
                        }
                    }
                }
            }
            let mined = mine_hard_negatives(pool, negative_budget(n_pos, config));
            n_neg_sampled = mined.len();
            for c in mined {
                let (qv, cv, t, a) = c.key;
                let pi = batch
                    .iter()
                    .position(|p| p.query_video == qv && p.clip_video == cv)
                    .expect("mined key refers to a batch pair");
                selection.push((pi, t, a, false));
            }
        }
        ProbLoss::Bce | ProbLoss::Focal => {
            for (pi, pair) in batch.iter().enumerate().filter(|(_, p)| p.is_own()) {
                for t in (0..pair.frames.len()).filter(|&t| pair.valid[t]) {
                    for a in 0..n_anchor {
                        let y = pair.labels[t].positive[a];
                        n_neg_sampled += usize::from(!y);
                        selection.push((pi, t, a, y));
                    }
                }
            }
        }
    }
    let values: Vec<(f64, bool)> = selection
        .iter()
        .map(|&(pi, t, a, y)| (batch[pi].frames[t].probs.data()[a].as_f64(), y))
        .collect();
    let l_prob = if values.is_empty() {
        0.0
    } else if config.prob_loss == ProbLoss::Focal {
        l_prob_focal(&values, config.focal_gamma, config.focal_alpha)?
    } else {
        l_prob_bce(&values)?
    };
    let scale = if values.is_empty() { 0.0 } else { config.lambda_p / values.len() as f64 };
    for (&(pi, t, a, _), &(p, y)) in selection.iter().zip(&values) {
        let g = if config.prob_loss == ProbLoss::Focal {
            focal_logit_grad(p, y, config.focal_gamma, config.focal_alpha)
        } else {
            bce_logit_grad(p, y)
        };
        grads[pi].d_logits[t][a] += scale * g;
    }

    let report = LossReport {
        l_bbox,
        l_prob,
        total: l_bbox + config.lambda_p * l_prob,
        n_pos,
        n_neg_sampled,
    };
    let grads = grads
        .into_iter()
        .map(|g| ClipGrads {
            d_logits: g.d_logits.into_iter().map(|v| v.into_iter().map(T::of).collect()).collect(),
            d_deltas: g.d_deltas.into_iter().map(|v| v.into_iter().map(T::of).collect()).collect(),
        })
        .collect();
    Ok((report, grads))
}
