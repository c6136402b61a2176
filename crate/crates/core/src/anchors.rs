//! Multi-scale anchor grid over the prediction feature map, additive refinement, and
//! IoU-threshold label assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// Anchor side lengths in input pixels, before the aspect ratio is applied.
    pub base_sizes: Vec<f64>,
    /// Width / height ratios; each preserves the base area.
    pub aspect_ratios: Vec<f64>,
    /// IoU threshold for a positive anchor.
    pub theta: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            base_sizes: vec![16.0, 32.0, 64.0, 128.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            theta: 0.2,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.base_sizes.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_sizes.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::config("anchor sizes and ratios must be non-empty"));
        }
        if self.base_sizes.iter().chain(&self.aspect_ratios).any(|&v| !(v > 0.0)) {
            return Err(Error::config("anchor sizes and ratios must be positive"));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::config(format!("theta {} outside (0, 1)", self.theta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub feature_h: usize,
    pub feature_w: usize,
    pub stride: f64,
    pub base_sizes: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    /// Ordered `(row, col, size, ratio)`, matching the head output channel layout.
    pub anchors: Vec<BoundingBox>,
}

/// Builds the grid: at every cell center `((j + 0.5)·stride, (i + 0.5)·stride)` one anchor
/// per (size, ratio) with `w = s·√a`, `h = s/√a`.
pub fn build_grid(config: &AnchorConfig, feature_h: usize, feature_w: usize, stride: f64) -> Result<AnchorGrid> {
    config.validate()?;
    if !(stride > 0.0) || feature_h == 0 || feature_w == 0 {
        return Err(Error::config("anchor grid needs a positive stride and extent"));
    }
    let mut anchors = Vec::with_capacity(feature_h * feature_w * config.anchors_per_cell());
    for i in 0..feature_h {
        for j in 0..feature_w {
            let cx = (j as f64 + 0.5) * stride;
            let cy = (i as f64 + 0.5) * stride;
            for &s in &config.base_sizes {
                for &a in &config.aspect_ratios {
                    let r = a.sqrt();
                    anchors.push(BoundingBox::new(cx, cy, s * r, s / r));
                }
            }
        }
    }
    Ok(AnchorGrid {
        feature_h,
        feature_w,
        stride,
        base_sizes: config.base_sizes.clone(),
        aspect_ratios: config.aspect_ratios.clone(),
        anchors,
    })
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn per_cell(&self) -> usize {
        self.base_sizes.len() * self.aspect_ratios.len()
    }

    /// Refined box for one anchor: additive offsets in `(cx, cy, w, h)`, then clamping.
    pub fn refine(&self, index: usize, delta: [f64; 4]) -> BoundingBox {
        let a = &self.anchors[index];
        BoundingBox::new(a.cx + delta[0], a.cy + delta[1], a.w + delta[2], a.h + delta[3]).clamped()
    }
}

/// `B̂ = B + ΔB` for every anchor; `deltas` holds four offsets per anchor.
pub fn apply_refinement<T: Real>(grid: &AnchorGrid, deltas: &Tensor<T>) -> Result<Vec<BoundingBox>> {
    if deltas.len() != grid.len() * 4 {
        return Err(Error::shape(
            "anchor refinement",
            &[grid.feature_h, grid.feature_w, grid.per_cell(), 4],
            deltas.shape(),
        ));
    }
    Ok(deltas
        .data()
        .chunks_exact(4)
        .enumerate()
        .map(|(i, d)| grid.refine(i, [d[0].as_f64(), d[1].as_f64(), d[2].as_f64(), d[3].as_f64()]))
        .collect())
}

/// Labels of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLabels {
    pub positive: Vec<bool>,
    /// Ground-truth box every positive anchor regresses to.
    pub assigned_gt: Option<BoundingBox>,
}

impl AnchorLabels {
    pub fn negative(n: usize) -> Self {
        Self {
            positive: vec![false; n],
            assigned_gt: None,
        }
    }

    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// An anchor is positive iff the IoU between the original (unrefined) anchor and the
/// ground truth reaches `theta`.
pub fn assign_labels(grid: &AnchorGrid, gt: Option<&BoundingBox>, theta: f64) -> Result<AnchorLabels> {
    let Some(gt) = gt else {
        return Ok(AnchorLabels::negative(grid.len()));
    };
    let mut positive = Vec::with_capacity(grid.len());
    for a in &grid.anchors {
        positive.push(iou(a, gt)? >= theta);
    }
    Ok(AnchorLabels {
        positive,
        assigned_gt: Some(*gt),
    })
}
