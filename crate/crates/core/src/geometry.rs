//! Axis-aligned boxes in pixel space, stored in center/size form.
//!
//! Corner form `(x1, y1, x2, y2)` is only a view; files carry boxes as corner arrays.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Smallest side a refined box may have before it is used by a loss or metric.
pub const MIN_SIDE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn to_corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0) || !self.cx.is_finite() || !self.cy.is_finite()
    }

    /// Raises both sides to at least [`MIN_SIDE`]. Used on predicted boxes only.
    pub fn clamped(&self) -> Self {
        Self {
            w: self.w.max(MIN_SIDE),
            h: self.h.max(MIN_SIDE),
            ..*self
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Intersection with another box, `None` when they do not overlap with positive area.
    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let [ax1, ay1, ax2, ay2] = self.to_corners();
        let [bx1, by1, bx2, by2] = other.to_corners();
        let x1 = ax1.max(bx1);
        let y1 = ay1.max(by1);
        let x2 = ax2.min(bx2);
        let y2 = ay2.min(by2);
        (x2 > x1 && y2 > y1).then(|| Self::from_corners(x1, y1, x2, y2))
    }

    fn check(&self) -> Result<()> {
        if self.is_degenerate() {
            return Err(Error::Domain(format!("degenerate box: {self:?}")));
        }
        Ok(())
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_corners().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(deserializer)?;
        Ok(Self::from_corners(x1, y1, x2, y2))
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    enclosing: f64,
}

fn overlap(a: &BoundingBox, b: &BoundingBox) -> Overlap {
    let [ax1, ay1, ax2, ay2] = a.to_corners();
    let [bx1, by1, bx2, by2] = b.to_corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Overlap {
        inter,
        union,
        enclosing,
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    let o = overlap(a, b);
    Ok(o.inter / o.union)
}

pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    let o = overlap(a, b);
    Ok(o.inter / o.union - (o.enclosing - o.union) / o.enclosing)
}

/// GIoU together with its gradient with respect to `a` in `(cx, cy, w, h)` order.
///
/// At ties between edges the subgradient of the branch taken by `min`/`max` is used.
pub fn giou_with_grad(a: &BoundingBox, b: &BoundingBox) -> Result<(f64, [f64; 4])> {
    a.check()?;
    b.check()?;
    let [ax1, ay1, ax2, ay2] = a.to_corners();
    let [bx1, by1, bx2, by2] = b.to_corners();

    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let (iw, ih) = if overlapping { (iw, ih) } else { (0.0, 0.0) };
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let enclosing = cw * ch;
    let value = inter / union - (enclosing - union) / enclosing;

    // Derivatives with respect to the corners of `a`: [x1, y1, x2, y2].
    let mut d_inter = [0.0; 4];
    if overlapping {
        if ax1 > bx1 {
            d_inter[0] = -ih;
        }
        if ax2 < bx2 {
            d_inter[2] = ih;
        }
        if ay1 > by1 {
            d_inter[1] = -iw;
        }
        if ay2 < by2 {
            d_inter[3] = iw;
        }
    }
    let d_area = [-a.h, -a.w, a.h, a.w];
    let mut d_encl = [0.0; 4];
    if ax1 < bx1 {
        d_encl[0] = -ch;
    }
    if ax2 > bx2 {
        d_encl[2] = ch;
    }
    if ay1 < by1 {
        d_encl[1] = -cw;
    }
    if ay2 > by2 {
        d_encl[3] = cw;
    }

    // giou = inter/union - 1 + union/enclosing
    let mut d_corner = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enclosing - union * d_encl[k]) / (enclosing * enclosing);
        d_corner[k] = d_iou + d_ratio;
    }
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ];
    Ok((value, grad))
}
