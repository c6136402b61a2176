//! Clip-consistent augmentation: horizontal flip, random resized crop, brightness and
//! contrast. One set of parameters is drawn per clip; the query draws its own flip and
//! jitter but is never cropped, so its object stays whole.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, MIN_SIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_prob: f64,
    /// Range of the crop's area as a fraction of the frame.
    pub crop_area: [f64; 2],
    /// Range of the crop's width / height.
    pub crop_aspect: [f64; 2],
    /// Brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_prob: 0.3,
            crop_area: [0.6, 1.0],
            crop_aspect: [0.75, 1.333],
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            crop_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.flip_prob) || !unit(self.crop_prob) {
            return Err(Error::config("augmentation probabilities must lie in [0, 1]"));
        }
        let [a0, a1] = self.crop_area;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::config(format!("crop area range {:?} must satisfy 0 < lo ≤ hi ≤ 1", self.crop_area)));
        }
        let [r0, r1] = self.crop_aspect;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::config(format!("crop aspect range {:?} invalid", self.crop_aspect)));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::config("brightness and contrast ranges must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Crop rectangle in source pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub crop: Option<Crop>,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flip: false,
        crop: None,
        brightness: 1.0,
        contrast: 1.0,
    };

    pub fn draw(cfg: &AugmentConfig, side: usize, allow_crop: bool, rng: &mut impl Rng) -> Self {
        let flip = rng.gen_bool(cfg.flip_prob);
        let crop = (allow_crop && rng.gen_bool(cfg.crop_prob)).then(|| {
            let side = side as f64;
            let area = rng.gen_range(cfg.crop_area[0]..=cfg.crop_area[1]) * side * side;
            let aspect = rng.gen_range(cfg.crop_aspect[0].ln()..=cfg.crop_aspect[1].ln()).exp();
            let w = (area * aspect).sqrt().clamp(1.0, side);
            let h = (area / aspect).sqrt().clamp(1.0, side);
            Crop {
                x0: rng.gen_range(0.0..=side - w),
                y0: rng.gen_range(0.0..=side - h),
                w,
                h,
            }
        });
        let mut factor = |r: f64| if r > 0.0 { rng.gen_range(1.0 - r..=1.0 + r) } else { 1.0 };
        let brightness = factor(cfg.brightness);
        let contrast = factor(cfg.contrast);
        Self {
            flip,
            crop,
            brightness,
            contrast,
        }
    }
}

fn resized_crop(img: &Image, c: &Crop) -> Image {
    let side = img.side;
    let (sx, sy) = (c.w / side as f64, c.h / side as f64);
    let max = (side - 1) as f64;
    let mut out = Image::filled(side, [0, 0, 0]);
    for v in 0..side {
        let y = (c.y0 + (v as f64 + 0.5) * sy - 0.5).clamp(0.0, max);
        let (y0, fy) = (y.floor() as usize, y.fract());
        let y1 = (y0 + 1).min(side - 1);
        for u in 0..side {
            let x = (c.x0 + (u as f64 + 0.5) * sx - 0.5).clamp(0.0, max);
            let (x0, fx) = (x.floor() as usize, x.fract());
            let x1 = (x0 + 1).min(side - 1);
            let (p00, p01, p10, p11) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            let rgb = [0, 1, 2].map(|k| {
                let top = p00[k] as f64 * (1.0 - fx) + p01[k] as f64 * fx;
                let bottom = p10[k] as f64 * (1.0 - fx) + p11[k] as f64 * fx;
                (top * (1.0 - fy) + bottom * fy).round() as u8
            });
            out.set_pixel(u, v, rgb);
        }
    }
    out
}

/// Box after cropping; `None` when the visible part is thinner than a pixel.
pub fn crop_box(b: &BoundingBox, c: &Crop, side: usize) -> Option<BoundingBox> {
    let [x1, y1, x2, y2] = b.to_corners();
    let (cx1, cy1) = (x1.max(c.x0), y1.max(c.y0));
    let (cx2, cy2) = (x2.min(c.x0 + c.w), y2.min(c.y0 + c.h));
    let (sx, sy) = (side as f64 / c.w, side as f64 / c.h);
    let out = BoundingBox::from_corners((cx1 - c.x0) * sx, (cy1 - c.y0) * sy, (cx2 - c.x0) * sx, (cy2 - c.y0) * sy);
    (out.w >= MIN_SIDE && out.h >= MIN_SIDE).then_some(out)
}

pub fn flip_box(b: &BoundingBox, side: usize) -> BoundingBox {
    BoundingBox::new(side as f64 - b.cx, b.cy, b.w, b.h)
}

/// Contrast around the mean of all images, then brightness.
fn jitter(images: &mut [Image], brightness: f64, contrast: f64) {
    if brightness == 1.0 && contrast == 1.0 {
        return;
    }
    let total: usize = images.iter().map(|i| i.data.len()).sum();
    let mean = images.iter().flat_map(|i| &i.data).map(|&v| v as f64).sum::<f64>() / total.max(1) as f64;
    for img in images {
        for v in &mut img.data {
            *v = (((*v as f64 - mean) * contrast + mean) * brightness).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Applies `params` to every frame of a clip and its ground truth. Frames whose box leaves
/// the crop become negatives.
pub fn apply_to_clip(params: &AugmentParams, frames: &mut [Image], gt: &mut [Option<BoundingBox>]) {
    let Some(side) = frames.first().map(|f| f.side) else { return };
    if let Some(c) = &params.crop {
        for f in frames.iter_mut() {
            *f = resized_crop(f, c);
        }
        for g in gt.iter_mut() {
            *g = g.and_then(|b| crop_box(&b, c, side));
        }
    }
    if params.flip {
        for f in frames.iter_mut() {
            *f = f.flipped_horizontally();
        }
        for b in gt.iter_mut().flatten() {
            *b = flip_box(b, side);
        }
    }
    jitter(frames, params.brightness, params.contrast);
}

/// Independent augmentation of a training clip and its query.
pub fn augment(
    frames: &mut [Image],
    gt: &mut [Option<BoundingBox>],
    query: &mut Image,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let Some(side) = frames.first().map(|f| f.side) else { return Ok(()) };
    let clip = AugmentParams::draw(cfg, side, true, rng);
    apply_to_clip(&clip, frames, gt);
    let q = AugmentParams::draw(cfg, query.side, false, rng);
    apply_to_clip(&q, std::slice::from_mut(query), &mut []);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(seed: u8) -> Image {
        let mut img = Image::filled(16, [0, 0, 0]);
        for y in 0..16 {
            for x in 0..16 {
                img.set_pixel(x, y, [(x * 16) as u8, (y * 16) as u8, seed.wrapping_mul(x as u8 + 1)]);
            }
        }
        img
    }

    #[test]
    fn flip_twice_is_identity() {
        let b = BoundingBox::from_corners(1.0, 2.0, 6.0, 9.0);
        assert_eq!(flip_box(&flip_box(&b, 16), 16), b);
        assert_eq!(flip_box(&b, 16).to_corners(), [10.0, 2.0, 15.0, 9.0]);
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let mut frames = vec![frame(1), frame(2)];
        let mut gt = vec![Some(b), None];
        let orig = (frames.clone(), gt.clone());
        apply_to_clip(&p, &mut frames, &mut gt);
        apply_to_clip(&p, &mut frames, &mut gt);
        assert_eq!((frames, gt), orig);
    }

    #[test]
    fn identity_config_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut frames = vec![frame(1), frame(5)];
        let mut gt = vec![None, Some(BoundingBox::new(8.0, 8.0, 4.0, 4.0))];
        let mut q = frame(9);
        let orig = (frames.clone(), gt.clone(), q.clone());
        augment(&mut frames, &mut gt, &mut q, &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!((frames, gt, q), orig);
    }

    #[test]
    fn crop_that_misses_the_object_makes_a_negative_frame() {
        let c = Crop {
            x0: 0.0,
            y0: 0.0,
            w: 8.0,
            h: 8.0,
        };
        let inside = BoundingBox::from_corners(1.0, 1.0, 5.0, 3.0);
        let outside = BoundingBox::from_corners(10.0, 10.0, 14.0, 14.0);
        let straddling = BoundingBox::from_corners(6.0, 6.0, 10.0, 10.0);
        let p = AugmentParams {
            crop: Some(c),
            ..AugmentParams::IDENTITY
        };
        let mut frames = vec![frame(0), frame(1), frame(2)];
        let mut gt = vec![Some(inside), Some(outside), Some(straddling)];
        apply_to_clip(&p, &mut frames, &mut gt);
        assert_eq!(gt[0].unwrap().to_corners(), [2.0, 2.0, 10.0, 6.0]);
        assert_eq!(gt[1], None);
        assert_eq!(gt[2].unwrap().to_corners(), [12.0, 12.0, 16.0, 16.0]);
    }

    #[test]
    fn full_crop_leaves_pixels_unchanged() {
        let c = Crop {
            x0: 0.0,
            y0: 0.0,
            w: 16.0,
            h: 16.0,
        };
        let f = frame(3);
        assert_eq!(resized_crop(&f, &c), f);
    }

    #[test]
    fn clip_parameters_are_shared_across_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AugmentConfig {
            crop_prob: 1.0,
            flip_prob: 1.0,
            ..AugmentConfig::default()
        };
        let mut frames = vec![frame(4); 3];
        let mut gt = vec![None; 3];
        let mut q = frame(4);
        augment(&mut frames, &mut gt, &mut q, &cfg, &mut rng).unwrap();
        assert_eq!(frames[0], frames[1]);
        assert_eq!(frames[1], frames[2]);
    }

    #[test]
    fn empty_crops_are_rejected() {
        let cfg = AugmentConfig {
            crop_area: [0.0, 0.5],
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            crop_area: [0.8, 0.5],
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
