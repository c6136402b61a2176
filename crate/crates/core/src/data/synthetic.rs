//! Moving-shape videos with exact ground truth.
//!
//! Every object is a binary mask whose bounding box is its full `w×h` rectangle, placed at
//! integer positions, so the annotated box equals the bounding box of the rendered pixels.
//! The query object's last contiguous run of visible frames is the response track; the
//! query image shows the same object at a different scale on a different background.
//! Distractors share either the query's colour or its shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{AnnotationRecord, QueryRef, TrackBox};
use super::video::{Image, Video};
use super::{Dataset, QuerySample};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub canvas_side: usize,
    /// Inclusive range of video lengths.
    pub frames: [usize; 2],
    /// Inclusive range of object sides in pixels.
    pub object_size: [usize; 2],
    /// Inclusive range of response-track lengths.
    pub track_len: [usize; 2],
    /// Chance of an earlier, separate occurrence of the query object.
    pub earlier_occurrence_prob: f64,
    pub distractors: usize,
    /// Chance that a distractor copies the query colour (with a different shape) rather
    /// than its shape (with a different colour).
    pub similar_color_prob: f64,
    pub occluder_prob: f64,
    /// Per-frame chance of a 3×3 box blur.
    pub blur_prob: f64,
    /// Amplitude of per-pixel background noise.
    pub noise: u8,
    pub fps: f64,
    /// Extra frames appended after the main video that contain distractors only.
    pub tail_frames: usize,
    /// Same-colour look-alikes that appear only in the tail.
    pub tail_lookalikes: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            canvas_side: 64,
            frames: [24, 40],
            object_size: [12, 24],
            track_len: [4, 10],
            earlier_occurrence_prob: 0.5,
            distractors: 2,
            similar_color_prob: 0.5,
            occluder_prob: 0.2,
            blur_prob: 0.05,
            noise: 12,
            fps: 5.0,
            tail_frames: 0,
            tail_lookalikes: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [usize; 2]| r[0] <= r[1];
        if self.track_len[0] == 0 {
            return Err(Error::config("query object must be visible on at least one frame"));
        }
        if !ordered(self.frames) || !ordered(self.object_size) || !ordered(self.track_len) {
            return Err(Error::config("synthetic ranges must be [min, max] with min <= max"));
        }
        if self.track_len[1] > self.frames[0] {
            return Err(Error::config("track length may not exceed the shortest video"));
        }
        if self.object_size[0] < 4 || 2 * self.object_size[1] > self.canvas_side {
            return Err(Error::config("object sizes must lie in [4, canvas_side / 2]"));
        }
        for p in [self.earlier_occurrence_prob, self.similar_color_prob, self.occluder_prob, self.blur_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("probabilities must lie in [0, 1]"));
            }
        }
        if !(self.fps > 0.0) {
            return Err(Error::config("fps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Ring,
    Plus,
}

const KINDS: [ShapeKind; 4] = [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Ring, ShapeKind::Plus];

const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 180, 60],
    [50, 80, 220],
    [230, 200, 40],
    [200, 60, 200],
    [40, 200, 210],
    [240, 130, 30],
    [245, 245, 245],
];

/// Mask of a `w×h` shape; every row and column of the rectangle has a set pixel at its
/// extremes, so the mask's bounding box is the whole rectangle.
pub fn shape_mask(kind: ShapeKind, w: usize, h: usize) -> Vec<bool> {
    let mut m = vec![false; w * h];
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx) / cx;
            let dy = (y as f64 + 0.5 - cy) / cy;
            let r2 = dx * dx + dy * dy;
            let on_axis = (x as f64 + 0.5 - cx).abs() <= 1.0 || (y as f64 + 0.5 - cy).abs() <= 1.0;
            m[y * w + x] = match kind {
                ShapeKind::Rect => true,
                // the axis pixels keep the extremes set for any size
                ShapeKind::Ellipse => r2 <= 1.0 || on_axis && r2 <= 1.2,
                ShapeKind::Ring => (r2 <= 1.0 && r2 >= 0.3) || on_axis && r2 >= 0.3,
                ShapeKind::Plus => {
                    (x as f64 + 0.5 - cx).abs() <= (w as f64 / 6.0).max(1.0)
                        || (y as f64 + 0.5 - cy).abs() <= (h as f64 / 6.0).max(1.0)
                }
            };
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub color: [u8; 3],
    pub w: usize,
    pub h: usize,
    /// Piecewise-linear motion of the top-left corner: `(frame, x, y)` keyframes.
    pub keyframes: Vec<(usize, f64, f64)>,
    pub visible: Vec<bool>,
}

impl SceneObject {
    pub fn position(&self, t: usize) -> (i64, i64) {
        let k = &self.keyframes;
        let i = k.iter().rposition(|&(f, _, _)| f <= t).unwrap_or(0);
        let (f0, x0, y0) = k[i];
        let (x, y) = match k.get(i + 1) {
            Some(&(f1, x1, y1)) => {
                let a = (t - f0) as f64 / (f1 - f0) as f64;
                (x0 + a * (x1 - x0), y0 + a * (y1 - y0))
            }
            None => (x0, y0),
        };
        (x.round() as i64, y.round() as i64)
    }

    /// Visible part of the object's rectangle on frame `t`; `None` when hidden or fully
    /// outside the canvas.
    pub fn box_at(&self, t: usize, side: usize) -> Option<BoundingBox> {
        if !self.visible.get(t).copied().unwrap_or(false) {
            return None;
        }
        let (x, y) = self.position(t);
        let s = side as i64;
        let (x1, y1) = (x.max(0), y.max(0));
        let (x2, y2) = ((x + self.w as i64).min(s), (y + self.h as i64).min(s));
        (x2 > x1 && y2 > y1).then(|| BoundingBox::from_corners(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }

    fn draw(&self, img: &mut Image, x0: i64, y0: i64, mask: &[bool]) {
        for y in 0..self.h {
            for x in 0..self.w {
                let (px, py) = (x0 + x as i64, y0 + y as i64);
                if mask[y * self.w + x] && px >= 0 && py >= 0 && (px as usize) < img.side && (py as usize) < img.side {
                    img.set_pixel(px as usize, py as usize, self.color);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub canvas_side: usize,
    pub frame_count: usize,
    /// Index 0 is the query object.
    pub objects: Vec<SceneObject>,
    /// Grey rectangles drawn over everything; not annotated.
    pub occluders: Vec<SceneObject>,
    pub blurred: Vec<bool>,
    pub background: Background,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Background {
    pub top: [u8; 3],
    pub bottom: [u8; 3],
    pub noise: u8,
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Background {
    fn render(&self, side: usize, t: usize) -> Image {
        let mut img = Image::filled(side, [0, 0, 0]);
        for y in 0..side {
            let a = y as f64 / (side - 1).max(1) as f64;
            for x in 0..side {
                let h = splitmix(self.seed ^ ((t as u64) << 40) ^ ((y as u64) << 20) ^ x as u64);
                let n = if self.noise == 0 { 0 } else { (h % (2 * self.noise as u64 + 1)) as i64 - self.noise as i64 };
                let px = [0, 1, 2].map(|c| {
                    let v = self.top[c] as f64 * (1.0 - a) + self.bottom[c] as f64 * a;
                    (v.round() as i64 + n).clamp(0, 255) as u8
                });
                img.set_pixel(x, y, px);
            }
        }
        img
    }

    fn random(rng: &mut ChaCha8Rng, noise: u8) -> Self {
        let dark = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.gen_range(20..110u8));
        Self {
            top: dark(rng),
            bottom: dark(rng),
            noise,
            seed: rng.gen(),
        }
    }
}

fn box_blur(img: &Image) -> Image {
    let s = img.side as i64;
    let mut out = img.clone();
    for y in 0..s {
        for x in 0..s {
            let mut acc = [0u32; 3];
            let mut n = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (px, py) = (x + dx, y + dy);
                    if px >= 0 && py >= 0 && px < s && py < s {
                        let p = img.pixel(px as usize, py as usize);
                        for c in 0..3 {
                            acc[c] += p[c] as u32;
                        }
                        n += 1;
                    }
                }
            }
            out.set_pixel(x as usize, y as usize, acc.map(|v| ((v + n / 2) / n) as u8));
        }
    }
    out
}

impl SyntheticScene {
    pub fn render_frame(&self, t: usize) -> Image {
        let mut img = self.background.render(self.canvas_side, t);
        for obj in self.objects.iter().skip(1).chain(self.objects.first()).chain(&self.occluders) {
            if obj.visible.get(t).copied().unwrap_or(false) {
                let (x, y) = obj.position(t);
                obj.draw(&mut img, x, y, &shape_mask(obj.kind, obj.w, obj.h));
            }
        }
        if self.blurred.get(t).copied().unwrap_or(false) {
            img = box_blur(&img);
        }
        img
    }

    /// Frames where the query object has a box.
    pub fn query_boxes(&self) -> Vec<Option<BoundingBox>> {
        (0..self.frame_count)
            .map(|t| self.objects[0].box_at(t, self.canvas_side))
            .collect()
    }

    /// The last contiguous run of frames with a query box.
    pub fn response_track(&self) -> Option<Vec<TrackBox>> {
        last_visible_run(&self.query_boxes())
    }
}

pub fn last_visible_run(boxes: &[Option<BoundingBox>]) -> Option<Vec<TrackBox>> {
    let e = boxes.iter().rposition(Option::is_some)?;
    let s = boxes[..e].iter().rposition(Option::is_none).map_or(0, |i| i + 1);
    Some(
        (s..=e)
            .map(|frame| TrackBox {
                frame,
                bbox: boxes[frame].unwrap(),
            })
            .collect(),
    )
}

fn jitter_color(rng: &mut ChaCha8Rng, c: [u8; 3], amount: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8)
}

fn random_size(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> (usize, usize) {
    let [lo, hi] = cfg.object_size;
    let w = rng.gen_range(lo..=hi);
    let h = rng.gen_range((w / 2).max(lo)..=(w * 2).min(hi));
    (w, h)
}

fn random_motion(rng: &mut ChaCha8Rng, frames: usize, side: usize, w: usize, h: usize) -> Vec<(usize, f64, f64)> {
    let mut keys = Vec::new();
    let mut f = 0;
    loop {
        let x = rng.gen_range(0..=side - w) as f64;
        let y = rng.gen_range(0..=side - h) as f64;
        keys.push((f, x, y));
        if f + 1 >= frames {
            break;
        }
        f = (f + rng.gen_range(5..=9)).min(frames - 1);
    }
    keys
}

fn random_interval(rng: &mut ChaCha8Rng, frames: usize, min_len: usize) -> Vec<bool> {
    let len = rng.gen_range(min_len.min(frames)..=frames);
    let s = rng.gen_range(0..=frames - len);
    (0..frames).map(|t| t >= s && t < s + len).collect()
}

fn distractor(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, query: &SceneObject, frames: usize) -> SceneObject {
    let (kind, color) = if rng.gen_bool(cfg.similar_color_prob) {
        let others: Vec<_> = KINDS.iter().copied().filter(|&k| k != query.kind).collect();
        let kind = others[rng.gen_range(0..others.len())];
        (kind, jitter_color(rng, query.color, 12))
    } else {
        let others: Vec<_> = PALETTE.iter().copied().filter(|&c| c != query.color).collect();
        let base = others[rng.gen_range(0..others.len())];
        (query.kind, jitter_color(rng, base, 12))
    };
    let (w, h) = random_size(rng, cfg);
    let side = cfg.canvas_side;
    SceneObject {
        kind,
        color,
        w,
        h,
        keyframes: random_motion(rng, frames, side, w, h),
        visible: if rng.gen_bool(0.5) { vec![true; frames] } else { random_interval(rng, frames, frames / 2) },
    }
}

/// Draws one scene. `tail_frames` extra frames (no query object) come from an independent
/// stream so the main part is identical with or without them.
pub fn generate_scene(seed: u64, cfg: &SyntheticConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.canvas_side;
    let main = rng.gen_range(cfg.frames[0]..=cfg.frames[1]);
    let total = main + cfg.tail_frames;

    let kind = KINDS[rng.gen_range(0..KINDS.len())];
    let base = PALETTE[rng.gen_range(0..PALETTE.len())];
    let color = jitter_color(&mut rng, base, 10);
    let (w, h) = random_size(&mut rng, cfg);
    let len = rng.gen_range(cfg.track_len[0]..=cfg.track_len[1]);
    let e = rng.gen_range(len - 1..main);
    let s = e + 1 - len;
    let mut visible = vec![false; total];
    visible[s..=e].fill(true);
    if s >= 4 && rng.gen_bool(cfg.earlier_occurrence_prob) {
        let len2 = rng.gen_range(2..=len.min(s - 2));
        let e2 = rng.gen_range(len2 - 1..=s - 3);
        visible[e2 + 1 - len2..=e2].fill(true);
    }
    let mut query = SceneObject {
        kind,
        color,
        w,
        h,
        keyframes: random_motion(&mut rng, main, side, w, h),
        visible,
    };
    let mut distractors: Vec<SceneObject> = (0..cfg.distractors).map(|_| distractor(&mut rng, cfg, &query, main)).collect();
    let mut occluders = Vec::new();
    if rng.gen_bool(cfg.occluder_prob) {
        let (ow, oh) = (rng.gen_range(8..=14), rng.gen_range(8..=14));
        let grey = rng.gen_range(90..170u8);
        occluders.push(SceneObject {
            kind: ShapeKind::Rect,
            color: [grey; 3],
            w: ow,
            h: oh,
            keyframes: random_motion(&mut rng, main, side, ow, oh),
            visible: random_interval(&mut rng, main, main / 3),
        });
    }
    let mut blurred: Vec<bool> = (0..main).map(|_| rng.gen_bool(cfg.blur_prob)).collect();
    let background = Background::random(&mut rng, cfg.noise);

    if cfg.tail_frames > 0 {
        let mut tail = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x7a11));
        let extend = |obj: &mut SceneObject, tail: &mut ChaCha8Rng, visible: bool| {
            let moves = random_motion(tail, cfg.tail_frames, side, obj.w, obj.h);
            obj.keyframes.extend(moves.into_iter().map(|(f, x, y)| (f + main, x, y)));
            obj.visible.resize(total, visible);
        };
        query.keyframes.push((main, query.keyframes.last().unwrap().1, query.keyframes.last().unwrap().2));
        for d in &mut distractors {
            extend(d, &mut tail, true);
        }
        let lookalike = SyntheticConfig { similar_color_prob: 1.0, ..cfg.clone() };
        for _ in 0..cfg.tail_lookalikes {
            let mut extra = distractor(&mut tail, &lookalike, &query, cfg.tail_frames);
            extra.keyframes.iter_mut().for_each(|k| k.0 += main);
            extra.visible = (0..total).map(|t| t >= main).collect();
            distractors.push(extra);
        }
        for o in &mut occluders {
            extend(o, &mut tail, false);
        }
        blurred.resize(total, false);
    }
    let mut objects = vec![query];
    objects.extend(distractors);
    Ok(SyntheticScene {
        canvas_side: side,
        frame_count: total,
        objects,
        occluders,
        blurred,
        background,
    })
}

/// Query image: the object at a different scale on its own background; returns the image
/// and the object's box in it.
pub fn render_query(seed: u64, scene: &SyntheticScene, cfg: &SyntheticConfig) -> (Image, BoundingBox) {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x9e7));
    let side = scene.canvas_side;
    let obj = &scene.objects[0];
    let max_side = side * 3 / 4;
    let mut scale: f64 = rng.gen_range(1.3..2.0);
    // keep the aspect ratio and fit the canvas
    scale = scale.min(max_side as f64 / obj.w.max(obj.h) as f64);
    let mut w = (obj.w as f64 * scale).round() as usize;
    let mut h = (obj.h as f64 * scale).round() as usize;
    if w == obj.w && h == obj.h {
        // never reuse the in-video scale
        w = (w * 3 / 4).max(4);
        h = (h * 3 / 4).max(4);
    }
    let x = (side - w) / 2 + rng.gen_range(0..=(side - w) / 4);
    let y = (side - h) / 2 + rng.gen_range(0..=(side - h) / 4);
    let bg = Background::random(&mut rng, cfg.noise);
    let mut img = bg.render(side, 0);
    let big = SceneObject {
        w,
        h,
        ..obj.clone()
    };
    big.draw(&mut img, x as i64, y as i64, &shape_mask(obj.kind, w, h));
    (img, BoundingBox::from_corners(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
}

fn video_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed.wrapping_mul(0x1000_0001).wrapping_add(index as u64))
}

/// Generates `n_videos` scenes, renders them, and annotates one query per video.
pub fn generate_dataset(seed: u64, n_videos: usize, cfg: &SyntheticConfig) -> Result<(Dataset, Vec<SyntheticScene>)> {
    cfg.validate()?;
    let mut videos = Vec::with_capacity(n_videos);
    let mut queries = Vec::with_capacity(n_videos);
    let mut scenes = Vec::with_capacity(n_videos);
    for i in 0..n_videos {
        let vs = video_seed(seed, i);
        let scene = generate_scene(vs, cfg)?;
        let video_id = format!("v{i:03}");
        let query_id = format!("q{i:03}");
        let frames = (0..scene.frame_count).map(|t| scene.render_frame(t)).collect();
        let track = scene
            .response_track()
            .ok_or_else(|| Error::config("generated scene has no visible query object"))?;
        let (image, source_box) = render_query(vs, &scene, cfg);
        queries.push(QuerySample {
            record: AnnotationRecord {
                query_id: query_id.clone(),
                video_id: video_id.clone(),
                frame_count: scene.frame_count,
                fps: cfg.fps,
                query: QueryRef {
                    image: format!("queries/{query_id}"),
                    source_box,
                },
                response_track: track,
            },
            image,
        });
        videos.push(Video {
            id: video_id,
            side: cfg.canvas_side,
            frames,
        });
        scenes.push(scene);
    }
    Ok((
        Dataset {
            side: cfg.canvas_side,
            videos,
            queries,
        },
        scenes,
    ))
}
