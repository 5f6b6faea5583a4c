//! Data model shared by every stage of the pipeline.
//!
//! Boxes are normalized center-format internally; the top-left pixel format
//! only appears at I/O boundaries. Frame indices are 0-based internally and
//! converted to the 1-based convention only when serialized.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum frame side accepted by the vision backbone.
pub const MIN_FRAME_SIDE: usize = 8;

/// A stack of RGB frames, stored `T × H × W × 3` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<f32>,
    num_frames: usize,
    height: usize,
    width: usize,
    pub frame_rate: f64,
}

impl VideoClip {
    pub fn new(
        frames: Vec<f32>,
        num_frames: usize,
        height: usize,
        width: usize,
        frame_rate: f64,
    ) -> Result<Self> {
        if num_frames == 0 {
            return Err(Error::Data("video must contain at least one frame".into()));
        }
        if height < MIN_FRAME_SIDE || width < MIN_FRAME_SIDE {
            return Err(Error::Data(format!(
                "frame size {height}x{width} below minimum {MIN_FRAME_SIDE}"
            )));
        }
        if frames.len() != num_frames * height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} pixel values, got {}",
                num_frames * height * width * 3,
                frames.len()
            )));
        }
        if frames.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            frames,
            num_frames,
            height,
            width,
            frame_rate,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.frames
    }

    /// Pixel data of one frame, `H × W × 3`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    /// Builds a new clip from a subset of frames, in the given order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let mut frames = Vec::with_capacity(indices.len() * self.height * self.width * 3);
        for &t in indices {
            if t >= self.num_frames {
                return Err(Error::Data(format!(
                    "frame {t} out of range for clip of {} frames",
                    self.num_frames
                )));
            }
            frames.extend_from_slice(self.frame(t));
        }
        Self::new(
            frames,
            indices.len(),
            self.height,
            self.width,
            self.frame_rate,
        )
    }

    /// Channel-first tensor `[T, 3, H, W]`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.frames,
            (self.num_frames, self.height, self.width, 3),
            device,
        )?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
    }
}

/// Caption text together with its token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub raw_text: String,
    pub tokens: Vec<u32>,
}

/// Normalized center-format box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Pixel box given by its top-left corner and size, as used by dataset files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let finite = [cx, cy, w, h].iter().all(|v| v.is_finite());
        if !finite || !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::InvalidBox(format!(
                "center ({cx}, {cy}) outside the unit square"
            )));
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(Error::InvalidBox(format!("size ({w}, {h}) outside (0, 1]")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)` in normalized coordinates.
    pub fn corners(&self) -> [f64; 4] {
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

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Intersects the box with the unit square. Boxes lying entirely outside
    /// collapse to zero size and are not valid boxes anymore.
    pub fn clipped(&self) -> Self {
        const SLACK: f64 = 1e-12;
        let [x1, y1, x2, y2] = self.corners();
        if x1 >= -SLACK && y1 >= -SLACK && x2 <= 1.0 + SLACK && y2 <= 1.0 + SLACK {
            return *self;
        }
        let (x1, y1) = (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        let (x2, y2) = (x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: (x2 - x1).max(0.0),
            h: (y2 - y1).max(0.0),
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Converts to a top-left pixel box for an image of the given size.
    pub fn to_corner_box(&self, width: usize, height: usize) -> CornerBox {
        let (w, h) = (width as f64, height as f64);
        // snap to a nano-pixel grid so integer pixel boxes come back as integers
        let snap = |v: f64| (v * 1e9).round() / 1e9;
        CornerBox {
            x: snap((self.cx - self.w / 2.0) * w),
            y: snap((self.cy - self.h / 2.0) * h),
            w: snap(self.w * w),
            h: snap(self.h * h),
        }
    }
}

/// Converts a top-left pixel box to the canonical normalized center format,
/// clipping it to the image.
pub fn box_corner_to_center(b: CornerBox, width: usize, height: usize) -> Result<BoundingBox> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::InvalidBox(format!(
            "non-positive size ({}, {})",
            b.w, b.h
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidBox("zero-sized image".into()));
    }
    let (iw, ih) = (width as f64, height as f64);
    let x1 = (b.x / iw).clamp(0.0, 1.0);
    let y1 = (b.y / ih).clamp(0.0, 1.0);
    let x2 = ((b.x + b.w) / iw).clamp(0.0, 1.0);
    let y2 = ((b.y + b.h) / ih).clamp(0.0, 1.0);
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::InvalidBox(format!(
            "box ({}, {}, {}, {}) does not intersect a {width}x{height} image",
            b.x, b.y, b.w, b.h
        )));
    }
    BoundingBox::from_corners(x1, y1, x2, y2)
}

/// Inclusive frame interval, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalInterval {
    start: usize,
    end: usize,
}

impl TemporalInterval {
    /// In strict mode the interval must span at least two frames.
    pub fn new(start: usize, end: usize, strict: bool) -> Result<Self> {
        if strict && start >= end {
            return Err(Error::InvalidInterval(format!(
                "strict interval requires start < end, got ({start}, {end})"
            )));
        }
        if start > end {
            return Err(Error::InvalidInterval(format!(
                "start {start} after end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    /// Builds an interval from the 1-based pair used in annotation files.
    pub fn from_one_based(start: usize, end: usize, strict: bool) -> Result<Self> {
        if start == 0 || end == 0 {
            return Err(Error::InvalidInterval(format!(
                "1-based interval ({start}, {end}) contains a zero index"
            )));
        }
        Self::new(start - 1, end - 1, strict)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    /// Number of frames covered, counting both endpoints.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn to_one_based(&self) -> (usize, usize) {
        (self.start + 1, self.end + 1)
    }

    pub fn check_within(&self, num_frames: usize) -> Result<()> {
        if self.end >= num_frames {
            return Err(Error::InvalidInterval(format!(
                "interval end {} outside a clip of {num_frames} frames",
                self.end
            )));
        }
        Ok(())
    }
}

/// Maps an interval to the 1-based `(t_s, t_e)` pair of annotation files.
pub fn interval_to_one_based(interval: TemporalInterval) -> (usize, usize) {
    interval.to_one_based()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceKind {
    Declarative,
    Interrogative,
    #[default]
    Unknown,
}

/// One ground-truth tube for a (video, caption) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingAnnotation {
    pub video_id: String,
    pub caption: String,
    pub sentence_kind: SentenceKind,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    interval: TemporalInterval,
    boxes: BTreeMap<usize, BoundingBox>,
}

impl GroundingAnnotation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        video_id: impl Into<String>,
        caption: impl Into<String>,
        sentence_kind: SentenceKind,
        frame_count: usize,
        width: usize,
        height: usize,
        interval: TemporalInterval,
        boxes: BTreeMap<usize, BoundingBox>,
    ) -> Result<Self> {
        interval.check_within(frame_count)?;
        check_coverage(&interval, boxes.keys().copied())?;
        Ok(Self {
            video_id: video_id.into(),
            caption: caption.into(),
            sentence_kind,
            frame_count,
            width,
            height,
            interval,
            boxes,
        })
    }

    pub fn interval(&self) -> TemporalInterval {
        self.interval
    }

    pub fn boxes(&self) -> &BTreeMap<usize, BoundingBox> {
        &self.boxes
    }

    pub fn box_at(&self, t: usize) -> Option<&BoundingBox> {
        self.boxes.get(&t)
    }
}

fn check_coverage(interval: &TemporalInterval, frames: impl Iterator<Item = usize>) -> Result<()> {
    let frames: Vec<usize> = frames.collect();
    if frames.len() != interval.len() || frames.iter().any(|t| !interval.contains(*t)) {
        return Err(Error::InvalidInterval(format!(
            "boxes must cover exactly frames {}..={} ({} boxes given)",
            interval.start(),
            interval.end(),
            frames.len()
        )));
    }
    Ok(())
}

/// The model's output: an interval plus one box per frame inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalTube {
    interval: TemporalInterval,
    boxes: Vec<BoundingBox>,
    pub score: f64,
}

impl SpatioTemporalTube {
    pub fn new(interval: TemporalInterval, boxes: Vec<BoundingBox>, score: f64) -> Result<Self> {
        if boxes.len() != interval.len() {
            return Err(Error::InvalidInterval(format!(
                "tube over {} frames needs {} boxes, got {}",
                interval.len(),
                interval.len(),
                boxes.len()
            )));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Data(format!("tube score {score} outside [0, 1]")));
        }
        Ok(Self {
            interval,
            boxes,
            score,
        })
    }

    /// A tube that copies the ground truth; useful as an oracle prediction.
    pub fn from_annotation(ann: &GroundingAnnotation) -> Self {
        Self {
            interval: ann.interval(),
            boxes: ann.boxes().values().copied().collect(),
            score: 1.0,
        }
    }

    pub fn interval(&self) -> TemporalInterval {
        self.interval
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn box_at(&self, t: usize) -> Option<&BoundingBox> {
        if self.interval.contains(t) {
            self.boxes.get(t - self.interval.start())
        } else {
            None
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &BoundingBox)> {
        self.interval.frames().zip(self.boxes.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_frame_corner_box() {
        let b = box_corner_to_center(
            CornerBox {
                x: 0.0,
                y: 0.0,
                w: 640.0,
                h: 480.0,
            },
            640,
            480,
        )
        .unwrap();
        assert_eq!(b.to_array(), [0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn centered_half_box() {
        let b = box_corner_to_center(
            CornerBox {
                x: 160.0,
                y: 120.0,
                w: 320.0,
                h: 240.0,
            },
            640,
            480,
        )
        .unwrap();
        assert_eq!(b.to_array(), [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn non_positive_size_rejected() {
        let err = box_corner_to_center(
            CornerBox {
                x: 1.0,
                y: 1.0,
                w: 0.0,
                h: 3.0,
            },
            10,
            10,
        );
        assert!(matches!(err, Err(Error::InvalidBox(_))));
    }

    #[test]
    fn corner_center_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut max_err: f64 = 0.0;
        for _ in 0..10_000 {
            let (width, height) = (rng.random_range(8..2000), rng.random_range(8..2000));
            let (iw, ih) = (width as f64, height as f64);
            let x = rng.random_range(0.0..iw - 1.0);
            let y = rng.random_range(0.0..ih - 1.0);
            let w = rng.random_range(0.5..=(iw - x));
            let h = rng.random_range(0.5..=(ih - y));
            let c = CornerBox { x, y, w, h };
            let back = box_corner_to_center(c, width, height)
                .unwrap()
                .to_corner_box(width, height);
            for (a, b) in [(c.x, back.x), (c.y, back.y), (c.w, back.w), (c.h, back.h)] {
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err < 1e-9, "max round-trip error {max_err}");
    }

    #[test]
    fn clipping_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let b = BoundingBox {
                cx: rng.random_range(0.0..1.0),
                cy: rng.random_range(0.0..1.0),
                w: rng.random_range(0.01..1.5),
                h: rng.random_range(0.01..1.5),
            };
            let once = b.clipped();
            assert_eq!(once, once.clipped());
        }
    }

    #[test]
    fn one_based_indexing() {
        let iv = TemporalInterval::new(0, 3, true).unwrap();
        assert_eq!(interval_to_one_based(iv), (1, 4));
        let iv = TemporalInterval::new(0, 1, true).unwrap();
        assert_eq!(interval_to_one_based(iv), (1, 2));
    }

    #[test]
    fn one_based_indexing_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = rng.random_range(0..500);
            let e = rng.random_range(s + 1..=501);
            let iv = TemporalInterval::new(s, e, true).unwrap();
            let (a, b) = interval_to_one_based(iv);
            assert_eq!(TemporalInterval::from_one_based(a, b, true).unwrap(), iv);
            let again = TemporalInterval::from_one_based(a, b, true).unwrap();
            assert_eq!(interval_to_one_based(again), (a, b));
        }
    }

    #[test]
    fn strict_rejects_single_frame() {
        assert!(TemporalInterval::new(4, 4, true).is_err());
        assert!(TemporalInterval::new(4, 4, false).is_ok());
        assert!(TemporalInterval::new(5, 4, false).is_err());
    }

    #[test]
    fn annotation_requires_exact_coverage() {
        let iv = TemporalInterval::new(1, 2, true).unwrap();
        let b = BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let ok: BTreeMap<_, _> = [(1, b), (2, b)].into_iter().collect();
        assert!(GroundingAnnotation::new("v", "c", SentenceKind::Unknown, 4, 8, 8, iv, ok).is_ok());
        let missing: BTreeMap<_, _> = [(1, b)].into_iter().collect();
        assert!(
            GroundingAnnotation::new("v", "c", SentenceKind::Unknown, 4, 8, 8, iv, missing)
                .is_err()
        );
        let extra: BTreeMap<_, _> = [(0, b), (1, b), (2, b)].into_iter().collect();
        assert!(
            GroundingAnnotation::new("v", "c", SentenceKind::Unknown, 4, 8, 8, iv, extra).is_err()
        );
    }
}
