//! Box overlays: one PNG per tube frame.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::data::frames::{frame_file_name, to_image};
use crate::error::{Error, Result};
use crate::types::{BoundingBox, SpatioTemporalTube, VideoClip};

pub const OVERLAY_COLOR: Rgb<u8> = Rgb([255, 0, 255]);

/// Inclusive pixel rectangle `(x1, y1, x2, y2)` covered by a box on a
/// `width × height` image.
pub fn box_pixel_extent(b: &BoundingBox, width: usize, height: usize) -> (u32, u32, u32, u32) {
    let [x1, y1, x2, y2] = b.corners();
    let lo = |v: f64, n: usize| (v * n as f64).round().clamp(0.0, (n - 1) as f64);
    // the far edge sits between pixels; the last covered pixel is one before it
    let hi = |v: f64, n: usize, lo: f64| ((v * n as f64).round() - 1.0).clamp(lo, (n - 1) as f64);
    let (lx, ly) = (lo(x1, width), lo(y1, height));
    (
        lx as u32,
        ly as u32,
        hi(x2, width, lx) as u32,
        hi(y2, height, ly) as u32,
    )
}

/// Draws a one-pixel outline of `b`.
pub fn draw_box(img: &mut RgbImage, b: &BoundingBox) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (x1, y1, x2, y2) = box_pixel_extent(b, w, h);
    for x in x1..=x2 {
        img.put_pixel(x, y1, OVERLAY_COLOR);
        img.put_pixel(x, y2, OVERLAY_COLOR);
    }
    for y in y1..=y2 {
        img.put_pixel(x1, y, OVERLAY_COLOR);
        img.put_pixel(x2, y, OVERLAY_COLOR);
    }
}

/// Writes `frame_XXXXX.png` for every frame of the tube, with its box drawn.
pub fn visualize(
    tube: &SpatioTemporalTube,
    clip: &VideoClip,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let iv = tube.interval();
    if tube.boxes().is_empty() {
        return Err(Error::InvalidInterval("tube has no frames".into()));
    }
    if iv.end() >= clip.num_frames() {
        return Err(Error::InvalidInterval(format!(
            "tube ends at frame {} but the clip has {} frames",
            iv.end(),
            clip.num_frames()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    tube.iter()
        .map(|(t, b)| {
            let mut img = to_image(clip, t);
            draw_box(&mut img, b);
            let path = out_dir.join(frame_file_name(t));
            img.save(&path)?;
            Ok(path)
        })
        .collect()
}
