//! Uniform temporal sampling, annotation remapping and spatial resizing.

use std::collections::BTreeMap;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::types::{GroundingAnnotation, TemporalInterval, VideoClip};

/// `min(total, max)` frame indices spread uniformly: `floor(i · total / n)`.
pub fn uniform_indices(total: usize, max_frames: usize) -> Vec<usize> {
    if total <= max_frames {
        return (0..total).collect();
    }
    (0..max_frames).map(|i| i * total / max_frames).collect()
}

/// Maps an annotation onto sampled frames: the interval shrinks to the
/// sampled frames inside it and each kept frame takes the box of the original
/// frame it was sampled from.
pub fn remap_annotation(
    ann: &GroundingAnnotation,
    indices: &[usize],
    strict: bool,
) -> Result<GroundingAnnotation> {
    let iv = ann.interval();
    let kept: Vec<usize> = (0..indices.len())
        .filter(|&i| iv.contains(indices[i]))
        .collect();
    let (Some(&first), Some(&last)) = (kept.first(), kept.last()) else {
        return Err(Error::InvalidInterval(format!(
            "{}: interval {}..={} holds no sampled frame",
            ann.video_id,
            iv.start(),
            iv.end()
        )));
    };
    let interval = TemporalInterval::new(first, last, strict).map_err(|_| {
        Error::InvalidInterval(format!(
            "{}: interval collapses to a single sampled frame",
            ann.video_id
        ))
    })?;
    let boxes = kept
        .iter()
        .map(|&i| {
            let b = ann
                .box_at(indices[i])
                .copied()
                .ok_or_else(|| Error::Data(format!("no box at frame {}", indices[i])))?;
            Ok((i, b))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    GroundingAnnotation::new(
        ann.video_id.clone(),
        ann.caption.clone(),
        ann.sentence_kind,
        indices.len(),
        ann.width,
        ann.height,
        interval,
        boxes,
    )
}

/// Bilinear resize so the shorter side equals `resolution`.
pub fn resize_clip(clip: &VideoClip, resolution: usize) -> Result<VideoClip> {
    let (h, w) = (clip.height(), clip.width());
    let short = h.min(w);
    if short == resolution {
        return Ok(clip.clone());
    }
    let scale = resolution as f64 / short as f64;
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let mut out = Vec::with_capacity(clip.num_frames() * nh * nw * 3);
    for t in 0..clip.num_frames() {
        let img: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, clip.frame(t).to_vec())
                .ok_or_else(|| Error::Shape("frame buffer size mismatch".into()))?;
        let resized = imageops::resize(&img, nw as u32, nh as u32, FilterType::Triangle);
        out.extend(resized.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    VideoClip::new(out, clip.num_frames(), nh, nw, clip.frame_rate)
}

/// Samples at most `max_frames` frames uniformly, resizes them and remaps the
/// annotation into the sampled index space.
pub fn sample_frames(
    clip: &VideoClip,
    ann: &GroundingAnnotation,
    max_frames: usize,
    resolution: usize,
    strict: bool,
) -> Result<(VideoClip, GroundingAnnotation)> {
    let indices = uniform_indices(clip.num_frames(), max_frames);
    let ann = remap_annotation(ann, &indices, strict)?;
    let sampled = resize_clip(&clip.select_frames(&indices)?, resolution)?;
    Ok((sampled, ann))
}
