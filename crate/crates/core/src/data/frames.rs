//! Clips stored as directories of PNG frames, read in file-name order.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::types::VideoClip;

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no PNG frames in {}", dir.display())));
    }
    Ok(paths)
}

pub fn load_clip(dir: &Path, frame_rate: f64) -> Result<VideoClip> {
    let paths = frame_paths(dir)?;
    let mut size = None;
    let mut pixels = Vec::new();
    for p in &paths {
        let img = image::open(p)?.to_rgb8();
        let dims = img.dimensions();
        if *size.get_or_insert(dims) != dims {
            return Err(Error::Data(format!(
                "{} is {}x{}, earlier frames differ",
                p.display(),
                dims.0,
                dims.1
            )));
        }
        pixels.extend(img.into_raw().into_iter().map(|v| v as f32 / 255.0));
    }
    let (w, h) = size.expect("at least one frame");
    VideoClip::new(pixels, paths.len(), h as usize, w as usize, frame_rate)
}

pub fn to_image(clip: &VideoClip, t: usize) -> RgbImage {
    let raw = clip
        .frame(t)
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(clip.width() as u32, clip.height() as u32, raw)
        .expect("frame buffer matches its dimensions")
}

pub fn save_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..clip.num_frames() {
        to_image(clip, t).save(dir.join(frame_file_name(t)))?;
    }
    Ok(())
}
