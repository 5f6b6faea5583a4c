//! YouCook-Interactions-style frame annotations for the pointing game.
//!
//! `<root>/annotations.json` is a list of single-frame samples:
//!
//! ```json
//! {"video_id": "GLd3aX16zBg", "caption": "cut the tomato", "frame_index": 41,
//!  "frame_count": 96, "img_hw": [360, 480], "bbox": [x1, y1, x2, y2]}
//! ```
//!
//! `frame_index` is 0-based and the box is in pixel corners. Each sample
//! becomes a one-frame interval (these are never strict). Frames live in
//! `<root>/frames/<video_id>/`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vidstg::{field_of, pixel_box, PixelCorners};
use super::{DatasetManifest, ManifestEntry};
use crate::config::DatasetKind;
use crate::error::{Error, Result};
use crate::types::{GroundingAnnotation, SentenceKind, TemporalInterval};

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoucookRecord {
    pub video_id: String,
    pub caption: String,
    pub frame_index: usize,
    pub frame_count: usize,
    /// `[height, width]`
    pub img_hw: [usize; 2],
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
}

pub fn parse_records(text: &str) -> Result<Vec<YoucookRecord>> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::parse("youcook", "<root>", e.to_string()))?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let id = v
                .get("video_id")
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("record {i}"));
            serde_json::from_value(v).map_err(|e| Error::parse(id, field_of(&e), e.to_string()))
        })
        .collect()
}

fn record_annotation(rec: &YoucookRecord) -> Result<GroundingAnnotation> {
    let [height, width] = rec.img_hw;
    let [xmin, ymin, xmax, ymax] = rec.bbox;
    let b = pixel_box(
        PixelCorners {
            xmin,
            ymin,
            xmax,
            ymax,
        },
        width,
        height,
    )?;
    let interval = TemporalInterval::new(rec.frame_index, rec.frame_index, false)?;
    GroundingAnnotation::new(
        rec.video_id.clone(),
        rec.caption.clone(),
        SentenceKind::Unknown,
        rec.frame_count,
        width,
        height,
        interval,
        BTreeMap::from([(rec.frame_index, b)]),
    )
}

pub fn manifest_from_records(records: &[YoucookRecord]) -> DatasetManifest {
    let mut manifest = DatasetManifest::new(DatasetKind::Youcook, "test");
    for rec in records {
        match record_annotation(rec) {
            Ok(annotation) => manifest.entries.push(ManifestEntry {
                video: format!("frames/{}", rec.video_id),
                annotation,
            }),
            Err(e) => manifest.skip(
                format!("{}@{}", rec.video_id, rec.frame_index),
                e.to_string(),
            ),
        }
    }
    manifest
}

pub fn load_youcook_interactions(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(ANNOTATION_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = manifest_from_records(&parse_records(&text)?);
    log::info!(
        "loaded {} YouCook-Interactions samples ({} skipped)",
        manifest.len(),
        manifest.skip_count()
    );
    Ok(manifest)
}

pub fn to_records(manifest: &DatasetManifest) -> Vec<YoucookRecord> {
    manifest
        .annotations()
        .filter_map(|ann| {
            let (t, b) = ann.boxes().iter().next()?;
            let c = b.to_corner_box(ann.width, ann.height);
            Some(YoucookRecord {
                video_id: ann.video_id.clone(),
                caption: ann.caption.clone(),
                frame_index: *t,
                frame_count: ann.frame_count,
                img_hw: [ann.height, ann.width],
                bbox: [c.x, c.y, c.x + c.w, c.y + c.h],
            })
        })
        .collect()
}

pub fn to_json(manifest: &DatasetManifest) -> Result<String> {
    Ok(serde_json::to_string_pretty(&to_records(manifest))?)
}
