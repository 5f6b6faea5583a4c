//! HC-STVG-style annotations.
//!
//! `<root>/v<version>/<split>.json` maps video names to one record each:
//!
//! ```json
//! {"12_qV2bpmQ7rls.mp4": {"st_frame": 3, "ed_frame": 6, "img_num": 10,
//!   "img_hw": [360, 640], "English": "the man in the hat walks to the door",
//!   "bbox": [[x, y, w, h], ...]}}
//! ```
//!
//! `st_frame..=ed_frame` is 1-based and `bbox` holds one top-left pixel box
//! per frame of it. The first release ships `train`/`test` splits, the second
//! `train`/`val` (its results are reported on `val`, so `test` is read as
//! `val`). Frames live in `<root>/v<version>/frames/<name without extension>/`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vidstg::field_of;
use super::{DatasetManifest, ManifestEntry};
use crate::config::DatasetKind;
use crate::error::{Error, Result};
use crate::types::{
    box_corner_to_center, CornerBox, GroundingAnnotation, SentenceKind, TemporalInterval,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcstvgRecord {
    pub st_frame: usize,
    pub ed_frame: usize,
    pub img_num: usize,
    /// `[height, width]`
    pub img_hw: [usize; 2],
    #[serde(rename = "English")]
    pub english: String,
    pub bbox: Vec<[f64; 4]>,
}

/// Resolves the split file name for a release.
pub fn split_name(version: u8, split: &str) -> Result<&'static str> {
    match (version, split) {
        (_, "train") => Ok("train"),
        (1, "test") => Ok("test"),
        (2, "val") | (2, "test") => Ok("val"),
        (1 | 2, other) => Err(Error::Config(format!(
            "HC-STVG v{version} has no `{other}` split"
        ))),
        (v, _) => Err(Error::Config(format!("unknown HC-STVG version {v}"))),
    }
}

pub fn parse_records(text: &str) -> Result<BTreeMap<String, HcstvgRecord>> {
    let values: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::parse("hcstvg", "<root>", e.to_string()))?;
    values
        .into_iter()
        .map(|(name, v)| {
            let rec = serde_json::from_value(v)
                .map_err(|e| Error::parse(name.clone(), field_of(&e), e.to_string()))?;
            Ok((name, rec))
        })
        .collect()
}

fn record_annotation(name: &str, rec: &HcstvgRecord, strict: bool) -> Result<GroundingAnnotation> {
    let interval = TemporalInterval::from_one_based(rec.st_frame, rec.ed_frame, strict)?;
    if rec.bbox.len() != interval.len() {
        return Err(Error::Data(format!(
            "{} boxes for a {}-frame segment",
            rec.bbox.len(),
            interval.len()
        )));
    }
    let [height, width] = rec.img_hw;
    let boxes = interval
        .frames()
        .zip(&rec.bbox)
        .map(|(t, &[x, y, w, h])| {
            Ok((
                t,
                box_corner_to_center(CornerBox { x, y, w, h }, width, height)?,
            ))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    GroundingAnnotation::new(
        name,
        rec.english.clone(),
        SentenceKind::Unknown,
        rec.img_num,
        width,
        height,
        interval,
        boxes,
    )
}

pub fn manifest_from_records(
    records: &BTreeMap<String, HcstvgRecord>,
    version: u8,
    split: &str,
    strict: bool,
) -> DatasetManifest {
    let mut manifest = DatasetManifest::new(DatasetKind::Hcstvg, split);
    for (name, rec) in records {
        match record_annotation(name, rec, strict) {
            Ok(annotation) => {
                let stem = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s);
                manifest.entries.push(ManifestEntry {
                    video: format!("v{version}/frames/{stem}"),
                    annotation,
                });
            }
            Err(e) => manifest.skip(name.clone(), e.to_string()),
        }
    }
    manifest
}

pub fn load_hcstvg(root: &Path, version: u8, split: &str, strict: bool) -> Result<DatasetManifest> {
    let file = split_name(version, split)?;
    let path = root
        .join(format!("v{version}"))
        .join(format!("{file}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = manifest_from_records(&parse_records(&text)?, version, file, strict);
    log::info!(
        "loaded {} HC-STVG samples from {} ({} skipped)",
        manifest.len(),
        path.display(),
        manifest.skip_count()
    );
    Ok(manifest)
}

pub fn to_records(manifest: &DatasetManifest) -> BTreeMap<String, HcstvgRecord> {
    manifest
        .annotations()
        .map(|ann| {
            let (st, ed) = ann.interval().to_one_based();
            let bbox = ann
                .boxes()
                .values()
                .map(|b| {
                    let c = b.to_corner_box(ann.width, ann.height);
                    [c.x, c.y, c.w, c.h]
                })
                .collect();
            (
                ann.video_id.clone(),
                HcstvgRecord {
                    st_frame: st,
                    ed_frame: ed,
                    img_num: ann.frame_count,
                    img_hw: [ann.height, ann.width],
                    english: ann.caption.clone(),
                    bbox,
                },
            )
        })
        .collect()
}

pub fn to_json(manifest: &DatasetManifest) -> Result<String> {
    Ok(serde_json::to_string_pretty(&to_records(manifest))?)
}
