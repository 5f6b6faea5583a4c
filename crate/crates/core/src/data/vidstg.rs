//! VidSTG-style annotations.
//!
//! `<root>/<split>.json` holds a list of video records:
//!
//! ```json
//! {
//!   "vid": "2401075277", "frame_count": 12, "fps": 30.0, "width": 640, "height": 480,
//!   "subject/objects": [{"tid": 0, "category": "dog"}],
//!   "trajectories": [[{"tid": 0, "bbox": {"xmin": 1, "ymin": 2, "xmax": 30, "ymax": 40}}], ...],
//!   "temporal_gt": {"begin_fid": 2, "end_fid": 6},
//!   "captions": [{"target_id": 0, "description": "a dog runs on the grass"}],
//!   "questions": [{"target_id": 0, "description": "what runs on the grass?"}]
//! }
//! ```
//!
//! `trajectories[f]` lists the boxes present at frame `f` (0-based);
//! `begin_fid..=end_fid` is the annotated segment. Every caption becomes a
//! declarative sample and every question an interrogative one. Frames live in
//! `<root>/frames/<vid>/`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ManifestEntry};
use crate::config::DatasetKind;
use crate::error::{Error, Result};
use crate::types::{BoundingBox, GroundingAnnotation, SentenceKind, TemporalInterval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VidstgRecord {
    pub vid: String,
    pub frame_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "subject/objects")]
    pub subject_objects: Vec<VidstgObject>,
    pub trajectories: Vec<Vec<VidstgBox>>,
    pub temporal_gt: VidstgSegment,
    #[serde(default)]
    pub captions: Vec<VidstgSentence>,
    #[serde(default)]
    pub questions: Vec<VidstgSentence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VidstgObject {
    pub tid: u32,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VidstgBox {
    pub tid: u32,
    pub bbox: PixelCorners,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCorners {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VidstgSegment {
    pub begin_fid: usize,
    pub end_fid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VidstgSentence {
    pub target_id: u32,
    pub description: String,
}

pub(crate) fn pixel_box(c: PixelCorners, width: usize, height: usize) -> Result<BoundingBox> {
    crate::types::box_corner_to_center(
        crate::types::CornerBox {
            x: c.xmin,
            y: c.ymin,
            w: c.xmax - c.xmin,
            h: c.ymax - c.ymin,
        },
        width,
        height,
    )
}

fn corners_of(b: &BoundingBox, width: usize, height: usize) -> PixelCorners {
    let c = b.to_corner_box(width, height);
    PixelCorners {
        xmin: c.x,
        ymin: c.y,
        xmax: c.x + c.w,
        ymax: c.y + c.h,
    }
}

/// Parses the record list, naming the offending field on schema errors.
pub fn parse_records(text: &str) -> Result<Vec<VidstgRecord>> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::parse("vidstg", "<root>", e.to_string()))?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let id = v
                .get("vid")
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("record {i}"));
            serde_json::from_value(v).map_err(|e| Error::parse(id, field_of(&e), e.to_string()))
        })
        .collect()
}

/// The field named in a serde message such as ``missing field `vid` ``.
pub(crate) fn field_of(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).unwrap_or("<record>").to_string()
}

fn record_annotations(rec: &VidstgRecord, strict: bool, manifest: &mut DatasetManifest) {
    let sentences = rec
        .captions
        .iter()
        .map(|s| (s, SentenceKind::Declarative, "caption"))
        .chain(
            rec.questions
                .iter()
                .map(|s| (s, SentenceKind::Interrogative, "question")),
        );
    for (i, (sentence, kind, label)) in sentences.enumerate() {
        let id = format!("{}#{label}{i}", rec.vid);
        match sentence_annotation(rec, sentence, kind, strict) {
            Ok(annotation) => manifest.entries.push(ManifestEntry {
                video: format!("frames/{}", rec.vid),
                annotation,
            }),
            Err(e) => manifest.skip(id, e.to_string()),
        }
    }
}

fn sentence_annotation(
    rec: &VidstgRecord,
    sentence: &VidstgSentence,
    kind: SentenceKind,
    strict: bool,
) -> Result<GroundingAnnotation> {
    let seg = rec.temporal_gt;
    let interval = TemporalInterval::new(seg.begin_fid, seg.end_fid, strict)?;
    let mut boxes = BTreeMap::new();
    for t in interval.frames() {
        let found = rec
            .trajectories
            .get(t)
            .and_then(|frame| frame.iter().find(|b| b.tid == sentence.target_id))
            .ok_or_else(|| {
                Error::Data(format!(
                    "target {} has no box at frame {t}",
                    sentence.target_id
                ))
            })?;
        boxes.insert(t, pixel_box(found.bbox, rec.width, rec.height)?);
    }
    GroundingAnnotation::new(
        rec.vid.clone(),
        sentence.description.clone(),
        kind,
        rec.frame_count,
        rec.width,
        rec.height,
        interval,
        boxes,
    )
}

pub fn manifest_from_records(
    records: &[VidstgRecord],
    split: &str,
    strict: bool,
) -> DatasetManifest {
    let mut manifest = DatasetManifest::new(DatasetKind::Vidstg, split);
    for rec in records {
        record_annotations(rec, strict, &mut manifest);
    }
    manifest
}

pub fn load_vidstg(root: &Path, split: &str, strict: bool) -> Result<DatasetManifest> {
    let path = root.join(format!("{split}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = manifest_from_records(&parse_records(&text)?, split, strict);
    log::info!(
        "loaded {} VidSTG samples from {} ({} skipped)",
        manifest.len(),
        path.display(),
        manifest.skip_count()
    );
    Ok(manifest)
}

/// One record per sample: the target is object 0 and the sentence is filed
/// as a caption or a question according to its kind.
pub fn to_records(manifest: &DatasetManifest) -> Vec<VidstgRecord> {
    manifest
        .annotations()
        .map(|ann| {
            let iv = ann.interval();
            let trajectories = (0..ann.frame_count)
                .map(|t| match ann.box_at(t) {
                    Some(b) => vec![VidstgBox {
                        tid: 0,
                        bbox: corners_of(b, ann.width, ann.height),
                    }],
                    None => Vec::new(),
                })
                .collect();
            let sentence = VidstgSentence {
                target_id: 0,
                description: ann.caption.clone(),
            };
            let (captions, questions) = match ann.sentence_kind {
                SentenceKind::Interrogative => (Vec::new(), vec![sentence]),
                _ => (vec![sentence], Vec::new()),
            };
            VidstgRecord {
                vid: ann.video_id.clone(),
                frame_count: ann.frame_count,
                fps: None,
                width: ann.width,
                height: ann.height,
                subject_objects: vec![VidstgObject {
                    tid: 0,
                    category: "object".into(),
                }],
                trajectories,
                temporal_gt: VidstgSegment {
                    begin_fid: iv.start(),
                    end_fid: iv.end(),
                },
                captions,
                questions,
            }
        })
        .collect()
}

pub fn to_json(manifest: &DatasetManifest) -> Result<String> {
    Ok(serde_json::to_string_pretty(&to_records(manifest))?)
}
