//! Canonical on-disk annotation and tube JSON: 1-based frame indices and
//! top-left pixel boxes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    box_corner_to_center, BoundingBox, CornerBox, GroundingAnnotation, SentenceKind,
    SpatioTemporalTube, TemporalInterval,
};

pub const ANNOTATION_SCHEMA_VERSION: u32 = 1;

/// A top-left pixel box at a 1-based frame index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalBox {
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl CanonicalBox {
    fn from_box(t: usize, b: &BoundingBox, width: usize, height: usize) -> Self {
        let c = b.to_corner_box(width, height);
        Self {
            t: t + 1,
            x: c.x,
            y: c.y,
            w: c.w,
            h: c.h,
        }
    }

    fn to_box(self, width: usize, height: usize) -> Result<BoundingBox> {
        box_corner_to_center(
            CornerBox {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
            },
            width,
            height,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalAnnotation {
    pub schema_version: u32,
    pub video_id: String,
    pub caption: String,
    #[serde(default)]
    pub sentence_kind: SentenceKind,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub t_s: usize,
    pub t_e: usize,
    pub boxes: Vec<CanonicalBox>,
}

impl CanonicalAnnotation {
    pub fn from_annotation(ann: &GroundingAnnotation) -> Self {
        let (t_s, t_e) = ann.interval().to_one_based();
        Self {
            schema_version: ANNOTATION_SCHEMA_VERSION,
            video_id: ann.video_id.clone(),
            caption: ann.caption.clone(),
            sentence_kind: ann.sentence_kind,
            frame_count: ann.frame_count,
            width: ann.width,
            height: ann.height,
            t_s,
            t_e,
            boxes: ann
                .boxes()
                .iter()
                .map(|(&t, b)| CanonicalBox::from_box(t, b, ann.width, ann.height))
                .collect(),
        }
    }

    pub fn to_annotation(&self, strict: bool) -> Result<GroundingAnnotation> {
        if self.schema_version != ANNOTATION_SCHEMA_VERSION {
            return Err(Error::parse(
                &self.video_id,
                "schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        let interval = TemporalInterval::from_one_based(self.t_s, self.t_e, strict)?;
        let mut boxes = BTreeMap::new();
        for b in &self.boxes {
            if b.t == 0 {
                return Err(Error::parse(
                    &self.video_id,
                    "boxes.t",
                    "frame indices are 1-based",
                ));
            }
            if boxes
                .insert(b.t - 1, b.to_box(self.width, self.height)?)
                .is_some()
            {
                return Err(Error::parse(
                    &self.video_id,
                    "boxes.t",
                    format!("frame {} annotated twice", b.t),
                ));
            }
        }
        GroundingAnnotation::new(
            self.video_id.clone(),
            self.caption.clone(),
            self.sentence_kind,
            self.frame_count,
            self.width,
            self.height,
            interval,
            boxes,
        )
    }
}

/// Inference output for one (video, caption) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeJson {
    pub schema_version: u32,
    pub video_id: String,
    pub caption: String,
    pub t_s: usize,
    pub t_e: usize,
    pub score: f64,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<CanonicalBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_s: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_e: Option<Vec<f64>>,
}

impl TubeJson {
    pub fn from_tube(
        tube: &SpatioTemporalTube,
        video_id: impl Into<String>,
        caption: impl Into<String>,
        width: usize,
        height: usize,
    ) -> Self {
        let (t_s, t_e) = tube.interval().to_one_based();
        Self {
            schema_version: ANNOTATION_SCHEMA_VERSION,
            video_id: video_id.into(),
            caption: caption.into(),
            t_s,
            t_e,
            score: tube.score,
            width,
            height,
            boxes: tube
                .iter()
                .map(|(t, b)| CanonicalBox::from_box(t, b, width, height))
                .collect(),
            tau_s: None,
            tau_e: None,
        }
    }

    pub fn to_tube(&self) -> Result<SpatioTemporalTube> {
        let interval = TemporalInterval::from_one_based(self.t_s, self.t_e, false)?;
        let mut boxes = self.boxes.clone();
        boxes.sort_by_key(|b| b.t);
        let frames: Vec<usize> = boxes.iter().map(|b| b.t.saturating_sub(1)).collect();
        if !frames.iter().copied().eq(interval.frames()) {
            return Err(Error::parse(
                &self.video_id,
                "boxes",
                "tube boxes must cover exactly the interval",
            ));
        }
        let boxes = boxes
            .into_iter()
            .map(|b| b.to_box(self.width, self.height))
            .collect::<Result<Vec<_>>>()?;
        SpatioTemporalTube::new(interval, boxes, self.score)
    }
}
