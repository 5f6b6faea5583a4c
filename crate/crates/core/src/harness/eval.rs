//! Evaluation driver: ground every sample, score it, aggregate.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_samples, Sample};
use crate::config::DatasetKind;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::heads::{FramePredictions, TemporalDistributions};
use crate::metrics::{aggregate, pointing_game, EvalReport, SampleResult, DEFAULT_THRESHOLDS};
use crate::model::GroundingModel;
use crate::tokenizer::Tokenizer;
use crate::types::{BoundingBox, GroundingAnnotation, SentenceKind, SpatioTemporalTube, VideoClip};

/// A predicted tube plus, when available, the per-frame candidates it was
/// read from.
#[derive(Debug, Clone)]
pub struct Grounding {
    pub tube: SpatioTemporalTube,
    pub frames: Option<FramePredictions>,
    pub distributions: Option<TemporalDistributions>,
}

/// Anything that turns a clip and a caption into a tube.
pub trait Grounder {
    fn ground(&self, clip: &VideoClip, caption: &str) -> Result<Grounding>;
}

pub struct ModelGrounder<'a> {
    pub model: &'a GroundingModel,
    pub tokenizer: &'a Tokenizer,
}

impl Grounder for ModelGrounder<'_> {
    fn ground(&self, clip: &VideoClip, caption: &str) -> Result<Grounding> {
        let prompt = self.tokenizer.encode(caption)?;
        let p = self.model.predict(clip, &prompt)?;
        Ok(Grounding {
            tube: p.tube,
            frames: Some(p.frames),
            distributions: Some(p.distributions),
        })
    }
}

/// Answers with the ground truth of whichever annotation has the caption.
/// Exercises the evaluation pipeline without a model. A caption shared by
/// different annotations is an error rather than a guess.
pub struct OracleGrounder {
    by_caption: HashMap<String, Vec<GroundingAnnotation>>,
}

impl OracleGrounder {
    pub fn new<'a>(annotations: impl IntoIterator<Item = &'a GroundingAnnotation>) -> Self {
        let mut by_caption: HashMap<String, Vec<GroundingAnnotation>> = HashMap::new();
        for a in annotations {
            let known = by_caption.entry(a.caption.clone()).or_default();
            if !known.contains(a) {
                known.push(a.clone());
            }
        }
        Self { by_caption }
    }
}

impl Grounder for OracleGrounder {
    fn ground(&self, _clip: &VideoClip, caption: &str) -> Result<Grounding> {
        let ann = match self.by_caption.get(caption).map(Vec::as_slice) {
            Some([ann]) => ann,
            Some([]) | None => {
                return Err(Error::Data(format!("oracle has no annotation for `{caption}`")))
            }
            Some(_) => {
                return Err(Error::Data(format!(
                    "oracle has several annotations for `{caption}`"
                )))
            }
        };
        Ok(Grounding {
            tube: SpatioTemporalTube::from_annotation(ann),
            frames: None,
            distributions: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub thresholds: Vec<f64>,
    /// Score the pointing game on the first annotated frame.
    pub pointing: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            pointing: false,
        }
    }
}

impl EvalSettings {
    pub fn for_dataset(kind: DatasetKind) -> Self {
        Self {
            pointing: kind == DatasetKind::Youcook,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub video_id: String,
    pub caption: String,
    #[serde(flatten)]
    pub result: SampleResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub overall: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub declarative: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub interrogative: Option<EvalReport>,
    pub per_sample: Vec<SampleRecord>,
}

/// The box a grounding points with at `frame`: the best candidate when the
/// per-frame predictions are known, else the tube's own box.
fn pointing_box(g: &Grounding, frame: usize) -> Option<BoundingBox> {
    if let Some(f) = &g.frames {
        if frame < f.num_frames() {
            let [cx, cy, w, h] = f.box_at(frame, f.best_query(frame));
            return Some(BoundingBox { cx, cy, w, h });
        }
    }
    g.tube.box_at(frame).copied()
}

pub fn evaluate(
    grounder: &dyn Grounder,
    samples: &[Sample],
    settings: &EvalSettings,
) -> Result<EvaluationReport> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let ann = &s.annotation;
        let g = grounder.ground(&s.clip, &ann.caption)?;
        let mut result = SampleResult::evaluate(&g.tube, ann);
        if settings.pointing {
            let frame = ann.interval().start();
            let gt = ann.box_at(frame).expect("annotation covers its interval");
            result.pointing_hit =
                Some(pointing_box(&g, frame).is_some_and(|b| pointing_game(&b, gt)));
        }
        records.push(SampleRecord {
            video_id: ann.video_id.clone(),
            caption: ann.caption.clone(),
            result,
        });
    }
    let part = |kind: SentenceKind| -> Result<Option<EvalReport>> {
        let subset: Vec<SampleResult> = samples
            .iter()
            .zip(&records)
            .filter(|(s, _)| s.annotation.sentence_kind == kind)
            .map(|(_, r)| r.result)
            .collect();
        if subset.is_empty() {
            Ok(None)
        } else {
            aggregate(&subset, &settings.thresholds).map(Some)
        }
    };
    let all: Vec<SampleResult> = records.iter().map(|r| r.result).collect();
    Ok(EvaluationReport {
        overall: aggregate(&all, &settings.thresholds)?,
        declarative: part(SentenceKind::Declarative)?,
        interrogative: part(SentenceKind::Interrogative)?,
        per_sample: records,
    })
}

/// Loads the manifest's frames from `root` and evaluates the model on them.
pub fn evaluate_manifest(
    model: &GroundingModel,
    tokenizer: &Tokenizer,
    manifest: &DatasetManifest,
    root: &Path,
    settings: &EvalSettings,
) -> Result<EvaluationReport> {
    if manifest.is_empty() {
        return Err(Error::Data("manifest holds no samples".into()));
    }
    let samples = load_samples(manifest, root, model.config())?;
    evaluate(&ModelGrounder { model, tokenizer }, &samples, settings)
}
