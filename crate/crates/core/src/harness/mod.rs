//! Operational surface: training, checkpoints, evaluation, inference,
//! overlays and the ablation ladder.

mod ablation;
mod checkpoint;
mod eval;
mod infer;
mod optim;
mod train;
mod visualize;

use std::path::Path;

use crate::config::ModelConfig;
use crate::data::{frames, sample_frames, video_dir, DatasetManifest};
use crate::error::{Error, Result};
use crate::types::{GroundingAnnotation, VideoClip};

pub use ablation::{ablation_matrix, AblationRow};
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA_VERSION};
pub use eval::{
    evaluate, evaluate_manifest, EvalSettings, EvaluationReport, Grounder, Grounding,
    ModelGrounder, OracleGrounder, SampleRecord,
};
pub use infer::{infer, InferOptions};
pub use optim::{AdamW, StepStats};
pub use train::{train, StepRecord, TrainOutcome, Trainer};
pub use visualize::{box_pixel_extent, draw_box, visualize, OVERLAY_COLOR};

/// A clip ready for the model together with its remapped annotation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub clip: VideoClip,
    pub annotation: GroundingAnnotation,
}

impl Sample {
    /// Samples and resizes `clip` to the model's input size.
    pub fn prepare(clip: &VideoClip, ann: &GroundingAnnotation, cfg: &ModelConfig) -> Result<Self> {
        if clip.num_frames() != ann.frame_count {
            return Err(Error::Data(format!(
                "{}: clip has {} frames, annotation expects {}",
                ann.video_id,
                clip.num_frames(),
                ann.frame_count
            )));
        }
        // A single-frame interval can only survive remapping non-strictly.
        let strict = cfg.strict_interval && ann.interval().len() > 1;
        let (clip, annotation) = sample_frames(clip, ann, cfg.max_frames, cfg.resolution, strict)?;
        Ok(Self { clip, annotation })
    }
}

/// Reads every entry's frames from `root` and prepares it for `cfg`.
pub fn load_samples(
    manifest: &DatasetManifest,
    root: &Path,
    cfg: &ModelConfig,
) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let clip = frames::load_clip(&video_dir(root, e), crate::data::synthetic::FRAME_RATE)?;
            Sample::prepare(&clip, &e.annotation, cfg)
        })
        .collect()
}
