//! Single-clip inference in the original video's frame and pixel space.

use crate::data::{resize_clip, uniform_indices, TubeJson};
use crate::error::{Error, Result};
use crate::model::GroundingModel;
use crate::tokenizer::Tokenizer;
use crate::types::{SpatioTemporalTube, TemporalInterval, VideoClip};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferOptions {
    /// Include the start/end distributions in the output.
    pub dump_distributions: bool,
}

/// Grounds `caption` in `clip`. The clip is sampled and resized the way
/// training inputs are; the tube is mapped back so that every original frame
/// takes the prediction of the sampled frame it falls behind.
pub fn infer(
    model: &GroundingModel,
    tokenizer: &Tokenizer,
    clip: &VideoClip,
    video_id: &str,
    caption: &str,
    opts: &InferOptions,
) -> Result<TubeJson> {
    let cfg = model.config();
    let total = clip.num_frames();
    let indices = uniform_indices(total, cfg.max_frames);
    let input = resize_clip(&clip.select_frames(&indices)?, cfg.resolution)?;
    let prompt = tokenizer.encode(caption)?;
    let pred = model.predict(&input, &prompt)?;

    let next = |i: usize| indices.get(i + 1).copied().unwrap_or(total);
    let iv = pred.tube.interval();
    let start = indices[iv.start()];
    let end = next(iv.end()) - 1;
    let interval = TemporalInterval::new(start, end, false)?;
    let boxes = (start..=end)
        .map(|f| {
            let sampled = indices.partition_point(|&i| i <= f) - 1;
            pred.tube.box_at(sampled).copied().ok_or_else(|| {
                Error::Shape(format!("no predicted box for sampled frame {sampled}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tube = SpatioTemporalTube::new(interval, boxes, pred.tube.score)?;
    let mut json = TubeJson::from_tube(&tube, video_id, caption, clip.width(), clip.height());
    if opts.dump_distributions {
        json.tau_s = Some(pred.distributions.tau_s.clone());
        json.tau_e = Some(pred.distributions.tau_e.clone());
    }
    Ok(json)
}
