//! Language-guided query selection.
//!
//! Per frame, each visual position is scored by its best dot product with any
//! unmasked text token; the top `num_query` positions seed the decoder queries.
//! Their anchors come from a box head over the selected features, the content
//! part is a learnable table shared by all frames, and the positional part is a
//! sine embedding of the anchor plus the frame's temporal encoding.

use candle_core::{DType, Tensor, D};

use crate::backbone::{TextFeatures, VisualFeatureMap};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    coordinate_embedding_tensor, inverse_sigmoid, key_mask_bias, sigmoid, Mlp, ParamBuilder,
};

#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `[T, K, d]`
    pub content: Tensor,
    /// `[T, K, 4]` normalized `(cx, cy, w, h)`.
    pub anchors: Tensor,
    /// `[T, K, d]`
    pub positional: Tensor,
    /// Per frame, the `K` selected positions in descending relevance.
    pub selected_indices: Vec<Vec<usize>>,
}

impl QuerySet {
    pub fn num_frames(&self) -> usize {
        self.selected_indices.len()
    }

    pub fn num_queries(&self) -> usize {
        self.selected_indices.first().map_or(0, Vec::len)
    }
}

/// Maps anchor boxes to positional query embeddings.
#[derive(Debug, Clone)]
pub struct AnchorEncoder {
    head: Mlp,
    d_model: usize,
}

impl AnchorEncoder {
    pub fn new(pb: &ParamBuilder, d_model: usize) -> Result<Self> {
        Ok(Self {
            head: Mlp::new(pb, 2 * d_model, d_model, d_model, 2, false)?,
            d_model,
        })
    }

    /// Sine embedding before projection: `[..., 4] → [..., 2d]`, with
    /// `d/2` features per coordinate in the order `cx, cy, w, h`.
    pub fn sine_embedding(&self, anchors: &Tensor) -> Result<Tensor> {
        coordinate_embedding_tensor(anchors, self.d_model / 2)
    }

    /// `anchors: [T, K, 4]`, `temporal: [T, d]` (optional) → `[T, K, d]`.
    pub fn forward(&self, anchors: &Tensor, temporal: Option<&Tensor>) -> Result<Tensor> {
        let pos = self.head.forward(&self.sine_embedding(anchors)?)?;
        match temporal {
            Some(pe) => Ok(pos.broadcast_add(&pe.unsqueeze(1)?)?),
            None => Ok(pos),
        }
    }
}

/// Relevance of every visual position: `[T, S]`, the max over unmasked text
/// tokens of the feature dot product.
pub fn relevance_scores(fv: &VisualFeatureMap, fp: &TextFeatures) -> Result<Tensor> {
    let (t, s, d) = fv.features.dims3()?;
    let sims = fv.features.reshape((t * s, d))?.matmul(&fp.features.t()?)?;
    let bias = key_mask_bias(&fp.pad_mask, sims.dtype(), sims.device())?;
    Ok(sims
        .broadcast_add(&bias.unsqueeze(0)?)?
        .max(D::Minus1)?
        .reshape((t, s))?)
}

/// Indices of the `k` largest scores, highest first; equal scores keep the
/// lower index first.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Initial proposal for a position: its cell center with a size of two cells
/// of its level.
pub fn proposal_box(fv: &VisualFeatureMap, index: usize) -> [f64; 4] {
    let (level, row, col) = fv.locate(index);
    let (h, w) = fv.level_shapes[level];
    [
        (col as f64 + 0.5) / w as f64,
        (row as f64 + 0.5) / h as f64,
        (2.0 / w as f64).min(0.95),
        (2.0 / h as f64).min(0.95),
    ]
}

#[derive(Debug, Clone)]
pub struct QuerySelector {
    anchor_head: Mlp,
    content: Tensor,
    positional: AnchorEncoder,
    num_query: usize,
}

impl QuerySelector {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            anchor_head: Mlp::new(&pb.pp("anchor_head"), d, d, 4, 3, true)?,
            content: pb.normal("content", &[cfg.num_query, d], 1.0)?,
            positional: AnchorEncoder::new(&pb.pp("positional"), d)?,
            num_query: cfg.num_query,
        })
    }

    pub fn anchor_encoder(&self) -> &AnchorEncoder {
        &self.positional
    }

    pub fn num_query(&self) -> usize {
        self.num_query
    }

    /// Selects `num_query` positions per frame and builds their queries.
    /// `temporal` is the `[T, d]` frame encoding added to the positional part.
    pub fn select(
        &self,
        fv: &VisualFeatureMap,
        fp: &TextFeatures,
        temporal: Option<&Tensor>,
    ) -> Result<QuerySet> {
        let (t, s, d) = fv.features.dims3()?;
        let k = self.num_query;
        if k > s {
            return Err(Error::Config(format!(
                "num_query {k} exceeds the {s} visual positions per frame"
            )));
        }
        if fp.pad_mask.iter().all(|&m| m) {
            return Err(Error::Shape("every text token is padding".into()));
        }
        let scores: Vec<f64> = relevance_scores(fv, fp)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        let mut selected = Vec::with_capacity(t);
        let mut flat_index = Vec::with_capacity(t * k);
        let mut proposals = Vec::with_capacity(t * k * 4);
        for frame in 0..t {
            let mut frame_scores = scores[frame * s..(frame + 1) * s].to_vec();
            for (i, score) in frame_scores.iter_mut().enumerate() {
                if fv.pad_mask[frame * s + i] {
                    *score = f64::NEG_INFINITY;
                }
            }
            let chosen = top_k(&frame_scores, k);
            for &i in &chosen {
                flat_index.push((frame * s + i) as u32);
                proposals.extend(proposal_box(fv, i));
            }
            selected.push(chosen);
        }
        let device = fv.features.device();
        let dtype = fv.features.dtype();
        let index = Tensor::from_vec(flat_index, t * k, device)?;
        let features = fv
            .features
            .reshape((t * s, d))?
            .index_select(&index, 0)?
            .reshape((t, k, d))?;
        let proposals = Tensor::from_vec(proposals, (t, k, 4), device)?.to_dtype(dtype)?;
        let anchors =
            sigmoid(&(inverse_sigmoid(&proposals)? + self.anchor_head.forward(&features)?)?)?;
        let positional = self.positional.forward(&anchors, temporal)?;
        let content = self
            .content
            .unsqueeze(0)?
            .broadcast_as((t, k, d))?
            .contiguous()?;
        Ok(QuerySet {
            content,
            anchors,
            positional,
            selected_indices: selected,
        })
    }
}
