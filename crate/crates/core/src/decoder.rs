//! Cross-modality spatio-temporal decoder.
//!
//! Each layer refines the per-frame queries with temporal self-attention
//! (same query index across frames), spatial self-attention (queries of one
//! frame), cross-attention to that frame's visual features, cross-attention to
//! the text tokens and an FFN, all pre-normalized with residuals. A per-layer
//! box head then moves the anchors, and the positional part is recomputed from
//! the new anchors.

use candle_core::Tensor;

use crate::backbone::{TextFeatures, VisualFeatureMap};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::BoxHead;
use crate::nn::{key_mask_bias, LayerNorm, Mlp, MultiHeadAttention, ParamBuilder};
use crate::query::{AnchorEncoder, QuerySet};

#[derive(Debug, Clone)]
pub struct DecoderContext {
    pub temporal: bool,
    /// `[T, d]` frame encoding folded into the positional part of the queries.
    pub temporal_pe: Option<Tensor>,
}

/// Output of one decoder layer, before the anchors move on.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    /// `[T, K, d]` after the shared output norm.
    pub hidden: Tensor,
    /// `[T, K, 4]`
    pub boxes: Tensor,
    /// `[T, K]`
    pub confidence_logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    temporal_norm: LayerNorm,
    temporal_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    visual_norm: LayerNorm,
    visual_attn: MultiHeadAttention,
    text_norm: LayerNorm,
    text_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: Mlp,
}

impl DecoderLayer {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let h = cfg.n_heads;
        Ok(Self {
            temporal_norm: LayerNorm::new(&pb.pp("temporal.norm"), d)?,
            temporal_attn: MultiHeadAttention::new(&pb.pp("temporal.attn"), d, h)?,
            self_norm: LayerNorm::new(&pb.pp("self_norm"), d)?,
            self_attn: MultiHeadAttention::new(&pb.pp("self_attn"), d, h)?,
            visual_norm: LayerNorm::new(&pb.pp("visual_norm"), d)?,
            visual_attn: MultiHeadAttention::new(&pb.pp("visual_attn"), d, h)?,
            text_norm: LayerNorm::new(&pb.pp("text_norm"), d)?,
            text_attn: MultiHeadAttention::new(&pb.pp("text_attn"), d, h)?,
            ffn_norm: LayerNorm::new(&pb.pp("ffn_norm"), d)?,
            ffn: Mlp::new(&pb.pp("ffn"), d, cfg.ffn_dim, d, 2, false)?,
        })
    }

    /// Refines the hidden queries `[T, K, d]` given their positional part.
    pub fn forward(
        &self,
        hidden: &Tensor,
        positional: &Tensor,
        fv: &VisualFeatureMap,
        fp: &TextFeatures,
        temporal: bool,
    ) -> Result<Tensor> {
        let (t, k, d) = hidden.dims3()?;
        if fv.num_frames() != t {
            return Err(Error::Shape(format!(
                "{t} frames of queries against {} frames of features",
                fv.num_frames()
            )));
        }
        let mut x = hidden.clone();

        if temporal {
            let seq = x.transpose(0, 1)?.contiguous()?; // [K, T, d]
            let pos = positional.transpose(0, 1)?.contiguous()?;
            let normed = self.temporal_norm.forward(&seq)?;
            let qk = (&normed + &pos)?;
            let out = self.temporal_attn.forward(&qk, &qk, &normed, None)?;
            x = (seq + out)?.transpose(0, 1)?.contiguous()?;
        }

        let normed = self.self_norm.forward(&x)?;
        let qk = (&normed + positional)?;
        x = (&x + self.self_attn.forward(&qk, &qk, &normed, None)?)?;

        let s = fv.num_positions();
        let visual_bias = if fv.has_padding() {
            Some(key_mask_bias(&fv.pad_mask, x.dtype(), x.device())?.reshape((t, 1, 1, s))?)
        } else {
            None
        };
        let q = (self.visual_norm.forward(&x)? + positional)?;
        x = (&x
            + self
                .visual_attn
                .forward(&q, &fv.features, &fv.features, visual_bias.as_ref())?)?;

        let l = fp.len();
        let text = fp
            .features
            .unsqueeze(0)?
            .broadcast_as((t, l, d))?
            .contiguous()?;
        let text_bias =
            key_mask_bias(&fp.pad_mask, x.dtype(), x.device())?.reshape((1, 1, 1, l))?;
        let q = (self.text_norm.forward(&x)? + positional)?;
        x = (&x + self.text_attn.forward(&q, &text, &text, Some(&text_bias))?)?;

        let out = (&x + self.ffn.forward(&self.ffn_norm.forward(&x)?)?)?;
        debug_assert_eq!(out.dims(), &[t, k, d]);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct CrossModalDecoder {
    layers: Vec<DecoderLayer>,
    box_heads: Vec<BoxHead>,
    norm: LayerNorm,
}

impl CrossModalDecoder {
    /// Layer weights live under `pb`, the per-layer box heads under `heads`.
    pub fn new(pb: &ParamBuilder, heads: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        if cfg.decoder_layers == 0 {
            return Err(Error::Config("the decoder needs at least one layer".into()));
        }
        let layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(&pb.pp(format!("layers.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        let box_heads = (0..cfg.decoder_layers)
            .map(|i| BoxHead::new(&heads.pp(format!("box.{i}")), cfg.d_model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            box_heads,
            norm: LayerNorm::new(&pb.pp("norm"), cfg.d_model)?,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Runs layer `n` on `queries`: returns that layer's predictions and the
    /// query set for the next layer (anchors replaced by the predicted boxes).
    pub fn decode_layer(
        &self,
        n: usize,
        queries: &QuerySet,
        fv: &VisualFeatureMap,
        fp: &TextFeatures,
        anchor_encoder: &AnchorEncoder,
        ctx: &DecoderContext,
    ) -> Result<(LayerPrediction, QuerySet)> {
        let layer = self
            .layers
            .get(n)
            .ok_or_else(|| Error::Config(format!("decoder has no layer {n}")))?;
        let hidden = layer.forward(&queries.content, &queries.positional, fv, fp, ctx.temporal)?;
        let normed = self.norm.forward(&hidden)?;
        let (boxes, confidence_logits) = self.box_heads[n].forward(&normed, &queries.anchors)?;
        let positional = anchor_encoder.forward(&boxes, ctx.temporal_pe.as_ref())?;
        let next = QuerySet {
            content: hidden,
            anchors: boxes.clone(),
            positional,
            selected_indices: queries.selected_indices.clone(),
        };
        Ok((
            LayerPrediction {
                hidden: normed,
                boxes,
                confidence_logits,
            },
            next,
        ))
    }

    /// All layers in turn; one prediction per layer, the last being final.
    pub fn forward(
        &self,
        queries: &QuerySet,
        fv: &VisualFeatureMap,
        fp: &TextFeatures,
        anchor_encoder: &AnchorEncoder,
        ctx: &DecoderContext,
    ) -> Result<Vec<LayerPrediction>> {
        let mut current = queries.clone();
        let mut outputs = Vec::with_capacity(self.layers.len());
        for n in 0..self.layers.len() {
            let (pred, next) = self.decode_layer(n, &current, fv, fp, anchor_encoder, ctx)?;
            outputs.push(pred);
            current = next;
        }
        Ok(outputs)
    }
}
