//! Cross-modality spatio-temporal encoder.
//!
//! One layer: temporal self-attention across frames at each spatial position,
//! then deformable attention within each frame (vision); self-attention over
//! tokens (text); then a joint visual-textual score matrix drives an
//! image-to-text and a text-to-image cross-attention. Each attention block is
//! pre-normalized with a residual connection; the fusion step adds its FFN
//! output to the intermediate features directly.

use candle_core::{Tensor, D};

use crate::backbone::{TextFeatures, VisualFeatureMap};
use crate::config::ModelConfig;
use crate::deformable::DeformableAttention;
use crate::error::{Error, Result};
use crate::nn::{key_mask_bias, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder};

/// Per-forward settings shared by all encoder layers.
#[derive(Debug, Clone)]
pub struct EncoderContext {
    pub temporal: bool,
    /// `[T, d]` added to queries/keys of the temporal attention.
    pub temporal_pe: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    temporal_norm: LayerNorm,
    temporal_attn: MultiHeadAttention,
    spatial_norm: LayerNorm,
    deform: DeformableAttention,
    text_norm: LayerNorm,
    text_attn: MultiHeadAttention,
    proj_q_visual: Linear,
    proj_q_text: Linear,
    proj_visual: Linear,
    proj_text: Linear,
    ffn_visual: Mlp,
    ffn_text: Mlp,
    n_heads: usize,
}

impl EncoderLayer {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let tpb = pb.pp("temporal");
        let spb = pb.pp("spatial");
        let xpb = pb.pp("text");
        let fpb = pb.pp("fusion");
        Ok(Self {
            temporal_norm: LayerNorm::new(&tpb.pp("norm"), d)?,
            temporal_attn: MultiHeadAttention::new(&tpb.pp("attn"), d, cfg.n_heads)?,
            spatial_norm: LayerNorm::new(&spb.pp("norm"), d)?,
            deform: DeformableAttention::new(
                &spb.pp("deform"),
                d,
                cfg.n_heads,
                cfg.n_levels,
                cfg.n_points,
            )?,
            text_norm: LayerNorm::new(&xpb.pp("norm"), d)?,
            text_attn: MultiHeadAttention::new(&xpb.pp("attn"), d, cfg.n_heads)?,
            proj_q_visual: Linear::new(&fpb.pp("proj_q_visual"), d, d)?,
            proj_q_text: Linear::new(&fpb.pp("proj_q_text"), d, d)?,
            proj_visual: Linear::new(&fpb.pp("proj_visual"), d, d)?,
            proj_text: Linear::new(&fpb.pp("proj_text"), d, d)?,
            ffn_visual: Mlp::new(&fpb.pp("ffn_visual"), d, cfg.ffn_dim, d, 2, false)?,
            ffn_text: Mlp::new(&fpb.pp("ffn_text"), d, cfg.ffn_dim, d, 2, false)?,
            n_heads: cfg.n_heads,
        })
    }

    /// Temporal self-attention (when enabled) followed by in-frame deformable
    /// attention.
    pub fn temporal_then_spatial(
        &self,
        fv: &VisualFeatureMap,
        ctx: &EncoderContext,
    ) -> Result<VisualFeatureMap> {
        let mut x = fv.features.clone();
        if ctx.temporal {
            x = self.temporal_attention(&x, ctx.temporal_pe.as_ref(), &fv.pad_mask)?;
        }
        let (_, s, _) = x.dims3()?;
        let refs: Vec<f64> = fv.reference_points().into_iter().flatten().collect();
        let refs = Tensor::from_vec(refs, (s, 2), x.device())?.to_dtype(x.dtype())?;
        let normed = self.spatial_norm.forward(&x)?;
        let value = fv.with_features(normed.clone())?;
        let x = (&x + self.deform.forward(&normed, &refs, &value)?)?;
        fv.with_features(x)
    }

    /// Self-attention across frames at each fixed spatial index.
    fn temporal_attention(
        &self,
        x: &Tensor,
        pe: Option<&Tensor>,
        pad_mask: &[bool],
    ) -> Result<Tensor> {
        let (t, s, _) = x.dims3()?;
        let seq = x.transpose(0, 1)?.contiguous()?; // [S, T, d]
        let normed = self.temporal_norm.forward(&seq)?;
        let qk = match pe {
            Some(pe) => normed.broadcast_add(&pe.unsqueeze(0)?)?,
            None => normed.clone(),
        };
        let bias = if pad_mask.iter().any(|&m| m) {
            // key mask per spatial position: frame t is ignored at index i
            let mut m = vec![false; s * t];
            for ti in 0..t {
                for si in 0..s {
                    m[si * t + ti] = pad_mask[ti * s + si];
                }
            }
            Some(key_mask_bias(&m, x.dtype(), x.device())?.reshape((s, 1, 1, t))?)
        } else {
            None
        };
        let out = self
            .temporal_attn
            .forward(&qk, &qk, &normed, bias.as_ref())?;
        Ok((seq + out)?.transpose(0, 1)?.contiguous()?)
    }

    pub fn text_self_attention(&self, fp: &TextFeatures) -> Result<TextFeatures> {
        let x = fp.features.unsqueeze(0)?;
        let normed = self.text_norm.forward(&x)?;
        let bias = key_mask_bias(&fp.pad_mask, x.dtype(), x.device())?;
        let out = self
            .text_attn
            .forward(&normed, &normed, &normed, Some(&bias))?;
        Ok(fp.with_features((x + out)?.squeeze(0)?))
    }

    fn heads(&self, x: &Tensor) -> Result<Tensor> {
        // [N, d] -> [H, N, dk]
        let (n, d) = x.dims2()?;
        Ok(x.reshape((n, self.n_heads, d / self.n_heads))?
            .transpose(0, 1)?
            .contiguous()?)
    }

    /// Joint visual-textual scores `[H, T, S, L]`: per head, the scaled dot
    /// product of projected visual and text features. Unmasked; the fusion
    /// step applies the key masks for each direction.
    pub fn joint_attention(&self, fv: &VisualFeatureMap, fp: &TextFeatures) -> Result<Tensor> {
        let (t, s, d) = fv.features.dims3()?;
        let l = fp.len();
        let qv = self.heads(
            &self
                .proj_q_visual
                .forward(&fv.features.reshape((t * s, d))?)?,
        )?;
        let qp = self.heads(&self.proj_q_text.forward(&fp.features)?)?;
        let dk = (d / self.n_heads) as f64;
        let scores = (qv.matmul(&qp.t()?)? / dk.sqrt())?;
        Ok(scores.reshape((self.n_heads, t, s, l))?)
    }

    /// Image-to-text and text-to-image cross-attention driven by the joint
    /// scores: visual positions take a softmax over tokens of projected text
    /// features, tokens take a softmax over all `T·S` visual positions of
    /// projected visual features. Each result passes its FFN and is added to
    /// the input.
    pub fn bidirectional_fusion(
        &self,
        joint: &Tensor,
        fv: &VisualFeatureMap,
        fp: &TextFeatures,
    ) -> Result<(VisualFeatureMap, TextFeatures)> {
        if fp.pad_mask.iter().all(|&m| m) {
            return Err(Error::Shape("every text token is padding".into()));
        }
        let (t, s, d) = fv.features.dims3()?;
        let l = fp.len();
        let h = self.n_heads;
        let flat_visual = fv.features.reshape((t * s, d))?;
        let scores = joint.reshape((h, t * s, l))?;

        // padded tokens are masked as keys only; as queries their rows stay
        // finite, since an all -inf row has no softmax
        let text_bias = key_mask_bias(&fp.pad_mask, scores.dtype(), scores.device())?;
        let to_text = candle_nn::ops::softmax(
            &scores.broadcast_add(&text_bias.reshape((1, 1, l))?)?,
            D::Minus1,
        )?;
        let text_values = self.heads(&self.proj_text.forward(&fp.features)?)?;
        let visual_update = to_text
            .matmul(&text_values)?
            .transpose(0, 1)?
            .reshape((t, s, d))?;
        let new_visual = (&fv.features + self.ffn_visual.forward(&visual_update)?)?;

        let mut to_visual = scores.transpose(1, 2)?.contiguous()?; // [H, L, TS]
        if fv.has_padding() {
            let bias = key_mask_bias(&fv.pad_mask, to_visual.dtype(), to_visual.device())?;
            to_visual = to_visual.broadcast_add(&bias.reshape((1, 1, t * s))?)?;
        }
        let to_visual = candle_nn::ops::softmax(&to_visual, D::Minus1)?;
        let visual_values = self.heads(&self.proj_visual.forward(&flat_visual)?)?;
        let text_update = to_visual
            .matmul(&visual_values)?
            .transpose(0, 1)?
            .reshape((l, d))?;
        let new_text = (&fp.features + self.ffn_text.forward(&text_update)?)?;

        Ok((fv.with_features(new_visual)?, fp.with_features(new_text)))
    }

    pub fn forward(
        &self,
        fv: &VisualFeatureMap,
        fp: &TextFeatures,
        ctx: &EncoderContext,
    ) -> Result<(VisualFeatureMap, TextFeatures)> {
        let fv = self.temporal_then_spatial(fv, ctx)?;
        let fp = self.text_self_attention(fp)?;
        let joint = self.joint_attention(&fv, &fp)?;
        self.bidirectional_fusion(&joint, &fv, &fp)
    }
}

#[derive(Debug, Clone)]
pub struct CrossModalEncoder {
    layers: Vec<EncoderLayer>,
}

impl CrossModalEncoder {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(&pb.pp(format!("layers.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    /// Applies every layer in turn; with no layers the inputs come back as-is.
    pub fn forward(
        &self,
        fv: &VisualFeatureMap,
        fp: &TextFeatures,
        ctx: &EncoderContext,
    ) -> Result<(VisualFeatureMap, TextFeatures)> {
        let mut state = (fv.clone(), fp.clone());
        for layer in &self.layers {
            state = layer.forward(&state.0, &state.1, ctx)?;
        }
        Ok(state)
    }
}
