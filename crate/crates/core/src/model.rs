//! The full grounding model: frozen backbones, encoder, query selection,
//! decoder and heads.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{TextBackbone, TextFeatures, VisionBackbone, VisualFeatureMap};
use crate::config::ModelConfig;
use crate::decoder::{CrossModalDecoder, DecoderContext};
use crate::encoder::{CrossModalEncoder, EncoderContext};
use crate::error::{Error, Result};
use crate::heads::{
    extract_interval, extract_tube, FramePredictions, TemporalDistributions, TemporalHead,
};
use crate::losses::LayerOutputs;
use crate::nn::{temporal_encoding_tensor, ParamStore};
use crate::query::{relevance_scores, QuerySelector, QuerySet};
use crate::types::{SpatioTemporalTube, TextPrompt, VideoClip};

/// Parameter groups, named after their role; training toggles act per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisionBackbone,
    TextBackbone,
    EncoderTemporal,
    EncoderSpatial,
    DecoderTemporal,
    DecoderSpatial,
    Query,
    Heads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::VisionBackbone,
        ParamGroup::TextBackbone,
        ParamGroup::EncoderTemporal,
        ParamGroup::EncoderSpatial,
        ParamGroup::DecoderTemporal,
        ParamGroup::DecoderSpatial,
        ParamGroup::Query,
        ParamGroup::Heads,
    ];

    pub fn of(name: &str) -> Result<Self> {
        let temporal = name.contains(".temporal.");
        let group = match name.split('.').next() {
            Some("backbone") if name.starts_with("backbone.vision.") => ParamGroup::VisionBackbone,
            Some("backbone") if name.starts_with("backbone.text.") => ParamGroup::TextBackbone,
            Some("encoder") if temporal => ParamGroup::EncoderTemporal,
            Some("encoder") => ParamGroup::EncoderSpatial,
            Some("decoder") if temporal => ParamGroup::DecoderTemporal,
            Some("decoder") => ParamGroup::DecoderSpatial,
            Some("query") => ParamGroup::Query,
            Some("heads") => ParamGroup::Heads,
            _ => {
                return Err(Error::Config(format!(
                    "parameter `{name}` belongs to no group"
                )))
            }
        };
        Ok(group)
    }

    /// Whether the optimizer updates this group under `cfg`.
    pub fn is_trainable(self, cfg: &ModelConfig) -> bool {
        let t = &cfg.toggles;
        match self {
            ParamGroup::VisionBackbone | ParamGroup::TextBackbone => !cfg.freeze_backbone,
            ParamGroup::EncoderTemporal => t.encoder_temporal,
            ParamGroup::EncoderSpatial => t.finetune_encoder_spatial,
            ParamGroup::DecoderTemporal => t.decoder_temporal,
            ParamGroup::DecoderSpatial => t.finetune_decoder_spatial,
            ParamGroup::Query | ParamGroup::Heads => true,
        }
    }
}

/// Everything the heads produce for one clip.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// One entry per decoder layer; the last is the final prediction.
    pub layers: Vec<LayerOutputs>,
    pub selected_indices: Vec<Vec<usize>>,
    /// Relevance of every visual position to the caption `[T, S]`, as used by
    /// query selection.
    pub relevance: Tensor,
    pub level_shapes: Vec<(usize, usize)>,
}

impl ModelOutput {
    pub fn last(&self) -> &LayerOutputs {
        self.layers.last().expect("decoder has at least one layer")
    }
}

/// Inference result: the tube and the quantities it was read from.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub tube: SpatioTemporalTube,
    pub distributions: TemporalDistributions,
    pub frames: FramePredictions,
}

#[derive(Debug, Clone)]
pub struct GroundingModel {
    cfg: ModelConfig,
    store: ParamStore,
    vision: VisionBackbone,
    text: TextBackbone,
    encoder: CrossModalEncoder,
    selector: QuerySelector,
    decoder: CrossModalDecoder,
    temporal_head: TemporalHead,
}

impl GroundingModel {
    pub fn new(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.dtype(), Device::Cpu);
        let pb = store.builder(seed);
        Ok(Self {
            vision: VisionBackbone::new(&pb.pp("backbone.vision"), cfg)?,
            text: TextBackbone::new(&pb.pp("backbone.text"), cfg, vocab_size)?,
            encoder: CrossModalEncoder::new(&pb.pp("encoder"), cfg)?,
            selector: QuerySelector::new(&pb.pp("query"), cfg)?,
            decoder: CrossModalDecoder::new(&pb.pp("decoder"), &pb.pp("heads"), cfg)?,
            temporal_head: TemporalHead::new(&pb.pp("heads.temporal"), cfg.d_model)?,
            cfg: cfg.clone(),
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn vocab_size(&self) -> usize {
        self.text.vocab_size()
    }

    pub fn encoder(&self) -> &CrossModalEncoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &CrossModalDecoder {
        &self.decoder
    }

    pub fn selector(&self) -> &QuerySelector {
        &self.selector
    }

    /// SHA-256 over the parameters of one group.
    pub fn group_checksum(&self, group: ParamGroup) -> Result<String> {
        self.store
            .checksum(|name| ParamGroup::of(name).map(|g| g == group).unwrap_or(false))
    }

    /// Backbone features. Frozen backbones are cut from the autograd graph.
    pub fn encode_inputs(
        &self,
        clip: &VideoClip,
        prompt: &TextPrompt,
    ) -> Result<(VisualFeatureMap, TextFeatures)> {
        if clip.num_frames() > self.cfg.max_frames {
            return Err(Error::Config(format!(
                "{} frames exceed max_frames {}",
                clip.num_frames(),
                self.cfg.max_frames
            )));
        }
        let fv = self.vision.forward(clip)?;
        let fp = self.text.forward(prompt)?;
        if self.cfg.freeze_backbone {
            let fv = fv.with_features(fv.features.detach())?;
            let fp = fp.with_features(fp.features.detach());
            Ok((fv, fp))
        } else {
            Ok((fv, fp))
        }
    }

    fn temporal_pe(&self, num_frames: usize) -> Result<Option<Tensor>> {
        if !self.cfg.toggles.temporal_pe {
            return Ok(None);
        }
        Ok(Some(temporal_encoding_tensor(
            num_frames,
            self.cfg.d_model,
            self.store.dtype(),
            self.store.device(),
        )?))
    }

    /// Encoder outputs and initial queries.
    pub fn encode_and_select(
        &self,
        fv: &VisualFeatureMap,
        fp: &TextFeatures,
    ) -> Result<(VisualFeatureMap, TextFeatures, QuerySet)> {
        let pe = self.temporal_pe(fv.num_frames())?;
        let ctx = EncoderContext {
            temporal: self.cfg.toggles.encoder_temporal,
            temporal_pe: pe.clone(),
        };
        let (fv, fp) = self.encoder.forward(fv, fp, &ctx)?;
        let queries = self.selector.select(&fv, &fp, pe.as_ref())?;
        Ok((fv, fp, queries))
    }

    /// Everything after the backbones.
    pub fn forward_features(
        &self,
        fv: &VisualFeatureMap,
        fp: &TextFeatures,
    ) -> Result<ModelOutput> {
        let (fv, fp, queries) = self.encode_and_select(fv, fp)?;
        let ctx = DecoderContext {
            temporal: self.cfg.toggles.decoder_temporal,
            temporal_pe: self.temporal_pe(fv.num_frames())?,
        };
        let preds =
            self.decoder
                .forward(&queries, &fv, &fp, self.selector.anchor_encoder(), &ctx)?;
        let layers = preds
            .into_iter()
            .map(|p| {
                Ok(LayerOutputs {
                    temporal: self.temporal_head.forward(&p.hidden)?,
                    boxes: p.boxes,
                    confidence_logits: p.confidence_logits,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelOutput {
            layers,
            selected_indices: queries.selected_indices,
            relevance: relevance_scores(&fv, &fp)?,
            level_shapes: fv.level_shapes.clone(),
        })
    }

    pub fn forward(&self, clip: &VideoClip, prompt: &TextPrompt) -> Result<ModelOutput> {
        let (fv, fp) = self.encode_inputs(clip, prompt)?;
        self.forward_features(&fv, &fp)
    }

    /// Reads a tube off the final decoder layer.
    pub fn predict_from_output(&self, output: &ModelOutput) -> Result<Prediction> {
        let last = output.last();
        let distributions = last.distributions()?;
        let frames = FramePredictions::from_tensors(&last.boxes, &last.confidence_logits)?;
        let (interval, score) = extract_interval(&distributions, self.cfg.strict_interval)?;
        let tube = extract_tube(&frames, interval, score.clamp(0.0, 1.0))?;
        Ok(Prediction {
            tube,
            distributions,
            frames,
        })
    }

    pub fn predict(&self, clip: &VideoClip, prompt: &TextPrompt) -> Result<Prediction> {
        let output = self.forward(clip, prompt)?;
        self.predict_from_output(&output)
    }
}
