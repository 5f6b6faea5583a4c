//! The cumulative ablation ladder: start from the frozen detector and switch
//! on one module group per row.

use crate::config::{RunConfig, Toggles};
use crate::model::ParamGroup;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub config: RunConfig,
    /// The group this row adds over the previous one.
    pub added: Option<ParamGroup>,
}

impl AblationRow {
    /// Groups the optimizer updates in this row.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| g.is_trainable(&self.config.model))
            .collect()
    }
}

/// Five runnable configs. Backbones stay frozen and the temporal positional
/// encoding keeps the base setting in every row.
pub fn ablation_matrix(base: &RunConfig) -> Vec<AblationRow> {
    let steps: [(&'static str, Option<ParamGroup>, fn(&mut Toggles)); 5] = [
        ("naive (frozen detector)", None, |_| {}),
        (
            "+ decoder temporal aggregation",
            Some(ParamGroup::DecoderTemporal),
            |t| t.decoder_temporal = true,
        ),
        (
            "+ encoder temporal aggregation",
            Some(ParamGroup::EncoderTemporal),
            |t| t.encoder_temporal = true,
        ),
        (
            "+ finetuned decoder spatial modules",
            Some(ParamGroup::DecoderSpatial),
            |t| t.finetune_decoder_spatial = true,
        ),
        (
            "+ finetuned encoder spatial modules",
            Some(ParamGroup::EncoderSpatial),
            |t| t.finetune_encoder_spatial = true,
        ),
    ];
    let mut toggles = Toggles {
        decoder_temporal: false,
        encoder_temporal: false,
        temporal_pe: base.model.toggles.temporal_pe,
        finetune_decoder_spatial: false,
        finetune_encoder_spatial: false,
    };
    steps
        .into_iter()
        .map(|(name, added, apply)| {
            apply(&mut toggles);
            let mut config = base.clone();
            config.model.toggles = toggles;
            config.model.freeze_backbone = true;
            AblationRow {
                name,
                config,
                added,
            }
        })
        .collect()
}
