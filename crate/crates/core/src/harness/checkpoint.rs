//! Checkpoint directories: `checkpoint.json`, `params.safetensors`,
//! `optimizer.safetensors` and `vocab.txt`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{GroundingModel, ParamGroup};
use crate::tokenizer::{Tokenizer, UnknownPolicy, Vocabulary};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const META_FILE: &str = "checkpoint.json";
const PARAMS_FILE: &str = "params.safetensors";
const OPTIMIZER_FILE: &str = "optimizer.safetensors";
const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer_step: usize,
    /// Checksums of every group the optimizer does not touch.
    pub frozen_checksums: BTreeMap<ParamGroup, String>,
    /// Data order is drawn from `(seed, epoch)`, so these two fix the RNG.
    pub rng_seed: u64,
    pub rng_epoch: usize,
}

/// A checkpoint on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
}

pub(crate) fn frozen_checksums(model: &GroundingModel) -> Result<BTreeMap<ParamGroup, String>> {
    ParamGroup::ALL
        .into_iter()
        .filter(|g| !g.is_trainable(model.config()))
        .map(|g| Ok((g, model.group_checksum(g)?)))
        .collect()
}

impl Checkpoint {
    pub(crate) fn write(
        dir: &Path,
        meta: CheckpointMeta,
        model: &GroundingModel,
        vocab: &Vocabulary,
        optimizer: Option<&super::AdamW>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.params().save(&dir.join(PARAMS_FILE))?;
        if let Some(opt) = optimizer {
            opt.save_state(&dir.join(OPTIMIZER_FILE))?;
        }
        vocab.save(&dir.join(VOCAB_FILE))?;
        let path = dir.join(META_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    /// Reads the metadata only.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::parse(
                path.display().to_string(),
                "schema_version",
                format!("unsupported version {}", meta.schema_version),
            ));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_file(&self.dir.join(VOCAB_FILE))
    }

    /// Tokenizer for inference; words outside the training vocabulary map to
    /// the unknown token.
    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Ok(
            Tokenizer::new(self.vocabulary()?, self.meta.config.model.max_text_len)
                .with_unknown_policy(UnknownPolicy::MapToUnk),
        )
    }

    /// Rebuilds the model and restores its parameters, then checks that the
    /// frozen groups are the ones that were saved.
    pub fn load_model(&self) -> Result<GroundingModel> {
        let vocab = self.vocabulary()?;
        let cfg = &self.meta.config;
        let model = GroundingModel::new(&cfg.model, vocab.len(), cfg.seed)?;
        model.params().load(&self.dir.join(PARAMS_FILE))?;
        for (group, expected) in &self.meta.frozen_checksums {
            let actual = model.group_checksum(*group)?;
            if &actual != expected {
                return Err(Error::Data(format!(
                    "checkpoint {}: frozen group {group:?} does not match its checksum",
                    self.dir.display()
                )));
            }
        }
        Ok(model)
    }

    pub(crate) fn optimizer_path(&self) -> Option<PathBuf> {
        let p = self.dir.join(OPTIMIZER_FILE);
        p.exists().then_some(p)
    }
}
