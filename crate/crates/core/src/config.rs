//! Model and run configuration, serializable as TOML.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// How the single supervised query of a frame is picked among the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryAssignment {
    /// The query with the highest confidence score. Self-reinforcing: the
    /// query that starts out most confident stays supervised even when its
    /// anchor sits far from the target.
    HighestConfidence,
    /// The query with the lowest box matching cost (L1 + GIoU).
    #[default]
    MinCost,
}

/// Architecture switches; the ablation ladder turns these on one group at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub decoder_temporal: bool,
    pub encoder_temporal: bool,
    pub temporal_pe: bool,
    pub finetune_decoder_spatial: bool,
    pub finetune_encoder_spatial: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            decoder_temporal: true,
            encoder_temporal: true,
            temporal_pe: true,
            finetune_decoder_spatial: true,
            finetune_encoder_spatial: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Encoder depth.
    pub encoder_layers: usize,
    /// Decoder depth.
    pub decoder_layers: usize,
    pub num_query: usize,
    pub n_levels: usize,
    pub n_points: usize,
    /// Channel width of the convolutional vision pyramid.
    pub backbone_channels: usize,
    pub text_layers: usize,
    pub max_text_len: usize,
    /// Width (in frames) of the Gaussian start/end targets.
    pub sigma: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    /// Weight of the per-query confidence loss.
    pub lambda_conf: f64,
    /// Weight of the auxiliary loss that teaches the relevance scores used by
    /// query selection to peak inside the target box.
    pub lambda_relevance: f64,
    pub max_frames: usize,
    /// Shorter-side resolution frames are resized to.
    pub resolution: usize,
    pub strict_interval: bool,
    pub freeze_backbone: bool,
    pub query_assignment: QueryAssignment,
    pub toggles: Toggles,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            ffn_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            num_query: 20,
            n_levels: 3,
            n_points: 4,
            backbone_channels: 32,
            text_layers: 2,
            max_text_len: 32,
            sigma: 1.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_conf: 1.0,
            lambda_relevance: 1.0,
            max_frames: 32,
            resolution: 64,
            strict_interval: true,
            freeze_backbone: true,
            query_assignment: QueryAssignment::default(),
            toggles: Toggles::default(),
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// Dimensions reported for the full-size model (6+6 layers, 128 frames,
    /// 448px shorter side). Far too large for CPU training.
    pub fn full_scale() -> Self {
        Self {
            d_model: 256,
            n_heads: 8,
            ffn_dim: 2048,
            encoder_layers: 6,
            decoder_layers: 6,
            num_query: 20,
            n_levels: 4,
            n_points: 4,
            backbone_channels: 256,
            max_text_len: 256,
            max_frames: 128,
            resolution: 448,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("decoder_layers", self.decoder_layers),
            ("num_query", self.num_query),
            ("n_levels", self.n_levels),
            ("n_points", self.n_points),
            ("backbone_channels", self.backbone_channels),
            ("max_text_len", self.max_text_len),
            ("max_frames", self.max_frames),
            ("resolution", self.resolution),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.lambda_l1 < 0.0
            || self.lambda_giou < 0.0
            || self.lambda_conf < 0.0
            || self.lambda_relevance < 0.0
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.strict_interval && self.max_frames < 2 {
            return Err(Error::Config(
                "strict intervals need max_frames >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Vidstg,
    Hcstvg,
    Youcook,
}

impl DatasetKind {
    /// Epoch counts reported for the full datasets; synthetic uses the desk value.
    pub fn default_epochs(self) -> usize {
        match self {
            DatasetKind::Vidstg => 10,
            DatasetKind::Hcstvg => 90,
            DatasetKind::Youcook => 10,
            DatasetKind::Synthetic => 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Annotation root (or synthetic output directory).
    pub root: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    /// HC-STVG release (1 or 2).
    #[serde(default)]
    pub version: Option<u8>,
}

fn default_split() -> String {
    "train".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            grad_clip: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub dataset: Option<DatasetConfig>,
    /// Defaults to the dataset's customary epoch count.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Save a checkpoint every this many epochs (the final one is always saved).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            dataset: None,
            epochs: None,
            seed: 0,
            output_dir: default_output(),
            checkpoint_every: None,
        }
    }
}

impl RunConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| {
            self.dataset
                .as_ref()
                .map(|d| d.kind.default_epochs())
                .unwrap_or(DatasetKind::Synthetic.default_epochs())
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || o.weight_decay < 0.0 || o.batch_size == 0 {
            return Err(Error::Config(
                "optimizer needs lr > 0, weight_decay >= 0 and batch_size >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if let Some(d) = &self.dataset {
            if let Some(v) = d.version {
                if d.kind == DatasetKind::Hcstvg && !(v == 1 || v == 2) {
                    return Err(Error::Config(format!("unknown HC-STVG version {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::parse("run config", "toml", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::parse("run config", "toml", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn optimizer_defaults_match_reported_values() {
        let o = OptimizerConfig::default();
        assert_eq!(o.learning_rate, 1e-4);
        assert_eq!(o.weight_decay, 1e-4);
        assert_eq!(o.batch_size, 8);
        assert_eq!(DatasetKind::Vidstg.default_epochs(), 10);
        assert_eq!(DatasetKind::Hcstvg.default_epochs(), 90);
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.dataset = Some(DatasetConfig {
            kind: DatasetKind::Hcstvg,
            root: "data/hc".into(),
            split: "test".into(),
            version: Some(2),
        });
        cfg.model.toggles.encoder_temporal = false;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[model]\nd_model = 16\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.model.n_heads, 4);
        assert_eq!(cfg.epochs(), 200);
    }
}
