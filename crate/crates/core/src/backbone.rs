//! Frozen feature extractors producing the initial visual and text features.
//!
//! The vision side is a strided convolutional pyramid (stride 8, then ×2 per
//! level) projected to `d_model` per level, with a fixed 2-D sine position
//! embedding. The text side is a token embedding followed by a small
//! self-attention encoder. Both are frame-/token-local stand-ins for larger
//! pretrained encoders and sit behind the same interface.

use candle_core::{Device, Tensor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    coordinate_embedding, key_mask_bias, temporal_encoding_tensor, LayerNorm, Linear, Mlp,
    MultiHeadAttention, ParamBuilder,
};
use crate::types::{TextPrompt, VideoClip};

const STEM_STRIDE: usize = 8;

/// Multi-scale per-frame features flattened level by level.
#[derive(Debug, Clone)]
pub struct VisualFeatureMap {
    /// `[T, S, d_model]`
    pub features: Tensor,
    pub level_shapes: Vec<(usize, usize)>,
    pub level_start_index: Vec<usize>,
    /// `T × S` flags, `true` = ignore.
    pub pad_mask: Vec<bool>,
}

impl VisualFeatureMap {
    pub fn new(features: Tensor, level_shapes: Vec<(usize, usize)>) -> Result<Self> {
        let (t, s, _) = features.dims3()?;
        let mut starts = Vec::with_capacity(level_shapes.len());
        let mut total = 0;
        for &(h, w) in &level_shapes {
            starts.push(total);
            total += h * w;
        }
        if total != s {
            return Err(Error::Shape(format!(
                "level areas sum to {total} but feature map has {s} positions"
            )));
        }
        Ok(Self {
            features,
            level_shapes,
            level_start_index: starts,
            pad_mask: vec![false; t * s],
        })
    }

    /// Same level layout, new feature values.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.dims()[..2] != self.features.dims()[..2] {
            return Err(Error::Shape(format!(
                "expected [T, S] = {:?}, got {:?}",
                &self.features.dims()[..2],
                features.dims()
            )));
        }
        Ok(Self {
            features,
            level_shapes: self.level_shapes.clone(),
            level_start_index: self.level_start_index.clone(),
            pad_mask: self.pad_mask.clone(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.features.dims()[0]
    }

    pub fn num_positions(&self) -> usize {
        self.features.dims()[1]
    }

    pub fn num_levels(&self) -> usize {
        self.level_shapes.len()
    }

    pub fn has_padding(&self) -> bool {
        self.pad_mask.iter().any(|&m| m)
    }

    /// `(level, row, col)` of a flattened position.
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let level = self
            .level_start_index
            .iter()
            .rposition(|&s| s <= index)
            .unwrap_or(0);
        let local = index - self.level_start_index[level];
        let w = self.level_shapes[level].1;
        (level, local / w, local % w)
    }

    /// Normalized `(x, y)` center of every position's grid cell.
    pub fn reference_points(&self) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(self.num_positions());
        for &(h, w) in &self.level_shapes {
            for r in 0..h {
                for c in 0..w {
                    pts.push([(c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64]);
                }
            }
        }
        pts
    }
}

/// Per-token features of one caption.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// `[L, d_model]`
    pub features: Tensor,
    /// `true` = padding.
    pub pad_mask: Vec<bool>,
}

impl TextFeatures {
    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }

    pub fn with_features(&self, features: Tensor) -> Self {
        Self {
            features,
            pad_mask: self.pad_mask.clone(),
        }
    }
}

/// Level shapes produced for a frame size, or a configuration error when the
/// frame is smaller than the coarsest stride.
pub fn pyramid_shapes(height: usize, width: usize, n_levels: usize) -> Result<Vec<(usize, usize)>> {
    let coarsest = STEM_STRIDE << (n_levels.saturating_sub(1));
    if height < coarsest || width < coarsest {
        return Err(Error::Config(format!(
            "frame {height}x{width} smaller than the coarsest stride {coarsest}"
        )));
    }
    let mut shapes = vec![(height / STEM_STRIDE, width / STEM_STRIDE)];
    for _ in 1..n_levels {
        let (h, w) = *shapes.last().unwrap();
        shapes.push((h.div_ceil(2), w.div_ceil(2)));
    }
    Ok(shapes)
}

/// Fixed sine embedding of grid-cell centers, `[S, d]`: half the width
/// encodes y, half encodes x.
fn spatial_position_embedding(shapes: &[(usize, usize)], d_model: usize) -> Vec<f64> {
    let half = d_model / 2;
    let mut out = Vec::new();
    for &(h, w) in shapes {
        for r in 0..h {
            for c in 0..w {
                out.extend(coordinate_embedding((r as f64 + 0.5) / h as f64, half));
                out.extend(coordinate_embedding(
                    (c as f64 + 0.5) / w as f64,
                    d_model - half,
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct VisionBackbone {
    stem_weight: Tensor,
    stem_bias: Tensor,
    downsample: Vec<(Tensor, Tensor)>,
    projections: Vec<Linear>,
    norm: LayerNorm,
    level_embed: Tensor,
    d_model: usize,
    n_levels: usize,
}

impl VisionBackbone {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.backbone_channels;
        let stem_bound = 1.0 / ((3 * STEM_STRIDE * STEM_STRIDE) as f64).sqrt();
        let stem_weight =
            pb.uniform("stem.weight", &[c, 3, STEM_STRIDE, STEM_STRIDE], stem_bound)?;
        let stem_bias = pb.uniform("stem.bias", &[c], stem_bound)?;
        let mut downsample = Vec::new();
        let down_bound = 1.0 / ((c * 9) as f64).sqrt();
        for l in 1..cfg.n_levels {
            let w = pb.uniform(&format!("down.{l}.weight"), &[c, c, 3, 3], down_bound)?;
            let b = pb.uniform(&format!("down.{l}.bias"), &[c], down_bound)?;
            downsample.push((w, b));
        }
        let projections = (0..cfg.n_levels)
            .map(|l| Linear::new(&pb.pp(format!("proj.{l}")), c, cfg.d_model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem_weight,
            stem_bias,
            downsample,
            projections,
            norm: LayerNorm::new(&pb.pp("norm"), cfg.d_model)?,
            level_embed: pb.normal("level_embed", &[cfg.n_levels, cfg.d_model], 0.1)?,
            d_model: cfg.d_model,
            n_levels: cfg.n_levels,
        })
    }

    /// Encodes every frame independently into a multi-scale feature map.
    pub fn forward(&self, video: &VideoClip) -> Result<VisualFeatureMap> {
        let shapes = pyramid_shapes(video.height(), video.width(), self.n_levels)?;
        let dtype = self.stem_weight.dtype();
        let device = self.stem_weight.device();
        let x = ((video.to_tensor(dtype, device)? - 0.5)? * 4.0)?;
        let t = video.num_frames();

        let mut maps = Vec::with_capacity(self.n_levels);
        let mut h = x
            .conv2d(&self.stem_weight, 0, STEM_STRIDE, 1, 1)?
            .broadcast_add(&self.stem_bias.reshape((1, (), 1, 1))?)?
            .relu()?;
        maps.push(h.clone());
        for (w, b) in &self.downsample {
            h = h
                .conv2d(w, 1, 2, 1, 1)?
                .broadcast_add(&b.reshape((1, (), 1, 1))?)?
                .relu()?;
            maps.push(h.clone());
        }

        let mut levels = Vec::with_capacity(self.n_levels);
        for (l, (map, proj)) in maps.iter().zip(&self.projections).enumerate() {
            let (_, c, lh, lw) = map.dims4()?;
            debug_assert_eq!((lh, lw), shapes[l]);
            let flat = map
                .reshape((t, c, lh * lw))?
                .transpose(1, 2)?
                .contiguous()?;
            let projected = self.norm.forward(&proj.forward(&flat)?)?;
            let embed = self.level_embed.get(l)?;
            levels.push(projected.broadcast_add(&embed)?);
        }
        let features = Tensor::cat(&levels, 1)?;
        let pos = spatial_position_embedding(&shapes, self.d_model);
        let s = features.dims()[1];
        let pos = Tensor::from_vec(pos, (1, s, self.d_model), device)?.to_dtype(dtype)?;
        VisualFeatureMap::new(features.broadcast_add(&pos)?, shapes)
    }
}

#[derive(Debug, Clone)]
struct TextLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct TextBackbone {
    embedding: Tensor,
    layers: Vec<TextLayer>,
    norm: LayerNorm,
    d_model: usize,
    vocab_size: usize,
}

impl TextBackbone {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        let layers = (0..cfg.text_layers)
            .map(|i| {
                let lpb = pb.pp(format!("layers.{i}"));
                Ok(TextLayer {
                    norm1: LayerNorm::new(&lpb.pp("norm1"), cfg.d_model)?,
                    attn: MultiHeadAttention::new(&lpb.pp("attn"), cfg.d_model, cfg.n_heads)?,
                    norm2: LayerNorm::new(&lpb.pp("norm2"), cfg.d_model)?,
                    ffn: Mlp::new(
                        &lpb.pp("ffn"),
                        cfg.d_model,
                        cfg.ffn_dim,
                        cfg.d_model,
                        2,
                        false,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embedding: pb.normal("embedding", &[vocab_size, cfg.d_model], 1.0)?,
            layers,
            norm: LayerNorm::new(&pb.pp("norm"), cfg.d_model)?,
            d_model: cfg.d_model,
            vocab_size,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn forward(&self, prompt: &TextPrompt) -> Result<TextFeatures> {
        self.forward_padded(prompt, prompt.tokens.len())
    }

    /// Encodes the prompt followed by padding up to `total_len` tokens; the
    /// padded positions are flagged and never attended to.
    pub fn forward_padded(&self, prompt: &TextPrompt, total_len: usize) -> Result<TextFeatures> {
        let n = prompt.tokens.len();
        if n == 0 {
            return Err(Error::Tokenizer("empty prompt".into()));
        }
        if total_len < n {
            return Err(Error::Shape(format!(
                "cannot pad {n} tokens to {total_len}"
            )));
        }
        if let Some(bad) = prompt
            .tokens
            .iter()
            .find(|&&id| id as usize >= self.vocab_size)
        {
            return Err(Error::Tokenizer(format!(
                "token id {bad} outside a vocabulary of {}",
                self.vocab_size
            )));
        }
        let device: &Device = self.embedding.device();
        let dtype = self.embedding.dtype();
        let mut ids = prompt.tokens.clone();
        ids.resize(total_len, 0);
        let ids = Tensor::from_vec(ids, total_len, device)?;
        let pos = temporal_encoding_tensor(total_len, self.d_model, dtype, device)?;
        let mut x = self
            .embedding
            .index_select(&ids, 0)?
            .add(&pos)?
            .unsqueeze(0)?;

        let pad_mask: Vec<bool> = (0..total_len).map(|i| i >= n).collect();
        let bias = key_mask_bias(&pad_mask, dtype, device)?;
        for layer in &self.layers {
            let h = layer.norm1.forward(&x)?;
            x = (x + layer.attn.forward(&h, &h, &h, Some(&bias))?)?;
            let h = layer.norm2.forward(&x)?;
            x = (&x + layer.ffn.forward(&h)?)?;
        }
        Ok(TextFeatures {
            features: self.norm.forward(&x)?.squeeze(0)?,
            pad_mask,
        })
    }
}
