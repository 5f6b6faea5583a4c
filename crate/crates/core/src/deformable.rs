//! Multi-scale deformable attention within a frame.
//!
//! Every query samples `n_points` locations per head and per level around its
//! reference point. Locations are normalized `(x, y)` coordinates; sampling is
//! bilinear with zero padding outside the map, using the half-pixel
//! convention (a location at a cell center reads that cell exactly).

use candle_core::{DType, Tensor, D};

use crate::backbone::VisualFeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamBuilder};

#[derive(Debug, Clone)]
pub struct DeformableAttention {
    sampling_offsets: Linear,
    attention_weights: Linear,
    value_proj: Linear,
    output_proj: Linear,
    n_heads: usize,
    n_levels: usize,
    n_points: usize,
}

impl DeformableAttention {
    /// Offsets start at zero weight with a bias that spreads each head's points
    /// along its own direction; attention weights start uniform.
    pub fn new(
        pb: &ParamBuilder,
        d_model: usize,
        n_heads: usize,
        n_levels: usize,
        n_points: usize,
    ) -> Result<Self> {
        let spb = pb.pp("sampling_offsets");
        let mut bias = Vec::with_capacity(n_heads * n_levels * n_points * 2);
        for h in 0..n_heads {
            let theta = h as f64 * 2.0 * std::f64::consts::PI / n_heads as f64;
            let (c, s) = (theta.cos(), theta.sin());
            let norm = c.abs().max(s.abs());
            for _ in 0..n_levels {
                for p in 0..n_points {
                    bias.push(c / norm * (p + 1) as f64);
                    bias.push(s / norm * (p + 1) as f64);
                }
            }
        }
        let n_off = n_heads * n_levels * n_points * 2;
        let sampling_offsets = Linear::from_parts(
            spb.constant("weight", &[n_off, d_model], 0.0)?,
            spb.values("bias", &[n_off], bias)?,
        );
        let attn = Self {
            sampling_offsets,
            attention_weights: Linear::zeros(
                &pb.pp("attention_weights"),
                d_model,
                n_heads * n_levels * n_points,
            )?,
            value_proj: Linear::new(&pb.pp("value_proj"), d_model, d_model)?,
            output_proj: Linear::new(&pb.pp("output_proj"), d_model, d_model)?,
            n_heads,
            n_levels,
            n_points,
        };
        Ok(attn)
    }

    /// Sampling locations `[T, Q, H, L, P, 2]` and softmaxed weights
    /// `[T, Q, H, L, P]` for the given queries.
    pub fn sampling(
        &self,
        query: &Tensor,
        reference_points: &Tensor,
        level_shapes: &[(usize, usize)],
    ) -> Result<(Tensor, Tensor)> {
        let (t, q, _) = query.dims3()?;
        let (h, l, p) = (self.n_heads, self.n_levels, self.n_points);
        let offsets = self
            .sampling_offsets
            .forward(query)?
            .reshape((t, q, h, l, p, 2))?;
        let weights = self
            .attention_weights
            .forward(query)?
            .reshape((t, q, h, l * p))?;
        let weights = candle_nn::ops::softmax(&weights, D::Minus1)?.reshape((t, q, h, l, p))?;

        let normalizer: Vec<f64> = level_shapes
            .iter()
            .flat_map(|&(lh, lw)| [lw as f64, lh as f64])
            .collect();
        let normalizer = Tensor::from_vec(normalizer, (1, 1, 1, l, 1, 2), query.device())?
            .to_dtype(query.dtype())?;
        let refs = reference_points.reshape((1, q, 1, 1, 1, 2))?;
        let locations = refs.broadcast_add(&offsets.broadcast_div(&normalizer)?)?;
        Ok((locations, weights))
    }

    /// `query: [T, Q, d]`, `reference_points: [Q, 2]` normalized `(x, y)`;
    /// values come from `value` (a feature map over the same frames).
    pub fn forward(
        &self,
        query: &Tensor,
        reference_points: &Tensor,
        value: &VisualFeatureMap,
    ) -> Result<Tensor> {
        if value.num_levels() != self.n_levels {
            return Err(Error::Config(format!(
                "deformable attention built for {} levels, feature map has {}",
                self.n_levels,
                value.num_levels()
            )));
        }
        let (t, s, d) = value.features.dims3()?;
        if query.dims()[0] != t {
            return Err(Error::Shape(format!(
                "query covers {} frames, values {t}",
                query.dims()[0]
            )));
        }
        let mut v = self.value_proj.forward(&value.features)?;
        if value.has_padding() {
            let keep: Vec<f64> = value
                .pad_mask
                .iter()
                .map(|&m| if m { 0.0 } else { 1.0 })
                .collect();
            let keep = Tensor::from_vec(keep, (t, s, 1), v.device())?.to_dtype(v.dtype())?;
            v = v.broadcast_mul(&keep)?;
        }
        let v = v.reshape((t, s, self.n_heads, d / self.n_heads))?;
        let (locations, weights) = self.sampling(query, reference_points, &value.level_shapes)?;
        let sampled = multi_scale_deformable_sample(
            &v,
            &value.level_shapes,
            &value.level_start_index,
            &locations,
            &weights,
        )?;
        self.output_proj.forward(&sampled)
    }
}

/// Bilinear multi-scale sampling.
///
/// `value: [T, S, H, dh]`, `locations: [T, Q, H, L, P, 2]` normalized `(x, y)`,
/// `weights: [T, Q, H, L, P]`. Returns `[T, Q, H * dh]`: for every query and
/// head the weighted sum over levels and points of the sampled values.
pub fn multi_scale_deformable_sample(
    value: &Tensor,
    level_shapes: &[(usize, usize)],
    level_start_index: &[usize],
    locations: &Tensor,
    weights: &Tensor,
) -> Result<Tensor> {
    let (t, _s, n_heads, head_dim) = value.dims4()?;
    let dims = locations.dims();
    if dims.len() != 6 {
        return Err(Error::Shape(format!(
            "sampling locations of rank {}",
            dims.len()
        )));
    }
    let (q, n_levels, n_points) = (dims[1], dims[3], dims[4]);
    if level_shapes.len() != n_levels || level_start_index.len() != n_levels {
        return Err(Error::Config(format!(
            "{n_levels} sampling levels but {} level shapes",
            level_shapes.len()
        )));
    }
    let device = value.device();
    let dtype = value.dtype();
    let samples = t * q * n_heads * n_points;

    let mut total: Option<Tensor> = None;
    for (l, (&(lh, lw), &start)) in level_shapes.iter().zip(level_start_index).enumerate() {
        let hw = lh * lw;
        let v_level = value
            .narrow(1, start, hw)?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((t * n_heads * hw, head_dim))?;
        let loc = locations.narrow(3, l, 1)?.squeeze(3)?;
        let x = ((loc.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)? * lw as f64)? - 0.5)?;
        let y = ((loc.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)? * lh as f64)? - 0.5)?;
        let xs: Vec<f64> = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let ys: Vec<f64> = y.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let x0: Vec<f64> = xs.iter().map(|v| v.floor()).collect();
        let y0: Vec<f64> = ys.iter().map(|v| v.floor()).collect();
        let shape = (t, q, n_heads, n_points);
        let fx = (&x - Tensor::from_vec(x0.clone(), shape, device)?.to_dtype(dtype)?)?;
        let fy = (&y - Tensor::from_vec(y0.clone(), shape, device)?.to_dtype(dtype)?)?;
        let gx = (1.0 - &fx)?;
        let gy = (1.0 - &fy)?;

        let mut acc: Option<Tensor> = None;
        for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1), (1, 1)] {
            let mut index = Vec::with_capacity(samples);
            let mut valid = Vec::with_capacity(samples);
            for e in 0..samples {
                let ti = e / (q * n_heads * n_points);
                let hi = (e / n_points) % n_heads;
                let cx = x0[e] as i64 + dx;
                let cy = y0[e] as i64 + dy;
                let inside = cx >= 0 && cy >= 0 && (cx as usize) < lw && (cy as usize) < lh;
                if inside {
                    index.push(((ti * n_heads + hi) * hw + cy as usize * lw + cx as usize) as u32);
                    valid.push(1.0);
                } else {
                    index.push(0);
                    valid.push(0.0);
                }
            }
            let index = Tensor::from_vec(index, samples, device)?;
            let valid = Tensor::from_vec(valid, shape, device)?.to_dtype(dtype)?;
            let wx = if dx == 0 { &gx } else { &fx };
            let wy = if dy == 0 { &gy } else { &fy };
            let corner_weight = (wx * wy)?.mul(&valid)?.unsqueeze(D::Minus1)?;
            let gathered = v_level
                .index_select(&index, 0)?
                .reshape((t, q, n_heads, n_points, head_dim))?;
            let contrib = gathered.broadcast_mul(&corner_weight)?;
            acc = Some(match acc {
                None => contrib,
                Some(a) => (a + contrib)?,
            });
        }
        let level_weights = weights.narrow(3, l, 1)?.squeeze(3)?.unsqueeze(D::Minus1)?;
        let level_out = acc
            .expect("four corners")
            .broadcast_mul(&level_weights)?
            .sum(3)?;
        total = Some(match total {
            None => level_out,
            Some(a) => (a + level_out)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no feature levels".into()))?;
    Ok(total.reshape((t, q, n_heads * head_dim))?)
}
