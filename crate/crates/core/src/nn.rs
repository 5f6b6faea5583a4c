//! Parameter storage and the small set of layers the model is built from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Layers hold
//! tensors that share storage with the store's variables, so in-place
//! optimizer updates are seen by every layer.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("len", &self.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device,
        }
    }

    /// A builder whose random initialization is driven by `seed`.
    pub fn builder(&self, seed: u64) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    /// Overwrites a parameter's value in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    fn insert(&self, name: String, var: Var) -> Result<()> {
        let mut vars = self.vars.lock().unwrap();
        if vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        vars.insert(name, var);
        Ok(())
    }

    /// SHA-256 over the names and exact values of the selected parameters.
    pub fn checksum(&self, mut filter: impl FnMut(&str) -> bool) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.vars() {
            if !filter(&name) {
                continue;
            }
            hasher.update(name.as_bytes());
            let values: Vec<f64> = var.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Loads values for every parameter of this store; missing or extra
    /// entries are errors.
    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        let names = self.names();
        if tensors.len() != names.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                names.len()
            )));
        }
        for name in names {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))?;
            self.set(&name, t)?;
        }
        Ok(())
    }
}

/// Creates named, randomly initialized parameters under a dotted prefix.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    rng: Arc<Mutex<ChaCha8Rng>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            store: self.store.clone(),
            rng: self.rng.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// A parameter with explicit initial values.
    pub fn values(&self, name: &str, dims: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, dims, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.store.insert(self.full_name(name), var)?;
        Ok(tensor)
    }

    pub fn uniform(&self, name: &str, dims: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let values = {
            let mut rng = self.rng.lock().unwrap();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        self.values(name, dims, values)
    }

    pub fn normal(&self, name: &str, dims: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values = {
            let mut rng = self.rng.lock().unwrap();
            (0..n).map(|_| dist.sample(&mut *rng)).collect()
        };
        self.values(name, dims, values)
    }

    pub fn constant(&self, name: &str, dims: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        self.values(name, dims, vec![value; n])
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: pb.uniform("bias", &[out_dim], bound)?,
        })
    }

    pub fn zeros(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.constant("weight", &[out_dim, in_dim], 0.0)?,
            bias: pb.constant("bias", &[out_dim], 0.0)?,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims
            .last()
            .ok_or_else(|| Error::Shape("scalar input".into()))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[dim], 1.0)?,
            beta: pb.constant("beta", &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// Linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `num_layers` linear layers mapping `in_dim → hidden → … → out_dim`.
    /// With `zero_last` the final layer starts at zero so the MLP initially
    /// outputs zeros.
    pub fn new(
        pb: &ParamBuilder,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        num_layers: usize,
        zero_last: bool,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let d_in = if i == 0 { in_dim } else { hidden };
            let d_out = if i + 1 == num_layers { out_dim } else { hidden };
            let lpb = pb.pp(format!("layers.{i}"));
            let layer = if zero_last && i + 1 == num_layers {
                Linear::zeros(&lpb, d_in, d_out)?
            } else {
                Linear::new(&lpb, d_in, d_out)?
            };
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Standard scaled dot-product multi-head attention with separate query, key,
/// value and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, d_model: usize, n_heads: usize) -> Result<Self> {
        Ok(Self {
            q_proj: Linear::new(&pb.pp("q_proj"), d_model, d_model)?,
            k_proj: Linear::new(&pb.pp("k_proj"), d_model, d_model)?,
            v_proj: Linear::new(&pb.pp("v_proj"), d_model, d_model)?,
            out_proj: Linear::new(&pb.pp("out_proj"), d_model, d_model)?,
            n_heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x.reshape((b, l, self.n_heads, d / self.n_heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Softmax attention weights `[B, H, Lq, Lk]`. `key_bias` is added to the
    /// scores before the softmax and must broadcast to that shape.
    pub fn attention_weights(
        &self,
        query: &Tensor,
        key: &Tensor,
        key_bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let q = self.split_heads(&self.q_proj.forward(query)?)?;
        let k = self.split_heads(&self.k_proj.forward(key)?)?;
        let dk = q.dim(D::Minus1)? as f64;
        let mut scores = (q.matmul(&k.t()?)? / dk.sqrt())?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(bias)?;
        }
        Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
    }

    /// `query: [B, Lq, d]`, `key`/`value: [B, Lk, d]` → `[B, Lq, d]`.
    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        key_bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let weights = self.attention_weights(query, key, key_bias)?;
        let v = self.split_heads(&self.v_proj.forward(value)?)?;
        let out = weights.matmul(&v)?;
        let (b, h, l, dh) = out.dims4()?;
        let merged = out.transpose(1, 2)?.reshape((b, l, h * dh))?;
        self.out_proj.forward(&merged)
    }
}

/// Additive attention bias for a key mask (`true` = ignore): `0` for kept
/// keys and `-inf` for ignored ones.
pub fn key_mask_bias(mask: &[bool], dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> = mask
        .iter()
        .map(|&m| if m { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(values, mask.len(), device)?.to_dtype(dtype)?)
}

pub fn inverse_sigmoid(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let x = x.clamp(0.0, 1.0)?;
    let num = x.clamp(EPS, 1.0)?;
    let den = (1.0 - &x)?.clamp(EPS, 1.0)?;
    Ok((num / den)?.log()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Sinusoidal encoding of frame indices: `PE[t, 2i] = sin(t / 10000^(2i/d))`,
/// `PE[t, 2i+1] = cos(t / 10000^(2i/d))`. Row-major `T × d`.
pub fn temporal_positional_encoding(num_frames: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "temporal encoding needs an even width, got {d_model}"
        )));
    }
    let mut pe = vec![0.0; num_frames * d_model];
    for t in 0..num_frames {
        for i in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[t * d_model + 2 * i] = angle.sin();
            pe[t * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

pub fn temporal_encoding_tensor(
    num_frames: usize,
    d_model: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let pe = temporal_positional_encoding(num_frames, d_model)?;
    Ok(Tensor::from_vec(pe, (num_frames, d_model), device)?.to_dtype(dtype)?)
}

/// Frequencies and phases of the coordinate embedding: feature `j` of a
/// coordinate `x` is `sin(2πx / 10000^(2⌊j/2⌋/n) + φ_j)` with `φ_j = 0` for
/// even `j` and `π/2` (a cosine) for odd `j`.
fn coordinate_frequencies(num_feats: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 2.0 * std::f64::consts::PI;
    let inv_freq = (0..num_feats)
        .map(|j| scale / 10000f64.powf(2.0 * (j / 2) as f64 / num_feats as f64))
        .collect();
    let phase = (0..num_feats)
        .map(|j| {
            if j % 2 == 0 {
                0.0
            } else {
                std::f64::consts::FRAC_PI_2
            }
        })
        .collect();
    (inv_freq, phase)
}

/// Sine embedding of a scalar coordinate in `[0, 1]` with `num_feats` features.
pub fn coordinate_embedding(x: f64, num_feats: usize) -> Vec<f64> {
    let (inv_freq, phase) = coordinate_frequencies(num_feats);
    inv_freq
        .iter()
        .zip(&phase)
        .map(|(f, p)| (x * f + p).sin())
        .collect()
}

/// Differentiable sine embedding of the last axis: `[..., k] → [..., k * num_feats]`,
/// one block of `num_feats` features per input coordinate.
pub fn coordinate_embedding_tensor(x: &Tensor, num_feats: usize) -> Result<Tensor> {
    let (inv_freq, phase) = coordinate_frequencies(num_feats);
    let device = x.device();
    let dtype = x.dtype();
    let inv_freq = Tensor::from_vec(inv_freq, num_feats, device)?.to_dtype(dtype)?;
    let phase = Tensor::from_vec(phase, num_feats, device)?.to_dtype(dtype)?;
    let dims = x.dims().to_vec();
    let k = *dims
        .last()
        .ok_or_else(|| Error::Shape("scalar coordinates".into()))?;
    let angles = x
        .unsqueeze(D::Minus1)?
        .broadcast_mul(&inv_freq)?
        .broadcast_add(&phase)?
        .sin()?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = k * num_feats;
    Ok(angles.reshape(out_dims)?)
}
