//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use stvg_core::config::{ModelConfig, Precision, RunConfig};
use stvg_core::data::synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use stvg_core::harness::Sample;
use stvg_core::nn::ParamStore;
use stvg_core::types::{BoundingBox, GroundingAnnotation, SentenceKind, TemporalInterval};

/// A model small enough for per-test training: 32×32 inputs give two levels
/// of 4×4 and 2×2 cells (20 positions per frame).
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        encoder_layers: 1,
        decoder_layers: 2,
        num_query: 4,
        n_levels: 2,
        n_points: 2,
        backbone_channels: 8,
        text_layers: 1,
        max_text_len: 16,
        max_frames: 8,
        resolution: 32,
        precision: Precision::F64,
        ..ModelConfig::default()
    }
}

pub fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig {
        model: tiny_model(),
        ..RunConfig::default()
    };
    cfg.optimizer.batch_size = 2;
    cfg
}

pub fn tiny_spec(n_videos: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_videos,
        num_frames: 8,
        height: 32,
        width: 32,
        max_distractors: 1,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> SyntheticDataset {
    generate_synthetic(spec).expect("valid synthetic spec")
}

pub fn samples(ds: &SyntheticDataset, cfg: &ModelConfig) -> Vec<Sample> {
    ds.videos
        .iter()
        .map(|v| Sample::prepare(&v.clip, &v.annotation, cfg).expect("sample fits the model"))
        .collect()
}

pub fn random_box(rng: &mut impl Rng) -> BoundingBox {
    let w = rng.random_range(0.02..=1.0);
    let h = rng.random_range(0.02..=1.0);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    BoundingBox::new(cx, cy, w, h).unwrap()
}

/// A random strict interval inside `num_frames`.
pub fn random_interval(rng: &mut impl Rng, num_frames: usize) -> TemporalInterval {
    let s = rng.random_range(0..num_frames - 1);
    let e = rng.random_range(s + 1..num_frames);
    TemporalInterval::new(s, e, true).unwrap()
}

pub fn random_annotation(rng: &mut impl Rng, num_frames: usize) -> GroundingAnnotation {
    let iv = random_interval(rng, num_frames);
    let boxes: BTreeMap<usize, BoundingBox> = iv.frames().map(|t| (t, random_box(rng))).collect();
    GroundingAnnotation::new(
        "random",
        "a thing",
        SentenceKind::Declarative,
        num_frames,
        64,
        64,
        iv,
        boxes,
    )
    .unwrap()
}

pub fn random_tensor(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims(), "shape mismatch");
    values(a)
        .iter()
        .zip(values(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `[out, in]` weight of a stored linear layer.
pub fn matrix(store: &ParamStore, name: &str) -> Vec<Vec<f64>> {
    store.get(name).unwrap_or_else(|| panic!("no param {name}")).as_tensor().to_vec2().unwrap()
}

pub fn vector(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap_or_else(|| panic!("no param {name}")).as_tensor().to_vec1().unwrap()
}

/// `W x + b` for a stored linear layer named `prefix`.
pub fn linear(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = matrix(store, &format!("{prefix}.weight"));
    let b = vector(store, &format!("{prefix}.bias"));
    w.iter()
        .zip(&b)
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect()
}

/// Layer norm with unit gain and zero shift.
pub fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
