mod common;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stvg_core::backbone::{TextFeatures, VisualFeatureMap};
use stvg_core::config::{ModelConfig, Precision};
use stvg_core::decoder::{CrossModalDecoder, DecoderContext, DecoderLayer};
use stvg_core::nn::ParamStore;
use stvg_core::query::{QuerySelector, QuerySet};

use common::{layer_norm, linear, max_abs_diff, random_tensor, softmax, values};

fn config(d: usize, heads: usize, num_query: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: heads,
        ffn_dim: 2 * d,
        num_query,
        decoder_layers: 3,
        precision: Precision::F64,
        ..ModelConfig::default()
    }
}

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Vec<Rows> {
    t.to_vec3().unwrap()
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Multi-head attention by loops; `mask[j]` drops key `j`.
fn mha(store: &ParamStore, prefix: &str, heads: usize, q: &Rows, k: &Rows, v: &Rows, mask: &[bool]) -> Rows {
    let p = |name: &str, xs: &Rows| -> Rows {
        xs.iter().map(|x| linear(store, &format!("{prefix}.{name}"), x)).collect()
    };
    let (pq, pk, pv) = (p("q_proj", q), p("k_proj", k), p("v_proj", v));
    let d = pq[0].len();
    let dh = d / heads;
    pq.iter()
        .map(|qi| {
            let mut mixed = vec![0.0; d];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let kept: Vec<usize> = (0..pk.len()).filter(|&j| !mask[j]).collect();
                let scores: Vec<f64> = kept
                    .iter()
                    .map(|&j| r.clone().map(|c| qi[c] * pk[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for (wi, &j) in w.iter().zip(&kept) {
                    for c in r.clone() {
                        mixed[c] += wi * pv[j][c];
                    }
                }
            }
            linear(store, &format!("{prefix}.out_proj"), &mixed)
        })
        .collect()
}

fn mlp(store: &ParamStore, prefix: &str, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for i in 0..layers {
        h = linear(store, &format!("{prefix}.layers.{i}"), &h);
        if i + 1 < layers {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

/// The whole decoder layer, element by element.
#[allow(clippy::too_many_arguments)]
fn layer_oracle(
    store: &ParamStore,
    pre: &str,
    heads: usize,
    hidden: &[Rows],
    pos: &[Rows],
    vis: &[Rows],
    txt: &Rows,
    text_mask: &[bool],
    temporal: bool,
) -> Vec<Rows> {
    let (t, k) = (hidden.len(), hidden[0].len());
    let mut x: Vec<Rows> = hidden.to_vec();
    let name = |s: &str| format!("{pre}.{s}");
    if temporal {
        for qi in 0..k {
            let normed: Rows = (0..t).map(|ti| layer_norm(&x[ti][qi])).collect();
            let qk: Rows = (0..t).map(|ti| plus(&normed[ti], &pos[ti][qi])).collect();
            let out = mha(store, &name("temporal.attn"), heads, &qk, &qk, &normed, &vec![false; t]);
            for ti in 0..t {
                add(&mut x[ti][qi], &out[ti]);
            }
        }
    }
    for ti in 0..t {
        let normed: Rows = x[ti].iter().map(|r| layer_norm(r)).collect();
        let qk: Rows = normed.iter().zip(&pos[ti]).map(|(a, b)| plus(a, b)).collect();
        let out = mha(store, &name("self_attn"), heads, &qk, &qk, &normed, &vec![false; k]);
        for qi in 0..k {
            add(&mut x[ti][qi], &out[qi]);
        }

        let q: Rows = x[ti].iter().zip(&pos[ti]).map(|(r, p)| plus(&layer_norm(r), p)).collect();
        let out = mha(store, &name("visual_attn"), heads, &q, &vis[ti], &vis[ti], &vec![false; vis[ti].len()]);
        for qi in 0..k {
            add(&mut x[ti][qi], &out[qi]);
        }

        let q: Rows = x[ti].iter().zip(&pos[ti]).map(|(r, p)| plus(&layer_norm(r), p)).collect();
        let out = mha(store, &name("text_attn"), heads, &q, txt, txt, text_mask);
        for qi in 0..k {
            add(&mut x[ti][qi], &out[qi]);
        }

        for qi in 0..k {
            let f = mlp(store, &name("ffn"), 2, &layer_norm(&x[ti][qi]));
            add(&mut x[ti][qi], &f);
        }
    }
    x
}

struct Setup {
    store: ParamStore,
    layer: DecoderLayer,
    hidden: Tensor,
    pos: Tensor,
    fv: VisualFeatureMap,
    fp: TextFeatures,
}

fn setup(seed: u64, t: usize, k: usize) -> Setup {
    let (d, heads) = (8, 2);
    let cfg = config(d, heads, k);
    let store = ParamStore::new(DType::F64, Device::Cpu);
    let layer = DecoderLayer::new(&store.builder(seed).pp("dec"), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Setup {
        hidden: random_tensor(&mut rng, &[t, k, d]),
        pos: random_tensor(&mut rng, &[t, k, d]),
        fv: VisualFeatureMap::new(random_tensor(&mut rng, &[t, 12, d]), vec![(3, 4)]).unwrap(),
        fp: TextFeatures {
            features: random_tensor(&mut rng, &[3, d]),
            pad_mask: vec![false, false, true],
        },
        store,
        layer,
    }
}

#[test]
fn layer_matches_dense_reference() {
    for temporal in [false, true] {
        let s = setup(1, 2, 3);
        let got = s.layer.forward(&s.hidden, &s.pos, &s.fv, &s.fp, temporal).unwrap();
        let want = layer_oracle(
            &s.store,
            "dec",
            2,
            &rows(&s.hidden),
            &rows(&s.pos),
            &rows(&s.fv.features),
            &s.fp.features.to_vec2().unwrap(),
            &s.fp.pad_mask,
            temporal,
        );
        let want = Tensor::from_vec(want.concat().concat(), (2, 3, 8), &Device::Cpu).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-5, "temporal {temporal}");
    }
}

#[test]
fn single_frame_and_single_query_cases() {
    // one frame: temporal attention has one key; one query: so does self-attention
    let s = setup(2, 1, 1);
    let got = s.layer.forward(&s.hidden, &s.pos, &s.fv, &s.fp, true).unwrap();

    // with one key the weight is 1, so the update is out_proj(v_proj(norm(x)))
    let x = values(&s.hidden);
    let v = linear(&s.store, "dec.temporal.attn.v_proj", &layer_norm(&x));
    let o = linear(&s.store, "dec.temporal.attn.out_proj", &v);
    let moved = Tensor::from_vec(plus(&x, &o), (1, 1, 8), &Device::Cpu).unwrap();
    let skip = s.layer.forward(&moved, &s.pos, &s.fv, &s.fp, false).unwrap();
    assert!(max_abs_diff(&got, &skip) < 1e-9);
}

#[test]
fn frames_only_read_their_own_features() {
    let s = setup(3, 3, 4);
    let base = s.layer.forward(&s.hidden, &s.pos, &s.fv, &s.fp, false).unwrap();
    let zeroed = Tensor::cat(
        &[
            &Tensor::zeros((1, 12, 8), DType::F64, &Device::Cpu).unwrap(),
            &s.fv.features.narrow(0, 1, 1).unwrap(),
            &Tensor::zeros((1, 12, 8), DType::F64, &Device::Cpu).unwrap(),
        ],
        0,
    )
    .unwrap();
    let fv = s.fv.with_features(zeroed).unwrap();
    let out = s.layer.forward(&s.hidden, &s.pos, &fv, &s.fp, false).unwrap();
    let frame = |x: &Tensor| x.narrow(0, 1, 1).unwrap();
    assert!(max_abs_diff(&frame(&base), &frame(&out)) < 1e-6);
}

#[test]
fn padding_tokens_are_ignored() {
    let s = setup(4, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let base = s.layer.forward(&s.hidden, &s.pos, &s.fv, &s.fp, true).unwrap();
    let longer = TextFeatures {
        features: Tensor::cat(&[&s.fp.features, &random_tensor(&mut rng, &[4, 8])], 0).unwrap(),
        pad_mask: [s.fp.pad_mask.clone(), vec![true; 4]].concat(),
    };
    let out = s.layer.forward(&s.hidden, &s.pos, &s.fv, &longer, true).unwrap();
    assert!(max_abs_diff(&base, &out) < 1e-5);
}

#[test]
fn per_frame_outputs_permute_without_temporal_mixing() {
    let s = setup(5, 4, 3);
    let base = s.layer.forward(&s.hidden, &s.pos, &s.fv, &s.fp, false).unwrap();
    let idx = Tensor::new(&[3u32, 1, 0, 2], &Device::Cpu).unwrap();
    let perm = |x: &Tensor| x.index_select(&idx, 0).unwrap();
    let fv = s.fv.with_features(perm(&s.fv.features)).unwrap();
    let out = s.layer.forward(&perm(&s.hidden), &perm(&s.pos), &fv, &s.fp, false).unwrap();
    assert!(max_abs_diff(&out, &perm(&base)) < 1e-5);
}

struct Stack {
    decoder: CrossModalDecoder,
    selector: QuerySelector,
    queries: QuerySet,
    fv: VisualFeatureMap,
    fp: TextFeatures,
}

fn stack(layers: usize) -> Stack {
    let cfg = ModelConfig {
        decoder_layers: layers,
        ..config(8, 2, 4)
    };
    let store = ParamStore::new(DType::F64, Device::Cpu);
    let pb = store.builder(6);
    let decoder = CrossModalDecoder::new(&pb.pp("decoder"), &pb.pp("heads"), &cfg).unwrap();
    let selector = QuerySelector::new(&pb.pp("query"), &cfg).unwrap();
    // push the box offsets away from zero so the anchors really move
    for (name, var) in store.vars() {
        if name.contains("offsets") {
            let n = var.elem_count();
            let v: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 4.0 - 1.5).collect();
            var.set(&Tensor::from_vec(v, var.shape().clone(), &Device::Cpu).unwrap()).unwrap();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let fv = VisualFeatureMap::new(random_tensor(&mut rng, &[3, 20, 8]), vec![(4, 4), (2, 2)]).unwrap();
    let fp = TextFeatures {
        features: random_tensor(&mut rng, &[2, 8]),
        pad_mask: vec![false, false],
    };
    let queries = selector.select(&fv, &fp, None).unwrap();
    Stack {
        decoder,
        selector,
        queries,
        fv,
        fp,
    }
}

#[test]
fn one_prediction_per_layer_and_anchors_stay_normalized() {
    let s = stack(3);
    let ctx = DecoderContext {
        temporal: true,
        temporal_pe: None,
    };
    let preds = s
        .decoder
        .forward(&s.queries, &s.fv, &s.fp, s.selector.anchor_encoder(), &ctx)
        .unwrap();
    assert_eq!(preds.len(), 3);
    for p in &preds {
        assert_eq!(p.boxes.dims(), &[3, 4, 4]);
        assert_eq!(p.confidence_logits.dims(), &[3, 4]);
        assert!(values(&p.boxes).iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(max_abs_diff(&preds[0].boxes, &preds[1].boxes) > 0.0);
}

#[test]
fn one_layer_stack_equals_decode_layer() {
    let s = stack(1);
    let ctx = DecoderContext {
        temporal: false,
        temporal_pe: None,
    };
    let enc = s.selector.anchor_encoder();
    let preds = s.decoder.forward(&s.queries, &s.fv, &s.fp, enc, &ctx).unwrap();
    let (single, next) = s.decoder.decode_layer(0, &s.queries, &s.fv, &s.fp, enc, &ctx).unwrap();
    assert_eq!(preds.len(), 1);
    assert_eq!(values(&preds[0].boxes), values(&single.boxes));
    assert_eq!(values(&next.anchors), values(&single.boxes));
    assert!(s.decoder.decode_layer(1, &s.queries, &s.fv, &s.fp, enc, &ctx).is_err());
}
