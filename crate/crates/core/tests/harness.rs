mod common;

use candle_core::Tensor;

use stvg_core::config::{DatasetConfig, DatasetKind, RunConfig};
use stvg_core::data::frames::frame_file_name;
use stvg_core::data::synthetic::SyntheticDataset;
use stvg_core::harness::{
    box_pixel_extent, evaluate, infer, train, visualize, Checkpoint, EvalSettings, InferOptions,
    OracleGrounder, Sample, Trainer,
};
use stvg_core::model::ParamGroup;
use stvg_core::types::{BoundingBox, SentenceKind, SpatioTemporalTube, TemporalInterval};
use stvg_core::Error;

fn setup(n: usize, seed: u64) -> (SyntheticDataset, Vec<Sample>, RunConfig) {
    let cfg = common::tiny_run();
    let ds = common::synthetic(&common::tiny_spec(n, seed));
    let samples = common::samples(&ds, &cfg.model);
    (ds, samples, cfg)
}

fn param_values(t: &Trainer) -> Vec<(String, Vec<f64>)> {
    t.model()
        .params()
        .vars()
        .into_iter()
        .map(|(n, v)| (n, common::values(v.as_tensor())))
        .collect()
}

#[test]
fn checkpoint_reload_is_bitwise() {
    let (ds, samples, cfg) = setup(2, 1);
    let mut trainer = Trainer::new(cfg, ds.spec.vocabulary()).unwrap();
    trainer.train_epoch(&samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trainer.save_checkpoint(dir.path()).unwrap();

    let reopened = Checkpoint::open(dir.path()).unwrap();
    assert_eq!(reopened.meta, ckpt.meta);
    let model = reopened.load_model().unwrap();
    for (name, var) in trainer.model().params().vars() {
        let loaded = model.params().get(&name).unwrap();
        assert_eq!(common::values(var.as_tensor()), common::values(loaded.as_tensor()), "{name}");
    }

    let tok = reopened.tokenizer().unwrap();
    let prompt = tok.encode(&samples[0].annotation.caption).unwrap();
    let a = trainer.model().predict(&samples[0].clip, &prompt).unwrap();
    let b = model.predict(&samples[0].clip, &prompt).unwrap();
    assert_eq!(a.tube, b.tube);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (ds, samples, cfg) = setup(4, 2);
    let vocab = ds.spec.vocabulary();

    let mut straight = Trainer::new(cfg.clone(), vocab.clone()).unwrap();
    for _ in 0..2 {
        straight.train_epoch(&samples).unwrap();
    }

    let mut first = Trainer::new(cfg, vocab).unwrap();
    first.train_epoch(&samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = first.save_checkpoint(dir.path()).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::open(&ckpt.dir).unwrap()).unwrap();
    assert_eq!(resumed.epoch(), 1);
    resumed.train_epoch(&samples).unwrap();

    for ((n, a), (_, b)) in param_values(&straight).iter().zip(param_values(&resumed)) {
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "{n}: {worst}");
    }
    let tail: Vec<f64> = straight.history()[2..].iter().map(|r| r.loss).collect();
    let again: Vec<f64> = resumed.history().iter().map(|r| r.loss).collect();
    assert_eq!(tail, again);
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = Trainer::epoch_order(7, 3, 10);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    assert_eq!(a, Trainer::epoch_order(7, 3, 10));
    assert_ne!(a, Trainer::epoch_order(7, 4, 10));
}

#[test]
fn frozen_groups_do_not_move() {
    let (ds, samples, cfg) = setup(2, 3);
    let mut trainer = Trainer::new(cfg, ds.spec.vocabulary()).unwrap();
    let frozen: Vec<ParamGroup> = ParamGroup::ALL
        .into_iter()
        .filter(|g| !g.is_trainable(&trainer.config().model))
        .collect();
    assert!(frozen.contains(&ParamGroup::VisionBackbone));
    assert!(frozen.contains(&ParamGroup::TextBackbone));
    let before: Vec<String> =
        frozen.iter().map(|g| trainer.model().group_checksum(*g).unwrap()).collect();
    let heads_before = trainer.model().group_checksum(ParamGroup::Heads).unwrap();
    trainer.train_epoch(&samples).unwrap();
    let after: Vec<String> =
        frozen.iter().map(|g| trainer.model().group_checksum(*g).unwrap()).collect();
    assert_eq!(before, after);
    assert_ne!(heads_before, trainer.model().group_checksum(ParamGroup::Heads).unwrap());
}

#[test]
fn tampered_frozen_weights_fail_to_load() {
    let (ds, samples, cfg) = setup(1, 4);
    let mut trainer = Trainer::new(cfg, ds.spec.vocabulary()).unwrap();
    trainer.train_epoch(&samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut ckpt = trainer.save_checkpoint(dir.path()).unwrap();
    let first = ckpt.meta.frozen_checksums.values_mut().next().unwrap();
    *first = "0".repeat(64);
    assert!(ckpt.load_model().is_err());
}

#[test]
fn repeated_sample_loss_goes_down() {
    let (ds, samples, mut cfg) = setup(1, 5);
    cfg.optimizer.learning_rate = 1e-4;
    let mut trainer = Trainer::new(cfg, ds.spec.vocabulary()).unwrap();
    let losses: Vec<f64> = (0..10).map(|_| trainer.step(&samples, &[0]).unwrap().loss).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 2, "{losses:?}");
    assert!(losses[9] < losses[0]);
}

/// Synthetic captions can repeat; the oracle needs them distinct.
fn distinct_captions(samples: &mut [Sample]) {
    for (i, s) in samples.iter_mut().enumerate() {
        s.annotation.caption = format!("{} {i}", s.annotation.caption);
    }
}

#[test]
fn oracle_scores_perfectly() {
    let (ds, mut samples, _) = setup(6, 6);
    distinct_captions(&mut samples);
    let oracle = OracleGrounder::new(samples.iter().map(|s| &s.annotation));
    let report = evaluate(&oracle, &samples, &EvalSettings::default()).unwrap();
    let overall = &report.overall;
    assert_eq!(overall.samples, ds.videos.len());
    assert_eq!(overall.m_tiou, 1.0);
    // box IoU of a box with itself is 1 up to roundoff in w·h
    assert!((overall.m_viou - 1.0).abs() < 1e-12, "{}", overall.m_viou);
    assert!(overall.viou_at.values().all(|&v| v == 1.0));
    assert_eq!(report.per_sample.len(), samples.len());
}

#[test]
fn oracle_refuses_ambiguous_captions() {
    let (_, mut samples, _) = setup(2, 6);
    samples[1].annotation.caption = samples[0].annotation.caption.clone();
    let mut shifted = samples[1].annotation.boxes().clone();
    let moved = BoundingBox::new(0.5, 0.5, 0.1, 0.1).unwrap();
    shifted.values_mut().for_each(|b| *b = moved);
    samples[1].annotation = stvg_core::types::GroundingAnnotation::new(
        "other",
        samples[0].annotation.caption.clone(),
        SentenceKind::Unknown,
        samples[1].annotation.frame_count,
        samples[1].annotation.width,
        samples[1].annotation.height,
        samples[1].annotation.interval(),
        shifted,
    )
    .unwrap();
    let oracle = OracleGrounder::new(samples.iter().map(|s| &s.annotation));
    assert!(evaluate(&oracle, &samples, &EvalSettings::default()).is_err());
}

#[test]
fn partitions_add_up() {
    let (_, mut samples, _) = setup(6, 7);
    distinct_captions(&mut samples);
    for (i, s) in samples.iter_mut().enumerate() {
        s.annotation.sentence_kind = if i % 3 == 0 {
            SentenceKind::Interrogative
        } else {
            SentenceKind::Declarative
        };
    }
    let oracle = OracleGrounder::new(samples.iter().map(|s| &s.annotation));
    let report = evaluate(&oracle, &samples, &EvalSettings::default()).unwrap();
    let d = report.declarative.as_ref().unwrap().samples;
    let q = report.interrogative.as_ref().unwrap().samples;
    assert_eq!((d, q), (4, 2));
    assert_eq!(d + q, report.overall.samples);
}

#[test]
fn report_json_uses_the_published_keys() {
    let (_, mut samples, _) = setup(2, 8);
    distinct_captions(&mut samples);
    let oracle = OracleGrounder::new(samples.iter().map(|s| &s.annotation));
    let report = evaluate(&oracle, &samples, &EvalSettings::default()).unwrap();
    let json = serde_json::to_value(&report.overall).unwrap();
    for key in ["m_tIoU", "m_vIoU", "vIoU@0.3", "vIoU@0.5"] {
        assert!(json.get(key).is_some(), "missing {key} in {json}");
    }
}

#[test]
fn inference_output_is_well_formed_and_deterministic() {
    let (ds, _, cfg) = setup(1, 9);
    let trainer = Trainer::new(cfg, ds.spec.vocabulary()).unwrap();
    let v = &ds.videos[0];
    let run = || {
        infer(
            trainer.model(),
            trainer.tokenizer(),
            &v.clip,
            "clip",
            &v.annotation.caption,
            &InferOptions {
                dump_distributions: true,
            },
        )
        .unwrap()
    };
    let out = run();
    assert_eq!(out, run());
    assert!(out.t_s >= 1 && out.t_s <= out.t_e && out.t_e <= v.clip.num_frames());
    assert_eq!(out.boxes.len(), out.t_e - out.t_s + 1);
    assert_eq!((out.width, out.height), (v.clip.width(), v.clip.height()));
    let tau = out.tau_s.as_ref().unwrap();
    assert!((tau.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let tube = out.to_tube().unwrap();
    assert!(tube.boxes().iter().all(|b| b.cx >= 0.0 && b.cx <= 1.0));

    let json = serde_json::to_value(&out).unwrap();
    for key in ["schema_version", "video_id", "caption", "t_s", "t_e", "score", "boxes"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn strict_single_frame_clip_is_rejected() {
    let (ds, _, cfg) = setup(1, 10);
    let trainer = Trainer::new(cfg, ds.spec.vocabulary()).unwrap();
    let clip = ds.videos[0].clip.select_frames(&[0]).unwrap();
    let res = infer(
        trainer.model(),
        trainer.tokenizer(),
        &clip,
        "one",
        &ds.videos[0].annotation.caption,
        &InferOptions::default(),
    );
    assert!(res.is_err());
}

#[test]
fn overlays_one_png_per_frame() {
    let (ds, _, _) = setup(1, 11);
    let clip = &ds.videos[0].clip;
    let b = BoundingBox::new(0.5, 0.5, 0.5, 0.25).unwrap();
    let tube = SpatioTemporalTube::new(TemporalInterval::new(2, 4, true).unwrap(), vec![b; 3], 1.0)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = visualize(&tube, clip, dir.path()).unwrap();
    assert_eq!(paths.len(), 3);
    for (t, p) in (2..=4).zip(&paths) {
        assert_eq!(p.file_name().unwrap().to_str().unwrap(), frame_file_name(t));
        let img = image::open(p).unwrap().to_rgb8();
        assert_eq!((img.width() as usize, img.height() as usize), (clip.width(), clip.height()));
        // the outline sits within a pixel of the box edges
        let (x1, y1, x2, y2) = box_pixel_extent(&b, clip.width(), clip.height());
        assert!((x1 as f64 - 8.0).abs() <= 1.0 && (x2 as f64 - 24.0).abs() <= 1.0);
        assert!((y1 as f64 - 12.0).abs() <= 1.0 && (y2 as f64 - 20.0).abs() <= 1.0);
        assert_eq!(img.get_pixel(x1, y1).0, [255, 0, 255]);
        assert_eq!(img.get_pixel(x2, y2).0, [255, 0, 255]);
    }
}

#[test]
fn overlays_reject_bad_tubes() {
    let (ds, _, _) = setup(1, 12);
    let clip = &ds.videos[0].clip;
    let b = BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let past_end = SpatioTemporalTube::new(
        TemporalInterval::new(6, clip.num_frames(), true).unwrap(),
        vec![b; clip.num_frames() - 5],
        1.0,
    )
    .unwrap();
    assert!(visualize(&past_end, clip, dir.path()).is_err());
    assert!(SpatioTemporalTube::new(TemporalInterval::new(0, 1, true).unwrap(), vec![], 1.0).is_err());
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let (ds, samples, cfg) = setup(2, 13);
    let mut trainer = Trainer::new(cfg, ds.spec.vocabulary()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    trainer.set_dump_dir(dir.path());
    let params = trainer.model().params();
    let name = params.names().into_iter().find(|n| n.starts_with("heads.")).unwrap();
    let shape = params.get(&name).unwrap().dims().to_vec();
    let nan = Tensor::full(f64::NAN, shape, params.device()).unwrap();
    params.set(&name, &nan).unwrap();
    match trainer.step(&samples, &[0, 1]) {
        Err(Error::NumericalAbort { batch, .. }) => assert_eq!(batch, 0),
        other => panic!("expected an abort, got {other:?}"),
    }
    let dump = dir.path().join("abort_batch_0.json");
    let text = std::fs::read_to_string(dump).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["samples"].as_array().unwrap().len(), 2);
}

#[test]
fn training_pipeline_writes_trace_and_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    common::synthetic(&common::tiny_spec(2, 14)).write(data.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        dataset: Some(DatasetConfig {
            kind: DatasetKind::Synthetic,
            root: data.path().to_path_buf(),
            split: "train".into(),
            version: None,
        }),
        epochs: Some(2),
        output_dir: out.path().to_path_buf(),
        checkpoint_every: Some(1),
        ..common::tiny_run()
    };
    let outcome = train(&cfg, None).unwrap();
    assert_eq!(outcome.history.len(), 2);
    assert_eq!(outcome.checkpoints.len(), 2);
    let trace = std::fs::read_to_string(out.path().join("loss.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    let ckpt = Checkpoint::open(&outcome.final_checkpoint).unwrap();
    assert_eq!(ckpt.meta.epoch, 2);
    ckpt.load_model().unwrap();
}

#[test]
fn training_without_data_is_an_error() {
    let empty = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        dataset: Some(DatasetConfig {
            kind: DatasetKind::Synthetic,
            root: empty.path().to_path_buf(),
            split: "train".into(),
            version: None,
        }),
        epochs: Some(1),
        output_dir: empty.path().join("out"),
        ..common::tiny_run()
    };
    assert!(train(&cfg, None).is_err());
}
