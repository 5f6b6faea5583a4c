mod common;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stvg_core::config::DatasetKind;
use stvg_core::data::frames::load_clip;
use stvg_core::data::{remap_annotation, uniform_indices};
use stvg_core::data::synthetic::{caption, SyntheticSpec, FRAME_RATE, MANIFEST_FILE};
use stvg_core::data::{hcstvg, load_dataset, vidstg, youcook, DatasetManifest};
use stvg_core::types::{SentenceKind, TemporalInterval};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn assert_coverage(m: &DatasetManifest) {
    for a in m.annotations() {
        let covered: Vec<usize> = a.boxes().keys().copied().collect();
        assert_eq!(covered, a.interval().frames().collect::<Vec<_>>(), "{}", a.video_id);
        assert!(a.interval().end() < a.frame_count);
    }
}

#[test]
fn vidstg_fixture() {
    let m = load_dataset(DatasetKind::Vidstg, &fixtures().join("vidstg"), "train", None, true).unwrap();
    assert_eq!(m.len(), 5);
    assert_eq!(m.skip_count(), 1);
    let count = |k| m.annotations().filter(|a| a.sentence_kind == k).count();
    assert_eq!(count(SentenceKind::Declarative), 3);
    assert_eq!(count(SentenceKind::Interrogative), 2);
    assert!(m.skipped[0].reason.contains("strict"), "{}", m.skipped[0].reason);
    assert_coverage(&m);

    // the same records without the strict rule keep the single-frame one
    let text = std::fs::read_to_string(fixtures().join("vidstg/train.json")).unwrap();
    let loose = vidstg::manifest_from_records(&vidstg::parse_records(&text).unwrap(), "train", false);
    assert_eq!((loose.len(), loose.skip_count()), (6, 0));
}

#[test]
fn hcstvg_fixtures_and_split_names() {
    let root = fixtures().join("hcstvg");
    let v1 = load_dataset(DatasetKind::Hcstvg, &root, "train", Some(1), true).unwrap();
    assert_eq!((v1.len(), v1.skip_count()), (3, 1));
    assert_coverage(&v1);
    assert!(v1.entries.iter().all(|e| e.video.starts_with("v1/frames/")));

    // the second release reports on its validation split
    assert_eq!(hcstvg::split_name(2, "test").unwrap(), "val");
    assert_eq!(hcstvg::split_name(1, "test").unwrap(), "test");
    assert!(hcstvg::split_name(1, "val").is_err());
    let v2 = load_dataset(DatasetKind::Hcstvg, &root, "test", Some(2), true).unwrap();
    assert_eq!((v2.len(), v2.skip_count()), (1, 0));
    assert_eq!(v2.split, "val");

    // 1-based inclusive on disk, 0-based inside
    let first = v1.annotations().find(|a| a.video_id == "12_qV2bpmQ7rls.mp4").unwrap();
    assert_eq!((first.interval().start(), first.interval().end()), (2, 5));
    assert_eq!(first.frame_count, 10);
    let b = first.box_at(2).unwrap().to_corner_box(640, 360);
    assert!((b.x - 100.0).abs() < 1e-9 && (b.w - 60.0).abs() < 1e-9);
}

#[test]
fn youcook_fixture_is_single_frame() {
    let root = fixtures().join("youcook");
    let text = std::fs::read_to_string(root.join("annotations.json")).unwrap();
    assert_eq!(youcook::parse_records(&text).unwrap().len(), 4);
    let m = load_dataset(DatasetKind::Youcook, &root, "test", None, true).unwrap();
    assert_eq!((m.len(), m.skip_count()), (3, 1));
    for a in m.annotations() {
        assert_eq!(a.boxes().len(), 1);
        assert_eq!(a.interval().len(), 1);
    }
    let first = m.annotations().next().unwrap();
    assert_eq!(first.interval().start(), 41);
}

#[test]
fn schema_errors_name_the_field() {
    let err = vidstg::parse_records(r#"[{"vid": "x", "frame_count": "many"}]"#).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('x'), "{msg}");
    assert!(hcstvg::parse_records("[1, 2]").is_err());
}

#[test]
fn uniform_sampling_arithmetic() {
    let idx = uniform_indices(256, 128);
    assert_eq!(idx.len(), 128);
    assert!(idx.iter().enumerate().all(|(i, &f)| f == 2 * i));
    assert_eq!(uniform_indices(10, 16), (0..10).collect::<Vec<_>>());
}

#[test]
fn remapped_boxes_come_from_their_sampled_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for _ in 0..500 {
        let total = rng.random_range(4..200);
        let max = rng.random_range(2..=32);
        let ann = common::random_annotation(&mut rng, total);
        let indices = uniform_indices(total, max);
        let Ok(remapped) = remap_annotation(&ann, &indices, true) else {
            // rejected only when fewer than two sampled frames fall inside
            let inside = indices.iter().filter(|&&f| ann.interval().contains(f)).count();
            assert!(inside < 2);
            continue;
        };
        let inside: Vec<usize> = (0..indices.len())
            .filter(|&i| ann.interval().contains(indices[i]))
            .collect();
        assert_eq!(remapped.interval().start(), inside[0]);
        assert_eq!(remapped.interval().end(), *inside.last().unwrap());
        assert_eq!(remapped.frame_count, indices.len());
        for &i in &inside {
            assert_eq!(remapped.box_at(i), ann.box_at(indices[i]));
        }
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn stride_two_interval_remap() {
    let boxes = (10..=20)
        .map(|t| (t, stvg_core::types::BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap()))
        .collect();
    let ann = stvg_core::types::GroundingAnnotation::new(
        "v",
        "c",
        SentenceKind::Unknown,
        256,
        64,
        64,
        TemporalInterval::new(10, 20, true).unwrap(),
        boxes,
    )
    .unwrap();
    let r = remap_annotation(&ann, &uniform_indices(256, 128), true).unwrap();
    assert_eq!((r.interval().start(), r.interval().end()), (5, 10));
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = common::tiny_spec(4, 3);
    let (a, b) = (common::synthetic(&spec), common::synthetic(&spec));
    for (x, y) in a.videos.iter().zip(&b.videos) {
        assert_eq!(x.clip.pixels(), y.clip.pixels());
        assert_eq!(x.annotation, y.annotation);
    }
    let other = common::synthetic(&common::tiny_spec(4, 4));
    assert_ne!(a.videos[0].clip.pixels(), other.videos[0].clip.pixels());
}

#[test]
fn synthetic_captions_are_unambiguous() {
    let spec = SyntheticSpec {
        n_videos: 24,
        max_distractors: 3,
        ..common::tiny_spec(24, 5)
    };
    for v in common::synthetic(&spec).videos {
        let target = &v.objects[0];
        assert_eq!(v.annotation.caption, caption(&target.color, &target.shape, target.motion));
        for d in &v.objects[1..] {
            assert_ne!((&d.color, &d.shape), (&target.color, &target.shape));
        }
        for t in v.annotation.interval().frames() {
            let b = target.bounding_box(t, spec.width, spec.height).unwrap();
            assert_eq!(v.annotation.box_at(t), Some(&b));
        }
        assert_eq!(v.annotation.interval(), target.visible);
    }
}

#[test]
fn held_out_combinations_never_appear() {
    let combos = vec![("red".to_string(), "circle".to_string())];
    let base = common::tiny_spec(12, 6);
    let seen: Vec<(String, String)> =
        base.allowed_combos().into_iter().filter(|c| !combos.contains(c)).collect();
    let spec = SyntheticSpec {
        combos: Some(seen),
        ..base
    };
    for v in common::synthetic(&spec).videos {
        assert_ne!((v.objects[0].color.as_str(), v.objects[0].shape.as_str()), ("red", "circle"));
    }
}

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::synthetic(&common::tiny_spec(3, 7));
    ds.write(dir.path()).unwrap();
    assert!(dir.path().join(MANIFEST_FILE).exists());
    let m = load_dataset(DatasetKind::Synthetic, dir.path(), "train", None, true).unwrap();
    assert_eq!(m.len(), 3);
    for (entry, v) in m.entries.iter().zip(&ds.videos) {
        assert_eq!(entry.annotation.interval(), v.annotation.interval());
        let clip = load_clip(&dir.path().join(&entry.video), FRAME_RATE).unwrap();
        assert_eq!(clip.num_frames(), v.clip.num_frames());
        let worst = clip
            .pixels()
            .iter()
            .zip(v.clip.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn missing_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(DatasetKind::Vidstg, dir.path(), "train", None, true).is_err());
    assert!(load_clip(dir.path(), FRAME_RATE).is_err());
}
