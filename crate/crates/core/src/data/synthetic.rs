//! Moving-shapes videos with exactly known tubes.
//!
//! Every video shows one to three colored shapes. The target appears only
//! during a sub-interval and moves in a straight line; distractors stay for
//! the whole clip and never share the target's (color, shape) pair, so the
//! caption `the <color> <shape> moves <direction>` names exactly one object.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frames, DatasetManifest, ManifestEntry};
use crate::config::DatasetKind;
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;
use crate::types::{BoundingBox, GroundingAnnotation, SentenceKind, TemporalInterval, VideoClip};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FRAME_RATE: f64 = 10.0;

/// 8-bit colors, so clips survive a PNG round trip unchanged.
const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [230, 25, 25]),
    ("green", [25, 200, 25]),
    ("blue", [40, 60, 240]),
    ("yellow", [240, 230, 20]),
    ("magenta", [230, 30, 230]),
    ("cyan", [20, 230, 230]),
    ("white", [245, 245, 245]),
    ("orange", [250, 140, 10]),
];
const BACKGROUND: u8 = 20;
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "diamond"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Motion {
    pub const ALL: [Motion; 5] = [
        Motion::Left,
        Motion::Right,
        Motion::Up,
        Motion::Down,
        Motion::Still,
    ];

    fn direction(self) -> (f64, f64) {
        match self {
            Motion::Left => (-1.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Up => (0.0, -1.0),
            Motion::Down => (0.0, 1.0),
            Motion::Still => (0.0, 0.0),
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Motion::Left => "moves left",
            Motion::Right => "moves right",
            Motion::Up => "moves up",
            Motion::Down => "moves down",
            Motion::Still => "stays still",
        }
    }
}

pub fn caption(color: &str, shape: &str, motion: Motion) -> String {
    format!("the {color} {shape} {}", motion.phrase())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub motions: Vec<Motion>,
    /// Shortest and longest target appearance, as fractions of the clip.
    pub min_visible: f64,
    pub max_visible: f64,
    pub max_distractors: usize,
    /// When set, every object's (color, shape) is drawn from this list.
    pub combos: Option<Vec<(String, String)>>,
    pub strict: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 16,
            num_frames: 16,
            height: 64,
            width: 64,
            colors: ["red", "green", "blue"].map(String::from).to_vec(),
            shapes: ["circle", "square", "triangle"].map(String::from).to_vec(),
            motions: Motion::ALL.to_vec(),
            min_visible: 0.25,
            max_visible: 0.75,
            max_distractors: 2,
            combos: None,
            strict: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.colors.is_empty() || self.shapes.is_empty() || self.motions.is_empty() {
            return Err(Error::Config(
                "synthetic vocabularies must be nonempty".into(),
            ));
        }
        if self.strict && self.num_frames < 2 {
            return Err(Error::Config(
                "strict intervals need clips of at least 2 frames".into(),
            ));
        }
        if self.num_frames == 0 || self.height < 16 || self.width < 16 {
            return Err(Error::Config(
                "synthetic frames must be at least 16x16".into(),
            ));
        }
        if !(0.0 < self.min_visible
            && self.min_visible <= self.max_visible
            && self.max_visible <= 1.0)
        {
            return Err(Error::Config(
                "visibility fractions must satisfy 0 < min <= max <= 1".into(),
            ));
        }
        for c in &self.colors {
            color_rgb(c)?;
        }
        for s in &self.shapes {
            if !SHAPES.contains(&s.as_str()) {
                return Err(Error::Config(format!("unknown shape `{s}`")));
            }
        }
        if let Some(combos) = &self.combos {
            if combos.is_empty() {
                return Err(Error::Config("combo list must be nonempty".into()));
            }
            for (c, s) in combos {
                color_rgb(c)?;
                if !SHAPES.contains(&s.as_str()) {
                    return Err(Error::Config(format!("unknown shape `{s}`")));
                }
            }
        }
        Ok(())
    }

    /// The (color, shape) pairs objects may take.
    pub fn allowed_combos(&self) -> Vec<(String, String)> {
        match &self.combos {
            Some(c) => c.clone(),
            None => self
                .colors
                .iter()
                .flat_map(|c| self.shapes.iter().map(move |s| (c.clone(), s.clone())))
                .collect(),
        }
    }

    /// Every word any caption of this spec can use.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: BTreeSet<String> = ["the"].map(String::from).into();
        for (c, s) in self.allowed_combos() {
            words.insert(c);
            words.insert(s);
        }
        words.extend(self.colors.iter().cloned());
        words.extend(self.shapes.iter().cloned());
        for m in &self.motions {
            words.extend(m.phrase().split(' ').map(String::from));
        }
        Vocabulary::new(words)
    }
}

fn color_rgb(name: &str) -> Result<[f32; 3]> {
    PALETTE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, rgb)| rgb.map(|v| v as f32 / 255.0))
        .ok_or_else(|| Error::Config(format!("unknown color `{name}`")))
}

/// One drawn object: a shape of half-size `r` (pixels) whose center moves
/// linearly from `start` by `velocity` per frame while visible.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub color: String,
    pub shape: String,
    pub motion: Motion,
    pub half_size: f64,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub visible: TemporalInterval,
}

impl SceneObject {
    /// Pixel center at frame `t`.
    pub fn center(&self, t: usize) -> (f64, f64) {
        let dt = t as f64 - self.visible.start() as f64;
        (
            self.start.0 + self.velocity.0 * dt,
            self.start.1 + self.velocity.1 * dt,
        )
    }

    fn covers(&self, t: usize, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center(t);
        let (dx, dy, r) = (px - cx, py - cy, self.half_size);
        match self.shape.as_str() {
            "circle" => dx * dx + dy * dy <= r * r,
            "square" => dx.abs() <= r && dy.abs() <= r,
            "triangle" => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            "diamond" => dx.abs() + dy.abs() <= r,
            _ => false,
        }
    }

    /// Normalized bounding box at frame `t`.
    pub fn bounding_box(&self, t: usize, width: usize, height: usize) -> Result<BoundingBox> {
        let (cx, cy) = self.center(t);
        BoundingBox::new(
            cx / width as f64,
            cy / height as f64,
            2.0 * self.half_size / width as f64,
            2.0 * self.half_size / height as f64,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub clip: VideoClip,
    pub annotation: GroundingAnnotation,
    /// The target first, then the distractors.
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub videos: Vec<SyntheticVideo>,
}

impl SyntheticDataset {
    pub fn manifest(&self) -> DatasetManifest {
        let mut m = DatasetManifest::new(DatasetKind::Synthetic, "train");
        m.entries = self
            .videos
            .iter()
            .map(|v| ManifestEntry {
                video: format!("videos/{}", v.annotation.video_id),
                annotation: v.annotation.clone(),
            })
            .collect();
        m
    }

    /// Writes `videos/<id>/frame_*.png`, the manifest and the vocabulary.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for v in &self.videos {
            frames::save_clip(&v.clip, &dir.join("videos").join(&v.annotation.video_id))?;
        }
        self.manifest().save(&dir.join(MANIFEST_FILE))?;
        self.spec.vocabulary().save(&dir.join(VOCAB_FILE))?;
        let spec = serde_json::to_string_pretty(&self.spec)?;
        let path = dir.join("spec.json");
        std::fs::write(&path, spec).map_err(|e| Error::io(&path, e))
    }
}

/// Places an object moving along `motion` so it stays inside the frame for
/// all of `visible`.
fn place(
    rng: &mut ChaCha8Rng,
    color: &str,
    shape: &str,
    motion: Motion,
    half_size: f64,
    visible: TemporalInterval,
    width: usize,
    height: usize,
) -> SceneObject {
    let steps = (visible.len() - 1).max(1) as f64;
    let (dx, dy) = motion.direction();
    let (w, h) = (width as f64, height as f64);
    let room = if dx != 0.0 { w } else { h } - 2.0 * half_size;
    let speed = if motion == Motion::Still {
        0.0
    } else {
        rng.random_range(0.6..1.0) * (room / steps).min(2.0 * half_size / 4.0)
    };
    let travel = speed * steps;
    let range = |extent: f64, delta: f64| -> (f64, f64) {
        if delta > 0.0 {
            (half_size, extent - half_size - travel)
        } else if delta < 0.0 {
            (half_size + travel, extent - half_size)
        } else {
            (half_size, extent - half_size)
        }
    };
    let (x_lo, x_hi) = range(w, dx);
    let (y_lo, y_hi) = range(h, dy);
    let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let x = pick(rng, x_lo, x_hi);
    let y = pick(rng, y_lo, y_hi);
    SceneObject {
        color: color.to_string(),
        shape: shape.to_string(),
        motion,
        half_size,
        start: (x, y),
        velocity: (dx * speed, dy * speed),
        visible,
    }
}

fn render(objects: &[SceneObject], spec: &SyntheticSpec) -> Result<VideoClip> {
    let (t_len, h, w) = (spec.num_frames, spec.height, spec.width);
    let bg = BACKGROUND as f32 / 255.0;
    let mut pixels = vec![bg; t_len * h * w * 3];
    let colors = objects
        .iter()
        .map(|o| color_rgb(&o.color))
        .collect::<Result<Vec<_>>>()?;
    for t in 0..t_len {
        // distractors first so the target is never occluded
        for (o, rgb) in objects.iter().zip(&colors).rev() {
            if !o.visible.contains(t) {
                continue;
            }
            let (cx, cy) = o.center(t);
            let r = o.half_size;
            let y0 = (cy - r).floor().max(0.0) as usize;
            let y1 = ((cy + r).ceil() as usize).min(h);
            let x0 = (cx - r).floor().max(0.0) as usize;
            let x1 = ((cx + r).ceil() as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    if o.covers(t, x as f64 + 0.5, y as f64 + 0.5) {
                        let i = ((t * h + y) * w + x) * 3;
                        pixels[i..i + 3].copy_from_slice(rgb);
                    }
                }
            }
        }
    }
    VideoClip::new(pixels, t_len, h, w, FRAME_RATE)
}

fn generate_video(
    index: usize,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticVideo> {
    let combos = spec.allowed_combos();
    let t_len = spec.num_frames;
    let scale = spec.height.min(spec.width) as f64 / 64.0;

    let (color, shape) = combos.choose(rng).expect("nonempty combos").clone();
    let motion = *spec.motions.choose(rng).expect("nonempty motions");
    let min_len = ((spec.min_visible * t_len as f64).round() as usize)
        .clamp(1 + usize::from(spec.strict), t_len);
    let max_len = ((spec.max_visible * t_len as f64).round() as usize).clamp(min_len, t_len);
    let len = rng.random_range(min_len..=max_len);
    let start = rng.random_range(0..=t_len - len);
    let visible = TemporalInterval::new(start, start + len - 1, spec.strict)?;
    let half = rng.random_range(6.0..8.0) * scale;
    let target = place(
        rng,
        &color,
        &shape,
        motion,
        half,
        visible,
        spec.width,
        spec.height,
    );

    let whole = TemporalInterval::new(0, t_len - 1, false)?;
    let others: Vec<&(String, String)> = combos
        .iter()
        .filter(|(c, s)| !(c == &color && s == &shape))
        .collect();
    let n_distractors = if others.is_empty() {
        0
    } else {
        rng.random_range(0..=spec.max_distractors)
    };
    let mut objects = vec![target];
    for _ in 0..n_distractors {
        let (c, s) = (*others.choose(rng).expect("nonempty")).clone();
        let m = *Motion::ALL.choose(rng).expect("nonempty");
        let half = rng.random_range(5.0..8.0) * scale;
        objects.push(place(rng, &c, &s, m, half, whole, spec.width, spec.height));
    }

    let clip = render(&objects, spec)?;
    let boxes = visible
        .frames()
        .map(|t| Ok((t, objects[0].bounding_box(t, spec.width, spec.height)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let annotation = GroundingAnnotation::new(
        format!("synth_{index:05}"),
        caption(&color, &shape, motion),
        SentenceKind::Declarative,
        t_len,
        spec.width,
        spec.height,
        visible,
        boxes,
    )?;
    Ok(SyntheticVideo {
        clip,
        annotation,
        objects,
    })
}

/// Deterministic for a given spec (including its seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let videos = (0..spec.n_videos)
        .map(|i| generate_video(i, spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        videos,
    })
}
