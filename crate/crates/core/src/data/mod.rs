//! Dataset adapters, frame sampling and the synthetic generator.

mod canonical;
pub mod frames;
pub mod hcstvg;
mod sampling;
pub mod synthetic;
pub mod vidstg;
pub mod youcook;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::DatasetKind;
use crate::error::{Error, Result};
use crate::types::GroundingAnnotation;

pub use canonical::{CanonicalAnnotation, CanonicalBox, TubeJson, ANNOTATION_SCHEMA_VERSION};
pub use sampling::{remap_annotation, resize_clip, sample_frames, uniform_indices};

/// A record the loader refused, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Frame directory, relative to the manifest's data root.
    pub video: String,
    pub annotation: GroundingAnnotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedRecord>,
}

impl DatasetManifest {
    pub fn new(kind: DatasetKind, split: impl Into<String>) -> Self {
        Self {
            kind,
            split: split.into(),
            entries: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn skip_count(&self) -> usize {
        self.skipped.len()
    }

    pub(crate) fn skip(&mut self, id: impl Into<String>, reason: impl Into<String>) {
        let (id, reason) = (id.into(), reason.into());
        log::warn!("skipping record {id}: {reason}");
        self.skipped.push(SkippedRecord { id, reason });
    }

    pub fn annotations(&self) -> impl Iterator<Item = &GroundingAnnotation> {
        self.entries.iter().map(|e| &e.annotation)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ManifestFile {
            schema_version: ANNOTATION_SCHEMA_VERSION,
            kind: self.kind,
            split: self.split.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestFileEntry {
                    video: e.video.clone(),
                    annotation: CanonicalAnnotation::from_annotation(&e.annotation),
                })
                .collect(),
            skipped: self.skipped.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str, strict: bool) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(text)?;
        if file.schema_version != ANNOTATION_SCHEMA_VERSION {
            return Err(Error::parse(
                "manifest",
                "schema_version",
                format!("unsupported version {}", file.schema_version),
            ));
        }
        // pointing-game samples are single frames, never strict intervals
        let strict = strict && file.kind != DatasetKind::Youcook;
        let entries = file
            .entries
            .into_iter()
            .map(|e| {
                Ok(ManifestEntry {
                    video: e.video,
                    annotation: e.annotation.to_annotation(strict)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: file.kind,
            split: file.split,
            entries,
            skipped: file.skipped,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, strict: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, strict)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    schema_version: u32,
    kind: DatasetKind,
    split: String,
    entries: Vec<ManifestFileEntry>,
    #[serde(default)]
    skipped: Vec<SkippedRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFileEntry {
    video: String,
    annotation: CanonicalAnnotation,
}

/// Loads a dataset of the given kind from `root`. Synthetic datasets are read
/// from the `manifest.json` the generator writes.
pub fn load_dataset(
    kind: DatasetKind,
    root: &Path,
    split: &str,
    version: Option<u8>,
    strict: bool,
) -> Result<DatasetManifest> {
    match kind {
        DatasetKind::Vidstg => vidstg::load_vidstg(root, split, strict),
        DatasetKind::Hcstvg => hcstvg::load_hcstvg(root, version.unwrap_or(1), split, strict),
        DatasetKind::Youcook => youcook::load_youcook_interactions(root),
        DatasetKind::Synthetic => {
            DatasetManifest::load(&root.join(synthetic::MANIFEST_FILE), strict)
        }
    }
}

/// Frame directory of an entry under a data root.
pub fn video_dir(root: &Path, entry: &ManifestEntry) -> PathBuf {
    root.join(&entry.video)
}
