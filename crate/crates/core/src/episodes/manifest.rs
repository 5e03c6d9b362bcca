//! JSON dataset manifests and episode indices.
//!
//! A dataset manifest looks like
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "channels": 256,
//!   "videos": [
//!     {
//!       "id": "video-a",
//!       "frame_count": 2,
//!       "features": ["video-a/feat_0000.fts", "video-a/feat_0001.fts"],
//!       "masks": ["video-a/mask_0000.fts", "video-a/mask_0001.fts"],
//!       "classes": [3, 7]
//!     }
//!   ],
//!   "folds": [{ "train": [1, 2], "val": [5], "test": [3, 7] }]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. Feature files are
//! `[C, H, W]` tensors, mask files `[H, W]` label maps holding class ids
//! (0 is background).

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub frame_count: usize,
    pub features: Vec<String>,
    pub masks: Vec<String>,
    pub classes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fold {
    pub train: Vec<u32>,
    #[serde(default)]
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub channels: usize,
    pub videos: Vec<VideoRecord>,
    pub folds: Vec<Fold>,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Parses and validates a manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {} (expected {MANIFEST_VERSION})",
                self.format_version
            )));
        }
        if self.channels == 0 {
            return Err(Error::Manifest("channels must be positive".into()));
        }
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(v.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate video id {:?}", v.id)));
            }
            if v.features.len() != v.frame_count || v.masks.len() != v.frame_count {
                return Err(Error::Manifest(format!(
                    "video {:?}: frame_count {} but {} feature and {} mask files",
                    v.id,
                    v.frame_count,
                    v.features.len(),
                    v.masks.len()
                )));
            }
            for rel in v.features.iter().chain(&v.masks) {
                if !self.resolve(rel).is_file() {
                    return Err(Error::Manifest(format!("video {:?}: missing file {rel}", v.id)));
                }
            }
        }
        for (i, f) in self.folds.iter().enumerate() {
            let train: BTreeSet<_> = f.train.iter().collect();
            let overlap: Vec<_> = f.test.iter().filter(|c| train.contains(c)).collect();
            if !overlap.is_empty() {
                return Err(Error::Manifest(format!(
                    "fold {i}: classes {overlap:?} are in both train and test"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeIndexEntry {
    pub id: String,
    /// Episode directory relative to the index file.
    pub dir: String,
}

/// List of episode directories, as written by the synthetic generator.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpisodeIndex {
    pub format_version: u32,
    pub episodes: Vec<EpisodeIndexEntry>,
}

impl EpisodeIndex {
    pub fn new(episodes: Vec<EpisodeIndexEntry>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            episodes,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let idx: EpisodeIndex =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if idx.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported format_version {}", idx.format_version)));
        }
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("index serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, rel: &str) {
        let p = dir.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"x").unwrap();
    }

    #[test]
    fn validates_files_and_folds() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a/f0.fts");
        write(dir.path(), "a/m0.fts");
        let json = r#"{
            "format_version": 1, "channels": 4,
            "videos": [{"id": "a", "frame_count": 1, "features": ["a/f0.fts"], "masks": ["a/m0.fts"], "classes": [2]}],
            "folds": [{"train": [1], "test": [2]}]
        }"#;
        let path = dir.path().join("m.json");
        fs::write(&path, json).unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.videos[0].classes, vec![2]);

        fs::write(&path, json.replace(r#""train": [1]"#, r#""train": [1, 2]"#)).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Manifest(_))));

        fs::write(&path, json.replace("a/m0.fts", "a/missing.fts")).unwrap();
        let err = DatasetManifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("missing.fts"), "{err}");

        fs::write(&path, json.replace(r#""frame_count": 1"#, r#""frame_count": 2"#)).unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }
}
