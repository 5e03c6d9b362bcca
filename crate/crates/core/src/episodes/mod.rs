//! Episodes: the support/query data model, tensor files, dataset manifests,
//! episodic sampling and a synthetic generator.

mod fts;
mod manifest;
mod sampling;
mod synthetic;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use fts::{decode_tensor, encode_tensor, read_tensor, write_tensor, DTYPE_F32, MAGIC};
pub use manifest::{DatasetManifest, EpisodeIndex, EpisodeIndexEntry, Fold, VideoRecord, MANIFEST_VERSION};
pub use sampling::sample_episode;
pub use synthetic::{generate_synthetic, AreaSpec, SyntheticSpec};

use crate::classifier::{BinaryMask, FrameFeatures, SupportShot};
use crate::error::{Error, Result};
use crate::metrics::MaskSequence;

/// One few-shot task: K labelled support images and N_v consecutive query
/// frames of a video, with optional query ground truth.
///
/// Features are stored as read (not normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub class_id: u32,
    pub seed: u64,
    pub support: Vec<SupportShot>,
    pub query: Vec<FrameFeatures>,
    pub gt: Option<MaskSequence>,
    /// Where a sampled episode's frames came from.
    pub origin: Option<SampleOrigin>,
}

/// Video ids and frame indices behind a sampled episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub query_video: String,
    pub query_start: usize,
    pub support_frames: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct EpisodeMeta {
    id: String,
    class_id: u32,
    seed: u64,
    query_frames: usize,
    shots: usize,
    has_gt: bool,
}

const META_FILE: &str = "episode.json";

impl Episode {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.query.first() else {
            return Err(Error::invalid(format!("episode {}: no query frames", self.id)));
        };
        if self.support.is_empty() {
            return Err(Error::invalid(format!("episode {}: no support shots", self.id)));
        }
        let (c, h, w) = (first.channels(), first.height(), first.width());
        if self.query.iter().any(|f| (f.channels(), f.height(), f.width()) != (c, h, w)) {
            return Err(Error::invalid(format!("episode {}: query frames differ in shape", self.id)));
        }
        for (k, shot) in self.support.iter().enumerate() {
            if shot.features.channels() != c {
                return Err(Error::invalid(format!(
                    "episode {}: support {k} has {} channels, query has {c}",
                    self.id,
                    shot.features.channels()
                )));
            }
            if (shot.mask.height(), shot.mask.width()) != (shot.features.height(), shot.features.width()) {
                return Err(Error::invalid(format!("episode {}: support {k} mask does not match its features", self.id)));
            }
        }
        if let Some(gt) = &self.gt {
            if gt.len() != self.query.len() {
                return Err(Error::invalid(format!(
                    "episode {}: {} ground-truth masks for {} query frames",
                    self.id,
                    gt.len(),
                    self.query.len()
                )));
            }
            if (gt.masks()[0].height(), gt.masks()[0].width()) != (h, w) {
                return Err(Error::invalid(format!("episode {}: ground truth does not match query size", self.id)));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.query.len()
    }

    pub fn shots(&self) -> usize {
        self.support.len()
    }

    /// Writes the episode as FTS files plus `episode.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, f) in self.query.iter().enumerate() {
            write_tensor(f.tensor(), dir.join(format!("query_{t:04}.fts")))?;
        }
        for (k, shot) in self.support.iter().enumerate() {
            write_tensor(shot.features.tensor(), dir.join(format!("support_{k:02}.fts")))?;
            write_tensor(&shot.mask.to_tensor(), dir.join(format!("support_mask_{k:02}.fts")))?;
        }
        if let Some(gt) = &self.gt {
            for (t, m) in gt.masks().iter().enumerate() {
                write_tensor(&m.to_tensor(), dir.join(format!("mask_{t:04}.fts")))?;
            }
        }
        let meta = EpisodeMeta {
            id: self.id.clone(),
            class_id: self.class_id,
            seed: self.seed,
            query_frames: self.query.len(),
            shots: self.support.len(),
            has_gt: self.gt.is_some(),
        };
        let path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("episode metadata serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads an episode written by [`Episode::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: EpisodeMeta =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let query = (0..meta.query_frames)
            .map(|t| FrameFeatures::new(read_tensor(dir.join(format!("query_{t:04}.fts")))?))
            .collect::<Result<Vec<_>>>()?;
        let support = (0..meta.shots)
            .map(|k| {
                Ok(SupportShot {
                    features: FrameFeatures::new(read_tensor(dir.join(format!("support_{k:02}.fts")))?)?,
                    mask: BinaryMask::from_tensor(&read_tensor(dir.join(format!("support_mask_{k:02}.fts")))?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gt = if meta.has_gt {
            Some(load_masks(dir, meta.query_frames)?)
        } else {
            None
        };
        let ep = Episode {
            id: meta.id,
            class_id: meta.class_id,
            seed: meta.seed,
            support,
            query,
            gt,
            origin: None,
        };
        ep.validate()?;
        Ok(ep)
    }
}

/// Reads `mask_0000.fts ..` from `dir`.
pub fn load_masks(dir: &Path, frames: usize) -> Result<MaskSequence> {
    let masks = (0..frames)
        .map(|t| BinaryMask::from_tensor(&read_tensor(dir.join(format!("mask_{t:04}.fts")))?))
        .collect::<Result<Vec<_>>>()?;
    MaskSequence::new(masks)
}

/// Counts consecutive `mask_NNNN.fts` files in `dir`.
pub fn count_masks(dir: &Path) -> usize {
    (0..).take_while(|t| dir.join(format!("mask_{t:04}.fts")).is_file()).count()
}

pub fn write_masks(dir: &Path, masks: &[BinaryMask]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, m) in masks.iter().enumerate() {
        write_tensor(&m.to_tensor(), dir.join(format!("mask_{t:04}.fts")))?;
    }
    Ok(())
}
