use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{read_tensor, DatasetManifest, Episode, SampleOrigin};
use crate::classifier::{BinaryMask, FrameFeatures, SupportShot};
use crate::error::{Error, Result};
use crate::metrics::MaskSequence;

/// Samples a one-way episode for `class_id` from the test split of `fold`.
///
/// The query is `frames` consecutive frames of one video containing the
/// class; the `shots` support images are distinct frames, drawn without
/// replacement, from other videos whose mask contains the class.
pub fn sample_episode(
    manifest: &DatasetManifest,
    fold: usize,
    class_id: u32,
    shots: usize,
    frames: usize,
    seed: u64,
) -> Result<Episode> {
    if shots == 0 || frames == 0 {
        return Err(Error::Sampling("shots and frames must be at least 1".into()));
    }
    let Some(f) = manifest.folds.get(fold) else {
        return Err(Error::Sampling(format!("fold {fold} does not exist")));
    };
    if !f.test.contains(&class_id) {
        return Err(Error::Sampling(format!("class {class_id} is not in the test split of fold {fold}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<usize> = manifest
        .videos
        .iter()
        .enumerate()
        .filter(|(_, v)| v.classes.contains(&class_id) && v.frame_count >= frames)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Sampling(format!(
            "no video contains class {class_id} with at least {frames} frames"
        )));
    }
    let qv = eligible[rng.random_range(0..eligible.len())];
    let video = &manifest.videos[qv];
    let start = rng.random_range(0..=video.frame_count - frames);

    let mut candidates: Vec<(usize, usize)> = manifest
        .videos
        .iter()
        .enumerate()
        .filter(|&(i, v)| i != qv && v.classes.contains(&class_id))
        .flat_map(|(i, v)| (0..v.frame_count).map(move |t| (i, t)))
        .collect();
    candidates.shuffle(&mut rng);
    let mut support = Vec::with_capacity(shots);
    let mut support_frames = Vec::with_capacity(shots);
    for (vi, t) in candidates {
        if support.len() == shots {
            break;
        }
        let v = &manifest.videos[vi];
        let mask = BinaryMask::from_label_map(&read_tensor(manifest.resolve(&v.masks[t]))?, class_id)?;
        if mask.count_positive() == 0 {
            continue;
        }
        let features = FrameFeatures::new(read_tensor(manifest.resolve(&v.features[t]))?)?;
        support.push(SupportShot { features, mask });
        support_frames.push((v.id.clone(), t));
    }
    if support.len() < shots {
        return Err(Error::Sampling(format!(
            "need {shots} support frames with class {class_id} outside query video {:?}, found {}",
            video.id,
            support.len()
        )));
    }

    let mut query = Vec::with_capacity(frames);
    let mut gt = Vec::with_capacity(frames);
    for t in start..start + frames {
        query.push(FrameFeatures::new(read_tensor(manifest.resolve(&video.features[t]))?)?);
        gt.push(BinaryMask::from_label_map(&read_tensor(manifest.resolve(&video.masks[t]))?, class_id)?);
    }
    let ep = Episode {
        id: format!("fold{fold}-class{class_id}-seed{seed}"),
        class_id,
        seed,
        support,
        query,
        gt: Some(MaskSequence::new(gt)?),
        origin: Some(SampleOrigin {
            query_video: video.id.clone(),
            query_start: start,
            support_frames,
        }),
    };
    ep.validate()?;
    Ok(ep)
}
