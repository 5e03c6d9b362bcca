use std::fs;
use std::path::Path;

use serde_json::json;
use tti_core::episodes::{sample_episode, write_tensor, DatasetManifest};
use tti_core::numerics::Tensor;
use tti_core::Error;

const C: usize = 3;
const S: usize = 4;

/// Writes `videos` (id, frame count, class present in every frame) and a
/// manifest with one fold testing on classes 1 and 2.
fn toy_dataset(dir: &Path, videos: &[(&str, usize, u32)]) -> DatasetManifest {
    let mut records = Vec::new();
    for (vi, &(id, frames, class)) in videos.iter().enumerate() {
        fs::create_dir_all(dir.join(id)).unwrap();
        let mut features = Vec::new();
        let mut masks = Vec::new();
        for t in 0..frames {
            // Distinct content per video and frame.
            let data = (0..C * S * S).map(|i| (vi * 1000 + t * 100 + i) as f64).collect();
            let f = format!("{id}/feat_{t:04}.fts");
            write_tensor(&Tensor::new(vec![C, S, S], data).unwrap(), dir.join(&f)).unwrap();
            let labels = (0..S * S).map(|p| if p % 3 == t % 3 { class as f64 } else { 0.0 }).collect();
            let m = format!("{id}/mask_{t:04}.fts");
            write_tensor(&Tensor::new(vec![S, S], labels).unwrap(), dir.join(&m)).unwrap();
            features.push(f);
            masks.push(m);
        }
        records.push(json!({"id": id, "frame_count": frames, "features": features, "masks": masks, "classes": [class]}));
    }
    let manifest = json!({
        "format_version": 1,
        "channels": C,
        "videos": records,
        "folds": [{"train": [5], "val": [], "test": [1, 2]}]
    });
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    DatasetManifest::load(&path).unwrap()
}

#[test]
fn support_never_comes_from_the_query_video() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy_dataset(dir.path(), &[("a", 6, 1), ("b", 5, 1), ("c", 4, 1), ("d", 6, 2)]);
    for seed in 0..100 {
        let ep = sample_episode(&m, 0, 1, 3, 3, seed).unwrap();
        let origin = ep.origin.as_ref().unwrap();
        assert!(origin.support_frames.iter().all(|(v, _)| v != &origin.query_video));
        assert!(origin.support_frames.iter().all(|(v, _)| v != "d"));
        let distinct: std::collections::BTreeSet<_> = origin.support_frames.iter().collect();
        assert_eq!(distinct.len(), 3);
        for s in &ep.support {
            assert!(ep.query.iter().all(|q| q.tensor() != s.features.tensor()));
            assert!(s.mask.count_positive() > 0);
        }
        assert_eq!(ep.frames(), 3);
        assert!(origin.query_start + 3 <= 6);
    }
}

#[test]
fn sampling_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy_dataset(dir.path(), &[("a", 6, 1), ("b", 5, 1), ("c", 4, 1)]);
    let a = sample_episode(&m, 0, 1, 2, 4, 9).unwrap();
    let b = sample_episode(&m, 0, 1, 2, 4, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.id, "fold0-class1-seed9");
}

#[test]
fn sampling_errors_name_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy_dataset(dir.path(), &[("a", 6, 1), ("b", 2, 2)]);
    let err = sample_episode(&m, 0, 1, 1, 3, 0).unwrap_err();
    assert!(matches!(&err, Error::Sampling(msg) if msg.contains("outside query video")), "{err}");
    let err = sample_episode(&m, 0, 2, 1, 3, 0).unwrap_err();
    assert!(matches!(&err, Error::Sampling(msg) if msg.contains("at least 3 frames")), "{err}");
    let err = sample_episode(&m, 0, 5, 1, 1, 0).unwrap_err();
    assert!(matches!(&err, Error::Sampling(msg) if msg.contains("not in the test split")), "{err}");
    assert!(sample_episode(&m, 3, 1, 1, 1, 0).is_err());
}
