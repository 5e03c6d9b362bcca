use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use tti_core::episodes::{generate_synthetic, EpisodeIndex, EpisodeIndexEntry, SyntheticSpec};

use super::run::episode_seed;

/// Writes `count` synthetic episodes and an `episodes.json` index to `out`.
pub fn run(spec: Option<&Path>, count: usize, seed: u64, out: &Path) -> Result<EpisodeIndex> {
    let base = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SyntheticSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    base.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut ep = generate_synthetic(&SyntheticSpec {
            seed: episode_seed(seed, i),
            ..base.clone()
        })?;
        let dir = format!("ep{i:04}");
        ep.id = dir.clone();
        ep.save(&out.join(&dir))?;
        entries.push(EpisodeIndexEntry { id: ep.id, dir });
    }
    let index = EpisodeIndex::new(entries);
    index.save(&out.join("episodes.json"))?;
    println!("wrote {count} episodes to {}", out.display());
    Ok(index)
}
