use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use tti_core::episodes::{generate_synthetic, sample_episode, write_masks, DatasetManifest, Episode, EpisodeIndex};
use tti_core::metrics::{evaluate_sequence, MaskSequence};
use tti_core::optimizer::{run_episode, IterationRecord, Mode, TtiConfig};

use crate::config::{InputSpec, RunConfig};
use crate::{EXIT_OK, EXIT_PARTIAL};

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub output: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRecord {
    pub id: String,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keyframe: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_two_skipped: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub vc: BTreeMap<String, Option<f64>>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub vc_skipped_windows: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundary_f: Option<f64>,
}

impl ResultRecord {
    fn failed(id: String, error: String) -> Self {
        Self {
            id,
            status: "error",
            error: Some(error),
            frames: None,
            keyframe: None,
            stage_two_skipped: None,
            miou: None,
            vc: BTreeMap::new(),
            vc_skipped_windows: BTreeMap::new(),
            boundary_f: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct StepSummary {
    stage: u8,
    iteration: usize,
    lambda_entropy: f64,
    lambda_kl: f64,
    lambda_global: f64,
    ce: f64,
    entropy: f64,
    kl: f64,
    global: f64,
    total: f64,
}

impl From<&IterationRecord> for StepSummary {
    fn from(r: &IterationRecord) -> Self {
        Self {
            stage: r.stage,
            iteration: r.iteration,
            lambda_entropy: r.lambdas.entropy,
            lambda_kl: r.lambdas.kl,
            lambda_global: r.lambdas.global,
            ce: r.ce,
            entropy: r.entropy,
            kl: r.kl,
            global: r.global,
            total: r.total,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct TraceSummary {
    id: String,
    keyframe: Option<usize>,
    stage_two_skipped: Option<String>,
    steps: Vec<StepSummary>,
}

/// Seed of the `index`-th episode of a run.
pub fn episode_seed(run_seed: u64, index: usize) -> u64 {
    run_seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

type Prepared = (String, std::result::Result<Episode, String>);

fn prepare(cfg: &RunConfig) -> Result<Vec<Prepared>> {
    match &cfg.input {
        InputSpec::Synthetic(spec) => Ok((0..cfg.episodes)
            .map(|i| {
                let id = format!("run{}-ep{i:04}", cfg.seed);
                let spec = tti_core::episodes::SyntheticSpec {
                    seed: episode_seed(cfg.seed, i),
                    ..spec.clone()
                };
                let ep = generate_synthetic(&spec).map(|mut ep| {
                    ep.id = id.clone();
                    ep
                });
                (id, ep.map_err(|e| e.to_string()))
            })
            .collect()),
        InputSpec::Episodes { index } => {
            let idx = EpisodeIndex::load(index)?;
            let base = index.parent().unwrap_or(Path::new(""));
            Ok(idx
                .episodes
                .iter()
                .map(|e| (e.id.clone(), Episode::load(&base.join(&e.dir)).map_err(|e| e.to_string())))
                .collect())
        }
        InputSpec::Manifest {
            path,
            fold,
            shots,
            frames,
            classes,
        } => {
            let manifest = DatasetManifest::load(path)?;
            let classes = match classes {
                Some(c) => c.clone(),
                None => manifest
                    .folds
                    .get(*fold)
                    .with_context(|| format!("fold {fold} does not exist"))?
                    .test
                    .clone(),
            };
            anyhow::ensure!(!classes.is_empty(), "no classes to sample from");
            Ok((0..cfg.episodes)
                .map(|i| {
                    let seed = episode_seed(cfg.seed, i);
                    let class = classes[(seed % classes.len() as u64) as usize];
                    let id = format!("run{}-ep{i:04}", cfg.seed);
                    let ep = sample_episode(&manifest, *fold, class, *shots, *frames, seed).map(|mut ep| {
                        ep.id = id.clone();
                        ep
                    });
                    (id, ep.map_err(|e| e.to_string()))
                })
                .collect())
        }
    }
}

fn process(ep: &Episode, tti: &TtiConfig, cfg: &RunConfig, out: &Path) -> Result<(ResultRecord, TraceSummary)> {
    let result = run_episode(ep, tti)?;
    write_masks(&out.join("pred").join(&ep.id), &result.masks)?;
    let mut record = ResultRecord {
        id: ep.id.clone(),
        status: "ok",
        error: None,
        frames: Some(ep.frames()),
        keyframe: result.trace.keyframe,
        stage_two_skipped: result.trace.stage_two_skipped.clone(),
        miou: None,
        vc: BTreeMap::new(),
        vc_skipped_windows: BTreeMap::new(),
        boundary_f: None,
    };
    if let Some(gt) = &ep.gt {
        write_masks(&out.join("gt").join(&ep.id), gt.masks())?;
        let pred = MaskSequence::new(result.masks)?;
        let report = evaluate_sequence(&pred, gt, &cfg.windows)?;
        let wants = |m: &str| cfg.metrics.iter().any(|x| x == m);
        if wants("miou") {
            record.miou = Some(report.miou);
        }
        if wants("vc") {
            record.vc = report.vc.iter().map(|(w, v)| (w.to_string(), *v)).collect();
            record.vc_skipped_windows = report.skipped_windows.iter().map(|(w, v)| (w.to_string(), *v)).collect();
        }
        if wants("bf") {
            record.boundary_f = Some(report.boundary_f);
        }
    }
    let trace = TraceSummary {
        id: ep.id.clone(),
        keyframe: result.trace.keyframe,
        stage_two_skipped: result.trace.stage_two_skipped,
        steps: result.trace.records.iter().map(StepSummary::from).collect(),
    };
    Ok((record, trace))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Runs every episode of the config and writes `results.jsonl`,
/// `traces.jsonl` and the predicted masks under the output directory.
/// Returns the per-episode records sorted by id and the exit code.
pub fn run(config: &Path, overrides: &RunOverrides) -> Result<(Vec<ResultRecord>, u8)> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(m) = overrides.mode {
        cfg.tti.mode = m;
    }
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(w) = overrides.workers {
        cfg.workers = w;
    }
    if let Some(o) = &overrides.output {
        cfg.output = Some(o.clone());
    }
    cfg.validate()?;
    let out = cfg.output.clone().context("no output directory (use --out or set `output`)")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let episodes = prepare(&cfg)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    let mut outcomes: Vec<(ResultRecord, Option<TraceSummary>)> = pool.install(|| {
        episodes
            .par_iter()
            .map(|(id, ep)| match ep {
                Ok(ep) => match process(ep, &cfg.tti, &cfg, &out) {
                    Ok((r, t)) => (r, Some(t)),
                    Err(e) => (ResultRecord::failed(id.clone(), format!("{e:#}")), None),
                },
                Err(e) => (ResultRecord::failed(id.clone(), e.clone()), None),
            })
            .collect()
    });
    outcomes.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let records: Vec<ResultRecord> = outcomes.iter().map(|(r, _)| r.clone()).collect();
    let traces: Vec<&TraceSummary> = outcomes.iter().filter_map(|(_, t)| t.as_ref()).collect();
    write_jsonl(&out.join("results.jsonl"), &records)?;
    write_jsonl(&out.join("traces.jsonl"), &traces)?;

    let failed: Vec<&ResultRecord> = records.iter().filter(|r| r.status != "ok").collect();
    for r in &failed {
        eprintln!("episode {} failed: {}", r.id, r.error.as_deref().unwrap_or(""));
    }
    let scored: Vec<f64> = records.iter().filter_map(|r| r.miou).collect();
    print!("{} episodes, {} failed", records.len(), failed.len());
    if !scored.is_empty() {
        print!(", mean mIoU {:.4}", scored.iter().sum::<f64>() / scored.len() as f64);
    }
    println!();
    let code = if failed.is_empty() { EXIT_OK } else { EXIT_PARTIAL };
    Ok((records, code))
}
