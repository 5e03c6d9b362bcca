use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use tti_core::episodes::{count_masks, load_masks};
use tti_core::metrics::evaluate_sequence;

use crate::{EXIT_OK, EXIT_PARTIAL};

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub pred: Vec<PathBuf>,
    pub gt: Option<PathBuf>,
    pub metrics: Vec<String>,
    pub windows: Vec<usize>,
    pub out: Option<PathBuf>,
}

/// Across-run statistics of one metric column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Runs that produced a value for this metric.
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub summaries: Vec<Summary>,
    /// Per-run means, one map per `--pred` directory.
    pub runs: Vec<BTreeMap<String, Option<f64>>>,
    pub flagged: Vec<String>,
}

/// A run directory written by `tti run` holds its masks under `pred/`.
fn pred_root(dir: &Path) -> PathBuf {
    let nested = dir.join("pred");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn gt_root(args: &EvalArgs) -> Result<PathBuf> {
    if let Some(gt) = &args.gt {
        return Ok(gt.clone());
    }
    let fallback = args.pred[0].join("gt");
    if fallback.is_dir() {
        Ok(fallback)
    } else {
        bail!("no ground truth given (use --gt)")
    }
}

fn episode_dirs(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("reading {}", root.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn columns(metrics: &[String], windows: &[usize]) -> Vec<String> {
    let mut cols = Vec::new();
    for m in metrics {
        match m.as_str() {
            "vc" => cols.extend(windows.iter().map(|w| format!("vc{w}"))),
            other => cols.push(other.to_string()),
        }
    }
    cols
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation; 0 for a single value.
fn std_dev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

fn evaluate_run(pred: &Path, gt: &Path, args: &EvalArgs, flagged: &mut Vec<String>) -> Result<BTreeMap<String, Option<f64>>> {
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for id in episode_dirs(pred)? {
        let (pdir, gdir) = (pred.join(&id), gt.join(&id));
        let frames = count_masks(&pdir);
        let outcome = (|| -> Result<_> {
            if !gdir.is_dir() {
                bail!("missing ground truth");
            }
            if count_masks(&gdir) != frames {
                bail!("{} predicted frames but {} ground-truth frames", frames, count_masks(&gdir));
            }
            let p = load_masks(&pdir, frames)?;
            let g = load_masks(&gdir, frames)?;
            Ok(evaluate_sequence(&p, &g, &args.windows)?)
        })();
        let report = match outcome {
            Ok(r) => r,
            Err(e) => {
                flagged.push(format!("{}: {id}: {e:#}", pred.display()));
                continue;
            }
        };
        for m in &args.metrics {
            match m.as_str() {
                "miou" => per_metric.entry("miou".into()).or_default().push(report.miou),
                "bf" => per_metric.entry("bf".into()).or_default().push(report.boundary_f),
                _ => {
                    for (w, v) in &report.vc {
                        let col = per_metric.entry(format!("vc{w}")).or_default();
                        if let Some(v) = v {
                            col.push(*v);
                        }
                    }
                }
            }
        }
    }
    Ok(columns(&args.metrics, &args.windows)
        .into_iter()
        .map(|c| {
            let m = per_metric.get(&c).and_then(|xs| mean(xs));
            (c, m)
        })
        .collect())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn evaluate(args: &EvalArgs) -> Result<EvalReport> {
    if args.pred.is_empty() {
        bail!("at least one --pred directory is required");
    }
    let gt = gt_root(args)?;
    let mut flagged = Vec::new();
    let runs = args
        .pred
        .iter()
        .map(|p| evaluate_run(&pred_root(p), &gt, args, &mut flagged))
        .collect::<Result<Vec<_>>>()?;
    let summaries = columns(&args.metrics, &args.windows)
        .into_iter()
        .map(|c| {
            let xs: Vec<f64> = runs.iter().filter_map(|r| r.get(&c).copied().flatten()).collect();
            Summary {
                metric: c,
                mean: mean(&xs),
                std: std_dev(&xs),
                runs: xs.len(),
            }
        })
        .collect();
    Ok(EvalReport { summaries, runs, flagged })
}

pub fn table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>5}", "metric", "mean", "std", "runs");
    for r in &report.summaries {
        let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>5}", r.metric, fmt_opt(r.mean), fmt_opt(r.std), r.runs);
    }
    s
}

/// Tab-separated `window mean std` rows for the VC columns.
pub fn vc_curve(report: &EvalReport) -> String {
    let mut s = String::from("window\tmean\tstd\n");
    for r in report.summaries.iter().filter(|r| r.metric.starts_with("vc")) {
        let _ = writeln!(s, "{}\t{}\t{}", &r.metric[2..], fmt_opt(r.mean), fmt_opt(r.std));
    }
    s
}

pub fn run(args: &EvalArgs) -> Result<u8> {
    let report = evaluate(args)?;
    print!("{}", table(&report));
    for f in &report.flagged {
        eprintln!("flagged {f}");
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("vc_curve.tsv"), vc_curve(&report))?;
        fs::write(out.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(if report.flagged.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}
