use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tti_core::episodes::write_tensor;
use tti_core::numerics::Tensor;

fn tti(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tti")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"
seed = 4
episodes = 5
[input.synthetic]
height = 10
width = 10
frames = 6
drift = 0.05
noise = 0.3
[tti]
iterations = 20
prior_update = 5
keyframe_iterations = 5
"#;

fn results(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn run_writes_results_traces_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = tti(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = results(&out.join("results.jsonl"));
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert_eq!(r["status"], "ok");
        let miou = r["miou"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&miou));
        assert_eq!(r["vc"].as_object().unwrap().len(), 5);
        let id = r["id"].as_str().unwrap();
        assert!(out.join("pred").join(id).join("mask_0005.fts").is_file());
        assert!(out.join("gt").join(id).join("mask_0000.fts").is_file());
    }
    let traces = results(&out.join("traces.jsonl"));
    assert_eq!(traces.len(), 5);
    assert_eq!(traces[0]["steps"].as_array().unwrap().len(), 25);
}

#[test]
fn runs_are_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&tti(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--workers", "1"])), 0);
    assert_eq!(code(&tti(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "3"])), 0);
    for f in ["results.jsonl", "traces.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_schedule_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[input.synthetic]\n[tti]\niterations = 10\nprior_update = 10\n",
    );
    let o = tti(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("prior_update < iterations"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_and_help_exit_codes() {
    assert_eq!(code(&tti(&["run", "--bogus"])), 1);
    assert_eq!(code(&tti(&["--help"])), 0);
    assert_eq!(code(&tti(&["eval", "--pred", "x", "--windows", "1,3"])), 1);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert_eq!(code(&tti(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let gt = out.join("gt");
    let ev = dir.path().join("ev");
    let o = tti(&[
        "eval",
        "--pred",
        gt.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--windows",
        "3,5",
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    for s in summary["summaries"].as_array().unwrap() {
        assert_eq!(s["mean"].as_f64().unwrap(), 1.0, "{s}");
    }
}

#[test]
fn eval_aggregates_runs_and_writes_the_vc_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&tti(&["run", "--config", &cfg, "--out", a.to_str().unwrap()])), 0);
    assert_eq!(code(&tti(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "9"])), 0);
    let ev = dir.path().join("ev");
    let o = tti(&[
        "eval",
        "--pred",
        a.to_str().unwrap(),
        "--pred",
        b.to_str().unwrap(),
        "--gt",
        a.join("gt").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    // Run b's episode ids differ from a's, so its episodes lack ground truth.
    assert_eq!(code(&o), 2);
    let curve = fs::read_to_string(ev.join("vc_curve.tsv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "window\tmean\tstd");
    assert_eq!(lines[1..].iter().map(|l| l.split('\t').next().unwrap()).collect::<Vec<_>>(), ["3", "5", "7", "9", "11"]);

    let o = tti(&["eval", "--pred", a.to_str().unwrap(), "--pred", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.lines().any(|l| l.starts_with("vc11")), "{table}");
    assert!(table.contains("0.0000"));
}

#[test]
fn eval_flags_missing_and_mismatched_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert_eq!(code(&tti(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let gt = out.join("gt");
    let ids: Vec<_> = fs::read_dir(&gt).unwrap().map(|e| e.unwrap().path()).collect();
    fs::remove_dir_all(&ids[0]).unwrap();
    fs::remove_file(ids[1].join("mask_0005.fts")).unwrap();
    let o = tti(&["eval", "--pred", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("missing ground truth"), "{err}");
    assert!(err.contains("ground-truth frames"), "{err}");
}

#[test]
fn synth_writes_episodes_that_run_reads() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "height = 8\nwidth = 8\nframes = 4\nnoise = 0.2\n").unwrap();
    let o = tti(&["synth", "--spec", spec.to_str().unwrap(), "--count", "10", "--seed", "2", "--out", syn.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let index: Value = serde_json::from_str(&fs::read_to_string(syn.join("episodes.json")).unwrap()).unwrap();
    assert_eq!(index["episodes"].as_array().unwrap().len(), 10);
    assert!(syn.join("ep0009").join("query_0003.fts").is_file());

    let cfg = write_config(
        dir.path(),
        "[input.episodes]\nindex = \"syn/episodes.json\"\n[tti]\niterations = 12\nprior_update = 4\nkeyframe_iterations = 3\n",
    );
    let out = dir.path().join("out");
    let o = tti(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--mode", "baseline"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = results(&out.join("results.jsonl"));
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[0]["id"], "ep0000");

    let empty = dir.path().join("empty");
    assert_eq!(code(&tti(&["synth", "--count", "0", "--out", empty.to_str().unwrap()])), 0);
    let index: Value = serde_json::from_str(&fs::read_to_string(empty.join("episodes.json")).unwrap()).unwrap();
    assert!(index["episodes"].as_array().unwrap().is_empty());

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    assert_eq!(code(&tti(&["synth", "--count", "1", "--out", blocker.to_str().unwrap()])), 1);
}

#[test]
fn broken_episode_is_reported_and_others_still_run() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    assert_eq!(code(&tti(&["synth", "--count", "3", "--out", syn.to_str().unwrap()])), 0);
    fs::write(syn.join("ep0001").join("query_0000.fts"), b"FTS1").unwrap();
    let cfg = write_config(
        dir.path(),
        "[input.episodes]\nindex = \"syn/episodes.json\"\n[tti]\niterations = 6\nprior_update = 2\nkeyframe_iterations = 2\n",
    );
    let out = dir.path().join("out");
    let o = tti(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let rows = results(&out.join("results.jsonl"));
    let status: Vec<_> = rows.iter().map(|r| r["status"].as_str().unwrap()).collect();
    assert_eq!(status, ["ok", "error", "ok"]);
}

#[test]
fn manifest_input_samples_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let (c, s) = (4, 6);
    let mut videos = Vec::new();
    for (vi, id) in ["a", "b", "c"].iter().enumerate() {
        let mut features = Vec::new();
        let mut masks = Vec::new();
        fs::create_dir_all(dir.path().join(id)).unwrap();
        for t in 0..5 {
            let lab: Vec<f64> = (0..s * s).map(|p| if (p / s + t) % 3 == 0 { 1.0 } else { 0.0 }).collect();
            let mut data = vec![0.0; c * s * s];
            for p in 0..s * s {
                data[p] = if lab[p] > 0.0 { 1.0 } else { 0.1 };
                data[s * s + p] = if lab[p] > 0.0 { 0.1 } else { 1.0 };
                data[2 * s * s + p] = 0.01 * (vi + t) as f64;
            }
            let f = format!("{id}/feat_{t:04}.fts");
            let m = format!("{id}/mask_{t:04}.fts");
            write_tensor(&Tensor::new(vec![c, s, s], data).unwrap(), dir.path().join(&f)).unwrap();
            write_tensor(&Tensor::new(vec![s, s], lab).unwrap(), dir.path().join(&m)).unwrap();
            features.push(f);
            masks.push(m);
        }
        videos.push(json!({"id": id, "frame_count": 5, "features": features, "masks": masks, "classes": [1]}));
    }
    let manifest = json!({"format_version": 1, "channels": c, "videos": videos, "folds": [{"train": [], "val": [], "test": [1]}]});
    fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();
    let cfg = write_config(
        dir.path(),
        "episodes = 3\n[input.manifest]\npath = \"manifest.json\"\nframes = 4\nshots = 2\n[tti]\niterations = 10\nprior_update = 3\nkeyframe_iterations = 2\n",
    );
    let out = dir.path().join("out");
    let o = tti(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = results(&out.join("results.jsonl"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["miou"].as_f64().unwrap() > 0.9), "{rows:?}");
}

#[test]
fn gradcheck_exit_codes() {
    let o = tti(&["gradcheck", "--instances", "3", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for loss in ["ce", "entropy", "kl", "global", "combined"] {
        assert!(stdout.lines().any(|l| l.starts_with(loss)), "{stdout}");
    }
    let o = tti(&["gradcheck", "--instances", "3", "--inject-sign-error"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("gradient mismatch in ce"));
    assert_eq!(code(&tti(&["gradcheck", "--instances", "0"])), 1);
}
