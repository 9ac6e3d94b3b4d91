use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsformer::data::load_jsonl;
use serde_json::Value;

const TINY: [&str; 14] = [
    "--d-model",
    "8",
    "--blocks",
    "1",
    "--context-len",
    "6",
    "--timesteps",
    "2",
    "--window",
    "3",
    "--batch-size",
    "4",
    "--eval-episodes",
    "3",
];

fn dsformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dsformer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(dir: &Path, episodes: usize) -> PathBuf {
    let path = dir.join("d.jsonl");
    let n = episodes.to_string();
    ok(&["gen-data", "--env", "keydoor", "--episodes", &n, "--quality", "medium", "--seed", "7", "--out", s(&path)]);
    path
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend(TINY);
    args.extend(extra);
    ok(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn metrics(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for p in [&a, &b] {
        ok(&["gen-data", "--env", "keydoor", "--episodes", "20", "--quality", "medium", "--seed", "7", "--out", s(p)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = load_jsonl(&a).unwrap();
    assert_eq!(ds.trajectories.len(), 20);
    ds.validate().unwrap();
}

#[test]
fn zero_episodes_gives_loadable_meta_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    ok(&["gen-data", "--env", "reacher", "--episodes", "0", "--out", s(&p)]);
    assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 1);
    assert!(load_jsonl(&p).unwrap().trajectories.is_empty());
}

#[test]
fn config_precedence_defaults_file_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[training]\ntotal_steps = 6\nbatch_size = 3\n\n[model]\nd_model = 8\nn_blocks = 1\ncontext_len = 4\nwindow = 2\n").unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--steps", "2", "--eval-episodes", "1"]);
    let resolved: toml::Table = fs::read_to_string(out.join("config.toml")).unwrap().parse().unwrap();
    let training = resolved["training"].as_table().unwrap();
    // flag over file, file over default, default kept
    assert_eq!(training["total_steps"].as_integer(), Some(2));
    assert_eq!(training["batch_size"].as_integer(), Some(3));
    assert_eq!(training["learning_rate"].as_float(), Some(1e-4));
    assert_eq!(resolved["model"]["d_model"].as_integer(), Some(8));
    assert_eq!(resolved["model"]["snn_timesteps"].as_integer(), Some(4));
    assert_eq!(metrics(&out).len(), 1);
}

#[test]
fn train_reaches_theta_zero_for_each_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    for mode in ["pssa", "vla"] {
        let out = dir.path().join(mode);
        train(&data, &out, &["--attn", mode, "--steps", "6", "--eval-every", "3"]);
        let recs = metrics(&out);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs.last().unwrap()["theta"].as_f64(), Some(0.0));
        for key in ["step", "loss", "theta", "lr", "spike_rate_mean", "eval_score_raw", "eval_score_normalized"] {
            assert!(recs[0].get(key).is_some(), "{key}");
        }
        assert!(out.join("final.ckpt").exists());
        let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
        assert!(resolved.contains(&format!("attn_mode = \"{mode}\"")));
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let full = dir.path().join("full");
    train(&data, &full, &["--steps", "8", "--eval-every", "4"]);
    let resumed = dir.path().join("resumed");
    let ck = full.join("step_000004.ckpt");
    train(&data, &resumed, &["--steps", "8", "--eval-every", "4", "--resume", s(&ck)]);
    assert_eq!(metrics(&full).last(), metrics(&resumed).last());
    assert_eq!(
        fs::read(full.join("final.ckpt")).unwrap(),
        fs::read(resumed.join("final.ckpt")).unwrap()
    );
}

#[test]
fn eval_is_reproducible_and_single_episode_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let run = dir.path().join("run");
    train(&data, &run, &["--steps", "2"]);
    let ck = run.join("final.ckpt");
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("ev{k}"));
        ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--episodes", "4", "--seed", "3", "--out", s(&out)]);
        reports.push(json(&out.join("eval.json")));
    }
    assert_eq!(reports[0], reports[1]);
    let one = dir.path().join("one");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--episodes", "1", "--out", s(&one)]);
    assert_eq!(json(&one.join("eval.json"))["std_normalized"].as_f64(), Some(0.0));
}

#[test]
fn unfolded_checkpoint_is_folded_with_notice() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let run = dir.path().join("run");
    train(&data, &run, &["--steps", "4", "--eval-every", "2"]);
    let out = dsformer(&[
        "eval",
        "--checkpoint",
        s(&run.join("step_000002.ckpt")),
        "--data",
        s(&data),
        "--episodes",
        "1",
        "--out",
        s(&dir.path().join("ev")),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("notice"));
}

#[test]
fn bench_attn_fits_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let csv = ok(&["bench-attn", "--ns", "16,32,64,128", "--d-model", "4", "--timesteps", "2", "--out", s(&out)]);
    assert_eq!(csv, fs::read_to_string(out.join("bench_attn.csv")).unwrap());
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[1] == "fit" {
            let e: f64 = f[7].parse().unwrap();
            let ok = match f[0] {
                "pssa" => (0.9..=1.1).contains(&e),
                _ => (1.8..=2.2).contains(&e),
            };
            assert!(ok, "{line}");
        } else {
            assert_eq!(f[4], f[5], "{line}");
        }
    }
}

#[test]
fn energy_report_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let run = dir.path().join("run");
    train(&data, &run, &["--steps", "2", "--attn", "tssa"]);
    let out = dir.path().join("energy");
    let table = ok(&["energy", "--checkpoint", s(&run.join("final.ckpt")), "--data", s(&data), "--batch", "4", "--out", s(&out)]);
    assert!(table.contains("attention total (tssa)"));
    let r = json(&out.join("energy.json"));
    let sum: f64 = r["layers"].as_array().unwrap().iter().map(|l| l["energy_uj"].as_f64().unwrap()).sum();
    assert!((sum - r["total_uj"].as_f64().unwrap()).abs() <= 1e-15 * sum.max(1.0));
}

fn sweep(data: &Path, out: &Path, t: &str, w: &str) -> Vec<Value> {
    let mut args = vec!["sweep", "--data", s(data), "--out", s(out), "--timesteps", t, "--windows", w, "--steps", "2"];
    args.extend(&TINY[..6]);
    args.extend(["--batch-size", "4", "--eval-episodes", "2"]);
    ok(&args);
    json(&out.join("sweep.json")).as_array().unwrap().clone()
}

#[test]
fn sweep_grid_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let rows = sweep(&data, &dir.path().join("grid"), "1,2,4", "2,8");
    assert_eq!(rows.len(), 6);
    // window 8 exceeds context_len 6: recorded as failed, the sweep continues
    let failed: Vec<&Value> = rows.iter().filter(|r| r["status"] == "failed").collect();
    assert_eq!(failed.len(), 3);
    assert!(failed.iter().all(|r| r["window"] == 8));
    assert!(rows.iter().filter(|r| r["window"] == 2).all(|r| r["status"] == "ok"));
}

#[test]
fn sweep_cells_are_order_independent() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let a = sweep(&data, &dir.path().join("a"), "1,2", "2");
    let mut b = sweep(&data, &dir.path().join("b"), "2,1", "2");
    b.reverse();
    assert_eq!(a, b);
}

#[test]
fn single_cell_sweep_equals_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let rows = sweep(&data, &dir.path().join("sw"), "2", "3");
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--steps", "2"];
    args.extend(TINY);
    let last = args.len() - 1;
    args[last] = "2";
    ok(&args);
    let ev = dir.path().join("ev");
    ok(&["eval", "--checkpoint", s(&run.join("final.ckpt")), "--data", s(&data), "--out", s(&ev)]);
    let report = json(&ev.join("eval.json"));
    assert_eq!(rows[0]["score_mean"], report["mean_normalized"]);
    assert_eq!(rows[0]["score_std"], report["std_normalized"]);
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let out = s(dir.path());
    let code = |args: &[&str]| dsformer(args).status.code();
    assert_eq!(code(&["train", "--data", s(&data), "--out", out, "--steps", "0"]), Some(2));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nno_such_key = 1\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad), "--data", s(&data), "--out", out]), Some(2));
    assert_eq!(code(&["train", "--data", s(&dir.path().join("none.jsonl")), "--out", out]), Some(3));
    let garbage = dir.path().join("garbage.jsonl");
    fs::write(&garbage, "not json\n").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&garbage), "--data", s(&data), "--out", out]), Some(3));
    let mut args = vec!["train", "--data", s(&data), "--out", out, "--steps", "6", "--lr", "1e300"];
    args.extend(TINY);
    assert_eq!(code(&args), Some(4));
}

#[test]
fn outputs_stay_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let work = dir.path().join("work");
    fs::create_dir(&work).unwrap();
    let out = dir.path().join("outdir");
    let status = Command::new(env!("CARGO_BIN_EXE_dsformer"))
        .current_dir(&work)
        .args(["train", "--data", s(&data), "--out", s(&out), "--steps", "2"])
        .args(TINY)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(fs::read_dir(&work).unwrap().count(), 0);
}
