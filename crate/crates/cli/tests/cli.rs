//! End-to-end runs of the `molmix` binary in scratch directories.

use serde_json::Value;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn molmix(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molmix"))
        .args(args)
        .current_dir(dir)
        .env_remove("MOLMIX_SEED")
        .output()
        .expect("spawn molmix")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = molmix(dir, args);
    assert!(
        out.status.success(),
        "`molmix {}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&read(p)).unwrap()
}

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
            }
            out.insert(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    out
}

const MINI: &[&str] = &["--preset", "minimal", "--max-steps", "4", "--eval-every", "2", "--batch-size", "4"];

fn gen_small(dir: &Path, name: &str, extra: &[&str]) -> String {
    let mut args = vec!["gen", "--out", name, "--count", "12", "--min-atoms", "4", "--max-atoms", "7", "--k-conformers", "2"];
    args.extend_from_slice(extra);
    if !extra.contains(&"--seed") {
        args.extend_from_slice(&["--seed", "3"]);
    }
    ok(dir, &args);
    format!("{name}/dataset.jsonl")
}

fn train_small(dir: &Path, data: &str, out: &str) {
    let mut args = vec!["train", "--out", out, "--data", data, "--seed", "5"];
    args.extend_from_slice(MINI);
    ok(dir, &args);
}

#[test]
fn gen_is_deterministic_and_writes_the_requested_target() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_small(tmp.path(), "a", &["--target", "mix"]);
    let b = gen_small(tmp.path(), "b", &["--target", "mix"]);
    assert_eq!(read(tmp.path().join(&a)), read(tmp.path().join(&b)));
    let text = read(tmp.path().join(&a));
    assert_eq!(text.lines().count(), 12);
    for line in text.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["targets"].as_array().unwrap().len(), 1);
        assert_eq!(rec["conformers"].as_array().unwrap().len(), 2);
    }
    let meta = json(tmp.path().join("a/dataset.meta.json"));
    assert_eq!(meta["target_names"], serde_json::json!(["mix"]));
    let other = gen_small(tmp.path(), "c", &["--target", "mix", "--seed", "4"]);
    assert_ne!(read(tmp.path().join(&a)), read(tmp.path().join(other)));
}

#[test]
fn three_d_mask_without_conformers_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen", "--out", "d", "--count", "8", "--k-conformers", "0", "--target", "geom"]);
    let mut args = vec!["train", "--out", "r", "--data", "d/dataset.jsonl", "--modalities", "1d+3d"];
    args.extend_from_slice(MINI);
    let out = molmix(tmp.path(), &args);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn unknown_flag_exits_2_and_lists_valid_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = molmix(tmp.path(), &["train", "--out", "x", "--data", "d.jsonl", "--learning-rate", "3"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    let flags = err.lines().find(|l| l.starts_with("valid flags:")).expect("flag list");
    for f in ["--out", "--data", "--lr", "--modalities", "--seed"] {
        assert!(flags.split_whitespace().any(|w| w == f), "{f} missing from {flags}");
    }
    assert!(files_under(tmp.path()).is_empty());
}

#[test]
fn train_writes_only_under_out_and_replays_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path(), "d", &["--target", "geom"]);
    let before = files_under(tmp.path());
    train_small(tmp.path(), &data, "r1");
    let after = files_under(tmp.path());
    let new: Vec<_> = after.difference(&before).collect();
    assert!(new.iter().all(|p| p.starts_with("r1")), "{new:?}");
    for f in ["manifest.json", "splits.json", "metrics.csv", "report.json", "checkpoint.bin", "checkpoint.json"] {
        assert!(tmp.path().join("r1").join(f).is_file(), "{f}");
    }

    ok(tmp.path(), &["train", "--out", "r2", "--manifest", "r1/manifest.json"]);
    for f in ["metrics.csv", "report.json", "checkpoint.bin", "checkpoint.json", "splits.json"] {
        let a = std::fs::read(tmp.path().join("r1").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("r2").join(f)).unwrap();
        assert!(a == b, "{f} differs after replay");
    }

    // A changed input invalidates the manifest.
    let p = tmp.path().join(&data);
    let mut text = read(&p);
    text.push('\n');
    std::fs::write(&p, text).unwrap();
    let out = molmix(tmp.path(), &["train", "--out", "r3", "--manifest", "r1/manifest.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed"));
}

#[test]
fn eval_reproduces_the_stored_validation_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path(), "d", &["--target", "topo"]);
    train_small(tmp.path(), &data, "r");
    ok(tmp.path(), &["eval", "--out", "e", "--checkpoint", "r/checkpoint.bin", "--data", &data]);
    let rep = json(tmp.path().join("e/eval.json"));
    assert_eq!(rep["reproduces_stored_val"], Value::Bool(true));
    let meta = json(tmp.path().join("r/checkpoint.json"));
    assert_eq!(rep["mae"], meta["val"]["mae"]);
    let csv = read(tmp.path().join("e/eval.csv"));
    assert_eq!(csv.lines().next(), Some("step,split,metric,value"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn default_preset_is_recorded_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path(), "d", &["--target", "geom"]);
    ok(tmp.path(), &["train", "--out", "r", "--data", &data, "--max-steps", "1", "--eval-every", "1", "--batch-size", "2"]);
    let m = json(tmp.path().join("r/manifest.json"));
    assert_eq!(m["command"], "train");
    let model = &m["run"]["model"];
    assert_eq!((model["d_enc"].as_u64(), model["d_model"].as_u64()), (Some(128), Some(512)));
    assert_eq!(m["seeds"], serde_json::json!([0]));
    assert_eq!(m["input_hashes"].as_array().unwrap().len(), 1);
}

#[test]
fn config_file_and_seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path(), "d", &["--target", "geom"]);
    std::fs::write(tmp.path().join("c.json"), r#"{"train": {"seed": 9, "lr": 0.01}, "model": {"d_model": 16}}"#).unwrap();
    let mut args = vec!["train", "--out", "r", "--data", &data, "--config", "c.json"];
    args.extend_from_slice(MINI);
    ok(tmp.path(), &args);
    let m = json(tmp.path().join("r/manifest.json"));
    assert_eq!(m["seeds"], serde_json::json!([9]));
    assert_eq!(m["run"]["train"]["lr"].as_f64(), Some(0.01));
    assert_eq!(m["run"]["model"]["d_model"].as_u64(), Some(16));

    std::fs::write(tmp.path().join("bad.json"), r#"{"train": {"learning_rate": 0.01}}"#).unwrap();
    let out = molmix(tmp.path(), &["train", "--out", "r2", "--data", &data, "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_defaults_to_all_seven_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path(), "d", &["--target", "geom"]);
    let mut args = vec!["ablate", "--out", "a", "--data", &data, "--seeds", "1", "2"];
    args.extend_from_slice(MINI);
    ok(tmp.path(), &args);
    let csv = read(tmp.path().join("a/ablation.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("mask,metric,median,mean,std,seed1,seed2"));
    let masks: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(masks.len(), 7);
    assert_eq!(masks.iter().collect::<BTreeSet<_>>().len(), 7);
    assert_eq!(std::fs::read_dir(tmp.path().join("a/runs")).unwrap().count(), 14);
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck", "--out", "g", "--max-per-group", "2"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    assert_eq!(json(tmp.path().join("g/gradcheck.json"))["passed"], Value::Bool(true));

    let out = ok(tmp.path(), &["gradcheck", "--out", "e", "--empty"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));

    let out = molmix(tmp.path(), &["gradcheck", "--out", "c", "--max-per-group", "2", "--corrupt", "fusion.layer0.attn.q.w"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fusion.layer0.attn.q.w"));
}

#[test]
fn attnbench_follows_the_memory_laws() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["attnbench", "--out", "b", "--lengths", "64,128,256,512", "--heads", "8", "--block", "32"]);
    let csv = read(tmp.path().join("b/attnbench.csv"));
    let mut peaks: [Vec<f64>; 2] = [vec![], vec![]];
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let i = usize::from(f[0] == "tiled");
        peaks[i].push(f[5].parse().unwrap());
    }
    for (i, want) in [(0, 4.0), (1, 2.0)] {
        assert_eq!(peaks[i].len(), 4);
        for w in peaks[i].windows(2) {
            assert!((w[1] / w[0] - want).abs() < 0.1, "{:?}", peaks[i]);
        }
    }
    assert!(peaks[1][3] / peaks[0][3] < 0.25);
}

#[test]
fn attndump_writes_one_matrix_per_layer_and_head() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path(), "d", &["--target", "geom"]);
    train_small(tmp.path(), &data, "r");
    let first: Value = serde_json::from_str(read(tmp.path().join(&data)).lines().next().unwrap()).unwrap();
    let id = first["id"].as_str().unwrap();
    ok(tmp.path(), &["attndump", "--out", "s", "--checkpoint", "r/checkpoint.bin", "--data", &data, "--molecule", id]);

    let model = &json(tmp.path().join("r/checkpoint.json"))["model"];
    let (layers, heads, j) = (
        model["fusion_layers"].as_u64().unwrap() as usize,
        model["fusion_heads"].as_u64().unwrap() as usize,
        model["gine_layers"].as_u64().unwrap() as usize,
    );
    let n = first["smiles"].as_str().unwrap().chars().count();
    let v = first["atoms"].as_array().unwrap().len();
    let k = first["conformers"].as_array().unwrap().len();
    let seps = [n + 1, n + 2 + v * j, n + 3 + v * j + v * k];
    let len = seps[2] + 1;
    assert_eq!(len, n + v * (j + k) + 4);

    assert_eq!(files_under(&tmp.path().join("s")).len(), layers * heads);
    for l in 0..layers {
        for h in 0..heads {
            let text = read(tmp.path().join(format!("s/layer{l}_head{h}.txt")));
            let header = text.lines().next().unwrap();
            let want = format!("# {len} {len} boundaries={},{},{}", seps[0], seps[1], seps[2]);
            assert_eq!(header, want);
            assert_eq!(text.lines().count(), len + 1);
        }
    }

    let out = molmix(tmp.path(), &["attndump", "--out", "s2", "--checkpoint", "r/checkpoint.bin", "--data", &data, "--molecule", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}
