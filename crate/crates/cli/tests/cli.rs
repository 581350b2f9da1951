use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cmtc_cli::{ablation_csv, median};
use cmtc::reid::AblationConfig;

fn cmtc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmtc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn smoke_data(dir: &Path) {
    let o = cmtc(&["synth", "--preset", "smoke", "--seed", "1", "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_default_preset_writes_every_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let o = cmtc(&["synth", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let rows = manifest["clips"].as_array().unwrap();
    assert_eq!(rows.len(), 64);
    assert_eq!(fs::read_dir(out.join("events")).unwrap().count(), rows.len());
    assert_eq!(fs::read_dir(out.join("masks")).unwrap().count(), rows.len());
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (d, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        assert_eq!(code(&cmtc(&["synth", "--preset", "smoke", "--seed", seed, "--out", p(d)])), 0);
    }
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn synth_refuses_non_empty_output_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let keep = tmp.path().join("keep.txt");
    fs::write(&keep, "x").unwrap();
    let o = cmtc(&["synth", "--preset", "smoke", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 1);
    assert!(keep.exists());
    assert!(!tmp.path().join("manifest.json").exists());
    let o = cmtc(&["synth", "--preset", "smoke", "--out", p(tmp.path()), "--force"]);
    assert_eq!(code(&o), 0);
    assert!(!keep.exists());
    assert!(tmp.path().join("manifest.json").exists());
}

#[test]
fn invalid_config_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"synth": {"identities": 1}}"#).unwrap();
    let out = tmp.path().join("out");
    let o = cmtc(&["synth", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("identities"));
    assert!(!out.exists());

    fs::write(&cfg, "{not json").unwrap();
    assert_eq!(code(&cmtc(&["synth", "--config", p(&cfg), "--out", p(&out)])), 1);
    assert!(!out.exists());
}

#[test]
fn train_validates_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    smoke_data(&data);
    let run = tmp.path().join("run");
    for args in [
        vec!["--ablation", "mc-only"],
        vec!["--epochs", "0"],
        vec!["--lr=-1"],
        vec!["--no-such-flag"],
    ] {
        let mut all = vec!["train", "--preset", "smoke", "--data", p(&data), "--out", p(&run)];
        all.extend(args);
        assert_eq!(code(&cmtc(&all)), 1, "{all:?}");
        assert!(!run.exists(), "{all:?}");
    }
    let missing = tmp.path().join("nowhere");
    let o = cmtc(&["train", "--preset", "smoke", "--data", p(&missing), "--out", p(&run)]);
    assert_eq!(code(&o), 1);
    assert!(!run.exists());
}

#[test]
fn smoke_train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    smoke_data(&data);
    let run = tmp.path().join("run");
    let o = cmtc(&["train", "--preset", "smoke", "--epochs", "1", "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "checkpoint.cmtc", "model.cmtc", "history.csv", "eventnet_loss.csv", "eval/report.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);

    // Re-running the same command resumes the finished run and changes nothing.
    let before = fs::read(run.join("history.csv")).unwrap();
    let o = cmtc(&["train", "--preset", "smoke", "--epochs", "1", "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(run.join("history.csv")).unwrap(), before);
    // A different config in the same directory is refused.
    let o = cmtc(&["train", "--preset", "smoke", "--epochs", "2", "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&o), 1);

    let ev = [tmp.path().join("ev1"), tmp.path().join("ev2")];
    for d in &ev {
        let o = cmtc(&["eval", "--run", p(&run), "--data", p(&data), "--out", p(d)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ev[0].join("report.json")).unwrap()).unwrap();
    for k in ["rank1", "rank5", "rank10", "map"] {
        let v = report[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert_eq!(tree(&ev[0]), tree(&ev[1]));
    assert_eq!(tree(&ev[0]), tree(&run.join("eval")));

    let bad = tmp.path().join("ev3");
    let o = cmtc(&["eval", "--run", p(&run), "--data", p(&data), "--out", p(&bad), "--checkpoint", p(&run.join("nope.cmtc"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
    assert!(!bad.exists());
    let o = cmtc(&["eval", "--run", p(&run), "--data", p(&data), "--out", p(&bad), "--seed", "99"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn baseline_ablation_disables_auxiliary_branches() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    smoke_data(&data);
    let run = tmp.path().join("run");
    let o = cmtc(&["train", "--preset", "smoke", "--ablation", "baseline", "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["ablation"], serde_json::json!({"use_eventnet": false, "use_mc": false, "use_tc": false}));
    assert!(!run.join("eventnet_loss.csv").exists());
}

#[test]
fn divergence_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    smoke_data(&data);
    let run = tmp.path().join("run");
    let o = cmtc(&[
        "train", "--preset", "smoke", "--ablation", "baseline", "--epochs", "3", "--lr", "1e30", "--data", p(&data), "--out", p(&run),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablate_emits_rows_in_table_order() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    smoke_data(&data);
    let out = tmp.path().join("abl");
    let o = cmtc(&["ablate", "--preset", "smoke", "--seeds", "2", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,eventnet,mc,tc,rank1_seed0,rank1_seed1,map_seed0,map_seed1,rank1_median,map_median");
    let rows: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["baseline", "eventnet", "eventnet+mc", "eventnet+tc", "full"]);
    assert!(lines[1].starts_with("baseline,0,0,0,"));
    assert!(lines[5].starts_with("full,1,1,1,"));
    assert!(out.join("full/seed1/history.csv").is_file());
}

#[test]
fn medians_and_table_layout() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    let csv = ablation_csv(&[7], &[(AblationConfig::TC, vec![(0.5, 0.25)])]);
    assert_eq!(csv, "config,eventnet,mc,tc,rank1_seed7,map_seed7,rank1_median,map_median\neventnet+tc,1,0,1,0.500000,0.250000,0.500000,0.250000\n");
}
