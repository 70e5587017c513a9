use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fp8flow")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn golden(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["flow-check", "--mode", "fp4"]).status.code(), Some(2));
    let u = run(&["flow-check", "--mode", "unified", "--layers", "2"]);
    assert_eq!(u.status.code(), Some(0));
    assert_eq!(text(&u).lines().next(), Some("consistent"));
    let m = run(&["flow-check", "--mode", "mixed", "--layers", "2"]);
    assert_eq!(m.status.code(), Some(1));
    assert!(text(&m).lines().any(|l| l.starts_with("mismatch ")));
    assert_eq!(run(&["flow-check", "--mode", "unified", "--g", "96"]).status.code(), Some(2));
}

#[test]
fn codec_table_lists_all_codes() {
    let o = run(&["codec-table"]);
    assert!(o.status.success());
    let t = text(&o);
    assert_eq!(t.lines().count(), 257);
    assert!(t.lines().any(|l| l == "56,0x38,0,7,0,1.0,normal"));
    assert!(t.lines().any(|l| l == "254,0xFE,1,15,6,-448.0,normal"));
}

#[test]
fn unified_two_layer_forward_graph_matches_golden() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["flow-check", "--mode", "unified", "--layers", "2", "--out", d.path().to_str().unwrap()]);
    assert!(o.status.success());
    let dot = fs::read_to_string(d.path().join("train_fwd.dot")).unwrap();
    let (header, body) = dot.split_once('\n').unwrap();
    assert!(header.starts_with("// run_id="));
    assert_eq!(body, golden("train_fwd_unified_2layer.dot"));
    assert!(d.path().join("manifest.json").exists());
}

#[test]
fn outputs_are_byte_identical_without_timestamps() {
    let d = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let out = d.path().join(format!("drift{i}.csv"));
        let o = run(&[
            "drift", "--mode", "mixed", "--len", "8", "--d-model", "32", "--g", "16", "--seed", "4", "--no-timestamps",
            "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
        let manifest = fs::read_to_string(format!("{}.manifest.json", out.display())).unwrap();
        files.push((fs::read(&out).unwrap(), manifest.replace(&format!("drift{i}.csv"), "drift.csv")));
    }
    assert_eq!(files[0], files[1]);
    let csv = String::from_utf8(files[0].0.clone()).unwrap();
    assert_eq!(csv.lines().nth(1), Some("position,max_abs_logit_diff,kl"));
    assert_eq!(csv.lines().count(), 10);
}

#[test]
fn unified_drift_is_zero_and_checked() {
    let o = run(&["drift", "--mode", "unified", "--len", "16", "--d-model", "32", "--g", "16", "--temperature", "0"]);
    assert_eq!(o.status.code(), Some(0));
    for line in text(&o).lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!((f[1], f[2]), ("0e0", "0e0"));
    }
}

#[test]
fn config_errors_name_the_line() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.cfg");
    fs::write(&cfg, "steps = 2\n# ok\nlearning_rate = 1\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn train_and_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "n_layers = 1\nd_model = 16\nn_heads = 2\nd_ff = 32\ng = 8\nbatch_prompts = 2\nsteps = 2\nlr = 1e-2\neval_prompts = 8\n",
    )
    .unwrap();
    let out = d.path().join("run");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--no-timestamps"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let acc = text(&o).lines().find_map(|l| l.strip_prefix("final_greedy_accuracy=").map(str::to_string)).unwrap();
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(metrics.lines().next().unwrap().contains(manifest["run_id"].as_str().unwrap()));
    assert!(manifest["started_at"].is_null());
    let e = run(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", out.join("final.ckpt").to_str().unwrap()]);
    assert!(e.status.success());
    assert_eq!(text(&e).trim(), format!("greedy_accuracy={acc}"));
}
