use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dppa::archive::{Tensor, TensorArchive};
use dppa::pruners::SparseDelta;
use dppa::synthetic::SyntheticModel;
use dppa::NamingRule;

fn dppa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dppa")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(dir: &Path) {
    let (base, ft) = SyntheticModel::default().generate();
    base.save(dir.join("base.dppa")).unwrap();
    ft.save(dir.join("ft.dppa")).unwrap();
}

#[test]
fn delta_merge_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = dppa(&["delta", "--base", s(&d.join("base.dppa")), "--finetuned", s(&d.join("ft.dppa")), "--out", s(&d.join("delta.dppa"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = dppa(&["merge", "--base", s(&d.join("base.dppa")), "--out", s(&d.join("m.dppa")), s(&d.join("delta.dppa"))]);
    assert!(out.status.success());
    assert_eq!(TensorArchive::load(d.join("m.dppa")).unwrap(), TensorArchive::load(d.join("ft.dppa")).unwrap());
}

#[test]
fn shape_mismatch_exits_2_naming_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let mut ft = TensorArchive::new();
    for (name, t) in TensorArchive::load(d.join("ft.dppa")).unwrap().iter() {
        let t = if name == "model.layers.1.mlp.up_proj.weight" {
            Tensor::from_f32(vec![t.numel()], t.as_f32().unwrap().to_vec()).unwrap()
        } else {
            t.clone()
        };
        ft.insert(name, t).unwrap();
    }
    ft.save(d.join("bad.dppa")).unwrap();
    let out = dppa(&["delta", "--base", s(&d.join("base.dppa")), "--finetuned", s(&d.join("bad.dppa")), "--out", s(&d.join("x.dppa"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.layers.1.mlp.up_proj.weight"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let missing = dppa(&["delta", "--base", s(&d.join("nope.dppa")), "--finetuned", s(&d.join("ft.dppa")), "--out", s(&d.join("x"))]);
    assert_eq!(missing.status.code(), Some(3));
    let bad_method = dppa(&["prune", "--base", s(&d.join("base.dppa")), "--finetuned", s(&d.join("ft.dppa")), "--output-dir", s(d), "--method", "wanda"]);
    assert_eq!(bad_method.status.code(), Some(2));
    fs::write(d.join("junk.dppa"), b"\x05\0\0\0\0\0\0\0{oops").unwrap();
    let junk = dppa(&["analyze", "--input", s(&d.join("junk.dppa")), "--output-dir", s(d)]);
    assert_eq!(junk.status.code(), Some(3));
    let failing = dppa(&[
        "amplify", "--base", s(&d.join("base.dppa")), "--finetuned", s(&d.join("ft.dppa")),
        "--output-dir", s(&d.join("amp")), "--oracle", "external_command", "--oracle-command", "false",
    ]);
    assert_eq!(failing.status.code(), Some(4));
}

#[test]
fn prune_amplify_analyze_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let cfg = serde_json::json!({
        "base_path": d.join("base.dppa"),
        "finetuned_paths": [d.join("ft.dppa")],
        "method": "dp",
        "alpha": 0.8,
        "gamma_grid": [0.5, 1.0, 1.5, 2.0],
        "oracle": "proxy_reconstruction",
        "output_dir": d.join("run"),
    });
    fs::write(d.join("cfg.json"), cfg.to_string()).unwrap();
    let run = d.join("run");

    let out = dppa(&["prune", "--config", s(&d.join("cfg.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let realized = summary[0]["realized_sparsity"].as_f64().unwrap();
    assert!((realized - 0.8).abs() < 0.02, "{realized}");
    for f in ["sparse_0.dppa", "plan_0.json", "summary.json", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["lambda"], 0.08);

    let out = dppa(&["amplify", "--config", s(&d.join("cfg.json")), "--rate-ladder", "0.9,0.8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(run.join("trace_0.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2 * 4);
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    for key in ["step", "gamma", "score", "candidate_hash"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let amplified = SparseDelta::from_archive(&TensorArchive::load(run.join("amplified_0.dppa")).unwrap(), &NamingRule::defaults()).unwrap();
    assert_eq!(amplified.gammas.as_ref().map(Vec::len), Some(2));

    let out = dppa(&[
        "analyze", "--input", s(&run.join("amplified_0.dppa")), "--output-dir", s(&d.join("an")),
        "--units", "model.layers.0.self_attn.q_proj.weight", "--scale", "1000",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["quantiles.json", "structure.json", "structure.csv"] {
        assert!(d.join("an").join(f).exists(), "{f}");
    }

    let out = dppa(&["merge", "--base", s(&d.join("base.dppa")), "--out", s(&d.join("m.dppa")), s(&run.join("sparse_0.dppa"))]);
    assert!(out.status.success());
}

#[test]
fn external_oracle_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    // score is the candidate file size; checks the argv protocol end to end
    let out = dppa(&[
        "amplify", "--base", s(&d.join("base.dppa")), "--finetuned", s(&d.join("ft.dppa")),
        "--output-dir", s(&d.join("amp")), "--alpha", "0.9", "--gamma-grid", "0,1",
        "--oracle", "external_command", "--oracle-command", "sh -c 'test -f \"$1\" && wc -c < \"$2\"' oracle",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary[0]["reproducible"], false);
    assert!(summary[0]["final_score"].as_f64().unwrap() > 0.0);
}

#[test]
fn metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("scores.json"),
        r#"{"domain":"math","tasks":[{"name":"gsm8k","dense":40,"pruned":10},{"name":"math","dense":5,"pruned":20}]}"#,
    )
    .unwrap();
    let out = dppa(&["metrics", "--scores", s(&d.join("scores.json"))]);
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r[0]["domain_ratio"], 1.0);
}
