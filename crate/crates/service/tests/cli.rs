use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../eval/fixtures").join(name)
}

fn oncall(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_oncall"));
    cmd.args(args).env("ONCALL_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_regenerates_the_checked_in_ablation_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablation");
    ok(&oncall(&["eval", "synth", "--kind", "ablation", "--seed", "7", "--size", "3", "--out", out.to_str().unwrap()], &[]));
    for f in ["corpus.jsonl", "seed.json", "rules.json", "documents.json"] {
        let fresh = std::fs::read_to_string(out.join(f)).unwrap();
        let kept = std::fs::read_to_string(fixture("ablation").join(f)).unwrap();
        assert_eq!(fresh, kept, "{f} drifted from its generator");
    }
}

#[test]
fn ablate_prints_a_table_and_writes_sorted_json() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("ablate.json");
    let table =
        ok(&oncall(&["eval", "ablate", "--scenario", fixture("ablation").to_str().unwrap(), "--out", report.to_str().unwrap()], &[]));
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("full"));
    let rows = read_json(&report)["rows"].as_array().unwrap().clone();
    let acc: Vec<f64> = rows.iter().map(|r| r["accuracy"].as_f64().unwrap()).collect();
    assert!(acc[0] > acc[1] && acc[1] > acc[2], "{acc:?}");
    assert_eq!(acc[0], 0.857);
}

#[test]
fn identify_answers_and_sweep_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let case2 = fixture("case2");
    let table = ok(&oncall(&["eval", "identify", "--scenario", case2.to_str().unwrap()], &[]));
    assert!(table.contains("accuracy 1.000"), "{table}");

    let answers = ok(&oncall(&["eval", "answers", "--scenario", fixture("ablation").to_str().unwrap(), "--mode", "no-self-improve"], &[]));
    assert!(answers.lines().nth(1).unwrap().trim_end().ends_with("0.400"), "{answers}");
    assert!(!oncall(&["eval", "answers", "--scenario", case2.to_str().unwrap(), "--mode", "all"], &[]).status.success());

    let synth = dir.path().join("dedup");
    ok(&oncall(&["eval", "synth", "--kind", "dedup", "--seed", "3", "--size", "12", "--out", synth.to_str().unwrap()], &[]));
    let report = dir.path().join("sweep.json");
    let table =
        ok(&oncall(&["eval", "sweep", "--scenario", synth.to_str().unwrap(), "--thetas", "1,0", "--out", report.to_str().unwrap()], &[]));
    assert_eq!(table.lines().count(), 3, "{table}");
    let rows = read_json(&report)["rows"].as_array().unwrap().clone();
    assert_eq!(rows[0]["theta"], 0.0);
    assert_eq!(rows[1]["recall"], 1.0);
    assert!(!oncall(&["eval", "sweep", "--scenario", synth.to_str().unwrap(), "--thetas", "0,2"], &[]).status.success());
}

#[test]
fn replay_writes_predictions_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let audit = dir.path().join("audit.jsonl");
    let out = ok(&oncall(&["replay", "--scenario", fixture("case1").to_str().unwrap(), "--audit", audit.to_str().unwrap()], &[]));
    let preds: Value = serde_json::from_str(&out).unwrap();
    let sessions = preds["sessions"].as_array().unwrap();
    assert_eq!(sessions[0]["refusals"], serde_json::json!(["a3"]));
    assert!(sessions[1]["cards"][0]["answer_text"].as_str().unwrap().contains("reserved host"));
    let kinds: Vec<String> = std::fs::read_to_string(&audit)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert!(kinds.contains(&"refusal".to_string()) && kinds.contains(&"card_sent".to_string()), "{kinds:?}");
}

#[test]
fn kb_import_stats_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("kb");
    let env = [("ONCALL_SERVER__STORE_DIR", store.to_str().unwrap())];
    let seed = fixture("ablation").join("seed.json");
    let imported = ok(&oncall(&["kb", "import", seed.to_str().unwrap()], &env));
    let n = read_json(&seed).as_array().unwrap().len();
    assert_eq!(imported.trim(), format!("imported {n} entries"));
    let stats: Value = serde_json::from_str(&ok(&oncall(&["kb", "stats"], &env))).unwrap();
    assert_eq!(stats["entries"], n);
    let out = dir.path().join("export.json");
    ok(&oncall(&["kb", "export", "--out", out.to_str().unwrap()], &env));
    let exported = read_json(&out);
    let original = read_json(&seed);
    for (e, o) in exported.as_array().unwrap().iter().zip(original.as_array().unwrap()) {
        assert_eq!(e["question"], o["question"]);
        assert_eq!(e["content"], o["content"]);
    }
    assert!(!oncall(&["kb", "stats"], &[]).status.success(), "kb needs a store directory");
}

#[test]
fn bad_theta_is_rejected_before_running() {
    let out = oncall(&["--theta", "1.5", "eval", "identify", "--scenario", fixture("case2").to_str().unwrap()], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("theta"));
}
