use std::path::PathBuf;
use std::process::{Command, Output};

use hiergrpo::reward::{score_trace, GroundTruth, RewardConfig};
use hiergrpo::synthworld::{manifest_string, read_manifest, PairSample, Split};
use hiergrpo::taxonomy::{AttributeMode, AttributeSchema, Lineage, Stratum};
use serde_json::Value;
use tempfile::TempDir;

const SMOKE: &str = r#"{
  "version": 1,
  "seed": 7,
  "world": { "feature_dim": 8, "specimens_per_species": 3 },
  "pairs": { "total": 160 },
  "policy": { "hidden": 16, "grammar_mask": "hard", "init_scale": 1.0 },
  "grpo": { "epochs": 2, "group_size": 4, "checkpoint_every": 5 }
}"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Self {
            dir: TempDir::new().unwrap(),
        };
        s.write("smoke.json", SMOKE);
        s
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write(&self, rel: &str, text: &str) -> PathBuf {
        let p = self.path(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(&p, text).unwrap();
        p
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_hiergrpo"))
            .args(args)
            .current_dir(self.dir.path())
            .env("HIERGRPO_RUN_ROOT", self.path("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> (i32, String) {
        let out = self.run(args);
        (
            out.status.code().unwrap(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
    }
}

fn history(text: &str) -> Vec<Value> {
    text.lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_summarized() {
    let s = Sandbox::new();
    s.ok(&["gen-data", "-c", "smoke.json"]);
    s.ok(&["gen-data", "-c", "smoke.json", "--run-dir", "again"]);
    for f in ["pairs.jsonl", "specimens.jsonl", "summary.json"] {
        assert_eq!(
            s.read(&format!("runs/smoke/data/{f}")),
            s.read(&format!("again/data/{f}")),
            "{f}"
        );
    }
    let pairs = read_manifest(s.read("runs/smoke/data/pairs.jsonl").as_bytes()).unwrap();
    assert_eq!(s.read("runs/smoke/data/pairs.jsonl").lines().count(), 160);
    let summary: Value = serde_json::from_str(&s.read("runs/smoke/data/summary.json")).unwrap();
    for row in summary["strata"].as_array().unwrap() {
        let name: Stratum = serde_json::from_value(row["stratum"].clone()).unwrap();
        let n = pairs.iter().filter(|p| p.stratum == name).count();
        assert_eq!(row["total"].as_u64().unwrap() as usize, n);
    }
    // Pair manifest field order is part of the interface.
    let manifest = s.read("runs/smoke/data/pairs.jsonl");
    let first = manifest.lines().next().unwrap();
    let keys = [
        "\"id\"",
        "\"features_a\"",
        "\"features_b\"",
        "\"lineage_a\"",
        "\"lineage_b\"",
        "\"label\"",
        "\"stratum\"",
        "\"split\"",
        "\"visual\"",
    ];
    let pos: Vec<usize> = keys.iter().map(|k| first.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn config_errors_exit_2() {
    let s = Sandbox::new();
    s.write("noseed.json", r#"{"version": 1}"#);
    s.write(
        "typo.json",
        r#"{"version": 1, "seed": 1, "grpo": {"lr": 0.1}}"#,
    );
    s.write("oldver.json", r#"{"version": 9, "seed": 1}"#);
    s.write(
        "quota.json",
        r#"{"version": 1, "seed": 1, "pairs": {"quotas": {"SameClass": 1000000}}}"#,
    );
    for f in ["noseed.json", "typo.json", "oldver.json"] {
        assert_eq!(s.code(&["gen-data", "-c", f]).0, 2, "{f}");
    }
    let (code, err) = s.code(&["gen-data", "-c", "quota.json"]);
    assert_eq!(code, 2);
    assert!(err.contains("SameClass"), "{err}");
    assert_eq!(
        s.code(&["train", "-c", "smoke.json"]).0,
        3,
        "missing manifest is a data error"
    );
}

#[test]
fn locked_run_dir_is_refused() {
    let s = Sandbox::new();
    s.write("runs/smoke/.lock", "1");
    let (code, err) = s.code(&["gen-data", "-c", "smoke.json"]);
    assert_eq!(code, 2);
    assert!(err.contains("in use"));
}

#[test]
fn train_resume_and_collisions() {
    let s = Sandbox::new();
    s.ok(&["gen-data", "-c", "smoke.json"]);
    s.ok(&["train", "-c", "smoke.json", "--lambda", "1.0"]);
    let full = s.read("runs/smoke/train/history.jsonl");
    let header: Value = serde_json::from_str(full.lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["reward"]["lambda"], 1.0);
    let rows = history(&full);
    assert_eq!(
        rows.len(),
        header["header"]["total_steps"].as_u64().unwrap() as usize
    );
    let line = full.lines().nth(1).unwrap();
    let keys = [
        "step",
        "epoch",
        "lr",
        "loss",
        "mean_reward",
        "mean_r_struct",
        "mean_r_corr",
        "mean_r_attr",
        "mean_kl",
        "format_valid_frac",
    ];
    let got: Vec<String> = serde_json::from_str::<serde_json::Map<String, Value>>(line)
        .unwrap()
        .keys()
        .cloned()
        .collect();
    let mut sorted_keys: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
    sorted_keys.sort();
    assert_eq!(got, sorted_keys);
    let pos: Vec<usize> = keys
        .iter()
        .map(|k| line.find(&format!("\"{k}\"")).unwrap())
        .collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");

    assert_eq!(
        s.code(&["train", "-c", "smoke.json", "--lambda", "1.0"]).0,
        2
    );
    s.ok(&[
        "train",
        "-c",
        "smoke.json",
        "--lambda",
        "1.0",
        "--force",
        "--stop-after",
        "7",
    ]);
    assert_eq!(history(&s.read("runs/smoke/train/history.jsonl")).len(), 7);
    assert_eq!(
        s.code(&["train", "-c", "smoke.json", "--resume"]).0,
        2,
        "resume under a different lambda"
    );
    s.ok(&["train", "-c", "smoke.json", "--lambda", "1.0", "--resume"]);
    assert_eq!(s.read("runs/smoke/train/history.jsonl"), full);
    let policy = s.read("runs/smoke/train/policy.json");
    s.ok(&[
        "train",
        "-c",
        "smoke.json",
        "--lambda",
        "1.0",
        "--run-dir",
        "straight",
        "--manifest",
        "runs/smoke/data/pairs.jsonl",
    ]);
    assert_eq!(s.read("straight/train/policy.json"), policy);
    assert_eq!(
        s.read("straight/train/checkpoint.json"),
        s.read("runs/smoke/train/checkpoint.json")
    );
}

#[test]
fn binary_mode_trains_and_logs_attribute_reward() {
    let s = Sandbox::new();
    s.ok(&["gen-data", "-c", "smoke.json"]);
    s.ok(&["train", "-c", "smoke.json", "--reward-mode", "binary"]);
    let rows = history(&s.read("runs/smoke/train/history.jsonl"));
    assert!(rows.iter().all(|r| r["mean_r_attr"].is_number()));
    assert!(rows
        .iter()
        .any(|r| r["mean_r_attr"].as_f64().unwrap() > 0.0));
    s.ok(&["eval", "-c", "smoke.json", "--reward-mode", "binary"]);
    let report: Value = serde_json::from_str(&s.read("runs/smoke/eval/test/report.json")).unwrap();
    assert_eq!(report["mode"], "binary");
    assert!(report["intermediate"].is_null());
}

#[test]
fn eval_is_deterministic_split_aware_and_checked() {
    let s = Sandbox::new();
    s.ok(&["gen-data", "-c", "smoke.json"]);
    s.ok(&["train", "-c", "smoke.json"]);
    s.ok(&["eval", "-c", "smoke.json"]);
    s.ok(&["eval", "-c", "smoke.json", "--out", "again"]);
    for f in ["report.json", "tables.txt", "traces.jsonl"] {
        assert_eq!(
            s.read(&format!("runs/smoke/eval/test/{f}")),
            s.read(&format!("again/{f}")),
            "{f}"
        );
    }
    s.ok(&["eval", "-c", "smoke.json", "--split", "val"]);
    let ids = |rel: &str| -> Vec<String> {
        s.read(rel)
            .lines()
            .map(|l| {
                serde_json::from_str::<Value>(l).unwrap()["pair_id"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect()
    };
    let test = ids("runs/smoke/eval/test/traces.jsonl");
    let val = ids("runs/smoke/eval/val/traces.jsonl");
    assert!(test.iter().all(|t| !val.contains(t)));
    let report: Value = serde_json::from_str(&s.read("runs/smoke/eval/test/report.json")).unwrap();
    assert_eq!(report["format_adherence"], 100.0);
    assert_eq!(report["pairs"].as_u64().unwrap() as usize, test.len());

    assert_eq!(
        s.code(&["eval", "-c", "smoke.json", "--variant", "answer-only"])
            .0,
        2
    );
    s.write("other.json", &SMOKE.replace("\"seed\": 7", "\"seed\": 8"));
    s.ok(&["gen-data", "-c", "other.json"]);
    let (code, err) = s.code(&[
        "eval",
        "-c",
        "other.json",
        "--checkpoint",
        "runs/smoke/train/policy.json",
    ]);
    assert_eq!(code, 3, "{err}");
}

fn lin(c: &str, o: &str, f: &str, g: &str, sp: &str) -> Lineage {
    Lineage::taxonomy(c, o, f, g, sp).unwrap()
}

fn bird_manifest() -> Vec<PairSample> {
    let a = lin("Aves", "Coraciiformes", "Meropidae", "Merops", "apiaster");
    let b = lin("Aves", "Coraciiformes", "Alcedinidae", "Alcedo", "atthis");
    let pair = |id: &str, x: &Lineage, y: &Lineage, stratum: Stratum| PairSample {
        id: id.into(),
        features_a: vec![0.0; 2],
        features_b: vec![0.0; 2],
        lineage_a: x.clone(),
        lineage_b: y.clone(),
        label: stratum.label(),
        stratum,
        split: Split::Test,
        visual: false,
    };
    vec![
        pair("bee", &a, &b, Stratum::SameOrder),
        pair("same", &a, &a, Stratum::SameSpecies),
    ]
}

#[test]
fn score_traces_matches_engine_scoring() {
    let s = Sandbox::new();
    let data = bird_manifest();
    s.write("birds.jsonl", &manifest_string(&data));
    let bee = "<think>\n1. Order Analysis: ...in the same order.\n   <order>Coraciiformes; Coraciiformes</order>\n2. Family Analysis: ...in different families.\n   <family>Meropidae; Alcedinidae</family>\n...\n</think><answer>0.0000</answer>";
    let traces = [
        serde_json::json!({"pair_id": "bee", "trace": bee}),
        serde_json::json!({"pair_id": "same", "trace": "<answer>0.9</answer>"}),
        serde_json::json!({"pair_id": "ghost", "trace": bee}),
    ];
    let text: String = traces.iter().map(|t| t.to_string() + "\n").collect();
    s.write("traces.jsonl", &text);
    let (code, err) = s.code(&[
        "score-traces",
        "-c",
        "smoke.json",
        "--manifest",
        "birds.jsonl",
        "--traces",
        "traces.jsonl",
    ]);
    assert_eq!(code, 5, "{err}");
    assert!(err.contains("ghost"));
    let lines: Vec<Value> = s
        .read("runs/smoke/score/rewards.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["r_struct"], 1.0);
    assert_eq!(lines[0]["r_attr"], 1.0);
    assert_eq!(lines[1]["r_struct"], 0.0);
    assert_eq!(lines[1]["r_attr"], 0.0);
    let schema = AttributeSchema::taxonomy(AttributeMode::Concrete);
    let cfg = RewardConfig::default();
    for (line, (p, t)) in lines
        .iter()
        .zip(data.iter().zip([bee, "<answer>0.9</answer>"]))
    {
        let truth = GroundTruth::from_lineages(&p.lineage_a, &p.lineage_b, p.label, &schema);
        let (b, _) = score_trace::<f64>(t, &truth, &schema, &cfg).unwrap();
        assert_eq!(line["r_total"].as_f64().unwrap(), b.r_total);
        assert_eq!(line["r_corr"].as_f64().unwrap(), b.r_corr);
    }
    let report: Value = serde_json::from_str(&s.read("runs/smoke/score/report.json")).unwrap();
    assert_eq!(report["pairs"], 2);
    assert_eq!(report["format_adherence"], 50.0);

    s.write("clean.jsonl", &(traces[0].to_string() + "\n"));
    s.ok(&[
        "score-traces",
        "-c",
        "smoke.json",
        "--manifest",
        "birds.jsonl",
        "--traces",
        "clean.jsonl",
    ]);
}

#[test]
fn report_rerenders_tables() {
    let s = Sandbox::new();
    s.ok(&["gen-data", "-c", "smoke.json"]);
    s.ok(&["eval", "-c", "smoke.json", "--untrained"]);
    let tables = s.read("runs/smoke/eval-untrained/test/tables.txt");
    let out = s.ok(&[
        "report",
        "runs/smoke/eval-untrained/test/report.json",
        "--json",
        "cmp.json",
    ]);
    assert!(out.starts_with("Verification accuracy (%)"));
    // Same cells; only the method name differs.
    let cells = |t: &str| {
        t.lines()
            .nth(3)
            .unwrap()
            .split_whitespace()
            .skip(1)
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(cells(&out), cells(&tables));
    let cmp: Value = serde_json::from_str(&s.read("cmp.json")).unwrap();
    assert_eq!(cmp["rows"].as_array().unwrap().len(), 1);
    assert_eq!(s.code(&["report", "missing.json"]).0, 3);
}
