use std::path::{Path, PathBuf};

use gatedreason::engine::DEFAULT_SYSTEM_PROMPT;
use gatedreason::image::Raster;
use gatedreason::pipeline::{read_jsonl, read_ledger, to_jsonl, DpoRecord, SeedRecord, TrajectoryRecord, Turn};
use gatedreason::toolbox::{ActionKind, ToolInvocation};
use gatedreason::trajectory::Observation;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn cli<S: AsRef<str>>(args: &[S]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("gatedreason".to_string()).chain(args.iter().map(|s| s.as_ref().to_string()));
    let code = gatedreason::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn write_png(path: &Path) {
    let mut r = Raster::filled(8, 8, [10, 120, 40, 255]);
    r.set_pixel(2, 5, [255, 255, 0, 255]);
    std::fs::write(path, r.to_png().unwrap()).unwrap();
}

#[test]
fn run_writes_report_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let png = tmp.path().join("in.png");
    write_png(&png);
    let report = tmp.path().join("report.json");
    let (code, _, err) = cli(&[
        "--mock",
        &p(&fixtures().join("scripted")),
        "run",
        "--question",
        "what is shown",
        "--image",
        &p(&png),
        "--out",
        &p(&report),
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["stop_reason"], "verifier_stop");
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("report.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "run");
    assert_eq!(m["verifier"]["epsilon"], 0.5);
}

#[test]
fn run_with_missing_image_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere.png");
    let (code, _, err) = cli(&[
        "--mock",
        &p(&fixtures().join("scripted")),
        "run",
        "--question",
        "q",
        "--image",
        &p(&missing),
    ]);
    assert_ne!(code, 0);
    assert!(err.contains("nowhere.png"), "{err}");
}

#[test]
fn run_without_verifier_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let png = tmp.path().join("in.png");
    write_png(&png);
    let (code, _, err) = cli(&["run", "--question", "q", "--image", &p(&png)]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn unreachable_reasoner_exits_with_endpoint_code() {
    let tmp = tempfile::tempdir().unwrap();
    let mock = tmp.path().join("mock");
    std::fs::create_dir(&mock).unwrap();
    for f in ["verifier_tuned.json", "verifier_reference.json"] {
        std::fs::copy(fixtures().join("scripted").join(f), mock.join(f)).unwrap();
    }
    std::fs::write(mock.join("reasoner.json"), r#"{"model_id": "down", "unreachable": true}"#).unwrap();
    let png = tmp.path().join("in.png");
    write_png(&png);
    let (code, out, _) = cli(&["--mock", &p(&mock), "run", "--question", "q", "--image", &p(&png)]);
    assert_eq!(code, 3);
    assert!(out.contains("model_error"), "{out}");
}

#[test]
fn score_reproduces_episode_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let png = tmp.path().join("in.png");
    write_png(&png);
    let mock = p(&fixtures().join("scripted"));
    let report = tmp.path().join("report.json");
    let (code, _, err) = cli(&["--mock", &mock, "run", "--question", "q", "--image", &p(&png), "--out", &p(&report)]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let traj = tmp.path().join("traj.json");
    std::fs::write(&traj, serde_json::to_vec(&v["trajectory"]).unwrap()).unwrap();

    let (code, out, err) = cli(&["--mock", &mock, "score", "--trajectory", &p(&traj)]);
    assert_eq!(code, 0, "{err}");
    let s: serde_json::Value = serde_json::from_str(&out).unwrap();
    let ratios: Vec<f64> = s["raw_ratios"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((ratios[0] - 3.0).abs() < 1e-9 && (ratios[1] - 2.0).abs() < 1e-9 && (ratios[2] - 0.1).abs() < 1e-9);
    assert_eq!(s["stop_at"], 3);
}

#[test]
fn stats_on_empty_shard_is_a_zero_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let shard = tmp.path().join("empty.jsonl");
    std::fs::write(&shard, "").unwrap();
    let (code, out, err) = cli(&["pipeline", "stats", "--input", &p(&shard)]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["records"], 0);
    assert_eq!(v["error_records"], 0);
}

#[test]
fn stats_on_missing_shard_fails() {
    let (code, _, err) = cli(&["pipeline", "stats", "--input", "/nonexistent/shard.jsonl"]);
    assert_ne!(code, 0);
    assert!(err.contains("/nonexistent/shard.jsonl"), "{err}");
}

fn fixture_record(i: usize) -> TrajectoryRecord {
    let mut turns = Vec::new();
    let steps = [0, 1, 2, 1, 3, 1][i % 6];
    for s in 0..steps {
        turns.push(Turn::Planning {
            text: format!("look at part {s}"),
        });
        turns.push(Turn::Action {
            invocation: ToolInvocation::new(ActionKind::Ocr, [("image", "input")]),
        });
        if !(i % 6 == 3 && s == 0) {
            turns.push(Turn::Observation {
                observation: Observation::text(ActionKind::Ocr, "STOP"),
            });
        }
    }
    if i % 6 == 5 {
        turns.push(Turn::Planning {
            text: vec!["tok"; 20_001].join(" "),
        });
    }
    turns.push(Turn::Answer { text: "STOP".into() });
    TrajectoryRecord {
        seed: SeedRecord {
            id: format!("fx-{i:02}"),
            task_type: "ocr".into(),
            question: format!("what does sign {i} say"),
            image_refs: vec!["img".into()],
            label: "STOP".into(),
        },
        system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
        generator: "fixture".into(),
        turns,
        error: (i == 7).then(|| "timeout".into()),
        judge: None,
    }
}

#[test]
fn preprocess_ledger_matches_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw.jsonl");
    let records: Vec<TrajectoryRecord> = (0..12).map(fixture_record).collect();
    std::fs::write(&raw, to_jsonl(&records)).unwrap();
    let cleaned = tmp.path().join("cleaned.jsonl");
    let (code, _, err) = cli(&["pipeline", "preprocess", "--input", &p(&raw), "--output", &p(&cleaned)]);
    assert_eq!(code, 0, "{err}");
    let ledger = std::fs::read(tmp.path().join("cleaned.ledger.csv")).unwrap();
    let gold = golden("preprocess.ledger.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&gold, &ledger).unwrap();
    }
    assert_eq!(String::from_utf8(ledger).unwrap(), std::fs::read_to_string(&gold).unwrap());
    let kept: Vec<TrajectoryRecord> = read_jsonl(&cleaned).unwrap();
    let drops = read_ledger(&tmp.path().join("cleaned.ledger.csv")).unwrap();
    assert_eq!(kept.len() + drops.len(), records.len());
}

#[test]
fn mock_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let bench = tmp.path().join("bench");
    std::fs::create_dir(&bench).unwrap();
    write_png(&bench.join("sign.png"));
    let mut manifest = String::new();
    for i in 0..6 {
        let q = if i % 3 == 0 { "glance at the sign" } else { "read the sign" };
        manifest.push_str(&format!(
            "{{\"id\":\"b{i}\",\"task_type\":\"ocr\",\"question\":\"{q} {i}\",\"images\":[\"sign.png\"],\"label\":\"STOP\"}}\n"
        ));
    }
    std::fs::write(bench.join("manifest.jsonl"), manifest).unwrap();
    let mock = p(&fixtures().join("pipeline"));
    let out = tmp.path().join("out");
    let f = |n: &str| p(&out.join(n));
    let stage = |name: &str, input: String, output: String| {
        let (code, _, err) = cli(&[
            "--mock", &mock, "--seed", "11", "pipeline", name, "--input", &input, "--output", &output,
        ]);
        assert_eq!(code, 0, "{name}: {err}");
    };
    stage("generate", p(&bench), f("raw.jsonl"));
    stage("preprocess", f("raw.jsonl"), f("cleaned.jsonl"));
    stage("judge", f("cleaned.jsonl"), f("accepted.jsonl"));
    stage("sft", f("accepted.jsonl"), f("sft.jsonl"));
    stage("induce", f("sft.jsonl"), f("candidates.jsonl"));
    stage("dpo", f("candidates.jsonl"), f("dpo.jsonl"));

    let pre = read_ledger(&out.join("cleaned.ledger.csv")).unwrap();
    assert_eq!(pre.len(), 2);
    assert!(pre.iter().all(|e| e.rule == "no_tool_use"));
    let dpo: Vec<DpoRecord> = read_jsonl(&out.join("dpo.jsonl")).unwrap();
    assert_eq!(dpo.len(), 4);
    for d in &dpo {
        assert_eq!(d.rejected.final_answer.as_deref(), Some("GO"));
        assert_eq!(d.chosen.steps[..d.branch_point - 1], d.rejected.steps[..d.branch_point - 1]);
    }

    let first = std::fs::read(out.join("dpo.jsonl")).unwrap();
    stage("dpo", f("candidates.jsonl"), f("dpo.jsonl"));
    assert_eq!(first, std::fs::read(out.join("dpo.jsonl")).unwrap());

    let (code, stats, err) = cli(&[
        "pipeline",
        "stats",
        "--input",
        &f("raw.jsonl"),
        "--ledger",
        &f("cleaned.ledger.csv"),
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(v["records"], 6);
    assert_eq!(v["drops_by_rule"]["no_tool_use"], 2);
}

#[test]
fn lab_probes_report_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("grad.json");
    let (code, _, err) = cli(&["--seed", "5", "lab", "grad-check", "--instances", "10", "--out", &p(&out)]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["seed"], 5);

    let inst = p(&fixtures().join("sft_instance.json"));
    let (code, out, err) = cli(&["lab", "sft-train", "--instance", &inst]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("\"pass\": true"));
}
