mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use common::mock_api::{MockApi, Reply};
use common::toy;
use easydistill::cli::run_cli;
use easydistill::config::JobType;
use easydistill::model::{load_model, save_model, ModelConfig, TinyLM};
use easydistill::pipeline::{load_pipeline, StageKind, StageStatus};
use easydistill::records::{read_json_array, read_topk_file, LabeledRecord};
use easydistill::trainers::RunManifest;
use easydistill::Error;
use serde_json::json;

const API_KD: &str = include_str!("fixtures/api_kd.json");
const WHITE_BOX_KD: &str = include_str!("fixtures/white_box_kd.json");
const STUDENT: &str = "student/Qwen/Qwen2.5-0.5B-Instruct/";

fn tiny(n_layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 260,
        d_model: 16,
        n_layers,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 40,
        seed,
    }
}

fn write(path: &Path, text: &str) {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).unwrap();
    }
    fs::write(path, text).unwrap();
}

fn instructions(n: usize) -> String {
    let items: Vec<_> = (0..n).map(|i| json!({"instruction": format!("c{}", "abcd".repeat(i % 3 + 1))})).collect();
    serde_json::to_string_pretty(&items).unwrap()
}

/// Black-box API job laid out like the shipped example, pointed at `url`.
fn api_job(dir: &Path, url: &str) -> PathBuf {
    write(&dir.join("train.json"), &instructions(16));
    write(&dir.join("chat_template.jinja"), toy::TEMPLATE);
    save_model(&TinyLM::init(tiny(1, 3)).unwrap(), &dir.join(STUDENT)).unwrap();
    let config = dir.join("kd.json");
    write(&config, &API_KD.replace("ENDPOINT", url));
    config
}

/// Every file below `dir` by relative path.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn api_job_labels_then_trains() {
    let api = MockApi::echo_reversed();
    let dir = tempfile::tempdir().unwrap();
    let config = api_job(dir.path(), &api.url);
    let (pipeline, diagnostics) = load_pipeline(&config).unwrap();
    assert!(diagnostics.is_empty());
    let report = pipeline.run().unwrap();
    let kinds: Vec<_> = report.stages.iter().map(|s| (s.stage, s.status)).collect();
    assert_eq!(kinds, vec![(StageKind::Annotate, StageStatus::Ran), (StageKind::Train, StageStatus::Ran)]);
    assert_eq!(api.requests().len(), 16);
    // streamed per the config
    assert!(api.requests().iter().all(|r| r.body["stream"] == true));

    let labeled: Vec<LabeledRecord> = read_json_array(&dir.path().join("train_labeled.json")).unwrap();
    assert_eq!(labeled.len(), 16);
    assert_eq!(labeled[1].output, labeled[1].instruction.chars().rev().collect::<String>());

    let result = dir.path().join("result");
    let manifest: RunManifest = serde_json::from_slice(&fs::read(result.join("manifest.json")).unwrap()).unwrap();
    // 16 samples, effective batch 8, 3 epochs
    assert_eq!(manifest.total_steps, 6);
    assert!(result.join("checkpoints/step-6/config.json").exists());
    assert_eq!(load_model(&result).unwrap().config(), &tiny(1, 3));
    let metrics = fs::read_to_string(result.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let resolved = fs::read_to_string(result.join("resolved_config.json")).unwrap();
    assert!(!resolved.contains("TOKEN"));
}

#[test]
fn rerun_is_fully_cached() {
    let api = MockApi::echo_reversed();
    let dir = tempfile::tempdir().unwrap();
    let config = api_job(dir.path(), &api.url);
    load_pipeline(&config).unwrap().0.run().unwrap();
    let before = tree(dir.path());
    let calls = api.requests().len();

    let report = load_pipeline(&config).unwrap().0.run().unwrap();
    assert_eq!(report.recomputed(), 0);
    assert!(report.to_string().contains("annotate: skipped (cached)"));
    assert!(report.to_string().contains("train: skipped (cached)"));
    assert_eq!(api.requests().len(), calls);
    assert_eq!(tree(dir.path()), before);

    // new instructions invalidate both stages
    write(&dir.path().join("train.json"), &instructions(9));
    let report = load_pipeline(&config).unwrap().0.run().unwrap();
    assert_eq!(report.recomputed(), 2);

    // a damaged output is recomputed
    fs::remove_file(dir.path().join("result/config.json")).unwrap();
    let report = load_pipeline(&config).unwrap().0.run().unwrap();
    assert_eq!(report.stages[0].status, StageStatus::Cached);
    assert_eq!(report.stages[1].status, StageStatus::Ran);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let api = MockApi::echo_reversed();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let config = api_job(d.path(), &api.url);
        load_pipeline(&config).unwrap().0.run().unwrap();
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{k} differs between runs");
    }
}

#[test]
fn white_box_job_exports_logits_then_distills() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write(&root.join("train.json"), &instructions(8));
    save_model(&TinyLM::init(tiny(2, 11)).unwrap(), &root.join("teacher/Qwen/Qwen2.5-7B-Instruct/")).unwrap();
    save_model(&TinyLM::init(tiny(1, 12)).unwrap(), &root.join(STUDENT)).unwrap();
    write(&root.join("chat_template.jinja"), toy::TEMPLATE);
    let text = WHITE_BOX_KD.replace("\"max_new_tokens\": 512", "\"max_new_tokens\": 6");
    write(&root.join("kd.json"), &text);

    let (pipeline, diagnostics) = load_pipeline(&root.join("kd.json")).unwrap();
    assert_eq!(diagnostics.len(), 1);
    let report = pipeline.run().unwrap();
    let kinds: Vec<_> = report.stages.iter().map(|s| s.stage).collect();
    assert_eq!(kinds, vec![StageKind::Annotate, StageKind::ExportLogits, StageKind::Train]);

    let labeled: Vec<LabeledRecord> = read_json_array(&root.join("train_labeled.json")).unwrap();
    let logits = read_topk_file(&root.join("logits.json")).unwrap();
    assert_eq!(logits.len(), labeled.len());
    assert!(logits.iter().flat_map(|r| &r.positions).all(|p| p.topk.len() == 10));
    let manifest: RunManifest = serde_json::from_slice(&fs::read(root.join("result/manifest.json")).unwrap()).unwrap();
    assert!(manifest.steps.iter().all(|s| s.metrics.contains_key("divergence")));

    let report = load_pipeline(&root.join("kd.json")).unwrap().0.run().unwrap();
    assert_eq!(report.stages.len(), 3);
    assert_eq!(report.recomputed(), 0);
}

#[test]
fn provided_labels_skip_annotation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let labeled = json!([{"instruction": "cab", "output": "ab"}, {"instruction": "rab", "output": "ba"}]);
    write(&root.join("train_labeled.json"), &labeled.to_string());
    write(&root.join("train.json"), &instructions(2));
    save_model(&TinyLM::init(tiny(2, 11)).unwrap(), &root.join("teacher/Qwen/Qwen2.5-7B-Instruct/")).unwrap();
    save_model(&TinyLM::init(tiny(1, 12)).unwrap(), &root.join(STUDENT)).unwrap();
    write(&root.join("chat_template.jinja"), toy::TEMPLATE);
    write(&root.join("kd.json"), WHITE_BOX_KD);
    let report = load_pipeline(&root.join("kd.json")).unwrap().0.run().unwrap();
    let kinds: Vec<_> = report.stages.iter().map(|s| s.stage).collect();
    assert_eq!(kinds, vec![StageKind::ExportLogits, StageKind::Train]);
    assert_eq!(fs::read_to_string(root.join("train_labeled.json")).unwrap(), labeled.to_string());
}

#[test]
fn white_box_requires_shared_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let labeled = json!([{"instruction": "cab", "output": "ab"}]);
    write(&root.join("train_labeled.json"), &labeled.to_string());
    save_model(&TinyLM::init(tiny(1, 11)).unwrap(), &root.join("teacher/Qwen/Qwen2.5-7B-Instruct/")).unwrap();
    let narrow = ModelConfig { vocab_size: 200, ..tiny(1, 12) };
    save_model(&TinyLM::init(narrow).unwrap(), &root.join(STUDENT)).unwrap();
    write(&root.join("chat_template.jinja"), toy::TEMPLATE);
    write(&root.join("kd.json"), WHITE_BOX_KD);
    match load_pipeline(&root.join("kd.json")).unwrap().0.run() {
        Err(Error::Stage { stage, source, .. }) => {
            assert_eq!(stage, "train");
            assert!(matches!(*source, Error::Config { ref key, ref message, .. } if key == "student" && message.contains("200")));
        }
        other => panic!("expected stage error, got {other:?}"),
    }
}

#[test]
fn stage_failure_names_stage_and_partial_outputs() {
    let api = MockApi::echo_reversed();
    let dir = tempfile::tempdir().unwrap();
    let config = api_job(dir.path(), &api.url);
    fs::remove_dir_all(dir.path().join("student")).unwrap();
    match load_pipeline(&config).unwrap().0.run() {
        Err(Error::Stage { stage, partial, source }) => {
            assert_eq!(stage, "train");
            assert!(matches!(*source, Error::Config { ref key, .. } if key == "student"));
            assert!(partial.iter().any(|p| p.ends_with("result/")));
        }
        other => panic!("expected stage error, got {other:?}"),
    }
    // the completed stage stays cached
    save_model(&TinyLM::init(tiny(1, 3)).unwrap(), &dir.path().join(STUDENT)).unwrap();
    let calls = api.requests().len();
    let report = load_pipeline(&config).unwrap().0.run().unwrap();
    assert_eq!(report.stages[0].status, StageStatus::Cached);
    assert_eq!(api.requests().len(), calls);
}

#[test]
fn preference_job_initializes_student_from_model_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let pairs = toy::marker_pairs(8, 1);
    write(&root.join("prefs.json"), &serde_json::to_string(&pairs).unwrap());
    write(&root.join("t.txt"), toy::TEMPLATE);
    let config = json!({
        "job_type": "dpo",
        "dataset": {"preference_path": "prefs.json", "template": "t.txt", "seed": 5},
        "models": {"student": "fresh/", "model_config": tiny(1, 9)},
        "training": {"output_dir": "out/", "num_train_epochs": 1, "per_device_train_batch_size": 2,
                     "gradient_accumulation_steps": 1, "learning_rate": 1e-3},
        "dpo": {"beta": 0.5}
    });
    write(&root.join("dpo.json"), &config.to_string());
    let (pipeline, _) = load_pipeline(&root.join("dpo.json")).unwrap();
    assert_eq!(pipeline.config().job_type, JobType::Dpo);
    pipeline.run().unwrap();
    let manifest: RunManifest = serde_json::from_slice(&fs::read(root.join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.total_steps, 4);
    assert_eq!(manifest.seed, 5);
    assert!((manifest.steps[0].loss - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn synthesis_job_writes_records_and_report() {
    let api = MockApi::start(|i, _| Reply::chat(&format!("a fresh question number {i} about something else entirely")));
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write(&root.join("seeds.json"), &instructions(3));
    let config = json!({
        "job_type": "synth_expand",
        "dataset": {"instruction_path": "seeds.json", "output_path": "expanded.json"},
        "inference": {"base_url": api.url, "api_key": "k", "concurrency": 1},
        "synthesis": {"fan_out": 2, "dedup_threshold": 1.0},
        "training": {"output_dir": "out/"}
    });
    write(&root.join("synth.json"), &config.to_string());
    load_pipeline(&root.join("synth.json")).unwrap().0.run().unwrap();
    let out: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(root.join("expanded.json")).unwrap()).unwrap();
    assert_eq!(out.len(), 6);
    assert!(out.iter().all(|r| r["provenance"]["operator"] == "expand"));
    assert!(root.join("out/synthesis_report.json").exists());
}

fn cli(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("easydistill").chain(args.iter().copied()).map(String::from).collect();
    run_cli(argv)
}

#[test]
fn cli_exit_codes() {
    let api = MockApi::echo_reversed();
    let dir = tempfile::tempdir().unwrap();
    let config = api_job(dir.path(), &api.url);
    let flag = format!("--config={}", config.display());

    assert_eq!(cli(&[&flag, "--dry-run"]), 0);
    assert!(api.requests().is_empty(), "dry run must not contact the endpoint");
    assert!(!dir.path().join("result").exists(), "dry run must not write");

    assert_eq!(cli(&[&flag]), 0);
    assert_eq!(cli(&[]), 1);
    assert_eq!(cli(&["--config=/nonexistent/kd.json"]), 1);
    assert_eq!(cli(&["--bogus"]), 1);

    let broken = dir.path().join("broken.json");
    write(&broken, "{\"job_type\": \"dpo\",,}");
    assert_eq!(cli(&[&format!("--config={}", broken.display())]), 1);

    let denied = MockApi::start(|_, _| Reply::status(401));
    let other = tempfile::tempdir().unwrap();
    let config = api_job(other.path(), &denied.url);
    assert_eq!(cli(&[&format!("--config={}", config.display())]), 2);
}
