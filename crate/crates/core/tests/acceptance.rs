//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::mock_api::MockApi;
use common::oracles::{divergence_case, gradient_case, log_softmax_rows, topk_record};
use common::toy;
use easydistill::config::{parse_config_str, Severity};
use easydistill::model::{load_model, save_model, ModelConfig, TinyLM};
use easydistill::numerics::{Tape, Tensor};
use easydistill::objectives::{dpo_loss, forward_kld, reward_model_loss, sft_loss, topk_kld, DistillSpec};
use easydistill::pipeline::{load_pipeline, StageStatus};
use easydistill::records::{LabeledRecord, PreferenceRecord};
use easydistill::teacher::export_topk_logits;
use easydistill::trainers::{
    dpo_accuracy, heldout_ce, lr_at, train_sft, warmup_steps, LrSchedulerType, RunManifest, SequenceFormat,
};
use serde_json::{json, Value};

const API_KD: &str = include_str!("fixtures/api_kd.json");
const LOCAL_KD: &str = include_str!("fixtures/local_kd.json");
const WHITE_BOX_KD: &str = include_str!("fixtures/white_box_kd.json");

const SEEDS: [u64; 3] = [11, 12, 13];
const TRAIN_PROMPTS: usize = 800;
const HELDOUT: usize = 300;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn write(path: &Path, text: &str) {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).unwrap();
    }
    fs::write(path, text).unwrap();
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    write(path, &serde_json::to_string_pretty(value).unwrap());
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn run_config(path: &Path, config: &Value) {
    write_json(path, config);
    let (pipeline, _) = load_pipeline(path).unwrap();
    pipeline.run().unwrap();
}

fn instructions(data: &[LabeledRecord]) -> Value {
    data.iter().map(|r| json!({"instruction": r.instruction})).collect()
}

fn student_config(seed: u64) -> ModelConfig {
    toy::model_config(2, 32, seed)
}

fn training_block() -> Value {
    json!({
        "output_dir": "result/",
        "num_train_epochs": 3,
        "per_device_train_batch_size": 4,
        "gradient_accumulation_steps": 2,
        "save_steps": 1000,
        "logging_steps": 10,
        "learning_rate": 3e-3,
        "weight_decay": 0.0,
        "warmup_ratio": 0.05,
        "lr_scheduler_type": "cosine"
    })
}

fn inference_block() -> Value {
    json!({
        "enable_chunked_prefill": true,
        "seed": 777,
        "gpu_memory_utilization": 0.9,
        "temperature": 0.8,
        "trust_remote_code": true,
        "enforce_eager": false,
        "max_model_len": 24,
        "max_new_tokens": 12
    })
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

fn params_of(m: &TinyLM) -> Vec<Vec<f64>> {
    m.params().iter().map(|p| p.tensor.data().to_vec()).collect()
}

/// Teacher trained on the toy grammar, shared by the distillation criteria.
struct Lab {
    root: PathBuf,
    teacher_dir: PathBuf,
    teacher: TinyLM,
    heldout: Vec<LabeledRecord>,
    format: SequenceFormat,
    teacher_secs: f64,
}

impl Lab {
    fn new(root: &Path) -> Self {
        let started = Instant::now();
        let dir = root.join("teacher");
        let mut teacher = TinyLM::init(toy::model_config(4, 64, 1)).unwrap();
        let mut cfg = toy::training(&root.join("teacher_run"), 3, 8, 1, 3e-3);
        cfg.lr_scheduler_type = LrSchedulerType::Cosine;
        cfg.warmup_ratio = 0.05;
        cfg.logging_steps = 100;
        train_sft(&mut teacher, &toy::corpus(3000, 1), &cfg, &toy::format(64)).unwrap();
        save_model(&teacher, &dir).unwrap();
        write(&root.join("t.txt"), toy::TEMPLATE);
        Self {
            root: root.to_path_buf(),
            teacher_dir: dir,
            teacher,
            heldout: toy::corpus(HELDOUT, 999),
            format: toy::format(64),
            teacher_secs: started.elapsed().as_secs_f64(),
        }
    }

    fn template(&self) -> String {
        self.root.join("t.txt").display().to_string()
    }
}

/// Output of one black-box local distillation run.
struct BlackBox {
    labeled: PathBuf,
    student_dir: PathBuf,
    ce_untrained: f64,
    ce_trained: f64,
}

fn black_box_run(lab: &Lab, seed: u64) -> BlackBox {
    let dir = lab.root.join(format!("bb-{seed}"));
    write_json(&dir.join("train.json"), &instructions(&toy::corpus(TRAIN_PROMPTS, 100 + seed)));
    let mut inference = inference_block();
    inference["seed"] = json!(777 + seed);
    let config = json!({
        "job_type": "black_box_kd_local",
        "dataset": {
            "instruction_path": "train.json",
            "labeled_path": "train_labeled.json",
            "template": lab.template(),
            "seed": seed
        },
        "inference": inference,
        "models": {
            "teacher": lab.teacher_dir,
            "student": "student/",
            "model_config": student_config(seed)
        },
        "training": training_block()
    });
    run_config(&dir.join("kd.json"), &config);
    let untrained = TinyLM::init(student_config(seed)).unwrap();
    let trained = load_model(&dir.join("result")).unwrap();
    BlackBox {
        labeled: dir.join("train_labeled.json"),
        student_dir: dir.join("result"),
        ce_untrained: heldout_ce(&untrained, &lab.heldout, &lab.format).unwrap(),
        ce_trained: heldout_ce(&trained, &lab.heldout, &lab.format).unwrap(),
    }
}

/// Token-mean forward KL from teacher to student over held-out responses.
fn heldout_forward_kld(teacher: &TinyLM, student: &TinyLM, data: &[LabeledRecord], format: &SequenceFormat) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for rec in data {
        let s = format.encode(teacher.config(), &rec.instruction, &rec.output).unwrap();
        let t = log_softmax_rows(&teacher.forward(s.inputs()).unwrap());
        let q = log_softmax_rows(&student.forward(s.inputs()).unwrap());
        for r in s.response_rows() {
            total += t.row(r).iter().zip(q.row(r)).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum::<f64>();
            n += 1;
        }
    }
    total / n as f64
}

fn white_box_run(lab: &Lab, bb: &BlackBox, seed: u64, kd_ratio: f64) -> f64 {
    let dir = lab.root.join(format!("wb-{seed}-{kd_ratio}"));
    let config = json!({
        "job_type": "white_box_kd_local",
        "dataset": {
            "labeled_path": bb.labeled,
            "logits_path": "logits.json",
            "template": lab.template(),
            "seed": seed
        },
        "inference": inference_block(),
        "distillation": {"kd_ratio": kd_ratio, "max_seq_length": 64, "distillation_type": "forward_kld"},
        "models": {
            "teacher": lab.teacher_dir,
            "student": "student/",
            "model_config": student_config(seed)
        },
        "training": training_block()
    });
    run_config(&dir.join("kd.json"), &config);
    let student = load_model(&dir.join("result")).unwrap();
    heldout_forward_kld(&lab.teacher, &student, &lab.heldout, &lab.format)
}

fn c1_gradients() -> Verdict {
    let started = Instant::now();
    let (mut worst, mut worst_name, mut checks) = (0.0f64, "", 0);
    for seed in 0..100 {
        for (name, err) in gradient_case(seed) {
            checks += 1;
            if err > worst {
                worst = err;
                worst_name = name;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-4 && secs < 120.0,
        format!("{checks} checks over 100 seeds, max relative error {worst:.2e} ({worst_name}), {secs:.1}s"),
    )
}

fn c2_divergences() -> Verdict {
    let (mut min_value, mut identity, mut shift, mut gap) = (f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
    let cases = 500;
    for seed in 0..cases {
        let l = divergence_case(seed);
        min_value = min_value.min(l.min_value);
        identity = identity.max(l.identity);
        shift = shift.max(l.shift);
        gap = gap.max(l.topk_full_gap);
    }
    verdict(
        min_value >= -1e-12 && identity <= 1e-10 && shift <= 1e-9 && gap <= 1e-9,
        format!(
            "{cases} cases: min value {min_value:.1e}, |D(p,p)| {identity:.1e}, shift {shift:.1e}, top-V gap {gap:.1e}"
        ),
    )
}

fn c3_anchors() -> Verdict {
    let ln2 = std::f64::consts::LN_2;
    let mut tape = Tape::new();
    let pc = tape.param(Tensor::vector(vec![-3.0, -7.5, -1.25])).unwrap();
    let pr = tape.param(Tensor::vector(vec![-2.0, -4.0, -9.0])).unwrap();
    let dpo = dpo_loss(&mut tape, pc, pr, &[-3.0, -7.5, -1.25], &[-2.0, -4.0, -9.0], 0.1).unwrap();
    let dpo = (tape.item(dpo) - ln2).abs();

    let rc = tape.param(Tensor::vector(vec![0.7, -2.0])).unwrap();
    let rr = tape.param(Tensor::vector(vec![0.7, -2.0])).unwrap();
    let bt = reward_model_loss(&mut tape, rc, rr).unwrap();
    let bt = (tape.item(bt) - ln2).abs();

    let logits = tape.param(Tensor::zeros(&[5, 260])).unwrap();
    let ce = sft_loss(&mut tape, logits, &[4, 9, 100, 259, 17], &[1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
    let ce = (tape.item(ce) - 260f64.ln()).abs();

    let cfg = parse_config_str(API_KD).unwrap().config.training;
    let total = 1000;
    let w = warmup_steps(total, &cfg);
    let lr = |s| lr_at(s, total, &cfg).unwrap();
    let sched = lr(0).abs().max((lr(w) - cfg.learning_rate).abs()).max(lr(total).abs());
    verdict(
        dpo <= 1e-12 && bt <= 1e-12 && ce <= 1e-9 && sched <= 1e-12,
        format!("|dpo-ln2| {dpo:.1e}, |bt-ln2| {bt:.1e}, |ce-ln260| {ce:.1e}, schedule endpoints {sched:.1e} (warmup {w})"),
    )
}

fn c4_configs() -> Verdict {
    let mut problems = Vec::new();
    let mut notices = 0;
    for (name, text) in [("api_kd", API_KD), ("local_kd", LOCAL_KD), ("white_box_kd", WHITE_BOX_KD)] {
        let parsed = match parse_config_str(text) {
            Ok(p) => p,
            Err(e) => {
                problems.push(format!("{name}: {e}"));
                continue;
            }
        };
        if parsed.diagnostics.iter().any(|d| d.severity == Severity::Warning) {
            problems.push(format!("{name}: warnings {:?}", parsed.diagnostics));
        }
        notices += parsed.diagnostics.len();
        let c = parsed.config;
        let t = &c.training;
        let ok_training = t.output_dir == Path::new("result/")
            && t.num_train_epochs == 3
            && t.per_device_train_batch_size == 1
            && t.gradient_accumulation_steps == 8
            && t.learning_rate == 2e-5
            && t.weight_decay == 0.05
            && t.warmup_ratio == 0.1
            && t.lr_scheduler_type == LrSchedulerType::Cosine;
        if !ok_training {
            problems.push(format!("{name}: training block {t:?}"));
        }
        let i = &c.inference;
        let ok = match name {
            "api_kd" => {
                i.base_url.as_deref() == Some("ENDPOINT")
                    && i.api_key.as_ref().map(|k| k.expose()) == Some("TOKEN")
                    && i.stream
                    && i.max_new_tokens == 512
                    && c.dataset.seed == 42
            }
            "local_kd" => {
                i.temperature == Some(0.8)
                    && i.seed == 777
                    && i.max_model_len == Some(4096)
                    && c.models.teacher.as_deref() == Some(Path::new("teacher/Qwen/Qwen2.5-32B-Instruct/"))
            }
            _ => c.distillation.as_ref().is_some_and(|d| {
                d.kd_ratio == 0.5 && d.max_seq_length == 512 && d.distillation_type.as_str() == "forward_kld"
            }) && c.dataset.logits_path.as_deref() == Some(Path::new("logits.json")),
        };
        if !ok {
            problems.push(format!("{name}: values differ"));
        }
    }
    verdict(
        problems.is_empty() && notices == 2,
        if problems.is_empty() {
            format!("3 configs parsed, 0 warnings, {notices} backend-flag notices")
        } else {
            problems.join("; ")
        },
    )
}

fn c5_black_box(lab: &Lab, runs: &[BlackBox], secs: f64) -> Verdict {
    let reductions: Vec<f64> = runs.iter().map(|r| 1.0 - r.ce_trained / r.ce_untrained).collect();
    let m = median(reductions.clone());
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{:.3}->{:.3}", r.ce_untrained, r.ce_trained)).collect();
    verdict(
        m >= 0.2 && secs < 600.0,
        format!(
            "held-out CE {} , median reduction {:.1}%, {secs:.1}s (+{:.1}s teacher)",
            per_seed.join(", "),
            100.0 * m,
            lab.teacher_secs
        ),
    )
}

fn c6_white_box(lab: &Lab, runs: &[BlackBox]) -> Verdict {
    let mut kd = Vec::new();
    let mut sft = Vec::new();
    for (seed, bb) in SEEDS.iter().zip(runs) {
        kd.push(white_box_run(lab, bb, *seed, 0.5));
        sft.push(white_box_run(lab, bb, *seed, 0.0));
    }
    let (mk, ms) = (median(kd.clone()), median(sft.clone()));
    verdict(mk < ms, format!("held-out forward KLD median {mk:.4} (kd_ratio 0.5) vs {ms:.4} (kd_ratio 0); per seed {kd:.4?} vs {sft:.4?}"))
}

fn c7_topk(lab: &Lab, runs: &[BlackBox]) -> Verdict {
    let student = load_model(&runs[0].student_dir).unwrap();
    let vocab = lab.teacher.config().vocab_size;
    let ks = [2, 4, 8, 16, vocab];
    let mut gaps = vec![0.0; ks.len()];
    let samples = &lab.heldout[..100];
    for rec in samples {
        let s = lab.format.encode(lab.teacher.config(), &rec.instruction, &rec.output).unwrap();
        let rows = s.response_rows();
        let t = log_softmax_rows(&lab.teacher.forward(s.inputs()).unwrap());
        let q = student.forward(s.inputs()).unwrap();
        let pick = |m: &Tensor| {
            Tensor::new(vec![rows.len(), vocab], rows.iter().flat_map(|&r| m.row(r).to_vec()).collect()).unwrap()
        };
        let (t, q) = (pick(&t), pick(&q));
        let all: Vec<usize> = (0..rows.len()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(q).unwrap();
        let full = forward_kld(&mut tape, &t, x, &vec![1.0; rows.len()]).unwrap();
        let full = tape.item(full);
        for (gap, &k) in gaps.iter_mut().zip(&ks) {
            let spec = DistillSpec {
                top_k: k,
                ..DistillSpec::default()
            };
            let d = topk_kld(&mut tape, &topk_record(&t, k), x, &all, &spec).unwrap();
            *gap += (tape.item(d) - full).abs() / samples.len() as f64;
        }
    }
    let monotone = gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let summary = export_topk_logits(
        &lab.teacher,
        &lab.heldout,
        10,
        64,
        &lab.format.template,
        "",
        &lab.root.join("heldout_logits.json"),
    )
    .unwrap();
    let labels: Vec<String> = ks.iter().zip(&gaps).map(|(k, g)| format!("k={k}:{g:.4}")).collect();
    verdict(
        monotone && summary.mean_topk_mass >= 0.95,
        format!("mean |topk - full| {}; top-10 mass {:.4}", labels.join(" "), summary.mean_topk_mass),
    )
}

fn c8_dpo(lab: &Lab) -> Verdict {
    let dir = lab.root.join("dpo");
    let train = toy::marker_pairs(200, 21);
    let heldout: Vec<PreferenceRecord> = toy::marker_pairs(100, 22);
    write_json(&dir.join("prefs.json"), &train);
    let model_config = student_config(3);
    let config = json!({
        "job_type": "dpo",
        "dataset": {"preference_path": "prefs.json", "template": lab.template(), "seed": 3},
        "models": {"student": "student/", "model_config": model_config},
        "training": {"output_dir": "result/", "num_train_epochs": 3, "per_device_train_batch_size": 8,
                     "gradient_accumulation_steps": 1, "learning_rate": 1e-3, "weight_decay": 0.0,
                     "warmup_ratio": 0.1, "logging_steps": 5},
        "dpo": {"beta": 0.1}
    });
    run_config(&dir.join("dpo.json"), &config);
    let initial = TinyLM::init(model_config).unwrap();
    let trained = load_model(&dir.join("result")).unwrap();
    let before = dpo_accuracy(&initial, &initial, &heldout, &lab.format).unwrap();
    let after = dpo_accuracy(&trained, &initial, &heldout, &lab.format).unwrap();
    let m = manifest(&dir.join("result"));
    let first = (m.steps[0].loss - std::f64::consts::LN_2).abs();
    verdict(
        (before - 0.5).abs() <= 0.15 && after > 0.9 && first <= 1e-6,
        format!(
            "held-out accuracy {before:.3} -> {after:.3} after 3 epochs ({} steps), |step-1 loss - ln2| {first:.1e}",
            m.total_steps
        ),
    )
}

fn c9_grpo(lab: &Lab, runs: &[BlackBox]) -> Verdict {
    let mut deltas = Vec::new();
    let mut worst_adv = 0.0f64;
    let mut per_seed = Vec::new();
    for (seed, bb) in SEEDS.iter().zip(runs) {
        let dir = lab.root.join(format!("grpo-{seed}"));
        write_json(&dir.join("prompts.json"), &instructions(&toy::corpus(64, 300 + seed)));
        let config = json!({
            "job_type": "grpo",
            "dataset": {"instruction_path": "prompts.json", "template": lab.template(), "seed": seed},
            "models": {"student": bb.student_dir},
            "training": {"output_dir": "result/", "per_device_train_batch_size": 4, "gradient_accumulation_steps": 1,
                         "learning_rate": 2e-3, "weight_decay": 0.0, "warmup_ratio": 0.0,
                         "lr_scheduler_type": "constant", "logging_steps": 10},
            "grpo": {"group_size": 8, "iterations": 50, "temperature": 1.0, "max_new_tokens": 8,
                     "reward": {"type": "contains", "target": "d"}}
        });
        run_config(&dir.join("grpo.json"), &config);
        let m = manifest(&dir.join("result"));
        let rewards: Vec<f64> = m.steps.iter().map(|s| s.metrics["reward"]).collect();
        for s in &m.steps {
            worst_adv = worst_adv.max(s.metrics["advantage_mean_abs"]);
        }
        let (first, last) = (mean(&rewards[..10]), mean(&rewards[rewards.len() - 10..]));
        per_seed.push(format!("{first:.3}->{last:.3}"));
        deltas.push(last - first);
    }
    let m = median(deltas);
    verdict(
        m > 0.0 && worst_adv <= 1e-12,
        format!(
            "mean reward first 10 -> last 10 of 50 iterations: {} (median gain {m:+.3}); max |mean advantage| {worst_adv:.1e}",
            per_seed.join(", ")
        ),
    )
}

/// The API job from the shipped example, pointed at `url`.
fn api_job(dir: &Path, url: &str, save_steps: usize, resume: Option<&Path>) -> PathBuf {
    let items: Vec<Value> = (0..16).map(|i| json!({"instruction": format!("r{}", "abcd".repeat(i % 3 + 1))})).collect();
    write_json(&dir.join("train.json"), &items);
    write(&dir.join("chat_template.jinja"), toy::TEMPLATE);
    let mut config: Value = serde_json::from_str(&API_KD.replace("ENDPOINT", url)).unwrap();
    let student = config["models"]["student"].as_str().unwrap().to_string();
    save_model(&TinyLM::init(toy::model_config(1, 16, 3)).unwrap(), &dir.join(student)).unwrap();
    config["training"]["save_steps"] = json!(save_steps);
    if let Some(ckpt) = resume {
        config["training"]["resume_from_checkpoint"] = json!(ckpt);
    }
    let path = dir.join("kd.json");
    write_json(&path, &config);
    path
}

fn c10_reproducibility(lab: &Lab) -> Verdict {
    let api = MockApi::echo_reversed();
    let (a, b) = (lab.root.join("repro-a"), lab.root.join("repro-b"));
    let run = |config: &Path| load_pipeline(config).unwrap().0.run().unwrap();
    run(&api_job(&a, &api.url, 1000, None));
    run(&api_job(&b, &api.url, 1000, None));
    let identical = tree(&a) == tree(&b);

    let before = tree(&a);
    let requests = api.requests().len();
    let report = run(&a.join("kd.json"));
    let cached = report.stages.iter().all(|s| s.status == StageStatus::Cached);
    let new_requests = api.requests().len() - requests;
    let untouched = tree(&a) == before;

    let (c, d) = (lab.root.join("repro-c"), lab.root.join("repro-d"));
    run(&api_job(&c, &api.url, 2, None));
    let ckpt = c.join("result/checkpoints/step-2");
    run(&api_job(&d, &api.url, 1000, Some(&ckpt)));
    let full = load_model(&c.join("result")).unwrap();
    let resumed = load_model(&d.join("result")).unwrap();
    let losses = |m: RunManifest| m.steps.iter().map(|s| s.loss).collect::<Vec<_>>();
    let resume_equal =
        params_of(&full) == params_of(&resumed) && losses(manifest(&c.join("result"))) == losses(manifest(&d.join("result")));

    verdict(
        identical && cached && new_requests == 0 && untouched && resume_equal,
        format!(
            "two runs byte-identical: {identical}; rerun cached: {cached} with {new_requests} requests, tree unchanged: {untouched}; resume from step 2 matches: {resume_equal}"
        ),
    )
}

fn main() {
    let started = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let mut failed = 0;
    let mut report = |n: usize, title: &str, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {} {title}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    };

    report(1, "gradient checks", &mut c1_gradients);
    report(2, "divergence laws", &mut c2_divergences);
    report(3, "closed-form anchors", &mut c3_anchors);
    report(4, "example configs", &mut c4_configs);

    let lab = Lab::new(root.path());
    let bb_started = Instant::now();
    let runs: Vec<BlackBox> = SEEDS.iter().map(|&s| black_box_run(&lab, s)).collect();
    let bb_secs = bb_started.elapsed().as_secs_f64();

    report(5, "black-box distillation", &mut || c5_black_box(&lab, &runs, bb_secs));
    report(6, "white-box vs label-only", &mut || c6_white_box(&lab, &runs));
    report(7, "top-k approximation", &mut || c7_topk(&lab, &runs));
    report(8, "preference optimization", &mut || c8_dpo(&lab));
    report(9, "group policy optimization", &mut || c9_grpo(&lab, &runs));
    report(10, "reproducibility", &mut || c10_reproducibility(&lab));

    println!("acceptance: {} of 10 criteria passed in {:.1}s", 10 - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
