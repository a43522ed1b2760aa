use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use lac_core::harness::RunConfig;
use serde_json::Value;

fn tiny_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::small();
    c.data.n_tasks = 24;
    c.sft.phase1_steps = 6;
    c.sft.warm_start_step = 4;
    c.sft.phase2_steps = 6;
    c.sft.batch_size = 4;
    c.sft.checkpoint_every = 3;
    c.rl.updates = 2;
    c.rl.group_size = 2;
    c.rl.prompts_per_update = 2;
    c.rl.checkpoint_every = 1;
    c.rl.eval_prompts = 6;
    c.eval.n_per_category = 1;
    c.eval.intervention_prompts = 6;
    c.paths.out_dir = out.to_path_buf();
    c
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, tiny_config(&dir.join("out")).to_toml().unwrap()).unwrap();
    path
}

fn lac(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lac")).arg("--config").arg(config).args(args).output().unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstderr:\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    o
}

/// One supervised run shared by the read-only tests.
struct Trained {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn trained() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        ok(lac(&config, &["gen-data"]));
        ok(lac(&config, &["train-sft"]));
        let out = dir.path().join("out");
        Trained { _dir: dir, config, out }
    })
}

/// Metrics lines with wall-clock fields removed.
fn metric_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            if let Some(o) = v.as_object_mut() {
                o.remove("wall_s");
            }
            v
        })
        .filter(|v| v.get("kind").is_none())
        .collect()
}

#[test]
fn config_prints_round_trippable_toml() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let o = ok(lac(&config, &["config"]));
    let parsed = RunConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(parsed, tiny_config(&dir.path().join("out")));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[sft]\nlearning_rate = 0.1\n").unwrap();
    let o = lac(&path, &["config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn missing_checkpoint_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let o = lac(&config, &["eval", "--checkpoint", dir.path().join("none.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).lines().any(|l| l.starts_with("error:") && l.contains("none.ckpt")));
}

#[test]
fn training_writes_phase_checkpoints_and_metrics() {
    let t = trained();
    for f in [
        "tasks.jsonl",
        "metrics_sft.jsonl",
        "sft.ckpt",
        "sft_correction_warmup_step00000.ckpt",
        "sft_correction_warmup_step00004.ckpt",
        "sft_full_generation_step00006.ckpt",
    ] {
        assert!(t.out.join(f).exists(), "{f} missing");
    }
    let lines = metric_lines(&t.out.join("metrics_sft.jsonl"));
    assert_eq!(lines.len(), 12);
    assert!(lines[..6].iter().all(|v| v["phase"] == "correction_warmup" && v["l_img"] == 0.0));
    assert!(lines[6..].iter().all(|v| v["phase"] == "full_generation"));
}

#[test]
fn sft_resume_reproduces_uninterrupted_metrics() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    for f in ["tasks.jsonl", "metrics_sft.jsonl", "sft_correction_warmup_step00004.ckpt", "sft_full_generation_step00003.ckpt"] {
        std::fs::copy(t.out.join(f), out.join(f)).unwrap();
    }
    ok(lac(&config, &["train-sft", "--resume", out.join("sft_full_generation_step00003.ckpt").to_str().unwrap()]));
    assert_eq!(metric_lines(&out.join("metrics_sft.jsonl")), metric_lines(&t.out.join("metrics_sft.jsonl")));
    assert_eq!(std::fs::read(out.join("sft.ckpt")).unwrap(), std::fs::read(t.out.join("sft.ckpt")).unwrap());
}

#[test]
fn rl_resume_reproduces_uninterrupted_metrics() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::copy(t.out.join("tasks.jsonl"), out.join("tasks.jsonl")).unwrap();
    let init = t.out.join("sft.ckpt");
    let init = init.to_str().unwrap();
    ok(lac(&config, &["train-rl", "--init", init]));
    let full = metric_lines(&out.join("metrics_rl.jsonl"));
    let final_bytes = std::fs::read(out.join("rl.ckpt")).unwrap();
    assert_eq!(full.len(), 2);

    ok(lac(&config, &["train-rl", "--init", init, "--resume", out.join("rl_update00001.ckpt").to_str().unwrap()]));
    assert_eq!(metric_lines(&out.join("metrics_rl.jsonl")), full);
    assert_eq!(std::fs::read(out.join("rl.ckpt")).unwrap(), final_bytes);
}

#[test]
fn eval_tables_are_reproducible() {
    let t = trained();
    let ck = t.out.join("sft.ckpt");
    let run = || {
        ok(lac(&t.config, &["eval", "--checkpoint", ck.to_str().unwrap(), "--seed", "4"]));
        std::fs::read_to_string(t.out.join("eval.txt")).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.starts_with("model"));
    let json: Value = serde_json::from_str(&std::fs::read_to_string(t.out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["per_category"].as_array().unwrap().len(), 6);
    assert!(t.out.join("eval.svg").exists());
}

#[test]
fn sample_reads_prompt_only_files() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    // keep only id, category and tokens: the sampler must not need the rest
    let text = std::fs::read_to_string(t.out.join("tasks.jsonl")).unwrap();
    let mut lines = text.lines();
    let mut header: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    header["n_tasks"] = 5.into();
    let mut stripped = vec![header.to_string()];
    for l in lines.take(5) {
        let v: Value = serde_json::from_str(l).unwrap();
        stripped.push(serde_json::json!({"id": v["id"], "category": v["category"], "tokens": v["tokens"]}).to_string());
    }
    let prompts = dir.path().join("prompts.jsonl");
    std::fs::write(&prompts, stripped.join("\n") + "\n").unwrap();
    let output = dir.path().join("samples.jsonl");
    let ck = t.out.join("sft.ckpt");
    ok(lac(
        &t.config,
        &["sample", "--checkpoint", ck.to_str().unwrap(), "--prompts", prompts.to_str().unwrap(), "--output", output.to_str().unwrap()],
    ));
    let recs: Vec<Value> =
        std::fs::read_to_string(&output).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 5);
    for r in &recs {
        for k in ["id", "category", "prompt", "t", "lengths", "reward", "scene"] {
            assert!(r.get(k).is_some(), "sample record lacks {k}");
        }
        let reward = r["reward"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&reward));
    }
}

#[test]
fn intervene_reports_all_modes() {
    let t = trained();
    let ck = t.out.join("sft.ckpt");
    let o = ok(lac(&t.config, &["intervene", "--checkpoint", ck.to_str().unwrap()]));
    let table = String::from_utf8(o.stdout).unwrap();
    for m in ["intact", "zero", "random", "shuffle"] {
        assert!(table.contains(m), "{m} missing from\n{table}");
    }
}

#[test]
fn ablate_rejects_unknown_variants_and_audits_known_ones() {
    let t = trained();
    let ck = t.out.join("sft.ckpt");
    let ck = ck.to_str().unwrap();
    let o = lac(&t.config, &["ablate", "--checkpoint", ck, "--variants", "no_such"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ok(lac(&t.config, &["ablate", "--checkpoint", ck, "--variants", "no_draft,fixed_8"]));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("no_draft") && table.contains("fixed_8"));
    assert!(!table.contains("FAIL"));
}
