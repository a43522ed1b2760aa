//! Data generation and the resumable SFT and RL training commands.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::{self, Checkpoint};
use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::lfgrpo::{reward_fn, RlData, RlMetrics, RlState};
use crate::model::LacModel;
use crate::numerics::rng::derive_seed;
use crate::sft::{run_phase, Phase, SftMetrics, SftState};
use crate::toyscene::{generate_tasks, read_prompts, read_tasks, reward, write_tasks, PromptEntry, Task};

pub const SFT_FINAL: &str = "sft.ckpt";
pub const RL_FINAL: &str = "rl.ckpt";

pub fn sft_step_file(phase: Phase, step: usize) -> String {
    format!("sft_{}_step{step:05}.ckpt", phase.name())
}

pub fn rl_step_file(update: usize) -> String {
    format!("rl_update{update:05}.ckpt")
}

/// Line-delimited JSON sink; each line is flushed so an interrupted run
/// leaves a readable prefix.
pub struct Jsonl {
    w: BufWriter<File>,
}

impl Jsonl {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { w: BufWriter::new(File::create(path)?) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(Self { w: BufWriter::new(OpenOptions::new().append(true).create(true).open(path)?) })
    }

    pub fn line(&mut self, value: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.w, value)?;
        writeln!(self.w)?;
        self.w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct MetricsHeader<'a> {
    kind: &'static str,
    command: &'a str,
    config_hash: String,
    seeds: super::config::Seeds,
    resumed_from: Option<String>,
}

fn header<'a>(cfg: &RunConfig, command: &'a str, resumed: Option<&Path>) -> MetricsHeader<'a> {
    MetricsHeader {
        kind: "header",
        command,
        config_hash: cfg.hash(),
        seeds: cfg.seeds,
        resumed_from: resumed.map(|p| p.display().to_string()),
    }
}

/// Keep the metric lines accepted by `keep` (header lines always survive)
/// and reopen the file for appending.
fn truncate_metrics(path: &Path, keep: impl Fn(&serde_json::Value) -> bool) -> Result<Jsonl> {
    let mut kept = Vec::new();
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let v: serde_json::Value = serde_json::from_str(&line)?;
            if v.get("kind").is_some() || keep(&v) {
                kept.push(line);
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for l in kept {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Jsonl::append(path)
}

/// Write the training task file; every reference scene must score 1.
pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let tasks = generate_tasks(&cfg.world, &cfg.schedule, cfg.data.n_tasks, cfg.seeds.data);
    for t in &tasks {
        let r = reward(&cfg.world, &t.spec, &t.reference);
        if r != 1.0 {
            return Err(Error::InvalidArgument(format!("task {} reference scores {r}, not 1", t.id)));
        }
    }
    let path = cfg.paths.tasks();
    write_tasks(&path, &cfg.world, cfg.seeds.data, &tasks)?;
    Ok(path)
}

pub fn load_tasks(cfg: &RunConfig) -> Result<Vec<Task>> {
    let path = cfg.paths.tasks();
    if !path.exists() {
        return Err(Error::Config(format!("task file {} not found; run gen-data first", path.display())));
    }
    let (header, tasks) = read_tasks(&path)?;
    if header.world != cfg.world {
        return Err(Error::Config(format!("task file {} was generated for a different world", path.display())));
    }
    Ok(tasks)
}

/// Prompt-only view of the training tasks.
pub fn load_prompts(cfg: &RunConfig) -> Result<Vec<PromptEntry>> {
    let path = cfg.paths.tasks();
    if !path.exists() {
        return Err(Error::Config(format!("task file {} not found; run gen-data first", path.display())));
    }
    Ok(read_prompts(&path)?.1)
}

/// `n` held-out prompts, cycling through the categories, drawn from a seed
/// stream disjoint from the training tasks.
pub fn held_out_prompts(cfg: &RunConfig, n: usize) -> Vec<PromptEntry> {
    generate_tasks(&cfg.world, &cfg.schedule, n, derive_seed(cfg.seeds.data, &[0x4e1d]))
        .iter()
        .map(Task::prompt)
        .collect()
}

fn phase_from(name: &str) -> Result<Phase> {
    match name {
        "correction_warmup" => Ok(Phase::CorrectionWarmup),
        "full_generation" => Ok(Phase::FullGeneration),
        other => Err(Error::Config(format!("checkpoint phase '{other}' cannot resume supervised training"))),
    }
}

fn phase_rank(p: Phase) -> usize {
    match p {
        Phase::CorrectionWarmup => 0,
        Phase::FullGeneration => 1,
    }
}

fn save_sft(cfg: &RunConfig, state: &SftState, name: &str) -> Result<PathBuf> {
    let mut ck = Checkpoint::new(state.phase.name(), state.step, &cfg.hash(), state.model.clone());
    ck.adam = Some(state.adam.clone());
    let path = cfg.paths.file(name);
    checkpoint::save(&path, &ck)?;
    Ok(path)
}

/// Both supervised phases, optionally resumed from a checkpoint this
/// command wrote. Returns the final checkpoint path.
pub fn train_sft(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let tasks = load_tasks(cfg)?;
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let sft = &cfg.sft;
    let seed = cfg.seeds.rollout;
    let metrics_path = cfg.paths.file("metrics_sft.jsonl");

    let (mut p1, mut p2) = match resume {
        None => {
            let model = LacModel::new(cfg.model(), cfg.seeds.init)?;
            (Some(SftState::start(model, Phase::CorrectionWarmup, sft)), None)
        }
        Some(path) => {
            let ck = checkpoint::load_checked(path, &cfg.hash())?;
            let phase = phase_from(&ck.phase)?;
            let adam = ck.adam.ok_or_else(|| Error::Config("resume checkpoint has no optimizer state".into()))?;
            let state = SftState { model: ck.model, adam, phase, step: ck.step };
            match phase {
                Phase::CorrectionWarmup => (Some(state), None),
                Phase::FullGeneration => (None, Some(state)),
            }
        }
    };
    let mut out = match resume {
        None => Jsonl::create(&metrics_path)?,
        Some(_) => {
            let at = p1.as_ref().or(p2.as_ref()).expect("one phase to run");
            let (rank, step) = (phase_rank(at.phase), at.step);
            truncate_metrics(&metrics_path, |v| {
                let p: Option<Phase> = v.get("phase").and_then(|p| serde_json::from_value(p.clone()).ok());
                let s = v.get("step").and_then(|s| s.as_u64()).unwrap_or(u64::MAX) as usize;
                p.is_some_and(|p| (phase_rank(p), s) <= (rank, step))
            })?
        }
    };
    out.line(&header(cfg, "train-sft", resume))?;

    let mut observer = |state: &SftState, m: &SftMetrics| -> Result<()> {
        out.line(m)?;
        let total = sft.steps(state.phase);
        let warm = state.phase == Phase::CorrectionWarmup && state.step == sft.warm_start_step;
        let periodic = sft.checkpoint_every > 0 && state.step % sft.checkpoint_every == 0;
        if warm || periodic || state.step == total {
            save_sft(cfg, state, &sft_step_file(state.phase, state.step))?;
        }
        Ok(())
    };

    if let Some(mut s1) = p1.take() {
        if s1.step == 0 {
            save_sft(cfg, &s1, &sft_step_file(Phase::CorrectionWarmup, 0))?;
        }
        let snap = run_phase(&mut s1, &tasks, sft, seed, Some(sft.warm_start_step), &mut observer)?;
        let warm = match snap {
            Some(m) => m,
            None => {
                let path = cfg.paths.file(&sft_step_file(Phase::CorrectionWarmup, sft.warm_start_step));
                checkpoint::load(&path)
                    .map_err(|e| Error::Config(format!("warm-start checkpoint {}: {e}", path.display())))?
                    .model
            }
        };
        p2 = Some(SftState::start(warm, Phase::FullGeneration, sft));
    }
    let mut s2 = p2.expect("phase 2 state");
    run_phase(&mut s2, &tasks, sft, seed, None, &mut observer)?;
    save_sft(cfg, &s2, SFT_FINAL)
}

#[derive(Serialize, serde::Deserialize)]
struct RlExtra {
    /// `None` before the first update.
    reward_max: Option<f64>,
    below_max: usize,
}

fn save_rl(cfg: &RunConfig, state: &RlState, name: &str) -> Result<PathBuf> {
    let mut ck = Checkpoint::new("rl", state.update, &cfg.hash(), state.model.clone());
    ck.adam = Some(state.adam.clone());
    ck.reference = Some(state.reference.clone());
    let extra = RlExtra {
        reward_max: state.reward_max.is_finite().then_some(state.reward_max),
        below_max: state.below_max,
    };
    ck.extra = serde_json::to_value(extra)?;
    let path = cfg.paths.file(name);
    checkpoint::save(&path, &ck)?;
    Ok(path)
}

/// LF-GRPO from a supervised checkpoint (default `<out_dir>/sft.ckpt`), or
/// resumed from an RL checkpoint. Returns the final checkpoint path.
pub fn train_rl(cfg: &RunConfig, init: Option<&Path>, resume: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let rl = &cfg.rl;
    let train: Vec<Vec<usize>> = load_prompts(cfg)?.into_iter().map(|p| p.tokens).collect();
    let held: Vec<Vec<usize>> = held_out_prompts(cfg, rl.eval_prompts).into_iter().map(|p| p.tokens).collect();
    let data = RlData { train: &train, held_out: &held };
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let metrics_path = cfg.paths.file("metrics_rl.jsonl");

    let mut state = match resume {
        Some(path) => {
            let ck = checkpoint::load_checked(path, &cfg.hash())?;
            if ck.phase != "rl" {
                return Err(Error::Config(format!("{} is not an RL checkpoint", path.display())));
            }
            let adam = ck.adam.ok_or_else(|| Error::Config("resume checkpoint has no optimizer state".into()))?;
            let reference = ck.reference.ok_or_else(|| Error::Config("resume checkpoint has no reference".into()))?;
            let extra: RlExtra = serde_json::from_value(ck.extra)?;
            RlState {
                model: ck.model,
                reference,
                adam,
                update: ck.step,
                reward_max: extra.reward_max.unwrap_or(f64::NEG_INFINITY),
                below_max: extra.below_max,
            }
        }
        None => {
            let path = init.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.file(SFT_FINAL));
            let ck = checkpoint::load_checked(&path, &cfg.hash())?;
            RlState::start(ck.model, rl)
        }
    };
    let mut out = match resume {
        None => Jsonl::create(&metrics_path)?,
        Some(_) => {
            let at = state.update as u64;
            truncate_metrics(&metrics_path, |v| v.get("update").and_then(|u| u.as_u64()).is_some_and(|u| u <= at))?
        }
    };
    out.line(&header(cfg, "train-rl", resume.or(init)))?;
    let reward = reward_fn(rl.reward, &state.model);
    while state.update < rl.updates {
        let m: RlMetrics = state.step(&data, rl, cfg.seeds.rollout, reward.as_ref())?;
        out.line(&m)?;
        if rl.checkpoint_every > 0 && state.update % rl.checkpoint_every == 0 {
            save_rl(cfg, &state, &rl_step_file(state.update))?;
        }
    }
    save_rl(cfg, &state, RL_FINAL)
}
