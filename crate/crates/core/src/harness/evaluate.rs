//! Teacher-free sampling, the benchmark table, latent interventions and
//! role ablations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{generate, generate_from_trace, mean, score};
use crate::latentpolicy::{intervene, Intervention, Mode};
use crate::model::LacModel;
use crate::numerics::rng::derive_seed;
use crate::role::{Role, RoleLengths, RoleSchedule};
use crate::sft::train_sft;
use crate::toyscene::prompt::{Category, PromptSpec, Vocab};
use crate::toyscene::{PromptEntry, Scene, Task};

/// One teacher-free sample. Only prompt-derived fields and model outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub category: Category,
    pub prompt: String,
    /// Realized number of latent actions.
    pub t: usize,
    pub lengths: RoleLengths,
    pub reward: f64,
    pub scene: Scene,
}

/// Prompt `i` uses sample seed `derive_seed(seed, [i])`, as in every report.
pub fn sample(model: &LacModel, prompts: &[PromptEntry], mode: Mode, seed: u64) -> Result<Vec<SampleRecord>> {
    let vocab = Vocab::new(&model.config.world);
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let spec = PromptSpec::from_tokens(&p.tokens, &vocab)?;
            let g = generate(model, &p.tokens, &model.config.schedule, mode, derive_seed(seed, &[i as u64]))?;
            Ok(SampleRecord {
                id: p.id,
                category: p.category,
                prompt: spec.describe(),
                t: g.rollout.len(),
                lengths: g.rollout.lengths,
                reward: score(model, &p.tokens, &g.scene)?,
                scene: g.scene,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: Category,
    pub n: usize,
    pub mean: f64,
}

/// Per-category and overall mean reward. Columns follow [`Category::ALL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub per_category: Vec<CategoryScore>,
    pub overall: f64,
    /// Mean realized number of latent actions.
    pub mean_t: f64,
}

impl EvalReport {
    pub fn from_samples(samples: &[SampleRecord], seed: u64) -> Self {
        let per_category = Category::ALL
            .iter()
            .map(|&c| {
                let r: Vec<f64> = samples.iter().filter(|s| s.category == c).map(|s| s.reward).collect();
                CategoryScore { category: c, n: r.len(), mean: mean(&r) }
            })
            .collect();
        let all: Vec<f64> = samples.iter().map(|s| s.reward).collect();
        let ts: Vec<f64> = samples.iter().map(|s| s.t as f64).collect();
        Self { seed, per_category, overall: mean(&all), mean_t: mean(&ts) }
    }

    pub fn category_means(&self) -> Vec<f64> {
        self.per_category.iter().map(|c| c.mean).collect()
    }
}

pub fn eval_prompts(cfg: &RunConfig, n_per_category: usize) -> Result<Vec<PromptEntry>> {
    if n_per_category < 1 {
        return Err(Error::InvalidArgument("n_per_category must be at least 1".into()));
    }
    Ok(super::train::held_out_prompts(cfg, n_per_category * Category::ALL.len()))
}

/// Mean-action, ODE-decoded benchmark over held-out prompts.
pub fn eval(model: &LacModel, prompts: &[PromptEntry], seed: u64) -> Result<EvalReport> {
    Ok(EvalReport::from_samples(&sample(model, prompts, Mode::Mean, seed)?, seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeScore {
    pub mode: String,
    pub mean: f64,
    /// `intact − mode`; positive means the intervention hurt.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub n_prompts: usize,
    pub seed: u64,
    pub modes: Vec<ModeScore>,
}

impl InterventionReport {
    pub fn mean_of(&self, mode: &str) -> Option<f64> {
        self.modes.iter().find(|m| m.mode == mode).map(|m| m.mean)
    }
}

/// Intact, zero, random and shuffled traces of the same mean-action
/// rollout, each decoded from the same flow noise.
pub fn intervene_report(model: &LacModel, prompts: &[PromptEntry], seed: u64) -> Result<InterventionReport> {
    let schedule = model.config.schedule;
    let rows: Vec<Result<[f64; 4]>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = derive_seed(seed, &[i as u64]);
            let intact = generate(model, &p.tokens, &schedule, Mode::Mean, s)?;
            let mut out = [score(model, &p.tokens, &intact.scene)?, 0.0, 0.0, 0.0];
            for (k, mode) in Intervention::ALL.iter().enumerate() {
                let trace = intervene(&intact.rollout, *mode, derive_seed(s, &[0x1e]))?;
                let g = generate_from_trace(model, &p.tokens, &schedule, &trace, s)?;
                out[k + 1] = score(model, &p.tokens, &g.scene)?;
            }
            Ok(out)
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let col = |k: usize| mean(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
    let intact = col(0);
    let mut modes = vec![ModeScore { mode: "intact".into(), mean: intact, delta: 0.0 }];
    for (k, m) in Intervention::ALL.iter().enumerate() {
        let v = col(k + 1);
        modes.push(ModeScore { mode: m.name().into(), mean: v, delta: intact - v });
    }
    Ok(InterventionReport { n_prompts: prompts.len(), seed, modes })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoPlan,
    NoDraft,
    NoDiagnosis,
    NoRefine,
    Fixed8,
    Fixed15,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::NoPlan, Variant::NoDraft, Variant::NoDiagnosis, Variant::NoRefine, Variant::Fixed8, Variant::Fixed15];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoPlan => "no_plan",
            Variant::NoDraft => "no_draft",
            Variant::NoDiagnosis => "no_diagnosis",
            Variant::NoRefine => "no_refine",
            Variant::Fixed8 => "fixed_8",
            Variant::Fixed15 => "fixed_15",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation variant '{s}'")))
    }

    fn removed(self) -> Option<Role> {
        match self {
            Variant::NoPlan => Some(Role::Plan),
            Variant::NoDraft => Some(Role::Draft),
            Variant::NoDiagnosis => Some(Role::Diagnosis),
            Variant::NoRefine => Some(Role::Refine),
            _ => None,
        }
    }

    /// Exact total for fixed budgets.
    pub fn budget(self) -> Option<usize> {
        match self {
            Variant::Fixed8 => Some(8),
            Variant::Fixed15 => Some(15),
            _ => None,
        }
    }

    pub fn schedule(self, base: &RoleSchedule) -> RoleSchedule {
        match self {
            Variant::Fixed8 => RoleSchedule::fixed(RoleLengths([3, 1, 2, 2])),
            Variant::Fixed15 => RoleSchedule::fixed(RoleLengths([5, 1, 5, 4])),
            v => {
                let mut active = base.active;
                active[v.removed().expect("role removal").index()] = false;
                base.with_mask(active)
            }
        }
    }

    /// Structural audit of one realized trace.
    pub fn audit(self, schedule: &RoleSchedule, lengths: &RoleLengths) -> bool {
        schedule.check_lengths(lengths).is_ok()
            && self.removed().is_none_or(|r| lengths.get(r) == 0)
            && self.budget().is_none_or(|b| lengths.total() == b)
    }
}

/// Whether each variant gets its own supervised run or reuses one model
/// under the overridden schedule.
pub enum VariantSource<'a> {
    Reuse(&'a LacModel),
    Train { cfg: &'a RunConfig, tasks: &'a [Task] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
    /// `full − variant` per category, then overall.
    pub drops: Vec<f64>,
    pub audit_passed: bool,
    pub traces: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub trained: bool,
    pub full: EvalReport,
    pub rows: Vec<AblationRow>,
}

fn variant_model(source: &VariantSource<'_>, base: &LacModel, v: Variant) -> Result<LacModel> {
    let mut config = base.config.clone();
    config.schedule = v.schedule(&base.config.schedule);
    match source {
        VariantSource::Reuse(m) => {
            let mut out = (*m).clone();
            config.validate()?;
            out.config = config;
            Ok(out)
        }
        VariantSource::Train { cfg, tasks } => {
            let init = LacModel::new(config, cfg.seeds.init)?;
            let mut quiet = |_: &crate::sft::SftState, _: &crate::sft::SftMetrics| Ok(());
            train_sft(init, tasks, &cfg.sft, cfg.seeds.rollout, &mut quiet)
        }
    }
}

/// Evaluate the full model and every requested variant on the same prompts
/// and seeds; audits every realized trace against the variant's structure.
pub fn ablate(source: VariantSource<'_>, full: &LacModel, variants: &[Variant], prompts: &[PromptEntry], seed: u64) -> Result<AblationTable> {
    let full_report = eval(full, prompts, seed)?;
    let mut full_cols = full_report.category_means();
    full_cols.push(full_report.overall);
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let model = variant_model(&source, full, v)?;
        let samples = sample(&model, prompts, Mode::Mean, seed)?;
        let audit_passed = samples.iter().all(|s| v.audit(&model.config.schedule, &s.lengths));
        let report = EvalReport::from_samples(&samples, seed);
        let mut cols = report.category_means();
        cols.push(report.overall);
        let drops = full_cols.iter().zip(&cols).map(|(f, c)| f - c).collect();
        rows.push(AblationRow { variant: v.name().into(), report, drops, audit_passed, traces: samples.len() });
    }
    Ok(AblationTable { trained: matches!(source, VariantSource::Train { .. }), full: full_report, rows })
}
