//! Prior-guided variational alignment of the latent policy.
//!
//! Each example is rolled out under the teacher lengths with reparameterized
//! sampling; the policy Gaussians are pulled toward the prior targets (KL in
//! prior-first direction), latents are weakly anchored to the targets, the
//! halting head is trained on the teacher lengths and, in the second phase,
//! the flow generator is trained on the reference scene conditioned on the
//! rollout's hidden states.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgen::{fm_loss_var, prepare_cond};
use crate::latentpolicy::{run_rollout, Driver, Mode, RolloutVars};
use crate::model::{LacModel, ModelConfig, Net};
use crate::numerics::gaussian::{filled_row, kl_diag_var};
use crate::numerics::rng::{derive_seed, permutation, rng_from};
use crate::numerics::{Adam, AdamConfig, Graph, ParamGrads, Var};
use crate::priors::{build_targets, PriorInputs};
use crate::role::{Role, RoleLengths, RoleSchedule};
use crate::toyscene::records::{make_teacher_records, FieldTag, TeacherRecord};
use crate::toyscene::{encode_flat, SceneEncoder, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Diagnosis and refine only, with the candidate scene as perception.
    CorrectionWarmup,
    /// All roles; the flow generator is trained on the rollout's states.
    FullGeneration,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::CorrectionWarmup => "correction_warmup",
            Phase::FullGeneration => "full_generation",
        }
    }

    fn code(self) -> u64 {
        match self {
            Phase::CorrectionWarmup => 1,
            Phase::FullGeneration => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    /// `1 − cos(z_n, e_n)` with the target held constant.
    Cosine,
    /// Multi-label logistic probe from `z_n` to the record's field tags.
    Probe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub var: f64,
    pub anc: f64,
    pub halt: f64,
    pub img: f64,
}

impl LossWeights {
    pub fn validate(&self, phase: Phase) -> Result<()> {
        if [self.var, self.anc, self.halt, self.img].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if phase == Phase::CorrectionWarmup && self.img != 0.0 {
            return Err(Error::Config("the correction warm-up has no image loss".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lambda_var: f64,
    pub lambda_anc: f64,
    pub lambda_halt: f64,
    pub lambda_img: f64,
    pub anchor: AnchorKind,
    /// Noise draws per example for the variational expectation.
    pub n_eps: usize,
    /// `(t, noise)` draws per example for the flow-matching loss.
    pub n_t: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last step of each phase by cosine
    /// annealing from `lr`; equal to `lr` for a constant rate.
    pub lr_final: f64,
    pub clip_norm: f64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    /// Phase-1 step whose weights start phase 2.
    pub warm_start_step: usize,
    pub checkpoint_every: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lambda_var: 0.02,
            lambda_anc: 0.1,
            lambda_halt: 0.5,
            lambda_img: 1.0,
            anchor: AnchorKind::Cosine,
            n_eps: 1,
            n_t: 8,
            batch_size: 16,
            lr: 1e-3,
            lr_final: 1e-3,
            clip_norm: 1.0,
            phase1_steps: 500,
            phase2_steps: 800,
            warm_start_step: 400,
            checkpoint_every: 100,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights(Phase::FullGeneration).validate(Phase::FullGeneration)?;
        if self.n_eps == 0 || self.n_t == 0 || self.batch_size == 0 {
            return Err(Error::Config("n_eps, n_t and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr) {
            return Err(Error::Config("lr_final must lie in (0, lr]".into()));
        }
        if self.warm_start_step > self.phase1_steps {
            return Err(Error::Config(format!(
                "warm_start_step {} exceeds phase1_steps {}",
                self.warm_start_step, self.phase1_steps
            )));
        }
        Ok(())
    }

    /// Loss weights of `phase`; the warm-up drops the image term.
    pub fn weights(&self, phase: Phase) -> LossWeights {
        let img = if phase == Phase::CorrectionWarmup { 0.0 } else { self.lambda_img };
        LossWeights { var: self.lambda_var, anc: self.lambda_anc, halt: self.lambda_halt, img }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    /// Rate used by the optimizer step that completes step `step + 1` of
    /// `phase`.
    pub fn lr_at(&self, phase: Phase, step: usize) -> f64 {
        let n = self.steps(phase);
        if n <= 1 {
            return self.lr;
        }
        let frac = (step.min(n - 1) as f64) / (n - 1) as f64;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn steps(&self, phase: Phase) -> usize {
        match phase {
            Phase::CorrectionWarmup => self.phase1_steps,
            Phase::FullGeneration => self.phase2_steps,
        }
    }
}

/// Roles trained in `phase` under the model's schedule.
pub fn phase_schedule(base: &RoleSchedule, phase: Phase) -> RoleSchedule {
    match phase {
        Phase::CorrectionWarmup => {
            let mut active = base.active;
            active[Role::Plan.index()] = false;
            active[Role::Draft.index()] = false;
            base.with_mask(active)
        }
        Phase::FullGeneration => *base,
    }
}

/// Teacher records and lengths of `task` under `schedule`: the stored ones
/// when they fit, otherwise rebuilt from the task's scenes. Masked roles get
/// length zero.
pub fn teacher_for(cfg: &ModelConfig, task: &Task, schedule: &RoleSchedule) -> Result<(Vec<TeacherRecord>, RoleLengths)> {
    let mask = |mut l: RoleLengths| {
        for r in Role::ALL {
            if !schedule.is_active(r) {
                l.set(r, 0);
            }
        }
        l
    };
    let stored = mask(task.lengths);
    if schedule.check_lengths(&stored).is_ok() {
        return Ok((task.records.clone(), stored));
    }
    let (records, lengths) =
        make_teacher_records(&cfg.world, schedule, &task.spec, &task.reference, &task.draft);
    let lengths = mask(lengths);
    schedule.check_lengths(&lengths)?;
    Ok((records, lengths))
}

/// `Σ_n KL(N(e_n, σ_q² I) ‖ N(μ_n, σ_n²))`.
pub fn variational_loss_var(g: &mut Graph, vars: &RolloutVars, targets: &[Var], sigma_q: f64) -> Result<Var> {
    if targets.len() != vars.mu.len() {
        return Err(Error::Shape(format!("{} targets for {} latent steps", targets.len(), vars.mu.len())));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for ((e, mu), sigma) in targets.iter().zip(&vars.mu).zip(&vars.sigma) {
        let d = g.value(*mu).len();
        let sq = filled_row(g, d, sigma_q);
        terms.push(kl_diag_var(g, *e, sq, *mu, *sigma));
    }
    let all = g.concat_cols(&terms);
    Ok(g.sum(all))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 − cos(z, e)` with `e` constant; 1 when either vector is zero.
pub fn cosine_gap_var(g: &mut Graph, z: Var, e: &[f64]) -> Var {
    let (zn, en) = (norm(g.value(z).data()), norm(e));
    if zn < 1e-12 || en < 1e-12 {
        return g.constant_scalar(1.0);
    }
    let unit: Vec<f64> = e.iter().map(|v| v / en).collect();
    let u = g.constant_row(&unit);
    let prod = g.mul(z, u);
    let dot = g.sum(prod);
    let sq = g.square(z);
    let ss = g.sum(sq);
    let len = g.sqrt(ss);
    let cos = g.div(dot, len);
    let neg = g.neg(cos);
    g.add_scalar(neg, 1.0)
}

/// Mean cosine gap over positions, targets detached.
pub fn anchor_loss_var(g: &mut Graph, vars: &RolloutVars, targets: &[Var]) -> Result<Var> {
    if targets.len() != vars.z.len() || targets.is_empty() {
        return Err(Error::Shape(format!("{} targets for {} latent steps", targets.len(), vars.z.len())));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for (e, z) in targets.iter().zip(&vars.z) {
        let ev = g.value(*e).data().to_vec();
        terms.push(cosine_gap_var(g, *z, &ev));
    }
    let all = g.concat_cols(&terms);
    Ok(g.mean(all))
}

/// Mean logistic loss of a linear probe predicting each semantic record's
/// field tags from its latent action.
pub fn probe_anchor_var(
    g: &mut Graph,
    net: &Net<'_>,
    vars: &RolloutVars,
    layout: &[(Role, usize)],
    records: &[TeacherRecord],
) -> Result<Var> {
    let w = g.param(net.bind, net.ids.priors.probe_w);
    let b = g.param(net.bind, net.ids.priors.probe_b);
    let mut terms = Vec::new();
    for (&(role, k), z) in layout.iter().zip(&vars.z) {
        if !role.is_semantic() {
            continue;
        }
        let Some(rec) = records.iter().find(|r| r.role == role && r.step == k) else { continue };
        let mut y = vec![0.0; FieldTag::COUNT];
        for f in &rec.fields {
            y[f.tag.index()] = 1.0;
        }
        let logits = g.linear(*z, w, b);
        // softplus(l) − y·l is the logistic loss for label y
        let sp = g.softplus(logits);
        let yv = g.constant_row(&y);
        let yl = g.mul(yv, logits);
        let per = g.sub(sp, yl);
        terms.push(g.mean(per));
    }
    if terms.is_empty() {
        return Ok(g.constant_scalar(0.0));
    }
    let all = g.concat_cols(&terms);
    Ok(g.mean(all))
}

/// Halting cross-entropy over queried positions: label 1 at the teacher
/// length, 0 before it. Returns the loss (zero if nothing was queried) and
/// `(correct, queried)`.
pub fn halting_loss_var(g: &mut Graph, vars: &RolloutVars, lengths: &RoleLengths) -> (Var, usize, usize) {
    let mut terms = Vec::with_capacity(vars.halt_logits.len());
    let mut correct = 0;
    for &(role, k, logit) in &vars.halt_logits {
        let stop = k == lengths.get(role);
        let l = g.scalar(logit);
        if (l > 0.0) == stop {
            correct += 1;
        }
        let signed = if stop { g.neg(logit) } else { logit };
        terms.push(g.softplus(signed));
    }
    let n = terms.len();
    if n == 0 {
        return (g.constant_scalar(0.0), 0, 0);
    }
    let all = g.concat_cols(&terms);
    (g.mean(all), correct, n)
}

/// Per-example loss values and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub var: f64,
    pub anc: f64,
    pub halt: f64,
    pub img: f64,
    pub total: f64,
    pub halt_correct: usize,
    pub halt_queried: usize,
}

/// Graph nodes of one example's objective.
pub struct ExampleGraph {
    pub total: Var,
    pub var: Var,
    pub anc: Var,
    pub halt: Var,
    pub img: Option<Var>,
    pub halt_correct: usize,
    pub halt_queried: usize,
}

/// Build the weighted objective of one task. `mode` selects reparameterized
/// sampling (training) or mean actions (evaluation).
#[allow(clippy::too_many_arguments)]
pub fn example_objective(
    g: &mut Graph,
    net: &Net<'_>,
    task: &Task,
    phase: Phase,
    cfg: &SftConfig,
    weights: &LossWeights,
    mode: Mode,
    seed: u64,
) -> Result<ExampleGraph> {
    example_objective_split(g, net, net, task, phase, cfg, weights, mode, seed)
}

/// [`example_objective`] with prior targets built from `target_net`.
/// Holding the targets at fixed parameters is how the stop-gradient of the
/// anchor term is audited against finite differences.
#[allow(clippy::too_many_arguments)]
pub fn example_objective_split(
    g: &mut Graph,
    net: &Net<'_>,
    target_net: &Net<'_>,
    task: &Task,
    phase: Phase,
    cfg: &SftConfig,
    weights: &LossWeights,
    mode: Mode,
    seed: u64,
) -> Result<ExampleGraph> {
    let model_cfg = net.cfg;
    let schedule = phase_schedule(&model_cfg.schedule, phase);
    let (records, lengths) = teacher_for(model_cfg, task, &schedule)?;
    let encoder = SceneEncoder::new(&model_cfg.world, model_cfg.stream.perception_dim);
    let (_, draft_tokens) = encoder.encode(&task.draft);
    let presence: Vec<f64> = task.draft.slots.iter().map(|s| s.presence).collect();
    let perception = (phase == Phase::CorrectionWarmup).then_some(&draft_tokens);
    let inputs = PriorInputs { records: &records, draft_tokens: &draft_tokens, draft_presence: &presence };

    let mut var_terms = Vec::new();
    let mut anc_terms = Vec::new();
    let mut halt_terms = Vec::new();
    let mut img_terms = Vec::new();
    let (mut halt_correct, mut halt_queried) = (0, 0);
    for j in 0..cfg.n_eps {
        let s = derive_seed(seed, &[j as u64]);
        let driver = Driver::Forced { mode, seed: s, lengths };
        let (_, vars) = run_rollout(g, net, &task.tokens, perception, &schedule, &driver)?;
        let targets = build_targets(g, target_net, &inputs, &schedule, &lengths)?;
        var_terms.push(variational_loss_var(g, &vars, &targets.e, model_cfg.priors.sigma_q)?);
        anc_terms.push(match cfg.anchor {
            AnchorKind::Cosine => anchor_loss_var(g, &vars, &targets.e)?,
            AnchorKind::Probe => probe_anchor_var(g, net, &vars, &targets.layout, &records)?,
        });
        let (h, c, q) = halting_loss_var(g, &vars, &lengths);
        halt_terms.push(h);
        halt_correct += c;
        halt_queried += q;
        if phase == Phase::FullGeneration {
            let cond = prepare_cond(g, net, vars.cond)?;
            let x = encode_flat(&task.reference);
            img_terms.push(fm_loss_var(g, net, &cond, &x, cfg.n_t, derive_seed(s, &[0x1a6]))?);
        }
    }
    let avg = |g: &mut Graph, v: &[Var]| {
        let all = g.concat_cols(v);
        g.mean(all)
    };
    let var = avg(g, &var_terms);
    let anc = avg(g, &anc_terms);
    let halt = avg(g, &halt_terms);
    let img = (!img_terms.is_empty()).then(|| avg(g, &img_terms));
    let mut parts = vec![g.scale(var, weights.var), g.scale(anc, weights.anc), g.scale(halt, weights.halt)];
    if let Some(i) = img {
        parts.push(g.scale(i, weights.img));
    }
    let all = g.concat_cols(&parts);
    let total = g.sum(all);
    Ok(ExampleGraph { total, var, anc, halt, img, halt_correct, halt_queried })
}

fn terms_of(g: &Graph, eg: &ExampleGraph) -> LossTerms {
    LossTerms {
        var: g.scalar(eg.var),
        anc: g.scalar(eg.anc),
        halt: g.scalar(eg.halt),
        img: eg.img.map_or(0.0, |v| g.scalar(v)),
        total: g.scalar(eg.total),
        halt_correct: eg.halt_correct,
        halt_queried: eg.halt_queried,
    }
}

/// Loss values and parameter gradients of one example.
pub fn example_grads(
    model: &LacModel,
    task: &Task,
    phase: Phase,
    cfg: &SftConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<(LossTerms, ParamGrads)> {
    let net = model.net_trainable();
    let mut g = Graph::new();
    let eg = example_objective(&mut g, &net, task, phase, cfg, weights, Mode::Stochastic, seed)?;
    let terms = terms_of(&g, &eg);
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "{} objective on task {} (var {}, anc {}, halt {}, img {})",
            phase.name(),
            task.id,
            terms.var,
            terms.anc,
            terms.halt,
            terms.img
        )));
    }
    let grads = g.backward(eg.total);
    Ok((terms, g.param_grads(&grads, &model.store)))
}

/// Task indices of batch `step`: consecutive slices of a per-epoch seeded
/// permutation, so any step can be reproduced without replaying earlier ones.
pub fn batch_indices(n_tasks: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut pos = step * batch;
    let mut cache: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = pos / n_tasks;
        if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cache = Some((epoch, permutation(&mut rng_from(seed, &[0xba7c, epoch as u64]), n_tasks)));
        }
        out.push(cache.as_ref().unwrap().1[pos % n_tasks]);
        pos += 1;
    }
    out
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftMetrics {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
    pub l_var: f64,
    pub l_anc: f64,
    pub l_halt: f64,
    pub l_img: f64,
    pub halt_acc: f64,
    pub grad_norm: f64,
    /// Wall-clock seconds for the step; excluded from determinism checks.
    pub wall_s: f64,
}

/// Model and optimizer state of an in-progress phase.
#[derive(Clone, Debug)]
pub struct SftState {
    pub model: LacModel,
    pub adam: Adam,
    pub phase: Phase,
    /// Steps completed in this phase.
    pub step: usize,
}

impl SftState {
    /// Start `phase` from `model` with fresh optimizer moments.
    pub fn start(model: LacModel, phase: Phase, cfg: &SftConfig) -> Self {
        let adam = Adam::new(cfg.adam(), &model.store);
        Self { model, adam, phase, step: 0 }
    }

    /// Run one optimizer step on the batch selected by `(seed, phase, step)`.
    pub fn train_step(&mut self, tasks: &[Task], cfg: &SftConfig, seed: u64) -> Result<SftMetrics> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("no training tasks".into()));
        }
        let start = std::time::Instant::now();
        let weights = cfg.weights(self.phase);
        weights.validate(self.phase)?;
        let phase_seed = derive_seed(seed, &[0x5f7, self.phase.code()]);
        let idx = batch_indices(tasks.len(), cfg.batch_size, phase_seed, self.step);
        let model = &self.model;
        let phase = self.phase;
        let step = self.step;
        let results: Vec<Result<(LossTerms, ParamGrads)>> = idx
            .par_iter()
            .enumerate()
            .map(|(i, &t)| {
                let s = derive_seed(phase_seed, &[step as u64, i as u64]);
                example_grads(model, &tasks[t], phase, cfg, &weights, s)
            })
            .collect();
        let mut grads = ParamGrads::empty(model.store.len());
        let mut sum = LossTerms::default();
        for r in results {
            let (t, gr) = r?;
            grads.add_scaled(&gr, 1.0);
            sum.var += t.var;
            sum.anc += t.anc;
            sum.halt += t.halt;
            sum.img += t.img;
            sum.total += t.total;
            sum.halt_correct += t.halt_correct;
            sum.halt_queried += t.halt_queried;
        }
        let b = idx.len() as f64;
        grads.scale(1.0 / b);
        let grad_norm = grads.clip_global_norm(cfg.clip_norm);
        self.adam.config.lr = cfg.lr_at(self.phase, self.step);
        self.adam.update(&mut self.model.store, &grads)?;
        self.step += 1;
        Ok(SftMetrics {
            phase: self.phase,
            step: self.step,
            loss: sum.total / b,
            l_var: sum.var / b,
            l_anc: sum.anc / b,
            l_halt: sum.halt / b,
            l_img: sum.img / b,
            halt_acc: if sum.halt_queried == 0 { 1.0 } else { sum.halt_correct as f64 / sum.halt_queried as f64 },
            grad_norm,
            wall_s: start.elapsed().as_secs_f64(),
        })
    }
}

/// Teacher-forced evaluation with mean actions: average loss terms and
/// halting accuracy over `tasks`.
pub fn evaluate(model: &LacModel, tasks: &[Task], phase: Phase, cfg: &SftConfig, seed: u64) -> Result<LossTerms> {
    let weights = cfg.weights(phase);
    let net = model.net_constant();
    let per: Vec<Result<LossTerms>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut g = Graph::new();
            let eg = example_objective(&mut g, &net, t, phase, cfg, &weights, Mode::Mean, derive_seed(seed, &[i as u64]))?;
            Ok(terms_of(&g, &eg))
        })
        .collect();
    let mut sum = LossTerms::default();
    for r in per {
        let t = r?;
        sum.var += t.var;
        sum.anc += t.anc;
        sum.halt += t.halt;
        sum.img += t.img;
        sum.total += t.total;
        sum.halt_correct += t.halt_correct;
        sum.halt_queried += t.halt_queried;
    }
    let n = tasks.len().max(1) as f64;
    Ok(LossTerms {
        var: sum.var / n,
        anc: sum.anc / n,
        halt: sum.halt / n,
        img: sum.img / n,
        total: sum.total / n,
        ..sum
    })
}

/// Events reported by [`train_sft`].
pub trait SftObserver {
    fn on_step(&mut self, state: &SftState, metrics: &SftMetrics) -> Result<()>;
}

impl<F: FnMut(&SftState, &SftMetrics) -> Result<()>> SftObserver for F {
    fn on_step(&mut self, state: &SftState, metrics: &SftMetrics) -> Result<()> {
        self(state, metrics)
    }
}

/// Continue `state` until its phase budget is spent. When `snapshot_at` is
/// reached, the model is copied out (the warm start of the next phase).
pub fn run_phase(
    state: &mut SftState,
    tasks: &[Task],
    cfg: &SftConfig,
    seed: u64,
    snapshot_at: Option<usize>,
    observer: &mut dyn SftObserver,
) -> Result<Option<LacModel>> {
    let total = cfg.steps(state.phase);
    let mut snapshot = (snapshot_at == Some(state.step)).then(|| state.model.clone());
    while state.step < total {
        let m = state.train_step(tasks, cfg, seed)?;
        observer.on_step(state, &m)?;
        if snapshot_at == Some(state.step) {
            snapshot = Some(state.model.clone());
        }
    }
    Ok(snapshot)
}

/// Both phases from `init`: warm-up, then full generation warm-started from
/// the warm-up weights at `warm_start_step` with fresh optimizer moments.
pub fn train_sft(
    init: LacModel,
    tasks: &[Task],
    cfg: &SftConfig,
    seed: u64,
    observer: &mut dyn SftObserver,
) -> Result<LacModel> {
    cfg.validate()?;
    let mut p1 = SftState::start(init, Phase::CorrectionWarmup, cfg);
    let warm = run_phase(&mut p1, tasks, cfg, seed, Some(cfg.warm_start_step), observer)?
        .expect("warm start lies within phase 1");
    let mut p2 = SftState::start(warm, Phase::FullGeneration, cfg);
    run_phase(&mut p2, tasks, cfg, seed, None, observer)?;
    Ok(p2.model)
}
