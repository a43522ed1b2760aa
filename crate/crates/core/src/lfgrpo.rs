//! Latent-flow group relative policy optimization.
//!
//! For each prompt a group of rollouts is drawn from a frozen snapshot: every
//! member samples its own latent actions and SDE noise but starts the flow
//! from one shared initial noise. Terminal rewards are standardized within
//! the group and the same advantage drives a clipped surrogate on every
//! latent action and on every stochastic flow transition of the member.
//! Reference regularizers keep the latent policy and the velocity field near
//! the supervised checkpoint. The halting head is never updated.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flowgen::{prepare_cond, sample_sde, transition_logprob_var, velocity_var, FlowTrajectory, NetField, VelocityField};
use crate::inference::{mean, prompt_rewards};
use crate::latentpolicy::{run_rollout, Driver, LatentRollout, Mode};
use crate::model::{is_halting, LacModel, Net};
use crate::numerics::gaussian::{clamp_exp_ratio_var, clipped_surrogate_var, kl_diag_var, logprob_normalized_var};
use crate::numerics::rng::derive_seed;
use crate::numerics::{standardize_group, Adam, AdamConfig, Graph, ParamGrads, Tensor, Var};
use crate::sft::batch_indices;
use crate::toyscene::prompt::{PromptSpec, Vocab};
use crate::toyscene::{decode_scene, reward, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(q_θ ‖ q_ref)`.
    PolicyFirst,
    /// `KL(q_ref ‖ q_θ)`.
    ReferenceFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Fraction of prompt constraints satisfied by the decoded scene.
    ToyChecker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub group_size: usize,
    pub prompts_per_update: usize,
    pub kappa: f64,
    pub eps: f64,
    pub eps_x: f64,
    pub beta_z: f64,
    pub beta_vel: f64,
    pub lambda_z: f64,
    pub lambda_x: f64,
    pub kl_direction: KlDirection,
    pub updates: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Reference refresh interval in updates; 0 keeps the initial reference.
    pub ref_refresh: usize,
    /// Held-out evaluation interval in updates; 0 disables it.
    pub eval_every: usize,
    pub eval_prompts: usize,
    pub reward: RewardKind,
    /// Abort when the mean reward stays this far below its running maximum...
    pub guard_drop: f64,
    /// ...for this many consecutive updates.
    pub guard_window: usize,
    pub checkpoint_every: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            prompts_per_update: 4,
            kappa: 5.0,
            eps: 0.2,
            eps_x: 0.2,
            beta_z: 0.01,
            beta_vel: 0.1,
            lambda_z: 1.0,
            lambda_x: 1.0,
            kl_direction: KlDirection::PolicyFirst,
            updates: 100,
            lr: 3e-4,
            clip_norm: 1.0,
            ref_refresh: 0,
            eval_every: 0,
            eval_prompts: 60,
            reward: RewardKind::ToyChecker,
            guard_drop: 0.3,
            guard_window: 50,
            checkpoint_every: 25,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group size must be at least 2".into()));
        }
        if self.prompts_per_update == 0 {
            return Err(Error::Config("prompts_per_update must be positive".into()));
        }
        if !(self.kappa > 0.0 && self.eps > 0.0 && self.eps < 1.0 && self.eps_x > 0.0 && self.eps_x < 1.0) {
            return Err(Error::Config("kappa must be positive and clip ranges in (0, 1)".into()));
        }
        let weights = [self.beta_z, self.beta_vel, self.lambda_z, self.lambda_x];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Terminal reward of one group member.
pub trait RewardFn: Sync {
    fn reward(&self, spec: &PromptSpec, latent: &LatentRollout, scene: &Scene) -> f64;
}

pub struct ToyChecker {
    pub world: crate::toyscene::WorldConfig,
}

impl RewardFn for ToyChecker {
    fn reward(&self, spec: &PromptSpec, _latent: &LatentRollout, scene: &Scene) -> f64 {
        reward(&self.world, spec, scene)
    }
}

/// Bandit reward `−‖z_1 − z*‖` on the first latent action; ignores the scene.
pub struct LatentTarget {
    pub target: Vec<f64>,
}

impl RewardFn for LatentTarget {
    fn reward(&self, _spec: &PromptSpec, latent: &LatentRollout, _scene: &Scene) -> f64 {
        let z = &latent.steps[0].z;
        -z.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

pub fn reward_fn(kind: RewardKind, model: &LacModel) -> Box<dyn RewardFn> {
    match kind {
        RewardKind::ToyChecker => Box::new(ToyChecker { world: model.config.world }),
    }
}

/// Everything one group member contributes to an update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTuple {
    pub latent: LatentRollout,
    /// Conditioning states of the snapshot rollout.
    pub h: Tensor,
    pub flow: FlowTrajectory,
    /// Reference-policy Gaussians on the stored action history.
    pub ref_mu: Vec<Vec<f64>>,
    pub ref_sigma: Vec<Vec<f64>>,
    /// Reference velocity at each stored stochastic step.
    pub ref_velocity: Vec<Vec<f64>>,
    pub scene: Scene,
    pub reward: f64,
    pub advantage: f64,
}

impl RolloutTuple {
    /// Active-position mask (every stored action is active).
    pub fn mask(&self) -> Vec<bool> {
        vec![true; self.latent.len()]
    }

    /// `log Π`: joint density of the stored latent actions and stochastic
    /// flow transitions, undoing the per-dimension normalization.
    pub fn joint_logprob(&self) -> f64 {
        let lat: f64 = self.latent.steps.iter().map(|s| s.logp * s.z.len() as f64).sum();
        let flow: f64 = self.flow.sde.iter().map(|r| r.logp * r.mean.len() as f64).sum();
        lat + flow
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt: Vec<usize>,
    pub spec: PromptSpec,
    pub x_init: Vec<f64>,
    pub members: Vec<RolloutTuple>,
}

/// Draw `g` rollouts of one prompt from `snapshot`, all flows starting from
/// one shared initial noise.
pub fn collect_group(
    snapshot: &LacModel,
    reference: &LacModel,
    prompt: &[usize],
    g: usize,
    seed: u64,
    reward_fn: &dyn RewardFn,
) -> Result<GroupBatch> {
    if g < 2 {
        return Err(invalid("group advantage needs at least two members"));
    }
    let spec = PromptSpec::from_tokens(prompt, &Vocab::new(&snapshot.config.world))?;
    let x_init = crate::flowgen::init_noise(derive_seed(seed, &[0x6a]), snapshot.config.world.flat_dim());
    let members: Vec<Result<RolloutTuple>> = (0..g)
        .into_par_iter()
        .map(|i| collect_member(snapshot, reference, prompt, &spec, &x_init, derive_seed(seed, &[i as u64]), reward_fn))
        .collect();
    let members = members.into_iter().collect::<Result<Vec<_>>>()?;
    let mut batch = GroupBatch { prompt: prompt.to_vec(), spec, x_init, members };
    score_group(&mut batch)?;
    Ok(batch)
}

fn collect_member(
    snapshot: &LacModel,
    reference: &LacModel,
    prompt: &[usize],
    spec: &PromptSpec,
    x_init: &[f64],
    seed: u64,
    reward_fn: &dyn RewardFn,
) -> Result<RolloutTuple> {
    let net = snapshot.net_constant();
    let schedule = snapshot.config.schedule;
    let mut g = Graph::new();
    let driver = Driver::Free { mode: Mode::Stochastic, seed: derive_seed(seed, &[1]) };
    let (latent, vars) = run_rollout(&mut g, &net, prompt, None, &schedule, &driver)?;
    let h = g.value(vars.cond).clone();

    let rnet = reference.net_constant();
    let mut rg = Graph::new();
    let replay = Driver::Replay { actions: latent.actions(), lengths: latent.lengths };
    let (_, rv) = run_rollout(&mut rg, &rnet, prompt, None, &schedule, &replay)?;
    let ref_mu = rv.mu.iter().map(|v| rg.value(*v).data().to_vec()).collect();
    let ref_sigma = rv.sigma.iter().map(|v| rg.value(*v).data().to_vec()).collect();

    let mut field = NetField::new(net, &h)?;
    let flow = sample_sde(&mut field, x_init, &snapshot.config.flow, derive_seed(seed, &[2]))?;
    let mut rfield = NetField::new(rnet, &h)?;
    let ref_velocity =
        flow.sde.iter().map(|r| rfield.velocity(&flow.states[r.m], r.t)).collect::<Result<Vec<_>>>()?;
    let scene = decode_scene(&snapshot.config.world, flow.x0())?;
    let reward = reward_fn.reward(spec, &latent, &scene);
    Ok(RolloutTuple { latent, h, flow, ref_mu, ref_sigma, ref_velocity, scene, reward, advantage: 0.0 })
}

/// Attach group-standardized advantages to every member.
pub fn score_group(batch: &mut GroupBatch) -> Result<Vec<f64>> {
    let rewards: Vec<f64> = batch.members.iter().map(|m| m.reward).collect();
    let adv = standardize_group(&rewards)?;
    for (m, a) in batch.members.iter_mut().zip(&adv) {
        m.advantage = *a;
    }
    Ok(adv)
}

/// Per-member objective nodes and diagnostics.
pub struct MemberTerms {
    pub total: Var,
    /// Summed clipped latent surrogate (not yet negated or normalized).
    pub latent_surrogate: f64,
    pub latent_kl: f64,
    pub flow_surrogate: f64,
    pub velocity_reg: f64,
    pub latent_clipped: usize,
    pub flow_clipped: usize,
}

/// Normalizers shared by every member of an update.
#[derive(Clone, Copy, Debug)]
pub struct Normalizers {
    /// Active latent positions over the whole update.
    pub w_z: f64,
    /// Stochastic flow transitions over the whole update.
    pub w_x: f64,
}

impl Normalizers {
    pub fn of(groups: &[GroupBatch]) -> Result<Self> {
        let w_z: usize = groups.iter().flat_map(|b| &b.members).map(|m| m.latent.len()).sum();
        let w_x: usize = groups.iter().flat_map(|b| &b.members).map(|m| m.flow.sde.len()).sum();
        if w_z == 0 {
            return Err(invalid("no active latent positions"));
        }
        Ok(Self { w_z: w_z as f64, w_x: w_x as f64 })
    }
}

fn outside(rho: f64, eps: f64) -> bool {
    rho < 1.0 - eps || rho > 1.0 + eps
}

/// Latent part: `−Σ_n clip-surrogate + β_z Σ_n D^z` over one member, with
/// current log-probs recomputed by replaying the stored actions.
pub fn latent_terms(
    g: &mut Graph,
    net: &Net<'_>,
    prompt: &[usize],
    member: &RolloutTuple,
    cfg: &RlConfig,
) -> Result<(Var, Var, usize)> {
    let replay = Driver::Replay { actions: member.latent.actions(), lengths: member.latent.lengths };
    let (_, vars) = run_rollout(g, net, prompt, None, &net.cfg.schedule, &replay)?;
    let mut surr = Vec::with_capacity(vars.mu.len());
    let mut kls = Vec::with_capacity(vars.mu.len());
    let mut clipped = 0;
    for (n, step) in member.latent.steps.iter().enumerate() {
        let z = g.constant_row(&step.z);
        let lp = logprob_normalized_var(g, z, vars.mu[n], vars.sigma[n]);
        let rho = clamp_exp_ratio_var(g, lp, step.logp, cfg.kappa);
        if outside(g.scalar(rho), cfg.eps) {
            clipped += 1;
        }
        surr.push(clipped_surrogate_var(g, rho, member.advantage, cfg.eps));
        let rm = g.constant_row(&member.ref_mu[n]);
        let rs = g.constant_row(&member.ref_sigma[n]);
        kls.push(match cfg.kl_direction {
            KlDirection::PolicyFirst => kl_diag_var(g, vars.mu[n], vars.sigma[n], rm, rs),
            KlDirection::ReferenceFirst => kl_diag_var(g, rm, rs, vars.mu[n], vars.sigma[n]),
        });
    }
    let s = g.concat_cols(&surr);
    let s = g.sum(s);
    let k = g.concat_cols(&kls);
    let k = g.sum(k);
    Ok((s, k, clipped))
}

/// Flow part over one member's stochastic steps: summed clipped surrogate
/// of the transition ratios and summed velocity residuals against the
/// stored reference velocities. The stored conditioning is a constant.
pub fn flow_terms(g: &mut Graph, net: &Net<'_>, member: &RolloutTuple, cfg: &RlConfig) -> Result<(Var, Var, usize)> {
    if member.flow.sde.is_empty() {
        return Err(invalid("no stochastic flow steps to optimize"));
    }
    let h = g.constant(member.h.clone());
    let cond = prepare_cond(g, net, h)?;
    let mut surr = Vec::with_capacity(member.flow.sde.len());
    let mut regs = Vec::with_capacity(member.flow.sde.len());
    let mut clipped = 0;
    for (rec, vref) in member.flow.sde.iter().zip(&member.ref_velocity) {
        let lp = transition_logprob_var(g, net, &cond, &member.flow, rec)?;
        let delta = g.add_scalar(lp, -rec.logp);
        let rho = g.exp(delta);
        if outside(g.scalar(rho), cfg.eps_x) {
            clipped += 1;
        }
        surr.push(clipped_surrogate_var(g, rho, member.advantage, cfg.eps_x));
        let x = g.constant_row(&member.flow.states[rec.m]);
        let v = velocity_var(g, net, &cond, x, rec.t)?;
        let r = g.constant_row(vref);
        let diff = g.sub(v, r);
        let sq = g.square(diff);
        regs.push(g.mean(sq));
    }
    let s = g.concat_cols(&surr);
    let s = g.sum(s);
    let r = g.concat_cols(&regs);
    let r = g.sum(r);
    Ok((s, r, clipped))
}

/// `λ_z·L_z + λ_x·L_flow + β_vel·R_vel` restricted to one member, so that
/// summing over members gives the update objective.
pub fn member_objective(
    g: &mut Graph,
    net: &Net<'_>,
    prompt: &[usize],
    member: &RolloutTuple,
    norm: &Normalizers,
    cfg: &RlConfig,
) -> Result<MemberTerms> {
    let (ls, lk, lc) = latent_terms(g, net, prompt, member, cfg)?;
    let mut parts = Vec::with_capacity(3);
    let lz_sum = {
        let neg = g.neg(ls);
        let kl = g.scale(lk, cfg.beta_z);
        g.add(neg, kl)
    };
    parts.push(g.scale(lz_sum, cfg.lambda_z / norm.w_z));
    let (mut fs_v, mut rv_v, mut fc) = (0.0, 0.0, 0);
    if norm.w_x > 0.0 && (cfg.lambda_x > 0.0 || cfg.beta_vel > 0.0) {
        let (fs, rv, c) = flow_terms(g, net, member, cfg)?;
        fs_v = g.scalar(fs);
        rv_v = g.scalar(rv);
        fc = c;
        parts.push(g.scale(fs, -cfg.lambda_x / norm.w_x));
        parts.push(g.scale(rv, cfg.beta_vel / norm.w_x));
    }
    let all = g.concat_cols(&parts);
    let total = g.sum(all);
    Ok(MemberTerms {
        total,
        latent_surrogate: g.scalar(ls),
        latent_kl: g.scalar(lk),
        flow_surrogate: fs_v,
        velocity_reg: rv_v,
        latent_clipped: lc,
        flow_clipped: fc,
    })
}

/// Loss values of one update over scored groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateLosses {
    pub objective: f64,
    /// `L_z` including its reference term.
    pub latent_loss: f64,
    pub flow_loss: f64,
    pub velocity_reg: f64,
    pub mean_kl: f64,
    pub clip_frac_latent: f64,
    pub clip_frac_flow: f64,
}

/// Objective value and parameter gradients of one update (halting head
/// excluded).
pub fn update_grads(
    model: &LacModel,
    groups: &[GroupBatch],
    cfg: &RlConfig,
) -> Result<(UpdateLosses, ParamGrads)> {
    let norm = Normalizers::of(groups)?;
    let net = model.net_trainable();
    let jobs: Vec<(&GroupBatch, &RolloutTuple)> =
        groups.iter().flat_map(|b| b.members.iter().map(move |m| (b, m))).collect();
    let per: Vec<Result<(MemberTerms, f64, ParamGrads)>> = jobs
        .par_iter()
        .map(|(b, m)| {
            let mut g = Graph::new();
            let t = member_objective(&mut g, &net, &b.prompt, m, &norm, cfg)?;
            let total = g.scalar(t.total);
            let grads = g.backward(t.total);
            Ok((t, total, g.param_grads(&grads, &model.store)))
        })
        .collect();
    let mut grads = ParamGrads::empty(model.store.len());
    let mut out = UpdateLosses::default();
    let (mut ls, mut lk, mut fs, mut rv, mut lc, mut fc) = (0.0, 0.0, 0.0, 0.0, 0, 0);
    for (i, r) in per.into_iter().enumerate() {
        let (t, total, gr) = r?;
        if !total.is_finite() {
            let (b, m) = jobs[i];
            return Err(Error::NonFinite(format!(
                "RL objective for prompt {:?}: group rewards {:?}, member advantage {}",
                b.prompt,
                b.members.iter().map(|m| m.reward).collect::<Vec<_>>(),
                m.advantage
            )));
        }
        grads.add_scaled(&gr, 1.0);
        out.objective += total;
        ls += t.latent_surrogate;
        lk += t.latent_kl;
        fs += t.flow_surrogate;
        rv += t.velocity_reg;
        lc += t.latent_clipped;
        fc += t.flow_clipped;
    }
    grads.clear_where(&model.store, is_halting);
    out.latent_loss = (-ls + cfg.beta_z * lk) / norm.w_z;
    out.mean_kl = lk / norm.w_z;
    if norm.w_x > 0.0 {
        out.flow_loss = -fs / norm.w_x;
        out.velocity_reg = rv / norm.w_x;
        out.clip_frac_flow = fc as f64 / norm.w_x;
    }
    out.clip_frac_latent = lc as f64 / norm.w_z;
    Ok((out, grads))
}

/// One line of the RL metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlMetrics {
    pub update: usize,
    pub mean_reward: f64,
    pub adv_std: f64,
    /// Fraction of groups whose rewards are not all equal.
    pub frac_informative: f64,
    pub objective: f64,
    pub latent_loss: f64,
    pub flow_loss: f64,
    pub velocity_reg: f64,
    pub mean_kl: f64,
    pub clip_frac_latent: f64,
    pub clip_frac_flow: f64,
    pub grad_norm: f64,
    pub halting_digest: String,
    pub eval_reward: Option<f64>,
    pub wall_s: f64,
}

/// Minimize the update objective once on scored groups.
pub fn lf_grpo_step(model: &mut LacModel, adam: &mut Adam, groups: &[GroupBatch], cfg: &RlConfig) -> Result<(UpdateLosses, f64)> {
    let (losses, mut grads) = update_grads(model, groups, cfg)?;
    let grad_norm = grads.clip_global_norm(cfg.clip_norm);
    adam.update(&mut model.store, &grads)?;
    Ok((losses, grad_norm))
}

/// Prompts the RL loop draws from, and held-out prompts it evaluates on.
pub struct RlData<'a> {
    pub train: &'a [Vec<usize>],
    pub held_out: &'a [Vec<usize>],
}

#[derive(Clone, Debug)]
pub struct RlState {
    pub model: LacModel,
    pub reference: LacModel,
    pub adam: Adam,
    /// Updates completed.
    pub update: usize,
    pub reward_max: f64,
    pub below_max: usize,
}

impl RlState {
    pub fn start(model: LacModel, cfg: &RlConfig) -> Self {
        let adam = Adam::new(cfg.adam(), &model.store);
        Self { reference: model.clone(), model, adam, update: 0, reward_max: f64::NEG_INFINITY, below_max: 0 }
    }

    /// Collect, score and apply one update.
    pub fn step(&mut self, data: &RlData<'_>, cfg: &RlConfig, seed: u64, reward: &dyn RewardFn) -> Result<RlMetrics> {
        let start = std::time::Instant::now();
        if data.train.is_empty() {
            return Err(invalid("no RL prompts"));
        }
        let pick = batch_indices(data.train.len(), cfg.prompts_per_update, derive_seed(seed, &[0x91]), self.update);
        let groups = pick
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let s = derive_seed(seed, &[0x72, self.update as u64, j as u64]);
                collect_group(&self.model, &self.reference, &data.train[p], cfg.group_size, s, reward)
            })
            .collect::<Result<Vec<_>>>()?;
        let rewards: Vec<f64> = groups.iter().flat_map(|b| b.members.iter().map(|m| m.reward)).collect();
        let advs: Vec<f64> = groups.iter().flat_map(|b| b.members.iter().map(|m| m.advantage)).collect();
        let informative =
            groups.iter().filter(|b| b.members.iter().any(|m| m.reward != b.members[0].reward)).count();
        let (losses, grad_norm) = lf_grpo_step(&mut self.model, &mut self.adam, &groups, cfg)?;
        self.update += 1;
        if cfg.ref_refresh > 0 && self.update % cfg.ref_refresh == 0 {
            self.reference = self.model.clone();
        }
        let mean_reward = mean(&rewards);
        self.reward_max = self.reward_max.max(mean_reward);
        self.below_max = if mean_reward < self.reward_max - cfg.guard_drop { self.below_max + 1 } else { 0 };
        if self.below_max >= cfg.guard_window {
            return Err(Error::Diverged(format!(
                "mean reward {mean_reward:.3} stayed {} below its maximum {:.3} for {} updates",
                cfg.guard_drop, self.reward_max, self.below_max
            )));
        }
        let eval_reward = if cfg.eval_every > 0 && self.update % cfg.eval_every == 0 && !data.held_out.is_empty() {
            let n = cfg.eval_prompts.min(data.held_out.len());
            Some(mean(&prompt_rewards(&self.model, &data.held_out[..n], &self.model.config.schedule, seed)?))
        } else {
            None
        };
        let adv_var = advs.iter().map(|a| a * a).sum::<f64>() / advs.len() as f64;
        Ok(RlMetrics {
            update: self.update,
            mean_reward,
            adv_std: adv_var.sqrt(),
            frac_informative: informative as f64 / groups.len() as f64,
            objective: losses.objective,
            latent_loss: losses.latent_loss,
            flow_loss: losses.flow_loss,
            velocity_reg: losses.velocity_reg,
            mean_kl: losses.mean_kl,
            clip_frac_latent: losses.clip_frac_latent,
            clip_frac_flow: losses.clip_frac_flow,
            grad_norm,
            halting_digest: self.model.halting_digest(),
            eval_reward,
            wall_s: start.elapsed().as_secs_f64(),
        })
    }
}

pub trait RlObserver {
    fn on_update(&mut self, state: &RlState, metrics: &RlMetrics) -> Result<()>;
}

impl<F: FnMut(&RlState, &RlMetrics) -> Result<()>> RlObserver for F {
    fn on_update(&mut self, state: &RlState, metrics: &RlMetrics) -> Result<()> {
        self(state, metrics)
    }
}

/// Continue `state` until `cfg.updates` updates are done.
pub fn run_rl(state: &mut RlState, data: &RlData<'_>, cfg: &RlConfig, seed: u64, observer: &mut dyn RlObserver) -> Result<()> {
    cfg.validate()?;
    let reward = reward_fn(cfg.reward, &state.model);
    while state.update < cfg.updates {
        let m = state.step(data, cfg, seed, reward.as_ref())?;
        observer.on_update(state, &m)?;
    }
    Ok(())
}

/// RL from a supervised checkpoint, which also serves as the reference.
pub fn train_rl(sft: LacModel, data: &RlData<'_>, cfg: &RlConfig, seed: u64, observer: &mut dyn RlObserver) -> Result<LacModel> {
    let mut state = RlState::start(sft, cfg);
    run_rl(&mut state, data, cfg, seed, observer)?;
    Ok(state.model)
}
