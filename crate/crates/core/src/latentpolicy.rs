//! Role-structured Gaussian latent-action policy, halting head, the
//! autoregressive rollout and inference-time interventions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{linear_init, resolve, Stream};
use crate::error::{invalid, Error, Result};
use crate::model::Net;
use crate::numerics::gaussian::{gaussian_logprob_normalized, DiagGaussian};
use crate::numerics::graph::{sigmoid, softplus};
use crate::numerics::rng::{derive_seed, normal_vec, rng_from};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::role::{Role, RoleLengths, RoleSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Lower bound added to the softplus standard deviation.
    pub sigma_floor: f64,
    /// Standard deviation at initialization (for a zero hidden state).
    pub sigma_init: f64,
    pub halt_threshold: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { sigma_floor: 1e-3, sigma_init: 0.2, halt_threshold: 0.5 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_floor > 0.0 && self.sigma_init > self.sigma_floor) {
            return Err(invalid("policy needs 0 < sigma_floor < sigma_init"));
        }
        if !(self.halt_threshold > 0.0 && self.halt_threshold < 1.0) {
            return Err(invalid("halt_threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PolicyIds {
    pub w_mu: ParamId,
    pub b_mu: ParamId,
    pub w_sigma: ParamId,
    pub b_sigma: ParamId,
    /// One column per role.
    pub halt_w: ParamId,
    pub halt_b: ParamId,
}

/// Prefix of every halting-head parameter name.
pub const HALT_PREFIX: &str = "halt.";

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl PolicyIds {
    pub fn init(store: &mut ParamStore, d: usize, cfg: &PolicyConfig, rng: &mut impl Rng) -> Self {
        let b = inverse_softplus(cfg.sigma_init - cfg.sigma_floor);
        Self {
            w_mu: store.add("policy.w_mu", linear_init(rng, d, d, 0.5), false),
            b_mu: store.add("policy.b_mu", Tensor::zeros(1, d), false),
            w_sigma: store.add("policy.w_sigma", linear_init(rng, d, d, 0.05), false),
            b_sigma: store.add("policy.b_sigma", Tensor::filled(1, d, b), false),
            halt_w: store.add("halt.w", linear_init(rng, d, 4, 0.1), false),
            halt_b: store.add("halt.b", Tensor::zeros(1, 4), false),
        }
    }

    pub fn resolve(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w_mu: resolve(store, "policy.w_mu")?,
            b_mu: resolve(store, "policy.b_mu")?,
            w_sigma: resolve(store, "policy.w_sigma")?,
            b_sigma: resolve(store, "policy.b_sigma")?,
            halt_w: resolve(store, "halt.w")?,
            halt_b: resolve(store, "halt.b")?,
        })
    }
}

/// Gaussian head: `μ = W_μ h + b_μ`, `σ = softplus(W_σ h + b_σ) + σ_floor`.
pub fn policy_step(g: &mut Graph, net: &Net<'_>, h: Var) -> (Var, Var) {
    let ids = &net.ids.policy;
    let (w, b) = (g.param(net.bind, ids.w_mu), g.param(net.bind, ids.b_mu));
    let mu = g.linear(h, w, b);
    let (w, b) = (g.param(net.bind, ids.w_sigma), g.param(net.bind, ids.b_sigma));
    let pre = g.linear(h, w, b);
    let sp = g.softplus(pre);
    let sigma = g.add_scalar(sp, net.cfg.policy.sigma_floor);
    (mu, sigma)
}

/// Value-level [`policy_step`] for a single hidden state.
pub fn policy_gaussian(net: &Net<'_>, h: &[f64]) -> Result<DiagGaussian> {
    let mut g = Graph::new();
    let hv = g.constant(Tensor::new(1, h.len(), h.to_vec())?);
    let (mu, sigma) = policy_step(&mut g, net, hv);
    DiagGaussian::new(g.value(mu).data().to_vec(), g.value(sigma).data().to_vec())
}

/// `z = μ + σ ⊙ ε`.
pub fn sample_reparam(g: &mut Graph, mu: Var, sigma: Var, eps: &[f64]) -> Result<Var> {
    let d = g.value(mu).cols();
    if eps.len() != d || g.value(sigma).cols() != d {
        return Err(Error::Shape(format!("reparameterization dims {d}/{}", eps.len())));
    }
    let e = g.constant_row(eps);
    let s = g.mul(sigma, e);
    Ok(g.add(mu, s))
}

/// Stop logit of `role` at state `h`.
pub fn halt_logit(g: &mut Graph, net: &Net<'_>, h: Var, role: Role) -> Var {
    let ids = &net.ids.policy;
    let (w, b) = (g.param(net.bind, ids.halt_w), g.param(net.bind, ids.halt_b));
    let wc = g.slice_cols(w, role.index(), 1);
    let bc = g.slice_cols(b, role.index(), 1);
    let l = g.matmul(h, wc);
    g.add(l, bc)
}

/// One latent action with its bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStep {
    pub role: Role,
    /// 1-based index within the role.
    pub step: usize,
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eps: Vec<f64>,
    /// Per-dimension normalized log-density of `z` under `(μ, σ)`.
    pub logp: f64,
    /// Stop probability if the halting head was queried after this step.
    pub halt_prob: Option<f64>,
    /// Log-probability of the halting decision taken (never optimized by RL).
    pub halt_logp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRollout {
    pub steps: Vec<LatentStep>,
    pub lengths: RoleLengths,
    pub terminated: bool,
}

impl LatentRollout {
    /// Realized number of latent actions (the sentinel excluded).
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.z.clone()).collect()
    }

    /// `Σ_n ℓ_n · d`: the joint log-density of the action block.
    pub fn joint_logp(&self) -> f64 {
        self.steps.iter().map(|s| s.logp * s.z.len() as f64).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Stochastic,
    Mean,
}

/// How the rollout chooses actions and lengths.
#[derive(Clone, Debug)]
pub enum Driver {
    /// Halting head decides lengths.
    Free { mode: Mode, seed: u64 },
    /// Teacher lengths; actions remain self-sampled.
    Forced { mode: Mode, seed: u64, lengths: RoleLengths },
    /// Stored actions injected as constants, with their lengths.
    Replay { actions: Vec<Vec<f64>>, lengths: RoleLengths },
}

/// Graph handles of one rollout.
pub struct RolloutVars {
    pub mu: Vec<Var>,
    pub sigma: Vec<Var>,
    pub z: Vec<Var>,
    /// `(role, k, logit)` at every queried position, in order.
    pub halt_logits: Vec<(Role, usize, Var)>,
    /// Conditioning states, `(T + 1) × d`.
    pub cond: Var,
}

/// Per-step noise `ε_n`; depends only on the seed and the global step.
pub fn step_noise(seed: u64, n: usize, d: usize) -> Vec<f64> {
    normal_vec(&mut rng_from(derive_seed(seed, &[0x1a7e]), &[n as u64]), d)
}

/// Run the autoregressive loop: at each step read `h_n`, emit a Gaussian,
/// pick `z_{n+1}`, inject it, and (inside the role's query window) consult
/// the halting head. After the last active role the sentinel is appended.
pub fn run_rollout(
    g: &mut Graph,
    net: &Net<'_>,
    prompt: &[usize],
    perception: Option<&Tensor>,
    schedule: &RoleSchedule,
    driver: &Driver,
) -> Result<(LatentRollout, RolloutVars)> {
    schedule.validate()?;
    let forced = match driver {
        Driver::Free { .. } => None,
        Driver::Forced { lengths, .. } | Driver::Replay { lengths, .. } => {
            schedule.check_lengths(lengths)?;
            Some(*lengths)
        }
    };
    if let Driver::Replay { actions, lengths } = driver {
        if actions.len() != lengths.total() {
            return Err(invalid(format!("{} stored actions for {} positions", actions.len(), lengths.total())));
        }
    }
    let d = net.cfg.stream.d_model;
    let mut stream = Stream::begin(g, net.bind, &net.cfg.stream, &net.ids.backbone, prompt, perception)?;
    let mut h = stream.last(g);
    let mut steps = Vec::new();
    let mut vars = RolloutVars { mu: vec![], sigma: vec![], z: vec![], halt_logits: vec![], cond: h };
    let mut lengths = RoleLengths([0; 4]);
    for role in schedule.active_roles() {
        let hi = schedule.bounds(role).1;
        let target = forced.map(|l| l.get(role));
        for k in 1..=hi {
            let n = steps.len();
            let (mu, sigma) = policy_step(g, net, h);
            let (z, eps) = match driver {
                Driver::Free { mode, seed } | Driver::Forced { mode, seed, .. } => {
                    let eps = match mode {
                        Mode::Stochastic => step_noise(*seed, n, d),
                        Mode::Mean => vec![0.0; d],
                    };
                    let z = match mode {
                        Mode::Stochastic => sample_reparam(g, mu, sigma, &eps)?,
                        Mode::Mean => mu,
                    };
                    (z, eps)
                }
                Driver::Replay { actions, .. } => {
                    let a = &actions[n];
                    if a.len() != d {
                        return Err(Error::Shape(format!("stored action of width {} != {d}", a.len())));
                    }
                    (g.constant_row(a), vec![0.0; d])
                }
            };
            let (mu_v, sigma_v, z_v) =
                (g.value(mu).data().to_vec(), g.value(sigma).data().to_vec(), g.value(z).data().to_vec());
            let logp = gaussian_logprob_normalized(&z_v, &DiagGaussian::new(mu_v.clone(), sigma_v.clone())?)?;
            h = stream.push_latent(g, z, role, k)?;
            let (mut halt_prob, mut halt_logp) = (None, None);
            let stop = if schedule.queries_halting(role, k) && target.is_none_or(|t| k <= t) {
                let logit = halt_logit(g, net, h, role);
                vars.halt_logits.push((role, k, logit));
                let p = sigmoid(g.scalar(logit));
                let stop = match target {
                    Some(t) => k == t,
                    None => p > net.cfg.policy.halt_threshold,
                };
                halt_prob = Some(p);
                let l = g.scalar(logit);
                halt_logp = Some(if stop { -softplus(-l) } else { -softplus(l) });
                stop
            } else {
                target.map_or(k == hi, |t| k == t)
            };
            steps.push(LatentStep { role, step: k, z: z_v, mu: mu_v, sigma: sigma_v, eps, logp, halt_prob, halt_logp });
            vars.mu.push(mu);
            vars.sigma.push(sigma);
            vars.z.push(z);
            if stop {
                lengths.set(role, k);
                break;
            }
        }
    }
    stream.push_sentinel(g)?;
    vars.cond = stream.conditioning(g)?;
    Ok((LatentRollout { steps, lengths, terminated: true }, vars))
}

/// Value-level rollout: returns the trace and the conditioning matrix.
pub fn rollout(
    net: &Net<'_>,
    prompt: &[usize],
    schedule: &RoleSchedule,
    mode: Mode,
    seed: u64,
) -> Result<(LatentRollout, Tensor)> {
    let mut g = Graph::new();
    let (r, v) = run_rollout(&mut g, net, prompt, None, schedule, &Driver::Free { mode, seed })?;
    Ok((r, g.value(v.cond).clone()))
}

/// Training-time rollout with halting forced to `lengths`.
pub fn teacher_length_rollout(
    net: &Net<'_>,
    prompt: &[usize],
    schedule: &RoleSchedule,
    lengths: RoleLengths,
    seed: u64,
) -> Result<LatentRollout> {
    let mut g = Graph::new();
    let driver = Driver::Forced { mode: Mode::Stochastic, seed, lengths };
    Ok(run_rollout(&mut g, net, prompt, None, schedule, &driver)?.0)
}

/// Conditioning states for stored actions (same lengths, fresh sentinel).
pub fn replay_conditioning(
    net: &Net<'_>,
    prompt: &[usize],
    schedule: &RoleSchedule,
    rollout: &LatentRollout,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let driver = Driver::Replay { actions: rollout.actions(), lengths: rollout.lengths };
    let (_, v) = run_rollout(&mut g, net, prompt, None, schedule, &driver)?;
    Ok(g.value(v.cond).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intervention {
    Zero,
    Random,
    Shuffle,
}

impl Intervention {
    pub const ALL: [Intervention; 3] = [Intervention::Zero, Intervention::Random, Intervention::Shuffle];

    pub fn name(self) -> &'static str {
        match self {
            Intervention::Zero => "zero",
            Intervention::Random => "random",
            Intervention::Shuffle => "shuffle",
        }
    }
}

/// Replace the actions of a terminated rollout. `zero` sets every action to
/// 0; `random` draws Gaussian vectors rescaled to each original norm;
/// `shuffle` applies a uniformly drawn non-identity permutation to the role
/// blocks (the draft singleton is one block) and re-splits the concatenated
/// sequence by the original role lengths, preserving `T` and every length.
pub fn intervene(rollout: &LatentRollout, mode: Intervention, seed: u64) -> Result<LatentRollout> {
    if !rollout.terminated {
        return Err(invalid("intervention needs a terminated rollout"));
    }
    let mut out = rollout.clone();
    let mut rng = rng_from(seed, &[0x1e7e, mode as u64]);
    match mode {
        Intervention::Zero => {
            for s in &mut out.steps {
                s.z.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Intervention::Random => {
            for s in &mut out.steps {
                let norm = s.z.iter().map(|v| v * v).sum::<f64>().sqrt();
                let r = normal_vec(&mut rng, s.z.len());
                let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                s.z = r.iter().map(|v| v * norm / rn).collect();
            }
        }
        Intervention::Shuffle => {
            let mut blocks: Vec<Vec<Vec<f64>>> = Vec::new();
            for s in &rollout.steps {
                if s.step == 1 {
                    blocks.push(Vec::new());
                }
                blocks.last_mut().expect("steps start at 1").push(s.z.clone());
            }
            let semantic = rollout.steps.iter().filter(|s| s.step == 1 && s.role.is_semantic()).count();
            if semantic < 2 {
                return Err(invalid("shuffle needs at least two active non-draft roles"));
            }
            let nb = blocks.len();
            let perm = loop {
                let p = crate::numerics::rng::permutation(&mut rng, nb);
                if p.iter().enumerate().any(|(i, j)| i != *j) {
                    break p;
                }
            };
            let flat: Vec<Vec<f64>> = perm.iter().flat_map(|&j| blocks[j].clone()).collect();
            for (s, z) in out.steps.iter_mut().zip(flat) {
                s.z = z;
            }
        }
    }
    for s in &mut out.steps {
        s.logp = f64::NAN;
        s.eps.clear();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LacModel, ModelConfig};

    fn small() -> LacModel {
        LacModel::new(ModelConfig::small(), 0).unwrap()
    }

    const PROMPT: [usize; 5] = [1, 3, 9, 14, 2];

    #[test]
    fn sigma_respects_floor() {
        let m = small();
        let net = m.net_constant();
        let mut rng = rng_from(5, &[]);
        for _ in 0..50 {
            let h: Vec<f64> = normal_vec(&mut rng, m.config.stream.d_model).iter().map(|v| v * 30.0).collect();
            let gss = policy_gaussian(&net, &h).unwrap();
            assert!(gss.std().iter().all(|s| *s >= m.config.policy.sigma_floor));
        }
    }

    #[test]
    fn reparam_cases() {
        let mut g = Graph::new();
        let mu = g.constant_row(&[0.5, -1.0]);
        let sigma = g.constant_row(&[1.0, 1.0]);
        let z0 = sample_reparam(&mut g, mu, sigma, &[0.0, 0.0]).unwrap();
        assert_eq!(g.value(z0).data(), &[0.5, -1.0]);
        let z1 = sample_reparam(&mut g, mu, sigma, &[1.0, 1.0]).unwrap();
        assert_eq!(g.value(z1).data(), &[1.5, 0.0]);
        assert!(sample_reparam(&mut g, mu, sigma, &[1.0]).is_err());
        // dz/dσ = ε
        let mut g = Graph::new();
        let mu = g.constant_row(&[0.5, -1.0]);
        let sigma = g.input(Tensor::row_vector(&[0.3, 2.0]));
        let z = sample_reparam(&mut g, mu, sigma, &[0.7, -1.3]).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s);
        assert_eq!(grads.get(sigma).unwrap().data(), &[0.7, -1.3]);
    }

    #[test]
    fn rollouts_are_deterministic_and_bounded() {
        let m = small();
        let net = m.net_constant();
        let s = m.config.schedule;
        let (a, ha) = rollout(&net, &PROMPT, &s, Mode::Mean, 0).unwrap();
        let (b, hb) = rollout(&net, &PROMPT, &s, Mode::Mean, 1).unwrap();
        assert_eq!((a.clone(), ha.clone()), (b, hb));
        let (c, _) = rollout(&net, &PROMPT, &s, Mode::Stochastic, 7).unwrap();
        let (d, _) = rollout(&net, &PROMPT, &s, Mode::Stochastic, 7).unwrap();
        assert_eq!(c, d);
        for r in [&a, &c] {
            assert!(r.len() <= s.max_total());
            assert_eq!(r.lengths.get(Role::Draft), 1);
            assert_eq!(r.len(), r.lengths.total());
            s.check_lengths(&r.lengths).unwrap();
        }
        assert_eq!(ha.rows(), a.len() + 1);
        for st in &c.steps {
            let g = DiagGaussian::new(st.mu.clone(), st.sigma.clone()).unwrap();
            assert!((gaussian_logprob_normalized(&st.z, &g).unwrap() - st.logp).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_bounds_force_four_steps() {
        let m = small();
        let s = RoleSchedule { bounds: [(1, 1); 4], active: [true; 4] };
        let (r, h) = rollout(&m.net_constant(), &PROMPT, &s, Mode::Stochastic, 3).unwrap();
        assert_eq!(r.len(), 4);
        assert_eq!(h.rows(), 5);
        assert!(r.steps.iter().all(|s| s.halt_prob.is_none()));
    }

    #[test]
    fn forcing_keeps_noise_stream() {
        let m = small();
        let net = m.net_constant();
        let s = m.config.schedule;
        let r = teacher_length_rollout(&net, &PROMPT, &s, RoleLengths([2, 1, 1, 1]), 11).unwrap();
        let roles: Vec<Role> = r.steps.iter().map(|s| s.role).collect();
        assert_eq!(roles, vec![Role::Plan, Role::Plan, Role::Draft, Role::Diagnosis, Role::Refine]);
        let q = teacher_length_rollout(&net, &PROMPT, &s, RoleLengths([3, 1, 2, 2]), 11).unwrap();
        assert_eq!(r.steps[0].eps, q.steps[0].eps);
        assert_eq!(r.steps[0].eps, step_noise(11, 0, m.config.stream.d_model));
        assert_eq!(r.steps[1].eps, q.steps[1].eps);
        assert!(teacher_length_rollout(&net, &PROMPT, &s, RoleLengths([5, 1, 1, 1]), 11).is_err());
        // halting logits are computed at queried positions up to the teacher length
        assert!(r.steps[0].halt_prob.is_some() && r.steps[1].halt_prob.is_some());
        assert!(r.steps[2].halt_prob.is_none());
    }

    #[test]
    fn replay_reproduces_conditioning() {
        let m = small();
        let net = m.net_constant();
        let s = m.config.schedule;
        let (r, h) = rollout(&net, &PROMPT, &s, Mode::Stochastic, 2).unwrap();
        assert_eq!(replay_conditioning(&net, &PROMPT, &s, &r).unwrap(), h);
    }

    #[test]
    fn interventions_preserve_structure() {
        let m = small();
        let net = m.net_constant();
        let s = m.config.schedule;
        let (r, h) = rollout(&net, &PROMPT, &s, Mode::Stochastic, 4).unwrap();
        let zero = intervene(&r, Intervention::Zero, 0).unwrap();
        assert!(zero.steps.iter().all(|s| s.z.iter().all(|v| *v == 0.0)));
        let rand = intervene(&r, Intervention::Random, 0).unwrap();
        for (a, b) in rand.steps.iter().zip(&r.steps) {
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n(&a.z) - n(&b.z)).abs() < 1e-6);
        }
        let sh = intervene(&r, Intervention::Shuffle, 0).unwrap();
        assert_eq!(sh.lengths, r.lengths);
        let key = |x: &LatentRollout| {
            let mut v: Vec<Vec<u64>> = x.steps.iter().map(|s| s.z.iter().map(|f| f.to_bits()).collect()).collect();
            v.sort();
            v
        };
        assert_eq!(key(&sh), key(&r));
        assert_ne!(sh.actions(), r.actions());
        let hz = replay_conditioning(&net, &PROMPT, &s, &zero).unwrap();
        assert_eq!(hz.shape(), h.shape());
        assert_ne!(hz, h);
        let one_role = LatentRollout { steps: r.steps[..1].to_vec(), lengths: r.lengths, terminated: true };
        let mut single = one_role.clone();
        single.steps[0].role = Role::Plan;
        assert!(intervene(&single, Intervention::Shuffle, 0).is_err());
    }
}
