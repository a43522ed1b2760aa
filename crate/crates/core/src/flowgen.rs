//! Conditional flow-matching generator over flat scene vectors.
//!
//! Time runs from data (`t = 0`) to noise (`t = 1`); generation integrates
//! downward with uniform Euler steps. The flat vector is viewed as one token
//! per slot; tokens self-attend, cross-attend to the conditioning rows and
//! pass through an MLP before being mapped back to slot features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{linear_init, ln_affine, resolve};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, Net};
use crate::numerics::gaussian::{logprob_normalized_var, HALF_LN_2PI};
use crate::numerics::rng::{derive_seed, normal_vec, rng_from};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `σ(t) = σ_sde · t`, vanishing at the data end.
    Linear,
    /// `σ(t) = σ_sde`.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub d_flow: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Number of sinusoidal time features (even).
    pub time_features: usize,
    /// Euler steps `M`.
    pub steps: usize,
    pub sigma_sde: f64,
    pub schedule: NoiseSchedule,
    /// Add the score term `−σ(t)²/(2t)·(x + (1 − t)v)` to the stochastic
    /// drift so that stochastic steps keep the deterministic sampler's
    /// marginals; without it the noise only adds variance.
    pub score_correction: bool,
    /// Step indices in `1..=steps` that are sampled stochastically.
    pub sde_steps: Vec<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            d_flow: 64,
            n_blocks: 2,
            n_heads: 4,
            time_features: 16,
            steps: 20,
            sigma_sde: 0.7,
            schedule: NoiseSchedule::Linear,
            score_correction: true,
            sde_steps: vec![4, 8, 12, 16, 20],
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_flow == 0 || self.n_blocks == 0 || self.n_heads == 0 || self.d_flow % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "flow width {} must be a positive multiple of {} heads",
                self.d_flow, self.n_heads
            )));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(Error::Config("time_features must be positive and even".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("flow needs at least one step".into()));
        }
        if !(self.sigma_sde >= 0.0 && self.sigma_sde.is_finite()) {
            return Err(Error::Config("sigma_sde must be finite and non-negative".into()));
        }
        validate_sde_steps(&self.sde_steps, self.steps)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// `t_m = m / M`.
    pub fn time(&self, m: usize) -> f64 {
        m as f64 / self.steps as f64
    }

    pub fn sigma_at(&self, t: f64) -> f64 {
        match self.schedule {
            NoiseSchedule::Linear => self.sigma_sde * t,
            NoiseSchedule::Constant => self.sigma_sde,
        }
    }

    /// `(a, b)` with stochastic step mean `a·x − b·v`; `(1, dt)` is the
    /// deterministic Euler step.
    pub fn drift(&self, m: usize) -> (f64, f64) {
        let (t, dt) = (self.time(m), self.dt());
        if !self.score_correction {
            return (1.0, dt);
        }
        // the velocity of the linear path gives the score −(x + (1 − t)v)/t
        let c = self.sigma_at(t).powi(2) / (2.0 * t);
        (1.0 - dt * c, dt * (1.0 + c * (1.0 - t)))
    }

    /// Transition standard deviation of stochastic step `m`.
    pub fn step_std(&self, m: usize) -> f64 {
        self.sigma_at(self.time(m)) * self.dt().sqrt()
    }
}

fn validate_sde_steps(steps: &[usize], m: usize) -> Result<()> {
    for w in steps.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Config("sde_steps must be strictly increasing".into()));
        }
    }
    if steps.iter().any(|&s| s == 0 || s > m) {
        return Err(Error::Config(format!("sde_steps must lie in 1..={m}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FlowBlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    /// Conditioning rows → cross-attention keys and values.
    pub w_kv: ParamId,
    pub b_kv: ParamId,
    pub w_co: ParamId,
    pub b_co: ParamId,
    pub ln3_g: ParamId,
    pub ln3_b: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

const BLOCK_PARAMS: [&str; 20] = [
    "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_g", "ln2_b", "w_q", "b_q", "w_kv", "b_kv", "w_co",
    "b_co", "ln3_g", "ln3_b", "w_1", "b_1", "w_2", "b_2",
];

impl FlowBlockIds {
    fn from_ids(v: &[ParamId]) -> Self {
        Self {
            ln1_g: v[0],
            ln1_b: v[1],
            w_qkv: v[2],
            b_qkv: v[3],
            w_o: v[4],
            b_o: v[5],
            ln2_g: v[6],
            ln2_b: v[7],
            w_q: v[8],
            b_q: v[9],
            w_kv: v[10],
            b_kv: v[11],
            w_co: v[12],
            b_co: v[13],
            ln3_g: v[14],
            ln3_b: v[15],
            w_1: v[16],
            b_1: v[17],
            w_2: v[18],
            b_2: v[19],
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowIds {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub slot_emb: ParamId,
    pub time_w: ParamId,
    pub time_b: ParamId,
    pub blocks: Vec<FlowBlockIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl FlowIds {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let f = &cfg.flow;
        let df = f.d_flow;
        let dx = cfg.world.slot_width();
        let d = cfg.stream.d_model;
        let hidden = 4 * df;
        let in_w = store.add("flow.in_w", linear_init(rng, dx, df, 1.0), false);
        let in_b = store.add("flow.in_b", Tensor::zeros(1, df), false);
        let slot_emb = store.add("flow.slot_emb", linear_init(rng, 1, cfg.world.k_slots * df, 0.1).reshape(cfg.world.k_slots, df), false);
        let time_w = store.add("flow.time_w", linear_init(rng, f.time_features, df, 1.0), false);
        let time_b = store.add("flow.time_b", Tensor::zeros(1, df), false);
        let mut blocks = Vec::with_capacity(f.n_blocks);
        for b in 0..f.n_blocks {
            let mut ids = Vec::with_capacity(BLOCK_PARAMS.len());
            for name in BLOCK_PARAMS {
                let value = match name {
                    "ln1_g" | "ln2_g" | "ln3_g" => Tensor::filled(1, df, 1.0),
                    "w_qkv" => linear_init(rng, df, 3 * df, 1.0),
                    "b_qkv" => Tensor::zeros(1, 3 * df),
                    "w_o" | "w_co" => linear_init(rng, df, df, 0.5),
                    "w_q" => linear_init(rng, df, df, 1.0),
                    "w_kv" => linear_init(rng, d, 2 * df, 1.0),
                    "b_kv" => Tensor::zeros(1, 2 * df),
                    "w_1" => linear_init(rng, df, hidden, 1.0),
                    "b_1" => Tensor::zeros(1, hidden),
                    "w_2" => linear_init(rng, hidden, df, 0.5),
                    _ => Tensor::zeros(1, df),
                };
                ids.push(store.add(format!("flow.block{b}.{name}"), value, false));
            }
            blocks.push(FlowBlockIds::from_ids(&ids));
        }
        let lnf_g = store.add("flow.lnf_g", Tensor::filled(1, df, 1.0), false);
        let lnf_b = store.add("flow.lnf_b", Tensor::zeros(1, df), false);
        // Small but nonzero so the loss reaches the conditioning at init.
        let out_w = store.add("flow.out_w", linear_init(rng, df, dx, 0.1), false);
        let out_b = store.add("flow.out_b", Tensor::zeros(1, dx), false);
        Self { in_w, in_b, slot_emb, time_w, time_b, blocks, lnf_g, lnf_b, out_w, out_b }
    }

    pub fn resolve(store: &ParamStore, cfg: &FlowConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let ids = BLOCK_PARAMS
                .iter()
                .map(|n| resolve(store, &format!("flow.block{b}.{n}")))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(FlowBlockIds::from_ids(&ids));
        }
        Ok(Self {
            in_w: resolve(store, "flow.in_w")?,
            in_b: resolve(store, "flow.in_b")?,
            slot_emb: resolve(store, "flow.slot_emb")?,
            time_w: resolve(store, "flow.time_w")?,
            time_b: resolve(store, "flow.time_b")?,
            blocks,
            lnf_g: resolve(store, "flow.lnf_g")?,
            lnf_b: resolve(store, "flow.lnf_b")?,
            out_w: resolve(store, "flow.out_w")?,
            out_b: resolve(store, "flow.out_b")?,
        })
    }
}

/// Sinusoidal features of `t` at frequencies `π·2^i`.
pub fn time_features(t: f64, n: usize) -> Vec<f64> {
    let half = n / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..half {
        let w = std::f64::consts::PI * (1u64 << i.min(30)) as f64;
        out.push((w * t).sin());
    }
    for i in 0..half {
        let w = std::f64::consts::PI * (1u64 << i.min(30)) as f64;
        out.push((w * t).cos());
    }
    out
}

/// `(x_t, v_target)` with `x_t = (1−t)·x + t·noise` and `v_target = noise − x`.
pub fn interpolate(x: &[f64], noise: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("time {t} outside [0, 1]")));
    }
    if x.len() != noise.len() {
        return Err(Error::Shape(format!("data width {} != noise width {}", x.len(), noise.len())));
    }
    let xt = x.iter().zip(noise).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let v = x.iter().zip(noise).map(|(a, b)| b - a).collect();
    Ok((xt, v))
}

/// Cross-attention keys and values of the conditioning rows, one pair per
/// block; computed once per conditioning matrix.
#[derive(Clone, Debug)]
pub struct FlowCond {
    kv: Vec<(Var, Var)>,
}

pub fn prepare_cond(g: &mut Graph, net: &Net<'_>, h: Var) -> Result<FlowCond> {
    let d = net.cfg.stream.d_model;
    if g.value(h).cols() != d || g.value(h).rows() == 0 {
        return Err(Error::Shape(format!("conditioning {:?} is not n × {d}", g.value(h).shape())));
    }
    let df = net.cfg.flow.d_flow;
    let mut kv = Vec::with_capacity(net.ids.flow.blocks.len());
    for b in &net.ids.flow.blocks {
        let (w, bias) = (g.param(net.bind, b.w_kv), g.param(net.bind, b.b_kv));
        let both = g.linear(h, w, bias);
        let k = g.slice_cols(both, 0, df);
        let v = g.slice_cols(both, df, df);
        kv.push((k, v));
    }
    Ok(FlowCond { kv })
}

/// `v_θ(x, t, H)` as a `1 × D_x` node.
pub fn velocity_var(g: &mut Graph, net: &Net<'_>, cond: &FlowCond, x: Var, t: f64) -> Result<Var> {
    let world = &net.cfg.world;
    let (k, sw) = (world.k_slots, world.slot_width());
    if g.value(x).shape() != [1, k * sw] {
        return Err(Error::Shape(format!("flow state {:?} is not 1 × {}", g.value(x).shape(), k * sw)));
    }
    let f = &net.cfg.flow;
    let ids = &net.ids.flow;
    let bind = net.bind;
    let tokens = g.reshape(x, k, sw);
    let (w, b) = (g.param(bind, ids.in_w), g.param(bind, ids.in_b));
    let mut hdn = g.linear(tokens, w, b);
    let slots = g.param(bind, ids.slot_emb);
    hdn = g.add(hdn, slots);
    let tf = g.constant_row(&time_features(t, f.time_features));
    let (w, b) = (g.param(bind, ids.time_w), g.param(bind, ids.time_b));
    let temb = g.linear(tf, w, b);
    hdn = g.add_row(hdn, temb);
    let df = f.d_flow;
    for (blk, &(ck, cv)) in ids.blocks.iter().zip(&cond.kv) {
        let (lg, lb) = (g.param(bind, blk.ln1_g), g.param(bind, blk.ln1_b));
        let xn = ln_affine(g, hdn, lg, lb);
        let (w, b) = (g.param(bind, blk.w_qkv), g.param(bind, blk.b_qkv));
        let qkv = g.linear(xn, w, b);
        let q = g.slice_cols(qkv, 0, df);
        let kk = g.slice_cols(qkv, df, df);
        let vv = g.slice_cols(qkv, 2 * df, df);
        let a = g.attention(q, kk, vv, f.n_heads);
        let (w, b) = (g.param(bind, blk.w_o), g.param(bind, blk.b_o));
        let o = g.linear(a, w, b);
        hdn = g.add(hdn, o);

        let (lg, lb) = (g.param(bind, blk.ln2_g), g.param(bind, blk.ln2_b));
        let xn = ln_affine(g, hdn, lg, lb);
        let (w, b) = (g.param(bind, blk.w_q), g.param(bind, blk.b_q));
        let q = g.linear(xn, w, b);
        let a = g.attention(q, ck, cv, f.n_heads);
        let (w, b) = (g.param(bind, blk.w_co), g.param(bind, blk.b_co));
        let o = g.linear(a, w, b);
        hdn = g.add(hdn, o);

        let (lg, lb) = (g.param(bind, blk.ln3_g), g.param(bind, blk.ln3_b));
        let xn = ln_affine(g, hdn, lg, lb);
        let (w, b) = (g.param(bind, blk.w_1), g.param(bind, blk.b_1));
        let m = g.linear(xn, w, b);
        let m = g.gelu(m);
        let (w, b) = (g.param(bind, blk.w_2), g.param(bind, blk.b_2));
        let m = g.linear(m, w, b);
        hdn = g.add(hdn, m);
    }
    let (lg, lb) = (g.param(bind, ids.lnf_g), g.param(bind, ids.lnf_b));
    let xn = ln_affine(g, hdn, lg, lb);
    let (w, b) = (g.param(bind, ids.out_w), g.param(bind, ids.out_b));
    let out = g.linear(xn, w, b);
    Ok(g.reshape(out, 1, k * sw))
}

/// `(t, noise)` of flow-matching sample `j` under `seed`.
pub fn fm_draw(seed: u64, j: usize, dim: usize) -> (f64, Vec<f64>) {
    let mut rng = rng_from(derive_seed(seed, &[0xf10e]), &[j as u64]);
    let t = rng.random::<f64>();
    (t, normal_vec(&mut rng, dim))
}

/// Mean over `n_t` draws of `‖v_θ(x_t, t, H) − v_target‖² / D_x`.
pub fn fm_loss_var(g: &mut Graph, net: &Net<'_>, cond: &FlowCond, x: &[f64], n_t: usize, seed: u64) -> Result<Var> {
    if n_t == 0 {
        return Err(invalid("flow-matching loss needs at least one draw"));
    }
    let mut terms = Vec::with_capacity(n_t);
    for j in 0..n_t {
        let (t, noise) = fm_draw(seed, j, x.len());
        let (xt, target) = interpolate(x, &noise, t)?;
        let xv = g.constant_row(&xt);
        let v = velocity_var(g, net, cond, xv, t)?;
        let tv = g.constant_row(&target);
        let diff = g.sub(v, tv);
        let sq = g.square(diff);
        terms.push(g.mean(sq));
    }
    let all = g.concat_cols(&terms);
    Ok(g.mean(all))
}

/// Value-level velocity field; implemented by the network and by analytic
/// fields in tests.
pub trait VelocityField {
    fn velocity(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// The network with one prepared conditioning matrix, evaluated on a
/// private graph.
pub struct NetField<'a> {
    net: Net<'a>,
    g: Graph,
    cond: FlowCond,
}

impl<'a> NetField<'a> {
    pub fn new(net: Net<'a>, h: &Tensor) -> Result<Self> {
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let cond = prepare_cond(&mut g, &net, hv)?;
        Ok(Self { net, g, cond })
    }
}

impl VelocityField for NetField<'_> {
    fn velocity(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mark = self.g.len();
        let xv = self.g.constant_row(x);
        let v = velocity_var(&mut self.g, &self.net, &self.cond, xv, t)?;
        let out = self.g.value(v).data().to_vec();
        self.g.truncate(mark);
        Ok(out)
    }
}

/// Deterministic Euler integration from `t = 1` to `t = 0`.
pub fn sample_ode(field: &mut impl VelocityField, x_init: &[f64], steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(invalid("flow needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x_init.to_vec();
    for m in (1..=steps).rev() {
        // same time grid as `FlowConfig::time`, so an empty stochastic set
        // reproduces this sampler bit for bit
        let v = field.velocity(&x, m as f64 / steps as f64)?;
        check_width(&v, x.len())?;
        x.iter_mut().zip(&v).for_each(|(a, b)| *a -= dt * b);
    }
    Ok(x)
}

fn check_width(v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!("velocity width {} != state width {n}", v.len())));
    }
    Ok(())
}

/// One Euler–Maruyama step with mean `a·x − b·v`: `(x_{m−1}, mean, std)`.
pub fn sde_step(x: &[f64], v: &[f64], (a, b): (f64, f64), std: f64, eps: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if !(b > 0.0) {
        return Err(invalid("step size must be positive"));
    }
    check_width(v, x.len())?;
    check_width(eps, x.len())?;
    let mean: Vec<f64> = x.iter().zip(v).map(|(xi, vi)| a * xi - b * vi).collect();
    let next = mean.iter().zip(eps).map(|(m, e)| m + std * e).collect();
    Ok((next, mean, std))
}

/// Stored statistics of one stochastic step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeRecord {
    pub m: usize,
    pub t: f64,
    pub mean: Vec<f64>,
    pub std: f64,
    pub eps: Vec<f64>,
    /// Per-dimension log-density of the sampled transition.
    pub logp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrajectory {
    /// `states[m]` is `x_m`; `states[M]` is the initial noise, `states[0]`
    /// the generated sample.
    pub states: Vec<Vec<f64>>,
    pub sde: Vec<SdeRecord>,
}

impl FlowTrajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn x0(&self) -> &[f64] {
        &self.states[0]
    }
}

/// Per-dimension `log N(x; mean, std² I)`.
pub fn transition_logprob(x_next: &[f64], mean: &[f64], std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(invalid("deterministic steps have no transition density"));
    }
    check_width(x_next, mean.len())?;
    let n = mean.len() as f64;
    let quad: f64 = x_next.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * std * std);
    Ok(-std.ln() - HALF_LN_2PI - quad / n)
}

/// Noise of stochastic step `m` under `seed`.
pub fn sde_noise(seed: u64, m: usize, dim: usize) -> Vec<f64> {
    normal_vec(&mut rng_from(derive_seed(seed, &[0x5de]), &[m as u64]), dim)
}

/// Initial noise `x_M` under `seed`.
pub fn init_noise(seed: u64, dim: usize) -> Vec<f64> {
    normal_vec(&mut rng_from(derive_seed(seed, &[0x1e17]), &[]), dim)
}

/// Euler sampling with Euler–Maruyama steps at `cfg.sde_steps`.
pub fn sample_sde(field: &mut impl VelocityField, x_init: &[f64], cfg: &FlowConfig, seed: u64) -> Result<FlowTrajectory> {
    validate_sde_steps(&cfg.sde_steps, cfg.steps)?;
    let dt = cfg.dt();
    let mut states = vec![Vec::new(); cfg.steps + 1];
    states[cfg.steps] = x_init.to_vec();
    let mut sde = Vec::with_capacity(cfg.sde_steps.len());
    for m in (1..=cfg.steps).rev() {
        let t = cfg.time(m);
        let x = &states[m];
        let v = field.velocity(x, t)?;
        check_width(&v, x.len())?;
        let std = cfg.step_std(m);
        let next = if cfg.sde_steps.contains(&m) && std > 0.0 {
            let eps = sde_noise(seed, m, x.len());
            let (next, mean, std) = sde_step(x, &v, cfg.drift(m), std, &eps)?;
            let logp = transition_logprob(&next, &mean, std)?;
            sde.push(SdeRecord { m, t, mean, std, eps, logp });
            next
        } else {
            x.iter().zip(&v).map(|(a, b)| a - dt * b).collect()
        };
        states[m - 1] = next;
    }
    Ok(FlowTrajectory { states, sde })
}

/// Differentiable per-dimension log-density of the stored transition
/// `x_m → x_{m−1}` under the current network.
pub fn transition_logprob_var(
    g: &mut Graph,
    net: &Net<'_>,
    cond: &FlowCond,
    traj: &FlowTrajectory,
    rec: &SdeRecord,
) -> Result<Var> {
    if !(rec.std > 0.0) {
        return Err(invalid("deterministic steps have no transition density"));
    }
    let (a, b) = net.cfg.flow.drift(rec.m);
    let x = g.constant_row(&traj.states[rec.m]);
    let v = velocity_var(g, net, cond, x, rec.t)?;
    let step = g.scale(v, -b);
    let xa = g.scale(x, a);
    let mean = g.add(xa, step);
    let next = g.constant_row(&traj.states[rec.m - 1]);
    let n = traj.states[rec.m].len();
    let sigma = g.constant(Tensor::filled(1, n, rec.std));
    Ok(logprob_normalized_var(g, next, mean, sigma))
}

/// `(1/D_x)·‖v_θ(x, t, H) − v_ref‖²` against a stored reference velocity.
pub fn velocity_residual_var(g: &mut Graph, net: &Net<'_>, cond: &FlowCond, x: &[f64], t: f64, v_ref: &[f64]) -> Result<Var> {
    check_width(v_ref, x.len())?;
    let xv = g.constant_row(x);
    let v = velocity_var(g, net, cond, xv, t)?;
    let r = g.constant_row(v_ref);
    let diff = g.sub(v, r);
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Value-level residual between two fields at one state.
pub fn velocity_residual(actor: &mut impl VelocityField, reference: &mut impl VelocityField, x: &[f64], t: f64) -> Result<f64> {
    let a = actor.velocity(x, t)?;
    let b = reference.velocity(x, t)?;
    check_width(&a, b.len())?;
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LacModel;
    use crate::numerics::rng::normal_tensor;

    struct Const(Vec<f64>);
    impl VelocityField for Const {
        fn velocity(&mut self, _x: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    struct Linear;
    impl VelocityField for Linear {
        fn velocity(&mut self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(x.to_vec())
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let (x, n) = ([0.2, -1.0], [1.5, 0.5]);
        let (a, v) = interpolate(&x, &n, 0.0).unwrap();
        assert_eq!(a, x);
        assert_eq!(v, vec![1.3, 1.5]);
        let (b, _) = interpolate(&x, &n, 1.0).unwrap();
        assert_eq!(b, n);
        assert_eq!(interpolate(&[0.0], &[1.0], 0.5).unwrap(), (vec![0.5], vec![1.0]));
        assert!(interpolate(&x, &n, 1.5).is_err());
        assert!(interpolate(&x, &[1.0], 0.5).is_err());
    }

    #[test]
    fn ode_on_closed_form_fields() {
        let x = vec![0.3, -2.0];
        assert_eq!(sample_ode(&mut Const(vec![0.0, 0.0]), &x, 7).unwrap(), x);
        let out = sample_ode(&mut Const(vec![0.5, -1.0]), &x, 20).unwrap();
        assert!((out[0] + 0.2).abs() < 1e-12 && (out[1] + 1.0).abs() < 1e-12);
        let out = sample_ode(&mut Linear, &[1.0], 100).unwrap();
        assert!((out[0] / (-1.0f64).exp() - 1.0).abs() < 0.02);
    }

    /// Exact velocity of the linear path for data `N(mu, s²)` per coordinate.
    struct GaussianData {
        mu: f64,
        s: f64,
    }
    impl VelocityField for GaussianData {
        fn velocity(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
            let var = (1.0 - t).powi(2) * self.s * self.s + t * t;
            Ok(x.iter()
                .map(|&xi| {
                    let r = (xi - (1.0 - t) * self.mu) / var;
                    t * r - (self.mu + (1.0 - t) * self.s * self.s * r)
                })
                .collect())
        }
    }

    fn moments(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn score_correction_keeps_data_marginal() {
        let (mu, s) = (0.5, 0.3);
        let cfg = FlowConfig { steps: 100, sigma_sde: 1.0, sde_steps: (1..=100).collect(), ..FlowConfig::default() };
        // every coordinate is an independent one-dimensional sample
        let x_init = init_noise(11, 20_000);
        let out = sample_sde(&mut GaussianData { mu, s }, &x_init, &cfg, 5).unwrap();
        let (m, sd) = moments(&out.states[0]);
        assert!((m - mu).abs() < 0.02 && (sd / s - 1.0).abs() < 0.05, "corrected: {m} {sd}");
        let plain = FlowConfig { score_correction: false, ..cfg };
        let out = sample_sde(&mut GaussianData { mu, s }, &x_init, &plain, 5).unwrap();
        let (_, sd) = moments(&out.states[0]);
        assert!(sd / s > 1.3, "uncorrected noise should inflate the spread: {sd}");
    }

    #[test]
    fn sde_bookkeeping() {
        let cfg = FlowConfig::default();
        let x = vec![1.0, 2.0, 3.0];
        let plain = FlowConfig { score_correction: false, ..cfg.clone() };
        let (next, mean, std) = sde_step(&x, &[0.1, 0.2, 0.3], plain.drift(20), cfg.step_std(20), &[0.0; 3]).unwrap();
        assert_eq!(next, mean);
        assert!((std - cfg.sigma_sde * (0.05f64).sqrt()).abs() < 1e-12);
        let (det, _, _) = sde_step(&x, &[0.1, 0.2, 0.3], (1.0, 0.05), 0.0, &[1.0; 3]).unwrap();
        let ode: Vec<f64> = x.iter().zip([0.1, 0.2, 0.3]).map(|(a, b)| a - 0.05 * b).collect();
        assert_eq!(det, ode);
        let lp = transition_logprob(&mean, &mean, 0.3).unwrap();
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI * 0.09).ln()).abs() < 1e-12);
        assert!(transition_logprob(&mean, &mean, 0.0).is_err());
    }

    #[test]
    fn sde_reduces_to_ode_and_is_reproducible() {
        let mut cfg = FlowConfig::default();
        let x = vec![0.5, -0.5];
        let a = sample_sde(&mut Linear, &x, &cfg, 1).unwrap();
        let b = sample_sde(&mut Linear, &x, &cfg, 1).unwrap();
        assert_eq!(a, b);
        for r in &a.sde {
            for j in 0..x.len() {
                assert!((a.states[r.m - 1][j] - (r.mean[j] + r.std * r.eps[j])).abs() < 1e-12);
            }
            assert!((transition_logprob(&a.states[r.m - 1], &r.mean, r.std).unwrap() - r.logp).abs() < 1e-12);
        }
        let c = sample_sde(&mut Linear, &x, &cfg, 2).unwrap();
        assert_ne!(a.x0(), c.x0());
        cfg.sde_steps.clear();
        let d = sample_sde(&mut Linear, &x, &cfg, 1).unwrap();
        assert_eq!(d.x0(), sample_ode(&mut Linear, &x, cfg.steps).unwrap().as_slice());
        let d = sample_sde(&mut GaussianData { mu: 0.3, s: 0.7 }, &x, &cfg, 1).unwrap();
        assert_eq!(d.x0(), sample_ode(&mut GaussianData { mu: 0.3, s: 0.7 }, &x, cfg.steps).unwrap().as_slice());
        assert!(d.sde.is_empty());
        cfg.sde_steps = vec![3, 3];
        assert!(sample_sde(&mut Linear, &x, &cfg, 1).is_err());
    }

    #[test]
    fn network_velocity_and_conditioning() {
        let m = LacModel::new(ModelConfig::small(), 1).unwrap();
        let net = m.net_constant();
        let dx = m.config.world.flat_dim();
        let h = normal_tensor(&mut rng_from(9, &[]), 5, m.config.stream.d_model, 1.0);
        let mut field = NetField::new(net, &h).unwrap();
        let x = normal_vec(&mut rng_from(8, &[]), dx);
        let v1 = field.velocity(&x, 0.3).unwrap();
        assert_eq!(v1.len(), dx);
        assert_eq!(v1, field.velocity(&x, 0.3).unwrap());
        assert_ne!(v1, field.velocity(&x, 0.7).unwrap());
        // permuting the conditioning rows does not change unmasked attention,
        // but changing them does
        let mut h2 = h.clone();
        h2.data_mut()[0] += 1.0;
        let v2 = NetField::new(net, &h2).unwrap().velocity(&x, 0.3).unwrap();
        assert!(v1.iter().zip(&v2).map(|(a, b)| (a - b).abs()).sum::<f64>() > 1e-9);
        assert!(field.velocity(&x[1..], 0.3).is_err());
        assert_eq!(velocity_residual(&mut field, &mut NetField::new(net, &h).unwrap(), &x, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn zero_network_loss_matches_noise_energy() {
        let mut m = LacModel::new(ModelConfig::small(), 1).unwrap();
        let id = m.ids.flow.out_w;
        *m.store.get_mut(id) = Tensor::zeros(m.config.flow.d_flow, m.config.world.slot_width());
        let net = m.net_constant();
        let h = normal_tensor(&mut rng_from(9, &[]), 3, m.config.stream.d_model, 1.0);
        let dx = m.config.world.flat_dim();
        let x: Vec<f64> = (0..dx).map(|i| (i % 5) as f64 * 0.2).collect();
        let mut g = Graph::new();
        let hv = g.constant(h);
        let cond = prepare_cond(&mut g, &net, hv).unwrap();
        let loss = fm_loss_var(&mut g, &net, &cond, &x, 2000, 4).unwrap();
        let analytic = 1.0 + x.iter().map(|v| v * v).sum::<f64>() / dx as f64;
        assert!((g.scalar(loss) / analytic - 1.0).abs() < 0.03);
    }

    #[test]
    fn transition_var_matches_stored() {
        let m = LacModel::new(ModelConfig::small(), 2).unwrap();
        let net = m.net_constant();
        let h = normal_tensor(&mut rng_from(9, &[]), 4, m.config.stream.d_model, 1.0);
        let dx = m.config.world.flat_dim();
        let traj = sample_sde(&mut NetField::new(net, &h).unwrap(), &init_noise(3, dx), &m.config.flow, 5).unwrap();
        assert_eq!(traj.sde.len(), 5);
        let mut g = Graph::new();
        let hv = g.constant(h);
        let cond = prepare_cond(&mut g, &net, hv).unwrap();
        for r in &traj.sde {
            let lp = transition_logprob_var(&mut g, &net, &cond, &traj, r).unwrap();
            assert!((g.scalar(lp) - r.logp).abs() < 1e-10);
        }
    }
}
