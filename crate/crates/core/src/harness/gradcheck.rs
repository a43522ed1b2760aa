//! Finite-difference audit of every training loss on a small instance.

use serde::Serialize;

use crate::error::Result;
use crate::lfgrpo::{collect_group, member_objective, GroupBatch, Normalizers, RlConfig, ToyChecker};
use crate::model::{LacModel, ModelConfig, Net};
use crate::numerics::rng::{normal_tensor, rng_from};
use crate::numerics::{finite_diff_check, Bind, GradCheckOptions, GradCheckReport, Graph, ParamGrads, ParamStore};
use crate::sft::{example_objective_split, LossWeights, Phase, SftConfig};
use crate::latentpolicy::Mode;
use crate::toyscene::{generate_tasks, Task};

pub const LOSSES: [&str; 7] = ["l_var", "l_anc", "l_halt", "l_img", "l_z", "l_flow", "r_vel"];

#[derive(Clone, Debug, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub value: f64,
    pub max_rel_err: f64,
    pub coords: usize,
    /// Parameter tensor holding the worst coordinate.
    pub worst_param: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub seed: u64,
    pub tol: f64,
    pub checks: Vec<LossCheck>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:>14} {:>14} {:>7}  {:<24} result\n", "loss", "value", "max_rel_err", "coords", "worst tensor");
        for c in &self.checks {
            s += &format!(
                "{:<8} {:>14.6e} {:>14.3e} {:>7}  {:<24} {}\n",
                c.loss,
                c.value,
                c.max_rel_err,
                c.coords,
                c.worst_param,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        s += &format!("tolerance {:.0e}, seed {}\n", self.tol, self.seed);
        s
    }
}

fn net_of<'a>(model: &'a LacModel, store: &'a ParamStore) -> Net<'a> {
    Net { cfg: &model.config, ids: &model.ids, bind: Bind::trainable(store) }
}

/// Supervised loss under `w`. With `detach_targets` the prior targets stay
/// at the unperturbed parameters, matching a stop-gradient term.
fn sft_loss<'a>(
    model: &'a LacModel,
    task: &'a Task,
    w: LossWeights,
    detach_targets: bool,
    seed: u64,
) -> impl Fn(&ParamStore) -> Result<(f64, ParamGrads)> + 'a {
    move |store| {
        let net = net_of(model, store);
        let fixed = model.net_constant();
        let target_net = if detach_targets { &fixed } else { &net };
        let mut g = Graph::new();
        let eg = example_objective_split(
            &mut g,
            &net,
            target_net,
            task,
            Phase::FullGeneration,
            &SftConfig::default(),
            &w,
            Mode::Stochastic,
            seed,
        )?;
        let grads = g.backward(eg.total);
        Ok((g.scalar(eg.total), g.param_grads(&grads, store)))
    }
}

fn rl_loss<'a>(model: &'a LacModel, groups: &'a [GroupBatch], cfg: RlConfig) -> impl Fn(&ParamStore) -> Result<(f64, ParamGrads)> + 'a {
    move |store| {
        let net = net_of(model, store);
        let norm = Normalizers::of(groups)?;
        let mut total = 0.0;
        let mut grads = ParamGrads::empty(store.len());
        for b in groups {
            for m in &b.members {
                let mut g = Graph::new();
                let t = member_objective(&mut g, &net, &b.prompt, m, &norm, &cfg)?;
                total += g.scalar(t.total);
                let gr = g.backward(t.total);
                grads.add_scaled(&g.param_grads(&gr, store), 1.0);
            }
        }
        Ok((total, grads))
    }
}

/// Model with every trainable tensor nudged by `std`-scaled noise.
fn perturbed(model: &LacModel, std: f64, seed: u64) -> LacModel {
    let mut out = model.clone();
    let mut rng = rng_from(seed, &[0x9e7]);
    for i in 0..out.store.len() {
        let id = crate::numerics::ParamId(i);
        if out.store.entry(id).frozen {
            continue;
        }
        let t = out.store.get(id);
        let noise = normal_tensor(&mut rng, t.rows(), t.cols(), std);
        let t = out.store.get_mut(id);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    out
}

/// Central differences resolve a gradient only to about `ε·|L|/h`, so the
/// floor of the relative-error denominator grows with the loss magnitude.
fn scaled(opts: GradCheckOptions, value: f64) -> GradCheckOptions {
    GradCheckOptions { denom_floor: opts.denom_floor * value.abs().max(1.0), ..opts }
}

/// Check all seven losses at a fresh initialization of `config`.
pub fn gradcheck(config: &ModelConfig, seed: u64) -> Result<GradcheckSummary> {
    let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
    let model = LacModel::new(config.clone(), seed)?;
    let tasks = generate_tasks(&config.world, &config.schedule, 6, seed);
    let task = &tasks[1];
    let one = |var, anc, halt, img| LossWeights { var, anc, halt, img };

    // behavior and reference policies differ from the checked parameters so
    // that ratios, KL terms and velocity residuals are all non-trivial
    let snapshot = perturbed(&model, 0.01, seed);
    let reference = perturbed(&model, 0.05, seed + 1);
    let checker = ToyChecker { world: config.world };
    let mut group = collect_group(&snapshot, &reference, &task.tokens, 3, seed, &checker)?;
    for (k, m) in group.members.iter_mut().enumerate() {
        m.advantage = [1.0, -0.6, 0.3][k];
    }
    let groups = vec![group];
    let rl = RlConfig::default();
    let only = |lz: f64, lx: f64, bz: f64, bv: f64| RlConfig { lambda_z: lz, lambda_x: lx, beta_z: bz, beta_vel: bv, ..rl.clone() };

    let mut checks = Vec::new();
    let mut record = |name: &str, report: GradCheckReport, value: f64| {
        checks.push(LossCheck {
            loss: name.to_string(),
            value,
            max_rel_err: report.max_rel_err,
            coords: report.coords_checked,
            worst_param: report
                .per_param
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                .map(|p| p.name.clone())
                .unwrap_or_default(),
            passed: report.passed,
        });
    };
    let sft_cases = [
        ("l_var", one(1.0, 0.0, 0.0, 0.0), false),
        ("l_anc", one(0.0, 1.0, 0.0, 0.0), true),
        ("l_halt", one(0.0, 0.0, 1.0, 0.0), false),
        ("l_img", one(0.0, 0.0, 0.0, 1.0), false),
    ];
    for (name, w, detach) in sft_cases {
        let f = sft_loss(&model, task, w, detach, seed);
        let value = f(&model.store)?.0;
        record(name, finite_diff_check(&model.store, f, scaled(opts, value))?, value);
    }
    let rl_cases = [
        ("l_z", only(1.0, 0.0, rl.beta_z, 0.0)),
        ("l_flow", only(0.0, 1.0, 0.0, 0.0)),
        ("r_vel", only(0.0, 0.0, 0.0, 1.0)),
    ];
    for (name, c) in rl_cases {
        let f = rl_loss(&model, &groups, c);
        let value = f(&model.store)?.0;
        record(name, finite_diff_check(&model.store, f, scaled(opts, value))?, value);
    }
    Ok(GradcheckSummary { seed, tol: opts.tol, checks })
}
