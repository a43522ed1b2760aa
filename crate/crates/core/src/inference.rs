//! Teacher-free generation: prompt tokens in, latent trace and decoded scene
//! out. Nothing here reads teacher records, drafts or reference scenes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flowgen::{init_noise, sample_ode, NetField};
use crate::latentpolicy::{replay_conditioning, rollout, LatentRollout, Mode};
use crate::model::LacModel;
use crate::numerics::rng::derive_seed;
use crate::numerics::Tensor;
use crate::role::RoleSchedule;
use crate::toyscene::prompt::{PromptSpec, Vocab};
use crate::toyscene::{decode_scene, reward, Scene};

/// One generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub rollout: LatentRollout,
    pub x0: Vec<f64>,
    pub scene: Scene,
}

/// Initial flow noise of prompt-level sample `seed`; shared by every
/// variant of the same sample so comparisons see matched noise.
pub fn flow_noise(model: &LacModel, seed: u64) -> Vec<f64> {
    init_noise(derive_seed(seed, &[0xf1]), model.config.world.flat_dim())
}

/// Decode with the deterministic ODE sampler from `x_init`.
pub fn decode_from(model: &LacModel, h: &Tensor, x_init: &[f64]) -> Result<(Vec<f64>, Scene)> {
    let mut field = NetField::new(model.net_constant(), h)?;
    let x0 = sample_ode(&mut field, x_init, model.config.flow.steps)?;
    let scene = decode_scene(&model.config.world, &x0)?;
    Ok((x0, scene))
}

/// Roll out latents under `schedule` and decode with ODE sampling.
pub fn generate(model: &LacModel, tokens: &[usize], schedule: &RoleSchedule, mode: Mode, seed: u64) -> Result<Generation> {
    let net = model.net_constant();
    let (r, h) = rollout(&net, tokens, schedule, mode, derive_seed(seed, &[0x1a]))?;
    let (x0, scene) = decode_from(model, &h, &flow_noise(model, seed))?;
    Ok(Generation { rollout: r, x0, scene })
}

/// Decode a given (possibly edited) trace with the flow noise of `seed`.
pub fn generate_from_trace(model: &LacModel, tokens: &[usize], schedule: &RoleSchedule, trace: &LatentRollout, seed: u64) -> Result<Generation> {
    let h = replay_conditioning(&model.net_constant(), tokens, schedule, trace)?;
    let (x0, scene) = decode_from(model, &h, &flow_noise(model, seed))?;
    Ok(Generation { rollout: trace.clone(), x0, scene })
}

/// Reward of a generated scene against the prompt it was generated from.
pub fn score(model: &LacModel, tokens: &[usize], scene: &Scene) -> Result<f64> {
    let spec = PromptSpec::from_tokens(tokens, &Vocab::new(&model.config.world))?;
    Ok(reward(&model.config.world, &spec, scene))
}

/// Per-prompt rewards of mean-action, ODE-decoded samples; prompt `i` uses
/// sample seed `derive_seed(seed, [i])`.
pub fn prompt_rewards(model: &LacModel, prompts: &[Vec<usize>], schedule: &RoleSchedule, seed: u64) -> Result<Vec<f64>> {
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let g = generate(model, p, schedule, Mode::Mean, derive_seed(seed, &[i as u64]))?;
            score(model, p, &g.scene)
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}
