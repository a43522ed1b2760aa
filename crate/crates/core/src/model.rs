//! The complete parameter set: backbone, latent policy and halting head,
//! prior construction and flow generator, in one [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneIds, StreamConfig};
use crate::error::{invalid, Result};
use crate::flowgen::{FlowConfig, FlowIds};
use crate::latentpolicy::{PolicyConfig, PolicyIds, HALT_PREFIX};
use crate::numerics::rng::rng_from;
use crate::numerics::{Bind, ParamEntry, ParamStore};
use crate::priors::{PriorConfig, PriorIds};
use crate::role::RoleSchedule;
use crate::toyscene::prompt::Vocab;
use crate::toyscene::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub world: WorldConfig,
    pub stream: StreamConfig,
    pub schedule: RoleSchedule,
    pub policy: PolicyConfig,
    pub priors: PriorConfig,
    pub flow: FlowConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let stream = StreamConfig { vocab_size: Vocab::new(&world).size(), ..StreamConfig::default() };
        Self {
            world,
            stream,
            schedule: RoleSchedule::default(),
            policy: PolicyConfig::default(),
            priors: PriorConfig::default(),
            flow: FlowConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A narrow configuration for fast tests and gradient audits.
    pub fn small() -> Self {
        let mut c = Self::default();
        c.stream.d_model = 16;
        c.stream.n_layers = 2;
        c.stream.n_heads = 2;
        c.stream.perception_dim = 8;
        c.priors.d_prior = 16;
        c.flow.d_flow = 16;
        c.flow.n_heads = 2;
        c.flow.time_features = 8;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.schedule.validate()?;
        self.policy.validate()?;
        self.priors.validate()?;
        self.flow.validate()?;
        let vocab = Vocab::new(&self.world);
        if self.stream.vocab_size < vocab.size() {
            return Err(invalid(format!(
                "vocab_size {} smaller than the prompt vocabulary {}",
                self.stream.vocab_size,
                vocab.size()
            )));
        }
        if self.schedule.max_steps() > self.stream.max_role_steps {
            return Err(invalid(format!(
                "schedule needs {} steps per role but the step tables hold {}",
                self.schedule.max_steps(),
                self.stream.max_role_steps
            )));
        }
        let need = vocab.max_prompt_len() + self.world.k_slots + self.schedule.max_total() + 1;
        if self.stream.max_positions < need {
            return Err(invalid(format!("max_positions {} < required {need}", self.stream.max_positions)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModelIds {
    pub backbone: BackboneIds,
    pub policy: PolicyIds,
    pub priors: PriorIds,
    pub flow: FlowIds,
}

impl ModelIds {
    pub fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            backbone: BackboneIds::resolve(store, &cfg.stream)?,
            policy: PolicyIds::resolve(store)?,
            priors: PriorIds::resolve(store)?,
            flow: FlowIds::resolve(store, &cfg.flow)?,
        })
    }
}

/// A parameter store together with its configuration and layout.
#[derive(Clone, Debug)]
pub struct LacModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ModelIds,
}

/// Borrowed view used by every forward pass.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub ids: &'a ModelIds,
    pub bind: Bind<'a>,
}

impl LacModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.stream.d_model;
        let backbone = BackboneIds::init(&mut store, &config.stream, &mut rng_from(seed, &[1]));
        let policy = PolicyIds::init(&mut store, d, &config.policy, &mut rng_from(seed, &[2]));
        let priors = PriorIds::init(&mut store, &config, &mut rng_from(seed, &[3]));
        let flow = FlowIds::init(&mut store, &config, &mut rng_from(seed, &[4]));
        Ok(Self { config, store, ids: ModelIds { backbone, policy, priors, flow } })
    }

    /// Wrap an existing store (e.g. a loaded checkpoint).
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = ModelIds::resolve(&store, &config)?;
        let fresh = Self::new(config.clone(), 0)?;
        if fresh.store.len() != store.len() {
            return Err(invalid(format!("store has {} tensors, config expects {}", store.len(), fresh.store.len())));
        }
        for (a, b) in fresh.store.entries().iter().zip(store.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.frozen != b.frozen {
                return Err(invalid(format!("parameter '{}' does not match the configured layout", b.name)));
            }
        }
        Ok(Self { config, store, ids })
    }

    pub fn net_trainable(&self) -> Net<'_> {
        Net { cfg: &self.config, ids: &self.ids, bind: Bind::trainable(&self.store) }
    }

    pub fn net_constant(&self) -> Net<'_> {
        Net { cfg: &self.config, ids: &self.ids, bind: Bind::constant(&self.store) }
    }

    /// Digest of the halting-head parameters.
    pub fn halting_digest(&self) -> String {
        self.store.digest_where(is_halting)
    }

    /// Digest of the frozen tables.
    pub fn frozen_digest(&self) -> String {
        self.store.digest_where(|e| e.frozen)
    }
}

pub fn is_halting(e: &ParamEntry) -> bool {
    e.name.starts_with(HALT_PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_resolvable() {
        let a = LacModel::new(ModelConfig::small(), 3).unwrap();
        let b = LacModel::new(ModelConfig::small(), 3).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.store.scalar_count(), b.store.scalar_count());
        let c = LacModel::new(ModelConfig::small(), 4).unwrap();
        assert_ne!(a.store.digest(), c.store.digest());
        let r = LacModel::from_store(a.config.clone(), a.store.clone()).unwrap();
        assert_eq!(r.ids.flow.out_w, a.ids.flow.out_w);
        assert!(LacModel::from_store(ModelConfig::default(), a.store.clone()).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        let mut bad = ModelConfig::default();
        bad.stream.max_positions = 10;
        assert!(bad.validate().is_err());
        bad = ModelConfig::default();
        bad.stream.n_heads = 5;
        assert!(bad.validate().is_err());
    }
}
