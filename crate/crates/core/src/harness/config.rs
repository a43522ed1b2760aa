//! Run configuration: one TOML file with a schema version, every section
//! optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::StreamConfig;
use crate::error::{Error, Result};
use crate::flowgen::FlowConfig;
use crate::latentpolicy::PolicyConfig;
use crate::lfgrpo::RlConfig;
use crate::model::ModelConfig;
use crate::priors::PriorConfig;
use crate::role::RoleSchedule;
use crate::sft::SftConfig;
use crate::toyscene::prompt::Vocab;
use crate::toyscene::WorldConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training tasks, balanced across categories.
    pub n_tasks: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_tasks: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out prompts per category for the benchmark table.
    pub n_per_category: usize,
    /// Held-out prompts for the intervention report.
    pub intervention_prompts: usize,
    /// Evaluation sample seed.
    pub seed: u64,
    /// Also write an SVG bar chart next to the summary.
    pub chart: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_per_category: 40, intervention_prompts: 240, seed: 0, chart: true }
    }
}

/// Independent seeds for the task data, parameter initialization and every
/// stochastic training or sampling draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub rollout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 7, init: 1, rollout: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding the task file, checkpoints, metrics and reports.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs/default") }
    }
}

impl Paths {
    pub fn tasks(&self) -> PathBuf {
        self.out_dir.join("tasks.jsonl")
    }
    pub fn file(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub world: WorldConfig,
    pub stream: StreamConfig,
    pub schedule: RoleSchedule,
    pub policy: PolicyConfig,
    pub priors: PriorConfig,
    pub flow: FlowConfig,
    pub data: DataConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            world: m.world,
            stream: m.stream,
            schedule: m.schedule,
            policy: m.policy,
            priors: m.priors,
            flow: m.flow,
            data: DataConfig::default(),
            sft: SftConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Narrow model and short schedules for tests and quick runs.
    pub fn small() -> Self {
        let m = ModelConfig::small();
        Self { stream: m.stream, priors: m.priors, flow: m.flow, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model().validate()?;
        self.sft.validate()?;
        self.rl.validate()?;
        if self.data.n_tasks == 0 {
            return Err(Error::Config("data.n_tasks must be positive".into()));
        }
        if self.eval.n_per_category == 0 {
            return Err(Error::Config("eval.n_per_category must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        let mut stream = self.stream;
        stream.vocab_size = stream.vocab_size.max(Vocab::new(&self.world).size());
        ModelConfig {
            world: self.world,
            stream,
            schedule: self.schedule,
            policy: self.policy,
            priors: self.priors,
            flow: self.flow.clone(),
        }
    }

    /// SHA-256 over the sections that determine trained parameters (all but
    /// `eval` and `paths`).
    pub fn hash(&self) -> String {
        let keyed = Self { eval: EvalConfig::default(), paths: Paths::default(), ..self.clone() };
        let json = serde_json::to_vec(&keyed).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&json);
        crate::numerics::hex_digest(&h.finalize())
    }
}
