use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::linkworld::{Family, FamilySpec, PhysicsConfig};
use crate::numerics::Checkpoint;
use crate::policy::{NetworkConfig, PolicyMode};
use crate::synergy::{SynergyConfig, SynergyRecord, SynergyStructure};
use crate::td3::{Agent, Td3Config};

pub const CHECKPOINT_FORMAT: &str = "synergy-ctl/1";

/// One installed synergy structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureRecord {
    /// Robot step at which the structure took effect.
    pub step: u64,
    pub version: u64,
    pub assignment: Vec<usize>,
    pub centers: Vec<usize>,
    pub frozen_until: u64,
}

impl StructureRecord {
    pub fn from_structure(step: u64, s: &SynergyStructure) -> Self {
        Self {
            step,
            version: s.version,
            assignment: s.assignment().to_vec(),
            centers: s.centers().to_vec(),
            frozen_until: s.frozen_until,
        }
    }

    pub fn to_structure(&self, robot: &str) -> Result<SynergyStructure, HarnessError> {
        SynergyStructure::new(robot, self.assignment.clone(), self.centers.clone(), self.version, self.frozen_until)
            .map_err(|e| HarnessError::IncompatibleCheckpoint(format!("{robot}: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotMeta {
    pub name: String,
    pub steps: u64,
    pub current: StructureRecord,
    pub history: Vec<StructureRecord>,
}

impl RobotMeta {
    pub fn synergy_records(&self) -> Result<Vec<SynergyRecord>, HarnessError> {
        self.history
            .iter()
            .map(|r| Ok(SynergyRecord { step: r.step, structure: Arc::new(r.to_structure(&self.name)?) }))
            .collect()
    }
}

/// Everything needed to rebuild the networks and robots of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub mode: PolicyMode,
    pub network: NetworkConfig,
    pub max_actuators: usize,
    pub obs_dim: usize,
    pub seed: u64,
    pub total_steps: u64,
    pub family: FamilySpec,
    pub physics: PhysicsConfig,
    pub synergy: SynergyConfig,
    pub robots: Vec<RobotMeta>,
}

impl CheckpointMeta {
    pub fn robot(&self, name: &str) -> Option<&RobotMeta> {
        self.robots.iter().find(|r| r.name == name)
    }

    pub fn family(&self) -> Result<Family, HarnessError> {
        Family::from_spec(&self.family, self.obs_dim).map_err(|e| HarnessError::IncompatibleCheckpoint(e.to_string()))
    }
}

/// Saves the actor and both online critics with `meta`.
pub(crate) fn save_checkpoint(path: &Path, agent: &Agent, meta: &CheckpointMeta) -> Result<(), HarnessError> {
    let mut ck = Checkpoint::new(serde_json::to_value(meta).expect("meta serializes"));
    ck.push_set("actor", &agent.actor_params);
    ck.push_set("critic0", &agent.critic_params[0]);
    ck.push_set("critic1", &agent.critic_params[1]);
    ck.save(path).map_err(|e| HarnessError::io(path, e))
}

/// A checkpoint with its networks rebuilt.
#[derive(Clone, Debug)]
pub struct LoadedPolicy {
    pub meta: CheckpointMeta,
    pub agent: Agent,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedPolicy, HarnessError> {
    let ck = Checkpoint::load(path).map_err(|e| HarnessError::io(path, e))?;
    let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| HarnessError::IncompatibleCheckpoint(format!("{}: {e}", path.display())))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(HarnessError::IncompatibleCheckpoint(format!("format {}", meta.format)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut agent =
        Agent::new(meta.mode, meta.network.clone(), Td3Config::default(), meta.max_actuators, meta.obs_dim, &mut rng)
            .map_err(|e| HarnessError::IncompatibleCheckpoint(e.to_string()))?;
    let restore = |prefix: &str, set: &mut crate::numerics::ParameterSet| {
        ck.restore_set(prefix, set).map_err(|e| HarnessError::IncompatibleCheckpoint(e.to_string()))
    };
    restore("actor", &mut agent.actor_params)?;
    restore("critic0", &mut agent.critic_params[0])?;
    restore("critic1", &mut agent.critic_params[1])?;
    Ok(LoadedPolicy { meta, agent })
}
