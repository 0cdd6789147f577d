//! TD3 training: replay, twin-critic targets, delayed actor updates,
//! Polyak-averaged targets and round-robin multi-robot scheduling.

mod agent;
mod replay;
mod rollout;
mod trainer;

use serde::{Deserialize, Serialize};

pub use agent::{smoothed_actions, td_targets, Agent, UpdateMetrics};
pub use replay::{ReplayBuffer, Transition};
pub use rollout::{add_exploration_noise, run_episode, EpisodeStats};
pub use trainer::{episode_seed, EpisodeRecord, RobotSlot, Trainer, TrainerConfig};

use crate::linkworld::LinkworldError;
use crate::numerics::NumericsError;
use crate::policy::PolicyError;
use crate::synergy::SynergyError;

#[derive(Debug, thiserror::Error)]
pub enum Td3Error {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch mixes robots")]
    MixedRobots,
    #[error("environment diverged: {0}")]
    EnvDiverged(String),
    #[error(transparent)]
    Env(#[from] LinkworldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Synergy(#[from] SynergyError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: u64,
    /// Target policy smoothing noise.
    pub target_noise: f64,
    pub noise_clip: f64,
    /// Gaussian noise added to executed actions.
    pub explore_noise: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Global gradient-norm clip per network; `null` disables it.
    pub grad_clip: Option<f64>,
    /// Gradient steps per collected environment step.
    pub updates_per_step: f64,
    /// Environment steps of uniform random actions before the policy acts.
    pub start_steps: u64,
    pub buffer_capacity: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            explore_noise: 0.1,
            batch_size: 100,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            grad_clip: Some(0.1),
            updates_per_step: 1.0,
            start_steps: 10_000,
            buffer_capacity: 1_000_000,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err("td3.gamma must lie in [0, 1]".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err("td3.tau must lie in (0, 1]".into());
        }
        if self.policy_delay == 0 {
            return Err("td3.policy_delay must be positive".into());
        }
        for (name, v) in [
            ("target_noise", self.target_noise),
            ("noise_clip", self.noise_clip),
            ("explore_noise", self.explore_noise),
            ("updates_per_step", self.updates_per_step),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("td3.{name} must be non-negative"));
            }
        }
        for (name, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("td3.{name} must be positive"));
            }
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err("td3.grad_clip must be positive".into());
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err("td3.batch_size and td3.buffer_capacity must be positive".into());
        }
        Ok(())
    }
}
