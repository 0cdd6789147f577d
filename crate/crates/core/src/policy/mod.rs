//! Actor and critic networks.
//!
//! Every network reads per-actuator observations stacked as `[B·K × d_s]`
//! (sample-major, `K` rows per sample) for one robot at a time, and actors
//! emit `[B·K × 1]` actions in the same layout.

mod baselines;
mod solar;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::morphology::TraversalTriple;
use crate::numerics::{Activation, Graph, NumericsError, ParameterSet, SetId, Tensor, Var};
use crate::synergy::SynergyStructure;

pub use baselines::{MaskOnlyActor, MaskOnlyCritic, MlpActor, MlpCritic};
pub use solar::{SolarActor, SolarCritic};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("traversal rank {rank} is outside the embedding pool of {pool}")]
    TripleOutOfRange { rank: usize, pool: usize },
    #[error("robot has {k} actuators but the network supports at most {max}")]
    TooManyActuators { k: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which controller family is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Synergy pooling, inter-synergy attention and the learned
    /// synergy-to-actuator map, with critic-derived clustering preferences.
    Solar,
    /// The synergy mask in the first layer of a per-actuator transformer.
    MaskOnly,
    /// As `Solar`, clustered without critic preferences.
    NoPreference,
    /// A flat MLP over zero-padded concatenated observations.
    Monolithic,
}

impl PolicyMode {
    pub fn uses_synergies(self) -> bool {
        !matches!(self, PolicyMode::Monolithic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyMode::Solar => "solar",
            PolicyMode::MaskOnly => "mask_only",
            PolicyMode::NoPreference => "no_preference",
            PolicyMode::Monolithic => "monolithic",
        }
    }
}

impl std::str::FromStr for PolicyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "solar" => Ok(PolicyMode::Solar),
            "mask_only" => Ok(PolicyMode::MaskOnly),
            "no_preference" => Ok(PolicyMode::NoPreference),
            "monolithic" => Ok(PolicyMode::Monolithic),
            other => Err(format!("unknown mode {other}")),
        }
    }
}

/// Network sizes shared by every mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Per-actuator embedding width.
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Width of each embedding-pool entry.
    pub embed_size: usize,
    pub relation_hidden: usize,
    pub relation_out: usize,
    pub critic_hidden: usize,
    pub activation: Activation,
    /// Hidden widths of the monolithic MLPs.
    pub mlp_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 2,
            ff_hidden: 256,
            embed_size: 128,
            relation_hidden: 128,
            relation_out: 128,
            critic_hidden: 128,
            activation: Activation::Gelu,
            mlp_hidden: vec![256, 256],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), String> {
        let sizes = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_hidden", self.ff_hidden),
            ("embed_size", self.embed_size),
            ("relation_hidden", self.relation_hidden),
            ("relation_out", self.relation_out),
            ("critic_hidden", self.critic_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(format!("network.{name} must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err("network.d_model must be divisible by network.heads".into());
        }
        if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
            return Err("network.mlp_hidden needs at least one positive width".into());
        }
        Ok(())
    }
}

/// What a network needs to know about the robot it is controlling.
#[derive(Clone, Copy, Debug)]
pub struct RobotView<'a> {
    pub structure: &'a SynergyStructure,
    pub triples: &'a [TraversalTriple],
}

impl RobotView<'_> {
    pub fn num_actuators(&self) -> usize {
        self.triples.len()
    }

    fn check(&self, rows: usize, batch: usize, max: usize) -> Result<usize, PolicyError> {
        let k = self.triples.len();
        if k > max {
            return Err(PolicyError::TooManyActuators { k, max });
        }
        if self.structure.num_actuators() != k {
            return Err(PolicyError::DimensionMismatch(format!(
                "structure covers {} actuators, triples {k}",
                self.structure.num_actuators()
            )));
        }
        if batch == 0 || rows != batch * k {
            return Err(PolicyError::DimensionMismatch(format!("{rows} rows for batch {batch} of {k} actuators")));
        }
        Ok(k)
    }
}

/// Traversal ranks scaled to `[0, 1]`, one `[pre, in, post]` row per
/// actuator, repeated for every sample of the batch.
pub fn triple_features(triples: &[TraversalTriple], batch: usize) -> Tensor {
    let k = triples.len();
    let scale = 1.0 / (k.max(2) - 1) as f64;
    let mut data = Vec::with_capacity(batch * k * 3);
    for _ in 0..batch {
        for t in triples {
            data.extend(t.as_array().iter().map(|&r| r as f64 * scale));
        }
    }
    Tensor::from_vec(batch * k, 3, data)
}

/// Outputs of an actor pass.
pub struct ActorOutput {
    /// `[B·K × 1]` actuator actions in `[-1, 1]`.
    pub actions: Var,
    /// `[B·L × 1]` synergy actions (SOLAR only).
    pub synergy_actions: Option<Var>,
    /// `[K × L]` synergy-to-actuator map (SOLAR only).
    pub transformation: Option<Var>,
    /// `[B·K × d]` per-actuator features after the first (masked) block.
    pub pre_pool: Option<Var>,
    /// `[B·L × d]` pooled synergy features (SOLAR only).
    pub pooled: Option<Var>,
}

/// Actor architecture. Parameters live in a separate [`ParameterSet`] so
/// that online and target copies share one description.
#[derive(Clone, Debug)]
pub enum Actor {
    Solar(SolarActor),
    MaskOnly(MaskOnlyActor),
    Monolithic(MlpActor),
}

/// Critic architecture; twins share it and differ only in parameters.
#[derive(Clone, Debug)]
pub enum Critic {
    Solar(SolarCritic),
    MaskOnly(MaskOnlyCritic),
    Monolithic(MlpCritic),
}

impl Actor {
    pub fn build<R: Rng + ?Sized>(
        mode: PolicyMode,
        cfg: &NetworkConfig,
        max_actuators: usize,
        obs_dim: usize,
        rng: &mut R,
    ) -> Result<(Self, ParameterSet), PolicyError> {
        let mut p = ParameterSet::new();
        let actor = match mode {
            PolicyMode::Solar | PolicyMode::NoPreference => {
                Actor::Solar(SolarActor::new(&mut p, cfg, max_actuators, obs_dim, rng)?)
            }
            PolicyMode::MaskOnly => Actor::MaskOnly(MaskOnlyActor::new(&mut p, cfg, max_actuators, obs_dim, rng)?),
            PolicyMode::Monolithic => Actor::Monolithic(MlpActor::new(&mut p, cfg, max_actuators, obs_dim, rng)?),
        };
        Ok((actor, p))
    }

    pub fn max_actuators(&self) -> usize {
        match self {
            Actor::Solar(a) => a.max_actuators(),
            Actor::MaskOnly(a) => a.max_actuators(),
            Actor::Monolithic(a) => a.max_actuators(),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        set: SetId,
        states: Var,
        view: &RobotView<'_>,
        batch: usize,
    ) -> Result<ActorOutput, PolicyError> {
        match self {
            Actor::Solar(a) => a.forward(g, set, states, view, batch),
            Actor::MaskOnly(a) => a.forward(g, set, states, view, batch),
            Actor::Monolithic(a) => a.forward(g, set, states, view, batch),
        }
    }

    /// Deterministic actions without keeping a graph around.
    pub fn act(
        &self,
        params: &ParameterSet,
        states: &Tensor,
        view: &RobotView<'_>,
        batch: usize,
    ) -> Result<Vec<f64>, PolicyError> {
        let mut g = Graph::new();
        let set = g.bind_frozen(params);
        let s = g.constant(states.clone());
        let out = self.forward(&mut g, set, s, view, batch)?;
        Ok(g.value(out.actions).data().to_vec())
    }
}

impl Critic {
    pub fn build<R: Rng + ?Sized>(
        mode: PolicyMode,
        cfg: &NetworkConfig,
        max_actuators: usize,
        obs_dim: usize,
        rng: &mut R,
    ) -> Result<(Self, ParameterSet), PolicyError> {
        let mut p = ParameterSet::new();
        let critic = match mode {
            PolicyMode::Solar | PolicyMode::NoPreference => {
                Critic::Solar(SolarCritic::new(&mut p, cfg, max_actuators, obs_dim, rng)?)
            }
            PolicyMode::MaskOnly => Critic::MaskOnly(MaskOnlyCritic::new(&mut p, cfg, max_actuators, obs_dim, rng)?),
            PolicyMode::Monolithic => Critic::Monolithic(MlpCritic::new(&mut p, cfg, max_actuators, obs_dim, rng)?),
        };
        Ok((critic, p))
    }

    /// `[B × 1]` Q values.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        set: SetId,
        states: Var,
        actions: Var,
        view: &RobotView<'_>,
        batch: usize,
    ) -> Result<Var, PolicyError> {
        match self {
            Critic::Solar(c) => c.forward(g, set, states, actions, view, batch),
            Critic::MaskOnly(c) => c.forward(g, set, states, actions, view, batch),
            Critic::Monolithic(c) => c.forward(g, set, states, actions, view, batch),
        }
    }

    /// Minimum of the twin critics for each sample.
    pub fn min_q(
        &self,
        twins: [&ParameterSet; 2],
        states: &Tensor,
        actions: &Tensor,
        view: &RobotView<'_>,
        batch: usize,
    ) -> Result<Vec<f64>, PolicyError> {
        let mut g = Graph::new();
        let s = g.constant(states.clone());
        let a = g.constant(actions.clone());
        let mut qs = Vec::with_capacity(2);
        for p in twins {
            let set = g.bind_frozen(p);
            qs.push(self.forward(&mut g, set, s, a, view, batch)?);
        }
        let q = g.minimum(qs[0], qs[1])?;
        Ok(g.value(q).data().to_vec())
    }

    /// Zeroes the final layer so the critic outputs 0 everywhere.
    pub fn zero_head(&self, params: &mut ParameterSet) {
        let (w, b) = match self {
            Critic::Solar(c) => c.head_ids(),
            Critic::MaskOnly(c) => c.head_ids(),
            Critic::Monolithic(c) => c.head_ids(),
        };
        for id in [w, b] {
            params.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Averages the columns of `h` within each synergy: `[K × L]` with
/// `P[j][l] = 1/|l|` when actuator `j` belongs to synergy `l`.
pub fn column_average(structure: &SynergyStructure) -> Tensor {
    let k = structure.num_actuators();
    let l = structure.num_synergies();
    let mut counts = vec![0usize; l];
    for &a in structure.assignment() {
        counts[a] += 1;
    }
    let mut p = Tensor::zeros(k, l);
    for (j, &a) in structure.assignment().iter().enumerate() {
        p.set(j, a, 1.0 / counts[a] as f64);
    }
    p
}

/// `[B·K]` pooling labels: sample `b`, actuator `k` → `b·L + assignment[k]`.
fn pool_labels(structure: &SynergyStructure, batch: usize) -> Vec<usize> {
    let l = structure.num_synergies();
    (0..batch).flat_map(|b| structure.assignment().iter().map(move |&a| b * l + a)).collect()
}

/// `[B·K]` pooling labels that collapse each sample to one row.
fn sample_labels(batch: usize, per_sample: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| std::iter::repeat_n(b, per_sample)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_average_matches_definition() {
        let s = SynergyStructure::new("r", vec![0, 1, 0], vec![0, 1], 1, 0).unwrap();
        let p = column_average(&s);
        assert_eq!(p.data(), &[0.5, 0.0, 0.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn labels_follow_assignment() {
        let s = SynergyStructure::new("r", vec![0, 1, 0], vec![0, 1], 1, 0).unwrap();
        assert_eq!(pool_labels(&s, 2), vec![0, 1, 0, 2, 3, 2]);
        assert_eq!(sample_labels(2, 3), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [PolicyMode::Solar, PolicyMode::MaskOnly, PolicyMode::NoPreference, PolicyMode::Monolithic] {
            assert_eq!(m.as_str().parse::<PolicyMode>().unwrap(), m);
        }
        assert!("ppo".parse::<PolicyMode>().is_err());
    }
}
