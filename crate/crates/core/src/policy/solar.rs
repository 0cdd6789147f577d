use rand::Rng;

use super::{column_average, pool_labels, sample_labels, ActorOutput, NetworkConfig, PolicyError, RobotView};
use crate::morphology::TraversalTriple;
use crate::numerics::{full_mask, AttentionBlock, Dense, Graph, LayerNorm, ParamId, ParameterSet, SetId, Tensor, Var};
use crate::synergy::SynergyStructure;

/// Encoder, one masked intra-synergy block, synergy pooling and two
/// inter-synergy blocks. Shared by the actor and the critic.
#[derive(Clone, Debug)]
struct Trunk {
    encoder: Dense,
    intra: AttentionBlock,
    inter: [AttentionBlock; 2],
    out_norm: LayerNorm,
}

struct TrunkOutput {
    pre_pool: Var,
    pooled: Var,
    /// `[B·L × d]` after inter-synergy attention and the output norm.
    synergies: Var,
}

impl Trunk {
    fn new<R: Rng + ?Sized>(
        p: &mut ParameterSet,
        cfg: &NetworkConfig,
        input: usize,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let d = cfg.d_model;
        let block = |p: &mut ParameterSet, name: &str, rng: &mut R| {
            AttentionBlock::new(p, name, d, cfg.heads, cfg.ff_hidden, cfg.activation, rng)
        };
        Ok(Self {
            encoder: Dense::new(p, "encoder", input, d, rng)?,
            intra: block(p, "intra", rng)?,
            inter: [block(p, "inter0", rng)?, block(p, "inter1", rng)?],
            out_norm: LayerNorm::new(p, "out_norm", d)?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph<'_>,
        set: SetId,
        x: Var,
        structure: &SynergyStructure,
        batch: usize,
    ) -> Result<TrunkOutput, PolicyError> {
        let k = structure.num_actuators();
        let l = structure.num_synergies();
        let h = self.encoder.forward(g, set, x)?;
        let pre_pool = self.intra.forward(g, set, h, k, structure.mask_flat())?;
        let pooled = g.group_mean_pool(pre_pool, &pool_labels(structure, batch), batch * l)?;
        let all = full_mask(l);
        let mut z = pooled;
        for block in &self.inter {
            z = block.forward(g, set, z, l, &all)?;
        }
        let synergies = self.out_norm.forward(g, set, z)?;
        Ok(TrunkOutput { pre_pool, pooled, synergies })
    }
}

/// The synergy-aware actor.
#[derive(Clone, Debug)]
pub struct SolarActor {
    trunk: Trunk,
    head: Dense,
    pool: ParamId,
    relation_in: Dense,
    relation_out: Dense,
    max_actuators: usize,
}

impl SolarActor {
    pub fn new<R: Rng + ?Sized>(
        p: &mut ParameterSet,
        cfg: &NetworkConfig,
        max_actuators: usize,
        obs_dim: usize,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let trunk = Trunk::new(p, cfg, obs_dim, rng)?;
        let head = Dense::with_bound(p, "head", cfg.d_model, 1, 3e-3, rng)?;
        let pool = p.add("embedding_pool", Tensor::randn(max_actuators, cfg.embed_size, 1.0, rng))?;
        let relation_in = Dense::new(p, "relation_in", cfg.embed_size, cfg.relation_hidden, rng)?;
        let relation_out = Dense::new(p, "relation_out", cfg.relation_hidden, cfg.relation_out, rng)?;
        Ok(Self { trunk, head, pool, relation_in, relation_out, max_actuators })
    }

    pub fn max_actuators(&self) -> usize {
        self.max_actuators
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        set: SetId,
        states: Var,
        view: &RobotView<'_>,
        batch: usize,
    ) -> Result<ActorOutput, PolicyError> {
        let k = view.check(g.value(states).rows(), batch, self.max_actuators)?;
        let l = view.structure.num_synergies();
        let trunk = self.trunk.forward(g, set, states, view.structure, batch)?;
        let raw = self.head.forward(g, set, trunk.synergies)?;
        let synergy_actions = g.tanh(raw);
        let t = self.transformation(g, set, view.triples, view.structure)?;
        let per_sample = g.reshape(synergy_actions, batch, l)?;
        let tt = g.transpose(t);
        let actions = g.matmul(per_sample, tt)?;
        let actions = g.reshape(actions, batch * k, 1)?;
        Ok(ActorOutput {
            actions,
            synergy_actions: Some(synergy_actions),
            transformation: Some(t),
            pre_pool: Some(trunk.pre_pool),
            pooled: Some(trunk.pooled),
        })
    }

    /// Per-actuator representations `[K × 3·relation_out]`: each traversal
    /// rank picks a pool embedding, the relation network maps it, and the
    /// three results are concatenated.
    pub fn representations(
        &self,
        g: &mut Graph<'_>,
        set: SetId,
        triples: &[TraversalTriple],
    ) -> Result<Var, PolicyError> {
        if let Some(rank) = triples.iter().flat_map(|t| t.as_array()).find(|&r| r >= self.max_actuators) {
            return Err(PolicyError::TripleOutOfRange { rank, pool: self.max_actuators });
        }
        let pool = g.param(set, self.pool);
        let mut parts = Vec::with_capacity(3);
        for slot in 0..3 {
            let idx: Vec<usize> = triples.iter().map(|t| t.as_array()[slot]).collect();
            let e = g.gather_rows(pool, &idx)?;
            let h = self.relation_in.forward(g, set, e)?;
            let h = g.tanh(h);
            parts.push(self.relation_out.forward(g, set, h)?);
        }
        let rep = g.concat_cols(parts[0], parts[1])?;
        Ok(g.concat_cols(rep, parts[2])?)
    }

    /// `T = bound(H·P)` with `H = rep·repᵀ` and `P` the synergy column
    /// average. The bound divides by the largest row L1 norm when it
    /// exceeds one, which keeps `T·a` inside `[-1, 1]` for any synergy
    /// action in `[-1, 1]` without leaving the column space of `H·P`.
    pub fn transformation(
        &self,
        g: &mut Graph<'_>,
        set: SetId,
        triples: &[TraversalTriple],
        structure: &SynergyStructure,
    ) -> Result<Var, PolicyError> {
        let rep = self.representations(g, set, triples)?;
        let rep_t = g.transpose(rep);
        let h = g.matmul(rep, rep_t)?;
        let p = g.constant(column_average(structure));
        let t = g.matmul(h, p)?;
        Ok(g.row_l1_bound(t))
    }

    /// Materialized `T` for a robot.
    pub fn transformation_matrix(
        &self,
        params: &ParameterSet,
        triples: &[TraversalTriple],
        structure: &SynergyStructure,
    ) -> Result<Tensor, PolicyError> {
        let mut g = Graph::new();
        let set = g.bind_frozen(params);
        let t = self.transformation(&mut g, set, triples, structure)?;
        Ok(g.value(t).clone())
    }

    /// Materialized `H` for a robot.
    pub fn relation_matrix(&self, params: &ParameterSet, triples: &[TraversalTriple]) -> Result<Tensor, PolicyError> {
        let mut g = Graph::new();
        let set = g.bind_frozen(params);
        let rep = self.representations(&mut g, set, triples)?;
        Ok(g.value(rep).matmul(&g.value(rep).transpose()))
    }

    pub fn pool_id(&self) -> ParamId {
        self.pool
    }
}

/// Twin-able critic on the same trunk with `(state ‖ action)` inputs.
#[derive(Clone, Debug)]
pub struct SolarCritic {
    trunk: Trunk,
    hidden: Dense,
    head: Dense,
    max_actuators: usize,
    activation: crate::numerics::Activation,
}

impl SolarCritic {
    pub fn new<R: Rng + ?Sized>(
        p: &mut ParameterSet,
        cfg: &NetworkConfig,
        max_actuators: usize,
        obs_dim: usize,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        Ok(Self {
            trunk: Trunk::new(p, cfg, obs_dim + 1, rng)?,
            hidden: Dense::new(p, "q_hidden", cfg.d_model, cfg.critic_hidden, rng)?,
            head: Dense::new(p, "q_head", cfg.critic_hidden, 1, rng)?,
            max_actuators,
            activation: cfg.activation,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        set: SetId,
        states: Var,
        actions: Var,
        view: &RobotView<'_>,
        batch: usize,
    ) -> Result<Var, PolicyError> {
        view.check(g.value(states).rows(), batch, self.max_actuators)?;
        let l = view.structure.num_synergies();
        let x = g.concat_cols(states, actions)?;
        let trunk = self.trunk.forward(g, set, x, view.structure, batch)?;
        let pooled = g.group_mean_pool(trunk.synergies, &sample_labels(batch, l), batch)?;
        let h = self.hidden.forward(g, set, pooled)?;
        let h = self.activation.apply(g, h);
        Ok(self.head.forward(g, set, h)?)
    }

    pub(super) fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }
}
