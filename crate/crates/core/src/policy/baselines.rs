//! Ablation and baseline networks. Both see normalized traversal ranks
//! appended to every actuator observation.

use rand::Rng;

use super::{sample_labels, triple_features, ActorOutput, NetworkConfig, PolicyError, RobotView};
use crate::numerics::{
    full_mask, Activation, AttentionBlock, Dense, Graph, LayerNorm, ParamId, ParameterSet, SetId, Tensor, Var,
};

/// Three per-actuator attention blocks; the first uses the synergy mask.
#[derive(Clone, Debug)]
struct MaskedStack {
    encoder: Dense,
    blocks: [AttentionBlock; 3],
    out_norm: LayerNorm,
}

impl MaskedStack {
    fn new<R: Rng + ?Sized>(
        p: &mut ParameterSet,
        cfg: &NetworkConfig,
        input: usize,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let d = cfg.d_model;
        let mut block = |name: &str| AttentionBlock::new(p, name, d, cfg.heads, cfg.ff_hidden, cfg.activation, rng);
        let blocks = [block("block0")?, block("block1")?, block("block2")?];
        Ok(Self {
            encoder: Dense::new(p, "encoder", input, d, rng)?,
            blocks,
            out_norm: LayerNorm::new(p, "out_norm", d)?,
        })
    }

    /// Returns (first-block features, final normalized features).
    fn forward(&self, g: &mut Graph<'_>, set: SetId, x: Var, view: &RobotView<'_>) -> Result<(Var, Var), PolicyError> {
        let k = view.num_actuators();
        let h = self.encoder.forward(g, set, x)?;
        let first = self.blocks[0].forward(g, set, h, k, view.structure.mask_flat())?;
        let all = full_mask(k);
        let mut z = first;
        for b in &self.blocks[1..] {
            z = b.forward(g, set, z, k, &all)?;
        }
        Ok((first, self.out_norm.forward(g, set, z)?))
    }
}

fn with_triples(g: &mut Graph<'_>, states: Var, view: &RobotView<'_>, batch: usize) -> Result<Var, PolicyError> {
    let tf = g.constant(triple_features(view.triples, batch));
    Ok(g.concat_cols(states, tf)?)
}

/// Per-actuator transformer whose first layer is synergy-masked; each
/// actuator's action is read from its own token.
#[derive(Clone, Debug)]
pub struct MaskOnlyActor {
    stack: MaskedStack,
    head: Dense,
    max_actuators: usize,
}

impl MaskOnlyActor {
    pub fn new<R: Rng + ?Sized>(
        p: &mut ParameterSet,
        cfg: &NetworkConfig,
        max_actuators: usize,
        obs_dim: usize,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        Ok(Self {
            stack: MaskedStack::new(p, cfg, obs_dim + 3, rng)?,
            head: Dense::with_bound(p, "head", cfg.d_model, 1, 3e-3, rng)?,
            max_actuators,
        })
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
        view.check(g.value(states).rows(), batch, self.max_actuators)?;
        let x = with_triples(g, states, view, batch)?;
        let (first, z) = self.stack.forward(g, set, x, view)?;
        let raw = self.head.forward(g, set, z)?;
        Ok(ActorOutput {
            actions: g.tanh(raw),
            synergy_actions: None,
            transformation: None,
            pre_pool: Some(first),
            pooled: None,
        })
    }
}

/// Critic counterpart of [`MaskOnlyActor`], mean-pooled over actuators.
#[derive(Clone, Debug)]
pub struct MaskOnlyCritic {
    stack: MaskedStack,
    hidden: Dense,
    head: Dense,
    activation: Activation,
    max_actuators: usize,
}

impl MaskOnlyCritic {
    pub fn new<R: Rng + ?Sized>(
        p: &mut ParameterSet,
        cfg: &NetworkConfig,
        max_actuators: usize,
        obs_dim: usize,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        Ok(Self {
            stack: MaskedStack::new(p, cfg, obs_dim + 4, rng)?,
            hidden: Dense::new(p, "q_hidden", cfg.d_model, cfg.critic_hidden, rng)?,
            head: Dense::new(p, "q_head", cfg.critic_hidden, 1, rng)?,
            activation: cfg.activation,
            max_actuators,
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
        let k = view.check(g.value(states).rows(), batch, self.max_actuators)?;
        let x = with_triples(g, states, view, batch)?;
        let x = g.concat_cols(x, actions)?;
        let (_, z) = self.stack.forward(g, set, x, view)?;
        let pooled = g.group_mean_pool(z, &sample_labels(batch, k), batch)?;
        let h = self.hidden.forward(g, set, pooled)?;
        let h = self.activation.apply(g, h);
        Ok(self.head.forward(g, set, h)?)
    }

    pub(super) fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }
}

/// ReLU MLP layers.
#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    fn new<R: Rng + ?Sized>(
        p: &mut ParameterSet,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        out_bound: Option<f64>,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Dense::new(p, &format!("{name}{i}"), width, h, rng)?);
            width = h;
        }
        let last = format!("{name}{}", hidden.len());
        layers.push(match out_bound {
            Some(b) => Dense::with_bound(p, &last, width, output, b, rng)?,
            None => Dense::new(p, &last, width, output, rng)?,
        });
        Ok(Self { layers })
    }

    fn forward(&self, g: &mut Graph<'_>, set: SetId, mut x: Var) -> Result<Var, PolicyError> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, set, x)?;
            if i + 1 < n {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    fn last(&self) -> &Dense {
        self.layers.last().expect("at least one layer")
    }
}

/// Flattens `[B·K × f]` rows into `[B × p·f]`, zero-padding missing
/// actuators.
fn flatten_padded(g: &mut Graph<'_>, x: Var, batch: usize, k: usize, p: usize) -> Result<Var, PolicyError> {
    let f = g.value(x).cols();
    let flat = g.reshape(x, batch, k * f)?;
    if k == p {
        return Ok(flat);
    }
    let pad = g.constant(Tensor::zeros(batch, (p - k) * f));
    Ok(g.concat_cols(flat, pad)?)
}

/// Monolithic actor: one MLP over the padded observation of the whole robot
/// with `p` tanh outputs, of which the first `K` drive the actuators.
#[derive(Clone, Debug)]
pub struct MlpActor {
    mlp: Mlp,
    max_actuators: usize,
}

impl MlpActor {
    pub fn new<R: Rng + ?Sized>(
        p: &mut ParameterSet,
        cfg: &NetworkConfig,
        max_actuators: usize,
        obs_dim: usize,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let input = max_actuators * (obs_dim + 3);
        let mlp = Mlp::new(p, "pi", input, &cfg.mlp_hidden, max_actuators, Some(3e-3), rng)?;
        Ok(Self { mlp, max_actuators })
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
        let x = with_triples(g, states, view, batch)?;
        let x = flatten_padded(g, x, batch, k, self.max_actuators)?;
        let raw = self.mlp.forward(g, set, x)?;
        let raw = g.slice_cols(raw, 0, k)?;
        let a = g.tanh(raw);
        let actions = g.reshape(a, batch * k, 1)?;
        Ok(ActorOutput { actions, synergy_actions: None, transformation: None, pre_pool: None, pooled: None })
    }
}

/// Monolithic critic over padded observations and padded actions.
#[derive(Clone, Debug)]
pub struct MlpCritic {
    mlp: Mlp,
    max_actuators: usize,
}

impl MlpCritic {
    pub fn new<R: Rng + ?Sized>(
        p: &mut ParameterSet,
        cfg: &NetworkConfig,
        max_actuators: usize,
        obs_dim: usize,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let input = max_actuators * (obs_dim + 4);
        let mlp = Mlp::new(p, "q", input, &cfg.mlp_hidden, 1, None, rng)?;
        Ok(Self { mlp, max_actuators })
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
        let k = view.check(g.value(states).rows(), batch, self.max_actuators)?;
        let x = with_triples(g, states, view, batch)?;
        let x = g.concat_cols(x, actions)?;
        let x = flatten_padded(g, x, batch, k, self.max_actuators)?;
        self.mlp.forward(g, set, x)
    }

    pub(super) fn head_ids(&self) -> (ParamId, ParamId) {
        (self.mlp.last().w, self.mlp.last().b)
    }
}
