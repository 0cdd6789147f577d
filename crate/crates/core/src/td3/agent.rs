use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Td3Config, Td3Error, Transition};
use crate::numerics::{Adam, AdamConfig, Graph, NumericsError, ParameterSet, Tensor};
use crate::policy::{Actor, Critic, NetworkConfig, PolicyError, PolicyMode, RobotView};
use crate::synergy::{estimate_delta_q, stack_states};

/// Losses of one gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    /// Present on delayed steps that updated the actor.
    pub actor_loss: Option<f64>,
}

/// Actor, twin critics, their targets and optimizers.
#[derive(Clone, Debug)]
pub struct Agent {
    pub mode: PolicyMode,
    pub network: NetworkConfig,
    pub obs_dim: usize,
    pub config: Td3Config,
    pub actor: Actor,
    pub critic: Critic,
    pub actor_params: ParameterSet,
    pub actor_target: ParameterSet,
    pub critic_params: [ParameterSet; 2],
    pub critic_targets: [ParameterSet; 2],
    actor_opt: Adam,
    critic_opt: [Adam; 2],
    /// Critic updates performed so far.
    pub updates: u64,
}

/// `y = r + γ·(1 − done)·min(q1, q2)` per sample.
pub fn td_targets(batch: &[&Transition], q1: &[f64], q2: &[f64], gamma: f64) -> Vec<f64> {
    batch
        .iter()
        .zip(q1.iter().zip(q2))
        .map(|(t, (a, b))| {
            let bootstrap = if t.done { 0.0 } else { gamma * a.min(*b) };
            t.reward + bootstrap
        })
        .collect()
}

/// Target policy smoothing: clipped Gaussian noise per actuator, then
/// clamped into the action bounds.
pub fn smoothed_actions<R: Rng + ?Sized>(actions: &[f64], sigma: f64, clip: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return actions.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    actions.iter().map(|a| (a + normal.sample(rng).clamp(-clip, clip)).clamp(-1.0, 1.0)).collect()
}

fn stack(batch: &[&Transition], next: bool) -> Tensor {
    let k = batch[0].actions.len();
    let ds = batch[0].states.len() / k;
    let mut data = Vec::with_capacity(batch.len() * k * ds);
    for t in batch {
        data.extend_from_slice(if next { &t.next_states } else { &t.states });
    }
    Tensor::from_vec(batch.len() * k, ds, data)
}

fn stack_actions(batch: &[&Transition]) -> Tensor {
    let data: Vec<f64> = batch.iter().flat_map(|t| t.actions.iter().copied()).collect();
    Tensor::from_vec(data.len(), 1, data)
}

fn check_batch(batch: &[&Transition]) -> Result<(), Td3Error> {
    let first = batch.first().ok_or(Td3Error::EmptyBatch)?;
    if batch.iter().any(|t| t.robot != first.robot) {
        return Err(Td3Error::MixedRobots);
    }
    Ok(())
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        mode: PolicyMode,
        network: NetworkConfig,
        config: Td3Config,
        max_actuators: usize,
        obs_dim: usize,
        rng: &mut R,
    ) -> Result<Self, Td3Error> {
        let (actor, actor_params) = Actor::build(mode, &network, max_actuators, obs_dim, rng)?;
        let (critic, c1) = Critic::build(mode, &network, max_actuators, obs_dim, rng)?;
        let (_, c2) = Critic::build(mode, &network, max_actuators, obs_dim, rng)?;
        let adam = |lr: f64| AdamConfig { lr, clip_norm: config.grad_clip, ..AdamConfig::default() };
        Ok(Self {
            actor_opt: Adam::new(&actor_params, adam(config.actor_lr)),
            critic_opt: [Adam::new(&c1, adam(config.critic_lr)), Adam::new(&c2, adam(config.critic_lr))],
            actor_target: actor_params.snapshot(),
            critic_targets: [c1.snapshot(), c2.snapshot()],
            critic_params: [c1, c2],
            actor_params,
            actor,
            critic,
            mode,
            network,
            obs_dim,
            config,
            updates: 0,
        })
    }

    pub fn max_actuators(&self) -> usize {
        self.actor.max_actuators()
    }

    /// Deterministic actions for `[B·K × d_s]` states.
    pub fn act(&self, states: &Tensor, view: &RobotView<'_>, batch: usize) -> Result<Vec<f64>, Td3Error> {
        Ok(self.actor.act(&self.actor_params, states, view, batch)?)
    }

    /// TD targets with target policy smoothing.
    pub fn compute_targets<R: Rng + ?Sized>(
        &self,
        batch: &[&Transition],
        view: &RobotView<'_>,
        rng: &mut R,
    ) -> Result<Vec<f64>, Td3Error> {
        check_batch(batch)?;
        let b = batch.len();
        let next = stack(batch, true);
        let mu = self.actor.act(&self.actor_target, &next, view, b)?;
        let noisy = smoothed_actions(&mu, self.config.target_noise, self.config.noise_clip, rng);
        let a = Tensor::from_vec(noisy.len(), 1, noisy);
        let mut g = Graph::new();
        let s = g.constant(next);
        let a = g.constant(a);
        let mut q = Vec::with_capacity(2);
        for p in &self.critic_targets {
            let set = g.bind_frozen(p);
            q.push(self.critic.forward(&mut g, set, s, a, view, b)?);
        }
        let (q1, q2) = (g.value(q[0]).data(), g.value(q[1]).data());
        Ok(td_targets(batch, q1, q2, self.config.gamma))
    }

    /// One regression step of both critics toward fixed targets.
    pub fn update_critics(
        &mut self,
        batch: &[&Transition],
        targets: &[f64],
        view: &RobotView<'_>,
    ) -> Result<f64, Td3Error> {
        check_batch(batch)?;
        let b = batch.len();
        let states = stack(batch, false);
        let actions = stack_actions(batch);
        let mut losses = [0.0; 2];
        let mut all_grads = Vec::with_capacity(2);
        {
            let mut g = Graph::new();
            let s = g.constant(states);
            let a = g.constant(actions);
            let sets = [g.bind(&self.critic_params[0]), g.bind(&self.critic_params[1])];
            let mut total = None;
            for (i, &set) in sets.iter().enumerate() {
                let q = self.critic.forward(&mut g, set, s, a, view, b)?;
                let l = g.mse(q, targets)?;
                losses[i] = g.value(l).item();
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let grads = g.backward(total.expect("two critics"))?;
            for set in sets {
                all_grads.push(grads.for_set(set).to_vec());
            }
        }
        for (i, grads) in all_grads.iter().enumerate() {
            self.critic_opt[i].step(&mut self.critic_params[i], grads)?;
        }
        Ok(0.5 * (losses[0] + losses[1]))
    }

    /// One actor step maximizing the smaller of the twin Q values.
    pub fn update_actor(&mut self, batch: &[&Transition], view: &RobotView<'_>) -> Result<f64, Td3Error> {
        check_batch(batch)?;
        let b = batch.len();
        let states = stack(batch, false);
        let (loss, grads) = {
            let mut g = Graph::new();
            let aset = g.bind(&self.actor_params);
            let c1 = g.bind_frozen(&self.critic_params[0]);
            let c2 = g.bind_frozen(&self.critic_params[1]);
            let s = g.constant(states);
            let out = self.actor.forward(&mut g, aset, s, view, b)?;
            let q1 = self.critic.forward(&mut g, c1, s, out.actions, view, b)?;
            let q2 = self.critic.forward(&mut g, c2, s, out.actions, view, b)?;
            let q = g.minimum(q1, q2)?;
            let m = g.mean(q);
            let loss = g.scale(m, -1.0);
            let l = g.value(loss).item();
            (l, g.backward(loss)?.into_set(aset))
        };
        self.actor_opt.step(&mut self.actor_params, &grads)?;
        Ok(loss)
    }

    /// Moves every target toward its online network.
    pub fn update_targets(&mut self) {
        let tau = self.config.tau;
        self.actor_target.polyak_from(&self.actor_params, tau);
        for i in 0..2 {
            self.critic_targets[i].polyak_from(&self.critic_params[i], tau);
        }
    }

    /// Critic step every call; actor and target steps every
    /// `policy_delay` calls.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[&Transition],
        view: &RobotView<'_>,
        rng: &mut R,
    ) -> Result<UpdateMetrics, Td3Error> {
        let targets = self.compute_targets(batch, view, rng)?;
        let critic_loss = self.update_critics(batch, &targets, view)?;
        self.updates += 1;
        let mut actor_loss = None;
        if self.updates.is_multiple_of(self.config.policy_delay) {
            actor_loss = Some(self.update_actor(batch, view)?);
            self.update_targets();
        }
        Ok(UpdateMetrics { critic_loss, actor_loss })
    }

    /// Per-actuator influence under the current actor, using the smaller
    /// online critic.
    pub fn delta_q(
        &self,
        batch: &[&Transition],
        view: &RobotView<'_>,
        default_action: f64,
    ) -> Result<Vec<f64>, Td3Error> {
        check_batch(batch)?;
        let b = batch.len();
        let states = stack_states(batch);
        let mu = self.act(&states, view, b)?;
        let actions = Tensor::from_vec(mu.len(), 1, mu);
        let twins = [&self.critic_params[0], &self.critic_params[1]];
        let dq = estimate_delta_q(batch, &actions, default_action, |s, a| {
            self.critic.min_q(twins, s, a, view, b).map_err(|e| match e {
                PolicyError::Numerics(n) => n,
                other => NumericsError::ShapeMismatch { op: "critic", detail: other.to_string() },
            })
        })?;
        Ok(dq)
    }
}
