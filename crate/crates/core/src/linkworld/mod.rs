//! Deterministic planar link-chain locomotion.
//!
//! Links hang from a torso in the sagittal plane; angles are measured from
//! straight down. Each joint is a damped, spring-centred rotor driven by its
//! own torque. The body stands on its lowest point, and link tips close to
//! the ground push it forward when they sweep backwards (anisotropic
//! friction, weaker when they sweep forwards). There is no contact solver
//! and no reaction torque on the joints.
//!
//! Per-actuator observation layout (`OBS_DIM` = 9):
//!
//! | index | content                                    |
//! |-------|--------------------------------------------|
//! | 0     | joint angle / joint limit                  |
//! | 1     | joint velocity / `velocity_scale`          |
//! | 2, 3  | sin, cos of the joint angle                |
//! | 4, 5  | link length, link mass                     |
//! | 6, 7  | rest-pose midpoint relative to the torso   |
//! | 8     | torso forward velocity                     |
//!
//! Slot `k` depends only on joint `k` and the torso velocity.

mod family;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use family::{make_variants, Family, FamilySpec, LinkSpec, Removal, Variant};

pub const OBS_DIM: usize = 9;

#[derive(Debug, thiserror::Error)]
pub enum LinkworldError {
    #[error("link {index}: {reason}")]
    InvalidLink { index: usize, reason: String },
    #[error("variant {variant} is not a connected tree: {reason}")]
    DisconnectedVariant { variant: String, reason: String },
    #[error("unknown variant {0}")]
    UnknownVariant(String),
    #[error("variant {0} is in both train and test splits")]
    SplitOverlap(String),
    #[error("family file {0}")]
    Family(String),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("non-finite action at actuator {0}")]
    NonFiniteAction(usize),
    #[error("state diverged at step {0}")]
    Diverged(usize),
    #[error("invalid physics parameter: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub dt: f64,
    pub substeps: usize,
    pub max_steps: usize,
    /// Weight of the squared action norm in the reward.
    pub action_cost: f64,
    /// Largest joint-angle perturbation at reset, radians.
    pub reset_noise: f64,
    pub max_torque: f64,
    pub joint_damping: f64,
    pub joint_stiffness: f64,
    /// Fraction of joint velocity kept (and reversed) at a joint limit.
    pub restitution: f64,
    pub thrust_gain: f64,
    /// Friction ratio of forward to backward sweeps.
    pub backslip: f64,
    /// Contact decay height as a fraction of the rest height.
    pub contact_scale: f64,
    pub torso_mass: f64,
    pub body_drag: f64,
    /// Episode ends when the mean link elevation drops below this fraction
    /// of its rest value.
    pub fall_fraction: f64,
    pub velocity_scale: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            substeps: 4,
            max_steps: 1000,
            action_cost: 0.01,
            reset_noise: 0.05,
            max_torque: 1.0,
            joint_damping: 0.15,
            joint_stiffness: 0.1,
            restitution: 0.8,
            thrust_gain: 2.0,
            backslip: 0.8,
            contact_scale: 0.15,
            torso_mass: 1.0,
            body_drag: 1.0,
            fall_fraction: 0.3,
            velocity_scale: 10.0,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<(), LinkworldError> {
        let positive = [
            ("dt", self.dt),
            ("max_torque", self.max_torque),
            ("contact_scale", self.contact_scale),
            ("torso_mass", self.torso_mass),
            ("velocity_scale", self.velocity_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LinkworldError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("action_cost", self.action_cost),
            ("reset_noise", self.reset_noise),
            ("joint_damping", self.joint_damping),
            ("joint_stiffness", self.joint_stiffness),
            ("thrust_gain", self.thrust_gain),
            ("backslip", self.backslip),
            ("body_drag", self.body_drag),
            ("fall_fraction", self.fall_fraction),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LinkworldError::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(LinkworldError::InvalidConfig("restitution must lie in [0, 1]".into()));
        }
        if self.substeps == 0 || self.max_steps == 0 {
            return Err(LinkworldError::InvalidConfig("substeps and max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    /// Torso forward position.
    pub x: f64,
    /// Torso height above the ground.
    pub z: f64,
    /// Torso forward velocity.
    pub vx: f64,
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Mean torso velocity over the step.
    pub vx: f64,
    /// The robot fell.
    pub terminated: bool,
    /// The step limit was reached.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Anything the trainer can roll out: per-actuator observations in,
/// per-actuator actions out.
pub trait Environment {
    fn num_actuators(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Resets and returns the first `K × obs_dim` observation.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, actions: &[f64]) -> Result<StepOutcome, LinkworldError>;
}

struct Kinematics {
    height: f64,
    tip_z: Vec<f64>,
    mid_z: Vec<f64>,
    tip_xdot: Vec<f64>,
}

/// One robot in the toy world.
#[derive(Clone, Debug)]
pub struct LinkWorld {
    links: Vec<LinkSpec>,
    parents: Vec<Option<usize>>,
    attach_x: Vec<f64>,
    cfg: PhysicsConfig,
    inertia: Vec<f64>,
    total_mass: f64,
    rest_height: f64,
    rest_elevation: f64,
    rest_mid: Vec<(f64, f64)>,
    state: EnvState,
}

impl LinkWorld {
    pub fn new(variant: &Variant, cfg: PhysicsConfig) -> Result<Self, LinkworldError> {
        cfg.validate()?;
        let links = variant.links.clone();
        let k = links.len();
        let parents: Vec<Option<usize>> = links.iter().map(|l| (l.parent >= 0).then_some(l.parent as usize)).collect();
        for (i, p) in parents.iter().enumerate() {
            if matches!(p, Some(p) if *p >= i) {
                return Err(LinkworldError::InvalidLink { index: i, reason: "parents must precede children".into() });
            }
        }
        // Torso-attached limbs are spread evenly along a unit torso.
        let roots: Vec<usize> = (0..k).filter(|&i| parents[i].is_none()).collect();
        let mut attach_x = vec![0.0; k];
        for (n, &r) in roots.iter().enumerate() {
            attach_x[r] = if roots.len() > 1 { 0.5 - n as f64 / (roots.len() - 1) as f64 } else { 0.0 };
        }
        for i in 0..k {
            if let Some(p) = parents[i] {
                attach_x[i] = attach_x[p];
            }
        }
        let inertia = links.iter().map(|l| l.mass * l.length * l.length / 3.0 + 1e-3).collect();
        let total_mass = cfg.torso_mass + links.iter().map(|l| l.mass).sum::<f64>();
        let mut w = Self {
            links,
            parents,
            attach_x,
            cfg,
            inertia,
            total_mass,
            rest_height: 0.0,
            rest_elevation: 0.0,
            rest_mid: Vec::new(),
            state: EnvState { x: 0.0, z: 0.0, vx: 0.0, theta: vec![0.0; k], omega: vec![0.0; k], t: 0 },
        };
        let kin = w.kinematics(&w.state);
        w.rest_height = kin.height;
        w.rest_elevation = mean(&kin.mid_z);
        w.rest_mid = w.rest_midpoints();
        w.state.z = kin.height;
        if w.rest_height <= 0.0 {
            return Err(LinkworldError::InvalidLink {
                index: 0,
                reason: "rest pose must lift the torso off the ground".into(),
            });
        }
        Ok(w)
    }

    pub fn config(&self) -> &PhysicsConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Replaces the state; angles are clamped into their limits.
    pub fn set_state(&mut self, mut s: EnvState) {
        for (th, l) in s.theta.iter_mut().zip(&self.links) {
            *th = th.clamp(-l.joint_limit, l.joint_limit);
        }
        s.z = self.kinematics(&s).height;
        self.state = s;
    }

    pub fn rest_height(&self) -> f64 {
        self.rest_height
    }

    /// Mean elevation of link midpoints above the ground.
    pub fn height_proxy(&self) -> f64 {
        mean(&self.kinematics(&self.state).mid_z)
    }

    /// Joint kinetic energy plus torso kinetic energy.
    pub fn energy(&self) -> f64 {
        let joints: f64 = self.inertia.iter().zip(&self.state.omega).map(|(i, w)| 0.5 * i * w * w).sum();
        joints + 0.5 * self.total_mass * self.state.vx * self.state.vx
    }

    pub fn reset_state(&mut self, seed: u64) -> &EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = self.cfg.reset_noise;
        let theta = self
            .links
            .iter()
            .map(|l| {
                let v = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                v.clamp(-l.joint_limit, l.joint_limit)
            })
            .collect();
        let k = self.links.len();
        self.set_state(EnvState { x: 0.0, z: 0.0, vx: 0.0, theta, omega: vec![0.0; k], t: 0 });
        &self.state
    }

    pub fn observe(&self) -> Vec<f64> {
        let s = &self.state;
        let mut out = Vec::with_capacity(self.links.len() * OBS_DIM);
        for (k, l) in self.links.iter().enumerate() {
            let th = s.theta[k];
            out.extend_from_slice(&[
                th / l.joint_limit,
                s.omega[k] / self.cfg.velocity_scale,
                th.sin(),
                th.cos(),
                l.length,
                l.mass,
                self.rest_mid[k].0,
                self.rest_mid[k].1,
                s.vx,
            ]);
        }
        out
    }

    /// Advances one control step (`substeps` integrator steps).
    pub fn advance(&mut self, actions: &[f64]) -> Result<StepOutcome, LinkworldError> {
        let k = self.links.len();
        if actions.len() != k {
            return Err(LinkworldError::ActionCount { expected: k, got: actions.len() });
        }
        if let Some(i) = actions.iter().position(|a| !a.is_finite()) {
            return Err(LinkworldError::NonFiniteAction(i));
        }
        let cfg = self.cfg;
        let x0 = self.state.x;
        let mut s = self.state.clone();
        for _ in 0..cfg.substeps {
            let kin = self.kinematics(&s);
            let thrust = self.thrust(&kin, s.vx);
            for j in 0..k {
                let a = actions[j].clamp(-1.0, 1.0);
                let torque = cfg.max_torque * a - cfg.joint_damping * s.omega[j] - cfg.joint_stiffness * s.theta[j];
                s.omega[j] += cfg.dt * torque / self.inertia[j];
                s.theta[j] += cfg.dt * s.omega[j];
                let lim = self.links[j].joint_limit;
                if s.theta[j] > lim {
                    s.theta[j] = lim;
                    s.omega[j] = -cfg.restitution * s.omega[j].max(0.0);
                } else if s.theta[j] < -lim {
                    s.theta[j] = -lim;
                    s.omega[j] = -cfg.restitution * s.omega[j].min(0.0);
                }
            }
            s.vx += cfg.dt * (thrust - cfg.body_drag * s.vx) / self.total_mass;
            s.x += cfg.dt * s.vx;
        }
        s.t += 1;
        let kin = self.kinematics(&s);
        s.z = kin.height;
        let finite = s.x.is_finite() && s.vx.is_finite() && s.theta.iter().chain(&s.omega).all(|v| v.is_finite());
        if !finite {
            return Err(LinkworldError::Diverged(s.t));
        }
        self.state = s;
        let vx = (self.state.x - x0) / (cfg.substeps as f64 * cfg.dt);
        let effort: f64 = actions.iter().map(|a| a.clamp(-1.0, 1.0).powi(2)).sum();
        let reward = vx - cfg.action_cost * effort;
        let terminated = mean(&kin.mid_z) < cfg.fall_fraction * self.rest_elevation;
        let truncated = self.state.t >= cfg.max_steps;
        Ok(StepOutcome { observation: self.observe(), reward, vx, terminated, truncated })
    }

    fn kinematics(&self, s: &EnvState) -> Kinematics {
        let k = self.links.len();
        let mut phi = vec![0.0; k];
        let mut phidot = vec![0.0; k];
        let mut base_z = vec![0.0; k];
        let mut tip_z = vec![0.0; k];
        let mut tip_xdot = vec![0.0; k];
        for i in 0..k {
            let l = &self.links[i];
            let (pphi, pdot, pz, pxd) = match self.parents[i] {
                Some(p) => (phi[p], phidot[p], tip_z[p], tip_xdot[p]),
                None => (0.0, 0.0, 0.0, 0.0),
            };
            phi[i] = pphi + l.rest_angle + s.theta[i];
            phidot[i] = pdot + s.omega[i];
            base_z[i] = pz;
            tip_z[i] = pz - l.length * phi[i].cos();
            tip_xdot[i] = pxd + l.length * phi[i].cos() * phidot[i];
        }
        let lowest = tip_z.iter().copied().fold(0.0, f64::min);
        let height = -lowest;
        let mid_z = (0..k).map(|i| height + 0.5 * (base_z[i] + tip_z[i])).collect();
        let tip_z = tip_z.iter().map(|z| height + z).collect();
        Kinematics { height, tip_z, mid_z, tip_xdot }
    }

    fn thrust(&self, kin: &Kinematics, vx: f64) -> f64 {
        let h = self.cfg.contact_scale * self.rest_height;
        let mut f = 0.0;
        for i in 0..self.links.len() {
            let contact = (-kin.tip_z[i] / h).exp();
            let slip = vx + kin.tip_xdot[i];
            let push = (-slip).max(0.0) - self.cfg.backslip * slip.max(0.0);
            f += self.cfg.thrust_gain * contact * push;
        }
        f
    }

    fn rest_midpoints(&self) -> Vec<(f64, f64)> {
        let k = self.links.len();
        let mut phi = vec![0.0; k];
        let mut base = vec![(0.0, 0.0); k];
        let mut tip = vec![(0.0, 0.0); k];
        let mut mid = vec![(0.0, 0.0); k];
        for i in 0..k {
            let l = &self.links[i];
            let (pphi, p) = match self.parents[i] {
                Some(p) => (phi[p], tip[p]),
                None => (0.0, (self.attach_x[i], 0.0)),
            };
            phi[i] = pphi + l.rest_angle;
            base[i] = p;
            tip[i] = (p.0 + l.length * phi[i].sin(), p.1 - l.length * phi[i].cos());
            mid[i] = (0.5 * (base[i].0 + tip[i].0), 0.5 * (base[i].1 + tip[i].1));
        }
        mid
    }
}

impl Environment for LinkWorld {
    fn num_actuators(&self) -> usize {
        self.links.len()
    }

    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.reset_state(seed);
        self.observe()
    }

    fn step(&mut self, actions: &[f64]) -> Result<StepOutcome, LinkworldError> {
        self.advance(actions)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walker() -> Variant {
        let leg =
            |parent: i64, rest: f64| LinkSpec { length: 0.4, mass: 0.5, joint_limit: 1.0, parent, rest_angle: rest };
        let links = vec![leg(-1, 0.0), leg(0, 0.0), leg(-1, 0.0), leg(2, 0.0)];
        make_variants(&links, &[Removal { name: "w".into(), remove: vec![] }], OBS_DIM).unwrap().remove(0)
    }

    #[test]
    fn rest_is_an_equilibrium() {
        let mut w = LinkWorld::new(&walker(), PhysicsConfig::default()).unwrap();
        let before = w.state().clone();
        let out = w.advance(&[0.0; 4]).unwrap();
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.vx, 0.0);
        let after = w.state();
        assert_eq!(after.theta, before.theta);
        assert_eq!(after.omega, before.omega);
        assert_eq!(after.t, 1);
    }

    #[test]
    fn without_thrust_the_reward_is_the_penalty() {
        let cfg = PhysicsConfig { thrust_gain: 0.0, ..PhysicsConfig::default() };
        let mut w = LinkWorld::new(&walker(), cfg).unwrap();
        let a = [0.5, -0.3, 1.0, 0.0];
        let out = w.advance(&a).unwrap();
        let penalty: f64 = a.iter().map(|v| v * v).sum::<f64>() * 0.01;
        assert_eq!(out.reward, -penalty);
    }

    #[test]
    fn reset_is_seeded_and_bounded() {
        let mut w = LinkWorld::new(&walker(), PhysicsConfig::default()).unwrap();
        let a = w.reset(7);
        let b = w.reset(7);
        let c = w.reset(8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(w.state().theta.iter().all(|t| t.abs() <= 0.05));
    }

    #[test]
    fn rejects_bad_actions() {
        let mut w = LinkWorld::new(&walker(), PhysicsConfig::default()).unwrap();
        assert!(matches!(w.advance(&[0.0; 3]), Err(LinkworldError::ActionCount { .. })));
        assert!(matches!(w.advance(&[0.0, f64::NAN, 0.0, 0.0]), Err(LinkworldError::NonFiniteAction(1))));
    }

    #[test]
    fn rhythmic_sweeping_moves_forward() {
        let mut w = LinkWorld::new(&walker(), PhysicsConfig::default()).unwrap();
        w.reset(0);
        let mut ret = 0.0;
        for _ in 0..300 {
            // Drive fast backward sweeps, slow recoveries.
            let a: Vec<f64> = w.state().omega.iter().map(|&om| if om <= 0.0 { -1.0 } else { 0.3 }).collect();
            ret += w.advance(&a).unwrap().reward;
        }
        assert!(ret > 0.0, "return {ret}");
    }
}
