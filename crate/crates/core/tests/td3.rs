use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synergy_core::linkworld::{Environment, LinkworldError, StepOutcome};
use synergy_core::morphology::{traversal_triples, MorphologyGraph, TraversalTriple};
use synergy_core::numerics::ParameterSet;
use synergy_core::policy::{NetworkConfig, PolicyMode, RobotView};
use synergy_core::synergy::{SynergyConfig, SynergyManager, SynergyMode, SynergyStructure};
use synergy_core::td3::{
    run_episode, smoothed_actions, td_targets, Agent, RobotSlot, Td3Config, Trainer, TrainerConfig, Transition,
};

const OBS: usize = 2;

/// One-step task: reward is the negative squared distance of the actions
/// to a fixed target, and every episode terminates after one step.
#[derive(Clone, Debug)]
struct Bandit {
    target: Vec<f64>,
    horizon: usize,
    t: usize,
}

impl Bandit {
    fn new(target: Vec<f64>, horizon: usize) -> Self {
        Self { target, horizon, t: 0 }
    }

    fn obs(&self) -> Vec<f64> {
        (0..self.target.len()).flat_map(|k| [1.0, k as f64]).collect()
    }
}

impl Environment for Bandit {
    fn num_actuators(&self) -> usize {
        self.target.len()
    }

    fn obs_dim(&self) -> usize {
        OBS
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, actions: &[f64]) -> Result<StepOutcome, LinkworldError> {
        self.t += 1;
        let reward = -actions.iter().zip(&self.target).map(|(a, c)| (a - c).powi(2)).sum::<f64>();
        Ok(StepOutcome {
            observation: self.obs(),
            reward,
            vx: 0.0,
            terminated: self.horizon == 1,
            truncated: self.t >= self.horizon,
        })
    }
}

fn small() -> NetworkConfig {
    NetworkConfig {
        d_model: 8,
        heads: 2,
        ff_hidden: 8,
        embed_size: 4,
        relation_hidden: 6,
        relation_out: 4,
        critic_hidden: 16,
        mlp_hidden: vec![32, 32],
        ..NetworkConfig::default()
    }
}

fn chain_triples(k: usize) -> (MorphologyGraph, Vec<TraversalTriple>) {
    let g = MorphologyGraph::new("b", OBS, (0..k).map(|i| i.checked_sub(1)).collect()).unwrap();
    let t = traversal_triples(&g);
    (g, t)
}

fn random_batch(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    (0..n)
        .map(|_| Transition {
            robot: 0,
            states: (0..k * OBS).map(|_| rng.random_range(-1.0..1.0)).collect(),
            actions: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            reward: rng.random_range(-1.0..1.0),
            next_states: (0..k * OBS).map(|_| rng.random_range(-1.0..1.0)).collect(),
            done: rng.random_bool(0.2),
        })
        .collect()
}

fn flat(p: &ParameterSet) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data().to_vec()).collect()
}

#[test]
fn targets_bootstrap_from_the_smaller_critic_unless_terminal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random_batch(2, 50, &mut rng);
    let refs: Vec<&Transition> = batch.iter().collect();
    let q1: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
    let q2: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
    let y = td_targets(&refs, &q1, &q2, 0.9);
    for i in 0..50 {
        let expected = if batch[i].done { batch[i].reward } else { batch[i].reward + 0.9 * q1[i].min(q2[i]) };
        assert_eq!(y[i], expected);
    }
}

#[test]
fn actor_and_targets_move_only_on_delayed_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = 3;
    let cfg = Td3Config { policy_delay: 3, grad_clip: None, ..Td3Config::default() };
    for mode in [PolicyMode::Solar, PolicyMode::Monolithic] {
        let mut agent = Agent::new(mode, small(), cfg.clone(), k, OBS, &mut rng).unwrap();
        let (_, t) = chain_triples(k);
        let s = SynergyStructure::singletons("b", k);
        let view = RobotView { structure: &s, triples: &t };
        let batch = random_batch(k, 16, &mut rng);
        let refs: Vec<&Transition> = batch.iter().collect();
        for step in 1..=7u64 {
            let actor = flat(&agent.actor_params);
            let actor_t = flat(&agent.actor_target);
            let critic = flat(&agent.critic_params[0]);
            let critic_t = flat(&agent.critic_targets[1]);
            let m = agent.train_step(&refs, &view, &mut rng).unwrap();
            let delayed = step % 3 == 0;
            assert_eq!(m.actor_loss.is_some(), delayed);
            assert_ne!(flat(&agent.critic_params[0]), critic);
            assert_eq!(flat(&agent.actor_params) != actor, delayed, "{mode:?} step {step}");
            assert_eq!(flat(&agent.actor_target) != actor_t, delayed);
            assert_eq!(flat(&agent.critic_targets[1]) != critic_t, delayed);
        }
        assert_eq!(agent.updates, 7);
    }
}

#[test]
fn targets_follow_online_networks_by_polyak_averaging() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = Td3Config { tau: 0.25, ..Td3Config::default() };
    let mut agent = Agent::new(PolicyMode::Monolithic, small(), cfg, 2, OBS, &mut rng).unwrap();
    for t in agent.actor_params.tensors_mut() {
        for v in t.data_mut() {
            *v += 1.0;
        }
    }
    let before = flat(&agent.actor_target);
    let online = flat(&agent.actor_params);
    agent.update_targets();
    for ((new, old), on) in flat(&agent.actor_target).iter().zip(&before).zip(&online) {
        assert!((new - (0.75 * old + 0.25 * on)).abs() < 1e-12);
    }
}

#[test]
fn critic_regression_reduces_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 3;
    let cfg = Td3Config { critic_lr: 1e-3, grad_clip: None, ..Td3Config::default() };
    for mode in [PolicyMode::Solar, PolicyMode::MaskOnly, PolicyMode::Monolithic] {
        let mut agent = Agent::new(mode, small(), cfg.clone(), k, OBS, &mut rng).unwrap();
        let (_, t) = chain_triples(k);
        let s = SynergyStructure::new("b", vec![0, 0, 1], vec![0, 2], 1, 0).unwrap();
        let view = RobotView { structure: &s, triples: &t };
        let batch = random_batch(k, 32, &mut rng);
        let refs: Vec<&Transition> = batch.iter().collect();
        let targets: Vec<f64> = batch.iter().map(|b| b.actions.iter().sum::<f64>() + b.states[0]).collect();
        let first = agent.update_critics(&refs, &targets, &view).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = agent.update_critics(&refs, &targets, &view).unwrap();
        }
        assert!(last < 0.5 * first, "{mode:?}: {first} -> {last}");
    }
}

#[test]
fn learns_a_one_step_bandit() {
    let target = vec![0.5, -0.3];
    let (g, triples) = chain_triples(2);
    let cfg = Td3Config {
        start_steps: 200,
        batch_size: 32,
        actor_lr: 1e-3,
        critic_lr: 1e-3,
        explore_noise: 0.3,
        grad_clip: Some(1.0),
        ..Td3Config::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let agent = Agent::new(PolicyMode::Monolithic, small(), cfg, 2, OBS, &mut rng).unwrap();
    let synergy = SynergyConfig { mode: SynergyMode::Frozen, ..SynergyConfig::default() };
    let slot = RobotSlot {
        name: "bandit".into(),
        env: Bandit::new(target.clone(), 1),
        triples: triples.clone(),
        synergy: SynergyManager::new("bandit", g.distances(), synergy),
        steps: 0,
        episodes: 0,
    };
    let mut trainer = Trainer::new(agent, vec![slot], TrainerConfig { total_steps: 3000, seed: 5, workers: 1 });
    while !trainer.finished() {
        trainer.run_round().unwrap();
    }
    let structure = trainer.robots[0].synergy.current().clone();
    let view = RobotView { structure: &structure, triples: &triples };
    let obs = Bandit::new(target.clone(), 1).obs();
    let s = synergy_core::numerics::Tensor::from_vec(2, OBS, obs);
    let a = trainer.agent.act(&s, &view, 1).unwrap();
    for (x, c) in a.iter().zip(&target) {
        assert!((x - c).abs() < 0.1, "{a:?}");
    }
}

#[test]
fn truncated_steps_bootstrap() {
    let mut env = Bandit::new(vec![0.0], 5);
    let mut sink = Vec::new();
    let stats = run_episode(&mut env, 0, 0, 100, |_| Ok(vec![0.2]), Some(&mut sink)).unwrap();
    assert_eq!(stats.steps, 5);
    assert!(!stats.terminated);
    assert!(sink.iter().all(|t| !t.done));
    let mut env = Bandit::new(vec![0.0], 1);
    let mut sink = Vec::new();
    let stats = run_episode(&mut env, 0, 0, 100, |_| Ok(vec![0.2]), Some(&mut sink)).unwrap();
    assert!(stats.terminated && sink[0].done);
    let mut env = Bandit::new(vec![0.0], 50);
    let stats = run_episode(&mut env, 0, 0, 7, |_| Ok(vec![0.0]), None).unwrap();
    assert_eq!(stats.steps, 7);
}

#[test]
fn rollouts_do_not_depend_on_worker_count() {
    let run = |workers: usize| {
        let cfg = Td3Config { start_steps: 60, batch_size: 8, updates_per_step: 0.5, ..Td3Config::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let agent = Agent::new(PolicyMode::Solar, small(), cfg, 4, OBS, &mut rng).unwrap();
        let synergy = SynergyConfig { period: 50, sample_size: 16, ..SynergyConfig::default() };
        let robots = [vec![0.1, 0.2], vec![0.3, -0.1, 0.0], vec![-0.5, 0.5, 0.5, 0.0]]
            .into_iter()
            .enumerate()
            .map(|(i, target)| {
                let (g, triples) = chain_triples(target.len());
                RobotSlot {
                    name: format!("r{i}"),
                    synergy: SynergyManager::new(&format!("r{i}"), g.distances(), synergy),
                    env: Bandit::new(target, 10),
                    triples,
                    steps: 0,
                    episodes: 0,
                }
            })
            .collect();
        let mut trainer = Trainer::new(agent, robots, TrainerConfig { total_steps: 300, seed: 6, workers });
        let mut records = Vec::new();
        while !trainer.finished() {
            records.extend(trainer.run_round().unwrap());
        }
        let versions: Vec<u64> = trainer.robots.iter().map(|r| r.synergy.current().version).collect();
        (records, flat(&trainer.agent.actor_params), versions)
    };
    let one = run(1);
    assert!(one.2.iter().all(|&v| v >= 1));
    assert_eq!(one, run(2));
    assert_eq!(one, run(3));
}

proptest! {
    #[test]
    fn smoothing_noise_is_clipped(
        actions in prop::collection::vec(-1.0f64..=1.0, 1..20),
        sigma in 0.0f64..2.0,
        clip in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = smoothed_actions(&actions, sigma, clip, &mut rng);
        prop_assert_eq!(out.len(), actions.len());
        for (o, a) in out.iter().zip(&actions) {
            prop_assert!((-1.0..=1.0).contains(o));
            prop_assert!((o - a).abs() <= clip + 1e-12);
        }
    }
}
