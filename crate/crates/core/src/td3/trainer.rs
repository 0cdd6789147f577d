use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{add_exploration_noise, run_episode, Agent, EpisodeStats, ReplayBuffer, Td3Error, Transition};
use crate::linkworld::Environment;
use crate::morphology::TraversalTriple;
use crate::numerics::Tensor;
use crate::policy::RobotView;
use crate::synergy::{SynergyManager, SynergyMode};

/// One robot of a (possibly multi-task) run.
#[derive(Debug)]
pub struct RobotSlot<E> {
    pub name: String,
    pub env: E,
    pub triples: Vec<TraversalTriple>,
    pub synergy: SynergyManager,
    /// Environment steps collected on this robot.
    pub steps: u64,
    pub episodes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainerConfig {
    pub total_steps: u64,
    pub seed: u64,
    /// Threads used for rollouts. Results do not depend on this.
    pub workers: usize,
}

/// One finished training episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    /// Environment steps across all robots after the round that ran it.
    pub total_steps: u64,
    pub robot: String,
    pub episode: u64,
    pub steps: usize,
    pub episode_return: f64,
    pub terminated: bool,
    /// Mean losses over the updates of the round, if any ran.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub updates: u64,
    pub num_synergies: usize,
    pub synergy_version: u64,
}

/// Seed of episode `episode` of robot `robot`, independent of scheduling.
pub fn episode_seed(seed: u64, robot: usize, episode: u64) -> u64 {
    let mut z = seed
        .wrapping_add((robot as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(episode.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits the remaining step budget evenly over the robots so that a
/// round never overshoots it. Robots with a zero share sit the round out.
fn step_limits(remaining: u64, robots: usize) -> Vec<usize> {
    let n = robots.max(1) as u64;
    (0..n).map(|i| (remaining / n + u64::from(i < remaining % n)) as usize).collect()
}

/// Round-robin TD3 over several robots sharing one actor and twin critics.
///
/// Each round runs one episode per robot with a frozen copy of the actor,
/// then performs `updates_per_step` gradient steps per collected step,
/// each on a minibatch from a single robot, and finally refreshes any
/// synergy structure whose freeze window has passed.
#[derive(Debug)]
pub struct Trainer<E> {
    pub agent: Agent,
    pub robots: Vec<RobotSlot<E>>,
    pub buffer: ReplayBuffer,
    pub config: TrainerConfig,
    pub total_steps: u64,
    rng: ChaCha8Rng,
    update_debt: f64,
    update_cursor: usize,
}

struct Collected {
    stats: EpisodeStats,
    transitions: Vec<Transition>,
    synergies: (usize, u64),
}

fn collect_episode<E: Environment>(
    agent: &Agent,
    slot: &mut RobotSlot<E>,
    robot: usize,
    seed: u64,
    random: bool,
    step_limit: usize,
) -> Result<Option<Collected>, Td3Error> {
    if step_limit == 0 {
        return Ok(None);
    }
    let ep_seed = episode_seed(seed, robot, slot.episodes);
    let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
    let structure = slot.synergy.current().clone();
    let view = RobotView { structure: &structure, triples: &slot.triples };
    let k = slot.env.num_actuators();
    let ds = slot.env.obs_dim();
    let sigma = agent.config.explore_noise;
    let mut transitions = Vec::new();
    let stats = run_episode(
        &mut slot.env,
        robot,
        ep_seed,
        step_limit,
        |obs| {
            if random {
                return Ok((0..k).map(|_| rng.random_range(-1.0..=1.0)).collect());
            }
            let s = Tensor::from_vec(k, ds, obs.to_vec());
            let mut a = agent.act(&s, &view, 1)?;
            add_exploration_noise(&mut a, sigma, &mut rng);
            Ok(a)
        },
        Some(&mut transitions),
    )?;
    Ok(Some(Collected { stats, transitions, synergies: (structure.num_synergies(), structure.version) }))
}

impl<E: Environment + Send> Trainer<E> {
    pub fn new(agent: Agent, robots: Vec<RobotSlot<E>>, config: TrainerConfig) -> Self {
        let buffer = ReplayBuffer::new(robots.len(), agent.config.buffer_capacity);
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7D3),
            agent,
            robots,
            buffer,
            config,
            total_steps: 0,
            update_debt: 0.0,
            update_cursor: 0,
        }
    }

    pub fn finished(&self) -> bool {
        self.total_steps >= self.config.total_steps
    }

    /// Runs one round; returns one record per episode.
    pub fn run_round(&mut self) -> Result<Vec<EpisodeRecord>, Td3Error> {
        let remaining = self.config.total_steps.saturating_sub(self.total_steps);
        if remaining == 0 {
            return Ok(Vec::new());
        }
        let random = self.total_steps < self.agent.config.start_steps;
        let limits = step_limits(remaining, self.robots.len());
        let collected = self.collect(random, &limits)?;
        let mut steps = 0u64;
        for (slot, c) in self.robots.iter_mut().zip(&collected) {
            if let Some(c) = c {
                slot.steps += c.stats.steps as u64;
                slot.episodes += 1;
                steps += c.stats.steps as u64;
            }
        }
        self.total_steps += steps;
        let episodes: Vec<_> = collected
            .into_iter()
            .map(|c| {
                c.map(|c| {
                    for t in c.transitions {
                        self.buffer.push(t);
                    }
                    (c.stats, c.synergies)
                })
            })
            .collect();

        let (critic_loss, actor_loss) = self.update(steps)?;
        self.refresh_synergies()?;

        Ok(episodes
            .into_iter()
            .zip(&self.robots)
            .filter_map(|(e, slot)| e.map(|e| (e, slot)))
            .map(|((stats, (num_synergies, synergy_version)), slot)| EpisodeRecord {
                total_steps: self.total_steps,
                robot: slot.name.clone(),
                episode: slot.episodes - 1,
                steps: stats.steps,
                episode_return: stats.episode_return,
                terminated: stats.terminated,
                critic_loss,
                actor_loss,
                updates: self.agent.updates,
                num_synergies,
                synergy_version,
            })
            .collect())
    }

    fn collect(&mut self, random: bool, limits: &[usize]) -> Result<Vec<Option<Collected>>, Td3Error> {
        let seed = self.config.seed;
        let agent = &self.agent;
        let workers = self.config.workers.clamp(1, self.robots.len().max(1));
        if workers == 1 {
            return self
                .robots
                .iter_mut()
                .enumerate()
                .map(|(i, slot)| collect_episode(agent, slot, i, seed, random, limits[i]))
                .collect();
        }
        let chunk = self.robots.len().div_ceil(workers);
        let results: Vec<Result<Vec<Option<Collected>>, Td3Error>> = std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .robots
                .chunks_mut(chunk)
                .enumerate()
                .map(|(c, slots)| {
                    scope.spawn(move || {
                        slots
                            .iter_mut()
                            .enumerate()
                            .map(|(j, slot)| {
                                let i = c * chunk + j;
                                collect_episode(agent, slot, i, seed, random, limits[i])
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("rollout thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(self.robots.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    fn update(&mut self, steps: u64) -> Result<(Option<f64>, Option<f64>), Td3Error> {
        let cfg = &self.agent.config;
        if self.total_steps < cfg.start_steps {
            return Ok((None, None));
        }
        let ready: Vec<usize> = (0..self.robots.len()).filter(|&i| self.buffer.len(i) >= cfg.batch_size).collect();
        if ready.is_empty() {
            return Ok((None, None));
        }
        let wanted = self.update_debt + steps as f64 * cfg.updates_per_step;
        let n = wanted.floor() as u64;
        self.update_debt = wanted - n as f64;
        let batch_size = cfg.batch_size;
        let (mut critic_sum, mut actor_sum, mut actor_n) = (0.0, 0.0, 0u64);
        for _ in 0..n {
            let robot = ready[self.update_cursor % ready.len()];
            self.update_cursor += 1;
            let batch = self.buffer.sample(robot, batch_size, &mut self.rng);
            let slot = &self.robots[robot];
            let structure = slot.synergy.current().clone();
            let view = RobotView { structure: &structure, triples: &slot.triples };
            let m = self.agent.train_step(&batch, &view, &mut self.rng)?;
            critic_sum += m.critic_loss;
            if let Some(a) = m.actor_loss {
                actor_sum += a;
                actor_n += 1;
            }
        }
        let critic = (n > 0).then(|| critic_sum / n as f64);
        let actor = (actor_n > 0).then(|| actor_sum / actor_n as f64);
        Ok((critic, actor))
    }

    fn refresh_synergies(&mut self) -> Result<(), Td3Error> {
        for i in 0..self.robots.len() {
            let slot = &self.robots[i];
            if !slot.synergy.due(slot.steps) || self.buffer.len(i) == 0 {
                continue;
            }
            let cfg = *slot.synergy.config();
            let dq = if cfg.mode == SynergyMode::Full {
                let structure = slot.synergy.current().clone();
                let view = RobotView { structure: &structure, triples: &slot.triples };
                let batch = self.buffer.sample(i, cfg.sample_size, &mut self.rng);
                Some(self.agent.delta_q(&batch, &view, cfg.default_action)?)
            } else {
                None
            };
            let slot = &mut self.robots[i];
            let step = slot.steps;
            slot.synergy.refresh(step, || Ok(dq.unwrap_or_default()))?;
        }
        Ok(())
    }
}
