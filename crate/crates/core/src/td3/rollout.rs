use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Td3Error, Transition};
use crate::linkworld::{Environment, LinkworldError};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub steps: usize,
    pub episode_return: f64,
    /// The episode ended in a fall rather than at the step limit.
    pub terminated: bool,
}

/// Adds `N(0, sigma)` to every action and clamps into `[-1, 1]`.
pub fn add_exploration_noise<R: Rng + ?Sized>(actions: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for a in actions.iter_mut() {
            *a += normal.sample(rng);
        }
    }
    for a in actions.iter_mut() {
        *a = a.clamp(-1.0, 1.0);
    }
}

/// Runs one episode of at most `step_limit` steps from `env.reset(seed)`.
///
/// `act` maps the flat `K × d_s` observation to `K` actions (already
/// including any exploration). Transitions go to `sink` when given.
pub fn run_episode<E, F>(
    env: &mut E,
    robot: usize,
    seed: u64,
    step_limit: usize,
    mut act: F,
    mut sink: Option<&mut Vec<Transition>>,
) -> Result<EpisodeStats, Td3Error>
where
    E: Environment + ?Sized,
    F: FnMut(&[f64]) -> Result<Vec<f64>, Td3Error>,
{
    let mut obs = env.reset(seed);
    let mut stats = EpisodeStats::default();
    while stats.steps < step_limit {
        let actions = act(&obs)?;
        let out = match env.step(&actions) {
            Ok(o) => o,
            Err(LinkworldError::Diverged(t)) => return Err(Td3Error::EnvDiverged(format!("step {t}"))),
            Err(e) => return Err(e.into()),
        };
        if !out.reward.is_finite() {
            return Err(Td3Error::EnvDiverged("non-finite reward".into()));
        }
        stats.steps += 1;
        stats.episode_return += out.reward;
        if let Some(s) = sink.as_deref_mut() {
            s.push(Transition {
                robot,
                states: obs,
                actions,
                reward: out.reward,
                next_states: out.observation.clone(),
                done: out.terminated,
            });
        }
        let done = out.done();
        stats.terminated = out.terminated;
        obs = out.observation;
        if done {
            break;
        }
    }
    Ok(stats)
}
