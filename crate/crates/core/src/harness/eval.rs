use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::store::{load_checkpoint, CheckpointMeta};
use super::{csv_writer, opt, HarnessError};
use crate::linkworld::{Environment, Family, FamilySpec, LinkWorld, PhysicsConfig, Variant, OBS_DIM};
use crate::numerics::Tensor;
use crate::policy::RobotView;
use crate::synergy::{SynergyManager, SynergyMode, SynergyStructure};
use crate::td3::{episode_seed, run_episode, Agent, Td3Error};

pub const EVAL_CSV_SCHEMA: &str = "eval/v1";
const EVAL_CSV_COLUMNS: [&str; 8] =
    ["variant", "num_actuators", "policy", "sources", "episodes", "mean_return", "ci95_low", "ci95_high"];

/// What is evaluated.
#[derive(Clone, Debug)]
pub enum EvalPolicy {
    /// Deterministic actors, one checkpoint per training seed.
    Checkpoints(Vec<PathBuf>),
    /// Uniform random actions, one source per seed.
    Random { seeds: Vec<u64>, family: FamilySpec, physics: PhysicsConfig },
}

#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub policy: EvalPolicy,
    /// Explicit variants; otherwise the held-out split or the trained robots.
    pub variants: Option<Vec<String>>,
    pub heldout: bool,
    pub episodes: usize,
    /// Seeds the episode resets, shared by every source.
    pub seed: u64,
    pub output: Option<PathBuf>,
}

/// Returns of one variant aggregated over sources.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub variant: String,
    pub num_actuators: usize,
    pub policy: String,
    pub episodes: usize,
    /// Mean episode return of every source.
    pub per_source: Vec<f64>,
    pub mean: f64,
    pub ci95: Option<(f64, f64)>,
}

/// Student-t 95% interval of the mean; `None` below two values.
pub fn confidence_interval(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive dof").inverse_cdf(0.975);
    let half = t * (var / n as f64).sqrt();
    Some((mean - half, mean + half))
}

fn select_variants<'f>(
    family: &'f Family,
    req: &EvalRequest,
    trained: &[String],
) -> Result<Vec<&'f Variant>, HarnessError> {
    let names: Vec<String> = if let Some(v) = &req.variants {
        v.clone()
    } else if req.heldout {
        family.test.iter().map(|&i| family.variants[i].name.clone()).collect()
    } else {
        trained.to_vec()
    };
    names.iter().map(|n| family.variant(n).ok_or_else(|| HarnessError::Usage(format!("unknown variant {n}")))).collect()
}

/// Structure for a robot the checkpoint never trained on: ΔQ is estimated
/// on one deterministic probe episode under the single-synergy structure,
/// then clustered as during training. The probe trajectory is discarded.
pub(crate) fn probe_structure(
    agent: &Agent,
    meta: &CheckpointMeta,
    variant: &Variant,
    seed: u64,
) -> Result<SynergyStructure, HarnessError> {
    let cfg = meta.synergy;
    let mut mgr = SynergyManager::new(&variant.name, variant.graph.distances(), cfg);
    let mut dq = Vec::new();
    if cfg.mode == SynergyMode::Full {
        let single = mgr.current().clone();
        let triples = variant.graph.traversal_triples();
        let view = RobotView { structure: &single, triples: &triples };
        let mut env = LinkWorld::new(variant, meta.physics)?;
        let k = variant.num_actuators();
        let mut probe = Vec::new();
        run_episode(
            &mut env,
            0,
            seed,
            meta.physics.max_steps,
            |obs| agent.act(&Tensor::from_vec(k, OBS_DIM, obs.to_vec()), &view, 1),
            Some(&mut probe),
        )?;
        let stride = probe.len().div_ceil(cfg.sample_size).max(1);
        let batch: Vec<_> = probe.iter().step_by(stride).collect();
        dq = agent.delta_q(&batch, &view, cfg.default_action)?;
    }
    mgr.refresh(cfg.period, || Ok(dq))?;
    Ok((**mgr.current()).clone())
}

fn deterministic_returns(
    agent: &Agent,
    variant: &Variant,
    physics: PhysicsConfig,
    structure: &SynergyStructure,
    episodes: usize,
    seed: u64,
    variant_index: usize,
) -> Result<Vec<f64>, HarnessError> {
    let triples = variant.graph.traversal_triples();
    let view = RobotView { structure, triples: &triples };
    let mut env = LinkWorld::new(variant, physics)?;
    let k = variant.num_actuators();
    (0..episodes)
        .map(|e| {
            let s = episode_seed(seed, variant_index, e as u64);
            let stats = run_episode(
                &mut env,
                0,
                s,
                physics.max_steps,
                |obs| agent.act(&Tensor::from_vec(k, OBS_DIM, obs.to_vec()), &view, 1),
                None,
            )?;
            Ok(stats.episode_return)
        })
        .collect()
}

fn random_returns(
    variant: &Variant,
    physics: PhysicsConfig,
    episodes: usize,
    seed: u64,
    source_seed: u64,
    variant_index: usize,
) -> Result<Vec<f64>, HarnessError> {
    let mut env = LinkWorld::new(variant, physics)?;
    let k = env.num_actuators();
    (0..episodes)
        .map(|e| {
            let s = episode_seed(seed, variant_index, e as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(source_seed, variant_index, e as u64) ^ s);
            let stats = run_episode(
                &mut env,
                0,
                s,
                physics.max_steps,
                |_| Ok::<_, Td3Error>((0..k).map(|_| rng.random_range(-1.0..=1.0)).collect()),
                None,
            )?;
            Ok(stats.episode_return)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluates without exploration noise or replay writes and returns one
/// row per variant; with `output` set, also writes them as CSV.
pub fn cmd_eval(req: &EvalRequest) -> Result<Vec<EvalRow>, HarnessError> {
    let mut per_variant: Vec<(String, usize, Vec<f64>)> = Vec::new();
    let mut push = |name: &str, k: usize, value: f64| match per_variant.iter_mut().find(|(n, _, _)| n == name) {
        Some(row) => row.2.push(value),
        None => per_variant.push((name.to_string(), k, vec![value])),
    };
    let label = match &req.policy {
        EvalPolicy::Checkpoints(paths) => {
            if paths.is_empty() {
                return Err(HarnessError::Usage("no checkpoints to evaluate".into()));
            }
            for path in paths {
                let loaded = load_checkpoint(path)?;
                let family = loaded.meta.family()?;
                let trained: Vec<String> = loaded.meta.robots.iter().map(|r| r.name.clone()).collect();
                let variants = select_variants(&family, req, &trained)?;
                if req.episodes == 0 {
                    continue;
                }
                for (vi, v) in variants.iter().enumerate() {
                    if v.num_actuators() > loaded.meta.max_actuators {
                        return Err(HarnessError::IncompatibleCheckpoint(format!(
                            "{} has {} actuators, the checkpoint supports {}",
                            v.name,
                            v.num_actuators(),
                            loaded.meta.max_actuators
                        )));
                    }
                    let structure = match loaded.meta.robot(&v.name) {
                        Some(r) => r.current.to_structure(&v.name)?,
                        None => probe_structure(&loaded.agent, &loaded.meta, v, episode_seed(req.seed, vi, u64::MAX))?,
                    };
                    let returns = deterministic_returns(
                        &loaded.agent,
                        v,
                        loaded.meta.physics,
                        &structure,
                        req.episodes,
                        req.seed,
                        vi,
                    )?;
                    push(&v.name, v.num_actuators(), mean(&returns));
                }
            }
            "checkpoint"
        }
        EvalPolicy::Random { seeds, family, physics } => {
            let family = Family::from_spec(family, OBS_DIM)?;
            let trained: Vec<String> = family.train.iter().map(|&i| family.variants[i].name.clone()).collect();
            let variants = select_variants(&family, req, &trained)?;
            if req.episodes > 0 {
                for &s in seeds {
                    for (vi, v) in variants.iter().enumerate() {
                        let returns = random_returns(v, *physics, req.episodes, req.seed, s, vi)?;
                        push(&v.name, v.num_actuators(), mean(&returns));
                    }
                }
            }
            "random"
        }
    };
    let rows: Vec<EvalRow> = per_variant
        .into_iter()
        .map(|(variant, num_actuators, per_source)| EvalRow {
            mean: mean(&per_source),
            ci95: confidence_interval(&per_source),
            variant,
            num_actuators,
            policy: label.to_string(),
            episodes: req.episodes,
            per_source,
        })
        .collect();
    if let Some(path) = &req.output {
        let mut w = csv_writer(path, EVAL_CSV_SCHEMA, &EVAL_CSV_COLUMNS)?;
        for r in &rows {
            w.write_record([
                r.variant.clone(),
                r.num_actuators.to_string(),
                r.policy.clone(),
                r.per_source.len().to_string(),
                r.episodes.to_string(),
                r.mean.to_string(),
                opt(r.ci95.map(|c| c.0)),
                opt(r.ci95.map(|c| c.1)),
            ])
            .map_err(|e| HarnessError::io(path, e))?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_matches_t_table() {
        let (lo, hi) = confidence_interval(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        // mean 2.5, sd 1.2910, t(3) = 3.182446
        let half = 3.182446305284263 * 1.2909944487358056 / 2.0;
        assert!((lo - (2.5 - half)).abs() < 1e-9 && (hi - (2.5 + half)).abs() < 1e-9);
        assert_eq!(confidence_interval(&[1.0]), None);
    }
}
