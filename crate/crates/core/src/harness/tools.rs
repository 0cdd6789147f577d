use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::eval::probe_structure;
use super::store::load_checkpoint;
use super::HarnessError;
use crate::clustering::{affinity_propagation, build_similarity, ApConfig};
use crate::linkworld::{LinkWorld, OBS_DIM};
use crate::morphology::MorphologyGraph;
use crate::numerics::Tensor;
use crate::policy::{Actor, PolicyMode, RobotView};
use crate::synergy::{write_synergy_csv, SynergyStructure};
use crate::td3::{add_exploration_noise, episode_seed, run_episode};

/// Clustering of one morphology.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterReport {
    pub robot_id: String,
    pub num_actuators: usize,
    pub centers: Vec<usize>,
    pub labels: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

/// Clusters a morphology file by hop distance, with explicit preferences
/// or the median similarity.
pub fn cmd_cluster(
    morphology: &Path,
    preference: Option<&[f64]>,
    ap: &ApConfig,
) -> Result<ClusterReport, HarnessError> {
    let g = MorphologyGraph::load(morphology).map_err(|e| HarnessError::io(morphology, e))?;
    let s = build_similarity(&g.distances(), preference)?;
    let r = affinity_propagation(&s, ap)?;
    Ok(ClusterReport {
        robot_id: g.robot_id().to_string(),
        num_actuators: g.num_actuators(),
        labels: r.labels(),
        centers: r.centers,
        converged: r.converged,
        iterations: r.iterations,
    })
}

/// Writes `synergies_<robot>.csv` for every robot of a checkpoint.
pub fn cmd_export_synergies(checkpoint: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let loaded = load_checkpoint(checkpoint)?;
    if loaded.meta.mode == PolicyMode::Monolithic {
        return Err(HarnessError::Usage("monolithic checkpoints have no synergy structures".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut written = Vec::new();
    for robot in &loaded.meta.robots {
        let path = out_dir.join(format!("synergies_{}.csv", robot.name));
        let file = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        write_synergy_csv(file, &robot.synergy_records()?).map_err(|e| HarnessError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// `L` synergies of consecutive actuators, as even as possible.
pub fn contiguous_structure(robot: &str, k: usize, l: usize) -> Result<SynergyStructure, HarnessError> {
    if l == 0 || l > k {
        return Err(HarnessError::Usage(format!("synergy count {l} outside 1..={k}")));
    }
    let assignment: Vec<usize> = (0..k).map(|i| i * l / k).collect();
    let centers: Vec<usize> = (0..l).map(|s| assignment.iter().position(|&a| a == s).expect("non-empty")).collect();
    Ok(SynergyStructure::new(robot, assignment, centers, 0, 0)?)
}

/// Singular values of `rows` (descending) and how many exceed
/// `rel_tol · σ_max`.
pub fn numerical_rank(rows: &[Vec<f64>], rel_tol: f64) -> (usize, Vec<f64>) {
    if rows.is_empty() || rows[0].is_empty() {
        return (0, Vec::new());
    }
    let m = DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let max = sv.first().copied().unwrap_or(0.0);
    let rank = if max > 0.0 { sv.iter().filter(|&&s| s > rel_tol * max).count() } else { 0 };
    (rank, sv)
}

#[derive(Clone, Debug)]
pub struct RankRequest {
    pub checkpoint: PathBuf,
    pub variant: String,
    pub samples: usize,
    /// Overrides the stored structure with a contiguous split.
    pub synergies: Option<usize>,
    pub seed: u64,
    /// Exploration noise of the rollouts that visit states; the recorded
    /// actions are always the deterministic ones.
    pub explore_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub variant: String,
    pub num_actuators: usize,
    pub synergies: usize,
    pub samples: usize,
    pub rank: usize,
    /// Column rank of the materialized synergy-to-actuator matrix.
    pub transformation_rank: usize,
    pub singular_values: Vec<f64>,
}

pub const RANK_TOLERANCE: f64 = 1e-8;

/// Stacks actions of visited states and checks their rank against `L`.
pub fn cmd_rank_check(req: &RankRequest) -> Result<RankReport, HarnessError> {
    let loaded = load_checkpoint(&req.checkpoint)?;
    let Actor::Solar(solar) = &loaded.agent.actor else {
        return Err(HarnessError::Usage(format!(
            "rank-check needs a synergy-action policy, checkpoint mode is {}",
            loaded.meta.mode.as_str()
        )));
    };
    let family = loaded.meta.family()?;
    let variant =
        family.variant(&req.variant).ok_or_else(|| HarnessError::Usage(format!("unknown variant {}", req.variant)))?;
    let k = variant.num_actuators();
    if k > loaded.meta.max_actuators {
        return Err(HarnessError::IncompatibleCheckpoint(format!(
            "{} has {k} actuators, the checkpoint supports {}",
            variant.name, loaded.meta.max_actuators
        )));
    }
    let structure = match (req.synergies, loaded.meta.robot(&variant.name)) {
        (Some(l), _) => contiguous_structure(&variant.name, k, l)?,
        (None, Some(r)) => r.current.to_structure(&variant.name)?,
        (None, None) => probe_structure(&loaded.agent, &loaded.meta, variant, req.seed)?,
    };
    let triples = variant.graph.traversal_triples();
    let view = RobotView { structure: &structure, triples: &triples };
    let mut env = LinkWorld::new(variant, loaded.meta.physics)?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(req.samples);
    let mut episode = 0u64;
    while rows.len() < req.samples {
        let seed = episode_seed(req.seed, 0, episode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let remaining = req.samples - rows.len();
        run_episode(
            &mut env,
            0,
            seed,
            remaining,
            |obs| {
                let a = loaded.agent.act(&Tensor::from_vec(k, OBS_DIM, obs.to_vec()), &view, 1)?;
                rows.push(a.clone());
                let mut noisy = a;
                add_exploration_noise(&mut noisy, req.explore_noise, &mut rng);
                Ok(noisy)
            },
            None,
        )?;
        episode += 1;
    }
    let (rank, singular_values) = numerical_rank(&rows, RANK_TOLERANCE);
    let t = solar.transformation_matrix(&loaded.agent.actor_params, &triples, &structure)?;
    let t_rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
    let (transformation_rank, _) = numerical_rank(&t_rows, RANK_TOLERANCE);
    let report = RankReport {
        variant: variant.name.clone(),
        num_actuators: k,
        synergies: structure.num_synergies(),
        samples: rows.len(),
        rank,
        transformation_rank,
        singular_values,
    };
    if report.rank > report.synergies {
        return Err(HarnessError::RankViolation {
            variant: report.variant,
            rank: report.rank,
            synergies: report.synergies,
        });
    }
    Ok(report)
}
