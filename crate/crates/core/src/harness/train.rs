use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::store::{save_checkpoint, CheckpointMeta, RobotMeta, StructureRecord, CHECKPOINT_FORMAT};
use super::{csv_writer, opt, resolve_output, HarnessError, RunConfig};
use crate::linkworld::{LinkWorld, OBS_DIM};
use crate::policy::PolicyMode;
use crate::synergy::{write_synergy_csv, SynergyManager};
use crate::td3::{Agent, EpisodeRecord, RobotSlot, Trainer, TrainerConfig};

pub const METRICS_CSV_SCHEMA: &str = "metrics/v1";
pub const METRICS_CSV_COLUMNS: [&str; 11] = [
    "total_steps",
    "robot",
    "episode",
    "steps",
    "return",
    "terminated",
    "critic_loss",
    "actor_loss",
    "updates",
    "num_synergies",
    "synergy_version",
];

/// Outcome of one seed of a training run, also written as
/// `summary.json` next to the metrics.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub total_steps: u64,
    pub episodes: usize,
    /// Mean training return over the last ten episodes of every robot.
    pub final_return: f64,
    pub wall_seconds: f64,
}

fn metrics_row(r: &EpisodeRecord, synergies: bool) -> Vec<String> {
    vec![
        r.total_steps.to_string(),
        r.robot.clone(),
        r.episode.to_string(),
        r.steps.to_string(),
        r.episode_return.to_string(),
        u8::from(r.terminated).to_string(),
        opt(r.critic_loss),
        opt(r.actor_loss),
        r.updates.to_string(),
        if synergies { r.num_synergies.to_string() } else { String::new() },
        if synergies { r.synergy_version.to_string() } else { String::new() },
    ]
}

fn checkpoint_meta(cfg: &RunConfig, seed: u64, trainer: &Trainer<LinkWorld>) -> CheckpointMeta {
    let robots = trainer
        .robots
        .iter()
        .map(|slot| RobotMeta {
            name: slot.name.clone(),
            steps: slot.steps,
            current: StructureRecord::from_structure(slot.steps, slot.synergy.current()),
            history: slot
                .synergy
                .history()
                .iter()
                .map(|r| StructureRecord::from_structure(r.step, &r.structure))
                .collect(),
        })
        .collect();
    CheckpointMeta {
        format: CHECKPOINT_FORMAT.to_string(),
        mode: cfg.mode,
        network: cfg.network.clone(),
        max_actuators: trainer.agent.max_actuators(),
        obs_dim: OBS_DIM,
        seed,
        total_steps: trainer.total_steps,
        family: cfg.family_spec.clone().expect("validated config"),
        physics: cfg.physics,
        synergy: cfg.effective_synergy(),
        robots,
    }
}

/// Trains one seed into `dir`: `metrics.csv`, `final.ckpt`, periodic
/// checkpoints under `checkpoints/` and, for synergy modes, one
/// `synergies_<robot>.csv` per robot.
pub fn train_seed(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<SeedSummary, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let family = cfg.family()?;
    let tasks = cfg.task_names(&family);
    let synergy_cfg = cfg.effective_synergy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agent = Agent::new(cfg.mode, cfg.network.clone(), cfg.td3.clone(), family.max_actuators(), OBS_DIM, &mut rng)?;
    let mut robots = Vec::with_capacity(tasks.len());
    for name in &tasks {
        let v = family.variant(name).expect("validated task");
        robots.push(RobotSlot {
            name: name.clone(),
            env: LinkWorld::new(v, cfg.physics)?,
            triples: v.graph.traversal_triples(),
            synergy: SynergyManager::new(name, v.graph.distances(), synergy_cfg),
            steps: 0,
            episodes: 0,
        });
    }
    let tcfg = TrainerConfig { total_steps: cfg.total_steps, seed, workers: cfg.workers };
    let mut trainer = Trainer::new(agent, robots, tcfg);

    let uses_synergies = cfg.mode != PolicyMode::Monolithic;
    let metrics_path = dir.join("metrics.csv");
    let mut metrics = csv_writer(&metrics_path, METRICS_CSV_SCHEMA, &METRICS_CSV_COLUMNS)?;
    let ckpt_dir = dir.join("checkpoints");
    let mut next_ckpt = cfg.checkpoint_interval;
    let mut recent: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut episodes = 0usize;
    let started = Instant::now();

    while !trainer.finished() {
        let records = trainer.run_round()?;
        for (i, r) in records.iter().enumerate() {
            metrics.write_record(metrics_row(r, uses_synergies)).map_err(|e| HarnessError::io(&metrics_path, e))?;
            let window = &mut recent[i];
            window.push(r.episode_return);
            if window.len() > 10 {
                window.remove(0);
            }
        }
        episodes += records.len();
        metrics.flush().map_err(|e| HarnessError::io(&metrics_path, e))?;
        let mean = records.iter().map(|r| r.episode_return).sum::<f64>() / records.len().max(1) as f64;
        log::info!(
            "seed {seed}: {} / {} steps, round return {mean:.1}, {} updates, {:.0}s",
            trainer.total_steps,
            cfg.total_steps,
            trainer.agent.updates,
            started.elapsed().as_secs_f64()
        );
        if cfg.checkpoint_interval > 0 && trainer.total_steps >= next_ckpt {
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| HarnessError::io(&ckpt_dir, e))?;
            let path = ckpt_dir.join(format!("step_{}.ckpt", trainer.total_steps));
            save_checkpoint(&path, &trainer.agent, &checkpoint_meta(cfg, seed, &trainer))?;
            while next_ckpt <= trainer.total_steps {
                next_ckpt += cfg.checkpoint_interval;
            }
        }
    }
    save_checkpoint(&dir.join("final.ckpt"), &trainer.agent, &checkpoint_meta(cfg, seed, &trainer))?;
    if uses_synergies {
        for slot in &trainer.robots {
            let path = dir.join(format!("synergies_{}.csv", slot.name));
            let file = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
            write_synergy_csv(file, slot.synergy.history()).map_err(|e| HarnessError::io(&path, e))?;
        }
    }
    let all: Vec<f64> = recent.into_iter().flatten().collect();
    let summary = SeedSummary {
        seed,
        dir: dir.to_path_buf(),
        total_steps: trainer.total_steps,
        episodes,
        final_return: all.iter().sum::<f64>() / all.len().max(1) as f64,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    Ok(summary)
}

/// Runs every seed of `cfg` (or only `seeds` when given) into
/// `<output_dir>/seed_<n>/` and echoes the resolved config as
/// `<output_dir>/config.json`.
pub fn cmd_train(cfg: &RunConfig, seeds: Option<&[u64]>) -> Result<Vec<SeedSummary>, HarnessError> {
    let out = resolve_output(&cfg.output_dir);
    std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
    let echo = out.join("config.json");
    std::fs::write(&echo, cfg.to_json()).map_err(|e| HarnessError::io(&echo, e))?;
    let seeds = seeds.unwrap_or(&cfg.seeds);
    seeds.iter().map(|&s| train_seed(cfg, s, &out.join(format!("seed_{s}")))).collect()
}
