//! Synergy structures: critic-derived actuator influence, preferences,
//! periodic re-clustering and the intra-synergy attention mask.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clustering::{affinity_propagation, build_similarity, ApConfig, ClusterResult, ClusteringError};
use crate::morphology::DistanceMatrix;
use crate::numerics::{NumericsError, Tensor};
use crate::td3::Transition;

#[derive(Debug, thiserror::Error)]
pub enum SynergyError {
    #[error("empty transition batch")]
    EmptyBatch,
    #[error("batch mixes robots {0} and {1}")]
    MixedRobots(usize, usize),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Cluster assignment of one robot's actuators. Immutable once built;
/// refreshing swaps in a new `Arc`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynergyStructure {
    pub robot_id: String,
    assignment: Vec<usize>,
    centers: Vec<usize>,
    mask: Vec<bool>,
    pub version: u64,
    pub frozen_until: u64,
}

impl SynergyStructure {
    /// `assignment[k]` is actuator k's synergy; labels must cover `0..L`.
    /// `centers[l]` is the exemplar of synergy `l`.
    pub fn new(
        robot_id: impl Into<String>,
        assignment: Vec<usize>,
        centers: Vec<usize>,
        version: u64,
        frozen_until: u64,
    ) -> Result<Self, SynergyError> {
        let k = assignment.len();
        let l = centers.len();
        let bad = |m: String| Err(SynergyError::InvalidAssignment(m));
        if k == 0 || l == 0 {
            return bad("empty structure".into());
        }
        if let Some(&a) = assignment.iter().find(|&&a| a >= l) {
            return bad(format!("label {a} with {l} synergies"));
        }
        for (s, &c) in centers.iter().enumerate() {
            if c >= k || assignment[c] != s {
                return bad(format!("center {c} does not belong to synergy {s}"));
            }
        }
        let mask = synergy_mask_flat(&assignment);
        Ok(Self { robot_id: robot_id.into(), assignment, centers, mask, version, frozen_until })
    }

    /// Everything in one synergy, centered on actuator 0.
    pub fn single(robot_id: impl Into<String>, k: usize, frozen_until: u64) -> Self {
        Self::new(robot_id, vec![0; k], vec![0], 0, frozen_until).expect("k > 0")
    }

    /// Every actuator its own synergy.
    pub fn singletons(robot_id: impl Into<String>, k: usize) -> Self {
        Self::new(robot_id, (0..k).collect(), (0..k).collect(), 0, 0).expect("k > 0")
    }

    /// Synergies numbered in ascending order of their exemplar.
    pub fn from_clusters(
        robot_id: impl Into<String>,
        clusters: &ClusterResult,
        version: u64,
        frozen_until: u64,
    ) -> Result<Self, SynergyError> {
        Self::new(robot_id, clusters.labels(), clusters.centers.clone(), version, frozen_until)
    }

    pub fn num_actuators(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_synergies(&self) -> usize {
        self.centers.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn is_center(&self, k: usize) -> bool {
        self.centers[self.assignment[k]] == k
    }

    /// Row-major `K × K` mask, the layout attention consumes.
    pub fn mask_flat(&self) -> &[bool] {
        &self.mask
    }

    pub fn members(&self, synergy: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&k| self.assignment[k] == synergy).collect()
    }
}

fn synergy_mask_flat(assignment: &[usize]) -> Vec<bool> {
    let k = assignment.len();
    let mut m = vec![false; k * k];
    for i in 0..k {
        for j in 0..k {
            m[i * k + j] = assignment[i] == assignment[j];
        }
    }
    m
}

/// `M[i][j]` is true iff actuators i and j share a synergy.
pub fn synergy_mask(structure: &SynergyStructure) -> Vec<Vec<bool>> {
    let k = structure.num_actuators();
    structure.mask.chunks(k).map(<[bool]>::to_vec).collect()
}

/// Softmax-normalized influence scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceVector {
    pub dq_tilde: Vec<f64>,
}

pub fn to_preference(dq: &[f64]) -> PreferenceVector {
    let max = dq.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = dq.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    PreferenceVector { dq_tilde: e.into_iter().map(|v| v / z).collect() }
}

/// Mean drop in Q when each actuator's action is replaced by `default_action`.
///
/// `actions` holds the current actor's actions on the batch states,
/// `[B·K × 1]` in batch order. `q` evaluates a value per sample for stacked
/// `[B·K × d_s]` states and `[B·K × 1]` actions.
pub fn estimate_delta_q<F>(
    batch: &[&Transition],
    actions: &Tensor,
    default_action: f64,
    mut q: F,
) -> Result<Vec<f64>, SynergyError>
where
    F: FnMut(&Tensor, &Tensor) -> Result<Vec<f64>, NumericsError>,
{
    let first = batch.first().ok_or(SynergyError::EmptyBatch)?;
    if let Some(t) = batch.iter().find(|t| t.robot != first.robot) {
        return Err(SynergyError::MixedRobots(first.robot, t.robot));
    }
    let k = first.actions.len();
    let b = batch.len();
    let states = stack_states(batch);
    if actions.len() != b * k {
        return Err(NumericsError::ShapeMismatch {
            op: "estimate_delta_q",
            detail: format!("{} actions for {b} samples of {k} actuators", actions.len()),
        }
        .into());
    }
    let base = q(&states, actions)?;
    let mut dq = Vec::with_capacity(k);
    for coord in 0..k {
        let mut replaced = actions.clone();
        for s in 0..b {
            replaced.data_mut()[s * k + coord] = default_action;
        }
        let alt = q(&states, &replaced)?;
        let diff: f64 = base.iter().zip(&alt).map(|(x, y)| x - y).sum();
        dq.push(diff / b as f64);
    }
    Ok(dq)
}

/// Stacks transition states into `[B·K × d_s]`.
pub fn stack_states(batch: &[&Transition]) -> Tensor {
    let k = batch[0].actions.len();
    let ds = batch[0].states.len() / k;
    let mut data = Vec::with_capacity(batch.len() * k * ds);
    for t in batch {
        data.extend_from_slice(&t.states);
    }
    Tensor::from_vec(batch.len() * k, ds, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynergyMode {
    /// Critic-derived preferences.
    Full,
    /// Median-similarity preferences.
    NoPreference,
    /// Keep the warm-up structure forever.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynergyConfig {
    /// Environment steps of one robot between refreshes.
    pub period: u64,
    pub mode: SynergyMode,
    /// Replay samples used to estimate ΔQ.
    pub sample_size: usize,
    pub default_action: f64,
    pub clustering: ApConfig,
}

impl Default for SynergyConfig {
    fn default() -> Self {
        Self {
            period: 50_000,
            mode: SynergyMode::Full,
            sample_size: 512,
            default_action: 0.0,
            clustering: ApConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefreshOutcome {
    Frozen,
    Installed,
    /// Clustering did not converge; the previous structure stays.
    KeptPrevious,
}

/// One installed structure and the robot step at which it took effect.
#[derive(Clone, Debug)]
pub struct SynergyRecord {
    pub step: u64,
    pub structure: Arc<SynergyStructure>,
}

/// Owns one robot's current structure and its install history.
#[derive(Clone, Debug)]
pub struct SynergyManager {
    config: SynergyConfig,
    distances: DistanceMatrix,
    current: Arc<SynergyStructure>,
    history: Vec<SynergyRecord>,
}

impl SynergyManager {
    pub fn new(robot_id: &str, distances: DistanceMatrix, config: SynergyConfig) -> Self {
        let k = distances.len();
        let frozen_until = if config.mode == SynergyMode::Frozen { u64::MAX } else { config.period };
        let current = Arc::new(SynergyStructure::single(robot_id, k, frozen_until));
        let history = vec![SynergyRecord { step: 0, structure: current.clone() }];
        Self { config, distances, current, history }
    }

    /// Starts from a given structure, e.g. one restored from a checkpoint.
    pub fn with_structure(distances: DistanceMatrix, config: SynergyConfig, s: SynergyStructure) -> Self {
        let current = Arc::new(s);
        let history = vec![SynergyRecord { step: 0, structure: current.clone() }];
        Self { config, distances, current, history }
    }

    pub fn current(&self) -> &Arc<SynergyStructure> {
        &self.current
    }

    pub fn history(&self) -> &[SynergyRecord] {
        &self.history
    }

    pub fn config(&self) -> &SynergyConfig {
        &self.config
    }

    pub fn due(&self, step: u64) -> bool {
        step >= self.current.frozen_until
    }

    /// Re-clusters when the freeze window has passed. `delta_q` is only
    /// called in [`SynergyMode::Full`].
    pub fn refresh<F>(&mut self, step: u64, delta_q: F) -> Result<RefreshOutcome, SynergyError>
    where
        F: FnOnce() -> Result<Vec<f64>, SynergyError>,
    {
        if !self.due(step) {
            return Ok(RefreshOutcome::Frozen);
        }
        let preference = match self.config.mode {
            SynergyMode::Full => Some(to_preference(&delta_q()?)),
            SynergyMode::NoPreference => None,
            SynergyMode::Frozen => return Ok(RefreshOutcome::Frozen),
        };
        let s = build_similarity(&self.distances, preference.as_ref().map(|p| &p.dq_tilde[..]))?;
        let clusters = affinity_propagation(&s, &self.config.clustering)?;
        let frozen_until = step.saturating_add(self.config.period);
        if !clusters.converged {
            log::warn!(
                "{}: clustering did not converge after {} iterations; keeping version {}",
                self.current.robot_id,
                clusters.iterations,
                self.current.version
            );
            let mut kept = (*self.current).clone();
            kept.frozen_until = frozen_until;
            self.current = Arc::new(kept);
            return Ok(RefreshOutcome::KeptPrevious);
        }
        let next = SynergyStructure::from_clusters(
            self.current.robot_id.clone(),
            &clusters,
            self.current.version + 1,
            frozen_until,
        )?;
        log::debug!("{}: synergy version {} with {} synergies", next.robot_id, next.version, next.num_synergies());
        self.current = Arc::new(next);
        self.history.push(SynergyRecord { step, structure: self.current.clone() });
        Ok(RefreshOutcome::Installed)
    }
}

pub const SYNERGY_CSV_SCHEMA: &str = "synergies/v1";
pub const SYNERGY_CSV_COLUMNS: [&str; 5] = ["step", "version", "actuator", "synergy_index", "is_center"];

/// Writes the install history: schema row, header, then one row per
/// actuator per installed version.
pub fn write_synergy_csv<W: Write>(out: W, history: &[SynergyRecord]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record(["schema", SYNERGY_CSV_SCHEMA])?;
    w.write_record(SYNERGY_CSV_COLUMNS)?;
    for rec in history {
        let s = &rec.structure;
        for (k, &syn) in s.assignment().iter().enumerate() {
            w.write_record([
                rec.step.to_string(),
                s.version.to_string(),
                k.to_string(),
                syn.to_string(),
                u8::from(s.is_center(k)).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
