use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::linkworld::{Family, FamilySpec, PhysicsConfig, OBS_DIM};
use crate::policy::{NetworkConfig, PolicyMode};
use crate::synergy::{SynergyConfig, SynergyMode};
use crate::td3::Td3Config;

const BUILTIN: [(&str, &str); 3] = [
    ("hopper3", include_str!("../../fixtures/hopper3.json")),
    ("walker6", include_str!("../../fixtures/walker6.json")),
    ("biped9", include_str!("../../fixtures/biped9.json")),
];

/// The shipped variant families by name.
pub fn builtin_family(name: &str) -> Option<FamilySpec> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, text)| serde_json::from_str(text).expect("shipped family parses"))
}

/// Resolves `family` as a file path (relative to `base`) or a built-in name.
pub fn load_family(family: &str, base: &Path) -> Result<FamilySpec, HarnessError> {
    let path = base.join(family);
    if path.is_file() {
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::config("family", e))?;
        return serde_json::from_str(&text)
            .map_err(|e| HarnessError::config("family", format!("{}: {e}", path.display())));
    }
    builtin_family(family)
        .ok_or_else(|| HarnessError::config("family", format!("{family} is neither a file nor a built-in family")))
}

/// A training run. Unset sections take their defaults; the resolved
/// config is written next to the run outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Variant family file, or one of `hopper3`, `walker6`, `biped9`.
    pub family: String,
    /// Variants to train on; defaults to the family's train split.
    pub tasks: Option<Vec<String>>,
    pub mode: PolicyMode,
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub synergy: SynergyConfig,
    pub td3: Td3Config,
    pub network: NetworkConfig,
    pub physics: PhysicsConfig,
    /// Environment steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub workers: usize,
    #[serde(skip)]
    pub family_spec: Option<FamilySpec>,
}

const FIELDS: [&str; 12] = [
    "family",
    "tasks",
    "mode",
    "total_steps",
    "seeds",
    "output_dir",
    "synergy",
    "td3",
    "network",
    "physics",
    "checkpoint_interval",
    "workers",
];

fn field<T: DeserializeOwned>(
    obj: &serde_json::Map<String, serde_json::Value>,
    name: &str,
    default: impl FnOnce() -> Option<T>,
) -> Result<T, HarnessError> {
    match obj.get(name) {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| HarnessError::config(name, e)),
        None => default().ok_or_else(|| HarnessError::config(name, "missing")),
    }
}

impl RunConfig {
    /// Parses and validates a config; relative family paths are looked up
    /// from `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| HarnessError::config("<root>", e))?;
        let obj = value.as_object().ok_or_else(|| HarnessError::config("<root>", "expected a JSON object"))?;
        if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(HarnessError::config(k, "unknown field"));
        }
        let mut cfg = Self {
            family: field(obj, "family", || None)?,
            tasks: field(obj, "tasks", || Some(None))?,
            mode: field(obj, "mode", || None)?,
            total_steps: field(obj, "total_steps", || None)?,
            seeds: field(obj, "seeds", || Some(vec![0, 1, 2, 3]))?,
            output_dir: field(obj, "output_dir", || Some(PathBuf::from("runs")))?,
            synergy: field(obj, "synergy", || Some(SynergyConfig::default()))?,
            td3: field(obj, "td3", || Some(Td3Config::default()))?,
            network: field(obj, "network", || Some(NetworkConfig::default()))?,
            physics: field(obj, "physics", || Some(PhysicsConfig::default()))?,
            checkpoint_interval: field(obj, "checkpoint_interval", || Some(0))?,
            workers: field(obj, "workers", || Some(1))?,
            family_spec: None,
        };
        cfg.family_spec = Some(load_family(&cfg.family, base)?);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Checks every field; the family must already be resolved.
    pub fn validate(&mut self) -> Result<(), HarnessError> {
        let spec = match &self.family_spec {
            Some(s) => s.clone(),
            None => load_family(&self.family, Path::new("."))?,
        };
        let family = Family::from_spec(&spec, OBS_DIM).map_err(|e| HarnessError::config("family", e))?;
        if let Some(tasks) = &self.tasks {
            if tasks.is_empty() {
                return Err(HarnessError::config("tasks", "must not be empty"));
            }
            if let Some(t) = tasks.iter().find(|t| family.variant(t).is_none()) {
                return Err(HarnessError::config("tasks", format!("unknown variant {t}")));
            }
        }
        if self.total_steps == 0 {
            return Err(HarnessError::config("total_steps", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::config("seeds", "must not be empty"));
        }
        if self.workers == 0 {
            return Err(HarnessError::config("workers", "must be positive"));
        }
        self.td3.validate().map_err(|e| HarnessError::config("td3", e))?;
        self.network.validate().map_err(|e| HarnessError::config("network", e))?;
        self.physics.validate().map_err(|e| HarnessError::config("physics", e))?;
        self.synergy.clustering.validate().map_err(|e| HarnessError::config("synergy", e))?;
        if self.synergy.period == 0 || self.synergy.sample_size == 0 {
            return Err(HarnessError::config("synergy", "period and sample_size must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.synergy.default_action) {
            return Err(HarnessError::config("synergy", "default_action must lie in [-1, 1]"));
        }
        self.family_spec = Some(spec);
        Ok(())
    }

    pub fn family(&self) -> Result<Family, HarnessError> {
        let spec = self.family_spec.as_ref().expect("validated config");
        Family::from_spec(spec, OBS_DIM).map_err(|e| HarnessError::config("family", e))
    }

    /// Variant names trained on.
    pub fn task_names(&self, family: &Family) -> Vec<String> {
        match &self.tasks {
            Some(t) => t.clone(),
            None => family.train.iter().map(|&i| family.variants[i].name.clone()).collect(),
        }
    }

    /// The clustering mode actually used: preference-free runs ignore the
    /// critic and monolithic runs never re-cluster.
    pub fn effective_synergy(&self) -> SynergyConfig {
        let mut s = self.synergy;
        s.mode = match self.mode {
            PolicyMode::Monolithic => SynergyMode::Frozen,
            PolicyMode::NoPreference if s.mode == SynergyMode::Full => SynergyMode::NoPreference,
            _ => s.mode,
        };
        s
    }

    /// Resolved config as pretty JSON.
    pub fn to_json(&self) -> String {
        let mut c = self.clone();
        c.synergy = self.effective_synergy();
        serde_json::to_string_pretty(&c).expect("config serializes")
    }
}
