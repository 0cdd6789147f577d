//! Link specifications, variant families and train/test splits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LinkworldError;
use crate::morphology::MorphologyGraph;

/// One rigid link and the joint connecting it to its parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    /// Metres.
    pub length: f64,
    /// Kilograms.
    pub mass: f64,
    /// Symmetric joint range `[-joint_limit, joint_limit]` in radians.
    pub joint_limit: f64,
    /// Index of the parent link, or -1 for the torso.
    pub parent: i64,
    /// Angle from the parent's direction at joint angle zero. Torso-attached
    /// links measure from straight down.
    #[serde(default)]
    pub rest_angle: f64,
}

impl LinkSpec {
    fn validate(&self, index: usize) -> Result<(), LinkworldError> {
        let bad = |m: &str| Err(LinkworldError::InvalidLink { index, reason: m.to_string() });
        if !(self.length > 0.0 && self.length.is_finite()) {
            return bad("length must be positive");
        }
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return bad("mass must be positive");
        }
        if !(self.joint_limit > 0.0 && self.joint_limit <= std::f64::consts::PI) {
            return bad("joint_limit must lie in (0, pi]");
        }
        if !self.rest_angle.is_finite() {
            return bad("rest_angle must be finite");
        }
        Ok(())
    }
}

/// A named subset of the base links to remove.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Removal {
    pub name: String,
    #[serde(default)]
    pub remove: Vec<usize>,
}

/// The on-disk family description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    pub base: Vec<LinkSpec>,
    pub variants: Vec<Removal>,
    /// Variant names used for training.
    pub train: Vec<String>,
    /// Held-out variant names.
    #[serde(default)]
    pub test: Vec<String>,
}

/// A concrete robot: its links (re-indexed) and morphology.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub links: Vec<LinkSpec>,
    pub graph: MorphologyGraph,
}

impl Variant {
    pub fn num_actuators(&self) -> usize {
        self.links.len()
    }
}

/// Removes each subset from `base`, keeping the remaining links in order.
///
/// A removal is rejected when a kept link would lose its parent.
pub fn make_variants(
    base: &[LinkSpec],
    removals: &[Removal],
    state_dim: usize,
) -> Result<Vec<Variant>, LinkworldError> {
    for (i, l) in base.iter().enumerate() {
        l.validate(i)?;
    }
    removals.iter().map(|r| make_variant(base, r, state_dim)).collect()
}

fn make_variant(base: &[LinkSpec], r: &Removal, state_dim: usize) -> Result<Variant, LinkworldError> {
    let n = base.len();
    let mut removed = vec![false; n];
    for &i in &r.remove {
        if i >= n {
            return Err(LinkworldError::DisconnectedVariant {
                variant: r.name.clone(),
                reason: format!("link {i} does not exist"),
            });
        }
        removed[i] = true;
    }
    let mut new_index = vec![usize::MAX; n];
    let mut links = Vec::new();
    for i in 0..n {
        if removed[i] {
            continue;
        }
        let mut l = base[i].clone();
        if l.parent >= 0 {
            let p = l.parent as usize;
            if p >= n || removed[p] {
                return Err(LinkworldError::DisconnectedVariant {
                    variant: r.name.clone(),
                    reason: format!("link {i} keeps removed parent {p}"),
                });
            }
            if new_index[p] == usize::MAX {
                return Err(LinkworldError::InvalidLink { index: i, reason: "parents must precede children".into() });
            }
            l.parent = new_index[p] as i64;
        }
        new_index[i] = links.len();
        links.push(l);
    }
    if links.is_empty() {
        return Err(LinkworldError::DisconnectedVariant { variant: r.name.clone(), reason: "no links left".into() });
    }
    let parents = links.iter().map(|l| (l.parent >= 0).then_some(l.parent as usize)).collect();
    let graph = MorphologyGraph::new(r.name.clone(), state_dim, parents)
        .map_err(|e| LinkworldError::InvalidLink { index: 0, reason: e.to_string() })?;
    Ok(Variant { name: r.name.clone(), links, graph })
}

/// A loaded family with its split resolved.
#[derive(Clone, Debug)]
pub struct Family {
    pub name: String,
    pub variants: Vec<Variant>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Family {
    pub fn from_spec(spec: &FamilySpec, state_dim: usize) -> Result<Self, LinkworldError> {
        let variants = make_variants(&spec.base, &spec.variants, state_dim)?;
        let find = |name: &String| {
            variants.iter().position(|v| &v.name == name).ok_or_else(|| LinkworldError::UnknownVariant(name.clone()))
        };
        let train = spec.train.iter().map(find).collect::<Result<Vec<_>, _>>()?;
        let test = spec.test.iter().map(find).collect::<Result<Vec<_>, _>>()?;
        if train.is_empty() {
            return Err(LinkworldError::UnknownVariant("empty train split".into()));
        }
        if let Some(t) = test.iter().find(|t| train.contains(t)) {
            return Err(LinkworldError::SplitOverlap(variants[*t].name.clone()));
        }
        Ok(Self { name: spec.name.clone(), variants, train, test })
    }

    pub fn load(path: &Path, state_dim: usize) -> Result<Self, LinkworldError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| LinkworldError::Family(format!("{}: {e}", path.display())))?;
        let spec: FamilySpec =
            serde_json::from_str(&text).map_err(|e| LinkworldError::Family(format!("{}: {e}", path.display())))?;
        Self::from_spec(&spec, state_dim)
    }

    pub fn variant(&self, name: &str) -> Option<&Variant> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Largest actuator count in the family.
    pub fn max_actuators(&self) -> usize {
        self.variants.iter().map(Variant::num_actuators).max().unwrap_or(0)
    }
}
