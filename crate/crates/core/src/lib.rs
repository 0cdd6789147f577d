//! Synergy-oriented modular reinforcement learning on toy link-chain robots.
//!
//! Actuators are grouped into synergies by affinity propagation over
//! critic-derived preferences and morphology-derived affinities; a
//! transformer actor emits one action per synergy and a learned linear map
//! spreads those onto the actuators. Training is TD3.

pub mod clustering;
pub mod harness;
pub mod linkworld;
pub mod morphology;
pub mod numerics;
pub mod policy;
pub mod synergy;
pub mod td3;
