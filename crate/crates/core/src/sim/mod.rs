//! Offline knowledge simulator: a synthetic world plus a backend whose
//! recall and self-agreement are controlled by per-entity knowledge.

mod backend;
mod world;

pub use backend::{SimBackend, SimConfig, REFUSAL};
pub use world::{
    knowledge_range, make_world, oracle_truth, Attribute, Entity, Fact, SimWorld, StatementInfo,
    TierMix, WorldSpec,
};
