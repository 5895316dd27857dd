//! Codified decision trees for character role-play: corpus handling, tree
//! induction with model oracles, grounding, rendering and evaluation.

pub mod clustering;
pub mod codex;
pub mod corpus;
pub mod evalharness;
pub mod grounding;
pub mod induction;
pub mod oracle;
pub mod templates;
pub mod verbalize;
