//! Reward-machine task decomposition for cooperative multi-agent
//! reinforcement learning, with online selection among candidate
//! decompositions and a tabular task-conditioned learner.

pub mod builtin;
pub mod decomp;
pub mod envs;
pub mod rm;
pub mod selection;
pub mod training;
pub mod harness;
