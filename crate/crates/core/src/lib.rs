#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Difficulty-aware group policy optimization for verifiable-reward training,
//! with the GRPO-family baselines, a tabular toy policy to train end to end,
//! and an answer-preserving question reformulation pipeline.

pub mod advantage;
pub mod domain;
pub mod mqr;
pub mod objective;
pub mod policy;
pub mod tasks;
pub mod trainer;
pub mod verify;
pub mod weighting;
