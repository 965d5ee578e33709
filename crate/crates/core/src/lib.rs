//! Step-level agentic RL laboratory.
//!
//! Trajectories are stored as sequences of step records, each carrying the
//! exact token ids and behaviour log-probs generated at that step. Credit
//! assignment and the clipped surrogate operate on whole steps, with
//! token-level and trajectory-level baselines available for comparison.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod credit;
pub mod env;
pub mod gateway_datapool;
pub mod harness;
pub mod optimizer;
pub mod policy;
pub mod prefix_tree;
pub mod store;
pub mod tokenizer;
