//! EGTAS: surrogate-assisted evolutionary search over a unified
//! macro/micro graph-Transformer architecture space, with an exact
//! desk-scale evaluator, pluggable surrogate regressors, synthetic graph
//! benchmarks, and an operator CLI.

pub mod autodiff;
pub mod cli;
pub mod datasets;
pub mod evo_search;
pub mod graph_core;
pub mod gt_model;
pub mod linalg;
pub mod search_space;
pub mod surrogate;
pub mod trainer;
