//! Point-action expert: hierarchical point-cloud encoding with bottleneck
//! window self-attention, multi-scale point-action interaction, regression
//! and point-anchored classification heads, and a synthetic behavior-cloning
//! benchmark for training and evaluating the whole stack on a CPU.

pub mod context;
pub mod expert;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod nn;
pub mod trainer;
