//! Render-and-compare 6D pose refinement via reinforcement learning.
//!
//! The crate implements a complete desk-scale pipeline: a software silhouette
//! rasterizer backing a pose-refinement MDP, a 2D mask-based reward, a
//! two-branch policy network with hand-written forward/backward passes, a
//! composite on-policy (clipped surrogate) + off-policy (V-trace) optimizer,
//! and the usual pose accuracy metrics (Proj.2D, ADD, ADD-S).
//!
//! Modules map one-to-one onto the pipeline stages:
//!
//! - [`pose`]: rigid transforms, the 13+13 action catalog, initial-pose noise
//! - [`raster`]: pinhole projection and deterministic mask rasterization
//! - [`reward`]: IoU-difference / goal / centralization reward stack
//! - [`env`]: the MDP (reset, step, observation assembly)
//! - [`policy`]: the disentangled two-branch policy network
//! - [`optim`]: composite reinforced optimization and the replay buffer
//! - [`metrics`]: Proj.2D, ADD, ADD-S, diameter, threshold aggregation
//! - [`eval`]: greedy rollouts and accuracy-vs-step curves
//! - [`config`]: the flat `section.key = value` run configuration

// Validation predicates use `!(x > 0.0)` style on purpose: the negated
// form also rejects NaN, which `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod pose;
pub mod raster;
pub mod reward;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Derives an independent sub-seed from a master seed and a purpose tag.
///
/// SplitMix64 over the xored inputs; used everywhere a component needs its
/// own deterministic RNG stream (policy init, episode k, train loop, eval).
pub fn derive_seed(master: u64, purpose: u64) -> u64 {
    let mut z = master ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
