//! Desk-scale toolkit for federated rank learning (FRL).
//!
//! Clients train edge-popup scores on a shared random supernetwork and
//! upload only per-layer rankings of edge importance; the server majority
//! votes the rankings and keeps the top-`k` edges. On top of that protocol
//! this crate provides the edge control attack (steering the global model to
//! a chosen accuracy), a random-ranking baseline attack, ranking-adapted
//! robust aggregators, and the vulnerable-edge probability model with its
//! Monte Carlo check.

pub mod attack;
pub mod defense;
pub mod error;
pub mod network;
pub mod ranking;
pub mod scalar;
pub mod sim;
pub mod theory;

pub use error::{FrlError, Result};
pub use ranking::{
    boundary_gap, invert, mask_distance, mask_from_ranking, mv_aggregate, AggregatedScore, EdgeId,
    ImportanceVector, Ranking, SuperMask,
};
pub use scalar::Real;

/// Double-precision supernetwork used by the simulator.
pub type SuperNetworkF64 = network::SuperNetwork<f64>;
pub type SuperNetworkF32 = network::SuperNetwork<f32>;
pub type DatasetF64 = network::DatasetShard<f64>;
pub type DatasetF32 = network::DatasetShard<f32>;
