//! Recurrent-state update gating on a toy cross-attention state model.
//!
//! The crate is organized bottom-up:
//!
//! - [`state_model`]: the dual-stream cross-attention decoder producing the per-frame
//!   residual, the raw cross-attention logits and the features the frame gates read.
//! - [`gates`]: the per-token gate, the frame gates and their fusions.
//! - [`update_rules`]: the three state-update rules and the sequence driver.
//! - [`horizon`]: gate statistics and memory-horizon arithmetic.
//! - [`probes`]: synthetic token streams, the redundancy-injection probe and sweeps.
//! - [`trajectory`] and [`depth`]: the evaluation toolkit (Sim(3) alignment, ATE/RPE,
//!   depth metrics, TUM/KITTI/depth file formats).

pub mod depth;
pub mod error;
pub mod gates;
pub mod horizon;
pub mod probes;
pub mod report;
pub mod state_model;
pub mod trajectory;
pub mod update_rules;

pub use error::{Error, Result};
