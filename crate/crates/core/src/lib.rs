//! Federated low-rank adapter simulator.
//!
//! Clients fine-tune LoRA adapters of heterogeneous rank on a frozen toy
//! network. The server aggregates them with one of three strategies:
//!
//! - [`aggregate::aggregate_naive`]: factor-wise averaging of `B` and `A`
//!   (requires every client at the same rank).
//! - [`aggregate::aggregate_flexlora`]: weighted average of full-size deltas
//!   `s·B·A`, then SVD and per-client rank truncation
//!   ([`aggregate::redistribute`]).
//! - [`aggregate::aggregate_hetlora`]: zero-pad factors to the maximum rank,
//!   average, and hand back leading columns/rows.
//!
//! [`federation`] drives rounds, [`taskgen`] builds synthetic non-IID
//! worlds, and [`cli`] wraps everything behind `run`, `verify` and `sweep`.

pub mod adapter;
pub mod aggregate;
pub mod cli;
pub mod error;
pub mod federation;
pub mod lowrank;
pub mod model;
pub mod seed;
pub mod taskgen;

pub use error::{Error, Result};
