//! Closed-form model editing under the preservation-memorization objective.
//!
//! The crate implements the ROME, MEMIT and EMMET weight updates, the
//! multi-layer edit-distribution schedule, and an experiment harness that
//! exercises them on a small synthetic model whose every layer is a linear
//! associative memory. Independent reference solvers in [`oracle`] check the
//! closed forms.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distribution;
pub mod error;
pub mod exec;
pub mod facts;
pub mod feature;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod solvers;
pub mod toymodel;
pub mod weights;

pub use error::{Error, Result};
pub use exec::Execution;
pub use facts::{FactRecord, PreservationSet};
pub use solvers::{Method, SolverConfig, UpdateResult};
pub use toymodel::{ModelConfig, Snapshot, ToyModel};
