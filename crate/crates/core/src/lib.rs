//! Gallery filtering for person search at the embedding level.
//!
//! The crate covers the full path from annotations to metrics:
//!
//! - [`data`]: dataset schema, open-set splitting, retrieval partitions and
//!   embedding stores
//! - [`gfn`]: indicator functions, excitation fusion, the three contrastive
//!   objectives and inference scoring
//! - [`oim`]: the re-id objective with its identity table, plus the lookup
//!   table and candidate sampling used during training
//! - [`objective_graph`]: attraction/repulsion graphs and their
//!   well-posedness checks
//! - [`retrieval`]: two-phase filter-then-rank search
//! - [`eval`]: retrieval, detection and filtering metrics
//! - [`synth`]: a synthetic world and trainer for end-to-end checks

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dsu;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gfn;
pub mod math;
pub mod objective_graph;
pub mod oim;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};
