//! Relational transformer for multi-table databases.
//!
//! The crate covers the full path from raw tables to predictions:
//!
//! - [`store`]: schemas, immutable row stores with F→P / P→F link indexes,
//!   task tables and temporal splits;
//! - [`sampler`]: bounded-width BFS context sampling with a temporal filter;
//! - [`codec`]: datatype-specific cell encoding and schema-phrase embeddings;
//! - [`attention`]: the column / feature / neighbor / full visibility masks and
//!   the masked attention block;
//! - [`model`]: parameters, forward pass, decoders, losses and their gradients;
//! - [`train`]: masking policy, AdamW with warmup/decay, checkpoints and a
//!   finite-difference gradient checker;
//! - [`eval`]: metrics, the EntityMean baseline, context ablations and
//!   synthetic database generators.

pub mod attention;
pub mod codec;
pub mod eval;
pub mod fixtures;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod store;
pub mod tensor;
pub mod train;

pub use store::{RelationalDatabase, RowRef, StoreError};
