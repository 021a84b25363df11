//! Toolkit for graph-to-text experiments with large language models.
//!
//! Modules follow the experiment pipeline: [`graph`] models triplet graphs,
//! [`selection`] picks few-shot demonstrations, [`prompting`] builds chat
//! requests, [`gateway`] talks to chat/embedding backends, [`attribution`]
//! parses reorder-and-attribute outputs, [`metrics`] scores generations,
//! [`forge`] grows attributed training data, and [`curriculum`] emits
//! training schedules.

pub mod graph;
pub mod selection;
pub mod prompting;
pub mod attribution;
pub mod metrics;
pub mod gateway;
pub mod forge;
pub mod curriculum;
