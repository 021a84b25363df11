//! Orchestration for the `gtt` command: dataset adapters, experiment runs,
//! evaluation reports and synthetic fixtures.

pub mod app;
pub mod experiment;
pub mod ingest;
pub mod synthetic;
