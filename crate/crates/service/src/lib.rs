//! Run persistence, job orchestration, HTTP API and CLI for the debugging
//! workbench.

pub mod api;
pub mod cli;
pub mod error;
pub mod jobs;
pub mod record;
pub mod store;

pub use error::{Result, ServiceError};
