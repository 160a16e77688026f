//! Command-line pipeline and HTTP chat service for the `meed` models.

pub mod cli;
pub mod config;
pub mod error;
pub mod server;
pub mod sessions;

pub use config::ServiceConfig;
pub use error::{ApiError, ServiceError};
pub use server::{router, App};
