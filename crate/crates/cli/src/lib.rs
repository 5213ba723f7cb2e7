//! Command line front end and HTTP service over the personalization engine.

pub mod api_error;
pub mod args;
pub mod backends;
pub mod commands;
pub mod engine;
pub mod server;

pub use api_error::{ApiError, ErrorCode};
pub use engine::Engine;
