//! Network front end for the on-call agent: HTTP and WebSocket API over the
//! engine, a background closure-review lane and file-plus-env configuration.

pub mod api;
pub mod app;
pub mod config;
pub mod error;
pub mod server;
pub mod stream;

pub use app::{App, StreamEvent};
pub use config::ServiceConfig;
pub use error::ServiceError;
