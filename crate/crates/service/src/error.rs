use std::net::SocketAddr;

use oncall_core::error::{EngineError, GatewayError, StoreError};
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("knowledge store failed to load: {0}")]
    StoreLoad(StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot listen on {addr}: {source}")]
    PortInUse { addr: SocketAddr, source: std::io::Error },
    #[error("startup: {0}")]
    Startup(String),
    #[error("server: {0}")]
    Serve(#[from] std::io::Error),
}
