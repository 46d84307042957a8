//! Command line and HTTP front ends.

mod cli;
mod service;

pub use cli::{cli_main, AblateFile, Cli, Command, TrainFile};
pub use service::{
    handle_rerank, router, serve, Engine, HealthResponse, PassageInput, RerankRequest, RerankResponse, RerankResult,
    ServiceError, DEFAULT_MAX_PASSAGES,
};
