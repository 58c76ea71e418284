//! Edge server for the free-viewpoint pipeline, plus the simulated capture
//! nodes and viewer client used to drive it.

pub mod bench;
pub mod bridge;
pub mod capture;
pub mod clock;
pub mod config;
pub mod liveness;
pub mod pipeline;
pub mod server;
pub mod stats;
pub mod sweep;
pub mod viewer;

pub use clock::{Clock, ManualClock, SharedClock, SystemClock};
pub use config::{OutputEncoding, RunMode, ServerConfig};
pub use server::{start, ServerHandle};
pub use stats::{PipelineStats, StageTimings};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("config: {0}")]
    Config(String),
    #[error("startup: {0}")]
    Startup(String),
    #[error("synthesis: {0}")]
    Synthesis(String),
    #[error("encode: {0}")]
    Encode(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("{0}")]
    Transport(#[from] fvv_core::transport::TransportError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Remote(String),
}
