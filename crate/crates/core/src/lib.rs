//! Personalized, context-aware route planning.
//!
//! A discrete-time traffic simulator provides network states, a GIN-E
//! Q-network scores candidate routes, and deep Q-learning trains it against a
//! reward mixing driver satisfaction, travel time and network flow.

pub mod checkpoint;
pub mod config;
pub mod dqn;
pub mod driver;
pub mod experiment;
pub mod gnn;
pub mod network;
pub mod paths;
pub mod rewards;
pub mod scenarios;
pub mod service;
pub mod sim;

use thiserror::Error;

/// Top-level error, grouping module errors into the classes the CLI reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] network::NetworkError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Path(#[from] paths::PathError),
    #[error(transparent)]
    Driver(#[from] driver::DriverError),
    #[error(transparent)]
    Reward(#[from] rewards::RewardError),
    #[error(transparent)]
    Gnn(#[from] gnn::GnnError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Dqn(#[from] dqn::DqnError),
    #[error(transparent)]
    Service(#[from] service::ServiceError),
}

impl Error {
    /// Config-class failures exit with 2, everything else with 3.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse(_)
                | Error::Network(_)
                | Error::Reward(rewards::RewardError::InvalidWeights(..))
                | Error::Dqn(dqn::DqnError::Config(_) | dqn::DqnError::IncompatibleCheckpoint(_))
        )
    }
}
