//! Crate error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("map generation failed: {0}")]
    MapGeneration(String),

    #[error("node placement failed: {0}")]
    NodePlacement(String),

    #[error("path graph construction failed: {0}")]
    PathGraph(String),

    #[error("distance {0} m is below the {1} m reference-distance guard")]
    DistanceGuard(f64, f64),

    #[error("learning horizon too short: N_l = {0}, need at least 2")]
    HorizonTooShort(usize),

    #[error("terminal unreachable within horizon {horizon}; minimum reachable stage count is {min_stages}")]
    TerminalUnreachable { horizon: usize, min_stages: usize },

    #[error("logistic fit failed: {0}")]
    LogisticFit(String),

    #[error("conic problem is malformed: {0}")]
    ConicProblem(String),

    #[error("conic solve failed: {0}")]
    ConicSolve(String),

    #[error("communication planning failed: {0}")]
    CommPlan(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
