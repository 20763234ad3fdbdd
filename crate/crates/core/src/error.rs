use thiserror::Error;

/// Every failure the library reports. Step-application errors are distinct
/// variants so callers (and tests) can tell them apart.
#[derive(Clone, Debug, Error, PartialEq)]
pub enum Error {
    #[error("invalid dag: {0}")]
    InvalidDag(String),
    #[error("cycle detected: {0}")]
    Cycle(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parse error: {0}")]
    Parse(String),

    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("dangling loop reference `{loop_name}` in stage `{stage}`")]
    UnknownLoop { stage: String, loop_name: String },
    #[error("split of `{stage}`.`{loop_name}` (extent {extent}) by {factors:?} does not divide")]
    BadSplitFactors {
        stage: String,
        loop_name: String,
        extent: u64,
        factors: Vec<u64>,
    },
    #[error("loops `{a}` and `{b}` of `{stage}` are not adjacent")]
    NotAdjacent { stage: String, a: String, b: String },
    #[error("compute_at of `{stage}` under `{target}` creates a dependency cycle")]
    ComputeAtCycle { stage: String, target: String },
    #[error("rfactor of `{stage}` on space loop `{loop_name}`")]
    RfactorOnSpaceLoop { stage: String, loop_name: String },
    #[error("illegal step: {0}")]
    IllegalStep(String),

    #[error("interpreter: {0}")]
    Interpret(String),
    #[error("sketch enumeration for `{dag}` exceeded {cap} states")]
    EnumerationBlowup { dag: String, cap: usize },
    #[error("training: {0}")]
    Training(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
