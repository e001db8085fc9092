use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("trial format error (subject {subject}, gesture {gesture}, trial {trial}): {reason}")]
    TrialFormat {
        subject: u32,
        gesture: usize,
        trial: u32,
        reason: String,
    },
    #[error("output directory error: {0}")]
    OutputDir(String),
    #[error("insufficient samples: need {needed}, trial has {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("fold plan error: {0}")]
    FoldPlan(String),
    #[error("augmentation error: {0}")]
    Augment(String),
    #[error("time warp error: {0}")]
    Warp(String),
    #[error("numerics error: {0}")]
    Numerics(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("leakage error: {0}")]
    Leakage(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
