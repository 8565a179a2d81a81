//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("network evaluation produced a non-finite output (check parameters)")]
    NonFiniteEval,

    #[error("non-finite gradient at parameter index {index}; parameters untouched")]
    NonFiniteGradient { index: usize },

    #[error("length mismatch: expected {expected}, got {got} ({what})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("time {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("step {dt} exceeds remaining time {t}")]
    StepTooLarge { t: f64, dt: f64 },

    #[error("transition at t = 0 is undefined (drift divides by t)")]
    ZeroTime,

    #[error("degenerate transition: std = 0 has no density")]
    DegenerateTransition,

    #[error("ddim schedule infeasible at t = {t}, dt = {dt}: sigma = {sigma} exceeds t - dt = {limit}")]
    ScheduleInfeasible { t: f64, dt: f64, sigma: f64, limit: f64 },

    #[error("unknown context id {context} (task has {available})")]
    UnknownContext { context: usize, available: usize },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("pretraining finished at held-out loss {achieved}, above threshold {threshold}")]
    PretrainShortfall { achieved: f64, threshold: f64 },

    #[error("on-policy objective requires current == old parameters")]
    NotOnPolicy,

    #[error("progressive distillation needs at least 3 denoising steps, got {steps}")]
    TooFewSteps { steps: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
