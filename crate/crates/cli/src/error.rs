use polydiff_core::diffusion::DiffusionError;
use polydiff_core::melnikov::MelnikovError;
use polydiff_core::transition::TransitionError;
use polydiff_core::variational::VariationalError;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error at {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
    #[error(transparent)]
    Loop(#[from] VariationalError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// 0 success, 1 I/O, 2 configuration, 3 condition 1 violated,
    /// 4 minimum on the box boundary, 5 any other numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Melnikov(e) => melnikov_code(e),
            CliError::Loop(e) => loop_code(e),
            CliError::Transition(e) => transition_code(e),
            CliError::Diffusion(e) => match e {
                DiffusionError::Plan(_) => 2,
                DiffusionError::Transition { source, .. } => transition_code(source),
                DiffusionError::Junction(t) => transition_code(t),
                DiffusionError::Melnikov(m) => melnikov_code(m),
                DiffusionError::Loop(l) => loop_code(l),
                _ => 5,
            },
        }
    }
}

fn melnikov_code(e: &MelnikovError) -> i32 {
    match e {
        MelnikovError::Condition1Violated { .. } => 3,
        MelnikovError::InvalidArgument(_) => 2,
        _ => 5,
    }
}

fn loop_code(e: &VariationalError) -> i32 {
    match e {
        VariationalError::InvalidBoundary(_)
        | VariationalError::IntervalTooShort { .. }
        | VariationalError::SlopeOutOfBand { .. } => 2,
        _ => 5,
    }
}

fn transition_code(e: &TransitionError) -> i32 {
    match e {
        TransitionError::MinimumOnBoundary { .. } => 4,
        TransitionError::InvalidArgument(_) | TransitionError::NoAdmissibleTranslate => 2,
        TransitionError::Melnikov(m) => melnikov_code(m),
        TransitionError::Loop(l) => loop_code(l),
        TransitionError::NoCrossing => 5,
    }
}
