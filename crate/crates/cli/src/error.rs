use std::path::PathBuf;

use epiwarp::correct::CorrectError;
use epiwarp::dwi::DwiError;
use epiwarp::field::FieldError;
use epiwarp::forward::ForwardError;
use epiwarp::imgio::ImageError;
use epiwarp::pipeline::PipelineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {origin}: {message}")]
    Config { origin: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Png {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot start worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

macro_rules! via_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Pipeline(e.into())
            }
        }
    )*};
}

via_pipeline!(ImageError, ForwardError, FieldError, DwiError, CorrectError);

fn forward_is_validation(e: &ForwardError) -> bool {
    match e {
        ForwardError::InvalidParams(_) => true,
        ForwardError::Dwi(d) => dwi_is_validation(d),
        _ => false,
    }
}

fn dwi_is_validation(e: &DwiError) -> bool {
    matches!(e, DwiError::InvalidParams(_) | DwiError::InvalidSpec(_))
}

fn field_is_validation(e: &FieldError) -> bool {
    matches!(
        e,
        FieldError::InvalidScaleRange(..)
            | FieldError::InvalidKeepOrder { .. }
            | FieldError::NoDipoles
            | FieldError::InvalidDipole(_)
    )
}

impl CliError {
    /// 1 for bad arguments or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        let validation = match self {
            CliError::Usage(_) | CliError::Config { .. } => true,
            CliError::Io { .. } | CliError::Png { .. } | CliError::Pool(_) => false,
            CliError::Pipeline(p) => match p {
                PipelineError::InvalidConfig(_)
                | PipelineError::UnknownMethod { .. }
                | PipelineError::MissingNeuralDir
                | PipelineError::NeuralDirNotFound(_) => true,
                PipelineError::Forward(e) => forward_is_validation(e),
                PipelineError::Dwi(e) => dwi_is_validation(e),
                PipelineError::Field(e) => field_is_validation(e),
                PipelineError::Correct(CorrectError::InvalidOptions(_)) => true,
                PipelineError::Correct(CorrectError::Forward(e)) => forward_is_validation(e),
                _ => false,
            },
        };
        if validation {
            1
        } else {
            2
        }
    }
}
