use std::io;
use std::path::Path;

use mixkit_core::corpus::CorpusError;
use mixkit_core::dedup::DedupError;
use mixkit_core::filtering::FilterError;
use mixkit_core::mixplan::PlanError;
use mixkit_core::ngram_lm::NGramError;
use mixkit_core::scaling::ScalingError;
use mixkit_core::tokenizer::TokenizerError;
use thiserror::Error;

/// Exit status for bad configuration or input.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit status for failures while a stage is running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    NGram(#[from] NGramError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// Bad input data and bad parameters are validation failures; everything
    /// else happened while doing the work.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => EXIT_VALIDATION,
            CliError::Corpus(CorpusError::Malformed { .. } | CorpusError::DuplicateId { .. }) => EXIT_VALIDATION,
            CliError::Filter(
                FilterError::InvalidConfig(_) | FilterError::Parse { .. } | FilterError::MissingQuality(_),
            ) => EXIT_VALIDATION,
            CliError::Dedup(DedupError::BandMismatch { .. } | DedupError::Parse { .. }) => EXIT_VALIDATION,
            CliError::NGram(
                NGramError::Parse { .. } | NGramError::InvalidOrder(_) | NGramError::InvalidDiscount(_),
            ) => EXIT_VALIDATION,
            CliError::Tokenizer(
                TokenizerError::InvalidModel(_) | TokenizerError::Json(_) | TokenizerError::VocabTooSmall(_),
            ) => EXIT_VALIDATION,
            CliError::Plan(_) => EXIT_VALIDATION,
            CliError::Scaling(
                ScalingError::InvalidObservation(_)
                | ScalingError::TooFewObservations { .. }
                | ScalingError::DegenerateGrid { .. }
                | ScalingError::GridOutOfRange(_)
                | ScalingError::MissingLanguage(_),
            ) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
