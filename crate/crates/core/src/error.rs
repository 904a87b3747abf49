use std::path::PathBuf;

use thiserror::Error;

use crate::glm::FittedGlm;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("i/o error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("line {line}: mixed schemas within one file (expected {expected} fields, found {found})")]
    MixedSchema {
        line: usize,
        expected: &'static str,
        found: &'static str,
    },

    #[error("line {line}: unknown group label {label:?}")]
    UnknownGroupLabel { line: usize, label: String },

    #[error("line {line}: non-numeric covariate {value:?}")]
    NonNumericCovariate { line: usize, value: String },

    #[error("line {line}: covariate vector has length {found}, expected {expected}")]
    CovariateDimension {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("speaker {speaker:?} appears under two group labels ({first:?} and {second:?})")]
    SpeakerInTwoGroups {
        speaker: String,
        first: String,
        second: String,
    },

    #[error("invalid group factor: {0}")]
    InvalidFactor(String),

    #[error("group level {0:?} has no utterances")]
    EmptyLevel(String),

    #[error("unknown group level {0:?}")]
    UnknownLevel(String),

    #[error("unknown covariate {0:?}")]
    UnknownCovariate(String),

    #[error("invalid utterance: {0}")]
    InvalidUtterance(String),

    #[error("empty corpus exposure: total reference words is zero")]
    EmptyCorpusExposure,

    #[error("non-identifiable design: {0}")]
    NonIdentifiableDesign(String),

    #[error("failed to converge after {iterations} iterations (gradient max-norm {gradient_norm:.3e})")]
    FailedToConverge {
        iterations: usize,
        gradient_norm: f64,
        last: Option<Box<FittedGlm>>,
    },

    #[error("mixed model failed to converge after {evaluations} objective evaluations")]
    MixedModelNotConverged { evaluations: usize },

    #[error("conditional mode search failed for speaker block after {iterations} Newton iterations")]
    ModeNotFound { iterations: usize },

    #[error("the group factor is not speaker-level; the mixed model needs one level per speaker")]
    FactorNotSpeakerLevel,

    #[error("mixed model needs at least two speakers, found {0}")]
    TooFewSpeakers(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("zero fitted rate for observation {0}")]
    ZeroFittedRate(usize),

    #[error("control group has zero errors; WER ratio is infinite")]
    InfiniteRatio,

    #[error("bootstrap could not draw a non-degenerate resample after {redraws} redraws")]
    DegenerateBootstrap { redraws: usize },

    #[error("fit has not converged")]
    NotConverged,

    #[error("models are not nested: {0}")]
    NotNested(String),

    #[error("models were fitted on different corpora")]
    MismatchedCorpora,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// True for failures of an iterative fit (as opposed to bad input).
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            Error::FailedToConverge { .. }
                | Error::MixedModelNotConverged { .. }
                | Error::ModeNotFound { .. }
                | Error::NotConverged
        )
    }
}
