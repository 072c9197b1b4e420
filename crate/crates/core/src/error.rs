use thiserror::Error;

use crate::domain::Role;
use crate::rubric::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the HTTP layer to pick a status code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Invalid,
    Unauthorized,
    Forbidden,
    NotFound,
    Conflict,
    Rejected,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("course name must be nonempty")]
    InvalidName,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("a course named {0:?} already exists")]
    DuplicateName(String),
    #[error("enrollment code {0:?} is already used by another course")]
    DuplicateCode(String),
    #[error("unknown enrollment code")]
    UnknownCode,
    #[error("already enrolled as {0}")]
    AlreadyEnrolled(Role),
    #[error("{0} not found")]
    NotFound(String),
    #[error("not permitted: {0}")]
    Forbidden(String),
    #[error("review failed validation")]
    Validation(Vec<Violation>),
    #[error("quiz attempts exhausted")]
    AttemptsExhausted,
    #[error("prerequisite quiz not submitted")]
    PrerequisiteMissing,
    #[error("submission exceeds the length limit: {0}")]
    TooLong(String),
    #[error("submission rejected: {0}")]
    LateRejected(String),
    #[error("deadline not passed: {0}")]
    DeadlineNotPassed(String),
    #[error("deadline passed: {0}")]
    DeadlinePassed(String),
    #[error("grades are not final yet")]
    GradesNotFinal,
    #[error("an appeal is already open for this submission")]
    DuplicateAppeal,
    #[error("an open flag by this reporter already exists for this review")]
    DuplicateFlag,
    #[error("an evaluation of this review is already pending")]
    DuplicateEvaluation,
    #[error("already resolved")]
    AlreadyResolved,
    #[error("no usable reviews")]
    NoUsableReviews,
    #[error("ungradable: no reviews of any kind; schedule a TA review")]
    Ungradable,
    #[error("missing ground truth for calibration item")]
    MissingGroundTruth,
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("corrupt event log: {0}")]
    CorruptLog(String),
    #[error("malformed archive: {0}")]
    MalformedArchive(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn not_found(what: impl std::fmt::Display) -> Self {
        Error::NotFound(what.to_string())
    }

    pub fn forbidden(msg: impl Into<String>) -> Self {
        Error::Forbidden(msg.into())
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidName => "invalid_name",
            Error::Invalid(_) => "invalid",
            Error::DuplicateName(_) => "duplicate_name",
            Error::DuplicateCode(_) => "duplicate_code",
            Error::UnknownCode => "unknown_code",
            Error::AlreadyEnrolled(_) => "already_enrolled",
            Error::NotFound(_) => "not_found",
            Error::Forbidden(_) => "forbidden",
            Error::Validation(_) => "validation_failed",
            Error::AttemptsExhausted => "attempts_exhausted",
            Error::PrerequisiteMissing => "prerequisite",
            Error::TooLong(_) => "too_long",
            Error::LateRejected(_) => "late_rejected",
            Error::DeadlineNotPassed(_) => "deadline_not_passed",
            Error::DeadlinePassed(_) => "deadline_passed",
            Error::GradesNotFinal => "grades_not_final",
            Error::DuplicateAppeal => "duplicate_appeal",
            Error::DuplicateFlag => "duplicate_flag",
            Error::DuplicateEvaluation => "duplicate_evaluation",
            Error::AlreadyResolved => "already_resolved",
            Error::NoUsableReviews => "no_usable_reviews",
            Error::Ungradable => "ungradable",
            Error::MissingGroundTruth => "missing_ground_truth",
            Error::Conflict(_) => "conflict",
            Error::CorruptLog(_) => "corrupt_log",
            Error::MalformedArchive(_) => "malformed_archive",
            Error::Io(_) => "io",
            Error::Serde(_) => "serialization",
            Error::Csv(_) => "csv",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidName
            | Error::Invalid(_)
            | Error::Validation(_)
            | Error::TooLong(_)
            | Error::MalformedArchive(_) => ErrorClass::Invalid,
            Error::Forbidden(_) => ErrorClass::Forbidden,
            Error::NotFound(_) | Error::UnknownCode => ErrorClass::NotFound,
            Error::DuplicateName(_)
            | Error::DuplicateCode(_)
            | Error::AlreadyEnrolled(_)
            | Error::DuplicateAppeal
            | Error::DuplicateFlag
            | Error::DuplicateEvaluation
            | Error::AlreadyResolved
            | Error::Conflict(_) => ErrorClass::Conflict,
            Error::AttemptsExhausted
            | Error::PrerequisiteMissing
            | Error::LateRejected(_)
            | Error::DeadlineNotPassed(_)
            | Error::DeadlinePassed(_)
            | Error::GradesNotFinal
            | Error::NoUsableReviews
            | Error::Ungradable
            | Error::CorruptLog(_)
            | Error::MissingGroundTruth => ErrorClass::Rejected,
            Error::Io(_) | Error::Serde(_) | Error::Csv(_) => ErrorClass::Internal,
        }
    }

    /// Whether retrying the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Conflict(_))
    }
}
