//! Assignment lifecycle rules: timelines, late-day accounting, per-type
//! payload checks and visibility.

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};

use crate::domain::{AssignmentId, CourseId, Pool, Role, RubricId, SubmissionId, Timestamp, UserId};
use crate::error::{Error, Result};
use crate::rubric::{QuizKey, Reveal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "unit", content = "max", rename_all = "snake_case")]
pub enum TextLimit {
    Chars(usize),
    Words(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Pdf,
    Text,
    Code,
}

const CODE_EXTENSIONS: &[&str] = &[
    "c", "cc", "cpp", "cs", "go", "h", "hpp", "hs", "java", "js", "jl", "kt", "lua", "m", "ml",
    "php", "pl", "py", "r", "rb", "rs", "scala", "sh", "sql", "swift", "ts",
];

impl FileKind {
    /// Classifies a file by extension. Unknown extensions are not accepted.
    pub fn from_filename(name: &str) -> Option<FileKind> {
        let ext = name.rsplit_once('.')?.1.to_ascii_lowercase();
        match ext.as_str() {
            "pdf" => Some(FileKind::Pdf),
            "txt" | "md" | "text" => Some(FileKind::Text),
            e if CODE_EXTENSIONS.contains(&e) => Some(FileKind::Code),
            _ => None,
        }
    }

    pub fn media_type(self) -> &'static str {
        match self {
            FileKind::Pdf => "application/pdf",
            FileKind::Text | FileKind::Code => "text/plain; charset=utf-8",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizQuestion {
    pub prompt: String,
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizConfig {
    pub questions: Vec<QuizQuestion>,
    pub correct_choices: Vec<usize>,
    #[serde(default)]
    pub max_attempts: Option<u32>,
    pub reveal: Reveal,
    pub out_of: f64,
    /// Assignments that cannot be submitted until this quiz has been.
    #[serde(default)]
    pub prerequisite_for: Vec<AssignmentId>,
}

impl QuizConfig {
    pub fn key(&self, assignment_id: AssignmentId) -> QuizKey {
        QuizKey {
            assignment_id,
            correct_choices: self.correct_choices.clone(),
            max_attempts: self.max_attempts,
            reveal: self.reveal,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.questions.is_empty() {
            return Err(Error::invalid("quiz needs at least one question"));
        }
        if self.correct_choices.len() != self.questions.len() {
            return Err(Error::invalid("quiz key must cover every question"));
        }
        for (q, &c) in self.questions.iter().zip(&self.correct_choices) {
            if q.options.len() < 2 || c >= q.options.len() {
                return Err(Error::invalid("quiz question needs two options and an in-range key"));
            }
        }
        if self.max_attempts == Some(0) {
            return Err(Error::invalid("max_attempts must be positive"));
        }
        if !(self.out_of > 0.0) {
            return Err(Error::invalid("quiz must be out of a positive number of points"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AssignmentKind {
    Text {
        #[serde(default)]
        limit: Option<TextLimit>,
    },
    Upload { accepted: Vec<FileKind> },
    Quiz(QuizConfig),
}

impl AssignmentKind {
    pub fn label(&self) -> &'static str {
        match self {
            AssignmentKind::Text { .. } => "text",
            AssignmentKind::Upload { .. } => "upload",
            AssignmentKind::Quiz(_) => "quiz",
        }
    }
}

/// Assignment fields supplied by staff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSpec {
    pub name: String,
    pub kind: AssignmentKind,
    #[serde(default)]
    pub problem_statement: String,
    /// Rubric peers and TAs grade with; required for text and upload.
    #[serde(default)]
    pub rubric_id: Option<RubricId>,
    pub release_at: Timestamp,
    pub deadline: Timestamp,
    pub student_review_deadline: Timestamp,
    pub ta_review_deadline: Timestamp,
    #[serde(default)]
    pub grace_period_secs: i64,
    #[serde(default)]
    pub late_unit_limit: u32,
    #[serde(default = "default_true")]
    pub visible: bool,
}

fn default_true() -> bool {
    true
}

impl AssignmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::invalid("assignment name must be nonempty"));
        }
        if !(self.release_at <= self.deadline
            && self.deadline <= self.student_review_deadline
            && self.student_review_deadline <= self.ta_review_deadline)
        {
            return Err(Error::invalid(
                "timeline must satisfy release <= deadline <= review deadline <= TA deadline",
            ));
        }
        if self.grace_period_secs < 0 {
            return Err(Error::invalid("grace period must be non-negative"));
        }
        match &self.kind {
            AssignmentKind::Quiz(q) => q.validate()?,
            AssignmentKind::Upload { accepted } if accepted.is_empty() => {
                return Err(Error::invalid("upload assignment must accept some file kind"))
            }
            AssignmentKind::Text { limit: Some(TextLimit::Chars(0) | TextLimit::Words(0)) } => {
                return Err(Error::invalid("text limit must be positive"))
            }
            _ => {}
        }
        if !matches!(self.kind, AssignmentKind::Quiz(_)) && self.rubric_id.is_none() {
            return Err(Error::invalid("text and upload assignments need a rubric"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub id: AssignmentId,
    pub course_id: CourseId,
    pub name: String,
    pub kind: AssignmentKind,
    pub problem_statement: String,
    pub rubric_id: Option<RubricId>,
    pub release_at: Timestamp,
    pub deadline: Timestamp,
    pub student_review_deadline: Timestamp,
    pub ta_review_deadline: Timestamp,
    pub grace_period_secs: i64,
    pub late_unit_limit: u32,
    pub visible: bool,
}

impl Assignment {
    pub fn new(id: AssignmentId, course_id: CourseId, spec: AssignmentSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            id,
            course_id,
            name: spec.name,
            kind: spec.kind,
            problem_statement: spec.problem_statement,
            rubric_id: spec.rubric_id,
            release_at: spec.release_at,
            deadline: spec.deadline,
            student_review_deadline: spec.student_review_deadline,
            ta_review_deadline: spec.ta_review_deadline,
            grace_period_secs: spec.grace_period_secs,
            late_unit_limit: spec.late_unit_limit,
            visible: spec.visible,
        })
    }

    pub fn spec(&self) -> AssignmentSpec {
        AssignmentSpec {
            name: self.name.clone(),
            kind: self.kind.clone(),
            problem_statement: self.problem_statement.clone(),
            rubric_id: self.rubric_id,
            release_at: self.release_at,
            deadline: self.deadline,
            student_review_deadline: self.student_review_deadline,
            ta_review_deadline: self.ta_review_deadline,
            grace_period_secs: self.grace_period_secs,
            late_unit_limit: self.late_unit_limit,
            visible: self.visible,
        }
    }

    pub fn grace_period(&self) -> TimeDelta {
        TimeDelta::seconds(self.grace_period_secs)
    }

    pub fn quiz(&self) -> Option<&QuizConfig> {
        match &self.kind {
            AssignmentKind::Quiz(q) => Some(q),
            _ => None,
        }
    }

    /// Last instant at which a submission would still be accepted, ignoring
    /// the student's remaining budget.
    pub fn last_acceptance(&self) -> Timestamp {
        self.deadline + self.grace_period() + TimeDelta::days(self.late_unit_limit as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateRejection {
    NotYetOpen,
    ExceedsAssignmentLimit,
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum LateAssessment {
    OnTime,
    Late(u32),
    Rejected(LateRejection),
}

impl LateAssessment {
    pub fn days(self) -> u32 {
        match self {
            LateAssessment::Late(d) => d,
            _ => 0,
        }
    }
}

/// Classifies a submission time. Anything up to deadline + grace is on time;
/// beyond that, each started 24 hours counts as one late day.
pub fn submission_lateness(t: Timestamp, a: &Assignment, budget_remaining: u32) -> LateAssessment {
    if t < a.release_at {
        return LateAssessment::Rejected(LateRejection::NotYetOpen);
    }
    let cutoff = a.deadline + a.grace_period();
    if t <= cutoff {
        return LateAssessment::OnTime;
    }
    let over = (t - cutoff).num_milliseconds();
    let day = TimeDelta::days(1).num_milliseconds();
    let days = over.div_euclid(day) + i64::from(over.rem_euclid(day) != 0);
    let days = u32::try_from(days).unwrap_or(u32::MAX);
    if days > a.late_unit_limit {
        LateAssessment::Rejected(LateRejection::ExceedsAssignmentLimit)
    } else if days > budget_remaining {
        LateAssessment::Rejected(LateRejection::BudgetExhausted)
    } else {
        LateAssessment::Late(days)
    }
}

pub fn check_text(body: &str, limit: Option<TextLimit>) -> Result<()> {
    match limit {
        Some(TextLimit::Chars(max)) => {
            let n = body.chars().count();
            if n > max {
                return Err(Error::TooLong(format!("{n} characters, limit {max}")));
            }
        }
        Some(TextLimit::Words(max)) => {
            let n = body.split_whitespace().count();
            if n > max {
                return Err(Error::TooLong(format!("{n} words, limit {max}")));
            }
        }
        None => {}
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Text { body: String },
    File { blob: String, filename: String, media_type: String },
    Quiz { answers: Vec<usize> },
}

impl Payload {
    pub fn label(&self) -> &'static str {
        match self {
            Payload::Text { .. } => "text",
            Payload::File { .. } => "file",
            Payload::Quiz { .. } => "quiz",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionOrigin {
    Student,
    Ingested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub id: SubmissionId,
    pub assignment_id: AssignmentId,
    pub author: UserId,
    pub payload: Payload,
    pub submitted_at: Timestamp,
    pub late_days_charged: u32,
    /// Number of submit calls made; quiz attempts are limited by it.
    pub attempts: u32,
    pub author_pool: Pool,
    pub origin: SubmissionOrigin,
    #[serde(default)]
    pub quiz_grade: Option<f64>,
    /// Event sequence of the last change, used to detect stale plans.
    pub updated_seq: u64,
}

/// Assignments a caller with `role` may list at time `t`.
pub fn list_visible_assignments<'a>(
    assignments: impl IntoIterator<Item = &'a Assignment>,
    role: Role,
    t: Timestamp,
) -> Vec<&'a Assignment> {
    assignments
        .into_iter()
        .filter(|a| role.is_staff() || (a.visible && a.release_at <= t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum IngestRejection {
    UnknownUsername,
    Ambiguous,
    UnsupportedKind,
    DuplicateOfExisting,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchResult {
    pub accepted: Vec<(String, SubmissionId)>,
    pub rejected: Vec<(String, IngestRejection)>,
}
