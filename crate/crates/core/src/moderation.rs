//! Appeals, flags, TA evaluations and notifications.

use serde::{Deserialize, Serialize};

use crate::domain::{
    Answer, AppealId, EvaluationId, FlagId, ReviewId, Rubric, SubmissionId, TaskId, Timestamp, UserId,
};
use crate::error::{Error, Result};
use crate::pool::{Cause, PoolDecision, Transition};
use crate::rubric::{review_points, validate_review};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Open,
    Assigned,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AppealOutcome {
    Upheld { grade: f64, review_id: ReviewId },
    Denied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appeal {
    pub id: AppealId,
    pub submission_id: SubmissionId,
    pub appellant: UserId,
    pub argument: String,
    pub status: CaseStatus,
    pub assignee: Option<UserId>,
    pub outcome: Option<AppealOutcome>,
    pub resolved_by: Option<UserId>,
    pub filed_at: Timestamp,
    pub resolved_at: Option<Timestamp>,
}

impl Appeal {
    pub fn is_open(&self) -> bool {
        self.status != CaseStatus::Resolved
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Negative,
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Upheld,
    Dismissed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub id: FlagId,
    pub review_id: ReviewId,
    pub reporter: UserId,
    pub polarity: Polarity,
    pub reasoning: String,
    pub status: CaseStatus,
    pub assignee: Option<UserId>,
    pub verdict: Option<Verdict>,
    pub resolved_by: Option<UserId>,
    pub filed_at: Timestamp,
    pub resolved_at: Option<Timestamp>,
}

impl Flag {
    pub fn is_open(&self) -> bool {
        self.status != CaseStatus::Resolved
    }
}

/// Why a TA is evaluating a review.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationOrigin {
    SpotCheck,
    Appeal,
    Supervised,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub id: EvaluationId,
    pub review_id: ReviewId,
    pub task_id: TaskId,
    pub evaluator: UserId,
    pub answers: Vec<Answer>,
    pub score: f64,
    pub origin: EvaluationOrigin,
    pub at: Timestamp,
}

/// Scales an evaluation rubric's points to the 10-point grader scale.
pub fn evaluation_score(answers: &[Answer], rubric: &Rubric) -> Result<f64> {
    validate_review(answers, rubric).into_result()?;
    let max = rubric.max_points();
    if max <= 0.0 {
        return Err(Error::invalid("evaluation rubric has no points"));
    }
    Ok(10.0 * review_points(answers, rubric)? / max)
}

/// A low score from an appeal-driven evaluation is attributed to the appeal.
pub fn attribute_demotion(mut decision: PoolDecision, origin: EvaluationOrigin) -> PoolDecision {
    if decision.transition == Transition::Demote
        && decision.cause == Some(Cause::LowEvaluation)
        && origin == EvaluationOrigin::Appeal
    {
        decision.cause = Some(Cause::AppealFault);
    }
    decision
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationKind {
    AppealResolved,
    FlagResolved,
    ReviewInvalidated,
    Commendation,
}

/// Outbound record consumed by clients polling the event feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub recipient: UserId,
    pub kind: NotificationKind,
    pub subject: u64,
    pub at: Timestamp,
}
