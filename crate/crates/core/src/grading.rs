//! Peer-grade aggregation, TA overrides, consensus rewards and final grades.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{Pool, ReviewId, SubmissionId};
use crate::error::{Error, Result};
use crate::policy::Registry;

/// A submitted review reduced to the numbers aggregation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredReview {
    pub review_id: ReviewId,
    pub total: f64,
    /// Points per rubric question, in rubric order.
    pub per_question: Vec<f64>,
}

impl ScoredReview {
    pub fn from_total(review_id: ReviewId, total: f64) -> Self {
        Self { review_id, total, per_question: vec![total] }
    }
}

/// Maps a nonempty list of grades to one grade within their range.
pub trait AggregationPolicy: Send + Sync {
    fn name(&self) -> &str;

    fn aggregate(&self, grades: &[f64]) -> Result<f64>;

    /// Aggregates whole reviews. The default works on review totals.
    fn aggregate_reviews(&self, reviews: &[ScoredReview]) -> Result<f64> {
        let totals: Vec<f64> = reviews.iter().map(|r| r.total).collect();
        self.aggregate(&totals)
    }
}

fn sorted(grades: &[f64]) -> Vec<f64> {
    let mut v = grades.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(grades: &[f64]) -> Result<f64> {
    if grades.is_empty() {
        return Err(Error::NoUsableReviews);
    }
    Ok(grades.iter().sum::<f64>() / grades.len() as f64)
}

/// Middle value; even-length lists average the two middle values.
pub fn median(grades: &[f64]) -> Result<f64> {
    if grades.is_empty() {
        return Err(Error::NoUsableReviews);
    }
    let v = sorted(grades);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 0 {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

/// Drops one minimum and one maximum and averages the rest. Two or fewer
/// grades fall back to the plain mean.
pub fn olympian_average(grades: &[f64]) -> Result<f64> {
    if grades.len() <= 2 {
        return mean(grades);
    }
    let v = sorted(grades);
    mean(&v[1..v.len() - 1])
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Median;

impl AggregationPolicy for Median {
    fn name(&self) -> &str {
        "median"
    }

    fn aggregate(&self, grades: &[f64]) -> Result<f64> {
        median(grades)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Olympian;

impl AggregationPolicy for Olympian {
    fn name(&self) -> &str {
        "olympian"
    }

    fn aggregate(&self, grades: &[f64]) -> Result<f64> {
        olympian_average(grades)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Mean;

impl AggregationPolicy for Mean {
    fn name(&self) -> &str {
        "mean"
    }

    fn aggregate(&self, grades: &[f64]) -> Result<f64> {
        mean(grades)
    }
}

/// Median of each rubric question separately, then summed.
#[derive(Debug, Default, Clone, Copy)]
pub struct PerQuestionMedian;

impl AggregationPolicy for PerQuestionMedian {
    fn name(&self) -> &str {
        "per_question_median"
    }

    fn aggregate(&self, grades: &[f64]) -> Result<f64> {
        median(grades)
    }

    fn aggregate_reviews(&self, reviews: &[ScoredReview]) -> Result<f64> {
        let first = reviews.first().ok_or(Error::NoUsableReviews)?;
        let questions = first.per_question.len();
        if reviews.iter().any(|r| r.per_question.len() != questions) {
            return Err(Error::invalid("reviews disagree on the number of questions"));
        }
        (0..questions)
            .map(|q| {
                let column: Vec<f64> = reviews.iter().map(|r| r.per_question[q]).collect();
                median(&column)
            })
            .sum()
    }
}

pub fn builtin_aggregation() -> Registry<dyn AggregationPolicy> {
    let mut registry: Registry<dyn AggregationPolicy> = Registry::new();
    for policy in [
        Arc::new(Median) as Arc<dyn AggregationPolicy>,
        Arc::new(Olympian),
        Arc::new(Mean),
        Arc::new(PerQuestionMedian),
    ] {
        let name = policy.name().to_string();
        registry.register(name, policy).expect("builtin names are distinct");
    }
    registry
}

pub fn aggregate_peer_grades(grades: &[f64], policy: &dyn AggregationPolicy) -> Result<f64> {
    if grades.is_empty() {
        return Err(Error::NoUsableReviews);
    }
    policy.aggregate(grades)
}

/// Reward for agreeing with the leave-one-out consensus:
/// `max(0, 10 - (own - consensus)^2)`. `None` when disabled or when there is
/// no other grade to form a consensus from.
pub fn consensus_reward(
    own: f64,
    all: &[f64],
    policy: &dyn AggregationPolicy,
    enabled: bool,
) -> Result<Option<f64>> {
    if !enabled {
        return Ok(None);
    }
    let pos = all
        .iter()
        .position(|g| *g == own)
        .ok_or_else(|| Error::invalid("own grade is not among the grades"))?;
    let others: Vec<f64> = all
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != pos)
        .map(|(_, g)| *g)
        .collect();
    if others.is_empty() {
        return Ok(None);
    }
    let consensus = policy.aggregate(&others)?;
    Ok(Some((10.0 - (own - consensus).powi(2)).max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideReason {
    Supervised,
    SpotCheck,
    Appeal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reason", rename_all = "snake_case")]
pub enum Provenance {
    PeerAggregate,
    TaOverride(OverrideReason),
    /// Quizzes are graded against their key.
    AutoGraded,
}

impl Provenance {
    pub fn label(&self) -> &'static str {
        match self {
            Provenance::PeerAggregate => "peer_aggregate",
            Provenance::TaOverride(OverrideReason::Supervised) => "supervised",
            Provenance::TaOverride(OverrideReason::SpotCheck) => "spot_check",
            Provenance::TaOverride(OverrideReason::Appeal) => "appeal",
            Provenance::AutoGraded => "auto_graded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalGrade {
    pub submission_id: SubmissionId,
    pub value: f64,
    pub provenance: Provenance,
}

/// Every input to final-grade resolution. `peer_reviews` holds only reviews
/// that still count; invalidated ones are filtered out by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionGradeState {
    pub submission_id: SubmissionId,
    pub peer_reviews: Vec<ScoredReview>,
    pub ta_reviews: Vec<ScoredReview>,
    pub author_pool_at_submission: Pool,
    pub spot_checked: bool,
    pub appeal_outcome: Option<f64>,
}

pub fn resolve_final_grade(
    state: &SubmissionGradeState,
    policy: &dyn AggregationPolicy,
) -> Result<FinalGrade> {
    let (value, provenance) = if let Some(grade) = state.appeal_outcome {
        (grade, Provenance::TaOverride(OverrideReason::Appeal))
    } else if !state.ta_reviews.is_empty() {
        let reason = if state.spot_checked {
            OverrideReason::SpotCheck
        } else {
            OverrideReason::Supervised
        };
        (policy.aggregate_reviews(&state.ta_reviews)?, Provenance::TaOverride(reason))
    } else if !state.peer_reviews.is_empty() {
        (policy.aggregate_reviews(&state.peer_reviews)?, Provenance::PeerAggregate)
    } else {
        return Err(Error::Ungradable);
    };
    Ok(FinalGrade { submission_id: state.submission_id, value, provenance })
}
