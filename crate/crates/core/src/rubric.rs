//! Review validation and per-review scoring: raw points, calibration
//! auto-grades and quiz auto-grades.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Answer, AssignmentId, Rubric, SubmissionId};
use crate::error::{Error, Result};

/// Highest calibration score; each question subtracts its squared miss.
pub const CALIBRATION_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    UnknownQuestion { question_id: String },
    MissingAnswer { question_id: String },
    DuplicateAnswer { question_id: String },
    ChoiceOutOfRange { question_id: String, choice: usize, options: usize },
    ReasoningTooShort { question_id: String, len: usize, min: usize },
    ReasoningTooLong { question_id: String, len: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Validation(self.violations))
        }
    }
}

/// Checks a completed rubric. Every question must be answered once, with an
/// in-range option and, where required, a rationale whose character count
/// lies within the question's bounds.
pub fn validate_review(answers: &[Answer], rubric: &Rubric) -> ValidationResult {
    validate_scoped(answers, rubric, None)
}

/// Like [`validate_review`], but only the listed questions are expected.
/// Used for per-question TA splits.
pub fn validate_scoped(
    answers: &[Answer],
    rubric: &Rubric,
    scope: Option<&[String]>,
) -> ValidationResult {
    let in_scope = |id: &str| scope.is_none_or(|s| s.iter().any(|q| q == id));
    let mut violations = Vec::new();
    let mut seen = BTreeMap::new();

    for answer in answers {
        let Some(question) = rubric.question(&answer.question_id).filter(|q| in_scope(&q.id))
        else {
            violations.push(Violation::UnknownQuestion {
                question_id: answer.question_id.clone(),
            });
            continue;
        };
        if seen.insert(answer.question_id.as_str(), ()).is_some() {
            violations.push(Violation::DuplicateAnswer {
                question_id: answer.question_id.clone(),
            });
            continue;
        }
        if answer.choice >= question.options.len() {
            violations.push(Violation::ChoiceOutOfRange {
                question_id: question.id.clone(),
                choice: answer.choice,
                options: question.options.len(),
            });
        }
        if let Some(bounds) = question.reasoning {
            let len = answer.reasoning.chars().count();
            if len < bounds.min {
                violations.push(Violation::ReasoningTooShort {
                    question_id: question.id.clone(),
                    len,
                    min: bounds.min,
                });
            } else if len > bounds.max {
                violations.push(Violation::ReasoningTooLong {
                    question_id: question.id.clone(),
                    len,
                    max: bounds.max,
                });
            }
        }
    }

    for question in rubric.questions.iter().filter(|q| in_scope(&q.id)) {
        if !seen.contains_key(question.id.as_str()) {
            violations.push(Violation::MissingAnswer {
                question_id: question.id.clone(),
            });
        }
    }

    ValidationResult { violations }
}

/// Sum of the chosen options' points. Fails on answers that do not validate.
pub fn review_points(answers: &[Answer], rubric: &Rubric) -> Result<f64> {
    scoped_points(answers, rubric, None)
}

pub fn scoped_points(answers: &[Answer], rubric: &Rubric, scope: Option<&[String]>) -> Result<f64> {
    validate_scoped(answers, rubric, scope).into_result()?;
    Ok(answers
        .iter()
        .map(|a| {
            let q = rubric.question(&a.question_id).expect("validated");
            q.options[a.choice].points
        })
        .sum())
}

/// Known-correct choices for a calibration essay, plus the explanation
/// revealed once the student's own review is in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGroundTruth {
    pub calibration_submission_id: SubmissionId,
    pub truth_choices: BTreeMap<String, usize>,
    #[serde(default)]
    pub rationale: BTreeMap<String, String>,
}

impl CalibrationGroundTruth {
    pub fn covers(&self, rubric: &Rubric) -> Result<()> {
        for q in &rubric.questions {
            match self.truth_choices.get(&q.id) {
                None => {
                    return Err(Error::invalid(format!("no ground truth for question {}", q.id)))
                }
                Some(&c) if c >= q.options.len() => {
                    return Err(Error::invalid(format!(
                        "ground truth for question {} is out of range",
                        q.id
                    )))
                }
                _ => {}
            }
        }
        if self.truth_choices.len() != rubric.questions.len() {
            return Err(Error::invalid("ground truth names questions not in the rubric"));
        }
        Ok(())
    }
}

/// `max(0, 10 - sum of squared option-index differences)`.
pub fn calibration_formula(differences: impl IntoIterator<Item = i64>) -> f64 {
    let penalty: i64 = differences.into_iter().map(|d| d * d).sum();
    (CALIBRATION_MAX - penalty as f64).max(0.0)
}

/// Auto-grades a calibration review against its ground truth. The caller is
/// responsible for validating the review against the rubric first.
pub fn score_calibration_review(answers: &[Answer], truth: &CalibrationGroundTruth) -> Result<f64> {
    if truth.truth_choices.is_empty() {
        return Err(Error::MissingGroundTruth);
    }
    let mut diffs = Vec::with_capacity(truth.truth_choices.len());
    for (question, &expected) in &truth.truth_choices {
        let answer = answers
            .iter()
            .find(|a| &a.question_id == question)
            .ok_or_else(|| Error::invalid(format!("review does not answer question {question}")))?;
        diffs.push(answer.choice as i64 - expected as i64);
    }
    Ok(calibration_formula(diffs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reveal {
    GradeOnly,
    GradeAndAnswers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizKey {
    pub assignment_id: AssignmentId,
    pub correct_choices: Vec<usize>,
    /// `None` means unlimited attempts.
    pub max_attempts: Option<u32>,
    pub reveal: Reveal,
}

/// Grades one quiz attempt. `attempt` is the 1-based number of the attempt
/// being made.
pub fn score_quiz(answers: &[usize], key: &QuizKey, out_of: f64, attempt: u32) -> Result<f64> {
    if let Some(max) = key.max_attempts {
        if attempt > max {
            return Err(Error::AttemptsExhausted);
        }
    }
    if answers.len() != key.correct_choices.len() {
        return Err(Error::invalid(format!(
            "quiz has {} questions but {} answers were given",
            key.correct_choices.len(),
            answers.len()
        )));
    }
    if key.correct_choices.is_empty() {
        return Err(Error::invalid("quiz has no questions"));
    }
    let correct = answers
        .iter()
        .zip(&key.correct_choices)
        .filter(|(a, k)| a == k)
        .count();
    Ok(out_of * correct as f64 / key.correct_choices.len() as f64)
}
