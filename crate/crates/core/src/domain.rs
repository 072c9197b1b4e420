//! Shared domain types: identifiers, courses, enrollments, rubrics, reviews
//! and grader score windows.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

macro_rules! numeric_id {
    ($($(#[$meta:meta])* $name:ident),* $(,)?) => {
        $(
            $(#[$meta])*
            #[derive(
                Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
            )]
            #[serde(transparent)]
            pub struct $name(pub u64);

            impl fmt::Display for $name {
                fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                    write!(f, "{}", self.0)
                }
            }
        )*
    };
}

numeric_id!(
    CourseId,
    AssignmentId,
    /// Identifies student submissions and calibration essays alike, so task
    /// records cannot leak which kind of item they point at.
    SubmissionId,
    RubricId,
    ReviewId,
    TaskId,
    AppealId,
    FlagId,
    EvaluationId,
);

/// A user's login name. Zip ingestion matches archive entries against it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl UserId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Ta,
    Instructor,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Student, Role::Ta, Role::Instructor];

    pub fn is_staff(self) -> bool {
        matches!(self, Role::Ta | Role::Instructor)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Student => "student",
            Role::Ta => "ta",
            Role::Instructor => "instructor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Supervised,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Features {
    pub pools: bool,
    pub calibration: bool,
    pub spot_checking: bool,
    pub flagging: bool,
    pub consensus_reward: bool,
}

impl Default for Features {
    fn default() -> Self {
        Self {
            pools: true,
            calibration: true,
            spot_checking: true,
            flagging: true,
            consensus_reward: false,
        }
    }
}

/// Parameters of the supervised/independent pool rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRules {
    pub window: usize,
    pub promotion_threshold: f64,
    pub demotion_threshold: f64,
}

impl Default for PoolRules {
    fn default() -> Self {
        Self {
            window: 5,
            promotion_threshold: 35.0,
            demotion_threshold: 5.0,
        }
    }
}

/// Named policy selections, resolved against the engine's registries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policies {
    pub aggregation: String,
    pub spot_check_selection: String,
    pub ta_assignment: String,
    pub promotion: PoolRules,
}

impl Default for Policies {
    fn default() -> Self {
        Self {
            aggregation: "median".into(),
            spot_check_selection: "uniform".into(),
            ta_assignment: "round_robin".into(),
            promotion: PoolRules::default(),
        }
    }
}

/// Everything needed to create a course.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseConfig {
    pub name: String,
    #[serde(default)]
    pub visible_to_students: bool,
    #[serde(default)]
    pub enrollment_codes: BTreeMap<Role, String>,
    #[serde(default)]
    pub late_day_budget: u32,
    #[serde(default)]
    pub features: Features,
    #[serde(default)]
    pub policies: Policies,
}

impl CourseConfig {
    pub fn new(name: impl Into<String>, late_day_budget: u32) -> Self {
        Self {
            name: name.into(),
            visible_to_students: true,
            enrollment_codes: BTreeMap::new(),
            late_day_budget,
            features: Features::default(),
            policies: Policies::default(),
        }
    }

    pub fn with_code(mut self, role: Role, code: impl Into<String>) -> Self {
        self.enrollment_codes.insert(role, code.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::InvalidName);
        }
        let mut seen = std::collections::BTreeSet::new();
        for code in self.enrollment_codes.values() {
            if code.is_empty() {
                return Err(Error::invalid("enrollment codes must be nonempty"));
            }
            if !seen.insert(code) {
                return Err(Error::invalid("enrollment codes must differ between roles"));
            }
        }
        let rules = &self.policies.promotion;
        if rules.window == 0 {
            return Err(Error::invalid("promotion window must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Course {
    pub id: CourseId,
    pub name: String,
    pub visible_to_students: bool,
    pub enrollment_codes: BTreeMap<Role, String>,
    pub late_day_budget: u32,
    pub features: Features,
    pub policies: Policies,
}

impl Course {
    pub fn from_config(id: CourseId, config: CourseConfig) -> Self {
        Self {
            id,
            name: config.name,
            visible_to_students: config.visible_to_students,
            enrollment_codes: config.enrollment_codes,
            late_day_budget: config.late_day_budget,
            features: config.features,
            policies: config.policies,
        }
    }

    pub fn role_for_code(&self, code: &str) -> Option<Role> {
        self.enrollment_codes
            .iter()
            .find(|(_, c)| c.as_str() == code)
            .map(|(r, _)| *r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enrollment {
    pub user_id: UserId,
    pub course_id: CourseId,
    pub role: Role,
    /// Administrators are instructors or TAs with data-export rights.
    pub admin: bool,
    pub pool: Pool,
    pub late_days_used: u32,
}

impl Enrollment {
    pub fn new(user_id: UserId, course_id: CourseId, role: Role) -> Self {
        Self {
            user_id,
            course_id,
            role,
            admin: false,
            pool: Pool::Supervised,
            late_days_used: 0,
        }
    }

    /// Pool membership; `None` for non-students.
    pub fn student_pool(&self) -> Option<Pool> {
        (self.role == Role::Student).then_some(self.pool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RubricKind {
    SubmissionRubric,
    EvaluationRubric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricOption {
    pub label: String,
    pub points: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBounds {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricQuestion {
    pub id: String,
    pub prompt: String,
    pub options: Vec<RubricOption>,
    /// Present when a rationale is required; lengths are in characters.
    #[serde(default)]
    pub reasoning: Option<LengthBounds>,
}

impl RubricQuestion {
    pub fn max_points(&self) -> f64 {
        self.options
            .iter()
            .map(|o| o.points)
            .fold(0.0, f64::max)
    }
}

/// Rubric as supplied by a caller, before an id is assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricSpec {
    pub kind: RubricKind,
    pub questions: Vec<RubricQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub id: RubricId,
    pub kind: RubricKind,
    pub questions: Vec<RubricQuestion>,
}

impl Rubric {
    pub fn new(id: RubricId, spec: RubricSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            id,
            kind: spec.kind,
            questions: spec.questions,
        })
    }

    pub fn question(&self, id: &str) -> Option<&RubricQuestion> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn max_points(&self) -> f64 {
        self.questions.iter().map(RubricQuestion::max_points).sum()
    }

    /// The single-question 0..=10 rubric TAs use to score reviews.
    pub fn default_evaluation(id: RubricId) -> Self {
        Self {
            id,
            kind: RubricKind::EvaluationRubric,
            questions: vec![RubricQuestion {
                id: "quality".into(),
                prompt: "Overall quality of the review".into(),
                options: (0..=10)
                    .map(|p| RubricOption {
                        label: p.to_string(),
                        points: p as f64,
                    })
                    .collect(),
                reasoning: None,
            }],
        }
    }
}

impl RubricSpec {
    pub fn validate(&self) -> Result<()> {
        if self.questions.is_empty() {
            return Err(Error::invalid("rubric needs at least one question"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for q in &self.questions {
            if !ids.insert(q.id.as_str()) {
                return Err(Error::invalid(format!("duplicate question id {}", q.id)));
            }
            if q.options.len() < 2 {
                return Err(Error::invalid(format!(
                    "question {} needs at least two options",
                    q.id
                )));
            }
            if q.options.iter().any(|o| !(o.points >= 0.0) || !o.points.is_finite()) {
                return Err(Error::invalid(format!(
                    "question {} has a negative or non-finite option",
                    q.id
                )));
            }
            if let Some(b) = q.reasoning {
                if b.min > b.max {
                    return Err(Error::invalid(format!(
                        "question {} has reasoning min above max",
                        q.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One answered rubric question. `choice` is the 0-based option index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub question_id: String,
    pub choice: usize,
    #[serde(default)]
    pub reasoning: String,
}

impl Answer {
    pub fn new(question_id: impl Into<String>, choice: usize) -> Self {
        Self {
            question_id: question_id.into(),
            choice,
            reasoning: String::new(),
        }
    }

    pub fn with_reasoning(mut self, text: impl Into<String>) -> Self {
        self.reasoning = text.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "user", rename_all = "snake_case")]
pub enum Grader {
    Student(UserId),
    Ta(UserId),
}

impl Grader {
    pub fn user(&self) -> &UserId {
        match self {
            Grader::Student(u) | Grader::Ta(u) => u,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Submitted,
    Invalidated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewKind {
    Peer,
    Calibration,
    Ta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub id: ReviewId,
    pub submission_id: SubmissionId,
    pub task_id: TaskId,
    pub kind: ReviewKind,
    pub grader: Grader,
    pub rubric_id: RubricId,
    pub answers: Vec<Answer>,
    pub status: ReviewStatus,
    pub submitted_at: Option<Timestamp>,
    /// Total points, cached when the review is submitted.
    pub points: f64,
    /// Questions this review covers when it is one part of a per-question TA split.
    #[serde(default)]
    pub covers: Option<Vec<String>>,
    /// TA reviews that were split by question share the group of their first part.
    #[serde(default)]
    pub group: Option<TaskId>,
}

impl Review {
    pub fn counts_for_grading(&self) -> bool {
        self.status == ReviewStatus::Submitted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Calibration,
    TaEvaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderScore {
    pub source: ScoreSource,
    pub value: f64,
    pub at: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraderScoreWindow {
    pub scores: Vec<GraderScore>,
}

impl GraderScoreWindow {
    pub fn push(&mut self, score: GraderScore) -> Result<()> {
        if !(0.0..=10.0).contains(&score.value) {
            return Err(Error::invalid(format!(
                "grader score {} outside [0, 10]",
                score.value
            )));
        }
        self.scores.push(score);
        Ok(())
    }

    /// The `n` most recent values, oldest first. Shorter when fewer exist.
    pub fn recent(&self, n: usize) -> Vec<f64> {
        let start = self.scores.len().saturating_sub(n);
        self.scores[start..].iter().map(|s| s.value).collect()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_option_question(id: &str) -> RubricQuestion {
        RubricQuestion {
            id: id.into(),
            prompt: "?".into(),
            options: vec![
                RubricOption { label: "no".into(), points: 0.0 },
                RubricOption { label: "yes".into(), points: 1.0 },
            ],
            reasoning: None,
        }
    }

    #[test]
    fn default_features_leave_consensus_reward_off() {
        let f = Features::default();
        assert!(f.pools && f.calibration && f.spot_checking && f.flagging);
        assert!(!f.consensus_reward);
    }

    #[test]
    fn course_config_rejects_empty_name_and_shared_codes() {
        assert!(matches!(
            CourseConfig::new("  ", 3).validate(),
            Err(Error::InvalidName)
        ));
        let shared = CourseConfig::new("CS101", 3)
            .with_code(Role::Student, "X")
            .with_code(Role::Ta, "X");
        assert!(shared.validate().is_err());
    }

    #[test]
    fn rubric_invariants() {
        let empty = RubricSpec { kind: RubricKind::SubmissionRubric, questions: vec![] };
        assert!(empty.validate().is_err());

        let dup = RubricSpec {
            kind: RubricKind::SubmissionRubric,
            questions: vec![two_option_question("q"), two_option_question("q")],
        };
        assert!(dup.validate().is_err());

        let mut one_option = two_option_question("q");
        one_option.options.truncate(1);
        let spec = RubricSpec { kind: RubricKind::SubmissionRubric, questions: vec![one_option] };
        assert!(spec.validate().is_err());

        let mut bad_bounds = two_option_question("q");
        bad_bounds.reasoning = Some(LengthBounds { min: 10, max: 5 });
        let spec = RubricSpec { kind: RubricKind::SubmissionRubric, questions: vec![bad_bounds] };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn new_enrollment_is_supervised_with_no_late_days() {
        let e = Enrollment::new("alice".into(), CourseId(1), Role::Student);
        assert_eq!(e.student_pool(), Some(Pool::Supervised));
        assert_eq!(e.late_days_used, 0);
        let ta = Enrollment::new("tom".into(), CourseId(1), Role::Ta);
        assert_eq!(ta.student_pool(), None);
    }

    #[test]
    fn window_rejects_out_of_range_scores() {
        let mut w = GraderScoreWindow::default();
        let at = Utc::now();
        assert!(w
            .push(GraderScore { source: ScoreSource::Calibration, value: 10.5, at })
            .is_err());
        for v in [1.0, 2.0, 3.0] {
            w.push(GraderScore { source: ScoreSource::Calibration, value: v, at }).unwrap();
        }
        assert_eq!(w.recent(2), vec![2.0, 3.0]);
        assert_eq!(w.recent(5), vec![1.0, 2.0, 3.0]);
    }
}
