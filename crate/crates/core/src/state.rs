//! Course state as a fold over its event log.
//!
//! `CourseState::apply` is the only way state changes. It never fails and
//! reads nothing but the event, so replaying a log reproduces the state
//! exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::allocation::{CalibrationMode, ReviewAssignmentPlan, SpotCheckSelection};
use crate::domain::{
    AppealId, AssignmentId, Course, Enrollment, EvaluationId, FlagId, GraderScore,
    GraderScoreWindow, Pool, ReviewId, ReviewKind, ReviewStatus, Review, Role, Rubric, RubricId,
    SubmissionId, TaskId, Timestamp, UserId,
};
use crate::grading::{FinalGrade, ScoredReview, SubmissionGradeState};
use crate::moderation::{
    Appeal, AppealOutcome, CaseStatus, Evaluation, EvaluationOrigin, Flag, Notification, Verdict,
};
use crate::pool::{PoolDecision, Transition};
use crate::rubric::CalibrationGroundTruth;
use crate::workflow::{Assignment, Payload, Submission};

/// Why a TA was asked to grade a submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaReason {
    /// The author was in the supervised pool when submitting.
    Supervised,
    SpotCheck,
    /// The author was alone in their pool.
    Solo,
    /// Submitted after reviews were assigned.
    Late,
    Appeal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    PeerReview,
    Calibration {
        mode: CalibrationMode,
    },
    TaReview {
        reason: TaReason,
        #[serde(default)]
        questions: Option<Vec<String>>,
        #[serde(default)]
        group: Option<TaskId>,
    },
    Evaluation {
        review_id: ReviewId,
        origin: EvaluationOrigin,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub kind: TaskKind,
    pub assignee: UserId,
    pub submission_id: SubmissionId,
    pub assignment_id: Option<AssignmentId>,
    pub status: TaskStatus,
    pub created_at: Timestamp,
    pub due_at: Option<Timestamp>,
}

impl Task {
    pub fn is_open(&self) -> bool {
        self.status == TaskStatus::Open
    }

    pub fn is_staff_task(&self) -> bool {
        matches!(self.kind, TaskKind::TaReview { .. } | TaskKind::Evaluation { .. })
    }
}

/// A submission with instructor-known answers, used to train graders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationItem {
    pub id: SubmissionId,
    pub rubric_id: RubricId,
    pub name: String,
    pub payload: Payload,
    pub content_hash: String,
    pub truth: CalibrationGroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusScore {
    pub user_id: UserId,
    pub review_id: ReviewId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalization {
    pub at: Timestamp,
    pub grades: Vec<FinalGrade>,
    pub consensus: Vec<ConsensusScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    CourseCreated { course: Course, evaluation_rubric: Rubric },
    CourseUpdated { course: Course },
    Enrolled { enrollment: Enrollment },
    RoleChanged { user_id: UserId, role: Role, admin: bool },
    RubricAdded { rubric: Rubric },
    AssignmentSaved { assignment: Assignment },
    SubmissionSaved { submission: Submission, late_days_delta: u32 },
    CalibrationAdded { item: CalibrationItem },
    TaskCreated { task: Task },
    TaskReassigned { task_id: TaskId, assignee: UserId },
    ReviewSaved { review: Review },
    ReviewInvalidated { review_id: ReviewId },
    EvaluationRecorded { evaluation: Evaluation },
    GraderScoreRecorded { user_id: UserId, score: GraderScore },
    PoolChanged { decision: PoolDecision },
    PlanCommitted { plan: ReviewAssignmentPlan },
    SpotChecksSelected { selection: SpotCheckSelection },
    AppealFiled { appeal: Appeal },
    AppealAssigned { appeal_id: AppealId, assignee: UserId },
    AppealResolved { appeal_id: AppealId, outcome: AppealOutcome, by: UserId, at: Timestamp },
    FlagFiled { flag: Flag },
    FlagAssigned { flag_id: FlagId, assignee: UserId },
    FlagResolved { flag_id: FlagId, verdict: Verdict, by: UserId, at: Timestamp },
    Commended { user_id: UserId, flag_id: FlagId },
    Notified { notification: Notification },
    GradesFinalized { assignment_id: AssignmentId, finalization: Finalization },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::CourseCreated { .. } => "course_created",
            Event::CourseUpdated { .. } => "course_updated",
            Event::Enrolled { .. } => "enrolled",
            Event::RoleChanged { .. } => "role_changed",
            Event::RubricAdded { .. } => "rubric_added",
            Event::AssignmentSaved { .. } => "assignment_saved",
            Event::SubmissionSaved { .. } => "submission_saved",
            Event::CalibrationAdded { .. } => "calibration_added",
            Event::TaskCreated { .. } => "task_created",
            Event::TaskReassigned { .. } => "task_reassigned",
            Event::ReviewSaved { .. } => "review_saved",
            Event::ReviewInvalidated { .. } => "review_invalidated",
            Event::EvaluationRecorded { .. } => "evaluation_recorded",
            Event::GraderScoreRecorded { .. } => "grader_score_recorded",
            Event::PoolChanged { .. } => "pool_changed",
            Event::PlanCommitted { .. } => "plan_committed",
            Event::SpotChecksSelected { .. } => "spot_checks_selected",
            Event::AppealFiled { .. } => "appeal_filed",
            Event::AppealAssigned { .. } => "appeal_assigned",
            Event::AppealResolved { .. } => "appeal_resolved",
            Event::FlagFiled { .. } => "flag_filed",
            Event::FlagAssigned { .. } => "flag_assigned",
            Event::FlagResolved { .. } => "flag_resolved",
            Event::Commended { .. } => "commended",
            Event::Notified { .. } => "notified",
            Event::GradesFinalized { .. } => "grades_finalized",
        }
    }

    /// Largest entity id the event introduces, if any.
    fn introduced_id(&self) -> Option<u64> {
        match self {
            Event::CourseCreated { evaluation_rubric, .. } => Some(evaluation_rubric.id.0),
            Event::RubricAdded { rubric } => Some(rubric.id.0),
            Event::AssignmentSaved { assignment } => Some(assignment.id.0),
            Event::SubmissionSaved { submission, .. } => Some(submission.id.0),
            Event::CalibrationAdded { item } => Some(item.id.0),
            Event::TaskCreated { task } => Some(task.id.0),
            Event::ReviewSaved { review } => Some(review.id.0),
            Event::EvaluationRecorded { evaluation } => Some(evaluation.id.0),
            Event::AppealFiled { appeal } => Some(appeal.id.0),
            Event::FlagFiled { flag } => Some(flag.id.0),
            _ => None,
        }
    }
}

/// One committed event. `tx_end` marks the last event of a transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub sequence: u64,
    pub timestamp: Timestamp,
    pub actor: String,
    pub tx_end: bool,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseState {
    pub course: Course,
    pub last_seq: u64,
    pub next_id: u64,
    pub evaluation_rubric: RubricId,
    pub enrollments: BTreeMap<UserId, Enrollment>,
    pub windows: BTreeMap<UserId, GraderScoreWindow>,
    pub pool_history: BTreeMap<UserId, Vec<PoolDecision>>,
    pub rubrics: BTreeMap<RubricId, Rubric>,
    pub assignments: BTreeMap<AssignmentId, Assignment>,
    pub submissions: BTreeMap<SubmissionId, Submission>,
    pub calibration: BTreeMap<SubmissionId, CalibrationItem>,
    pub tasks: BTreeMap<TaskId, Task>,
    pub reviews: BTreeMap<ReviewId, Review>,
    pub evaluations: BTreeMap<EvaluationId, Evaluation>,
    pub appeals: BTreeMap<AppealId, Appeal>,
    pub flags: BTreeMap<FlagId, Flag>,
    pub plans: BTreeMap<AssignmentId, ReviewAssignmentPlan>,
    pub spot_checks: BTreeMap<AssignmentId, SpotCheckSelection>,
    pub finalized: BTreeMap<AssignmentId, Finalization>,
    pub notifications: Vec<Notification>,
    pub commendations: Vec<(UserId, FlagId)>,
}

impl CourseState {
    pub fn new(course: Course, evaluation_rubric: Rubric) -> Self {
        let eval_id = evaluation_rubric.id;
        Self {
            course,
            last_seq: 0,
            next_id: eval_id.0 + 1,
            evaluation_rubric: eval_id,
            enrollments: BTreeMap::new(),
            windows: BTreeMap::new(),
            pool_history: BTreeMap::new(),
            rubrics: [(eval_id, evaluation_rubric)].into(),
            assignments: BTreeMap::new(),
            submissions: BTreeMap::new(),
            calibration: BTreeMap::new(),
            tasks: BTreeMap::new(),
            reviews: BTreeMap::new(),
            evaluations: BTreeMap::new(),
            appeals: BTreeMap::new(),
            flags: BTreeMap::new(),
            plans: BTreeMap::new(),
            spot_checks: BTreeMap::new(),
            finalized: BTreeMap::new(),
            notifications: Vec::new(),
            commendations: Vec::new(),
        }
    }

    /// Rebuilds a course from its full log.
    pub fn replay<'a>(records: impl IntoIterator<Item = &'a EventRecord>) -> crate::Result<Self> {
        let mut records = records.into_iter();
        let first = records
            .next()
            .ok_or_else(|| crate::Error::CorruptLog("empty log".into()))?;
        let mut state = match &first.event {
            Event::CourseCreated { course, evaluation_rubric } => {
                CourseState::new(course.clone(), evaluation_rubric.clone())
            }
            other => {
                return Err(crate::Error::CorruptLog(format!(
                    "log starts with {} instead of course_created",
                    other.kind()
                )))
            }
        };
        state.last_seq = first.sequence;
        for r in records {
            state.apply_checked(r)?;
        }
        Ok(state)
    }

    /// Applies a record after checking it continues the sequence.
    pub fn apply_checked(&mut self, record: &EventRecord) -> crate::Result<()> {
        if record.sequence != self.last_seq + 1 {
            return Err(crate::Error::CorruptLog(format!(
                "gap detected: expected sequence {}, found {}",
                self.last_seq + 1,
                record.sequence
            )));
        }
        self.apply(record);
        Ok(())
    }

    pub fn apply(&mut self, record: &EventRecord) {
        self.last_seq = record.sequence;
        if let Some(id) = record.event.introduced_id() {
            self.next_id = self.next_id.max(id + 1);
        }
        match &record.event {
            Event::CourseCreated { course, evaluation_rubric } => {
                let seq = self.last_seq;
                *self = CourseState::new(course.clone(), evaluation_rubric.clone());
                self.last_seq = seq;
            }
            Event::CourseUpdated { course } => self.course = course.clone(),
            Event::Enrolled { enrollment } => {
                self.enrollments.insert(enrollment.user_id.clone(), enrollment.clone());
            }
            Event::RoleChanged { user_id, role, admin } => {
                if let Some(e) = self.enrollments.get_mut(user_id) {
                    e.role = *role;
                    e.admin = *admin;
                }
            }
            Event::RubricAdded { rubric } => {
                if rubric.kind == crate::domain::RubricKind::EvaluationRubric {
                    self.evaluation_rubric = rubric.id;
                }
                self.rubrics.insert(rubric.id, rubric.clone());
            }
            Event::AssignmentSaved { assignment } => {
                self.assignments.insert(assignment.id, assignment.clone());
            }
            Event::SubmissionSaved { submission, late_days_delta } => {
                let mut s = submission.clone();
                s.updated_seq = record.sequence;
                if let Some(e) = self.enrollments.get_mut(&s.author) {
                    e.late_days_used += late_days_delta;
                }
                self.submissions.insert(s.id, s);
            }
            Event::CalibrationAdded { item } => {
                self.calibration.insert(item.id, item.clone());
            }
            Event::TaskCreated { task } => {
                self.tasks.insert(task.id, task.clone());
            }
            Event::TaskReassigned { task_id, assignee } => {
                if let Some(t) = self.tasks.get_mut(task_id) {
                    t.assignee = assignee.clone();
                }
            }
            Event::ReviewSaved { review } => {
                if let Some(t) = self.tasks.get_mut(&review.task_id) {
                    t.status = TaskStatus::Done;
                }
                self.reviews.insert(review.id, review.clone());
            }
            Event::ReviewInvalidated { review_id } => {
                if let Some(r) = self.reviews.get_mut(review_id) {
                    r.status = ReviewStatus::Invalidated;
                }
            }
            Event::EvaluationRecorded { evaluation } => {
                if let Some(t) = self.tasks.get_mut(&evaluation.task_id) {
                    t.status = TaskStatus::Done;
                }
                self.evaluations.insert(evaluation.id, evaluation.clone());
            }
            Event::GraderScoreRecorded { user_id, score } => {
                self.windows
                    .entry(user_id.clone())
                    .or_default()
                    .scores
                    .push(score.clone());
            }
            Event::PoolChanged { decision } => {
                if let Some(e) = self.enrollments.get_mut(&decision.user_id) {
                    e.pool = decision.apply_to(e.pool);
                }
                self.pool_history
                    .entry(decision.user_id.clone())
                    .or_default()
                    .push(decision.clone());
            }
            Event::PlanCommitted { plan } => {
                self.plans.insert(plan.assignment_id, plan.clone());
            }
            Event::SpotChecksSelected { selection } => {
                self.spot_checks
                    .entry(selection.assignment_id)
                    .and_modify(|s| {
                        s.chosen_submission_ids
                            .extend(selection.chosen_submission_ids.iter().copied())
                    })
                    .or_insert_with(|| selection.clone());
            }
            Event::AppealFiled { appeal } => {
                self.appeals.insert(appeal.id, appeal.clone());
            }
            Event::AppealAssigned { appeal_id, assignee } => {
                if let Some(a) = self.appeals.get_mut(appeal_id) {
                    a.assignee = Some(assignee.clone());
                    a.status = CaseStatus::Assigned;
                }
            }
            Event::AppealResolved { appeal_id, outcome, by, at } => {
                if let Some(a) = self.appeals.get_mut(appeal_id) {
                    a.status = CaseStatus::Resolved;
                    a.outcome = Some(outcome.clone());
                    a.resolved_by = Some(by.clone());
                    a.resolved_at = Some(*at);
                }
            }
            Event::FlagFiled { flag } => {
                self.flags.insert(flag.id, flag.clone());
            }
            Event::FlagAssigned { flag_id, assignee } => {
                if let Some(f) = self.flags.get_mut(flag_id) {
                    f.assignee = Some(assignee.clone());
                    f.status = CaseStatus::Assigned;
                }
            }
            Event::FlagResolved { flag_id, verdict, by, at } => {
                if let Some(f) = self.flags.get_mut(flag_id) {
                    f.status = CaseStatus::Resolved;
                    f.verdict = Some(*verdict);
                    f.resolved_by = Some(by.clone());
                    f.resolved_at = Some(*at);
                }
            }
            Event::Commended { user_id, flag_id } => {
                self.commendations.push((user_id.clone(), *flag_id));
            }
            Event::Notified { notification } => self.notifications.push(notification.clone()),
            Event::GradesFinalized { assignment_id, finalization } => {
                self.finalized.insert(*assignment_id, finalization.clone());
            }
        }
    }

    pub fn enrollment(&self, user: &UserId) -> Option<&Enrollment> {
        self.enrollments.get(user)
    }

    pub fn role_of(&self, user: &UserId) -> Option<Role> {
        self.enrollments.get(user).map(|e| e.role)
    }

    pub fn is_staff(&self, user: &UserId) -> bool {
        self.role_of(user).is_some_and(Role::is_staff)
    }

    pub fn students(&self) -> impl Iterator<Item = &Enrollment> {
        self.enrollments.values().filter(|e| e.role == Role::Student)
    }

    /// TAs, or instructors when the course has no TAs.
    pub fn graders_on_staff(&self) -> Vec<UserId> {
        let tas: Vec<UserId> = self
            .enrollments
            .values()
            .filter(|e| e.role == Role::Ta)
            .map(|e| e.user_id.clone())
            .collect();
        if !tas.is_empty() {
            return tas;
        }
        self.enrollments
            .values()
            .filter(|e| e.role == Role::Instructor)
            .map(|e| e.user_id.clone())
            .collect()
    }

    /// The pool that decides how a student's work is handled. With pools
    /// switched off everyone is treated as independent.
    pub fn effective_pool(&self, pool: Pool) -> Pool {
        if self.course.features.pools {
            pool
        } else {
            Pool::Independent
        }
    }

    pub fn submission_of(&self, assignment: AssignmentId, author: &UserId) -> Option<&Submission> {
        self.submissions
            .values()
            .find(|s| s.assignment_id == assignment && &s.author == author)
    }

    pub fn submissions_for(&self, assignment: AssignmentId) -> impl Iterator<Item = &Submission> {
        self.submissions.values().filter(move |s| s.assignment_id == assignment)
    }

    pub fn review_for_task(&self, task: TaskId) -> Option<&Review> {
        self.reviews.values().find(|r| r.task_id == task)
    }

    pub fn evaluation_for_task(&self, task: TaskId) -> Option<&Evaluation> {
        self.evaluations.values().find(|e| e.task_id == task)
    }

    pub fn reviews_of(&self, submission: SubmissionId) -> impl Iterator<Item = &Review> {
        self.reviews.values().filter(move |r| r.submission_id == submission)
    }

    /// Submitted peer reviews that still count toward the grade.
    pub fn counted_peer_reviews(&self, submission: SubmissionId) -> Vec<&Review> {
        self.reviews_of(submission)
            .filter(|r| r.kind == ReviewKind::Peer && r.counts_for_grading())
            .collect()
    }

    pub fn open_appeal_for(&self, submission: SubmissionId) -> Option<&Appeal> {
        self.appeals
            .values()
            .find(|a| a.submission_id == submission && a.is_open())
    }

    pub fn ta_reason(&self, review: &Review) -> Option<TaReason> {
        match self.tasks.get(&review.task_id).map(|t| &t.kind) {
            Some(TaskKind::TaReview { reason, .. }) => Some(*reason),
            _ => None,
        }
    }

    pub fn scored(&self, review: &Review) -> ScoredReview {
        let per_question = self
            .rubrics
            .get(&review.rubric_id)
            .map(|rubric| {
                rubric
                    .questions
                    .iter()
                    .map(|q| {
                        review
                            .answers
                            .iter()
                            .find(|a| a.question_id == q.id)
                            .and_then(|a| q.options.get(a.choice))
                            .map_or(0.0, |o| o.points)
                    })
                    .collect()
            })
            .unwrap_or_default();
        ScoredReview { review_id: review.id, total: review.points, per_question }
    }

    /// Completed TA reviews of a submission, excluding appeal regrades. The
    /// parts of a per-question split count as one review once all are in.
    pub fn ta_reviews(&self, submission: SubmissionId) -> Vec<ScoredReview> {
        let mut whole = Vec::new();
        let mut groups: BTreeMap<TaskId, Vec<&Review>> = BTreeMap::new();
        for r in self.reviews_of(submission) {
            if r.kind != ReviewKind::Ta || !r.counts_for_grading() {
                continue;
            }
            if self.ta_reason(r) == Some(TaReason::Appeal) {
                continue;
            }
            match r.group {
                Some(g) => groups.entry(g).or_default().push(r),
                None => whole.push(self.scored(r)),
            }
        }
        for (group, parts) in groups {
            let expected = self
                .tasks
                .values()
                .filter(|t| matches!(t.kind, TaskKind::TaReview { group: Some(g), .. } if g == group))
                .count();
            if parts.len() < expected {
                continue;
            }
            let mut merged = ScoredReview::from_total(parts[0].id, 0.0);
            let scored: Vec<ScoredReview> = parts.iter().map(|r| self.scored(r)).collect();
            merged.per_question = vec![0.0; scored[0].per_question.len()];
            for s in &scored {
                merged.total += s.total;
                for (m, q) in merged.per_question.iter_mut().zip(&s.per_question) {
                    *m += q;
                }
            }
            whole.push(merged);
        }
        whole
    }

    pub fn appeal_outcome(&self, submission: SubmissionId) -> Option<f64> {
        self.appeals
            .values()
            .filter(|a| a.submission_id == submission)
            .filter_map(|a| match (&a.outcome, a.resolved_at) {
                (Some(AppealOutcome::Upheld { grade, .. }), Some(at)) => Some((at, a.id, *grade)),
                _ => None,
            })
            .max_by_key(|(at, id, _)| (*at, *id))
            .map(|(_, _, g)| g)
    }

    pub fn is_spot_checked(&self, submission: &Submission) -> bool {
        self.spot_checks
            .get(&submission.assignment_id)
            .is_some_and(|s| s.chosen_submission_ids.contains(&submission.id))
    }

    pub fn grade_state(&self, submission: SubmissionId) -> Option<SubmissionGradeState> {
        let s = self.submissions.get(&submission)?;
        Some(SubmissionGradeState {
            submission_id: submission,
            peer_reviews: self
                .counted_peer_reviews(submission)
                .into_iter()
                .map(|r| self.scored(r))
                .collect(),
            ta_reviews: self.ta_reviews(submission),
            author_pool_at_submission: s.author_pool,
            spot_checked: self.is_spot_checked(s),
            appeal_outcome: self.appeal_outcome(submission),
        })
    }

    pub fn open_tasks_for<'a>(&'a self, user: &'a UserId) -> impl Iterator<Item = &'a Task> + 'a {
        self.tasks
            .values()
            .filter(move |t| t.is_open() && &t.assignee == user)
    }

    pub fn notifications_for<'a>(
        &'a self,
        user: &'a UserId,
    ) -> impl Iterator<Item = &'a Notification> + 'a {
        self.notifications.iter().filter(move |n| &n.recipient == user)
    }

    /// Calibration items a student has already been given.
    pub fn calibration_seen(&self, user: &UserId) -> BTreeSet<SubmissionId> {
        self.tasks
            .values()
            .filter(|t| matches!(t.kind, TaskKind::Calibration { .. }) && &t.assignee == user)
            .map(|t| t.submission_id)
            .collect()
    }

    /// Cross-entity invariants. Returns the first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        for e in self.enrollments.values() {
            let charged: u32 = self
                .submissions
                .values()
                .filter(|s| s.author == e.user_id)
                .map(|s| s.late_days_charged)
                .sum();
            if charged != e.late_days_used {
                return Err(format!(
                    "{}: charged {charged} late days but counter is {}",
                    e.user_id, e.late_days_used
                ));
            }
            if e.late_days_used > self.course.late_day_budget {
                return Err(format!("{} exceeds the late-day budget", e.user_id));
            }
        }

        let mut pairs = BTreeSet::new();
        for s in self.submissions.values() {
            if !pairs.insert((s.assignment_id, &s.author)) {
                return Err(format!("{} has two submissions for {}", s.author, s.assignment_id));
            }
            if let Some(q) = self.assignments.get(&s.assignment_id).and_then(|a| a.quiz()) {
                if q.max_attempts.is_some_and(|m| s.attempts > m) {
                    return Err(format!("{} exceeded quiz attempts", s.author));
                }
            }
        }

        for t in self.tasks.values() {
            match &t.kind {
                TaskKind::PeerReview => {
                    let s = self
                        .submissions
                        .get(&t.submission_id)
                        .ok_or_else(|| format!("task {} targets unknown submission", t.id))?;
                    if s.author == t.assignee {
                        return Err(format!("{} assigned their own submission", t.assignee));
                    }
                    if self.course.features.pools {
                        let own = self
                            .submission_of(s.assignment_id, &t.assignee)
                            .map(|o| o.author_pool);
                        if own != Some(s.author_pool) {
                            return Err(format!("task {} crosses pools", t.id));
                        }
                    }
                }
                TaskKind::Calibration { .. } => {
                    if !self.calibration.contains_key(&t.submission_id) {
                        return Err(format!("task {} targets unknown calibration item", t.id));
                    }
                }
                TaskKind::Evaluation { review_id, .. } => {
                    if !self.reviews.contains_key(review_id) {
                        return Err(format!("evaluation task {} targets unknown review", t.id));
                    }
                }
                TaskKind::TaReview { .. } => {}
            }
        }
        let mut calib = BTreeSet::new();
        for t in self.tasks.values() {
            if matches!(t.kind, TaskKind::Calibration { .. })
                && !calib.insert((&t.assignee, t.submission_id))
            {
                return Err(format!("{} given calibration item {} twice", t.assignee, t.submission_id));
            }
        }

        for r in self.reviews.values() {
            if r.status == ReviewStatus::Invalidated {
                let upheld = self.flags.values().any(|f| {
                    f.review_id == r.id && f.verdict == Some(Verdict::Upheld)
                });
                if !upheld {
                    return Err(format!("review {} invalidated without an upheld flag", r.id));
                }
            }
        }

        for (user, w) in &self.windows {
            if w.scores.iter().any(|s| !(0.0..=10.0).contains(&s.value)) {
                return Err(format!("{user} has a grader score outside [0, 10]"));
            }
        }
        for e in self.students() {
            let mut pool = Pool::Supervised;
            for d in self.pool_history.get(&e.user_id).into_iter().flatten() {
                let ok = matches!(
                    (pool, d.transition),
                    (Pool::Supervised, Transition::Promote) | (Pool::Independent, Transition::Demote)
                );
                if !ok {
                    return Err(format!("{} has a non-alternating pool history", e.user_id));
                }
                pool = d.apply_to(pool);
            }
            if pool != e.pool {
                return Err(format!("{} pool disagrees with its history", e.user_id));
            }
        }

        let mut open = BTreeSet::new();
        for a in self.appeals.values().filter(|a| a.is_open()) {
            if !open.insert(a.submission_id) {
                return Err(format!("two open appeals on {}", a.submission_id));
            }
        }
        Ok(())
    }
}
