//! The engine: every domain operation as one transaction on one course.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    self, assign_peer_reviews, route_appeal, schedule_calibration, seeded_rng, select_spot_checks,
    CalibrationMode, EdgeKind, PlanEdge, PoolMembers, ReviewAssignmentPlan, SpotCheckCandidate,
    SpotCheckSelection, TaAssignment,
};
use crate::archive::read_zip;
use crate::authz::{authorize, Caller, Operation};
use crate::clock::Clock;
use crate::domain::{
    Answer, AssignmentId, Course, CourseConfig, CourseId,
    Enrollment, Grader, GraderScore, Pool, Review, ReviewId, ReviewKind, ReviewStatus, Role, Rubric,
    RubricId, RubricKind, RubricSpec, ScoreSource, SubmissionId, TaskId, Timestamp, UserId,
};
use crate::error::{Error, Result};
use crate::grading::{consensus_reward, resolve_final_grade, FinalGrade, Provenance};
use crate::moderation::{
    attribute_demotion, evaluation_score, Appeal, AppealOutcome, CaseStatus, Evaluation,
    EvaluationOrigin, Flag, Notification, NotificationKind, Polarity, Verdict,
};
use crate::policy::PolicySet;
use crate::pool::{apply_moderation_trigger, record_grader_score, ModerationTrigger, Transition};
use crate::rubric::{
    score_calibration_review, scoped_points, validate_review, validate_scoped,
    CalibrationGroundTruth,
};
use crate::state::{
    CalibrationItem, ConsensusScore, CourseState, Event, Finalization, TaReason, Task, TaskKind,
    TaskStatus,
};
use crate::store::{content_address, Store, Tx};
use crate::workflow::{
    check_text, submission_lateness, Assignment, AssignmentKind, AssignmentSpec, BatchResult,
    FileKind, IngestRejection, LateAssessment, LateRejection, Payload, Submission,
    SubmissionOrigin,
};

/// What a student hands in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubmissionInput {
    Text { body: String },
    File { filename: String, bytes: Vec<u8> },
    Quiz { answers: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationOptions {
    pub k: usize,
    pub seed: u64,
    /// Per-question TA split for supervised and solo submissions.
    #[serde(default)]
    pub split: Option<BTreeMap<String, UserId>>,
}

impl AllocationOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, seed, split: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub plan: ReviewAssignmentPlan,
    pub tasks: Vec<TaskId>,
    pub calibration_shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFeedback {
    pub score: f64,
    pub truth_choices: BTreeMap<String, usize>,
    pub rationale: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewReceipt {
    pub task_id: TaskId,
    pub review_id: Option<ReviewId>,
    pub evaluation_id: Option<crate::domain::EvaluationId>,
    pub points: f64,
    pub calibration: Option<CalibrationFeedback>,
    pub pool_transition: Option<Transition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum AppealDecision {
    Uphold { answers: Vec<Answer> },
    Deny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationScheduleReport {
    pub tasks: Vec<TaskId>,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationIngestReport {
    pub added: Vec<(String, SubmissionId)>,
    pub duplicates: Vec<String>,
    pub rejected: Vec<(String, String)>,
}

pub const UNGRADED: &str = "ungraded";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRow {
    pub username: String,
    pub peer_aggregate: Option<f64>,
    pub ta_grade: Option<f64>,
    pub final_grade: Option<f64>,
    pub provenance: String,
    pub late_days: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    AllocateReviews(AllocationOptions),
    SelectSpotChecks { n: usize, seed: u64 },
    FinalizeGrades,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum StepReport {
    AllocateReviews(AllocationReport),
    SelectSpotChecks(SpotCheckSelection),
    FinalizeGrades { rows: Vec<GradeRow> },
}

fn caller_enrollment<'a>(state: &'a CourseState, caller: &Caller) -> Option<&'a Enrollment> {
    match caller {
        Caller::User(u) => state.enrollment(u),
        Caller::Operator => None,
    }
}

/// Final grade of one submission under the course's aggregation policy.
pub fn final_grade(state: &CourseState, policies: &PolicySet, submission: SubmissionId) -> Result<FinalGrade> {
    let s = state
        .submissions
        .get(&submission)
        .ok_or_else(|| Error::not_found(format!("submission {submission}")))?;
    if let Some(g) = s.quiz_grade {
        return Ok(FinalGrade { submission_id: submission, value: g, provenance: Provenance::AutoGraded });
    }
    let policy = policies.aggregation.get(&state.course.policies.aggregation)?;
    let grade_state = state.grade_state(submission).expect("submission exists");
    resolve_final_grade(&grade_state, policy.as_ref())
}

/// Grade report for one assignment: a row per enrolled student.
pub fn grade_rows(state: &CourseState, policies: &PolicySet, assignment: AssignmentId) -> Result<Vec<GradeRow>> {
    let policy = policies.aggregation.get(&state.course.policies.aggregation)?;
    let mut rows = Vec::new();
    for e in state.students() {
        let Some(s) = state.submission_of(assignment, &e.user_id) else {
            rows.push(GradeRow {
                username: e.user_id.to_string(),
                peer_aggregate: None,
                ta_grade: None,
                final_grade: None,
                provenance: UNGRADED.into(),
                late_days: 0,
            });
            continue;
        };
        let gs = state.grade_state(s.id).expect("submission exists");
        let peer = if gs.peer_reviews.is_empty() {
            None
        } else {
            Some(policy.aggregate_reviews(&gs.peer_reviews)?)
        };
        let ta = match gs.appeal_outcome {
            Some(g) => Some(g),
            None if !gs.ta_reviews.is_empty() => Some(policy.aggregate_reviews(&gs.ta_reviews)?),
            None => None,
        };
        let (final_value, provenance) = match final_grade(state, policies, s.id) {
            Ok(g) => (Some(g.value), g.provenance.label().to_string()),
            Err(Error::Ungradable) => (None, UNGRADED.to_string()),
            Err(e) => return Err(e),
        };
        rows.push(GradeRow {
            username: e.user_id.to_string(),
            peer_aggregate: peer,
            ta_grade: ta,
            final_grade: final_value,
            provenance,
            late_days: s.late_days_charged,
        });
    }
    Ok(rows)
}

pub fn grade_rows_csv(rows: &[GradeRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["username", "peer_aggregate", "ta_grade", "final_grade", "provenance", "late_days"])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.username.clone(),
            cell(r.peer_aggregate),
            cell(r.ta_grade),
            cell(r.final_grade),
            r.provenance.clone(),
            r.late_days.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of strings is utf-8"))
}

fn assignment<'a>(state: &'a CourseState, id: AssignmentId) -> Result<&'a Assignment> {
    state
        .assignments
        .get(&id)
        .ok_or_else(|| Error::not_found(format!("assignment {id}")))
}

fn rubric<'a>(state: &'a CourseState, id: RubricId) -> Result<&'a Rubric> {
    state
        .rubrics
        .get(&id)
        .ok_or_else(|| Error::not_found(format!("rubric {id}")))
}

fn submission_rubric<'a>(state: &'a CourseState, a: &Assignment) -> Result<&'a Rubric> {
    let id = a
        .rubric_id
        .ok_or_else(|| Error::invalid(format!("assignment {} has no rubric", a.id)))?;
    rubric(state, id)
}

fn new_task(
    tx: &mut Tx,
    kind: TaskKind,
    assignee: UserId,
    submission_id: SubmissionId,
    assignment_id: Option<AssignmentId>,
    due_at: Option<Timestamp>,
) -> TaskId {
    let id = TaskId(tx.fresh_id());
    let task = Task {
        id,
        kind,
        assignee,
        submission_id,
        assignment_id,
        status: TaskStatus::Open,
        created_at: tx.now(),
        due_at,
    };
    tx.emit(Event::TaskCreated { task });
    id
}

/// The staff member with the fewest open TA tasks; ties broken by seed.
fn least_loaded_grader(state: &CourseState, seed: u64) -> Result<UserId> {
    let staff = state.graders_on_staff();
    let mut loads: BTreeMap<UserId, usize> = BTreeMap::new();
    for t in state.tasks.values().filter(|t| t.is_open() && t.is_staff_task()) {
        *loads.entry(t.assignee.clone()).or_default() += 1;
    }
    route_appeal(&loads, &staff, seed)
}

/// The staff member with the fewest open appeals and flags.
fn route_case(state: &CourseState, seed: u64) -> Result<UserId> {
    let staff = state.graders_on_staff();
    let mut loads: BTreeMap<UserId, usize> = BTreeMap::new();
    let assignees = state
        .appeals
        .values()
        .filter(|a| a.is_open())
        .filter_map(|a| a.assignee.clone())
        .chain(state.flags.values().filter(|f| f.is_open()).filter_map(|f| f.assignee.clone()));
    for a in assignees {
        *loads.entry(a).or_default() += 1;
    }
    route_appeal(&loads, &staff, seed)
}

#[derive(Clone)]
pub struct Engine {
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    policies: Arc<PolicySet>,
}

impl Engine {
    pub fn new(store: Store, clock: Arc<dyn Clock>) -> Self {
        Self::with_policies(store, clock, PolicySet::default())
    }

    pub fn with_policies(store: Store, clock: Arc<dyn Clock>, policies: PolicySet) -> Self {
        Self { store: Arc::new(store), clock, policies: Arc::new(policies) }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn tx<R>(
        &self,
        caller: &Caller,
        course: CourseId,
        op: Operation,
        body: impl FnOnce(&mut Tx) -> Result<R>,
    ) -> Result<R> {
        self.store.transact(course, caller.actor(), self.clock.now(), |tx| {
            authorize(caller, op, caller_enrollment(tx.state(), caller))?;
            body(tx)
        })
    }

    /// Authorized read of a course.
    pub fn view<R>(
        &self,
        caller: &Caller,
        course: CourseId,
        op: Operation,
        f: impl FnOnce(&CourseState, Timestamp) -> Result<R>,
    ) -> Result<R> {
        let now = self.clock.now();
        self.store.read(course, |state| {
            authorize(caller, op, caller_enrollment(state, caller))?;
            f(state, now)
        })?
    }

    /// Unchecked read, for tooling and tests.
    pub fn read<R>(&self, course: CourseId, f: impl FnOnce(&CourseState) -> R) -> Result<R> {
        self.store.read(course, f)
    }

    // ---- courses and enrollment ----

    /// Creates a course. A user caller becomes its instructor and
    /// administrator.
    pub fn create_course(&self, caller: &Caller, config: CourseConfig) -> Result<Course> {
        config.validate()?;
        self.policies.check(&config.policies)?;
        let mut registry = self.store.registry();
        registry.check_free(None, &config.name, config.enrollment_codes.values())?;
        let id = CourseId(registry.next_course);
        let course = Course::from_config(id, config);
        let first = Event::CourseCreated {
            course: course.clone(),
            evaluation_rubric: Rubric::default_evaluation(RubricId(1)),
        };
        let state = self.store.create_course(&mut registry, caller.actor(), self.clock.now(), first, |tx| {
            if let Caller::User(u) = caller {
                let mut e = Enrollment::new(u.clone(), id, Role::Instructor);
                e.admin = true;
                tx.emit(Event::Enrolled { enrollment: e });
            }
            Ok(())
        })?;
        Ok(state.course)
    }

    pub fn update_course(&self, caller: &Caller, course: CourseId, config: CourseConfig) -> Result<Course> {
        config.validate()?;
        self.policies.check(&config.policies)?;
        let registry = self.store.registry();
        registry.check_free(Some(course), &config.name, config.enrollment_codes.values())?;
        let updated = self.tx(caller, course, Operation::UpdateCourse, |tx| {
            let c = Course::from_config(course, config);
            tx.emit(Event::CourseUpdated { course: c.clone() });
            Ok(c)
        })?;
        drop(registry);
        // re-index names and codes
        let mut registry = self.store.registry();
        registry.names.retain(|_, c| *c != course);
        registry.codes.retain(|_, c| *c != course);
        registry.names.insert(updated.name.clone(), course);
        for code in updated.enrollment_codes.values() {
            registry.codes.insert(code.clone(), course);
        }
        Ok(updated)
    }

    pub fn enroll(&self, user: &UserId, code: &str) -> Result<Enrollment> {
        let course = *self.store.registry().codes.get(code).ok_or(Error::UnknownCode)?;
        let caller = Caller::User(user.clone());
        self.tx(&caller, course, Operation::Enroll, |tx| {
            let role = tx.state().course.role_for_code(code).ok_or(Error::UnknownCode)?;
            if let Some(e) = tx.state().enrollment(user) {
                return Err(Error::AlreadyEnrolled(e.role));
            }
            let e = Enrollment::new(user.clone(), course, role);
            tx.emit(Event::Enrolled { enrollment: e.clone() });
            Ok(e)
        })
    }

    /// Adds a member directly, bypassing enrollment codes.
    pub fn add_member(&self, caller: &Caller, course: CourseId, user: &UserId, role: Role, admin: bool) -> Result<Enrollment> {
        if admin && role == Role::Student {
            return Err(Error::invalid("only instructors and TAs can be administrators"));
        }
        self.tx(caller, course, Operation::AddMember, |tx| {
            if let Some(e) = tx.state().enrollment(user) {
                return Err(Error::AlreadyEnrolled(e.role));
            }
            let mut e = Enrollment::new(user.clone(), course, role);
            e.admin = admin;
            tx.emit(Event::Enrolled { enrollment: e.clone() });
            Ok(e)
        })
    }

    pub fn set_role(&self, caller: &Caller, course: CourseId, user: &UserId, role: Role, admin: bool) -> Result<Enrollment> {
        if admin && role == Role::Student {
            return Err(Error::invalid("only instructors and TAs can be administrators"));
        }
        self.tx(caller, course, Operation::SetRole, |tx| {
            if tx.state().enrollment(user).is_none() {
                return Err(Error::not_found(format!("enrollment of {user}")));
            }
            tx.emit(Event::RoleChanged { user_id: user.clone(), role, admin });
            Ok(tx.state().enrollment(user).cloned().expect("just checked"))
        })
    }

    /// Courses the user belongs to, with their enrollment.
    pub fn courses_for(&self, user: &UserId) -> Vec<(Course, Enrollment)> {
        self.store
            .course_ids()
            .into_iter()
            .filter_map(|c| {
                self.store
                    .read(c, |s| s.enrollment(user).map(|e| (s.course.clone(), e.clone())))
                    .ok()
                    .flatten()
            })
            .collect()
    }

    // ---- rubrics and assignments ----

    pub fn add_rubric(&self, caller: &Caller, course: CourseId, spec: RubricSpec) -> Result<Rubric> {
        self.tx(caller, course, Operation::AddRubric, |tx| {
            let r = Rubric::new(RubricId(tx.fresh_id()), spec)?;
            tx.emit(Event::RubricAdded { rubric: r.clone() });
            Ok(r)
        })
    }

    fn check_assignment_spec(state: &CourseState, spec: &AssignmentSpec) -> Result<()> {
        spec.validate()?;
        if let Some(id) = spec.rubric_id {
            let r = rubric(state, id)?;
            if r.kind != RubricKind::SubmissionRubric {
                return Err(Error::invalid(format!("rubric {id} is not a submission rubric")));
            }
        }
        Ok(())
    }

    pub fn create_assignment(&self, caller: &Caller, course: CourseId, spec: AssignmentSpec) -> Result<Assignment> {
        self.tx(caller, course, Operation::CreateAssignment, |tx| {
            Self::check_assignment_spec(tx.state(), &spec)?;
            let a = Assignment::new(AssignmentId(tx.fresh_id()), course, spec)?;
            tx.emit(Event::AssignmentSaved { assignment: a.clone() });
            Ok(a)
        })
    }

    pub fn update_assignment(
        &self,
        caller: &Caller,
        course: CourseId,
        id: AssignmentId,
        spec: AssignmentSpec,
    ) -> Result<Assignment> {
        self.tx(caller, course, Operation::UpdateAssignment, |tx| {
            let old = assignment(tx.state(), id)?;
            Self::check_assignment_spec(tx.state(), &spec)?;
            let has_work = tx.state().submissions_for(id).next().is_some();
            if has_work && old.kind.label() != spec.kind.label() {
                return Err(Error::Conflict("cannot change the type of an assignment with submissions".into()));
            }
            if tx.state().plans.contains_key(&id) && old.rubric_id != spec.rubric_id {
                return Err(Error::Conflict("cannot change the rubric after reviews are assigned".into()));
            }
            let a = Assignment::new(id, course, spec)?;
            tx.emit(Event::AssignmentSaved { assignment: a.clone() });
            Ok(a)
        })
    }

    // ---- submissions ----

    pub fn submit(
        &self,
        caller: &Caller,
        course: CourseId,
        assignment_id: AssignmentId,
        input: SubmissionInput,
    ) -> Result<Submission> {
        let author = caller.user_id()?.clone();
        let blob = match &input {
            SubmissionInput::File { bytes, .. } => Some(self.store.blobs().put(bytes)?),
            _ => None,
        };
        self.tx(caller, course, Operation::Submit, |tx| {
            let state = tx.state();
            let now = tx.now();
            let a = assignment(state, assignment_id)?.clone();
            if !a.visible {
                return Err(Error::not_found(format!("assignment {assignment_id}")));
            }
            for (qid, q) in &state.assignments {
                let gated = q.quiz().is_some_and(|c| c.prerequisite_for.contains(&assignment_id));
                if gated && state.submission_of(*qid, &author).is_none() {
                    return Err(Error::PrerequisiteMissing);
                }
            }
            let existing = state.submission_of(assignment_id, &author).cloned();
            if existing.is_some() && state.plans.contains_key(&assignment_id) {
                return Err(Error::DeadlinePassed("reviews have already been assigned".into()));
            }

            let attempts = existing.as_ref().map_or(0, |s| s.attempts) + 1;
            let mut quiz_grade = None;
            let payload = match (&a.kind, input) {
                (AssignmentKind::Text { limit }, SubmissionInput::Text { body }) => {
                    check_text(&body, *limit)?;
                    Payload::Text { body }
                }
                (AssignmentKind::Upload { accepted }, SubmissionInput::File { filename, .. }) => {
                    let kind = FileKind::from_filename(&filename)
                        .filter(|k| accepted.contains(k))
                        .ok_or_else(|| Error::invalid(format!("{filename}: file type not accepted")))?;
                    Payload::File {
                        blob: blob.clone().expect("stored above"),
                        filename,
                        media_type: kind.media_type().into(),
                    }
                }
                (AssignmentKind::Quiz(q), SubmissionInput::Quiz { answers }) => {
                    if answers.len() != q.questions.len() {
                        return Err(Error::invalid(format!(
                            "quiz has {} questions, got {} answers",
                            q.questions.len(),
                            answers.len()
                        )));
                    }
                    if answers.iter().zip(&q.questions).any(|(c, qq)| *c >= qq.options.len()) {
                        return Err(Error::invalid("quiz answer out of range"));
                    }
                    quiz_grade = Some(crate::rubric::score_quiz(&answers, &q.key(a.id), q.out_of, attempts)?);
                    Payload::Quiz { answers }
                }
                (kind, input) => {
                    return Err(Error::invalid(format!(
                        "a {} assignment does not take {} submissions",
                        kind.label(),
                        match input {
                            SubmissionInput::Text { .. } => "text",
                            SubmissionInput::File { .. } => "file",
                            SubmissionInput::Quiz { .. } => "quiz",
                        }
                    )))
                }
            };

            let enrollment = state.enrollment(&author).expect("authorized as student");
            let already = existing.as_ref().map_or(0, |s| s.late_days_charged);
            let remaining = state.course.late_day_budget.saturating_sub(enrollment.late_days_used) + already;
            let days = match submission_lateness(now, &a, remaining) {
                LateAssessment::Rejected(reason) => {
                    return Err(Error::LateRejected(
                        match reason {
                            LateRejection::NotYetOpen => "not yet open",
                            LateRejection::ExceedsAssignmentLimit => "exceeds assignment limit",
                            LateRejection::BudgetExhausted => "late-day budget exhausted",
                        }
                        .into(),
                    ))
                }
                other => other.days(),
            };
            let charged = already.max(days);
            let pool = enrollment.pool;
            let id = match &existing {
                Some(s) => s.id,
                None => SubmissionId(tx.fresh_id()),
            };
            let submission = Submission {
                id,
                assignment_id,
                author: author.clone(),
                payload,
                submitted_at: now,
                late_days_charged: charged,
                attempts,
                author_pool: existing.as_ref().map_or(pool, |s| s.author_pool),
                origin: SubmissionOrigin::Student,
                quiz_grade,
                updated_seq: 0,
            };
            let is_new = existing.is_none();
            tx.emit(Event::SubmissionSaved { submission: submission.clone(), late_days_delta: charged - already });

            // Arrived after reviews were handed out: a TA grades it.
            if is_new && tx.state().plans.contains_key(&assignment_id) {
                let ta = least_loaded_grader(tx.state(), tx.next_sequence())?;
                new_task(
                    tx,
                    TaskKind::TaReview { reason: TaReason::Late, questions: None, group: None },
                    ta,
                    submission.id,
                    Some(assignment_id),
                    Some(a.ta_review_deadline),
                );
            }
            Ok(tx.state().submissions[&submission.id].clone())
        })
    }

    /// Turns each archive entry named after an enrolled student into that
    /// student's submission, on time regardless of the clock.
    pub fn ingest_zip(&self, caller: &Caller, course: CourseId, assignment_id: AssignmentId, bytes: &[u8]) -> Result<BatchResult> {
        let entries = read_zip(bytes)?;
        self.tx(caller, course, Operation::IngestZip, |tx| {
            let a = assignment(tx.state(), assignment_id)?.clone();
            let AssignmentKind::Upload { accepted } = &a.kind else {
                return Err(Error::invalid("zip ingestion needs an upload assignment"));
            };
            if tx.state().plans.contains_key(&assignment_id) {
                return Err(Error::DeadlinePassed("reviews have already been assigned".into()));
            }
            let stem = |name: &str| -> String {
                match name.rsplit_once('.') {
                    Some((s, _)) if !s.is_empty() => s.to_string(),
                    _ => name.to_string(),
                }
            };
            let mut per_user: BTreeMap<String, usize> = BTreeMap::new();
            for e in &entries {
                *per_user.entry(stem(e.base_name())).or_default() += 1;
            }
            let mut result = BatchResult::default();
            for e in &entries {
                let user = stem(e.base_name());
                let uid = UserId::new(user.clone());
                let is_student = tx.state().enrollment(&uid).is_some_and(|en| en.role == Role::Student);
                let kind = FileKind::from_filename(e.base_name()).filter(|k| accepted.contains(k));
                let rejection = if per_user[&user] > 1 {
                    Some(IngestRejection::Ambiguous)
                } else if !is_student {
                    Some(IngestRejection::UnknownUsername)
                } else if kind.is_none() {
                    Some(IngestRejection::UnsupportedKind)
                } else {
                    None
                };
                if let Some(r) = rejection {
                    result.rejected.push((e.name.clone(), r));
                    continue;
                }
                let hash = content_address(&e.data);
                let existing = tx.state().submission_of(assignment_id, &uid).cloned();
                if let Some(Payload::File { blob, .. }) = existing.as_ref().map(|s| &s.payload) {
                    if *blob == hash {
                        result.rejected.push((e.name.clone(), IngestRejection::DuplicateOfExisting));
                        continue;
                    }
                }
                self.store.blobs().put(&e.data)?;
                let pool = tx.state().enrollment(&uid).expect("checked").pool;
                let submission = Submission {
                    id: existing.as_ref().map_or_else(|| SubmissionId(tx.fresh_id()), |s| s.id),
                    assignment_id,
                    author: uid,
                    payload: Payload::File {
                        blob: hash,
                        filename: e.base_name().to_string(),
                        media_type: kind.expect("checked").media_type().into(),
                    },
                    submitted_at: tx.now(),
                    late_days_charged: existing.as_ref().map_or(0, |s| s.late_days_charged),
                    attempts: existing.as_ref().map_or(0, |s| s.attempts) + 1,
                    author_pool: existing.as_ref().map_or(pool, |s| s.author_pool),
                    origin: SubmissionOrigin::Ingested,
                    quiz_grade: None,
                    updated_seq: 0,
                };
                result.accepted.push((e.name.clone(), submission.id));
                tx.emit(Event::SubmissionSaved { submission, late_days_delta: 0 });
            }
            Ok(result)
        })
    }

    // ---- calibration ----

    /// Adds one calibration item. Returns `None` when identical content is
    /// already in the corpus.
    pub fn add_calibration_item(
        &self,
        caller: &Caller,
        course: CourseId,
        rubric_id: RubricId,
        name: &str,
        bytes: &[u8],
        truth: CalibrationGroundTruth,
    ) -> Result<Option<SubmissionId>> {
        let mut report = self.ingest_calibration_entries(caller, course, rubric_id, vec![(name.to_string(), bytes.to_vec(), Some(truth))])?;
        if let Some((_, reason)) = report.rejected.pop() {
            return Err(Error::invalid(reason));
        }
        Ok(report.added.pop().map(|(_, id)| id))
    }

    /// Ingests an archive of essays plus a `truth.csv` table with a `file`
    /// column, one column per rubric question holding the correct choice,
    /// and optional `<question>_rationale` columns.
    pub fn ingest_calibration(&self, caller: &Caller, course: CourseId, rubric_id: RubricId, archive: &[u8]) -> Result<CalibrationIngestReport> {
        let entries = read_zip(archive)?;
        let table = entries
            .iter()
            .find(|e| e.base_name() == "truth.csv")
            .ok_or_else(|| Error::MalformedArchive("missing truth.csv".into()))?;
        let mut reader = csv::Reader::from_reader(table.data.as_slice());
        let headers = reader.headers()?.clone();
        let file_col = headers
            .iter()
            .position(|h| h == "file")
            .ok_or_else(|| Error::MalformedArchive("truth.csv needs a file column".into()))?;
        let mut rows: BTreeMap<String, csv::StringRecord> = BTreeMap::new();
        for row in reader.records() {
            let row = row?;
            rows.insert(row.get(file_col).unwrap_or_default().to_string(), row);
        }
        let mut items = Vec::new();
        let mut report = CalibrationIngestReport::default();
        let essays: Vec<_> = entries.iter().filter(|e| e.base_name() != "truth.csv").collect();
        for e in &essays {
            let truth = match rows.get(e.base_name()) {
                None => None,
                Some(row) => {
                    let mut t = CalibrationGroundTruth {
                        calibration_submission_id: SubmissionId(0),
                        truth_choices: BTreeMap::new(),
                        rationale: BTreeMap::new(),
                    };
                    let mut bad = None;
                    for (h, v) in headers.iter().zip(row.iter()) {
                        if h == "file" {
                            continue;
                        }
                        if let Some(q) = h.strip_suffix("_rationale") {
                            if !v.is_empty() {
                                t.rationale.insert(q.to_string(), v.to_string());
                            }
                        } else if !v.trim().is_empty() {
                            match v.trim().parse::<usize>() {
                                Ok(c) => {
                                    t.truth_choices.insert(h.to_string(), c);
                                }
                                Err(_) => bad = Some(format!("column {h}: {v:?} is not a choice index")),
                            }
                        }
                    }
                    match bad {
                        Some(reason) => {
                            report.rejected.push((e.name.clone(), reason));
                            continue;
                        }
                        None => Some(t),
                    }
                }
            };
            items.push((e.name.clone(), e.data.clone(), truth));
        }
        for file in rows.keys() {
            if !essays.iter().any(|e| e.base_name() == file) {
                report.rejected.push((file.clone(), "truth row without essay".into()));
            }
        }
        let mut r = self.ingest_calibration_entries(caller, course, rubric_id, items)?;
        r.rejected.extend(report.rejected);
        Ok(r)
    }

    fn ingest_calibration_entries(
        &self,
        caller: &Caller,
        course: CourseId,
        rubric_id: RubricId,
        items: Vec<(String, Vec<u8>, Option<CalibrationGroundTruth>)>,
    ) -> Result<CalibrationIngestReport> {
        self.tx(caller, course, Operation::IngestCalibration, |tx| {
            let r = rubric(tx.state(), rubric_id)?.clone();
            if r.kind != RubricKind::SubmissionRubric {
                return Err(Error::invalid("calibration items are graded with a submission rubric"));
            }
            let mut report = CalibrationIngestReport::default();
            let mut seen: BTreeSet<String> =
                tx.state().calibration.values().map(|c| c.content_hash.clone()).collect();
            for (name, bytes, truth) in items {
                let Some(mut truth) = truth else {
                    report.rejected.push((name, Error::MissingGroundTruth.to_string()));
                    continue;
                };
                if let Err(e) = truth.covers(&r) {
                    report.rejected.push((name, e.to_string()));
                    continue;
                }
                let hash = content_address(&bytes);
                if !seen.insert(hash.clone()) {
                    report.duplicates.push(name);
                    continue;
                }
                let id = SubmissionId(tx.fresh_id());
                truth.calibration_submission_id = id;
                let base = name.rsplit('/').next().unwrap_or(&name).to_string();
                // plain-text essays look like text submissions, so mixed-mode
                // calibration tasks cannot be told apart from peer tasks
                let is_txt = base.to_ascii_lowercase().ends_with(".txt");
                let payload = match std::str::from_utf8(&bytes) {
                    Ok(body) if is_txt => Payload::Text { body: body.to_string() },
                    _ => {
                        self.store.blobs().put(&bytes)?;
                        let media_type = FileKind::from_filename(&base)
                            .map_or("application/octet-stream", FileKind::media_type)
                            .to_string();
                        Payload::File { blob: hash.clone(), filename: base.clone(), media_type }
                    }
                };
                let item = CalibrationItem {
                    id,
                    rubric_id,
                    name: base,
                    payload,
                    content_hash: hash,
                    truth,
                };
                tx.emit(Event::CalibrationAdded { item });
                report.added.push((name, id));
            }
            Ok(report)
        })
    }

    fn schedule_for(
        tx: &mut Tx,
        student: &UserId,
        count: usize,
        mode: CalibrationMode,
        assignment: Option<&Assignment>,
        rng: &mut dyn RngCore,
    ) -> CalibrationScheduleReport {
        let corpus: Vec<SubmissionId> = tx.state().calibration.keys().copied().collect();
        let seen = tx.state().calibration_seen(student);
        let schedule = schedule_calibration(&corpus, &seen, count, rng);
        let tasks = schedule
            .items
            .iter()
            .map(|item| {
                new_task(
                    tx,
                    TaskKind::Calibration { mode },
                    student.clone(),
                    *item,
                    assignment.map(|a| a.id),
                    assignment.map(|a| a.student_review_deadline),
                )
            })
            .collect();
        CalibrationScheduleReport { tasks, shortfall: schedule.shortfall }
    }

    /// Gives students calibration items they have not seen. `students =
    /// None` means every enrolled student. Mixed mode needs an assignment,
    /// whose review tasks the calibration items blend in with.
    pub fn schedule_calibration(
        &self,
        caller: &Caller,
        course: CourseId,
        students: Option<Vec<UserId>>,
        count: usize,
        mode: CalibrationMode,
        assignment_id: Option<AssignmentId>,
        seed: u64,
    ) -> Result<BTreeMap<UserId, CalibrationScheduleReport>> {
        self.tx(caller, course, Operation::ScheduleCalibration, |tx| {
            if !tx.state().course.features.calibration {
                return Err(Error::invalid("calibration is disabled for this course"));
            }
            let a = match assignment_id {
                Some(id) => Some(assignment(tx.state(), id)?.clone()),
                None if mode == CalibrationMode::Mixed => {
                    return Err(Error::invalid("mixed calibration needs an assignment"))
                }
                None => None,
            };
            let students = match students {
                Some(list) => {
                    for s in &list {
                        if tx.state().role_of(s) != Some(Role::Student) {
                            return Err(Error::not_found(format!("student {s}")));
                        }
                    }
                    list
                }
                None => tx.state().students().map(|e| e.user_id.clone()).collect(),
            };
            let mut rng = seeded_rng(seed);
            let mut out = BTreeMap::new();
            for s in students {
                let report = Self::schedule_for(tx, &s, count, mode, a.as_ref(), &mut rng);
                out.insert(s, report);
            }
            Ok(out)
        })
    }

    // ---- allocation ----

    fn plan_in(&self, state: &CourseState, now: Timestamp, assignment_id: AssignmentId, opts: &AllocationOptions) -> Result<(ReviewAssignmentPlan, usize)> {
        let a = assignment(state, assignment_id)?;
        if matches!(a.kind, AssignmentKind::Quiz(_)) {
            return Err(Error::invalid("quizzes are graded automatically"));
        }
        if now <= a.deadline + a.grace_period() {
            return Err(Error::DeadlineNotPassed(format!("submission deadline of {} has not passed", a.name)));
        }
        if state.plans.contains_key(&assignment_id) {
            return Err(Error::Conflict("reviews have already been assigned".into()));
        }
        let r = submission_rubric(state, a)?;
        let mut pools: BTreeMap<Pool, Vec<(UserId, SubmissionId)>> = BTreeMap::new();
        for s in state.submissions_for(assignment_id) {
            pools
                .entry(state.effective_pool(s.author_pool))
                .or_default()
                .push((s.author.clone(), s.id));
        }
        let groups: Vec<PoolMembers> = pools
            .into_iter()
            .map(|(pool, members)| PoolMembers { pool, members })
            .collect();
        let mut plan = assign_peer_reviews(assignment_id, &groups, opts.k, opts.seed)?;
        plan.based_on = state.last_seq;

        // Supervised and solo submissions also go to a TA.
        let mut for_ta: Vec<SubmissionId> = groups
            .iter()
            .filter(|g| g.pool == Pool::Supervised)
            .flat_map(|g| g.members.iter().map(|(_, s)| *s))
            .collect();
        for (_, s) in &plan.solo {
            if !for_ta.contains(s) {
                for_ta.push(*s);
            }
        }
        for_ta.sort();
        if !for_ta.is_empty() {
            let staff = state.graders_on_staff();
            let policy = self.policies.ta_assignment.get(&state.course.policies.ta_assignment)?;
            let questions: Vec<String> = r.questions.iter().map(|q| q.id.clone()).collect();
            if let Some(split) = &opts.split {
                for ta in split.values() {
                    if !state.is_staff(ta) {
                        return Err(Error::invalid(format!("{ta} is not on the course staff")));
                    }
                }
            }
            let mut rng = seeded_rng(opts.seed ^ 0x7461_7461);
            let assigned: Vec<TaAssignment<SubmissionId>> = allocation::assign_ta_tasks(
                &for_ta,
                &staff,
                opts.split.as_ref(),
                &questions,
                policy.as_ref(),
                &mut rng,
            )?;
            plan.edges.extend(assigned.into_iter().map(|t| PlanEdge {
                grader: t.ta,
                submission_id: t.task,
                kind: EdgeKind::TaReview,
                review_id: None,
                questions: t.questions,
            }));
        }
        // Solo authors review calibration items instead.
        let mut shortfall = 0;
        if state.course.features.calibration {
            let corpus: Vec<SubmissionId> = state.calibration.keys().copied().collect();
            let mut rng = seeded_rng(opts.seed ^ 0x6361_6c69);
            for (author, _) in &plan.solo {
                let schedule = schedule_calibration(&corpus, &state.calibration_seen(author), opts.k, &mut rng);
                shortfall += schedule.shortfall;
                plan.edges.extend(schedule.items.into_iter().map(|item| PlanEdge {
                    grader: author.clone(),
                    submission_id: item,
                    kind: EdgeKind::Calibration,
                    review_id: None,
                    questions: None,
                }));
            }
        }
        Ok((plan, shortfall))
    }

    /// Computes a review plan without committing it.
    pub fn plan_reviews(&self, caller: &Caller, course: CourseId, assignment_id: AssignmentId, opts: &AllocationOptions) -> Result<ReviewAssignmentPlan> {
        self.view(caller, course, Operation::RunStep, |state, now| Ok(self.plan_in(state, now, assignment_id, opts)?.0))
    }

    fn commit_in(tx: &mut Tx, plan: ReviewAssignmentPlan, shortfall: usize) -> Result<AllocationReport> {
        let state = tx.state();
        let a = assignment(state, plan.assignment_id)?.clone();
        if state.plans.contains_key(&a.id) {
            return Err(Error::Conflict("reviews have already been assigned".into()));
        }
        if state.submissions_for(a.id).any(|s| s.updated_seq > plan.based_on) {
            return Err(Error::Conflict("submissions changed since the plan was computed".into()));
        }
        let mut tasks = Vec::new();
        let mut groups: BTreeMap<SubmissionId, TaskId> = BTreeMap::new();
        for edge in &plan.edges {
            let id = match edge.kind {
                EdgeKind::Peer => new_task(
                    tx,
                    TaskKind::PeerReview,
                    edge.grader.clone(),
                    edge.submission_id,
                    Some(a.id),
                    Some(a.student_review_deadline),
                ),
                EdgeKind::Calibration => new_task(
                    tx,
                    TaskKind::Calibration { mode: CalibrationMode::Separate },
                    edge.grader.clone(),
                    edge.submission_id,
                    Some(a.id),
                    Some(a.student_review_deadline),
                ),
                EdgeKind::TaReview | EdgeKind::TaEvaluation => {
                    let solo = plan.solo.iter().any(|(_, s)| *s == edge.submission_id);
                    let reason = if solo { TaReason::Solo } else { TaReason::Supervised };
                    let group = match &edge.questions {
                        Some(_) => Some(*groups.entry(edge.submission_id).or_insert(TaskId(tx.state().next_id))),
                        None => None,
                    };
                    new_task(
                        tx,
                        TaskKind::TaReview { reason, questions: edge.questions.clone(), group },
                        edge.grader.clone(),
                        edge.submission_id,
                        Some(a.id),
                        Some(a.ta_review_deadline),
                    )
                }
            };
            tasks.push(id);
        }
        tx.emit(Event::PlanCommitted { plan: plan.clone() });
        Ok(AllocationReport { plan, tasks, calibration_shortfall: shortfall })
    }

    /// Commits a previously computed plan. Fails with a conflict if any
    /// submission changed in the meantime.
    pub fn commit_plan(&self, caller: &Caller, course: CourseId, plan: ReviewAssignmentPlan) -> Result<AllocationReport> {
        self.tx(caller, course, Operation::RunStep, |tx| Self::commit_in(tx, plan, 0))
    }

    pub fn allocate_reviews(&self, caller: &Caller, course: CourseId, assignment_id: AssignmentId, opts: &AllocationOptions) -> Result<AllocationReport> {
        self.tx(caller, course, Operation::RunStep, |tx| {
            let (plan, shortfall) = self.plan_in(tx.state(), tx.now(), assignment_id, opts)?;
            Self::commit_in(tx, plan, shortfall)
        })
    }

    pub fn select_spot_checks(&self, caller: &Caller, course: CourseId, assignment_id: AssignmentId, n: usize, seed: u64) -> Result<SpotCheckSelection> {
        self.tx(caller, course, Operation::RunStep, |tx| {
            let state = tx.state();
            if !state.course.features.spot_checking {
                return Err(Error::invalid("spot checking is disabled for this course"));
            }
            let a = assignment(state, assignment_id)?.clone();
            if tx.now() < a.student_review_deadline {
                return Err(Error::DeadlineNotPassed("student reviews are still open".into()));
            }
            let policy = self.policies.spot_check.get(&state.course.policies.spot_check_selection)?;
            let aggregation = self.policies.aggregation.get(&state.course.policies.aggregation)?;
            let mut eligible = Vec::new();
            for s in state.submissions_for(assignment_id) {
                if state.effective_pool(s.author_pool) != Pool::Independent || state.is_spot_checked(s) {
                    continue;
                }
                let peers = state.counted_peer_reviews(s.id);
                if peers.is_empty() {
                    continue;
                }
                let totals: Vec<f64> = peers.iter().map(|r| r.points).collect();
                eligible.push(SpotCheckCandidate {
                    submission_id: s.id,
                    peer_grade: aggregation.aggregate(&totals).ok(),
                });
            }
            let selection = select_spot_checks(assignment_id, &eligible, n, seed, policy.as_ref());

            // One TA review per chosen submission plus one evaluation per peer review.
            let mut work: Vec<(SubmissionId, Option<ReviewId>)> = Vec::new();
            for s in &selection.chosen_submission_ids {
                work.push((*s, None));
                for r in state.counted_peer_reviews(*s) {
                    work.push((*s, Some(r.id)));
                }
            }
            let staff = state.graders_on_staff();
            let ta_policy = self.policies.ta_assignment.get(&state.course.policies.ta_assignment)?;
            let mut rng = seeded_rng(seed ^ 0x7370_6f74);
            let assigned = if work.is_empty() {
                Vec::new()
            } else {
                allocation::assign_ta_tasks(&work, &staff, None, &[], ta_policy.as_ref(), &mut rng)?
            };
            tx.emit(Event::SpotChecksSelected { selection: selection.clone() });
            for t in assigned {
                let (sid, review) = t.task;
                let kind = match review {
                    None => TaskKind::TaReview { reason: TaReason::SpotCheck, questions: None, group: None },
                    Some(review_id) => TaskKind::Evaluation { review_id, origin: EvaluationOrigin::SpotCheck },
                };
                new_task(tx, kind, t.ta, sid, Some(assignment_id), Some(a.ta_review_deadline));
            }
            Ok(selection)
        })
    }

    // ---- reviews and evaluations ----

    fn record_score(tx: &mut Tx, user: &UserId, score: GraderScore, origin: Option<EvaluationOrigin>) -> Result<Option<Transition>> {
        let state = tx.state();
        let Some(e) = state.enrollment(user).filter(|e| e.role == Role::Student) else {
            return Ok(None);
        };
        let rules = state.course.policies.promotion.clone();
        let mut window = state.windows.get(user).cloned().unwrap_or_default();
        let decision = record_grader_score(user, e.pool, &mut window, score.clone(), &rules)?;
        let decision = match origin {
            Some(o) => attribute_demotion(decision, o),
            None => decision,
        };
        let pools_on = state.course.features.pools;
        tx.emit(Event::GraderScoreRecorded { user_id: user.clone(), score });
        if pools_on && decision.transition != Transition::None {
            let t = decision.transition;
            tx.emit(Event::PoolChanged { decision });
            return Ok(Some(t));
        }
        Ok(None)
    }

    /// Completes any kind of review task: peer review, calibration, TA
    /// review or TA evaluation.
    pub fn submit_review(&self, caller: &Caller, course: CourseId, task_id: TaskId, answers: Vec<Answer>) -> Result<ReviewReceipt> {
        let user = caller.user_id()?.clone();
        self.tx(caller, course, Operation::SubmitReview, |tx| {
            let state = tx.state();
            let task = state
                .tasks
                .get(&task_id)
                .cloned()
                .ok_or_else(|| Error::not_found(format!("task {task_id}")))?;
            if task.assignee != user {
                return Err(Error::forbidden("the task is assigned to someone else"));
            }
            let now = tx.now();
            let existing = state.review_for_task(task_id).cloned();
            let mut receipt = ReviewReceipt {
                task_id,
                review_id: None,
                evaluation_id: None,
                points: 0.0,
                calibration: None,
                pool_transition: None,
            };
            match &task.kind {
                TaskKind::PeerReview => {
                    let a = assignment(state, task.assignment_id.expect("peer tasks belong to an assignment"))?;
                    if now > a.student_review_deadline {
                        return Err(Error::DeadlinePassed("the student review deadline has passed".into()));
                    }
                    let r = submission_rubric(state, a)?;
                    validate_review(&answers, r).into_result()?;
                    let points = scoped_points(&answers, r, None)?;
                    if existing.as_ref().is_some_and(|e| e.status == ReviewStatus::Invalidated) {
                        return Err(Error::Conflict("the review was invalidated".into()));
                    }
                    let supervised = state
                        .submissions
                        .get(&task.submission_id)
                        .is_some_and(|s| state.effective_pool(s.author_pool) == Pool::Supervised);
                    let (rubric_id, ta_review_deadline) = (r.id, a.ta_review_deadline);
                    let id = match &existing {
                        Some(e) => e.id,
                        None => ReviewId(tx.fresh_id()),
                    };
                    let review = Review {
                        id,
                        submission_id: task.submission_id,
                        task_id,
                        kind: ReviewKind::Peer,
                        grader: Grader::Student(user.clone()),
                        rubric_id,
                        answers,
                        status: ReviewStatus::Submitted,
                        submitted_at: Some(now),
                        points,
                        covers: None,
                        group: None,
                    };
                    receipt.review_id = Some(review.id);
                    receipt.points = points;
                    let first = existing.is_none();
                    let review_id = review.id;
                    tx.emit(Event::ReviewSaved { review });
                    // Supervised graders have every review checked by a TA.
                    if first && supervised {
                        let ta = least_loaded_grader(tx.state(), tx.next_sequence())?;
                        new_task(
                            tx,
                            TaskKind::Evaluation { review_id, origin: EvaluationOrigin::Supervised },
                            ta,
                            task.submission_id,
                            task.assignment_id,
                            Some(ta_review_deadline),
                        );
                    }
                }
                TaskKind::Calibration { .. } => {
                    if existing.is_some() {
                        return Err(Error::Conflict("calibration reviews are final once submitted".into()));
                    }
                    let item = state
                        .calibration
                        .get(&task.submission_id)
                        .cloned()
                        .ok_or_else(|| Error::not_found("calibration item"))?;
                    let r = rubric(state, item.rubric_id)?;
                    validate_review(&answers, r).into_result()?;
                    let points = scoped_points(&answers, r, None)?;
                    let score = score_calibration_review(&answers, &item.truth)?;
                    let review = Review {
                        id: ReviewId(tx.fresh_id()),
                        submission_id: item.id,
                        task_id,
                        kind: ReviewKind::Calibration,
                        grader: Grader::Student(user.clone()),
                        rubric_id: item.rubric_id,
                        answers,
                        status: ReviewStatus::Submitted,
                        submitted_at: Some(now),
                        points,
                        covers: None,
                        group: None,
                    };
                    receipt.review_id = Some(review.id);
                    receipt.points = points;
                    receipt.calibration = Some(CalibrationFeedback {
                        score,
                        truth_choices: item.truth.truth_choices.clone(),
                        rationale: item.truth.rationale.clone(),
                    });
                    tx.emit(Event::ReviewSaved { review });
                    if tx.state().course.features.calibration {
                        let s = GraderScore { source: ScoreSource::Calibration, value: score, at: now };
                        receipt.pool_transition = Self::record_score(tx, &user, s, None)?;
                    }
                }
                TaskKind::TaReview { questions, group, .. } => {
                    let a = assignment(state, task.assignment_id.expect("TA reviews belong to an assignment"))?;
                    let r = submission_rubric(state, a)?;
                    validate_scoped(&answers, r, questions.as_deref()).into_result()?;
                    let points = scoped_points(&answers, r, questions.as_deref())?;
                    let rubric_id = r.id;
                    let id = match &existing {
                        Some(e) => e.id,
                        None => ReviewId(tx.fresh_id()),
                    };
                    let review = Review {
                        id,
                        submission_id: task.submission_id,
                        task_id,
                        kind: ReviewKind::Ta,
                        grader: Grader::Ta(user.clone()),
                        rubric_id,
                        answers,
                        status: ReviewStatus::Submitted,
                        submitted_at: Some(now),
                        points,
                        covers: questions.clone(),
                        group: *group,
                    };
                    receipt.review_id = Some(review.id);
                    receipt.points = points;
                    tx.emit(Event::ReviewSaved { review });
                }
                TaskKind::Evaluation { review_id, origin } => {
                    if state.evaluation_for_task(task_id).is_some() {
                        return Err(Error::Conflict("evaluations are final once submitted".into()));
                    }
                    let r = rubric(state, state.evaluation_rubric)?;
                    let score = evaluation_score(&answers, r)?;
                    let target = state
                        .reviews
                        .get(review_id)
                        .cloned()
                        .ok_or_else(|| Error::not_found(format!("review {review_id}")))?;
                    let evaluation = Evaluation {
                        id: crate::domain::EvaluationId(tx.fresh_id()),
                        review_id: *review_id,
                        task_id,
                        evaluator: user.clone(),
                        answers,
                        score,
                        origin: *origin,
                        at: now,
                    };
                    receipt.evaluation_id = Some(evaluation.id);
                    receipt.points = score;
                    tx.emit(Event::EvaluationRecorded { evaluation });
                    if let Grader::Student(grader) = &target.grader {
                        let s = GraderScore { source: ScoreSource::TaEvaluation, value: score, at: now };
                        receipt.pool_transition = Self::record_score(tx, grader, s, Some(*origin))?;
                    }
                }
            }
            Ok(receipt)
        })
    }

    /// Asks for a TA evaluation of one submitted review.
    pub fn request_evaluation(&self, caller: &Caller, course: CourseId, review_id: ReviewId) -> Result<Task> {
        self.tx(caller, course, Operation::RequestEvaluation, |tx| {
            let state = tx.state();
            let review = state
                .reviews
                .get(&review_id)
                .cloned()
                .ok_or_else(|| Error::not_found(format!("review {review_id}")))?;
            if review.status != ReviewStatus::Submitted || review.kind != ReviewKind::Peer {
                return Err(Error::invalid("only submitted peer reviews can be evaluated"));
            }
            let pending = state.tasks.values().any(|t| {
                t.is_open() && matches!(t.kind, TaskKind::Evaluation { review_id: r, .. } if r == review_id)
            });
            if pending {
                return Err(Error::DuplicateEvaluation);
            }
            let assignee = match caller {
                Caller::User(u) if state.role_of(u) == Some(Role::Ta) => u.clone(),
                _ => least_loaded_grader(state, tx.next_sequence())?,
            };
            let assignment_id = state.submissions.get(&review.submission_id).map(|s| s.assignment_id);
            let due = assignment_id
                .and_then(|a| state.assignments.get(&a))
                .map(|a| a.ta_review_deadline.max(tx.now()));
            let id = new_task(
                tx,
                TaskKind::Evaluation { review_id, origin: EvaluationOrigin::Manual },
                assignee,
                review.submission_id,
                assignment_id,
                due,
            );
            Ok(tx.state().tasks[&id].clone())
        })
    }

    // ---- appeals ----

    pub fn file_appeal(&self, caller: &Caller, course: CourseId, submission_id: SubmissionId, argument: String) -> Result<Appeal> {
        let user = caller.user_id()?.clone();
        self.tx(caller, course, Operation::FileAppeal, |tx| {
            let state = tx.state();
            let s = state
                .submissions
                .get(&submission_id)
                .ok_or_else(|| Error::not_found(format!("submission {submission_id}")))?;
            if s.author != user {
                return Err(Error::forbidden("only the author can appeal a grade"));
            }
            let a = assignment(state, s.assignment_id)?;
            if tx.now() < a.ta_review_deadline {
                return Err(Error::GradesNotFinal);
            }
            if state.open_appeal_for(submission_id).is_some() {
                return Err(Error::DuplicateAppeal);
            }
            if argument.trim().is_empty() {
                return Err(Error::invalid("an appeal needs an argument"));
            }
            let assignee = route_case(state, tx.next_sequence())?;
            let id = crate::domain::AppealId(tx.fresh_id());
            let appeal = Appeal {
                id,
                submission_id,
                appellant: user.clone(),
                argument,
                status: CaseStatus::Open,
                assignee: None,
                outcome: None,
                resolved_by: None,
                filed_at: tx.now(),
                resolved_at: None,
            };
            tx.emit(Event::AppealFiled { appeal });
            tx.emit(Event::AppealAssigned { appeal_id: id, assignee });
            Ok(tx.state().appeals[&id].clone())
        })
    }

    fn may_resolve(state: &CourseState, caller: &Caller, assignee: Option<&UserId>) -> Result<()> {
        match caller {
            Caller::Operator => Ok(()),
            Caller::User(u) if state.role_of(u) == Some(Role::Instructor) || assignee == Some(u) => Ok(()),
            Caller::User(_) => Err(Error::forbidden("only the assigned TA or an instructor may resolve this")),
        }
    }

    pub fn resolve_appeal(&self, caller: &Caller, course: CourseId, appeal_id: crate::domain::AppealId, decision: AppealDecision) -> Result<Appeal> {
        self.tx(caller, course, Operation::ResolveAppeal, |tx| {
            let state = tx.state();
            let appeal = state
                .appeals
                .get(&appeal_id)
                .cloned()
                .ok_or_else(|| Error::not_found(format!("appeal {appeal_id}")))?;
            Self::may_resolve(state, caller, appeal.assignee.as_ref())?;
            if !appeal.is_open() {
                return Err(Error::AlreadyResolved);
            }
            let resolver = UserId::new(caller.actor());
            let now = tx.now();
            let outcome = match decision {
                AppealDecision::Deny => AppealOutcome::Denied,
                AppealDecision::Uphold { answers } => {
                    let s = state.submissions[&appeal.submission_id].clone();
                    let a = assignment(state, s.assignment_id)?.clone();
                    let r = submission_rubric(state, &a)?;
                    validate_review(&answers, r).into_result()?;
                    let points = scoped_points(&answers, r, None)?;
                    let rubric_id = r.id;
                    let peers: Vec<ReviewId> = state.counted_peer_reviews(s.id).iter().map(|r| r.id).collect();
                    let task = new_task(
                        tx,
                        TaskKind::TaReview { reason: TaReason::Appeal, questions: None, group: None },
                        resolver.clone(),
                        s.id,
                        Some(a.id),
                        None,
                    );
                    let review = Review {
                        id: ReviewId(tx.fresh_id()),
                        submission_id: s.id,
                        task_id: task,
                        kind: ReviewKind::Ta,
                        grader: Grader::Ta(resolver.clone()),
                        rubric_id,
                        answers,
                        status: ReviewStatus::Submitted,
                        submitted_at: Some(now),
                        points,
                        covers: None,
                        group: None,
                    };
                    let review_id = review.id;
                    tx.emit(Event::ReviewSaved { review });
                    // Every peer review of the appealed submission is evaluated.
                    let staff = tx.state().graders_on_staff();
                    let policy = self.policies.ta_assignment.get(&tx.state().course.policies.ta_assignment)?;
                    let mut rng = seeded_rng(tx.next_sequence());
                    let assigned = if peers.is_empty() {
                        Vec::new()
                    } else {
                        allocation::assign_ta_tasks(&peers, &staff, None, &[], policy.as_ref(), &mut rng)?
                    };
                    for t in assigned {
                        new_task(
                            tx,
                            TaskKind::Evaluation { review_id: t.task, origin: EvaluationOrigin::Appeal },
                            t.ta,
                            s.id,
                            Some(a.id),
                            None,
                        );
                    }
                    AppealOutcome::Upheld { grade: points, review_id }
                }
            };
            tx.emit(Event::AppealResolved { appeal_id, outcome, by: resolver, at: now });
            tx.emit(Event::Notified {
                notification: Notification {
                    recipient: appeal.appellant.clone(),
                    kind: NotificationKind::AppealResolved,
                    subject: appeal_id.0,
                    at: now,
                },
            });
            Ok(tx.state().appeals[&appeal_id].clone())
        })
    }

    pub fn reassign_appeal(&self, caller: &Caller, course: CourseId, appeal_id: crate::domain::AppealId, to: &UserId) -> Result<Appeal> {
        self.tx(caller, course, Operation::ReassignAppeal, |tx| {
            let state = tx.state();
            let appeal = state
                .appeals
                .get(&appeal_id)
                .ok_or_else(|| Error::not_found(format!("appeal {appeal_id}")))?;
            if !appeal.is_open() {
                return Err(Error::AlreadyResolved);
            }
            if !state.is_staff(to) {
                return Err(Error::invalid(format!("{to} is not on the course staff")));
            }
            tx.emit(Event::AppealAssigned { appeal_id, assignee: to.clone() });
            Ok(tx.state().appeals[&appeal_id].clone())
        })
    }

    // ---- flags ----

    pub fn flag_review(&self, caller: &Caller, course: CourseId, review_id: ReviewId, polarity: Polarity, reasoning: String) -> Result<Flag> {
        let user = caller.user_id()?.clone();
        self.tx(caller, course, Operation::FlagReview, |tx| {
            let state = tx.state();
            if !state.course.features.flagging {
                return Err(Error::invalid("flagging is disabled for this course"));
            }
            let review = state
                .reviews
                .get(&review_id)
                .ok_or_else(|| Error::not_found(format!("review {review_id}")))?;
            let s = state
                .submissions
                .get(&review.submission_id)
                .ok_or_else(|| Error::not_found(format!("review {review_id}")))?;
            if review.grader.user() == &user {
                return Err(Error::forbidden("you cannot flag your own review"));
            }
            if s.author != user {
                return Err(Error::forbidden("only the recipient of a review can flag it"));
            }
            if review.kind != ReviewKind::Peer || review.status != ReviewStatus::Submitted {
                return Err(Error::invalid("only submitted peer reviews can be flagged"));
            }
            let a = assignment(state, s.assignment_id)?;
            if tx.now() < a.student_review_deadline {
                return Err(Error::DeadlineNotPassed("reviews are not released yet".into()));
            }
            let duplicate = state
                .flags
                .values()
                .any(|f| f.review_id == review_id && f.reporter == user && f.is_open());
            if duplicate {
                return Err(Error::DuplicateFlag);
            }
            if reasoning.trim().is_empty() {
                return Err(Error::invalid("a flag needs a reason"));
            }
            let assignee = route_case(state, tx.next_sequence())?;
            let id = crate::domain::FlagId(tx.fresh_id());
            let flag = Flag {
                id,
                review_id,
                reporter: user.clone(),
                polarity,
                reasoning,
                status: CaseStatus::Open,
                assignee: None,
                verdict: None,
                resolved_by: None,
                filed_at: tx.now(),
                resolved_at: None,
            };
            tx.emit(Event::FlagFiled { flag });
            tx.emit(Event::FlagAssigned { flag_id: id, assignee });
            Ok(tx.state().flags[&id].clone())
        })
    }

    pub fn resolve_flag(&self, caller: &Caller, course: CourseId, flag_id: crate::domain::FlagId, verdict: Verdict) -> Result<Flag> {
        self.tx(caller, course, Operation::ResolveFlag, |tx| {
            let state = tx.state();
            let flag = state
                .flags
                .get(&flag_id)
                .cloned()
                .ok_or_else(|| Error::not_found(format!("flag {flag_id}")))?;
            Self::may_resolve(state, caller, flag.assignee.as_ref())?;
            if !flag.is_open() {
                return Err(Error::AlreadyResolved);
            }
            let review = state.reviews[&flag.review_id].clone();
            let reviewer = review.grader.user().clone();
            let now = tx.now();
            let by = UserId::new(caller.actor());
            tx.emit(Event::FlagResolved { flag_id, verdict, by, at: now });
            if verdict == Verdict::Upheld {
                match flag.polarity {
                    Polarity::Negative => {
                        tx.emit(Event::ReviewInvalidated { review_id: review.id });
                        tx.emit(Event::Notified {
                            notification: Notification {
                                recipient: reviewer.clone(),
                                kind: NotificationKind::ReviewInvalidated,
                                subject: review.id.0,
                                at: now,
                            },
                        });
                        let state = tx.state();
                        if let Some(e) = state.enrollment(&reviewer).filter(|e| e.role == Role::Student) {
                            let decision = apply_moderation_trigger(&reviewer, e.pool, ModerationTrigger::UpheldFlag);
                            if state.course.features.pools && decision.transition != Transition::None {
                                tx.emit(Event::PoolChanged { decision });
                            }
                        }
                    }
                    Polarity::Positive => {
                        tx.emit(Event::Commended { user_id: reviewer.clone(), flag_id });
                        tx.emit(Event::Notified {
                            notification: Notification {
                                recipient: reviewer.clone(),
                                kind: NotificationKind::Commendation,
                                subject: review.id.0,
                                at: now,
                            },
                        });
                    }
                }
            }
            tx.emit(Event::Notified {
                notification: Notification {
                    recipient: flag.reporter.clone(),
                    kind: NotificationKind::FlagResolved,
                    subject: flag_id.0,
                    at: now,
                },
            });
            Ok(tx.state().flags[&flag_id].clone())
        })
    }

    pub fn reassign_flag(&self, caller: &Caller, course: CourseId, flag_id: crate::domain::FlagId, to: &UserId) -> Result<Flag> {
        self.tx(caller, course, Operation::ReassignFlag, |tx| {
            let state = tx.state();
            let flag = state
                .flags
                .get(&flag_id)
                .ok_or_else(|| Error::not_found(format!("flag {flag_id}")))?;
            if !flag.is_open() {
                return Err(Error::AlreadyResolved);
            }
            if !state.is_staff(to) {
                return Err(Error::invalid(format!("{to} is not on the course staff")));
            }
            tx.emit(Event::FlagAssigned { flag_id, assignee: to.clone() });
            Ok(tx.state().flags[&flag_id].clone())
        })
    }

    // ---- grades ----

    pub fn final_grade(&self, course: CourseId, submission: SubmissionId) -> Result<FinalGrade> {
        self.store.read(course, |s| final_grade(s, &self.policies, submission))?
    }

    /// Records the assignment's final grades (and consensus rewards when
    /// enabled) in the log.
    pub fn finalize_grades(&self, caller: &Caller, course: CourseId, assignment_id: AssignmentId) -> Result<Vec<GradeRow>> {
        self.tx(caller, course, Operation::RunStep, |tx| {
            let state = tx.state();
            let a = assignment(state, assignment_id)?;
            if tx.now() < a.ta_review_deadline {
                return Err(Error::GradesNotFinal);
            }
            let policy = self.policies.aggregation.get(&state.course.policies.aggregation)?;
            let mut grades = Vec::new();
            let mut consensus = Vec::new();
            for s in state.submissions_for(assignment_id) {
                match final_grade(state, &self.policies, s.id) {
                    Ok(g) => grades.push(g),
                    Err(Error::Ungradable) => {}
                    Err(e) => return Err(e),
                }
                let peers = state.counted_peer_reviews(s.id);
                let totals: Vec<f64> = peers.iter().map(|r| r.points).collect();
                for r in &peers {
                    let reward = consensus_reward(r.points, &totals, policy.as_ref(), state.course.features.consensus_reward)?;
                    if let Some(value) = reward {
                        consensus.push(ConsensusScore { user_id: r.grader.user().clone(), review_id: r.id, value });
                    }
                }
            }
            let rows = grade_rows(state, &self.policies, assignment_id)?;
            let finalization = Finalization { at: tx.now(), grades, consensus };
            tx.emit(Event::GradesFinalized { assignment_id, finalization });
            Ok(rows)
        })
    }

    pub fn grade_report(&self, caller: &Caller, course: CourseId, assignment_id: AssignmentId) -> Result<Vec<GradeRow>> {
        self.view(caller, course, Operation::ExportGrades, |state, now| {
            let a = assignment(state, assignment_id)?;
            if now < a.ta_review_deadline {
                return Err(Error::GradesNotFinal);
            }
            grade_rows(state, &self.policies, assignment_id)
        })
    }

    pub fn export_grades_csv(&self, caller: &Caller, course: CourseId, assignment_id: AssignmentId) -> Result<String> {
        grade_rows_csv(&self.grade_report(caller, course, assignment_id)?)
    }

    pub fn run_step(&self, caller: &Caller, course: CourseId, assignment_id: AssignmentId, step: Step) -> Result<StepReport> {
        Ok(match step {
            Step::AllocateReviews(opts) => {
                StepReport::AllocateReviews(self.allocate_reviews(caller, course, assignment_id, &opts)?)
            }
            Step::SelectSpotChecks { n, seed } => {
                StepReport::SelectSpotChecks(self.select_spot_checks(caller, course, assignment_id, n, seed)?)
            }
            Step::FinalizeGrades => {
                StepReport::FinalizeGrades { rows: self.finalize_grades(caller, course, assignment_id)? }
            }
        })
    }

    // ---- data export ----

    pub fn export_course(&self, caller: &Caller, course: CourseId) -> Result<Vec<u8>> {
        self.view(caller, course, Operation::ExportCourse, |_, _| Ok(()))?;
        self.store.export_course(course)
    }

    /// Imports an exported course. Users may only import into a course
    /// they administer, which in practice means the operator.
    pub fn import_course(&self, caller: &Caller, archive: &[u8]) -> Result<CourseId> {
        if *caller != Caller::Operator {
            return Err(Error::forbidden("importing courses is an operator task"));
        }
        self.store.import_course(archive)
    }
}
