//! What each role gets to see. Students never see who wrote a submission
//! they review or who reviewed theirs, see received reviews only after the
//! student review deadline, and see grades only after the TA deadline.

use serde::{Deserialize, Serialize};

use crate::allocation::CalibrationMode;
use crate::domain::{
    Answer, AssignmentId, Course, Pool, ReviewId, ReviewKind, ReviewStatus, Role, RubricId, SubmissionId,
    TaskId, Timestamp, UserId,
};
use crate::engine::{final_grade, grade_rows, GradeRow};
use crate::error::{Error, Result};
use crate::moderation::{Appeal, Flag, Notification};
use crate::policy::PolicySet;
use crate::pool::PoolDecision;
use crate::state::{CourseState, Task, TaskKind};
use crate::workflow::{Assignment, AssignmentKind, Payload, Submission};

/// Submission content with anything identifying the author removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Content {
    Text { body: String },
    File { blob: String, filename: String, media_type: String },
    Quiz { answers: Vec<usize> },
}

impl Content {
    fn anonymous(payload: &Payload) -> Self {
        match payload {
            Payload::Text { body } => Content::Text { body: body.clone() },
            Payload::File { blob, filename, media_type } => {
                let ext = filename.rsplit_once('.').map(|(_, e)| e).unwrap_or("bin");
                Content::File {
                    blob: blob.clone(),
                    filename: format!("submission.{ext}"),
                    media_type: media_type.clone(),
                }
            }
            Payload::Quiz { answers } => Content::Quiz { answers: answers.clone() },
        }
    }
}

/// A review task as a student sees it. Peer and calibration tasks share
/// this shape; in mixed mode both carry the label "review".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTask {
    pub task_id: TaskId,
    pub label: String,
    pub assignment_id: Option<AssignmentId>,
    pub rubric_id: RubricId,
    pub content: Content,
    pub due_at: Option<Timestamp>,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaffTask {
    pub task: Task,
    pub rubric_id: RubricId,
    pub author: Option<UserId>,
    pub content: Content,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "view", rename_all = "snake_case")]
pub enum TaskView {
    Student(StudentTask),
    Staff(StaffTask),
}

/// A review received on one's own work. No grader identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceivedReview {
    pub review_id: ReviewId,
    pub from_staff: bool,
    pub answers: Vec<Answer>,
    pub points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeView {
    pub value: Option<f64>,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnSubmission {
    pub submission: Submission,
    /// Empty until the student review deadline has passed.
    pub reviews: Vec<ReceivedReview>,
    /// `None` until the TA review deadline has passed.
    pub grade: Option<GradeView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentDashboard {
    pub course: String,
    /// Only shown when the course uses pools.
    pub pool: Option<Pool>,
    pub late_days_used: u32,
    pub late_day_budget: u32,
    pub pending: Vec<StudentTask>,
    pub submissions: Vec<OwnSubmission>,
    pub notifications: Vec<Notification>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaffDashboard {
    pub course: String,
    pub pending: Vec<StaffTask>,
    pub open_appeals: Vec<Appeal>,
    pub open_flags: Vec<Flag>,
    pub students: usize,
    pub supervised: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "view", rename_all = "snake_case")]
pub enum Dashboard {
    Student(StudentDashboard),
    Staff(StaffDashboard),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrittenReview {
    pub review_id: ReviewId,
    pub submission_id: SubmissionId,
    pub kind: ReviewKind,
    pub status: ReviewStatus,
    pub points: f64,
    pub evaluation_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentHistory {
    pub user_id: UserId,
    pub pool: Pool,
    pub window: Vec<f64>,
    pub pool_changes: Vec<PoolDecision>,
    pub submissions: Vec<Submission>,
    pub reviews_written: Vec<WrittenReview>,
    pub commendations: usize,
}

fn rubric_of_task(state: &CourseState, task: &Task) -> Option<RubricId> {
    match &task.kind {
        TaskKind::Calibration { .. } => state.calibration.get(&task.submission_id).map(|c| c.rubric_id),
        TaskKind::Evaluation { .. } => Some(state.evaluation_rubric),
        _ => task
            .assignment_id
            .and_then(|a| state.assignments.get(&a))
            .and_then(|a| a.rubric_id),
    }
}

fn content_of_task(state: &CourseState, task: &Task) -> Option<Content> {
    match &task.kind {
        TaskKind::Calibration { .. } => state.calibration.get(&task.submission_id).map(|c| Content::anonymous(&c.payload)),
        _ => state.submissions.get(&task.submission_id).map(|s| Content::anonymous(&s.payload)),
    }
}

pub fn student_task(state: &CourseState, task: &Task) -> Option<StudentTask> {
    let label = match &task.kind {
        TaskKind::PeerReview | TaskKind::Calibration { mode: CalibrationMode::Mixed } => "review",
        TaskKind::Calibration { mode: CalibrationMode::Separate } => "calibration",
        _ => return None,
    };
    Some(StudentTask {
        task_id: task.id,
        label: label.into(),
        assignment_id: task.assignment_id,
        rubric_id: rubric_of_task(state, task)?,
        content: content_of_task(state, task)?,
        due_at: task.due_at,
        completed: !task.is_open(),
    })
}

pub fn staff_task(state: &CourseState, task: &Task) -> Option<StaffTask> {
    Some(StaffTask {
        task: task.clone(),
        rubric_id: rubric_of_task(state, task)?,
        author: state.submissions.get(&task.submission_id).map(|s| s.author.clone()),
        content: content_of_task(state, task)?,
    })
}

/// The task as `viewer` may see it.
pub fn task_view(state: &CourseState, viewer: &UserId, task_id: TaskId) -> Result<TaskView> {
    let task = state
        .tasks
        .get(&task_id)
        .ok_or_else(|| Error::not_found(format!("task {task_id}")))?;
    if state.is_staff(viewer) {
        return staff_task(state, task)
            .map(TaskView::Staff)
            .ok_or_else(|| Error::not_found(format!("task {task_id}")));
    }
    if &task.assignee != viewer {
        return Err(Error::not_found(format!("task {task_id}")));
    }
    student_task(state, task)
        .map(TaskView::Student)
        .ok_or_else(|| Error::not_found(format!("task {task_id}")))
}

pub fn own_submission(state: &CourseState, policies: &PolicySet, s: &Submission, now: Timestamp) -> OwnSubmission {
    let assignment = state.assignments.get(&s.assignment_id);
    let reviews_open = assignment.is_some_and(|a| now >= a.student_review_deadline);
    let grades_open = assignment.is_some_and(|a| now >= a.ta_review_deadline);
    let reviews = if reviews_open {
        state
            .reviews_of(s.id)
            .filter(|r| r.counts_for_grading() && r.kind != ReviewKind::Calibration)
            .map(|r| ReceivedReview {
                review_id: r.id,
                from_staff: r.kind == ReviewKind::Ta,
                answers: r.answers.clone(),
                points: r.points,
            })
            .collect()
    } else {
        Vec::new()
    };
    let grade = if grades_open || s.quiz_grade.is_some() {
        Some(match final_grade(state, policies, s.id) {
            Ok(g) => GradeView { value: Some(g.value), provenance: g.provenance.label().into() },
            Err(_) => GradeView { value: None, provenance: crate::engine::UNGRADED.into() },
        })
    } else {
        None
    };
    OwnSubmission { submission: s.clone(), reviews, grade }
}

pub fn dashboard(state: &CourseState, policies: &PolicySet, viewer: &UserId, now: Timestamp) -> Result<Dashboard> {
    let e = state
        .enrollment(viewer)
        .ok_or_else(|| Error::forbidden("not enrolled"))?;
    if e.role.is_staff() {
        let pending = state
            .open_tasks_for(viewer)
            .filter_map(|t| staff_task(state, t))
            .collect();
        let mine = |a: &Option<UserId>| e.role == Role::Instructor || a.as_ref() == Some(viewer);
        return Ok(Dashboard::Staff(StaffDashboard {
            course: state.course.name.clone(),
            pending,
            open_appeals: state.appeals.values().filter(|a| a.is_open() && mine(&a.assignee)).cloned().collect(),
            open_flags: state.flags.values().filter(|f| f.is_open() && mine(&f.assignee)).cloned().collect(),
            students: state.students().count(),
            supervised: state.students().filter(|s| s.pool == Pool::Supervised).count(),
        }));
    }
    let pending = state
        .open_tasks_for(viewer)
        .filter_map(|t| student_task(state, t))
        .collect();
    let submissions = state
        .submissions
        .values()
        .filter(|s| &s.author == viewer)
        .map(|s| own_submission(state, policies, s, now))
        .collect();
    Ok(Dashboard::Student(StudentDashboard {
        course: state.course.name.clone(),
        pool: state.course.features.pools.then_some(e.pool),
        late_days_used: e.late_days_used,
        late_day_budget: state.course.late_day_budget,
        pending,
        submissions,
        notifications: state.notifications_for(viewer).cloned().collect(),
    }))
}

pub fn student_history(state: &CourseState, user: &UserId) -> Result<StudentHistory> {
    let e = state
        .enrollment(user)
        .filter(|e| e.role == Role::Student)
        .ok_or_else(|| Error::not_found(format!("student {user}")))?;
    let window = state.windows.get(user).map(|w| w.recent(usize::MAX)).unwrap_or_default();
    let reviews_written = state
        .reviews
        .values()
        .filter(|r| r.grader.user() == user)
        .map(|r| WrittenReview {
            review_id: r.id,
            submission_id: r.submission_id,
            kind: r.kind,
            status: r.status,
            points: r.points,
            evaluation_scores: state
                .evaluations
                .values()
                .filter(|ev| ev.review_id == r.id)
                .map(|ev| ev.score)
                .collect(),
        })
        .collect();
    Ok(StudentHistory {
        user_id: user.clone(),
        pool: e.pool,
        window,
        pool_changes: state.pool_history.get(user).cloned().unwrap_or_default(),
        submissions: state.submissions.values().filter(|s| &s.author == user).cloned().collect(),
        reviews_written,
        commendations: state.commendations.iter().filter(|(u, _)| u == user).count(),
    })
}

/// Assignments a viewer may see. Students see released, visible ones,
/// without quiz answer keys.
pub fn assignments_for(state: &CourseState, viewer: &UserId, now: Timestamp) -> Vec<Assignment> {
    let staff = state.is_staff(viewer);
    state
        .assignments
        .values()
        .filter(|a| staff || (a.visible && now >= a.release_at))
        .map(|a| if staff { a.clone() } else { without_key(a) })
        .collect()
}

fn without_key(a: &Assignment) -> Assignment {
    let mut a = a.clone();
    if let AssignmentKind::Quiz(q) = &mut a.kind {
        q.correct_choices.clear();
    }
    a
}

/// Course settings as `viewer` may see them. Enrollment codes are for
/// staff only, since a leaked TA code grants staff access.
pub fn course_for(state: &CourseState, viewer: &UserId) -> Result<Course> {
    let e = state.enrollment(viewer).ok_or_else(|| Error::forbidden("not enrolled"))?;
    let mut course = state.course.clone();
    if !e.role.is_staff() {
        course.enrollment_codes.clear();
    }
    Ok(course)
}

/// Submission detail. Staff see everything; the author sees their own
/// submission through the usual deadline gates; other students are refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "view", rename_all = "snake_case")]
pub enum SubmissionView {
    Own(OwnSubmission),
    Staff {
        submission: Submission,
        reviews: Vec<crate::domain::Review>,
        grade: Option<GradeView>,
    },
}

pub fn submission_view(
    state: &CourseState,
    policies: &PolicySet,
    viewer: &UserId,
    id: SubmissionId,
    now: Timestamp,
) -> Result<SubmissionView> {
    let s = state
        .submissions
        .get(&id)
        .ok_or_else(|| Error::not_found(format!("submission {id}")))?;
    if state.is_staff(viewer) {
        let grade = match final_grade(state, policies, id) {
            Ok(g) => Some(GradeView { value: Some(g.value), provenance: g.provenance.label().into() }),
            Err(_) => None,
        };
        return Ok(SubmissionView::Staff {
            submission: s.clone(),
            reviews: state.reviews_of(id).cloned().collect(),
            grade,
        });
    }
    if &s.author != viewer {
        return Err(Error::forbidden("students see only their own submissions"));
    }
    Ok(SubmissionView::Own(own_submission(state, policies, s, now)))
}

/// Grade rows, visible to staff once the TA deadline has passed.
pub fn grades(state: &CourseState, policies: &PolicySet, assignment: AssignmentId, now: Timestamp) -> Result<Vec<GradeRow>> {
    let a = state
        .assignments
        .get(&assignment)
        .ok_or_else(|| Error::not_found(format!("assignment {assignment}")))?;
    if now < a.ta_review_deadline {
        return Err(Error::GradesNotFinal);
    }
    grade_rows(state, policies, assignment)
}
