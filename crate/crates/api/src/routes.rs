//! Endpoint table. Paths follow the four tabs of the client: dashboard,
//! assignments, reviews and appeals, plus course setup and admin export.

use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Path, Query, Request, State};
use axum::http::header::{CONTENT_DISPOSITION, CONTENT_TYPE};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use mta_core::allocation::CalibrationMode;
use mta_core::authz::{Caller, Operation};
use mta_core::domain::{
    Answer, AppealId, AssignmentId, CourseConfig, CourseId, FlagId, Pool, ReviewId, Role, RubricId,
    RubricSpec, SubmissionId, TaskId, Timestamp, UserId,
};
use mta_core::engine::{AppealDecision, Engine, Step, SubmissionInput};
use mta_core::moderation::{Appeal, Flag, Polarity, Verdict};
use mta_core::policy::PolicySet;
use mta_core::state::{CourseState, EventRecord};
use mta_core::views::{self, Content, SubmissionView, TaskView};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::auth::{bearer, Auth};
use crate::error::{ApiError, ApiResult};
use crate::AppState;

pub fn routes() -> Router<AppState> {
    Router::new()
        .route("/auth/login", post(login))
        .route("/auth/logout", post(logout))
        .route("/me", get(me))
        .route("/enroll", post(enroll))
        .route("/courses", get(list_courses).post(create_course))
        .route("/courses/{cid}", get(get_course).put(update_course))
        .route("/courses/{cid}/members", post(add_member))
        .route("/courses/{cid}/members/{user}", put(set_role))
        .route("/courses/{cid}/dashboard", get(dashboard))
        .route("/courses/{cid}/students/{user}", get(student_history))
        .route("/courses/{cid}/events", get(events))
        .route("/courses/{cid}/rubrics", post(add_rubric))
        .route("/courses/{cid}/rubrics/{rid}", get(get_rubric))
        .route("/courses/{cid}/assignments", get(list_assignments).post(create_assignment))
        .route("/courses/{cid}/assignments/{aid}", get(get_assignment).put(update_assignment))
        .route("/courses/{cid}/assignments/{aid}/submissions", get(list_submissions).post(submit))
        .route("/courses/{cid}/assignments/{aid}/archive", post(ingest_zip))
        .route("/courses/{cid}/assignments/{aid}/steps", post(run_step))
        .route("/courses/{cid}/assignments/{aid}/grades", get(grades))
        .route("/courses/{cid}/assignments/{aid}/grades.csv", get(grades_csv))
        .route("/courses/{cid}/submissions/{sid}", get(get_submission))
        .route("/courses/{cid}/submissions/{sid}/file", get(submission_file))
        .route("/courses/{cid}/submissions/{sid}/appeals", post(file_appeal))
        .route("/courses/{cid}/reviews", get(list_tasks))
        .route("/courses/{cid}/tasks/{tid}", get(get_task))
        .route("/courses/{cid}/tasks/{tid}/file", get(task_file))
        .route("/courses/{cid}/tasks/{tid}/review", post(submit_review))
        .route("/courses/{cid}/reviews/{rid}/flags", post(flag_review))
        .route("/courses/{cid}/reviews/{rid}/evaluation", post(request_evaluation))
        .route("/courses/{cid}/appeals", get(appeals_tab))
        .route("/courses/{cid}/appeals/{id}/resolve", post(resolve_appeal))
        .route("/courses/{cid}/appeals/{id}/reassign", post(reassign_appeal))
        .route("/courses/{cid}/flags/{id}/resolve", post(resolve_flag))
        .route("/courses/{cid}/flags/{id}/reassign", post(reassign_flag))
        .route("/courses/{cid}/calibration", post(ingest_calibration))
        .route("/courses/{cid}/calibration/schedule", post(schedule_calibration))
        .route("/courses/{cid}/export", get(export_course))
        .route("/admin/import", post(import_course))
}

/// JSON body whose parse failures come back in the usual error shape.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|e| ApiError::BadRequest(e.body_text()))
    }
}

/// Runs engine work off the async executor; the store does blocking I/O.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> mta_core::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::from)
}

/// Authorized read that needs a personal identity.
fn user_view<R>(
    engine: &Engine,
    caller: &Caller,
    course: CourseId,
    op: Operation,
    f: impl FnOnce(&CourseState, &PolicySet, &UserId, Timestamp) -> mta_core::Result<R>,
) -> mta_core::Result<R> {
    let user = caller.user_id()?.clone();
    let policies = engine.policies();
    engine.view(caller, course, op, |state, now| f(state, policies, &user, now))
}

fn created<T: Serialize>(v: T) -> Response {
    (StatusCode::CREATED, Json(v)).into_response()
}

fn download(bytes: Vec<u8>, media_type: &str, filename: &str) -> Response {
    let disposition = format!("attachment; filename=\"{}\"", filename.replace('"', ""));
    (
        [(CONTENT_TYPE, media_type.to_string()), (CONTENT_DISPOSITION, disposition)],
        bytes,
    )
        .into_response()
}

// ---- auth ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Login {
    pub username: String,
    pub password: String,
}

async fn login(State(s): State<AppState>, Body(l): Body<Login>) -> ApiResult<Json<crate::Session>> {
    let user = s.credentials.verify(&l.username, &l.password).ok_or(ApiError::Unauthorized)?;
    Ok(Json(s.sessions.issue(user, s.engine.now())))
}

async fn logout(State(s): State<AppState>, req: Request) -> StatusCode {
    let (parts, _) = req.into_parts();
    if let Some(t) = bearer(&parts) {
        s.sessions.revoke(t);
    }
    StatusCode::NO_CONTENT
}

async fn me(Auth(c): Auth) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "actor": c.actor(), "operator": c == Caller::Operator }))
}

// ---- courses ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CourseMembership {
    pub course: mta_core::domain::Course,
    pub role: Option<Role>,
    pub admin: bool,
    pub pool: Option<Pool>,
}

async fn list_courses(State(s): State<AppState>, Auth(c): Auth) -> ApiResult<Json<Vec<CourseMembership>>> {
    let engine = s.engine.clone();
    blocking(move || {
        Ok(match &c {
            Caller::Operator => engine
                .store()
                .course_ids()
                .into_iter()
                .filter_map(|id| engine.read(id, |st| st.course.clone()).ok())
                .map(|course| CourseMembership { course, role: None, admin: true, pool: None })
                .collect(),
            Caller::User(u) => engine
                .courses_for(u)
                .into_iter()
                .map(|(mut course, e)| {
                    if !e.role.is_staff() {
                        course.enrollment_codes.clear();
                    }
                    let pool = e.student_pool().filter(|_| course.features.pools);
                    CourseMembership { course, role: Some(e.role), admin: e.admin, pool }
                })
                .collect(),
        })
    })
    .await
    .map(Json)
}

async fn create_course(State(s): State<AppState>, Auth(c): Auth, Body(cfg): Body<CourseConfig>) -> ApiResult<Response> {
    blocking(move || s.engine.create_course(&c, cfg)).await.map(created)
}

async fn get_course(State(s): State<AppState>, Auth(c): Auth, Path(cid): Path<u64>) -> ApiResult<Json<mta_core::domain::Course>> {
    blocking(move || match &c {
        Caller::Operator => s.engine.read(CourseId(cid), |st| st.course.clone()),
        Caller::User(_) => user_view(&s.engine, &c, CourseId(cid), Operation::ViewCourse, |st, _, u, _| views::course_for(st, u)),
    })
    .await
    .map(Json)
}

async fn update_course(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path(cid): Path<u64>,
    Body(cfg): Body<CourseConfig>,
) -> ApiResult<Json<mta_core::domain::Course>> {
    blocking(move || s.engine.update_course(&c, CourseId(cid), cfg)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct EnrollRequest {
    code: String,
}

async fn enroll(State(s): State<AppState>, Auth(c): Auth, Body(r): Body<EnrollRequest>) -> ApiResult<Response> {
    blocking(move || {
        let u = c.user_id()?.clone();
        s.engine.enroll(&u, &r.code)
    })
    .await
    .map(created)
}

#[derive(Debug, Deserialize)]
struct MemberRequest {
    user_id: UserId,
    role: Role,
    #[serde(default)]
    admin: bool,
}

#[derive(Debug, Deserialize)]
struct RoleRequest {
    role: Role,
    #[serde(default)]
    admin: bool,
}

async fn add_member(State(s): State<AppState>, Auth(c): Auth, Path(cid): Path<u64>, Body(r): Body<MemberRequest>) -> ApiResult<Response> {
    blocking(move || s.engine.add_member(&c, CourseId(cid), &r.user_id, r.role, r.admin)).await.map(created)
}

async fn set_role(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, user)): Path<(u64, String)>,
    Body(r): Body<RoleRequest>,
) -> ApiResult<Json<mta_core::domain::Enrollment>> {
    blocking(move || s.engine.set_role(&c, CourseId(cid), &UserId::new(user), r.role, r.admin)).await.map(Json)
}

async fn dashboard(State(s): State<AppState>, Auth(c): Auth, Path(cid): Path<u64>) -> ApiResult<Json<views::Dashboard>> {
    blocking(move || user_view(&s.engine, &c, CourseId(cid), Operation::ViewDashboard, |st, p, u, now| views::dashboard(st, p, u, now)))
        .await
        .map(Json)
}

async fn student_history(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, user)): Path<(u64, String)>,
) -> ApiResult<Json<views::StudentHistory>> {
    blocking(move || {
        s.engine.view(&c, CourseId(cid), Operation::ViewStudentHistory, |st, _| {
            views::student_history(st, &UserId::new(user))
        })
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    after: u64,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    500
}

/// Staff event feed, for clients that follow a course incrementally.
async fn events(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path(cid): Path<u64>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Json<Vec<EventRecord>>> {
    blocking(move || {
        let course = CourseId(cid);
        s.engine.view(&c, course, Operation::ViewEvents, |_, _| Ok(()))?;
        s.engine.store().read_log(course, |log| {
            log.iter().filter(|r| r.sequence > q.after).take(q.limit.min(5000)).cloned().collect()
        })
    })
    .await
    .map(Json)
}

// ---- rubrics and assignments ----

async fn add_rubric(State(s): State<AppState>, Auth(c): Auth, Path(cid): Path<u64>, Body(spec): Body<RubricSpec>) -> ApiResult<Response> {
    blocking(move || s.engine.add_rubric(&c, CourseId(cid), spec)).await.map(created)
}

async fn get_rubric(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, rid)): Path<(u64, u64)>,
) -> ApiResult<Json<mta_core::domain::Rubric>> {
    blocking(move || {
        s.engine.view(&c, CourseId(cid), Operation::ViewRubric, |st, _| {
            st.rubrics.get(&RubricId(rid)).cloned().ok_or_else(|| mta_core::Error::not_found(format!("rubric {rid}")))
        })
    })
    .await
    .map(Json)
}

fn visible_assignments(engine: &Engine, c: &Caller, course: CourseId) -> mta_core::Result<Vec<mta_core::workflow::Assignment>> {
    match c {
        Caller::Operator => engine.read(course, |st| st.assignments.values().cloned().collect()),
        Caller::User(_) => user_view(engine, c, course, Operation::ListAssignments, |st, _, u, now| {
            Ok(views::assignments_for(st, u, now))
        }),
    }
}

async fn list_assignments(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path(cid): Path<u64>,
) -> ApiResult<Json<Vec<mta_core::workflow::Assignment>>> {
    blocking(move || visible_assignments(&s.engine, &c, CourseId(cid))).await.map(Json)
}

async fn get_assignment(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, aid)): Path<(u64, u64)>,
) -> ApiResult<Json<mta_core::workflow::Assignment>> {
    blocking(move || {
        visible_assignments(&s.engine, &c, CourseId(cid))?
            .into_iter()
            .find(|a| a.id == AssignmentId(aid))
            .ok_or_else(|| mta_core::Error::not_found(format!("assignment {aid}")))
    })
    .await
    .map(Json)
}

async fn create_assignment(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path(cid): Path<u64>,
    Body(spec): Body<mta_core::workflow::AssignmentSpec>,
) -> ApiResult<Response> {
    blocking(move || s.engine.create_assignment(&c, CourseId(cid), spec)).await.map(created)
}

async fn update_assignment(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, aid)): Path<(u64, u64)>,
    Body(spec): Body<mta_core::workflow::AssignmentSpec>,
) -> ApiResult<Json<mta_core::workflow::Assignment>> {
    blocking(move || s.engine.update_assignment(&c, CourseId(cid), AssignmentId(aid), spec)).await.map(Json)
}

// ---- submissions ----

/// Reads a submission from either a JSON body or a multipart form with a
/// `file` part (uploads) or a `body` part (text).
async fn submission_input(req: Request) -> ApiResult<SubmissionInput> {
    let multipart = req
        .headers()
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !multipart {
        let Body(input) = Body::<SubmissionInput>::from_request(req, &()).await?;
        return Ok(input);
    }
    let mut form = Multipart::from_request(req, &())
        .await
        .map_err(|e| ApiError::BadRequest(e.body_text()))?;
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::BadRequest(e.body_text()))? {
        match field.name() {
            Some("file") => {
                let filename = field.file_name().unwrap_or("upload").to_string();
                let bytes = field.bytes().await.map_err(|e| ApiError::BadRequest(e.body_text()))?;
                return Ok(SubmissionInput::File { filename, bytes: bytes.to_vec() });
            }
            Some("body") => {
                let body = field.text().await.map_err(|e| ApiError::BadRequest(e.body_text()))?;
                return Ok(SubmissionInput::Text { body });
            }
            _ => {}
        }
    }
    Err(ApiError::BadRequest("multipart form needs a `file` or `body` part".into()))
}

async fn submit(State(s): State<AppState>, Auth(c): Auth, Path((cid, aid)): Path<(u64, u64)>, req: Request) -> ApiResult<Response> {
    let input = submission_input(req).await?;
    blocking(move || s.engine.submit(&c, CourseId(cid), AssignmentId(aid), input)).await.map(created)
}

async fn list_submissions(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, aid)): Path<(u64, u64)>,
) -> ApiResult<Json<Vec<mta_core::workflow::Submission>>> {
    blocking(move || {
        s.engine.view(&c, CourseId(cid), Operation::ListSubmissions, |st, _| {
            Ok(st.submissions_for(AssignmentId(aid)).cloned().collect())
        })
    })
    .await
    .map(Json)
}

async fn ingest_zip(State(s): State<AppState>, Auth(c): Auth, Path((cid, aid)): Path<(u64, u64)>, bytes: Bytes) -> ApiResult<Json<mta_core::workflow::BatchResult>> {
    blocking(move || s.engine.ingest_zip(&c, CourseId(cid), AssignmentId(aid), &bytes)).await.map(Json)
}

async fn get_submission(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, sid)): Path<(u64, u64)>,
) -> ApiResult<Json<SubmissionView>> {
    blocking(move || {
        user_view(&s.engine, &c, CourseId(cid), Operation::ViewSubmission, |st, p, u, now| {
            views::submission_view(st, p, u, SubmissionId(sid), now)
        })
    })
    .await
    .map(Json)
}

fn file_response(engine: &Engine, payload: &mta_core::workflow::Payload) -> mta_core::Result<Response> {
    match payload {
        mta_core::workflow::Payload::File { blob, filename, media_type } => {
            let bytes = engine.store().blobs().get(blob)?;
            Ok(download(bytes.to_vec(), media_type, filename))
        }
        _ => Err(mta_core::Error::not_found("file for a non-upload submission")),
    }
}

async fn submission_file(State(s): State<AppState>, Auth(c): Auth, Path((cid, sid)): Path<(u64, u64)>) -> ApiResult<Response> {
    blocking(move || {
        let view = user_view(&s.engine, &c, CourseId(cid), Operation::ViewSubmission, |st, p, u, now| {
            views::submission_view(st, p, u, SubmissionId(sid), now)
        })?;
        let submission = match &view {
            SubmissionView::Own(o) => &o.submission,
            SubmissionView::Staff { submission, .. } => submission,
        };
        file_response(&s.engine, &submission.payload)
    })
    .await
}

#[derive(Debug, Deserialize)]
struct AppealRequest {
    argument: String,
}

async fn file_appeal(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, sid)): Path<(u64, u64)>,
    Body(r): Body<AppealRequest>,
) -> ApiResult<Response> {
    blocking(move || s.engine.file_appeal(&c, CourseId(cid), SubmissionId(sid), r.argument)).await.map(created)
}

// ---- reviews ----

/// Every task assigned to the caller, newest last.
async fn list_tasks(State(s): State<AppState>, Auth(c): Auth, Path(cid): Path<u64>) -> ApiResult<Json<Vec<TaskView>>> {
    blocking(move || {
        user_view(&s.engine, &c, CourseId(cid), Operation::ListReviews, |st, _, u, _| {
            Ok(st
                .tasks
                .values()
                .filter(|t| &t.assignee == u)
                .filter_map(|t| views::task_view(st, u, t.id).ok())
                .collect())
        })
    })
    .await
    .map(Json)
}

async fn get_task(State(s): State<AppState>, Auth(c): Auth, Path((cid, tid)): Path<(u64, u64)>) -> ApiResult<Json<TaskView>> {
    blocking(move || {
        user_view(&s.engine, &c, CourseId(cid), Operation::ListReviews, |st, _, u, _| views::task_view(st, u, TaskId(tid)))
    })
    .await
    .map(Json)
}

async fn task_file(State(s): State<AppState>, Auth(c): Auth, Path((cid, tid)): Path<(u64, u64)>) -> ApiResult<Response> {
    blocking(move || {
        let view = user_view(&s.engine, &c, CourseId(cid), Operation::ListReviews, |st, _, u, _| views::task_view(st, u, TaskId(tid)))?;
        let content = match view {
            TaskView::Student(t) => t.content,
            TaskView::Staff(t) => t.content,
        };
        match content {
            Content::File { blob, filename, media_type } => {
                let bytes = s.engine.store().blobs().get(&blob)?;
                Ok(download(bytes.to_vec(), &media_type, &filename))
            }
            _ => Err(mta_core::Error::not_found("file for a non-upload task")),
        }
    })
    .await
}

#[derive(Debug, Deserialize)]
struct ReviewRequest {
    answers: Vec<Answer>,
}

async fn submit_review(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, tid)): Path<(u64, u64)>,
    Body(r): Body<ReviewRequest>,
) -> ApiResult<Json<mta_core::engine::ReviewReceipt>> {
    blocking(move || s.engine.submit_review(&c, CourseId(cid), TaskId(tid), r.answers)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct FlagRequest {
    polarity: Polarity,
    reasoning: String,
}

async fn flag_review(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, rid)): Path<(u64, u64)>,
    Body(r): Body<FlagRequest>,
) -> ApiResult<Response> {
    blocking(move || s.engine.flag_review(&c, CourseId(cid), ReviewId(rid), r.polarity, r.reasoning)).await.map(created)
}

async fn request_evaluation(State(s): State<AppState>, Auth(c): Auth, Path((cid, rid)): Path<(u64, u64)>) -> ApiResult<Response> {
    blocking(move || s.engine.request_evaluation(&c, CourseId(cid), ReviewId(rid))).await.map(created)
}

// ---- appeals and flags ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppealsTab {
    pub appeals: Vec<Appeal>,
    pub flags: Vec<Flag>,
}

/// Students see their own cases; staff see every case in the course.
async fn appeals_tab(State(s): State<AppState>, Auth(c): Auth, Path(cid): Path<u64>) -> ApiResult<Json<AppealsTab>> {
    blocking(move || {
        user_view(&s.engine, &c, CourseId(cid), Operation::ListAppeals, |st, _, u, _| {
            let staff = st.is_staff(u);
            Ok(AppealsTab {
                appeals: st.appeals.values().filter(|a| staff || &a.appellant == u).cloned().collect(),
                flags: st.flags.values().filter(|f| staff || &f.reporter == u).cloned().collect(),
            })
        })
    })
    .await
    .map(Json)
}

async fn resolve_appeal(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, id)): Path<(u64, u64)>,
    Body(d): Body<AppealDecision>,
) -> ApiResult<Json<Appeal>> {
    blocking(move || s.engine.resolve_appeal(&c, CourseId(cid), AppealId(id), d)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct ReassignRequest {
    to: UserId,
}

async fn reassign_appeal(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, id)): Path<(u64, u64)>,
    Body(r): Body<ReassignRequest>,
) -> ApiResult<Json<Appeal>> {
    blocking(move || s.engine.reassign_appeal(&c, CourseId(cid), AppealId(id), &r.to)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct VerdictRequest {
    verdict: Verdict,
}

async fn resolve_flag(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, id)): Path<(u64, u64)>,
    Body(r): Body<VerdictRequest>,
) -> ApiResult<Json<Flag>> {
    blocking(move || s.engine.resolve_flag(&c, CourseId(cid), FlagId(id), r.verdict)).await.map(Json)
}

async fn reassign_flag(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, id)): Path<(u64, u64)>,
    Body(r): Body<ReassignRequest>,
) -> ApiResult<Json<Flag>> {
    blocking(move || s.engine.reassign_flag(&c, CourseId(cid), FlagId(id), &r.to)).await.map(Json)
}

// ---- batch steps and grades ----

async fn run_step(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, aid)): Path<(u64, u64)>,
    Body(step): Body<Step>,
) -> ApiResult<Json<mta_core::engine::StepReport>> {
    blocking(move || s.engine.run_step(&c, CourseId(cid), AssignmentId(aid), step)).await.map(Json)
}

async fn grades(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path((cid, aid)): Path<(u64, u64)>,
) -> ApiResult<Json<Vec<mta_core::engine::GradeRow>>> {
    blocking(move || s.engine.grade_report(&c, CourseId(cid), AssignmentId(aid))).await.map(Json)
}

async fn grades_csv(State(s): State<AppState>, Auth(c): Auth, Path((cid, aid)): Path<(u64, u64)>) -> ApiResult<Response> {
    blocking(move || s.engine.export_grades_csv(&c, CourseId(cid), AssignmentId(aid)))
        .await
        .map(|csv| download(csv.into_bytes(), "text/csv", &format!("grades-{aid}.csv")))
}

// ---- calibration ----

#[derive(Debug, Deserialize)]
struct CalibrationQuery {
    rubric_id: u64,
}

/// Body is a zip of essays plus `truth.csv`.
async fn ingest_calibration(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path(cid): Path<u64>,
    Query(q): Query<CalibrationQuery>,
    bytes: Bytes,
) -> ApiResult<Json<mta_core::engine::CalibrationIngestReport>> {
    blocking(move || s.engine.ingest_calibration(&c, CourseId(cid), RubricId(q.rubric_id), &bytes)).await.map(Json)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleRequest {
    /// Everyone enrolled as a student when absent.
    #[serde(default)]
    pub students: Option<Vec<UserId>>,
    pub count: usize,
    pub mode: CalibrationMode,
    #[serde(default)]
    pub assignment_id: Option<AssignmentId>,
    #[serde(default)]
    pub seed: u64,
}

async fn schedule_calibration(
    State(s): State<AppState>,
    Auth(c): Auth,
    Path(cid): Path<u64>,
    Body(r): Body<ScheduleRequest>,
) -> ApiResult<Json<BTreeMap<UserId, mta_core::engine::CalibrationScheduleReport>>> {
    blocking(move || s.engine.schedule_calibration(&c, CourseId(cid), r.students, r.count, r.mode, r.assignment_id, r.seed))
        .await
        .map(Json)
}

// ---- admin ----

async fn export_course(State(s): State<AppState>, Auth(c): Auth, Path(cid): Path<u64>) -> ApiResult<Response> {
    blocking(move || s.engine.export_course(&c, CourseId(cid)))
        .await
        .map(|zip| download(zip, "application/zip", &format!("course-{cid}.zip")))
}

async fn import_course(State(s): State<AppState>, Auth(c): Auth, bytes: Bytes) -> ApiResult<Response> {
    blocking(move || s.engine.import_course(&c, &bytes))
        .await
        .map(|id| created(serde_json::json!({ "course_id": id })))
}
