//! Role-capability matrix. Every operation declares the minimum access it
//! needs; object-level rules (authorship, assignment to a case) are checked
//! by the operation itself.

use serde::{Deserialize, Serialize};

use crate::domain::{Enrollment, Role, UserId};
use crate::error::{Error, Result};

/// Who is calling. The operator is the local command-line user and holds
/// every capability that does not require a personal identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Caller {
    User(UserId),
    Operator,
}

impl Caller {
    pub fn user(name: impl Into<String>) -> Self {
        Caller::User(UserId::new(name))
    }

    pub fn actor(&self) -> &str {
        match self {
            Caller::User(u) => u.as_str(),
            Caller::Operator => "operator",
        }
    }

    pub fn user_id(&self) -> Result<&UserId> {
        match self {
            Caller::User(u) => Ok(u),
            Caller::Operator => Err(Error::forbidden("this operation needs a user identity")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    /// Any authenticated user, enrolled or not.
    Authenticated,
    /// Any role in the course.
    Enrolled,
    Student,
    /// TA or instructor.
    Staff,
    Instructor,
    /// Instructor or TA carrying the administrator flag.
    Admin,
    /// Command-line operator only.
    Operator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    ListCourses,
    CreateCourse,
    Enroll,
    ViewCourse,
    UpdateCourse,
    AddMember,
    SetRole,
    ViewDashboard,
    ViewStudentHistory,
    ListAssignments,
    CreateAssignment,
    UpdateAssignment,
    AddRubric,
    ViewRubric,
    Submit,
    ViewSubmission,
    ListSubmissions,
    IngestZip,
    IngestCalibration,
    ScheduleCalibration,
    ListReviews,
    SubmitReview,
    FlagReview,
    RequestEvaluation,
    FileAppeal,
    ListAppeals,
    ResolveAppeal,
    ReassignAppeal,
    ListFlags,
    ResolveFlag,
    ReassignFlag,
    RunStep,
    ExportGrades,
    ViewEvents,
    ExportCourse,
    ImportCourse,
}

impl Operation {
    pub const ALL: [Operation; 36] = [
        Operation::ListCourses,
        Operation::CreateCourse,
        Operation::Enroll,
        Operation::ViewCourse,
        Operation::UpdateCourse,
        Operation::AddMember,
        Operation::SetRole,
        Operation::ViewDashboard,
        Operation::ViewStudentHistory,
        Operation::ListAssignments,
        Operation::CreateAssignment,
        Operation::UpdateAssignment,
        Operation::AddRubric,
        Operation::ViewRubric,
        Operation::Submit,
        Operation::ViewSubmission,
        Operation::ListSubmissions,
        Operation::IngestZip,
        Operation::IngestCalibration,
        Operation::ScheduleCalibration,
        Operation::ListReviews,
        Operation::SubmitReview,
        Operation::FlagReview,
        Operation::RequestEvaluation,
        Operation::FileAppeal,
        Operation::ListAppeals,
        Operation::ResolveAppeal,
        Operation::ReassignAppeal,
        Operation::ListFlags,
        Operation::ResolveFlag,
        Operation::ReassignFlag,
        Operation::RunStep,
        Operation::ExportGrades,
        Operation::ViewEvents,
        Operation::ExportCourse,
        Operation::ImportCourse,
    ];

    pub fn access(self) -> Access {
        use Operation::*;
        match self {
            ListCourses | CreateCourse | Enroll | ImportCourse => Access::Authenticated,
            ViewCourse | ViewDashboard | ListAssignments | ViewRubric | ViewSubmission
            | ListReviews | SubmitReview | ListAppeals => Access::Enrolled,
            Submit | FlagReview | FileAppeal => Access::Student,
            ViewStudentHistory | ListSubmissions | IngestZip | ScheduleCalibration
            | RequestEvaluation | ResolveAppeal | ReassignAppeal | ListFlags | ResolveFlag
            | ReassignFlag | RunStep | ExportGrades | IngestCalibration | ViewEvents => Access::Staff,
            UpdateCourse | CreateAssignment | UpdateAssignment | AddRubric => Access::Instructor,
            ExportCourse => Access::Admin,
            AddMember | SetRole => Access::Operator,
        }
    }
}

/// Whether a user with `enrollment` (None when not enrolled) has `access`.
pub fn permits(access: Access, enrollment: Option<&Enrollment>) -> bool {
    match access {
        Access::Authenticated => true,
        Access::Operator => false,
        _ => {
            let Some(e) = enrollment else { return false };
            match access {
                Access::Enrolled => true,
                Access::Student => e.role == Role::Student,
                Access::Staff => e.role.is_staff(),
                Access::Instructor => e.role == Role::Instructor,
                Access::Admin => e.role.is_staff() && e.admin,
                Access::Authenticated | Access::Operator => unreachable!(),
            }
        }
    }
}

/// Checks `caller` may perform `op` in a course where they hold `enrollment`.
/// The operator may do anything that does not need a personal identity.
pub fn authorize(caller: &Caller, op: Operation, enrollment: Option<&Enrollment>) -> Result<()> {
    let access = op.access();
    let ok = match caller {
        Caller::Operator => !matches!(
            op,
            Operation::Submit | Operation::FlagReview | Operation::FileAppeal | Operation::SubmitReview
        ),
        Caller::User(_) => permits(access, enrollment),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::forbidden(format!("{op:?} requires {access:?} access")))
    }
}
