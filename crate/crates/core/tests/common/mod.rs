#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::TimeDelta;
use mta_core::allocation::CalibrationMode;
use mta_core::authz::Caller;
use mta_core::clock::{Clock, ManualClock};
use mta_core::domain::{
    Answer, AssignmentId, CourseConfig, CourseId, Pool, Role, RubricId, SubmissionId, TaskId,
    Timestamp, UserId,
};
use mta_core::engine::{AllocationOptions, Engine, SubmissionInput};
use mta_core::rubric::CalibrationGroundTruth;
use mta_core::sim::{choice_rubric, term_start, weekly_assignment};
use mta_core::state::{CourseState, Task, TaskKind};
use mta_core::store::Store;
use mta_core::workflow::Assignment;

pub struct Fixture {
    pub engine: Engine,
    pub clock: Arc<ManualClock>,
    pub course: CourseId,
    /// One question worth 0..=10, so a review's choice is its grade.
    pub rubric: RubricId,
    pub prof: Caller,
    calibration_counter: std::cell::Cell<usize>,
}

pub fn user(name: &str) -> Caller {
    Caller::user(name)
}

pub fn uid(name: &str) -> UserId {
    UserId::new(name)
}

impl Fixture {
    pub fn new(students: &[&str], tas: &[&str]) -> Self {
        Self::with_config(students, tas, |_| {})
    }

    pub fn with_config(students: &[&str], tas: &[&str], tweak: impl FnOnce(&mut CourseConfig)) -> Self {
        Self::in_store(Store::in_memory(), students, tas, tweak)
    }

    pub fn in_store(store: Store, students: &[&str], tas: &[&str], tweak: impl FnOnce(&mut CourseConfig)) -> Self {
        let clock = Arc::new(ManualClock::new(term_start() - TimeDelta::days(1)));
        let engine = Engine::new(store, clock.clone() as Arc<dyn Clock>);
        let prof = Caller::user("prof");
        let mut config = CourseConfig::new("CS101", 3)
            .with_code(Role::Student, "S-xyz")
            .with_code(Role::Ta, "T-abc");
        tweak(&mut config);
        let course = engine.create_course(&prof, config).unwrap().id;
        for s in students {
            engine.add_member(&Caller::Operator, course, &uid(s), Role::Student, false).unwrap();
        }
        for t in tas {
            engine.add_member(&Caller::Operator, course, &uid(t), Role::Ta, false).unwrap();
        }
        let rubric = engine.add_rubric(&prof, course, choice_rubric(1, 11)).unwrap().id;
        Self { engine, clock, course, rubric, prof, calibration_counter: Default::default() }
    }

    pub fn at(&self, t: Timestamp) {
        self.clock.set(t);
    }

    pub fn state<R>(&self, f: impl FnOnce(&CourseState) -> R) -> R {
        self.engine.read(self.course, f).unwrap()
    }

    pub fn assignment(&self, name: &str) -> Assignment {
        self.engine
            .create_assignment(&self.prof, self.course, weekly_assignment(name, self.rubric, term_start()))
            .unwrap()
    }

    pub fn submit_text(&self, who: &str, a: AssignmentId) -> SubmissionId {
        self.engine
            .submit(&user(who), self.course, a, SubmissionInput::Text { body: format!("work of {who}") })
            .unwrap()
            .id
    }

    pub fn allocate(&self, a: &Assignment, k: usize, seed: u64) {
        self.at(a.deadline + TimeDelta::hours(1));
        self.engine
            .allocate_reviews(&self.prof, self.course, a.id, &AllocationOptions::new(k, seed))
            .unwrap();
    }

    pub fn open_task(&self, who: &str, pred: impl Fn(&Task) -> bool) -> Option<TaskId> {
        let who = uid(who);
        self.state(|s| s.open_tasks_for(&who).find(|t| pred(t)).map(|t| t.id))
    }

    /// The peer-review task of `reviewer` on `submission`.
    pub fn peer_task(&self, reviewer: &str, submission: SubmissionId) -> TaskId {
        self.open_task(reviewer, |t| t.kind == TaskKind::PeerReview && t.submission_id == submission)
            .unwrap_or_else(|| panic!("{reviewer} has no task on {submission}"))
    }

    pub fn grade(&self, who: &str, task: TaskId, choice: usize) {
        self.engine
            .submit_review(&user(who), self.course, task, vec![Answer::new("q1", choice)])
            .unwrap();
    }

    /// Promotes a student by five perfect calibration reviews.
    pub fn promote(&self, who: &str) {
        for _ in 0..5 {
            let n = self.calibration_counter.get();
            self.calibration_counter.set(n + 1);
            let truth = CalibrationGroundTruth {
                calibration_submission_id: SubmissionId(0),
                truth_choices: BTreeMap::from([("q1".to_string(), 5)]),
                rationale: BTreeMap::from([("q1".to_string(), "solid middle".to_string())]),
            };
            self.engine
                .add_calibration_item(&self.prof, self.course, self.rubric, &format!("cal{n}.txt"), format!("essay {n}").as_bytes(), truth)
                .unwrap();
        }
        self.engine
            .schedule_calibration(&self.prof, self.course, Some(vec![uid(who)]), 5, CalibrationMode::Separate, None, 1)
            .unwrap();
        while let Some(t) = self.open_task(who, |t| matches!(t.kind, TaskKind::Calibration { .. })) {
            self.grade(who, t, 5);
        }
        assert_eq!(self.pool(who), Pool::Independent, "{who} should be promoted");
    }

    pub fn pool(&self, who: &str) -> Pool {
        self.state(|s| s.enrollment(&uid(who)).unwrap().pool)
    }
}
