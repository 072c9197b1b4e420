mod common;

use std::collections::BTreeMap;

use chrono::TimeDelta;
use common::{uid, user, Fixture};
use mta_core::allocation::CalibrationMode;
use mta_core::archive::write_zip;
use mta_core::authz::Caller;
use mta_core::domain::{Answer, CourseConfig, Pool, Role};
use mta_core::engine::{grade_rows_csv, AllocationOptions, AppealDecision, SubmissionInput, UNGRADED};
use mta_core::error::Error;
use mta_core::grading::{OverrideReason, Provenance};
use mta_core::moderation::{NotificationKind, Polarity, Verdict};
use mta_core::pool::{Cause, Transition};
use mta_core::sim::{term_start, weekly_assignment};
use mta_core::state::{Event, TaReason, TaskKind};
use mta_core::workflow::{AssignmentKind, FileKind, IngestRejection, QuizConfig, QuizQuestion};
use mta_core::rubric::Reveal;

#[test]
fn course_creation_and_enrollment() {
    let f = Fixture::new(&[], &[]);
    let c = f.state(|s| s.course.clone());
    assert!(c.features.pools && !c.features.consensus_reward);

    let again = f.engine.create_course(&user("other"), CourseConfig::new("CS101", 3));
    assert!(matches!(again, Err(Error::DuplicateName(_))));
    let empty = f.engine.create_course(&user("other"), CourseConfig::new("", 3));
    assert!(matches!(empty, Err(Error::InvalidName)));
    let clash = f
        .engine
        .create_course(&user("other"), CourseConfig::new("CS102", 3).with_code(Role::Student, "S-xyz"));
    assert!(matches!(clash, Err(Error::DuplicateCode(_))));

    let e = f.engine.enroll(&uid("alice"), "S-xyz").unwrap();
    assert_eq!((e.role, e.pool), (Role::Student, Pool::Supervised));
    let t = f.engine.enroll(&uid("tina"), "T-abc").unwrap();
    assert_eq!(t.role, Role::Ta);
    assert!(matches!(f.engine.enroll(&uid("bob"), "nope"), Err(Error::UnknownCode)));
    assert!(matches!(f.engine.enroll(&uid("alice"), "T-abc"), Err(Error::AlreadyEnrolled(Role::Student))));

    let mine = f.engine.courses_for(&uid("prof"));
    assert_eq!(mine.len(), 1);
    assert!(mine[0].1.admin && mine[0].1.role == Role::Instructor);

    // role changes are operator-only
    assert!(f.engine.set_role(&f.prof, f.course, &uid("alice"), Role::Ta, false).is_err());
    let e = f.engine.set_role(&Caller::Operator, f.course, &uid("alice"), Role::Ta, false).unwrap();
    assert_eq!(e.role, Role::Ta);
}

#[test]
fn lateness_through_the_engine() {
    let f = Fixture::new(&["alice", "bob", "carol"], &["tina"]);
    let mut spec = weekly_assignment("HW1", f.rubric, term_start());
    spec.grace_period_secs = 3600;
    spec.late_unit_limit = 3;
    let a = f.engine.create_assignment(&f.prof, f.course, spec).unwrap();

    f.at(a.deadline + TimeDelta::minutes(30));
    let s = f.submit_text("alice", a.id);
    assert_eq!(f.state(|st| st.submissions[&s].late_days_charged), 0);

    f.at(a.deadline + TimeDelta::hours(1) + TimeDelta::minutes(1));
    let s = f.submit_text("bob", a.id);
    assert_eq!(f.state(|st| st.submissions[&s].late_days_charged), 1);
    // resubmitting keeps the id and does not charge again
    let s2 = f.submit_text("bob", a.id);
    assert_eq!(s, s2);
    assert_eq!(f.state(|st| st.enrollment(&uid("bob")).unwrap().late_days_used), 1);

    f.at(a.deadline + TimeDelta::days(3) + TimeDelta::hours(2));
    let r = f.engine.submit(&user("carol"), f.course, a.id, SubmissionInput::Text { body: "x".into() });
    assert!(matches!(r, Err(Error::LateRejected(_))), "{r:?}");

    // a second assignment, one day late, within its one-day limit
    let b = f.assignment("HW2");
    f.at(b.deadline + TimeDelta::hours(20));
    f.submit_text("carol", b.id);
    f.submit_text("bob", b.id);
    assert_eq!(f.state(|st| st.enrollment(&uid("carol")).unwrap().late_days_used), 1);
    assert_eq!(f.state(|st| st.enrollment(&uid("bob")).unwrap().late_days_used), 2);
    f.state(|st| st.check_invariants()).unwrap();
}

#[test]
fn late_day_budget_blocks_late_work() {
    let f = Fixture::with_config(&["alice"], &["tina"], |c| c.late_day_budget = 1);
    let mut spec = weekly_assignment("HW1", f.rubric, term_start());
    spec.late_unit_limit = 3;
    let a = f.engine.create_assignment(&f.prof, f.course, spec).unwrap();
    f.at(a.deadline + TimeDelta::hours(30));
    let r = f.engine.submit(&user("alice"), f.course, a.id, SubmissionInput::Text { body: "x".into() });
    assert!(matches!(r, Err(Error::LateRejected(ref m)) if m.contains("budget")), "{r:?}");
}

#[test]
fn quiz_gates_and_attempts() {
    let f = Fixture::new(&["alice"], &["tina"]);
    let essay = f.assignment("Essay");
    let quiz = QuizConfig {
        questions: (0..4)
            .map(|i| QuizQuestion { prompt: format!("q{i}"), options: vec!["A".into(), "B".into(), "C".into(), "D".into()] })
            .collect(),
        correct_choices: vec![0, 1, 2, 3],
        max_attempts: Some(2),
        reveal: Reveal::GradeOnly,
        out_of: 10.0,
        prerequisite_for: vec![essay.id],
    };
    let mut spec = weekly_assignment("Reading quiz", f.rubric, term_start());
    spec.kind = AssignmentKind::Quiz(quiz);
    spec.rubric_id = None;
    let q = f.engine.create_assignment(&f.prof, f.course, spec).unwrap();

    f.at(term_start() + TimeDelta::hours(1));
    let r = f.engine.submit(&user("alice"), f.course, essay.id, SubmissionInput::Text { body: "x".into() });
    assert!(matches!(r, Err(Error::PrerequisiteMissing)));

    let s = f.engine.submit(&user("alice"), f.course, q.id, SubmissionInput::Quiz { answers: vec![0, 1, 2, 0] }).unwrap();
    assert_eq!(s.quiz_grade, Some(7.5));
    let s = f.engine.submit(&user("alice"), f.course, q.id, SubmissionInput::Quiz { answers: vec![0, 1, 2, 3] }).unwrap();
    assert_eq!(s.quiz_grade, Some(10.0));
    let r = f.engine.submit(&user("alice"), f.course, q.id, SubmissionInput::Quiz { answers: vec![0, 1, 2, 3] });
    assert!(matches!(r, Err(Error::AttemptsExhausted)));
    let g = f.engine.final_grade(f.course, s.id).unwrap();
    assert_eq!((g.value, g.provenance), (10.0, Provenance::AutoGraded));

    f.submit_text("alice", essay.id);
}

#[test]
fn zip_ingestion() {
    let f = Fixture::new(&["alice", "bob", "dave"], &["tina"]);
    let mut spec = weekly_assignment("Report", f.rubric, term_start());
    spec.kind = AssignmentKind::Upload { accepted: vec![FileKind::Pdf, FileKind::Text] };
    let a = f.engine.create_assignment(&f.prof, f.course, spec).unwrap();

    let zip = write_zip([
        ("alice.pdf", b"%PDF alice".as_slice()),
        ("sub/bob.pdf", b"%PDF bob".as_slice()),
        ("carol.pdf", b"%PDF carol".as_slice()),
        ("dave.pdf", b"%PDF dave".as_slice()),
        ("dave.txt", b"dave text".as_slice()),
        ("tina.pdf", b"%PDF ta".as_slice()),
    ])
    .unwrap();
    let r = f.engine.ingest_zip(&f.prof, f.course, a.id, &zip).unwrap();
    let accepted: Vec<&str> = r.accepted.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(accepted, ["alice.pdf", "sub/bob.pdf"]);
    let rejected: BTreeMap<&str, IngestRejection> = r.rejected.iter().map(|(n, r)| (n.as_str(), r.clone())).collect();
    assert_eq!(rejected["carol.pdf"], IngestRejection::UnknownUsername);
    assert_eq!(rejected["dave.pdf"], IngestRejection::Ambiguous);
    assert_eq!(rejected["dave.txt"], IngestRejection::Ambiguous);
    assert_eq!(rejected["tina.pdf"], IngestRejection::UnknownUsername);

    let again = f.engine.ingest_zip(&f.prof, f.course, a.id, &write_zip([("alice.pdf", b"%PDF alice".as_slice())]).unwrap()).unwrap();
    assert_eq!(again.rejected, vec![("alice.pdf".to_string(), IngestRejection::DuplicateOfExisting)]);

    // the stored blob is the archive entry
    let s = f.state(|s| s.submission_of(a.id, &uid("alice")).cloned().unwrap());
    let mta_core::workflow::Payload::File { blob, media_type, .. } = s.payload else { panic!() };
    assert_eq!(media_type, "application/pdf");
    assert_eq!(f.engine.store().blobs().get(&blob).unwrap().as_slice(), b"%PDF alice");
    assert!(f.engine.ingest_zip(&user("alice"), f.course, a.id, &zip).is_err());
}

#[test]
fn calibration_ingestion() {
    let f = Fixture::new(&["alice"], &["tina"]);
    let mut essays: Vec<(String, Vec<u8>)> = (0..77).map(|i| (format!("essay{i:02}.txt"), format!("essay body {i}").into_bytes())).collect();
    let mut table = String::from("file,q1,q1_rationale\n");
    for (i, (name, _)) in essays.iter().enumerate() {
        table.push_str(&format!("{name},{},because {i}\n", i % 11));
    }
    essays.push(("truth.csv".into(), table.clone().into_bytes()));
    let zip = write_zip(essays.iter().map(|(n, d)| (n.as_str(), d.as_slice()))).unwrap();
    let r = f.engine.ingest_calibration(&f.prof, f.course, f.rubric, &zip).unwrap();
    assert_eq!(r.added.len(), 77);
    assert!(r.rejected.is_empty());

    let again = f.engine.ingest_calibration(&f.prof, f.course, f.rubric, &zip).unwrap();
    assert_eq!((again.added.len(), again.duplicates.len()), (0, 77));

    let zip = write_zip([
        ("new1.txt", b"new one".as_slice()),
        ("new2.txt", b"new two".as_slice()),
        ("truth.csv", b"file,q1\nnew1.txt,4\n".as_slice()),
    ])
    .unwrap();
    let r = f.engine.ingest_calibration(&f.prof, f.course, f.rubric, &zip).unwrap();
    assert_eq!(r.added.len(), 1);
    assert_eq!(r.rejected.len(), 1);
    assert_eq!(r.rejected[0].0, "new2.txt");

    let report = f
        .engine
        .schedule_calibration(&f.prof, f.course, None, 5, CalibrationMode::Separate, None, 3)
        .unwrap();
    assert_eq!(report[&uid("alice")].tasks.len(), 5);
    assert_eq!(report[&uid("alice")].shortfall, 0);
}

#[test]
fn calibration_feedback_and_finality() {
    let f = Fixture::new(&["alice"], &["tina"]);
    f.promote("alice");
    let window = f.state(|s| s.windows[&uid("alice")].recent(5));
    assert_eq!(window, vec![10.0; 5]);
    let done = f.state(|s| s.tasks.values().find(|t| matches!(t.kind, TaskKind::Calibration { .. })).unwrap().id);
    let r = f.engine.submit_review(&user("alice"), f.course, done, vec![Answer::new("q1", 5)]);
    assert!(matches!(r, Err(Error::Conflict(_))));
}

#[test]
fn allocation_gates_and_plans() {
    let f = Fixture::new(&["a", "b", "c", "d"], &["tina", "tom"]);
    let hw = f.assignment("HW1");
    f.at(hw.release_at + TimeDelta::hours(1));
    for s in ["a", "b", "c", "d"] {
        f.submit_text(s, hw.id);
    }
    let opts = AllocationOptions::new(2, 9);
    let early = f.engine.allocate_reviews(&f.prof, f.course, hw.id, &opts);
    assert!(matches!(early, Err(Error::DeadlineNotPassed(_))));

    f.at(hw.deadline + TimeDelta::hours(1));
    let report = f.engine.allocate_reviews(&f.prof, f.course, hw.id, &opts).unwrap();
    // everyone is supervised: 2 peer tasks each plus a TA review per submission
    let peer = f.state(|s| s.tasks.values().filter(|t| t.kind == TaskKind::PeerReview).count());
    assert_eq!(peer, 8);
    let ta = f.state(|s| {
        s.tasks
            .values()
            .filter(|t| matches!(t.kind, TaskKind::TaReview { reason: TaReason::Supervised, .. }))
            .count()
    });
    assert_eq!(ta, 4);
    assert_eq!(report.tasks.len(), 12);
    assert!(matches!(f.engine.allocate_reviews(&f.prof, f.course, hw.id, &opts), Err(Error::Conflict(_))));
    f.state(|s| s.check_invariants()).unwrap();
}

#[test]
fn stale_plans_are_rejected() {
    let f = Fixture::new(&["a", "b", "c", "d"], &["tina"]);
    let hw = f.assignment("HW1");
    f.at(hw.release_at);
    for s in ["a", "b", "c"] {
        f.submit_text(s, hw.id);
    }
    f.at(hw.deadline + TimeDelta::hours(1));
    let plan = f.engine.plan_reviews(&f.prof, f.course, hw.id, &AllocationOptions::new(2, 1)).unwrap();
    // a late submission lands between planning and committing
    f.submit_text("d", hw.id);
    let r = f.engine.commit_plan(&f.prof, f.course, plan);
    assert!(matches!(r, Err(Error::Conflict(_))), "{r:?}");
    let plan = f.engine.plan_reviews(&f.prof, f.course, hw.id, &AllocationOptions::new(2, 1)).unwrap();
    f.engine.commit_plan(&f.prof, f.course, plan).unwrap();
}

#[test]
fn late_submission_after_allocation_goes_to_a_ta() {
    let f = Fixture::new(&["a", "b", "c", "d"], &["tina"]);
    let hw = f.assignment("HW1");
    f.at(hw.release_at);
    for s in ["a", "b", "c"] {
        f.submit_text(s, hw.id);
    }
    f.allocate(&hw, 2, 3);
    let sid = f.submit_text("d", hw.id);
    let reason = f.state(|s| {
        s.tasks
            .values()
            .find(|t| t.submission_id == sid)
            .map(|t| t.kind.clone())
    });
    assert!(matches!(reason, Some(TaskKind::TaReview { reason: TaReason::Late, .. })));
    // and a resubmission is no longer possible
    let r = f.engine.submit(&user("a"), f.course, hw.id, SubmissionInput::Text { body: "v2".into() });
    assert!(matches!(r, Err(Error::DeadlinePassed(_))));
}

/// Builds an independent pool of four where `a` receives grades 6, 8, 10
/// from `r1`, `r2`, `r3`.
fn six_eight_ten() -> (Fixture, mta_core::workflow::Assignment, mta_core::domain::SubmissionId) {
    let f = Fixture::new(&["a", "r1", "r2", "r3"], &["tina", "tom"]);
    for s in ["a", "r1", "r2", "r3"] {
        f.promote(s);
    }
    let hw = f.assignment("HW1");
    f.at(hw.release_at);
    let mut subs = BTreeMap::new();
    for s in ["a", "r1", "r2", "r3"] {
        subs.insert(s, f.submit_text(s, hw.id));
    }
    f.allocate(&hw, 3, 5);
    for (reviewer, grade) in [("r1", 6), ("r2", 8), ("r3", 10)] {
        let t = f.peer_task(reviewer, subs["a"]);
        f.grade(reviewer, t, grade);
    }
    (f, hw, subs["a"])
}

#[test]
fn upheld_negative_flag_drops_the_review_and_demotes() {
    let (f, hw, sid) = six_eight_ten();
    assert_eq!(f.engine.final_grade(f.course, sid).unwrap().value, 8.0);
    let ten = f.state(|s| s.counted_peer_reviews(sid).iter().find(|r| r.points == 10.0).unwrap().id);

    let early = f.engine.flag_review(&user("a"), f.course, ten, Polarity::Negative, "too generous".into());
    assert!(matches!(early, Err(Error::DeadlineNotPassed(_))));
    f.at(hw.student_review_deadline + TimeDelta::hours(1));
    let other = f.engine.flag_review(&user("r1"), f.course, ten, Polarity::Negative, "x".into());
    assert!(matches!(other, Err(Error::Forbidden(_))));
    let flag = f.engine.flag_review(&user("a"), f.course, ten, Polarity::Negative, "too generous".into()).unwrap();
    assert!(flag.assignee.is_some());
    let dup = f.engine.flag_review(&user("a"), f.course, ten, Polarity::Negative, "again".into());
    assert!(matches!(dup, Err(Error::DuplicateFlag)));

    let before = f.state(|s| s.notifications.len());
    let ta = flag.assignee.clone().unwrap();
    f.engine.resolve_flag(&Caller::User(ta), f.course, flag.id, Verdict::Upheld).unwrap();
    assert_eq!(f.engine.final_grade(f.course, sid).unwrap().value, 7.0);
    let reviewer_notes = f.state(|s| {
        s.notifications[before..]
            .iter()
            .filter(|n| n.recipient == uid("r3") && n.kind == NotificationKind::ReviewInvalidated)
            .count()
    });
    assert_eq!(reviewer_notes, 1);
    assert_eq!(f.pool("r3"), Pool::Supervised);
    let cause = f.state(|s| s.pool_history[&uid("r3")].last().unwrap().cause);
    assert_eq!(cause, Some(Cause::UpheldFlag));
    f.state(|s| s.check_invariants()).unwrap();
}

#[test]
fn dismissed_and_positive_flags() {
    let (f, hw, sid) = six_eight_ten();
    f.at(hw.student_review_deadline + TimeDelta::hours(1));
    let reviews: Vec<_> = f.state(|s| s.counted_peer_reviews(sid).iter().map(|r| r.id).collect());
    let flag = f.engine.flag_review(&user("a"), f.course, reviews[0], Polarity::Negative, "meh".into()).unwrap();
    f.engine.resolve_flag(&f.prof, f.course, flag.id, Verdict::Dismissed).unwrap();
    assert_eq!(f.engine.final_grade(f.course, sid).unwrap().value, 8.0);
    assert!(matches!(f.engine.resolve_flag(&f.prof, f.course, flag.id, Verdict::Upheld), Err(Error::AlreadyResolved)));

    let good = f.engine.flag_review(&user("a"), f.course, reviews[1], Polarity::Positive, "very helpful".into()).unwrap();
    f.engine.resolve_flag(&f.prof, f.course, good.id, Verdict::Upheld).unwrap();
    assert_eq!(f.engine.final_grade(f.course, sid).unwrap().value, 8.0);
    assert_eq!(f.state(|s| s.commendations.len()), 1);
}

#[test]
fn appeal_lifecycle() {
    let (f, hw, sid) = six_eight_ten();
    let early = f.engine.file_appeal(&user("a"), f.course, sid, "please".into());
    assert!(matches!(early, Err(Error::GradesNotFinal)));
    f.at(hw.ta_review_deadline + TimeDelta::hours(1));
    let r = f.engine.file_appeal(&user("r1"), f.course, sid, "please".into());
    assert!(matches!(r, Err(Error::Forbidden(_))));
    let appeal = f.engine.file_appeal(&user("a"), f.course, sid, "I deserve more".into()).unwrap();
    assert!(matches!(f.engine.file_appeal(&user("a"), f.course, sid, "again".into()), Err(Error::DuplicateAppeal)));

    let ta = appeal.assignee.clone().unwrap();
    let other = if ta == uid("tina") { "tom" } else { "tina" };
    let r = f.engine.resolve_appeal(&user(other), f.course, appeal.id, AppealDecision::Deny);
    assert!(matches!(r, Err(Error::Forbidden(_))));
    let moved = f.engine.reassign_appeal(&Caller::User(ta.clone()), f.course, appeal.id, &uid(other)).unwrap();
    assert_eq!(moved.assignee, Some(uid(other)));

    f.engine
        .resolve_appeal(&user(other), f.course, appeal.id, AppealDecision::Uphold { answers: vec![Answer::new("q1", 9)] })
        .unwrap();
    let g = f.engine.final_grade(f.course, sid).unwrap();
    assert_eq!((g.value, g.provenance), (9.0, Provenance::TaOverride(OverrideReason::Appeal)));
    let evals = f.state(|s| {
        s.tasks
            .values()
            .filter(|t| matches!(t.kind, TaskKind::Evaluation { origin: mta_core::moderation::EvaluationOrigin::Appeal, .. }))
            .map(|t| (t.id, t.assignee.clone(), t.kind.clone()))
            .collect::<Vec<_>>()
    });
    assert_eq!(evals.len(), 3);

    // an appeal evaluation scoring a review 3 demotes its independent author
    let (task, assignee, kind) = evals[0].clone();
    let TaskKind::Evaluation { review_id, .. } = kind else { unreachable!() };
    let grader = f.state(|s| s.reviews[&review_id].grader.user().clone());
    assert_eq!(f.pool(grader.as_str()), Pool::Independent);
    let receipt = f
        .engine
        .submit_review(&Caller::User(assignee), f.course, task, vec![Answer::new("quality", 3)])
        .unwrap();
    assert_eq!(receipt.pool_transition, Some(Transition::Demote));
    assert_eq!(f.state(|s| s.pool_history[&grader].last().unwrap().cause), Some(Cause::AppealFault));

    let rows = f.engine.grade_report(&f.prof, f.course, hw.id).unwrap();
    let a_row = rows.iter().find(|r| r.username == "a").unwrap();
    assert_eq!(a_row.provenance, "appeal");
    assert_eq!(a_row.final_grade, Some(9.0));
    assert_eq!(a_row.peer_aggregate, Some(8.0));
    let notified = f.state(|s| s.notifications_for(&uid("a")).any(|n| n.kind == NotificationKind::AppealResolved));
    assert!(notified);
}

#[test]
fn denied_appeal_leaves_grade() {
    let (f, hw, sid) = six_eight_ten();
    f.at(hw.ta_review_deadline + TimeDelta::hours(1));
    let appeal = f.engine.file_appeal(&user("a"), f.course, sid, "more please".into()).unwrap();
    f.engine.resolve_appeal(&f.prof, f.course, appeal.id, AppealDecision::Deny).unwrap();
    assert_eq!(f.engine.final_grade(f.course, sid).unwrap().value, 8.0);
    assert!(matches!(f.engine.resolve_appeal(&f.prof, f.course, appeal.id, AppealDecision::Deny), Err(Error::AlreadyResolved)));
    // a fresh appeal is possible once the first is closed
    f.engine.file_appeal(&user("a"), f.course, sid, "second try".into()).unwrap();
}

#[test]
fn appeal_fan_out_matches_review_count() {
    for k in 0..=5usize {
        let names: Vec<String> = (0..=k).map(|i| format!("s{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let f = Fixture::with_config(&refs, &["tina", "tom"], |c| c.features.pools = false);
        let hw = f.assignment("HW1");
        f.at(hw.release_at);
        let subs: Vec<_> = refs.iter().map(|s| f.submit_text(s, hw.id)).collect();
        if k > 0 {
            f.allocate(&hw, k, 11);
            for r in &refs[1..] {
                let t = f.peer_task(r, subs[0]);
                f.grade(r, t, 7);
            }
        }
        f.at(hw.ta_review_deadline + TimeDelta::hours(1));
        let appeal = f.engine.file_appeal(&user("s0"), f.course, subs[0], "regrade".into()).unwrap();
        let before = f.state(|s| s.tasks.len());
        f.engine
            .resolve_appeal(&f.prof, f.course, appeal.id, AppealDecision::Uphold { answers: vec![Answer::new("q1", 8)] })
            .unwrap();
        let (regrades, evaluations) = f.state(|s| {
            let new: Vec<_> = s.tasks.values().skip(before).collect();
            (
                new.iter().filter(|t| matches!(t.kind, TaskKind::TaReview { reason: TaReason::Appeal, .. })).count(),
                new.iter().filter(|t| matches!(t.kind, TaskKind::Evaluation { .. })).count(),
            )
        });
        assert_eq!((regrades, evaluations), (1, k), "k = {k}");
    }
}

#[test]
fn supervised_grade_and_supervised_review_evaluation() {
    let f = Fixture::new(&["a", "b", "c"], &["tina"]);
    let hw = f.assignment("HW1");
    f.at(hw.release_at);
    let subs: Vec<_> = ["a", "b", "c"].iter().map(|s| f.submit_text(s, hw.id)).collect();
    f.allocate(&hw, 2, 4);
    let t = f.peer_task("b", subs[0]);
    f.grade("b", t, 8);
    let t = f.peer_task("c", subs[0]);
    f.grade("c", t, 8);
    // each review of a supervised student's work spawns an evaluation
    let evals = f.state(|s| {
        s.tasks
            .values()
            .filter(|t| matches!(t.kind, TaskKind::Evaluation { origin: mta_core::moderation::EvaluationOrigin::Supervised, .. }))
            .count()
    });
    assert_eq!(evals, 2);
    let ta_task = f.open_task("tina", |t| t.submission_id == subs[0] && matches!(t.kind, TaskKind::TaReview { .. })).unwrap();
    f.grade("tina", ta_task, 6);
    let g = f.engine.final_grade(f.course, subs[0]).unwrap();
    assert_eq!((g.value, g.provenance), (6.0, Provenance::TaOverride(OverrideReason::Supervised)));
}

#[test]
fn spot_checks_and_manual_evaluation() {
    let f = Fixture::new(&["a", "b", "c", "d"], &["tina"]);
    for s in ["a", "b", "c", "d"] {
        f.promote(s);
    }
    let hw = f.assignment("HW1");
    f.at(hw.release_at);
    let subs: Vec<_> = ["a", "b", "c", "d"].iter().map(|s| f.submit_text(s, hw.id)).collect();
    f.allocate(&hw, 2, 4);
    for (i, s) in ["a", "b", "c", "d"].iter().enumerate() {
        while let Some(t) = f.open_task(s, |t| t.kind == TaskKind::PeerReview) {
            f.grade(s, t, 5 + i);
        }
    }
    let early = f.engine.select_spot_checks(&f.prof, f.course, hw.id, 2, 42);
    assert!(matches!(early, Err(Error::DeadlineNotPassed(_))));
    f.at(hw.student_review_deadline + TimeDelta::hours(1));
    let sel = f.engine.select_spot_checks(&f.prof, f.course, hw.id, 2, 42).unwrap();
    assert_eq!(sel.chosen_submission_ids.len(), 2);
    let (ta_reviews, evals) = f.state(|s| {
        (
            s.tasks.values().filter(|t| matches!(t.kind, TaskKind::TaReview { reason: TaReason::SpotCheck, .. })).count(),
            s.tasks.values().filter(|t| matches!(t.kind, TaskKind::Evaluation { .. })).count(),
        )
    });
    assert_eq!((ta_reviews, evals), (2, 4));
    // already-checked submissions are not eligible again
    let again = f.engine.select_spot_checks(&f.prof, f.course, hw.id, 4, 42).unwrap();
    assert_eq!(again.chosen_submission_ids.len(), 2);
    assert!(again.chosen_submission_ids.is_disjoint(&sel.chosen_submission_ids));

    let chosen = *sel.chosen_submission_ids.iter().next().unwrap();
    let t = f.open_task("tina", |t| t.submission_id == chosen && matches!(t.kind, TaskKind::TaReview { .. })).unwrap();
    f.grade("tina", t, 3);
    let g = f.engine.final_grade(f.course, chosen).unwrap();
    assert_eq!((g.value, g.provenance), (3.0, Provenance::TaOverride(OverrideReason::SpotCheck)));

    let review = f.state(|s| s.counted_peer_reviews(subs[0])[0].id);
    f.engine.request_evaluation(&user("tina"), f.course, review).unwrap_or_else(|e| {
        // already pending through a spot check is fine too
        assert!(matches!(e, Error::DuplicateEvaluation));
        f.state(|s| s.tasks.values().last().unwrap().clone())
    });
    assert!(matches!(f.engine.request_evaluation(&user("tina"), f.course, review), Err(Error::DuplicateEvaluation)));
}

#[test]
fn grade_report_lists_every_student() {
    let f = Fixture::with_config(&["a", "b", "c", "lazy"], &["tina"], |c| c.features.pools = false);
    let hw = f.assignment("HW1");
    f.at(hw.release_at);
    let subs: Vec<_> = ["a", "b", "c"].iter().map(|s| f.submit_text(s, hw.id)).collect();
    f.allocate(&hw, 2, 1);
    for s in ["a", "b", "c"] {
        while let Some(t) = f.open_task(s, |t| t.kind == TaskKind::PeerReview) {
            f.grade(s, t, 7);
        }
    }
    assert!(matches!(f.engine.grade_report(&f.prof, f.course, hw.id), Err(Error::GradesNotFinal)));
    f.at(hw.ta_review_deadline);
    let rows = f.engine.finalize_grades(&f.prof, f.course, hw.id).unwrap();
    assert_eq!(rows.len(), 4);
    let lazy = rows.iter().find(|r| r.username == "lazy").unwrap();
    assert_eq!(lazy.provenance, UNGRADED);
    assert_eq!(lazy.final_grade, None);
    assert_eq!(rows.iter().filter(|r| r.final_grade == Some(7.0)).count(), 3);
    let csv = grade_rows_csv(&rows).unwrap();
    assert!(csv.starts_with("username,peer_aggregate,ta_grade,final_grade,provenance,late_days\n"));
    assert_eq!(csv.lines().count(), 5);
    assert!(f.state(|s| s.finalized.contains_key(&hw.id)));
    let _ = subs;
}

#[test]
fn peer_reviews_lock_at_the_deadline() {
    let f = Fixture::with_config(&["a", "b"], &["tina"], |c| c.features.pools = false);
    let hw = f.assignment("HW1");
    f.at(hw.release_at);
    let subs: Vec<_> = ["a", "b"].iter().map(|s| f.submit_text(s, hw.id)).collect();
    f.allocate(&hw, 1, 1);
    let t = f.peer_task("b", subs[0]);
    f.grade("b", t, 4);
    f.grade("b", t, 6);
    assert_eq!(f.engine.final_grade(f.course, subs[0]).unwrap().value, 6.0);
    let r = f.engine.submit_review(&user("a"), f.course, t, vec![Answer::new("q1", 1)]);
    assert!(matches!(r, Err(Error::Forbidden(_))));
    let bad = f.engine.submit_review(&user("b"), f.course, t, vec![Answer::new("q1", 11)]);
    assert!(matches!(bad, Err(Error::Validation(_))));
    f.at(hw.student_review_deadline + TimeDelta::seconds(1));
    let r = f.engine.submit_review(&user("b"), f.course, t, vec![Answer::new("q1", 1)]);
    assert!(matches!(r, Err(Error::DeadlinePassed(_))));
}

#[test]
fn failed_transactions_leave_no_trace() {
    let f = Fixture::new(&["a"], &["tina"]);
    let hw = f.assignment("HW1");
    let before = f.state(|s| serde_json::to_string(s).unwrap());
    f.at(hw.release_at - TimeDelta::hours(1));
    assert!(f.engine.submit(&user("a"), f.course, hw.id, SubmissionInput::Text { body: "x".into() }).is_err());
    assert_eq!(before, f.state(|s| serde_json::to_string(s).unwrap()));
    let events = f.engine.store().read_log(f.course, |l| l.len()).unwrap();
    assert_eq!(events as u64, f.state(|s| s.last_seq));
}

#[test]
fn concurrent_submits_serialize() {
    let names: Vec<String> = (0..16).map(|i| format!("s{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let f = Fixture::new(&refs, &["tina"]);
    let hw = f.assignment("HW1");
    f.at(hw.release_at);
    std::thread::scope(|scope| {
        for n in &names {
            let engine = f.engine.clone();
            let course = f.course;
            scope.spawn(move || {
                engine
                    .submit(&Caller::user(n.as_str()), course, hw.id, SubmissionInput::Text { body: n.clone() })
                    .unwrap();
            });
        }
    });
    let seqs: Vec<u64> = f
        .engine
        .store()
        .read_log(f.course, |l| {
            l.iter()
                .filter(|r| matches!(r.event, Event::SubmissionSaved { .. }))
                .map(|r| r.sequence)
                .collect()
        })
        .unwrap();
    assert_eq!(seqs.len(), 16);
    let unique: std::collections::BTreeSet<_> = seqs.iter().collect();
    assert_eq!(unique.len(), 16);
}
