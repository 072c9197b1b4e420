use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use chrono::{TimeDelta, Utc};
use mta_core::archive::write_zip;
use mta_core::authz::Caller;
use mta_core::clock::{Clock, ManualClock};
use mta_core::domain::{Answer, AssignmentId, CourseId, UserId};
use mta_core::engine::{AllocationOptions, Engine, SubmissionInput};
use mta_core::sim::{choice_rubric, weekly_assignment};
use mta_core::store::{Store, StoreConfig};

const STUDENTS: [&str; 4] = ["ann", "ben", "cat", "dan"];

fn mta(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mta")).arg("--data").arg(data).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "mta failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Course 1 with four students and one TA, created through the CLI.
fn setup(data: &Path, pools: bool) -> u64 {
    let config = data.join("course.toml");
    fs::write(
        &config,
        format!(
            "name = \"CS101\"\nlate_day_budget = 2\n[enrollment_codes]\nstudent = \"S-1\"\n\
             [features]\npools = {pools}\ncalibration = true\nspot_checking = true\nflagging = true\nconsensus_reward = false\n"
        ),
    )
    .unwrap();
    let id: u64 = stdout(&mta(data, &["course", "create", config.to_str().unwrap(), "--instructor", "prof"]))
        .trim()
        .parse()
        .unwrap();
    for s in STUDENTS {
        stdout(&mta(data, &["member", "add", &id.to_string(), s, "student"]));
    }
    stdout(&mta(data, &["member", "add", &id.to_string(), "tina", "ta"]));
    let rubric = data.join("rubric.json");
    fs::write(&rubric, serde_json::to_string(&choice_rubric(1, 11)).unwrap()).unwrap();
    assert_eq!(stdout(&mta(data, &["rubric", &id.to_string(), rubric.to_str().unwrap()])).trim(), "2");
    id
}

/// Adds an assignment released `days_ago` days ago, submits for every
/// student and, when `review` is set, allocates and completes two peer
/// reviews each, all on a manual clock.
fn assignment_with_work(data: &Path, course: u64, days_ago: i64, review: bool) -> u64 {
    let release = Utc::now() - TimeDelta::days(days_ago);
    let spec = weekly_assignment("HW1", mta_core::domain::RubricId(2), release);
    let path = data.join("hw1.json");
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    let aid: u64 = stdout(&mta(data, &["assignment", &course.to_string(), path.to_str().unwrap()])).trim().parse().unwrap();

    let clock = Arc::new(ManualClock::new(release + TimeDelta::hours(1)));
    let engine = Engine::new(Store::open(StoreConfig::at(data)).unwrap(), clock.clone() as Arc<dyn Clock>);
    let (course, a) = (CourseId(course), AssignmentId(aid));
    for s in STUDENTS {
        engine.submit(&Caller::user(s), course, a, SubmissionInput::Text { body: format!("essay by {s}") }).unwrap();
    }
    if review {
        clock.set(spec.deadline + TimeDelta::hours(1));
        engine.allocate_reviews(&Caller::user("prof"), course, a, &AllocationOptions::new(2, 1)).unwrap();
        for (i, s) in STUDENTS.iter().enumerate() {
            let tasks = engine
                .read(course, |st| {
                    st.tasks.values().filter(|t| t.assignee == UserId::new(*s)).map(|t| t.id).collect::<Vec<_>>()
                })
                .unwrap();
            for t in tasks {
                engine.submit_review(&Caller::user(*s), course, t, vec![Answer::new("q1", 4 + i)]).unwrap();
            }
        }
    }
    aid
}

#[test]
fn allocation_before_the_deadline_fails() {
    let dir = tempfile::tempdir().unwrap();
    let course = setup(dir.path(), true);
    let aid = assignment_with_work(dir.path(), course, 1, false);
    let out = mta(dir.path(), &["step", &course.to_string(), &aid.to_string(), "allocate-reviews", "--k", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("has not passed"));
}

#[test]
fn allocation_prints_plan_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let course = setup(dir.path(), false);
    let aid = assignment_with_work(dir.path(), course, 4, false);
    let out = stdout(&mta(
        dir.path(),
        &["step", &course.to_string(), &aid.to_string(), "allocate-reviews", "--k", "2", "--seed", "17"],
    ));
    assert!(out.contains("8 peer reviews"), "{out}");
    assert!(out.contains("seed: 17"), "{out}");
    // a second run conflicts with the existing allocation
    let again = mta(dir.path(), &["step", &course.to_string(), &aid.to_string(), "allocate-reviews", "--k", "2"]);
    assert!(!again.status.success());
}

#[test]
fn spot_check_selection_is_seed_determined() {
    let mut picks = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let course = setup(dir.path(), false);
        let aid = assignment_with_work(dir.path(), course, 20, true);
        let out = stdout(&mta(
            dir.path(),
            &["step", &course.to_string(), &aid.to_string(), "select-spot-checks", "--n", "3", "--seed", "42"],
        ));
        assert!(out.contains("seed: 42"));
        picks.push(out);
    }
    assert_eq!(picks[0], picks[1]);
    assert_eq!(picks[0].lines().next().unwrap().split(',').count(), 3, "{}", picks[0]);
}

#[test]
fn finalize_writes_the_grade_report() {
    let dir = tempfile::tempdir().unwrap();
    let course = setup(dir.path(), false);
    let aid = assignment_with_work(dir.path(), course, 20, true);
    let out = stdout(&mta(dir.path(), &["step", &course.to_string(), &aid.to_string(), "finalize-grades"]));
    let path = out.lines().find_map(|l| l.strip_prefix("report: ")).expect("report path printed");
    let csv = fs::read_to_string(path).unwrap();
    assert_eq!(csv.lines().count(), 1 + STUDENTS.len());
    let grades = stdout(&mta(dir.path(), &["grades", &course.to_string(), &aid.to_string()]));
    assert_eq!(grades, csv);
}

#[test]
fn calibration_ingest_reports_rejections_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let course = setup(dir.path(), true);
    let zip = write_zip([
        ("a.txt", b"first essay".as_slice()),
        ("b.txt", b"second essay".as_slice()),
        ("c.txt", b"third essay".as_slice()),
        ("truth.csv", b"file,q1\na.txt,5\nb.txt,7\n".as_slice()),
    ])
    .unwrap();
    let path = dir.path().join("cal.zip");
    fs::write(&path, zip).unwrap();
    let args = ["calibration", "ingest", &course.to_string(), "2", path.to_str().unwrap()];
    let first = stdout(&mta(dir.path(), &args));
    assert!(first.starts_with("ingested 2, duplicates 0, rejected 1"), "{first}");
    assert!(first.contains("rejected c.txt"), "{first}");
    let second = stdout(&mta(dir.path(), &args));
    assert!(second.starts_with("ingested 0, duplicates 2"), "{second}");

    let out = stdout(&mta(
        dir.path(),
        &["calibration", "schedule", &course.to_string(), "--count", "2", "--students", "ann,ben", "--seed", "3"],
    ));
    assert!(out.contains("ann,2,0") && out.contains("ben,2,0"), "{out}");
}

#[test]
fn export_import_and_roles() {
    let dir = tempfile::tempdir().unwrap();
    let course = setup(dir.path(), true);
    stdout(&mta(dir.path(), &["member", "set-role", &course.to_string(), "ann", "ta"]));
    let archive = dir.path().join("course.zip");
    stdout(&mta(dir.path(), &["export", &course.to_string(), archive.to_str().unwrap()]));

    let other = tempfile::tempdir().unwrap();
    let imported = stdout(&mta(other.path(), &["import", archive.to_str().unwrap()]));
    assert_eq!(imported.trim(), "1");
    let list = stdout(&mta(other.path(), &["course", "list"]));
    // prof, four students and tina
    assert_eq!(list, "id,name,members\n1,CS101,6\n");
    let reopened = Engine::new(Store::open(StoreConfig::at(other.path())).unwrap(), Arc::new(mta_core::clock::SystemClock));
    let role = reopened.read(CourseId(1), |s| s.enrollment(&UserId::new("ann")).unwrap().role).unwrap();
    assert_eq!(role, mta_core::domain::Role::Ta);
}

#[test]
fn simulate_prints_a_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&mta(
        dir.path(),
        &["simulate", "--students", "20", "--tas", "2", "--assignments", "3", "--seed", "4"],
    ));
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("assignment,fraction_independent"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let f: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&f));
    }
}

#[test]
fn bad_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "late_day_budget = \"many\"\n").unwrap();
    let out = mta(dir.path(), &["course", "create", config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: parsing"));
}
