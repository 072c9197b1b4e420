mod common;

use std::fs;
use std::path::Path;

use chrono::TimeDelta;
use common::{uid, user, Fixture};
use mta_core::archive::{read_zip, write_zip};
use mta_core::authz::Caller;
use mta_core::domain::{Answer, CourseId};
use mta_core::engine::{AllocationOptions, AppealDecision, SubmissionInput};
use mta_core::error::Error;
use mta_core::moderation::{Polarity, Verdict};
use mta_core::sim::{simulate_in, GraderMix, SimConfig};
use mta_core::state::{CourseState, EventRecord, TaskKind};
use mta_core::store::{Store, StoreConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn json(state: &CourseState) -> String {
    serde_json::to_string(state).unwrap()
}

fn small_term(seed: u64) -> SimConfig {
    SimConfig {
        students: 10,
        tas: 2,
        assignments: 2,
        calibration_corpus: 12,
        appeals: 2,
        flagging: true,
        spot_checks: 2,
        mix: GraderMix { accurate: 0.5, sloppy: 0.3, adversarial: 0.2 },
        seed,
        ..SimConfig::default()
    }
}

fn file_store(root: &Path, snapshot_every: u64) -> Store {
    let mut config = StoreConfig::at(root);
    config.snapshot_every = snapshot_every;
    config.sync = false;
    Store::open(config).unwrap()
}

fn course_dir(root: &Path, course: CourseId) -> std::path::PathBuf {
    root.join("courses").join(course.0.to_string())
}

#[test]
fn reopening_a_file_store_restores_every_course() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_in(small_term(3), file_store(dir.path(), 50)).unwrap();
    let live = sim.engine.read(sim.course, json).unwrap();
    drop(sim.engine);

    let reopened = file_store(dir.path(), 50);
    let restored = reopened.read(sim.course, json).unwrap();
    assert_eq!(live, restored);
    assert!(course_dir(dir.path(), sim.course).join("snapshot.json").exists());
    // the course name is still taken
    let names = reopened.registry().names.clone();
    assert!(names.values().any(|c| *c == sim.course));
}

#[test]
fn crash_at_any_commit_boundary_loses_nothing_committed() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_in(small_term(5), file_store(dir.path(), 40)).unwrap();
    let course = sim.course;
    drop(sim.engine);
    let cdir = course_dir(dir.path(), course);
    let log = fs::read_to_string(cdir.join("events.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    let records: Vec<EventRecord> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    let boundaries: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.tx_end)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(boundaries.len() > 200, "{} transactions", boundaries.len());
    let snapshot = fs::read(cdir.join("snapshot.json")).unwrap();

    let mut checked = 0;
    for (n, &cut) in boundaries.iter().enumerate() {
        // the crash happens while the next transaction is half written
        let mut content: String = lines[..cut].iter().map(|l| format!("{l}\n")).collect();
        if let Some(&next) = boundaries.get(n + 1) {
            for l in &lines[cut..next - 1] {
                content.push_str(l);
                content.push('\n');
            }
            let torn = lines[next - 1];
            content.push_str(&torn[..torn.len() / 2]);
        }
        let crash = tempfile::tempdir().unwrap();
        let cd = course_dir(crash.path(), course);
        fs::create_dir_all(&cd).unwrap();
        fs::write(cd.join("events.jsonl"), content).unwrap();
        // a snapshot taken later than the crash point must be ignored
        fs::write(cd.join("snapshot.json"), &snapshot).unwrap();

        let store = file_store(crash.path(), 40);
        let recovered = store.read(course, json).unwrap();
        let expected = json(&CourseState::replay(&records[..cut]).unwrap());
        assert_eq!(recovered, expected, "crash after event {cut}");
        // the truncated log accepts new writes
        let len = fs::read_to_string(cd.join("events.jsonl")).unwrap().lines().count();
        assert_eq!(len, cut);
        checked += 1;
    }
    assert_eq!(checked, boundaries.len());
}

#[test]
fn export_import_round_trip_and_tampering() {
    let sim = simulate_in(small_term(8), Store::in_memory()).unwrap();
    let archive = sim.engine.export_course(&Caller::Operator, sim.course).unwrap();
    let live = sim.engine.read(sim.course, json).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let fresh = file_store(dir.path(), 100);
    let id = fresh.import_course(&archive).unwrap();
    assert_eq!(fresh.read(id, json).unwrap(), live);
    // importing twice would duplicate the course name
    assert!(fresh.import_course(&archive).is_err());

    let entries = read_zip(&archive).unwrap();
    let events = entries.iter().find(|e| e.name == "events.jsonl").unwrap();
    let text = String::from_utf8(events.data.clone()).unwrap();
    let tampered: String = text
        .lines()
        .enumerate()
        .filter(|(i, _)| *i != 10)
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    let rebuilt: Vec<(String, Vec<u8>)> = entries
        .iter()
        .map(|e| {
            let data = if e.name == "events.jsonl" { tampered.clone().into_bytes() } else { e.data.clone() };
            (e.name.clone(), data)
        })
        .collect();
    let bad = write_zip(rebuilt.iter().map(|(n, d)| (n.as_str(), d.as_slice()))).unwrap();
    let err = Store::in_memory().import_course(&bad).unwrap_err();
    assert!(err.to_string().contains("gap detected"), "{err}");
}

#[test]
fn fresh_course_exports_cleanly() {
    let f = Fixture::new(&[], &[]);
    let archive = f.engine.export_course(&f.prof, f.course).unwrap();
    let entries = read_zip(&archive).unwrap();
    assert!(entries.iter().any(|e| e.name == "events.jsonl"));
    let store = Store::in_memory();
    let id = store.import_course(&archive).unwrap();
    assert_eq!(store.read(id, json).unwrap(), f.state(json));
    // students may not export
    let g = Fixture::new(&["alice"], &[]);
    assert!(matches!(g.engine.export_course(&user("alice"), g.course), Err(Error::Forbidden(_))));
}

/// Random walk over the whole operation surface. Most actions are legal;
/// some fail and must leave no trace.
#[test]
fn replay_matches_live_state_after_random_actions() {
    for seed in 0..3u64 {
        let students = ["a", "b", "c", "d", "e", "f"];
        let f = Fixture::new(&students, &["tina", "tom"]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hws: Vec<_> = (0..3).map(|i| f.assignment(&format!("HW{i}"))).collect();
        let base = hws[0].release_at;
        let mut actions = 0;
        let mut failures = 0;
        while actions < 600 {
            actions += 1;
            if rng.random_bool(0.1) {
                f.at(base + TimeDelta::hours(rng.random_range(0..24 * 8)));
            }
            let who = students[rng.random_range(0..students.len())];
            let hw = &hws[rng.random_range(0..hws.len())];
            let result: Result<(), Error> = match rng.random_range(0..9) {
                0 | 1 => f
                    .engine
                    .submit(&user(who), f.course, hw.id, SubmissionInput::Text { body: format!("{who} {actions}") })
                    .map(drop),
                2 => f
                    .engine
                    .allocate_reviews(&f.prof, f.course, hw.id, &AllocationOptions::new(2, rng.random()))
                    .map(drop),
                3 => {
                    let task = f.state(|s| s.open_tasks_for(&uid(who)).next().map(|t| t.id));
                    match task {
                        Some(t) => f
                            .engine
                            .submit_review(&user(who), f.course, t, vec![Answer::new("q1", rng.random_range(0..12))])
                            .map(drop),
                        None => Ok(()),
                    }
                }
                4 => {
                    let ta = if rng.random_bool(0.5) { "tina" } else { "tom" };
                    let task = f.state(|s| s.open_tasks_for(&uid(ta)).next().map(|t| (t.id, t.kind.clone())));
                    match task {
                        Some((t, TaskKind::Evaluation { .. })) => f
                            .engine
                            .submit_review(&user(ta), f.course, t, vec![Answer::new("quality", rng.random_range(0..11))])
                            .map(drop),
                        Some((t, _)) => f
                            .engine
                            .submit_review(&user(ta), f.course, t, vec![Answer::new("q1", rng.random_range(0..11))])
                            .map(drop),
                        None => Ok(()),
                    }
                }
                5 => {
                    let review = f.state(|s| {
                        s.reviews
                            .values()
                            .find(|r| s.submissions.get(&r.submission_id).is_some_and(|x| x.author == uid(who)))
                            .map(|r| r.id)
                    });
                    match review {
                        Some(r) => f
                            .engine
                            .flag_review(&user(who), f.course, r, Polarity::Negative, "unfair".into())
                            .map(drop),
                        None => Ok(()),
                    }
                }
                6 => {
                    let flag = f.state(|s| s.flags.values().find(|x| x.is_open()).map(|x| x.id));
                    match flag {
                        Some(id) => {
                            let v = if rng.random_bool(0.5) { Verdict::Upheld } else { Verdict::Dismissed };
                            f.engine.resolve_flag(&f.prof, f.course, id, v).map(drop)
                        }
                        None => Ok(()),
                    }
                }
                7 => {
                    let sub = f.state(|s| s.submission_of(hw.id, &uid(who)).map(|x| x.id));
                    match sub {
                        Some(sid) => f.engine.file_appeal(&user(who), f.course, sid, "regrade".into()).map(drop),
                        None => Ok(()),
                    }
                }
                _ => {
                    let appeal = f.state(|s| s.appeals.values().find(|x| x.is_open()).map(|x| x.id));
                    match appeal {
                        Some(id) => {
                            let d = if rng.random_bool(0.5) {
                                AppealDecision::Uphold { answers: vec![Answer::new("q1", rng.random_range(0..11))] }
                            } else {
                                AppealDecision::Deny
                            };
                            f.engine.resolve_appeal(&f.prof, f.course, id, d).map(drop)
                        }
                        None => Ok(()),
                    }
                }
            };
            if result.is_err() {
                failures += 1;
            }
        }
        assert!(failures > 0 && failures < actions, "seed {seed}: {failures} failures");
        let live = f.state(json);
        let replayed = json(&f.engine.store().replay(f.course).unwrap());
        assert_eq!(live, replayed, "seed {seed}");
        f.state(|s| s.check_invariants()).unwrap();
    }
}
