//! Agent-based simulation of a course, driven through the real engine.
//!
//! Agents answer rubric questions with per-question choice errors: an
//! accurate grader is off by 0, 1 or 2 options with probability .70, .25,
//! .05; a sloppy one by 0..3 with .15, .35, .35, .15; an adversarial one
//! always picks the top option. Sloppy graders learn from every piece of
//! feedback (a calibration result or a TA evaluation), moving a fraction
//! `learning_rate` of the remaining way toward accurate behavior.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{TimeDelta, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{seeded_rng, CalibrationMode};
use crate::authz::Caller;
use crate::clock::{Clock, ManualClock};
use crate::domain::{
    Answer, AssignmentId, CourseConfig, CourseId, Features, Pool, RubricId, RubricKind,
    RubricOption, RubricQuestion, RubricSpec, SubmissionId, TaskId, Timestamp, UserId,
};
use crate::engine::{AllocationOptions, AppealDecision, Engine, SubmissionInput};
use crate::error::{Error, Result};
use crate::moderation::{Polarity, Verdict};
use crate::pool::Transition;
use crate::rubric::{calibration_formula, CalibrationGroundTruth};
use crate::state::{CourseState, TaskKind};
use crate::store::Store;
use crate::workflow::{AssignmentKind, AssignmentSpec};

/// Monday 2024-01-08, the start of every simulated term.
pub fn term_start() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 1, 8, 9, 0, 0).unwrap()
}

/// A submission rubric of `questions` questions, each with options worth
/// 0, 1, ..., `options - 1` points. Question ids are `q1`, `q2`, ...
pub fn choice_rubric(questions: usize, options: usize) -> RubricSpec {
    RubricSpec {
        kind: RubricKind::SubmissionRubric,
        questions: (1..=questions)
            .map(|i| RubricQuestion {
                id: format!("q{i}"),
                prompt: format!("Question {i}"),
                options: (0..options)
                    .map(|p| RubricOption { label: p.to_string(), points: p as f64 })
                    .collect(),
                reasoning: None,
            })
            .collect(),
    }
}

/// A text assignment on the weekly cadence: due three days after release,
/// peer reviews due two days later, TA work one day after that.
pub fn weekly_assignment(name: &str, rubric: RubricId, release: Timestamp) -> AssignmentSpec {
    AssignmentSpec {
        name: name.into(),
        kind: AssignmentKind::Text { limit: None },
        problem_statement: String::new(),
        rubric_id: Some(rubric),
        release_at: release,
        deadline: release + TimeDelta::days(3),
        student_review_deadline: release + TimeDelta::days(5),
        ta_review_deadline: release + TimeDelta::days(6),
        grace_period_secs: 15 * 60,
        late_unit_limit: 1,
        visible: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraderMix {
    pub accurate: f64,
    pub sloppy: f64,
    pub adversarial: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub students: usize,
    pub tas: usize,
    pub assignments: usize,
    /// Peer reviews per submission.
    pub k: usize,
    pub questions: usize,
    pub options: usize,
    pub calibration_corpus: usize,
    pub initial_calibration: usize,
    pub calibration_per_week: usize,
    pub mix: GraderMix,
    pub learning_rate: f64,
    /// Submissions spot-checked per assignment; 0 switches spot checks off.
    pub spot_checks: usize,
    pub pools: bool,
    /// Probability that a student hands in a given assignment.
    pub submission_rate: f64,
    /// Probability that a submission uses a late day.
    pub late_rate: f64,
    pub late_day_budget: u32,
    /// Appeals filed over the whole term, spread evenly over assignments.
    pub appeals: usize,
    pub flagging: bool,
    /// Run the cross-entity invariant checks after every assignment.
    pub check_invariants: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            students: 100,
            tas: 5,
            assignments: 6,
            k: 3,
            questions: 3,
            options: 5,
            calibration_corpus: 77,
            initial_calibration: 5,
            calibration_per_week: 1,
            mix: GraderMix { accurate: 0.7, sloppy: 0.3, adversarial: 0.0 },
            learning_rate: 0.2,
            spot_checks: 5,
            pools: true,
            submission_rate: 1.0,
            late_rate: 0.0,
            late_day_budget: 3,
            appeals: 0,
            flagging: false,
            check_invariants: false,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Roughly the size of one real deployment: 117 students, 11
    /// assignments, about 1200 submissions, 75 appeals.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            students: 117,
            tas: 8,
            assignments: 11,
            mix: GraderMix { accurate: 0.65, sloppy: 0.3, adversarial: 0.05 },
            spot_checks: 24,
            submission_rate: 0.935,
            late_rate: 0.05,
            appeals: 75,
            flagging: true,
            check_invariants: true,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mix;
        let shares = [m.accurate, m.sloppy, m.adversarial];
        if shares.iter().any(|s| !(0.0..=1.0).contains(s)) || (shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("grader mix must be non-negative and sum to 1"));
        }
        if self.students == 0 || self.tas == 0 {
            return Err(Error::invalid("need at least one student and one TA"));
        }
        if self.questions == 0 || self.options < 2 {
            return Err(Error::invalid("rubric needs a question and two options"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        for p in [self.learning_rate, self.submission_rate, self.late_rate] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("rates must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Behavior {
    Accurate,
    /// Weight on accurate behavior, growing with feedback.
    Sloppy { skill: f64 },
    Adversarial,
}

const ACCURATE: [f64; 3] = [0.70, 0.25, 0.05];
const SLOPPY: [f64; 4] = [0.15, 0.35, 0.35, 0.15];

fn draw(dist: &[f64], rng: &mut dyn RngCore) -> usize {
    let mut u: f64 = rng.random();
    for (i, p) in dist.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    dist.len() - 1
}

impl Behavior {
    /// The option this grader picks for a question whose right answer is
    /// `truth`.
    pub fn choose(&self, truth: usize, options: usize, rng: &mut dyn RngCore) -> usize {
        let error = match *self {
            Behavior::Adversarial => return options - 1,
            Behavior::Accurate => draw(&ACCURATE, rng),
            Behavior::Sloppy { skill } => {
                if rng.random::<f64>() < skill {
                    draw(&ACCURATE, rng)
                } else {
                    draw(&SLOPPY, rng)
                }
            }
        };
        let up = truth + error;
        let down = truth.checked_sub(error);
        match (up < options, down) {
            (true, Some(d)) => {
                if rng.random::<bool>() {
                    up
                } else {
                    d
                }
            }
            (true, None) => up,
            (false, Some(d)) => d,
            (false, None) => options - 1,
        }
    }

    fn learn(&mut self, rate: f64) {
        if let Behavior::Sloppy { skill } = self {
            *skill += rate * (1.0 - *skill);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssignmentStats {
    pub assignment: usize,
    /// Share of students in the independent pool when submissions opened.
    pub fraction_independent: f64,
    pub submissions: usize,
    pub ta_reviews: usize,
    pub appeals: usize,
    pub flags: usize,
    pub promotions: usize,
    pub demotions: usize,
    /// Mean |final grade - true grade| over graded submissions.
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimReport {
    /// Fraction independent after the initial calibration round.
    pub after_calibration: f64,
    pub curve: Vec<f64>,
    pub assignments: Vec<AssignmentStats>,
    pub submissions: usize,
    pub ta_reviews: usize,
    pub appeals: usize,
    pub flags: usize,
    pub promotions: usize,
    pub demotions: usize,
    pub events: u64,
}

impl SimReport {
    /// `assignment,fraction_independent,...` rows, one per assignment.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "assignment,fraction_independent,submissions,ta_reviews,appeals,flags,promotions,demotions,mean_abs_error\n",
        );
        for a in &self.assignments {
            out.push_str(&format!(
                "{},{:.4},{},{},{},{},{},{},{:.4}\n",
                a.assignment,
                a.fraction_independent,
                a.submissions,
                a.ta_reviews,
                a.appeals,
                a.flags,
                a.promotions,
                a.demotions,
                a.mean_abs_error
            ));
        }
        out
    }
}

/// A finished simulation: the report plus the engine holding the course.
pub struct Simulation {
    pub report: SimReport,
    pub engine: Engine,
    pub course: CourseId,
}

struct Driver {
    cfg: SimConfig,
    engine: Engine,
    clock: Arc<ManualClock>,
    course: CourseId,
    rubric: RubricId,
    rng: ChaCha8Rng,
    agents: BTreeMap<UserId, Behavior>,
    tas: Vec<UserId>,
    truth: BTreeMap<SubmissionId, Vec<usize>>,
    report: SimReport,
}

fn fraction_independent(state: &CourseState) -> f64 {
    let students: Vec<_> = state.students().collect();
    if students.is_empty() {
        return 0.0;
    }
    let independent = students.iter().filter(|e| e.pool == Pool::Independent).count();
    independent as f64 / students.len() as f64
}

fn question_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("q{i}")).collect()
}

impl Driver {
    fn new(cfg: SimConfig, store: Store) -> Result<Self> {
        cfg.validate()?;
        let clock = Arc::new(ManualClock::new(term_start() - TimeDelta::days(7)));
        let engine = Engine::new(store, clock.clone() as Arc<dyn Clock>);
        let prof = Caller::user("prof");
        let mut config = CourseConfig::new(format!("Simulated course {}", cfg.seed), cfg.late_day_budget);
        config.features = Features {
            pools: cfg.pools,
            calibration: true,
            spot_checking: cfg.spot_checks > 0,
            flagging: cfg.flagging,
            consensus_reward: false,
        };
        let course = engine.create_course(&prof, config)?.id;
        let mut tas = Vec::new();
        for i in 1..=cfg.tas {
            let ta = UserId::new(format!("ta{i:02}"));
            engine.add_member(&Caller::Operator, course, &ta, crate::domain::Role::Ta, false)?;
            tas.push(ta);
        }
        let mut rng = seeded_rng(cfg.seed);
        let mut agents = BTreeMap::new();
        let n_adv = (cfg.students as f64 * cfg.mix.adversarial).round() as usize;
        let n_sloppy = (cfg.students as f64 * cfg.mix.sloppy).round() as usize;
        let mut kinds: Vec<Behavior> = (0..cfg.students)
            .map(|i| {
                if i < n_adv {
                    Behavior::Adversarial
                } else if i < n_adv + n_sloppy {
                    Behavior::Sloppy { skill: 0.0 }
                } else {
                    Behavior::Accurate
                }
            })
            .collect();
        kinds.shuffle(&mut rng);
        for (i, kind) in kinds.into_iter().enumerate() {
            let user = UserId::new(format!("s{:03}", i + 1));
            engine.add_member(&Caller::Operator, course, &user, crate::domain::Role::Student, false)?;
            agents.insert(user, kind);
        }
        let rubric = engine.add_rubric(&prof, course, choice_rubric(cfg.questions, cfg.options))?.id;
        Ok(Self {
            cfg,
            engine,
            clock,
            course,
            rubric,
            rng,
            agents,
            tas,
            truth: BTreeMap::new(),
            report: SimReport::default(),
        })
    }

    fn state<R>(&self, f: impl FnOnce(&CourseState) -> R) -> R {
        self.engine.read(self.course, f).expect("course exists")
    }

    fn random_truth(&mut self) -> Vec<usize> {
        let options = self.cfg.options;
        (0..self.cfg.questions).map(|_| self.rng.random_range(0..options)).collect()
    }

    fn seed(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn build_corpus(&mut self) -> Result<()> {
        let ids = question_ids(self.cfg.questions);
        for i in 0..self.cfg.calibration_corpus {
            let truth = self.random_truth();
            let gt = CalibrationGroundTruth {
                calibration_submission_id: SubmissionId(0),
                truth_choices: ids.iter().cloned().zip(truth).collect(),
                rationale: BTreeMap::new(),
            };
            let body = format!("calibration essay {i} of course {}", self.cfg.seed);
            self.engine.add_calibration_item(
                &Caller::user("prof"),
                self.course,
                self.rubric,
                &format!("essay{i:03}.txt"),
                body.as_bytes(),
                gt,
            )?;
        }
        Ok(())
    }

    fn note_transition(&mut self, t: Option<Transition>, stats: &mut AssignmentStats) {
        match t {
            Some(Transition::Promote) => stats.promotions += 1,
            Some(Transition::Demote) => stats.demotions += 1,
            _ => {}
        }
    }

    /// Every student works through their open review and calibration tasks.
    fn students_work(&mut self, stats: &mut AssignmentStats) -> Result<()> {
        let ids = question_ids(self.cfg.questions);
        let mut todo: Vec<(UserId, TaskId, SubmissionId, bool)> = self.state(|s| {
            s.tasks
                .values()
                .filter(|t| t.is_open())
                .filter_map(|t| match t.kind {
                    TaskKind::PeerReview => Some((t.assignee.clone(), t.id, t.submission_id, false)),
                    TaskKind::Calibration { .. } => Some((t.assignee.clone(), t.id, t.submission_id, true)),
                    _ => None,
                })
                .collect()
        });
        todo.shuffle(&mut self.rng);
        for (user, task, target, calibration) in todo {
            let truth: Vec<usize> = if calibration {
                self.state(|s| ids.iter().map(|q| s.calibration[&target].truth.truth_choices[q]).collect())
            } else {
                self.truth[&target].clone()
            };
            let behavior = self.agents[&user];
            let answers: Vec<Answer> = ids
                .iter()
                .zip(&truth)
                .map(|(q, &t)| Answer::new(q.clone(), behavior.choose(t, self.cfg.options, &mut self.rng)))
                .collect();
            let receipt = self.engine.submit_review(&Caller::User(user.clone()), self.course, task, answers)?;
            if receipt.calibration.is_some() {
                self.agents.get_mut(&user).expect("agent").learn(self.cfg.learning_rate);
            }
            self.note_transition(receipt.pool_transition, stats);
        }
        Ok(())
    }

    /// TAs grade with the true answers and score reviews by distance to
    /// them.
    fn tas_work(&mut self, stats: &mut AssignmentStats) -> Result<()> {
        let ids = question_ids(self.cfg.questions);
        loop {
            let todo: Vec<(UserId, TaskId, TaskKind, SubmissionId)> = self.state(|s| {
                s.tasks
                    .values()
                    .filter(|t| t.is_open() && t.is_staff_task())
                    .map(|t| (t.assignee.clone(), t.id, t.kind.clone(), t.submission_id))
                    .collect()
            });
            if todo.is_empty() {
                return Ok(());
            }
            for (ta, task, kind, target) in todo {
                let truth = self.truth[&target].clone();
                let answers = match &kind {
                    TaskKind::TaReview { questions, .. } => ids
                        .iter()
                        .zip(&truth)
                        .filter(|(q, _)| questions.as_ref().is_none_or(|qs| qs.contains(q)))
                        .map(|(q, &t)| Answer::new(q.clone(), t))
                        .collect(),
                    TaskKind::Evaluation { review_id, .. } => {
                        let review = self.state(|s| s.reviews[review_id].clone());
                        let diffs = ids.iter().zip(&truth).map(|(q, &t)| {
                            let c = review.answers.iter().find(|a| &a.question_id == q).map_or(0, |a| a.choice);
                            c as i64 - t as i64
                        });
                        let score = calibration_formula(diffs) as usize;
                        let grader = review.grader.user().clone();
                        if let Some(b) = self.agents.get_mut(&grader) {
                            b.learn(self.cfg.learning_rate);
                        }
                        vec![Answer::new("quality", score)]
                    }
                    _ => continue,
                };
                let receipt = self.engine.submit_review(&Caller::User(ta), self.course, task, answers)?;
                if matches!(kind, TaskKind::TaReview { .. }) {
                    stats.ta_reviews += 1;
                }
                self.note_transition(receipt.pool_transition, stats);
            }
        }
    }

    fn schedule_calibration(&mut self, count: usize) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        let seed = self.seed();
        self.engine.schedule_calibration(
            &Caller::user("prof"),
            self.course,
            None,
            count,
            CalibrationMode::Separate,
            None,
            seed,
        )?;
        Ok(())
    }

    fn true_points(&self, s: SubmissionId) -> f64 {
        self.truth[&s].iter().map(|&c| c as f64).sum()
    }

    fn run_assignment(&mut self, index: usize, assignment: AssignmentId, release: Timestamp) -> Result<AssignmentStats> {
        let mut stats = AssignmentStats { assignment: index + 1, ..Default::default() };
        let a = self.state(|s| s.assignments[&assignment].clone());

        self.clock.set(release + TimeDelta::hours(1));
        if index > 0 {
            self.schedule_calibration(self.cfg.calibration_per_week)?;
            self.students_work(&mut stats)?;
        }

        // submissions, some of them a day late
        self.clock.set(a.deadline - TimeDelta::hours(2));
        stats.fraction_independent = self.state(fraction_independent);
        let students: Vec<UserId> = self.agents.keys().cloned().collect();
        let mut late = Vec::new();
        for user in &students {
            if self.rng.random::<f64>() >= self.cfg.submission_rate {
                continue;
            }
            if self.rng.random::<f64>() < self.cfg.late_rate {
                late.push(user.clone());
                continue;
            }
            self.hand_in(user, assignment, index, &mut stats)?;
        }
        self.clock.set(a.deadline + TimeDelta::hours(20));
        for user in &late {
            self.hand_in(user, assignment, index, &mut stats)?;
        }

        // reviews
        self.clock.set(a.deadline + TimeDelta::days(1) + TimeDelta::hours(1));
        let seed = self.seed();
        if stats.submissions > 0 {
            self.engine.allocate_reviews(
                &Caller::user("prof"),
                self.course,
                assignment,
                &AllocationOptions::new(self.cfg.k, seed),
            )?;
        }
        self.students_work(&mut stats)?;
        self.tas_work(&mut stats)?;

        // spot checks and flags once reviews are released
        self.clock.set(a.student_review_deadline + TimeDelta::hours(1));
        if self.cfg.spot_checks > 0 && stats.submissions > 0 {
            let seed = self.seed();
            self.engine.select_spot_checks(&Caller::user("prof"), self.course, assignment, self.cfg.spot_checks, seed)?;
        }
        if self.cfg.flagging {
            self.flag_reviews(assignment, &mut stats)?;
        }
        self.tas_work(&mut stats)?;

        // appeals after grades are final
        self.clock.set(a.ta_review_deadline + TimeDelta::hours(1));
        let quota = self.cfg.appeals * (index + 1) / self.cfg.assignments - self.cfg.appeals * index / self.cfg.assignments;
        self.appeal(assignment, quota, &mut stats)?;
        self.tas_work(&mut stats)?;

        let rows = self.engine.finalize_grades(&Caller::user("prof"), self.course, assignment)?;
        let _ = rows;
        let errors: Vec<f64> = self.state(|s| {
            s.submissions_for(assignment)
                .filter_map(|sub| {
                    crate::engine::final_grade(s, self.engine.policies(), sub.id)
                        .ok()
                        .map(|g| (g.value - self.true_points(sub.id)).abs())
                })
                .collect()
        });
        stats.mean_abs_error = if errors.is_empty() { 0.0 } else { errors.iter().sum::<f64>() / errors.len() as f64 };

        if self.cfg.check_invariants {
            self.state(|s| s.check_invariants()).map_err(Error::invalid)?;
        }
        Ok(stats)
    }

    fn hand_in(&mut self, user: &UserId, assignment: AssignmentId, index: usize, stats: &mut AssignmentStats) -> Result<()> {
        let body = format!("answer of {user} to assignment {}", index + 1);
        let caller = Caller::User(user.clone());
        match self.engine.submit(&caller, self.course, assignment, SubmissionInput::Text { body }) {
            Ok(s) => {
                let truth = self.random_truth();
                self.truth.insert(s.id, truth);
                stats.submissions += 1;
                Ok(())
            }
            // out of late days: the student simply misses the assignment
            Err(Error::LateRejected(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn flag_reviews(&mut self, assignment: AssignmentId, stats: &mut AssignmentStats) -> Result<()> {
        let ids = &question_ids(self.cfg.questions);
        let reviews: Vec<(UserId, crate::domain::ReviewId, f64)> = self.state(|s| {
            s.submissions_for(assignment)
                .flat_map(|sub| {
                    let truth = &self.truth[&sub.id];
                    s.counted_peer_reviews(sub.id).into_iter().map(move |r| {
                        let diffs = ids.iter().zip(truth).map(|(q, &t)| {
                            let c = r.answers.iter().find(|a| &a.question_id == q).map_or(0, |a| a.choice);
                            c as i64 - t as i64
                        });
                        (sub.author.clone(), r.id, calibration_formula(diffs))
                    })
                })
                .collect()
        });
        for (author, review, quality) in reviews {
            // authors notice reviews that are far off
            if quality > 1.0 {
                continue;
            }
            let flag = self.engine.flag_review(
                &Caller::User(author),
                self.course,
                review,
                Polarity::Negative,
                "this review does not match my work".into(),
            )?;
            stats.flags += 1;
            let verdict = if quality < 5.0 { Verdict::Upheld } else { Verdict::Dismissed };
            let ta = flag.assignee.clone().expect("flags are routed on filing");
            self.engine.resolve_flag(&Caller::User(ta), self.course, flag.id, verdict)?;
            let demoted = self.state(|s| {
                s.pool_history
                    .get(&s.reviews[&review].grader.user().clone())
                    .and_then(|h| h.last())
                    .is_some_and(|d| d.cause == Some(crate::pool::Cause::UpheldFlag))
            });
            if demoted && verdict == Verdict::Upheld {
                stats.demotions += 1;
            }
        }
        Ok(())
    }

    fn appeal(&mut self, assignment: AssignmentId, quota: usize, stats: &mut AssignmentStats) -> Result<()> {
        if quota == 0 {
            return Ok(());
        }
        let mut gaps: Vec<(f64, SubmissionId, UserId, f64)> = self.state(|s| {
            s.submissions_for(assignment)
                .filter_map(|sub| {
                    let g = crate::engine::final_grade(s, self.engine.policies(), sub.id).ok()?;
                    Some((self.true_points(sub.id) - g.value, sub.id, sub.author.clone(), g.value))
                })
                .collect()
        });
        // the students who lost the most points appeal
        gaps.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let ids = question_ids(self.cfg.questions);
        for (gap, sid, author, _) in gaps.into_iter().take(quota) {
            let appeal = self.engine.file_appeal(&Caller::User(author), self.course, sid, "I think my work deserves more".into())?;
            stats.appeals += 1;
            let ta = appeal.assignee.clone().expect("appeals are routed on filing");
            let decision = if gap >= 1.0 {
                let answers = ids.iter().zip(&self.truth[&sid]).map(|(q, &t)| Answer::new(q.clone(), t)).collect();
                stats.ta_reviews += 1;
                AppealDecision::Uphold { answers }
            } else {
                AppealDecision::Deny
            };
            self.engine.resolve_appeal(&Caller::User(ta), self.course, appeal.id, decision)?;
        }
        Ok(())
    }

    fn run(mut self) -> Result<Simulation> {
        let release0 = term_start();
        let mut assignments = Vec::new();
        for i in 0..self.cfg.assignments {
            let release = release0 + TimeDelta::days(7 * i as i64);
            let spec = weekly_assignment(&format!("Assignment {}", i + 1), self.rubric, release);
            let a = self.engine.create_assignment(&Caller::user("prof"), self.course, spec)?;
            assignments.push((a.id, release));
        }
        self.build_corpus()?;
        let mut warmup = AssignmentStats::default();
        self.schedule_calibration(self.cfg.initial_calibration)?;
        self.students_work(&mut warmup)?;
        self.report.after_calibration = self.state(fraction_independent);
        self.report.promotions += warmup.promotions;

        for (i, (id, release)) in assignments.into_iter().enumerate() {
            let stats = self.run_assignment(i, id, release)?;
            self.report.curve.push(stats.fraction_independent);
            self.report.submissions += stats.submissions;
            self.report.ta_reviews += stats.ta_reviews;
            self.report.appeals += stats.appeals;
            self.report.flags += stats.flags;
            self.report.promotions += stats.promotions;
            self.report.demotions += stats.demotions;
            self.report.assignments.push(stats);
        }
        self.report.events = self.state(|s| s.last_seq);
        let _ = &self.tas;
        Ok(Simulation { report: self.report, engine: self.engine, course: self.course })
    }
}

/// Runs a whole term in an in-memory store.
pub fn simulate(cfg: SimConfig) -> Result<Simulation> {
    simulate_in(cfg, Store::in_memory())
}

pub fn simulate_in(cfg: SimConfig, store: Store) -> Result<Simulation> {
    Driver::new(cfg, store)?.run()
}
