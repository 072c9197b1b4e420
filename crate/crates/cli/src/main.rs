//! `mta`: operator tool for course setup, batch steps, exports and the
//! pool-dynamics simulation. Every command runs as the operator directly
//! against the course store in `--data`.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::TimeDelta;
use clap::{Parser, Subcommand, ValueEnum};
use mta_api::{ApiConfig, AppState, StaticUsers};
use mta_core::allocation::CalibrationMode;
use mta_core::authz::Caller;
use mta_core::clock::{Clock, SystemClock};
use mta_core::domain::{AssignmentId, CourseConfig, CourseId, Role, RubricId, RubricSpec, UserId};
use mta_core::engine::{AllocationOptions, Engine, Step, StepReport};
use mta_core::sim::{simulate, GraderMix, SimConfig};
use mta_core::store::{Store, StoreConfig};
use mta_core::workflow::AssignmentSpec;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "mta", version, about = "Peer-grading engine operator tool")]
struct Cli {
    /// Directory holding the course logs and blobs.
    #[arg(long, env = "MTA_DATA", default_value = "mta-data", global = true)]
    data: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Course(CourseCmd),
    #[command(subcommand)]
    Member(MemberCmd),
    /// Add a rubric from a JSON or TOML file.
    Rubric { course: u64, file: PathBuf },
    /// Add an assignment from a JSON or TOML file.
    Assignment { course: u64, file: PathBuf },
    #[command(subcommand)]
    Calibration(CalibrationCmd),
    /// Run a deadline-driven batch step.
    Step {
        course: u64,
        assignment: u64,
        #[command(subcommand)]
        step: StepCmd,
    },
    /// Grade table of one assignment as CSV.
    Grades {
        course: u64,
        assignment: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a course archive (log plus blobs).
    Export { course: u64, out: PathBuf },
    /// Restore a course from an archive written by `export`.
    Import { archive: PathBuf },
    /// Drive synthetic students through an in-memory course and print the
    /// per-assignment curve as CSV.
    Simulate(SimArgs),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Login list, `user:password,...`.
        #[arg(long, env = "MTA_USERS", default_value = "")]
        users: String,
        /// Bearer token that acts as the operator.
        #[arg(long, env = "MTA_OPERATOR_TOKEN")]
        operator_token: Option<String>,
        #[arg(long, default_value_t = 12)]
        session_hours: i64,
    },
}

#[derive(Subcommand)]
enum CourseCmd {
    /// Create a course from a TOML or JSON config.
    Create {
        file: PathBuf,
        /// Enroll this user as the course's admin instructor.
        #[arg(long)]
        instructor: Option<String>,
    },
    List,
}

#[derive(Subcommand)]
enum MemberCmd {
    Add {
        course: u64,
        user: String,
        #[arg(value_enum)]
        role: RoleArg,
        #[arg(long)]
        admin: bool,
    },
    SetRole {
        course: u64,
        user: String,
        #[arg(value_enum)]
        role: RoleArg,
        #[arg(long)]
        admin: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Student,
    Ta,
    Instructor,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Student => Role::Student,
            RoleArg::Ta => Role::Ta,
            RoleArg::Instructor => Role::Instructor,
        }
    }
}

#[derive(Subcommand)]
enum CalibrationCmd {
    /// Ingest a zip of essays plus a `truth.csv` ground-truth table.
    Ingest { course: u64, rubric: u64, archive: PathBuf },
    /// Hand out calibration items.
    Schedule {
        course: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, value_enum, default_value = "separate")]
        mode: ModeArg,
        /// Comma-separated students; everyone when omitted.
        #[arg(long, value_delimiter = ',')]
        students: Option<Vec<String>>,
        /// Assignment whose review tasks mixed items blend in with.
        #[arg(long)]
        assignment: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Separate,
    Mixed,
}

#[derive(Subcommand)]
enum StepCmd {
    /// Assign peer reviews once submissions have closed.
    AllocateReviews {
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Pick submissions for TA spot checks.
    SelectSpotChecks {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Freeze grades and write the grade report.
    FinalizeGrades {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct SimArgs {
    /// Use the deployment-sized preset; other sizing flags are ignored.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long, default_value_t = 100)]
    students: usize,
    #[arg(long, default_value_t = 5)]
    tas: usize,
    #[arg(long, default_value_t = 6)]
    assignments: usize,
    #[arg(long, default_value_t = 5)]
    initial_calibration: usize,
    #[arg(long, default_value_t = 1)]
    calibration_per_week: usize,
    #[arg(long, default_value_t = 0.7)]
    accurate: f64,
    #[arg(long, default_value_t = 0.3)]
    sloppy: f64,
    #[arg(long, default_value_t = 0.0)]
    adversarial: f64,
    /// Spot checks per assignment; 0 turns them off.
    #[arg(long, default_value_t = 5)]
    spot_checks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SimArgs {
    fn config(&self) -> SimConfig {
        if self.desk_scale {
            return SimConfig::desk_scale(self.seed);
        }
        SimConfig {
            students: self.students,
            tas: self.tas,
            assignments: self.assignments,
            initial_calibration: self.initial_calibration,
            calibration_per_week: self.calibration_per_week,
            mix: GraderMix { accurate: self.accurate, sloppy: self.sloppy, adversarial: self.adversarial },
            spot_checks: self.spot_checks,
            seed: self.seed,
            ..SimConfig::default()
        }
    }
}

/// Reads a config file as TOML, or JSON when the extension says so.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn seed_or_random(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(rand::random)
}

fn open_engine(data: &Path) -> Result<Engine> {
    let store = Store::open(StoreConfig::at(data)).with_context(|| format!("opening store at {}", data.display()))?;
    Ok(Engine::new(store, Arc::new(SystemClock) as Arc<dyn Clock>))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            println!("{}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn step_summary(report: &StepReport, seed: Option<u64>) -> String {
    let mut out = String::new();
    match report {
        StepReport::AllocateReviews(r) => {
            let peer = r.plan.edges.iter().filter(|e| e.kind == mta_core::allocation::EdgeKind::Peer).count();
            out.push_str(&format!("allocated {} tasks ({peer} peer reviews)\n", r.tasks.len()));
            for d in &r.plan.degraded {
                out.push_str(&format!("degraded: {d:?}\n"));
            }
            for (u, s) in &r.plan.solo {
                out.push_str(&format!("solo: {u} (submission {s}) goes to a TA\n"));
            }
            if r.calibration_shortfall > 0 {
                out.push_str(&format!("calibration shortfall: {}\n", r.calibration_shortfall));
            }
        }
        StepReport::SelectSpotChecks(s) => {
            let ids: Vec<String> = s.chosen_submission_ids.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!("spot checks ({}): {}\n", s.policy_name, ids.join(",")));
        }
        StepReport::FinalizeGrades { rows } => out.push_str(&format!("finalized {} rows\n", rows.len())),
    }
    if let Some(seed) = seed {
        out.push_str(&format!("seed: {seed}\n"));
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let op = Caller::Operator;
    if let Command::Simulate(args) = &cli.command {
        let sim = simulate(args.config())?;
        let r = &sim.report;
        eprintln!(
            "after calibration {:.3}; {} submissions, {} TA reviews, {} appeals, {} flags, {} promotions, {} demotions",
            r.after_calibration, r.submissions, r.ta_reviews, r.appeals, r.flags, r.promotions, r.demotions
        );
        return write_or_print(args.out.as_deref(), &r.to_csv());
    }
    let engine = open_engine(&cli.data)?;
    match cli.command {
        Command::Course(CourseCmd::Create { file, instructor }) => {
            let config: CourseConfig = read_config(&file)?;
            let course = engine.create_course(&op, config)?;
            if let Some(u) = instructor {
                engine.add_member(&op, course.id, &UserId::new(u), Role::Instructor, true)?;
            }
            println!("{}", course.id);
        }
        Command::Course(CourseCmd::List) => {
            println!("id,name,members");
            for id in engine.store().course_ids() {
                let (name, members) = engine.read(id, |s| (s.course.name.clone(), s.enrollments.len()))?;
                println!("{id},{name},{members}");
            }
        }
        Command::Member(MemberCmd::Add { course, user, role, admin }) => {
            let e = engine.add_member(&op, CourseId(course), &UserId::new(user), role.into(), admin)?;
            println!("{} {:?}", e.user_id, e.role);
        }
        Command::Member(MemberCmd::SetRole { course, user, role, admin }) => {
            let e = engine.set_role(&op, CourseId(course), &UserId::new(user), role.into(), admin)?;
            println!("{} {:?}", e.user_id, e.role);
        }
        Command::Rubric { course, file } => {
            let spec: RubricSpec = read_config(&file)?;
            println!("{}", engine.add_rubric(&op, CourseId(course), spec)?.id);
        }
        Command::Assignment { course, file } => {
            let spec: AssignmentSpec = read_config(&file)?;
            println!("{}", engine.create_assignment(&op, CourseId(course), spec)?.id);
        }
        Command::Calibration(CalibrationCmd::Ingest { course, rubric, archive }) => {
            let bytes = fs::read(&archive).with_context(|| format!("reading {}", archive.display()))?;
            let r = engine.ingest_calibration(&op, CourseId(course), RubricId(rubric), &bytes)?;
            println!("ingested {}, duplicates {}, rejected {}", r.added.len(), r.duplicates.len(), r.rejected.len());
            for (name, why) in &r.rejected {
                println!("rejected {name}: {why}");
            }
        }
        Command::Calibration(CalibrationCmd::Schedule { course, count, mode, students, assignment, seed }) => {
            let seed = seed_or_random(seed);
            let mode = match mode {
                ModeArg::Separate => CalibrationMode::Separate,
                ModeArg::Mixed => CalibrationMode::Mixed,
            };
            let students = students.map(|v| v.into_iter().map(UserId::new).collect());
            let r = engine.schedule_calibration(&op, CourseId(course), students, count, mode, assignment.map(AssignmentId), seed)?;
            println!("user,tasks,shortfall");
            for (u, rep) in &r {
                println!("{u},{},{}", rep.tasks.len(), rep.shortfall);
            }
            println!("seed: {seed}");
        }
        Command::Step { course, assignment, step } => {
            let (course, aid) = (CourseId(course), AssignmentId(assignment));
            match step {
                StepCmd::AllocateReviews { k, seed, json } => {
                    let seed = seed_or_random(seed);
                    let r = engine.run_step(&op, course, aid, Step::AllocateReviews(AllocationOptions::new(k, seed)))?;
                    print_report(&r, Some(seed), json)?;
                }
                StepCmd::SelectSpotChecks { n, seed, json } => {
                    let seed = seed_or_random(seed);
                    let r = engine.run_step(&op, course, aid, Step::SelectSpotChecks { n, seed })?;
                    print_report(&r, Some(seed), json)?;
                }
                StepCmd::FinalizeGrades { out } => {
                    let r = engine.run_step(&op, course, aid, Step::FinalizeGrades)?;
                    let StepReport::FinalizeGrades { rows } = &r else { bail!("unexpected step report") };
                    let path = out.unwrap_or_else(|| cli.data.join(format!("grades-{}-{}.csv", course.0, aid.0)));
                    fs::write(&path, mta_core::engine::grade_rows_csv(rows)?)?;
                    print!("{}", step_summary(&r, None));
                    println!("report: {}", path.display());
                }
            }
        }
        Command::Grades { course, assignment, out } => {
            let csv = engine.export_grades_csv(&op, CourseId(course), AssignmentId(assignment))?;
            write_or_print(out.as_deref(), &csv)?;
        }
        Command::Export { course, out } => {
            let bytes = engine.export_course(&op, CourseId(course))?;
            fs::write(&out, bytes).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", out.display());
        }
        Command::Import { archive } => {
            let bytes = fs::read(&archive).with_context(|| format!("reading {}", archive.display()))?;
            println!("{}", engine.import_course(&op, &bytes)?);
        }
        Command::Serve { addr, users, operator_token, session_hours } => {
            let credentials = StaticUsers::parse(&users).map_err(anyhow::Error::msg)?;
            let config = ApiConfig {
                session_ttl: TimeDelta::hours(session_hours),
                operator_token,
                ..ApiConfig::default()
            };
            let state = AppState::new(engine, credentials, config);
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on {addr}");
            rt.block_on(mta_api::serve(addr, state)).with_context(|| format!("serving on {addr}"))?;
        }
        Command::Simulate(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn print_report(r: &StepReport, seed: Option<u64>, json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(r)?);
    } else {
        print!("{}", step_summary(r, seed));
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
