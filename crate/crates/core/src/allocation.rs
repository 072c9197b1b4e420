//! Reviewer allocation: peer matching within pools, calibration scheduling,
//! spot-check selection, TA workloads and appeal routing.
//!
//! Every randomized operation is a pure function of its inputs and a seed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{AssignmentId, Pool, ReviewId, SubmissionId, UserId};
use crate::error::{Error, Result};
use crate::policy::Registry;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Peer,
    Calibration,
    TaReview,
    TaEvaluation,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanEdge {
    pub grader: UserId,
    pub submission_id: SubmissionId,
    pub kind: EdgeKind,
    #[serde(default)]
    pub review_id: Option<ReviewId>,
    /// Questions covered when a TA review is split by question.
    #[serde(default)]
    pub questions: Option<Vec<String>>,
}

/// Submitted work in one pool, as (author, submission) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMembers {
    pub pool: Pool,
    pub members: Vec<(UserId, SubmissionId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub pool: Pool,
    pub requested: usize,
    pub effective: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewAssignmentPlan {
    pub assignment_id: AssignmentId,
    pub edges: Vec<PlanEdge>,
    pub seed: u64,
    pub degraded: Vec<Degradation>,
    /// Authors alone in their pool: they get calibration work instead and
    /// their submission goes to a TA.
    pub solo: Vec<(UserId, SubmissionId)>,
    /// Event sequence the plan was computed against.
    pub based_on: u64,
}

/// Circular shift over a seeded random permutation: within each pool the
/// author at position `i` reviews positions `i+1..=i+k` (mod n). Pools with
/// `n <= k` degrade to `k' = n - 1`.
pub fn assign_peer_reviews(
    assignment_id: AssignmentId,
    pools: &[PoolMembers],
    k: usize,
    seed: u64,
) -> Result<ReviewAssignmentPlan> {
    if k == 0 {
        return Err(Error::invalid("reviewers per submission must be at least 1"));
    }
    let mut rng = seeded_rng(seed);
    let mut plan = ReviewAssignmentPlan {
        assignment_id,
        edges: Vec::new(),
        seed,
        degraded: Vec::new(),
        solo: Vec::new(),
        based_on: 0,
    };
    for group in pools {
        let mut members = group.members.clone();
        members.sort();
        members.shuffle(&mut rng);
        let n = members.len();
        match n {
            0 => continue,
            1 => {
                plan.solo.push(members[0].clone());
                continue;
            }
            _ => {}
        }
        let effective = if n <= k {
            plan.degraded.push(Degradation { pool: group.pool, requested: k, effective: n - 1 });
            n - 1
        } else {
            k
        };
        for i in 0..n {
            for offset in 1..=effective {
                let target = &members[(i + offset) % n];
                plan.edges.push(PlanEdge {
                    grader: members[i].0.clone(),
                    submission_id: target.1,
                    kind: EdgeKind::Peer,
                    review_id: None,
                    questions: None,
                });
            }
        }
    }
    Ok(plan)
}

/// Checks that peer edges are self-free, within-pool and that every member
/// gives and receives exactly the same number of reviews.
pub fn check_peer_edges(edges: &[PlanEdge], pools: &[PoolMembers]) -> std::result::Result<(), String> {
    let mut pool_of_user = BTreeMap::new();
    let mut pool_of_sub = BTreeMap::new();
    let mut author_of = BTreeMap::new();
    for g in pools {
        for (u, s) in &g.members {
            pool_of_user.insert(u, g.pool);
            pool_of_sub.insert(*s, g.pool);
            author_of.insert(*s, u);
        }
    }
    let mut given: BTreeMap<&UserId, usize> = BTreeMap::new();
    let mut received: BTreeMap<SubmissionId, usize> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for e in edges.iter().filter(|e| e.kind == EdgeKind::Peer) {
        let author = author_of.get(&e.submission_id).ok_or("edge to unknown submission")?;
        if **author == e.grader {
            return Err(format!("{} assigned their own submission", e.grader));
        }
        if pool_of_user.get(&e.grader) != pool_of_sub.get(&e.submission_id) {
            return Err(format!("{} reviews across pools", e.grader));
        }
        if !seen.insert((&e.grader, e.submission_id)) {
            return Err(format!("{} assigned the same submission twice", e.grader));
        }
        *given.entry(&e.grader).or_default() += 1;
        *received.entry(e.submission_id).or_default() += 1;
    }
    for g in pools {
        if g.members.len() < 2 {
            continue;
        }
        let degrees: BTreeSet<usize> = g
            .members
            .iter()
            .flat_map(|(u, s)| {
                [given.get(u).copied().unwrap_or(0), received.get(s).copied().unwrap_or(0)]
            })
            .collect();
        if degrees.len() != 1 {
            return Err(format!("{:?} pool is not regular: degrees {degrees:?}", g.pool));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Labeled as calibration in the student's queue.
    Separate,
    /// Indistinguishable from peer review tasks until submitted.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSchedule {
    pub items: Vec<SubmissionId>,
    pub shortfall: usize,
}

/// Draws up to `count` calibration items the student has not seen yet.
pub fn schedule_calibration(
    corpus: &[SubmissionId],
    seen: &BTreeSet<SubmissionId>,
    count: usize,
    rng: &mut dyn RngCore,
) -> CalibrationSchedule {
    let mut unseen: Vec<SubmissionId> = corpus.iter().copied().filter(|c| !seen.contains(c)).collect();
    unseen.sort();
    unseen.dedup();
    let take = count.min(unseen.len());
    let items = unseen.choose_multiple(rng, take).copied().collect();
    CalibrationSchedule { items, shortfall: count - take }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotCheckCandidate {
    pub submission_id: SubmissionId,
    pub peer_grade: Option<f64>,
}

pub trait SpotCheckPolicy: Send + Sync {
    fn name(&self) -> &str;

    fn select(&self, eligible: &[SpotCheckCandidate], n: usize, rng: &mut dyn RngCore)
        -> Vec<SubmissionId>;
}

/// Uniform sampling without replacement.
#[derive(Debug, Default, Clone, Copy)]
pub struct UniformSpotCheck;

impl SpotCheckPolicy for UniformSpotCheck {
    fn name(&self) -> &str {
        "uniform"
    }

    fn select(
        &self,
        eligible: &[SpotCheckCandidate],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Vec<SubmissionId> {
        let n = n.min(eligible.len());
        index::sample(rng, eligible.len(), n)
            .into_iter()
            .map(|i| eligible[i].submission_id)
            .collect()
    }
}

/// Checks the highest peer grades first; ties are broken at random.
#[derive(Debug, Default, Clone, Copy)]
pub struct HighestGradeSpotCheck;

impl SpotCheckPolicy for HighestGradeSpotCheck {
    fn name(&self) -> &str {
        "highest_grade"
    }

    fn select(
        &self,
        eligible: &[SpotCheckCandidate],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Vec<SubmissionId> {
        let mut ranked: Vec<&SpotCheckCandidate> = eligible.iter().collect();
        ranked.shuffle(rng);
        ranked.sort_by(|a, b| {
            b.peer_grade
                .unwrap_or(f64::NEG_INFINITY)
                .total_cmp(&a.peer_grade.unwrap_or(f64::NEG_INFINITY))
        });
        ranked.into_iter().take(n).map(|c| c.submission_id).collect()
    }
}

pub fn builtin_spot_check() -> Registry<dyn SpotCheckPolicy> {
    let mut r: Registry<dyn SpotCheckPolicy> = Registry::new();
    r.register("uniform", Arc::new(UniformSpotCheck)).expect("fresh registry");
    r.register("highest_grade", Arc::new(HighestGradeSpotCheck)).expect("fresh registry");
    r
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpotCheckSelection {
    pub assignment_id: AssignmentId,
    pub chosen_submission_ids: BTreeSet<SubmissionId>,
    pub policy_name: String,
    pub seed: u64,
}

pub fn select_spot_checks(
    assignment_id: AssignmentId,
    eligible: &[SpotCheckCandidate],
    n: usize,
    seed: u64,
    policy: &dyn SpotCheckPolicy,
) -> SpotCheckSelection {
    let mut sorted = eligible.to_vec();
    sorted.sort_by_key(|c| c.submission_id);
    let mut rng = seeded_rng(seed);
    let chosen = if n == 0 { Vec::new() } else { policy.select(&sorted, n, &mut rng) };
    SpotCheckSelection {
        assignment_id,
        chosen_submission_ids: chosen.into_iter().collect(),
        policy_name: policy.name().to_string(),
        seed,
    }
}

/// Picks one TA per task.
pub trait TaAssignmentPolicy: Send + Sync {
    fn name(&self) -> &str;

    fn assign(&self, tasks: usize, tas: &[UserId], rng: &mut dyn RngCore) -> Vec<UserId>;
}

/// Round-robin over a shuffled TA order, applied to tasks in shuffled order.
#[derive(Debug, Default, Clone, Copy)]
pub struct RoundRobin;

impl TaAssignmentPolicy for RoundRobin {
    fn name(&self) -> &str {
        "round_robin"
    }

    fn assign(&self, tasks: usize, tas: &[UserId], rng: &mut dyn RngCore) -> Vec<UserId> {
        let mut order: Vec<usize> = (0..tasks).collect();
        order.shuffle(rng);
        let mut ta_order = tas.to_vec();
        ta_order.sort();
        ta_order.shuffle(rng);
        let mut out = vec![UserId::new(""); tasks];
        for (slot, task) in order.into_iter().enumerate() {
            out[task] = ta_order[slot % ta_order.len()].clone();
        }
        out
    }
}

pub fn builtin_ta_assignment() -> Registry<dyn TaAssignmentPolicy> {
    let mut r: Registry<dyn TaAssignmentPolicy> = Registry::new();
    r.register("round_robin", Arc::new(RoundRobin)).expect("fresh registry");
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaAssignment<T> {
    pub task: T,
    pub ta: UserId,
    /// `None` means the whole rubric.
    pub questions: Option<Vec<String>>,
}

/// Distributes TA work. With a per-question split every task becomes one
/// sub-task per TA named in the split, each covering only that TA's
/// questions.
pub fn assign_ta_tasks<T: Clone>(
    tasks: &[T],
    tas: &[UserId],
    split: Option<&BTreeMap<String, UserId>>,
    rubric_questions: &[String],
    policy: &dyn TaAssignmentPolicy,
    rng: &mut dyn RngCore,
) -> Result<Vec<TaAssignment<T>>> {
    if tas.is_empty() {
        return Err(Error::invalid("no TAs available"));
    }
    match split {
        None => {
            let picks = policy.assign(tasks.len(), tas, rng);
            Ok(tasks
                .iter()
                .cloned()
                .zip(picks)
                .map(|(task, ta)| TaAssignment { task, ta, questions: None })
                .collect())
        }
        Some(split) => {
            for q in rubric_questions {
                if !split.contains_key(q) {
                    return Err(Error::invalid(format!("split leaves question {q} unassigned")));
                }
            }
            if let Some(extra) = split.keys().find(|q| !rubric_questions.contains(q)) {
                return Err(Error::invalid(format!("split names unknown question {extra}")));
            }
            let mut by_ta: BTreeMap<&UserId, Vec<String>> = BTreeMap::new();
            for q in rubric_questions {
                by_ta.entry(&split[q]).or_default().push(q.clone());
            }
            Ok(tasks
                .iter()
                .flat_map(|task| {
                    by_ta.iter().map(move |(ta, qs)| TaAssignment {
                        task: task.clone(),
                        ta: (*ta).clone(),
                        questions: Some(qs.clone()),
                    })
                })
                .collect())
        }
    }
}

/// Sends an appeal to the TA with the fewest open appeals; ties are broken
/// by a seeded uniform draw.
pub fn route_appeal(open_loads: &BTreeMap<UserId, usize>, tas: &[UserId], seed: u64) -> Result<UserId> {
    if tas.is_empty() {
        return Err(Error::invalid("no TAs available"));
    }
    let load = |t: &UserId| open_loads.get(t).copied().unwrap_or(0);
    let min = tas.iter().map(load).min().expect("nonempty");
    let mut tied: Vec<&UserId> = tas.iter().filter(|t| load(t) == min).collect();
    tied.sort();
    tied.dedup();
    let mut rng = seeded_rng(seed);
    Ok((*tied.choose(&mut rng).expect("nonempty")).clone())
}
