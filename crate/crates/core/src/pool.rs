//! Supervised/independent pool state machine.
//!
//! Supervised students are promoted once the sum of their most recent grader
//! scores reaches the course threshold. Independent students are demoted by a
//! single low TA evaluation or by a moderation trigger (an upheld flag or a
//! faulted review found during an appeal).

use serde::{Deserialize, Serialize};

use crate::domain::{GraderScore, GraderScoreWindow, Pool, PoolRules, ScoreSource, UserId};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    None,
    Promote,
    Demote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    WindowThreshold,
    LowEvaluation,
    UpheldFlag,
    AppealFault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModerationTrigger {
    UpheldFlag,
    AppealFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Evidence {
    Window(Vec<f64>),
    Score(f64),
    Trigger(ModerationTrigger),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolDecision {
    pub user_id: UserId,
    pub transition: Transition,
    pub cause: Option<Cause>,
    pub evidence: Evidence,
}

impl PoolDecision {
    pub fn none(user_id: UserId, evidence: Evidence) -> Self {
        Self { user_id, transition: Transition::None, cause: None, evidence }
    }

    /// Pool after applying this decision to `from`.
    pub fn apply_to(&self, from: Pool) -> Pool {
        match self.transition {
            Transition::None => from,
            Transition::Promote => Pool::Independent,
            Transition::Demote => Pool::Supervised,
        }
    }
}

/// Whether a window of recent scores meets the promotion rule.
pub fn window_promotes(recent: &[f64], rules: &PoolRules) -> bool {
    recent.len() >= rules.window && recent.iter().sum::<f64>() >= rules.promotion_threshold
}

/// Appends `score` to the window and decides the resulting transition. The
/// caller commits the transition.
pub fn record_grader_score(
    user_id: &UserId,
    pool: Pool,
    window: &mut GraderScoreWindow,
    score: GraderScore,
    rules: &PoolRules,
) -> Result<PoolDecision> {
    let value = score.value;
    let source = score.source;
    window.push(score)?;
    let recent = window.recent(rules.window);

    let decision = match pool {
        Pool::Supervised if window_promotes(&recent, rules) => PoolDecision {
            user_id: user_id.clone(),
            transition: Transition::Promote,
            cause: Some(Cause::WindowThreshold),
            evidence: Evidence::Window(recent),
        },
        Pool::Independent
            if source == ScoreSource::TaEvaluation && value < rules.demotion_threshold =>
        {
            PoolDecision {
                user_id: user_id.clone(),
                transition: Transition::Demote,
                cause: Some(Cause::LowEvaluation),
                evidence: Evidence::Score(value),
            }
        }
        _ => PoolDecision::none(user_id.clone(), Evidence::Score(value)),
    };
    Ok(decision)
}

pub fn apply_moderation_trigger(
    user_id: &UserId,
    pool: Pool,
    trigger: ModerationTrigger,
) -> PoolDecision {
    match pool {
        Pool::Independent => PoolDecision {
            user_id: user_id.clone(),
            transition: Transition::Demote,
            cause: Some(match trigger {
                ModerationTrigger::UpheldFlag => Cause::UpheldFlag,
                ModerationTrigger::AppealFault => Cause::AppealFault,
            }),
            evidence: Evidence::Trigger(trigger),
        },
        Pool::Supervised => PoolDecision::none(user_id.clone(), Evidence::Trigger(trigger)),
    }
}

/// One student's pool state and score history, replayable from inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMachine {
    pub user_id: UserId,
    pub pool: Pool,
    pub window: GraderScoreWindow,
    pub transitions: Vec<PoolDecision>,
}

/// Inputs the machine reacts to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PoolInput {
    Score(GraderScore),
    Trigger(ModerationTrigger),
}

impl PoolMachine {
    pub fn new(user_id: UserId) -> Self {
        Self {
            user_id,
            pool: Pool::Supervised,
            window: GraderScoreWindow::default(),
            transitions: Vec::new(),
        }
    }

    pub fn feed(&mut self, input: PoolInput, rules: &PoolRules) -> Result<PoolDecision> {
        let decision = match input {
            PoolInput::Score(score) => {
                record_grader_score(&self.user_id, self.pool, &mut self.window, score, rules)?
            }
            PoolInput::Trigger(trigger) => apply_moderation_trigger(&self.user_id, self.pool, trigger),
        };
        if decision.transition != Transition::None {
            self.pool = decision.apply_to(self.pool);
            self.transitions.push(decision.clone());
        }
        Ok(decision)
    }

    pub fn replay<'a>(
        user_id: UserId,
        inputs: impl IntoIterator<Item = &'a PoolInput>,
        rules: &PoolRules,
    ) -> Result<Self> {
        let mut m = Self::new(user_id);
        for input in inputs {
            m.feed(input.clone(), rules)?;
        }
        Ok(m)
    }
}
