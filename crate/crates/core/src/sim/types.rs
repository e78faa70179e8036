use crate::domain::{Location, OrderId, RobotId, StationId, ToteId};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Simulation time in whole milliseconds.
pub type Millis = u64;

pub(crate) fn to_ms(seconds: f64) -> Millis {
    (seconds * 1000.0).round().max(0.0) as Millis
}

pub(crate) fn to_s(ms: Millis) -> f64 {
    ms as f64 / 1000.0
}

/// The three sequential decision stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    OrderAssign,
    ToteMatch,
    RobotSchedule,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::OrderAssign, Stage::ToteMatch, Stage::RobotSchedule];

    pub fn index(self) -> usize {
        match self {
            Stage::OrderAssign => 0,
            Stage::ToteMatch => 1,
            Stage::RobotSchedule => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::OrderAssign => "order_assign",
            Stage::ToteMatch => "tote_match",
            Stage::RobotSchedule => "robot_schedule",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Storage to workstation.
    Retrieval,
    /// Workstation back to the tote's home cell.
    Return,
}

/// A tote movement waiting for (or bound to) a robot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub kind: TaskKind,
    pub tote: ToteId,
    pub station: StationId,
    pub pickup: Location,
    pub drop: Location,
}

/// What a decision point is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Order(OrderId),
    Station(StationId),
    Task(TaskId),
}

impl Subject {
    pub fn raw(self) -> u32 {
        match self {
            Subject::Order(o) => o.0,
            Subject::Station(s) => s.0,
            Subject::Task(t) => t.0,
        }
    }
}

/// A candidate action. `Defer` is offered at every decision point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Defer,
    Station(StationId),
    Tote(ToteId),
    Robot(RobotId),
}

impl Action {
    pub fn is_defer(self) -> bool {
        matches!(self, Action::Defer)
    }
}

/// A pending stage decision.
///
/// Candidates are in canonical order (sorted by their feature rows, entity
/// identity last) with `Defer` as the final entry. `features[i]` holds the
/// raw integer features of `candidates[i]`; the defer row is all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub stage: Stage,
    pub subject: Subject,
    pub candidates: Vec<Action>,
    pub mask: Vec<bool>,
    pub features: Vec<Vec<i64>>,
    /// Simulation seconds.
    pub clock: f64,
}

impl DecisionPoint {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn defer_index(&self) -> usize {
        self.candidates.len() - 1
    }

    pub fn index_of(&self, action: Action) -> Option<usize> {
        self.candidates.iter().position(|&a| a == action)
    }

    pub fn is_feasible(&self, action: Action) -> bool {
        self.index_of(action).is_some_and(|i| self.mask[i])
    }

    /// Feasible non-defer candidates with their indices.
    pub fn feasible(&self) -> impl Iterator<Item = (usize, Action)> + '_ {
        self.candidates
            .iter()
            .enumerate()
            .filter(move |(i, a)| self.mask[*i] && !a.is_defer())
            .map(|(i, a)| (i, *a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub stage: Stage,
    pub subject: u32,
    pub action: Action,
    pub clock: f64,
}

/// One line of the newline-delimited episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub clock: f64,
    pub stage: Stage,
    pub subject: u32,
    pub action: Action,
    pub z_retrievals: u64,
    pub z_returns: u64,
}
