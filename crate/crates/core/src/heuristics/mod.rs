//! Baseline policies: C-SGH, R³ and G³, with the shared assignment kernel.

mod hungarian;

pub use hungarian::{assignment_weight, hungarian_max_weight, AssignmentError};

use crate::domain::{RobotId, StationId, ToteId, TotePlace, WarehouseInstance};
use crate::sim::{Action, DecisionPoint, Millis, Policy, PolicyError, Stage, Subject, Task, TaskKind, WarehouseState};
use std::collections::HashMap;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// What `f_batch` counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchCount {
    #[default]
    Lines,
    Orders,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("alpha and beta must be finite and non-negative")]
    NegativeWeight,
    #[error("alpha + beta must be positive")]
    ZeroWeights,
    #[error("window must be at least 1")]
    ZeroWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsghParams {
    pub alpha: f64,
    /// Per second of travel.
    pub beta: f64,
    pub window: usize,
    #[serde(default)]
    pub batch_count: BatchCount,
}

impl CsghParams {
    /// α = 1, β = 1 / longest travel time, window = twice the put-wall slots.
    pub fn defaults_for(inst: &WarehouseInstance) -> Self {
        let max_travel = inst.max_travel_time();
        let slots: u32 = inst.workstations.iter().map(|w| w.slots).sum();
        Self {
            alpha: 1.0,
            beta: if max_travel > 0.0 { 1.0 / max_travel } else { 0.0 },
            window: (2 * slots as usize).max(1),
            batch_count: BatchCount::Lines,
        }
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) {
            return Err(ParamsError::NegativeWeight);
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(ParamsError::ZeroWeights);
        }
        if self.window == 0 {
            return Err(ParamsError::ZeroWindow);
        }
        Ok(())
    }
}

/// Unsatisfied order lines at `station` that `tote`'s SKU can serve.
pub fn f_batch(state: &WarehouseState, tote: ToteId, station: StationId) -> u32 {
    f_batch_by(state, tote, station, BatchCount::Lines)
}

pub fn f_batch_by(state: &WarehouseState, tote: ToteId, station: StationId, count: BatchCount) -> u32 {
    let sku = state.instance().totes[tote.index()].sku;
    match count {
        BatchCount::Lines => state.station_demand(station, sku),
        BatchCount::Orders => state.station_demand_orders(station, sku),
    }
}

/// `α · f_batch(tote, station) − β · travel(robot, tote)`.
pub fn pair_utility(
    state: &WarehouseState,
    robot: RobotId,
    tote: ToteId,
    station: StationId,
    params: &CsghParams,
) -> f64 {
    let inst = state.instance();
    let at = match state.tote_place(tote) {
        TotePlace::InStorage(loc) => loc,
        TotePlace::AtWorkstation(s) => inst.workstations[s.index()].position,
        TotePlace::OnRobot(r) => state.robot_location(r),
    };
    let travel = inst.travel(state.robot_location(robot), at);
    params.alpha * f_batch_by(state, tote, station, params.batch_count) as f64 - params.beta * travel
}

fn task_of(dp: &DecisionPoint, state: &WarehouseState) -> Task {
    match dp.subject {
        Subject::Task(k) => *state.task(k).expect("subject task is live"),
        other => panic!("robot-schedule subject {other:?}"),
    }
}

fn station_of(dp: &DecisionPoint) -> StationId {
    match dp.subject {
        Subject::Station(s) => s,
        other => panic!("tote-match subject {other:?}"),
    }
}

/// First candidate maximizing `score`; candidates arrive in canonical order.
fn argmax<K: PartialOrd>(dp: &DecisionPoint, mut score: impl FnMut(usize, Action) -> K) -> Action {
    let mut best: Option<(K, Action)> = None;
    for (i, a) in dp.feasible() {
        let k = score(i, a);
        if best.as_ref().is_none_or(|(b, _)| k > *b) {
            best = Some((k, a));
        }
    }
    best.map_or(Action::Defer, |(_, a)| a)
}

fn candidate_id(a: Action) -> i64 {
    match a {
        Action::Defer => i64::MAX,
        Action::Station(s) => s.0 as i64,
        Action::Tote(t) => t.0 as i64,
        Action::Robot(r) => r.0 as i64,
    }
}

/// Nearest assignable robot to the task pickup, lowest id on ties.
fn nearest_robot(dp: &DecisionPoint, state: &WarehouseState, task: &Task) -> Action {
    argmax(dp, |_, a| match a {
        Action::Robot(r) => (-(state.travel_ms(state.robot_location(r), task.pickup) as i64), -(r.0 as i64)),
        _ => (i64::MIN, 0),
    })
}

const ORDER_FEATURE_SLACK: usize = 3;
const ORDER_FEATURE_SERVED: usize = 4;
const ORDER_FEATURE_OVERLAP: usize = 5;
const TOTE_FEATURE_BATCH: usize = 1;
const TOTE_FEATURE_TRAVEL: usize = 2;
const TOTE_FEATURE_ROBOT: usize = 3;

/// Collaborative SKU-group heuristic.
#[derive(Debug, Clone, Default)]
pub struct CsghPolicy {
    params: Option<CsghParams>,
    resolved: Option<(Arc<WarehouseInstance>, CsghParams)>,
    held: HashMap<u32, Millis>,
}

impl CsghPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(params: CsghParams) -> Self {
        Self { params: Some(params), ..Self::default() }
    }

    fn params_for(&mut self, state: &WarehouseState) -> CsghParams {
        if let Some(p) = self.params {
            return p;
        }
        let inst = state.shared_instance();
        match &self.resolved {
            Some((cached, p)) if Arc::ptr_eq(cached, &inst) => *p,
            _ => {
                let p = CsghParams::defaults_for(&inst);
                self.resolved = Some((inst, p));
                p
            }
        }
    }

    /// Releases an order to the best free station, or holds it in the
    /// window while it has no SKU in common with any station or pending order.
    fn order_assign(&mut self, dp: &DecisionPoint, state: &WarehouseState, params: &CsghParams) -> Action {
        let affinity = |row: &[i64]| row[ORDER_FEATURE_SERVED] + row[ORDER_FEATURE_OVERLAP];
        let best = dp
            .feasible()
            .map(|(i, a)| (affinity(&dp.features[i]), dp.features[i][ORDER_FEATURE_SLACK], -candidate_id(a), a))
            .max_by(|x, y| (x.0, x.1, x.2).cmp(&(y.0, y.1, y.2)));
        let Some((aff, _, _, station)) = best else {
            return Action::Defer;
        };
        let Subject::Order(o) = dp.subject else { return station };
        if aff > 0 {
            return station;
        }
        // Let a later order that can join an existing group take the slot first.
        let free: Vec<StationId> = dp
            .feasible()
            .filter_map(|(_, a)| match a {
                Action::Station(s) => Some(s),
                _ => None,
            })
            .collect();
        let joiner = state
            .pending_orders()
            .iter()
            .filter(|&&p| p != o && !state.is_deferred(Stage::OrderAssign, p.0))
            .take(params.window.saturating_sub(1))
            .any(|&p| {
                free.iter().any(|&s| {
                    state.order_open_skus(p).any(|k| {
                        state.station_serves_sku(s, k)
                            || state.station_active(s).iter().any(|&a| state.order_open_skus(a).any(|x| x == k))
                    })
                })
            });
        if joiner {
            return Action::Defer;
        }
        let skus: Vec<_> = state.order_open_skus(o).collect();
        let partner = state
            .pending_orders()
            .iter()
            .any(|&p| p != o && state.order_open_skus(p).any(|k| skus.contains(&k)));
        let later_arrivals = state.arrived_count().saturating_sub(state.arrival_rank(o) + 1) as usize;
        // Offered twice at one instant means the engine has nothing else to advance.
        let stalled = self.held.get(&o.0) == Some(&state.clock_ms());
        if partner || later_arrivals >= params.window || stalled {
            self.held.remove(&o.0);
            return station;
        }
        self.held.insert(o.0, state.clock_ms());
        Action::Defer
    }

    fn robot_schedule(&self, dp: &DecisionPoint, state: &WarehouseState, params: &CsghParams) -> Action {
        let subject = task_of(dp, state);
        let robots: Vec<RobotId> = dp
            .feasible()
            .filter_map(|(_, a)| match a {
                Action::Robot(r) => Some(r),
                _ => None,
            })
            .collect();
        if robots.is_empty() {
            return Action::Defer;
        }
        let tasks: Vec<Task> = state
            .pending_tasks()
            .filter(|t| t.id == subject.id || !state.is_deferred(Stage::RobotSchedule, t.id.0))
            .copied()
            .collect();
        let weights: Vec<Vec<f64>> = robots
            .iter()
            .map(|&r| tasks.iter().map(|t| pair_utility(state, r, t.tote, t.station, params)).collect())
            .collect();
        let pairs = hungarian_max_weight(&weights).expect("finite utilities");
        let col = tasks.iter().position(|t| t.id == subject.id).expect("subject is pending");
        match pairs.iter().find(|&&(_, j)| j == col) {
            Some(&(i, _)) => Action::Robot(robots[i]),
            // Returns are mandatory, and an empty matching would defer forever.
            None if subject.kind == TaskKind::Return || pairs.is_empty() => nearest_robot(dp, state, &subject),
            None => Action::Defer,
        }
    }
}

impl Policy for CsghPolicy {
    fn name(&self) -> &str {
        "csgh"
    }

    fn reset(&mut self, _seed: u64) {
        self.held.clear();
    }

    fn decide(&mut self, dp: &DecisionPoint, state: &WarehouseState) -> Result<Action, PolicyError> {
        let params = self.params_for(state);
        Ok(match dp.stage {
            Stage::OrderAssign => self.order_assign(dp, state, &params),
            Stage::ToteMatch => {
                let s = station_of(dp);
                argmax(dp, |i, a| match a {
                    Action::Tote(t) => (
                        f_batch_by(state, t, s, params.batch_count) as i64,
                        -dp.features[i][TOTE_FEATURE_TRAVEL],
                        -(t.0 as i64),
                    ),
                    _ => (i64::MIN, 0, 0),
                })
            }
            Stage::RobotSchedule => self.robot_schedule(dp, state, &params),
        })
    }
}

/// Robot-first routing heuristic.
#[derive(Debug, Clone, Default)]
pub struct R3Policy;

impl R3Policy {
    pub fn new() -> Self {
        Self
    }
}

impl Policy for R3Policy {
    fn name(&self) -> &str {
        "r3"
    }

    fn decide(&mut self, dp: &DecisionPoint, state: &WarehouseState) -> Result<Action, PolicyError> {
        Ok(match dp.stage {
            Stage::OrderAssign => {
                let inst = state.instance();
                argmax(dp, |_, a| match a {
                    Action::Station(s) => {
                        let pos = inst.workstations[s.index()].position;
                        let near = (0..inst.robots.len())
                            .map(|r| state.travel_ms(state.robot_location(RobotId(r as u32)), pos))
                            .min()
                            .unwrap_or(0);
                        (-(near as i64), -(s.0 as i64))
                    }
                    _ => (i64::MIN, 0),
                })
            }
            Stage::ToteMatch => argmax(dp, |i, a| {
                let row = &dp.features[i];
                let near = if row[TOTE_FEATURE_ROBOT] >= 0 { row[TOTE_FEATURE_ROBOT] } else { row[TOTE_FEATURE_TRAVEL] };
                (-near, -candidate_id(a))
            }),
            Stage::RobotSchedule => {
                let task = task_of(dp, state);
                let pending: Vec<Task> = state
                    .pending_tasks()
                    .filter(|t| t.id == task.id || !state.is_deferred(Stage::RobotSchedule, t.id.0))
                    .copied()
                    .collect();
                // Robots for which the subject is their own nearest pending task.
                let claimed = argmax(dp, |_, a| match a {
                    Action::Robot(r) => {
                        let loc = state.robot_location(r);
                        let d = state.travel_ms(loc, task.pickup);
                        let nearest = pending
                            .iter()
                            .map(|t| (state.travel_ms(loc, t.pickup), t.id))
                            .min()
                            .map(|(_, id)| id);
                        (nearest == Some(task.id), -(d as i64), -(r.0 as i64))
                    }
                    _ => (false, i64::MIN, 0),
                });
                let claimed_ok = match claimed {
                    Action::Robot(r) => {
                        let loc = state.robot_location(r);
                        pending.iter().map(|t| (state.travel_ms(loc, t.pickup), t.id)).min().map(|(_, id)| id)
                            == Some(task.id)
                    }
                    _ => false,
                };
                if claimed_ok {
                    claimed
                } else if pending.first().map(|t| t.id) == Some(task.id) {
                    nearest_robot(dp, state, &task)
                } else {
                    Action::Defer
                }
            }
        })
    }
}

/// Group-based greedy gathering heuristic.
#[derive(Debug, Clone, Default)]
pub struct G3Policy;

impl G3Policy {
    pub fn new() -> Self {
        Self
    }
}

impl Policy for G3Policy {
    fn name(&self) -> &str {
        "g3"
    }

    fn decide(&mut self, dp: &DecisionPoint, state: &WarehouseState) -> Result<Action, PolicyError> {
        Ok(match dp.stage {
            Stage::OrderAssign => argmax(dp, |i, a| {
                let row = &dp.features[i];
                (row[ORDER_FEATURE_OVERLAP], row[ORDER_FEATURE_SLACK], -candidate_id(a))
            }),
            Stage::ToteMatch => argmax(dp, |i, a| (dp.features[i][TOTE_FEATURE_BATCH], -candidate_id(a))),
            Stage::RobotSchedule => nearest_robot(dp, state, &task_of(dp, state)),
        })
    }
}

/// Built-in heuristic selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    Csgh,
    R3,
    G3,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 3] = [HeuristicKind::Csgh, HeuristicKind::R3, HeuristicKind::G3];

    pub fn name(self) -> &'static str {
        match self {
            HeuristicKind::Csgh => "csgh",
            HeuristicKind::R3 => "r3",
            HeuristicKind::G3 => "g3",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn build(self, params: Option<CsghParams>) -> Box<dyn Policy + Send> {
        match self {
            HeuristicKind::Csgh => Box::new(params.map_or_else(CsghPolicy::new, CsghPolicy::with_params)),
            HeuristicKind::R3 => Box::new(R3Policy),
            HeuristicKind::G3 => Box::new(G3Policy),
        }
    }
}
