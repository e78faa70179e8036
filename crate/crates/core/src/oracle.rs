//! Exact minimization of `z_final` on small static instances.
//!
//! Depth-first branch-and-bound over the simulator's decision tree. Nodes
//! are memoized on exact abstract keys and pruned by an admissible lower
//! bound. Deferring is branched on at the configured stages, and the
//! incumbent is seeded from cheaper searches and the built-in heuristics.

use crate::bq::{abstract_state, write_trajectory_header, TrajectoryRecord};
use crate::domain::*;
use crate::heuristics::HeuristicKind;
use crate::sim::{run_episode, Action, Policy, PolicyError, Subject, TaskKind, ActionRecord, DecisionPoint, OrderStatus, Stage, Step, WarehouseState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use thiserror::Error;

pub const DEFAULT_NODE_BUDGET: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance has dynamic arrivals; the oracle handles static instances only")]
    DynamicInstance,
    #[error("instance rejected: {0}")]
    Invalid(String),
    #[error("no complete episode found within the node budget")]
    NoSolution,
    #[error("enumeration exceeded {0} nodes")]
    EnumerationCap(u64),
    #[error("result for {0:?} is not proved optimal")]
    Unproved(String),
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("baseline value at {0} is zero")]
    ZeroBaseline(usize),
    #[error("trajectory replay diverged at step {0}")]
    Replay(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub instance_name: String,
    pub z_star: u64,
    pub trajectory: Vec<ActionRecord>,
    pub nodes_expanded: u64,
    pub proved_optimal: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub node_budget: u64,
    pub memoize: bool,
    pub prune: bool,
    /// Branch on only one of several interchangeable empty stations.
    /// Applied only when every order is assigned before the first event.
    pub station_symmetry: bool,
    /// Stages at which deferring is also branched on.
    pub defer_stages: &'static [Stage],
    /// Seed the incumbent with the defer-free optimum and the built-in
    /// heuristics before searching.
    pub warm_start: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { node_budget: DEFAULT_NODE_BUDGET, memoize: true, prune: true, station_symmetry: true, defer_stages: &Stage::ALL, warm_start: true }
    }
}

/// Admissible bound on the final `z` reachable from `state`.
///
/// Counts the pending return of every tote out of storage, the lift and
/// return of every reserved tote, two moves per uncovered (station, SKU)
/// need of assigned orders, and two moves per (station, SKU) pair that
/// unassigned orders must still create.
pub fn lower_bound(state: &WarehouseState) -> u64 {
    let inst = state.instance();
    let mut bound = state.z_final();
    for t in &inst.totes {
        match state.tote_place(t.id) {
            TotePlace::InStorage(_) if state.tote_bound(t.id).is_some() => bound += 2,
            TotePlace::InStorage(_) => {}
            _ => bound += 1,
        }
    }
    let mut present: Vec<BTreeSet<SkuId>> = Vec::with_capacity(inst.workstations.len());
    for w in &inst.workstations {
        let uncovered = state.uncovered_skus(w.id);
        bound += 2 * uncovered.len() as u64;
        let mut here: BTreeSet<SkuId> = uncovered;
        here.extend(state.station_served(w.id).iter().map(|t| inst.totes[t.index()].sku));
        present.push(here);
    }
    bound + 2 * pending_pairs(state, &present)
}

/// New (station, SKU) pairs that unassigned orders force, over a greedy
/// set of orders with pairwise disjoint SKUs plus SKUs absent everywhere.
fn pending_pairs(state: &WarehouseState, present: &[BTreeSet<SkuId>]) -> u64 {
    let inst = state.instance();
    let mut pending: Vec<(u64, OrderId, Vec<SkuId>)> = inst
        .orders
        .iter()
        .filter(|o| matches!(state.order_status(o.id), OrderStatus::Pending | OrderStatus::NotArrived))
        .map(|o| {
            let skus: Vec<SkuId> = o.lines.iter().map(|l| l.sku).collect();
            let cost = present
                .iter()
                .map(|p| skus.iter().filter(|k| !p.contains(k)).count() as u64)
                .min()
                .unwrap_or(0);
            (cost, o.id, skus)
        })
        .collect();
    pending.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut used: BTreeSet<SkuId> = BTreeSet::new();
    let mut total = 0;
    for (cost, _, skus) in &pending {
        if skus.iter().all(|k| !used.contains(k)) {
            total += cost;
            used.extend(skus.iter().copied());
        }
    }
    let absent: BTreeSet<SkuId> = pending
        .iter()
        .flat_map(|(_, _, skus)| skus.iter().copied())
        .filter(|k| !used.contains(k) && present.iter().all(|p| !p.contains(k)))
        .collect();
    total + absent.len() as u64
}

/// Branching preference: higher is explored first among equal bounds.
fn child_score(dp: &DecisionPoint, index: usize) -> i64 {
    let row = &dp.features[index];
    match dp.stage {
        Stage::OrderAssign => row[4] + row[5],
        Stage::ToteMatch => row[1] * 1_000_000 - row[2],
        Stage::RobotSchedule => -row[1],
    }
}

/// Feasible non-defer candidates, dropping duplicate empty stations.
fn branch_candidates(state: &WarehouseState, dp: &DecisionPoint, symmetric: bool) -> Vec<usize> {
    let mut seen_empty: Vec<u32> = Vec::new();
    dp.feasible()
        .filter(|&(_, a)| match (symmetric, a) {
            (true, Action::Station(s)) if state.station_active(s).is_empty() => {
                let slots = state.instance().workstations[s.index()].slots;
                if seen_empty.contains(&slots) {
                    false
                } else {
                    seen_empty.push(slots);
                    true
                }
            }
            _ => true,
        })
        .map(|(i, _)| i)
        .collect()
}

struct Search {
    opts: SolveOptions,
    symmetric: bool,
    nodes: u64,
    exhausted: bool,
    best: u64,
    best_path: Vec<ActionRecord>,
    memo: HashMap<[u8; 16], u64>,
}

impl Search {
    fn dfs(&mut self, mut state: WarehouseState, path: &mut Vec<ActionRecord>) {
        if self.nodes >= self.opts.node_budget {
            self.exhausted = true;
            return;
        }
        self.nodes += 1;
        let dp = match state.next_decision() {
            Ok(Step::Terminal(m)) => {
                if m.z_final < self.best {
                    self.best = m.z_final;
                    self.best_path = path.clone();
                }
                return;
            }
            Ok(Step::Decision(dp)) => dp,
            Err(_) => return,
        };
        let z = state.z_final();
        if self.opts.prune && lower_bound(&state) >= self.best {
            return;
        }
        if self.opts.memoize {
            let key = abstract_state(&state, &dp).digest();
            match self.memo.get(&key) {
                Some(&seen) if seen <= z => return,
                _ => {
                    self.memo.insert(key, z);
                }
            }
        }
        let mut children: Vec<(u64, i64, usize, WarehouseState)> = Vec::new();
        let mut cands = branch_candidates(&state, &dp, self.symmetric);
        if self.opts.defer_stages.contains(&dp.stage) {
            cands.push(dp.defer_index());
        }
        for i in cands {
            let mut child = state.clone();
            if child.apply_index(i).is_err() {
                continue;
            }
            let lb = match child.next_decision() {
                Ok(_) if child.stalled() => continue,
                Ok(_) if self.opts.prune => lower_bound(&child),
                Ok(_) => 0,
                Err(_) => continue,
            };
            children.push((lb, child_score(&dp, i), i, child));
        }
        children.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        for (lb, _, i, child) in children {
            if self.opts.prune && lb >= self.best {
                continue;
            }
            path.push(ActionRecord {
                stage: dp.stage,
                subject: dp.subject.raw(),
                action: dp.candidates[i],
                clock: dp.clock,
            });
            self.dfs(child, path);
            path.pop();
            if self.exhausted {
                return;
            }
        }
    }
}

/// Runs a deeply recursive search on a thread with a large stack.
fn run_deep<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    std::thread::scope(|scope| {
        std::thread::Builder::new()
            .stack_size(1 << 30)
            .spawn_scoped(scope, f)
            .expect("spawn search thread")
            .join()
            .expect("search thread panicked")
    })
}

pub fn solve_exact(inst: &WarehouseInstance, node_budget: u64) -> Result<OracleResult, OracleError> {
    solve_with(inst, SolveOptions { node_budget, ..SolveOptions::default() })
}

pub fn solve_with(inst: &WarehouseInstance, opts: SolveOptions) -> Result<OracleResult, OracleError> {
    if !inst.is_static() {
        return Err(OracleError::DynamicInstance);
    }
    let root = WarehouseState::reset(inst.clone()).map_err(|e| OracleError::Invalid(e.to_string()))?;
    let slots: u64 = inst.workstations.iter().map(|w| w.slots as u64).sum();
    let (mut best, mut best_path, mut nodes) = (u64::MAX, Vec::new(), 0);
    if opts.warm_start {
        for (z, path) in incumbents(inst, &opts)? {
            if z < best {
                best = z;
                best_path = path;
            }
        }
        if !opts.defer_stages.is_empty() {
            let plain = SolveOptions { defer_stages: &[], warm_start: false, ..opts };
            let r = solve_with(inst, plain)?;
            nodes = r.nodes_expanded;
            if r.z_star < best {
                best = r.z_star;
                best_path = r.trajectory;
            }
        }
    }
    let mut search = Search {
        opts,
        symmetric: opts.station_symmetry && opts.defer_stages.is_empty() && slots >= inst.orders.len() as u64,
        nodes,
        exhausted: false,
        best,
        best_path,
        memo: HashMap::new(),
    };
    run_deep(|| search.dfs(root, &mut Vec::new()));
    if search.best == u64::MAX {
        return Err(OracleError::NoSolution);
    }
    Ok(OracleResult {
        instance_name: inst.name.clone(),
        z_star: search.best,
        trajectory: search.best_path,
        nodes_expanded: search.nodes,
        proved_optimal: !search.exhausted,
    })
}

/// Routes every order through one station and keeps each tote there until
/// no unfinished order needs its SKU.
struct Consolidate {
    station: StationId,
}

impl Policy for Consolidate {
    fn name(&self) -> &str {
        "consolidate"
    }

    fn decide(&mut self, dp: &DecisionPoint, state: &WarehouseState) -> Result<Action, PolicyError> {
        let nearest = |pickup: Location| {
            dp.feasible()
                .min_by_key(|&(_, a)| match a {
                    Action::Robot(r) => (state.travel_ms(state.robot_location(r), pickup), r.0),
                    _ => (u64::MAX, u32::MAX),
                })
                .map_or(Action::Defer, |(_, a)| a)
        };
        Ok(match dp.subject {
            Subject::Order(_) if dp.is_feasible(Action::Station(self.station)) => Action::Station(self.station),
            Subject::Order(_) => Action::Defer,
            Subject::Station(_) => dp.feasible().next().map_or(Action::Defer, |(_, a)| a),
            Subject::Task(k) => {
                let task = *state.task(k).expect("offered task exists");
                let sku = state.instance().totes[task.tote.index()].sku;
                let needed = state.instance().orders.iter().any(|o| {
                    state.order_status(o.id) != OrderStatus::Complete && state.order_open_skus(o.id).any(|k| k == sku)
                });
                if task.kind == TaskKind::Return && needed {
                    Action::Defer
                } else {
                    nearest(task.pickup)
                }
            }
        })
    }
}

fn incumbents(inst: &WarehouseInstance, opts: &SolveOptions) -> Result<Vec<(u64, Vec<ActionRecord>)>, OracleError> {
    let mut policies: Vec<Box<dyn Policy>> = Vec::new();
    if !opts.defer_stages.is_empty() {
        policies.extend(inst.workstations.iter().map(|w| Box::new(Consolidate { station: w.id }) as Box<dyn Policy>));
        policies.extend(HeuristicKind::ALL.iter().map(|k| k.build(None) as Box<dyn Policy>));
    }
    let mut out = Vec::new();
    for mut policy in policies {
        if let Ok(ep) = run_episode(inst.clone(), &mut policy, 0) {
            if ep.actions.iter().all(|a| !a.action.is_defer() || opts.defer_stages.contains(&a.stage)) {
                out.push((ep.metrics.z_final, ep.actions));
            }
        }
    }
    Ok(out)
}

/// Minimum `z_final` by plain enumeration of every action sequence,
/// deferrals included, with no bound, abstraction or symmetry reduction.
/// Identical concrete states reached again at no lower `z` are skipped, as
/// are rounds in which every subject is deferred and nothing happens.
pub fn enumerate_exhaustive(inst: &WarehouseInstance, node_cap: u64) -> Result<u64, OracleError> {
    enumerate_with(inst, &Stage::ALL, node_cap)
}

pub fn enumerate_with(inst: &WarehouseInstance, defer_stages: &[Stage], node_cap: u64) -> Result<u64, OracleError> {
    struct Walk<'a> {
        defer_stages: &'a [Stage],
        nodes: u64,
        cap: u64,
        best: u64,
        seen: HashMap<[u8; 32], u64>,
    }
    impl Walk<'_> {
        fn visit(&mut self, mut state: WarehouseState) -> Result<(), OracleError> {
            self.nodes += 1;
            if self.nodes > self.cap {
                return Err(OracleError::EnumerationCap(self.cap));
            }
            let dp = match state.next_decision() {
                Ok(Step::Terminal(m)) => {
                    self.best = self.best.min(m.z_final);
                    return Ok(());
                }
                Ok(Step::Decision(_)) if state.stalled() => return Ok(()),
                Ok(Step::Decision(dp)) => dp,
                Err(_) => return Ok(()),
            };
            let z = state.z_final();
            match self.seen.get(&state.exact_digest()) {
                Some(&seen) if seen <= z => return Ok(()),
                _ => {
                    self.seen.insert(state.exact_digest(), z);
                }
            }
            let defer = self.defer_stages.contains(&dp.stage);
            for i in (0..dp.len()).filter(|&i| dp.mask[i] && (defer || !dp.candidates[i].is_defer())) {
                let mut child = state.clone();
                if child.apply_index(i).is_ok() {
                    self.visit(child)?;
                }
            }
            Ok(())
        }
    }
    if !inst.is_static() {
        return Err(OracleError::DynamicInstance);
    }
    let root = WarehouseState::reset(inst.clone()).map_err(|e| OracleError::Invalid(e.to_string()))?;
    let mut walk = Walk { defer_stages, nodes: 0, cap: node_cap, best: u64::MAX, seen: HashMap::new() };
    run_deep(|| walk.visit(root))?;
    if walk.best == u64::MAX {
        return Err(OracleError::NoSolution);
    }
    Ok(walk.best)
}

/// Replays `trajectory` from a fresh episode, returning the final state.
pub fn replay(inst: &WarehouseInstance, trajectory: &[ActionRecord]) -> Result<WarehouseState, OracleError> {
    let mut state = WarehouseState::reset(inst.clone()).map_err(|e| OracleError::Invalid(e.to_string()))?;
    for (i, rec) in trajectory.iter().enumerate() {
        match state.next_decision() {
            Ok(Step::Decision(dp)) if dp.stage == rec.stage && dp.subject.raw() == rec.subject => {}
            _ => return Err(OracleError::Replay(i)),
        }
        state.apply_action(rec.action).map_err(|_| OracleError::Replay(i))?;
    }
    match state.next_decision() {
        Ok(Step::Terminal(_)) => Ok(state),
        _ => Err(OracleError::Replay(trajectory.len())),
    }
}

/// Signed mean relative gap in percent: `(1/N) Σ (p − b) / b × 100`.
pub fn average_gap(policy: &[f64], baseline: &[f64]) -> Result<f64, OracleError> {
    if policy.len() != baseline.len() {
        return Err(OracleError::LengthMismatch(policy.len(), baseline.len()));
    }
    if policy.is_empty() {
        return Err(OracleError::Empty);
    }
    if let Some(i) = baseline.iter().position(|&b| b == 0.0) {
        return Err(OracleError::ZeroBaseline(i));
    }
    let sum: f64 = policy.iter().zip(baseline).map(|(p, b)| (p - b) / b).sum();
    Ok(sum / policy.len() as f64 * 100.0)
}

/// Writes every suffix of each optimal trajectory as newline-delimited records.
pub fn export_trajectories(
    items: &[(&WarehouseInstance, &OracleResult)],
    mut out: impl Write,
) -> Result<usize, OracleError> {
    for (_, r) in items {
        if !r.proved_optimal {
            return Err(OracleError::Unproved(r.instance_name.clone()));
        }
    }
    write_trajectory_header(&mut out)?;
    let mut written = 0;
    for (inst, r) in items {
        let mut state = WarehouseState::reset((*inst).clone()).map_err(|e| OracleError::Invalid(e.to_string()))?;
        let mut steps = Vec::with_capacity(r.trajectory.len());
        for (i, rec) in r.trajectory.iter().enumerate() {
            let dp = match state.next_decision() {
                Ok(Step::Decision(dp)) => dp,
                _ => return Err(OracleError::Replay(i)),
            };
            steps.push((abstract_state(&state, &dp), dp.stage, rec.action, dp.candidates.clone()));
            state.apply_action(rec.action).map_err(|_| OracleError::Replay(i))?;
        }
        for start in 0..steps.len() {
            for (step_index, (key, stage, action, candidates)) in steps.iter().enumerate().skip(start) {
                let rec = TrajectoryRecord {
                    abstract_state_key: key.clone(),
                    stage: *stage,
                    action: *action,
                    candidates: candidates.clone(),
                    instance_name: r.instance_name.clone(),
                    step_index,
                    subsequence_start: start,
                };
                writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

// ----- fixtures ------------------------------------------------------------

fn tiny_instance(
    name: &str,
    kind: SystemKind,
    skus: u32,
    orders: Vec<Vec<u32>>,
    tote_skus: &[u32],
    robots: &[u32],
    slots: u32,
    layout: Layout,
    homes: &[Location],
) -> WarehouseInstance {
    let station = Location::new(0, 0, 0);
    WarehouseInstance {
        version: INSTANCE_VERSION.into(),
        name: name.into(),
        kind,
        skus,
        orders: orders
            .into_iter()
            .enumerate()
            .map(|(i, skus)| Order {
                id: OrderId(i as u32),
                lines: skus.into_iter().map(|k| OrderLine { sku: SkuId(k), quantity: 1 }).collect(),
                priority: 0,
                arrival_time: 0.0,
            })
            .collect(),
        totes: tote_skus
            .iter()
            .zip(homes)
            .enumerate()
            .map(|(i, (&k, &home))| Tote {
                id: ToteId(i as u32),
                sku: SkuId(k),
                quantity: 10,
                home,
                place: TotePlace::InStorage(home),
            })
            .collect(),
        robots: robots
            .iter()
            .enumerate()
            .map(|(i, &capacity)| Robot {
                id: RobotId(i as u32),
                capacity,
                position: station,
                load: Vec::new(),
                busy_until: 0.0,
            })
            .collect(),
        workstations: vec![Workstation {
            id: StationId(0),
            position: station,
            slots,
            active_orders: Vec::new(),
            tote_buffer: Vec::new(),
        }],
        layout,
        speed_params: SpeedParams::default(),
    }
}

/// One station with two slots, orders {A, B} and {B}, totes A, B and a spare B.
/// The optimum retrieves A and one B once each: `z* = 4`.
pub fn micro_1() -> WarehouseInstance {
    micro_1_with_slots(2)
}

pub fn micro_1_with_slots(slots: u32) -> WarehouseInstance {
    let layout = Layout { aisles: 1, columns: 4, levels: 1 };
    let homes = [Location::new(0, 1, 0), Location::new(0, 2, 0), Location::new(0, 3, 0)];
    tiny_instance(
        "micro-1",
        SystemKind::MultiTote2D,
        2,
        vec![vec![0, 1], vec![1]],
        &[0, 1, 1],
        &[2],
        slots,
        layout,
        &homes,
    )
}

/// Random static instance with at most 3 orders, 5 totes, 2 robots and one station.
pub fn micro_instance(seed: u64) -> WarehouseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = if rng.gen_bool(0.5) { SystemKind::MultiTote2D } else { SystemKind::RackClimb3D };
    let skus = rng.gen_range(1..=3u32);
    let n_totes = rng.gen_range(skus..=5);
    let mut tote_skus: Vec<u32> = (0..skus).collect();
    while tote_skus.len() < n_totes as usize {
        tote_skus.push(rng.gen_range(0..skus));
    }
    tote_skus.shuffle(&mut rng);
    let n_orders = rng.gen_range(1..=3);
    let orders = (0..n_orders)
        .map(|_| {
            let mut pool: Vec<u32> = (0..skus).collect();
            pool.shuffle(&mut rng);
            pool.truncate(rng.gen_range(1..=skus.min(2)) as usize);
            pool
        })
        .collect();
    let n_robots = rng.gen_range(1..=2);
    let robots: Vec<u32> = (0..n_robots)
        .map(|_| match kind {
            SystemKind::RackClimb3D => 1,
            SystemKind::MultiTote2D => rng.gen_range(2..=3),
        })
        .collect();
    let levels = kind.default_levels().min(2);
    let layout = Layout { aisles: 2, columns: 4, levels };
    let mut cells: Vec<Location> = (0..layout.aisles)
        .flat_map(|a| (1..layout.columns).flat_map(move |c| (0..levels).map(move |l| Location::new(a, c, l))))
        .collect();
    cells.shuffle(&mut rng);
    let slots = rng.gen_range(1..=2);
    tiny_instance(
        &format!("micro-{seed}"),
        kind,
        skus,
        orders,
        &tote_skus,
        &robots,
        slots,
        layout,
        &cells[..n_totes as usize],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_1_fixture_is_valid() {
        validate_instance(&micro_1()).unwrap();
        for seed in 0..50 {
            validate_instance(&micro_instance(seed)).unwrap();
        }
    }

    #[test]
    fn gap_examples() {
        assert!((average_gap(&[103.0], &[100.0]).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(average_gap(&[7.0, 9.0], &[7.0, 9.0]).unwrap(), 0.0);
        assert!(average_gap(&[110.0, 90.0], &[100.0, 100.0]).unwrap().abs() < 1e-12);
        assert!(matches!(average_gap(&[1.0], &[1.0, 2.0]), Err(OracleError::LengthMismatch(1, 2))));
        assert!(matches!(average_gap(&[1.0], &[0.0]), Err(OracleError::ZeroBaseline(0))));
        assert!(matches!(average_gap(&[], &[]), Err(OracleError::Empty)));
    }
}
