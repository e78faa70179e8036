use super::event::{Event, EventKind, EventQueue, Rank};
use super::types::*;
use crate::domain::{
    validate_instance, Location, MetricsReport, OrderId, RobotId, SkuId, StationId, ToteId,
    TotePlace, Violation, WarehouseInstance,
};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::{Arc, OnceLock};
use thiserror::Error;

/// Consecutive zero-progress re-offers of deferred subjects tolerated
/// before the engine reports a livelock.
const MAX_STALLS: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("instance rejected: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidInstance(Vec<Violation>),
    #[error("deadlock at t={clock}s, starved stage {stage}: {detail}")]
    Deadlock { clock: f64, stage: Stage, detail: String },
    #[error("livelock at t={clock}s: every offered subject keeps being deferred")]
    Livelock { clock: f64 },
    #[error("no decision is pending")]
    NoPendingDecision,
    #[error("action {action:?} is not feasible at the pending {stage} decision")]
    InfeasibleAction { stage: Stage, action: Action },
    #[error("candidate index {index} out of range ({len} candidates)")]
    IndexOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrderStatus {
    NotArrived,
    Pending,
    Assigned(StationId),
    Complete,
}

#[derive(Debug, Clone)]
struct OrderState {
    status: OrderStatus,
    picked: Vec<bool>,
    queued: Vec<bool>,
}

#[derive(Debug, Clone)]
struct ToteState {
    place: TotePlace,
    /// Station this tote is currently serving; cleared once its return is committed.
    bound: Option<StationId>,
    task: Option<TaskId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct PickJob {
    order: OrderId,
    line: usize,
    tote: ToteId,
}

#[derive(Debug, Clone)]
struct StationState {
    active: Vec<OrderId>,
    buffer: Vec<ToteId>,
    bound: Vec<ToteId>,
    queue: VecDeque<PickJob>,
    picking: Option<(PickJob, Millis)>,
}

#[derive(Debug, Clone, Copy)]
struct Stop {
    task: Task,
    lift: bool,
    location: Location,
    time: Millis,
}

#[derive(Debug, Clone)]
struct RobotState {
    location: Location,
    load: Vec<ToteId>,
    plan: Vec<TaskId>,
    trip: Option<Vec<Stop>>,
    next_stop: usize,
    busy_until: Millis,
}

/// Per-instance lookups shared by every state of an episode.
#[derive(Debug)]
pub(crate) struct StaticIndex {
    pub sku_totes: Vec<Vec<ToteId>>,
    pub arrival_rank: Vec<u32>,
    pub pick_ms: Millis,
    pub load_ms: Millis,
    station_at: HashMap<Location, StationId>,
    home_of: HashMap<Location, ToteId>,
    fingerprint: OnceLock<[u8; 32]>,
}

impl StaticIndex {
    fn build(inst: &WarehouseInstance) -> Self {
        let mut sku_totes = vec![Vec::new(); inst.skus as usize];
        for t in &inst.totes {
            sku_totes[t.sku.index()].push(t.id);
        }
        let mut by_arrival: Vec<&crate::domain::Order> = inst.orders.iter().collect();
        by_arrival.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time).then(a.id.cmp(&b.id)));
        let mut arrival_rank = vec![0; inst.orders.len()];
        for (rank, o) in by_arrival.iter().enumerate() {
            arrival_rank[o.id.index()] = rank as u32;
        }
        let mut station_at = HashMap::new();
        for w in inst.workstations.iter().rev() {
            station_at.insert(w.position, w.id);
        }
        let home_of = inst.totes.iter().map(|t| (t.home, t.id)).collect();
        Self {
            sku_totes,
            arrival_rank,
            pick_ms: to_ms(inst.speed_params.pick_s_per_line),
            load_ms: to_ms(inst.speed_params.load_s_per_tote),
            station_at,
            home_of,
            fingerprint: OnceLock::new(),
        }
    }
}

/// Result of advancing the engine to the next point of interest.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Decision(DecisionPoint),
    Terminal(MetricsReport),
}

/// Mutable simulation state of one episode.
///
/// The engine is driven by alternating [`WarehouseState::next_decision`]
/// and [`WarehouseState::apply_action`]. Cloning is cheap enough for tree
/// search on small instances.
#[derive(Debug, Clone)]
pub struct WarehouseState {
    inst: Arc<WarehouseInstance>,
    index: Arc<StaticIndex>,
    clock: Millis,
    orders: Vec<OrderState>,
    pending_orders: Vec<OrderId>,
    arrived: u32,
    totes: Vec<ToteState>,
    robots: Vec<RobotState>,
    stations: Vec<StationState>,
    tasks: BTreeMap<TaskId, Task>,
    pool: Vec<TaskId>,
    next_task: u32,
    events: EventQueue,
    deferred: BTreeSet<(Stage, u32)>,
    current: Option<DecisionPoint>,
    z_retrievals: u64,
    z_returns: u64,
    decisions: [u64; 3],
    progress: bool,
    stalls: u32,
    gamma: f64,
    terminal: Option<MetricsReport>,
}

impl WarehouseState {
    /// Starts an episode: clock 0, every tote at home, robots at their
    /// depots and counters 0. Orders arriving at time 0 are already pending;
    /// later arrivals are queued.
    pub fn reset(inst: WarehouseInstance) -> Result<Self, SimError> {
        Self::reset_shared(Arc::new(inst))
    }

    pub fn reset_shared(inst: Arc<WarehouseInstance>) -> Result<Self, SimError> {
        validate_instance(&inst).map_err(SimError::InvalidInstance)?;
        Ok(Self::reset_unchecked(inst))
    }

    pub(crate) fn reset_unchecked(inst: Arc<WarehouseInstance>) -> Self {
        let index = Arc::new(StaticIndex::build(&inst));
        let mut events = EventQueue::default();
        for o in &inst.orders {
            events.push(to_ms(o.arrival_time), Rank::Arrival, o.id.0, 0, EventKind::Arrival(o.id));
        }
        let orders = inst
            .orders
            .iter()
            .map(|o| OrderState {
                status: OrderStatus::NotArrived,
                picked: vec![false; o.lines.len()],
                queued: vec![false; o.lines.len()],
            })
            .collect();
        let totes = inst
            .totes
            .iter()
            .map(|t| ToteState { place: TotePlace::InStorage(t.home), bound: None, task: None })
            .collect();
        let robots = inst
            .robots
            .iter()
            .map(|r| RobotState {
                location: r.position,
                load: Vec::new(),
                plan: Vec::new(),
                trip: None,
                next_stop: 0,
                busy_until: 0,
            })
            .collect();
        let stations = inst
            .workstations
            .iter()
            .map(|_| StationState {
                active: Vec::new(),
                buffer: Vec::new(),
                bound: Vec::new(),
                queue: VecDeque::new(),
                picking: None,
            })
            .collect();
        let mut state = Self {
            inst,
            index,
            clock: 0,
            orders,
            pending_orders: Vec::new(),
            arrived: 0,
            totes,
            robots,
            stations,
            tasks: BTreeMap::new(),
            pool: Vec::new(),
            next_task: 0,
            events,
            deferred: BTreeSet::new(),
            current: None,
            z_retrievals: 0,
            z_returns: 0,
            decisions: [0; 3],
            progress: false,
            stalls: 0,
            gamma: 1.0,
            terminal: None,
        };
        while let Some(ev) = state.events.pop_at(0) {
            state.process(ev.kind);
        }
        state
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    // ----- read access -------------------------------------------------

    pub fn instance(&self) -> &WarehouseInstance {
        &self.inst
    }

    pub fn shared_instance(&self) -> Arc<WarehouseInstance> {
        Arc::clone(&self.inst)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn clock(&self) -> f64 {
        to_s(self.clock)
    }

    pub fn clock_ms(&self) -> Millis {
        self.clock
    }

    pub fn z_retrievals(&self) -> u64 {
        self.z_retrievals
    }

    pub fn z_returns(&self) -> u64 {
        self.z_returns
    }

    pub fn z_final(&self) -> u64 {
        self.z_retrievals + self.z_returns
    }

    pub fn decisions(&self) -> [u64; 3] {
        self.decisions
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    pub fn pending_decision(&self) -> Option<&DecisionPoint> {
        self.current.as_ref()
    }

    pub fn order_status(&self, o: OrderId) -> OrderStatus {
        self.orders[o.index()].status
    }

    pub fn pending_orders(&self) -> &[OrderId] {
        &self.pending_orders
    }

    /// Orders that have arrived so far.
    pub fn arrived_count(&self) -> u32 {
        self.arrived
    }

    pub fn arrival_rank(&self, o: OrderId) -> u32 {
        self.index.arrival_rank[o.index()]
    }

    /// SKUs of `o` not yet picked.
    pub fn order_open_skus(&self, o: OrderId) -> impl Iterator<Item = SkuId> + '_ {
        let state = &self.orders[o.index()];
        self.inst.orders[o.index()]
            .lines
            .iter()
            .zip(&state.picked)
            .filter(|(_, picked)| !**picked)
            .map(|(l, _)| l.sku)
    }

    pub fn station_active(&self, s: StationId) -> &[OrderId] {
        &self.stations[s.index()].active
    }

    pub fn station_buffer(&self, s: StationId) -> &[ToteId] {
        &self.stations[s.index()].buffer
    }

    pub fn station_slack(&self, s: StationId) -> u32 {
        self.inst.workstations[s.index()].slots - self.stations[s.index()].active.len() as u32
    }

    /// Totes currently serving station `s` (inbound, or buffered without a committed return).
    pub fn station_served(&self, s: StationId) -> &[ToteId] {
        &self.stations[s.index()].bound
    }

    pub fn station_serves_sku(&self, s: StationId, sku: SkuId) -> bool {
        self.stations[s.index()]
            .bound
            .iter()
            .any(|t| self.inst.totes[t.index()].sku == sku)
    }

    /// Unpicked order lines for `sku` among the orders active at `s`.
    pub fn station_demand(&self, s: StationId, sku: SkuId) -> u32 {
        self.stations[s.index()]
            .active
            .iter()
            .map(|&o| self.order_open_skus(o).filter(|&k| k == sku).count() as u32)
            .sum()
    }

    /// Orders active at `s` with an unpicked line for `sku`.
    pub fn station_demand_orders(&self, s: StationId, sku: SkuId) -> u32 {
        self.stations[s.index()]
            .active
            .iter()
            .filter(|&&o| self.order_open_skus(o).any(|k| k == sku))
            .count() as u32
    }

    /// SKUs needed at `s` that no tote is serving yet.
    pub fn uncovered_skus(&self, s: StationId) -> BTreeSet<SkuId> {
        let st = &self.stations[s.index()];
        let mut need: BTreeSet<SkuId> = st.active.iter().flat_map(|&o| self.order_open_skus(o)).collect();
        for t in &st.bound {
            need.remove(&self.inst.totes[t.index()].sku);
        }
        need
    }

    pub fn tote_place(&self, t: ToteId) -> TotePlace {
        self.totes[t.index()].place
    }

    pub fn tote_bound(&self, t: ToteId) -> Option<StationId> {
        self.totes[t.index()].bound
    }

    /// In storage and not reserved by any task.
    pub fn tote_available(&self, t: ToteId) -> bool {
        let st = &self.totes[t.index()];
        matches!(st.place, TotePlace::InStorage(_)) && st.bound.is_none() && st.task.is_none()
    }

    pub fn robot_location(&self, r: RobotId) -> Location {
        self.robots[r.index()].location
    }

    pub fn robot_at_rest(&self, r: RobotId) -> bool {
        self.robots[r.index()].trip.is_none()
    }

    pub fn robot_busy_until(&self, r: RobotId) -> f64 {
        to_s(self.robots[r.index()].busy_until)
    }

    pub fn robot_load(&self, r: RobotId) -> &[ToteId] {
        &self.robots[r.index()].load
    }

    pub fn robot_plan(&self, r: RobotId) -> &[TaskId] {
        &self.robots[r.index()].plan
    }

    /// Remaining carry slots for tasks added before the next departure.
    pub fn robot_slack(&self, r: RobotId) -> u32 {
        let rs = &self.robots[r.index()];
        let cap = self.inst.robots[r.index()].capacity as usize;
        cap.saturating_sub(rs.plan.len() + rs.load.len()) as u32
    }

    /// Can take another task during the current decision epoch.
    pub fn robot_assignable(&self, r: RobotId) -> bool {
        self.robot_at_rest(r) && self.robot_slack(r) > 0
    }

    pub fn task(&self, k: TaskId) -> Option<&Task> {
        self.tasks.get(&k)
    }

    /// Unassigned tasks in creation order.
    pub fn pending_tasks(&self) -> impl Iterator<Item = &Task> + '_ {
        self.pool.iter().map(move |k| &self.tasks[k])
    }

    /// Digest of the complete dynamic state with times taken relative to
    /// the clock, task ids replaced by their rank among live tasks, and the
    /// decision counters ignored. On static instances equal digests mean the
    /// same remaining moves under the same actions.
    pub fn exact_digest(&self) -> [u8; 32] {
        struct Sink(Sha256);
        impl Hasher for Sink {
            fn write(&mut self, bytes: &[u8]) {
                self.0.update(bytes);
            }
            fn finish(&self) -> u64 {
                0
            }
        }
        let rank: HashMap<TaskId, u32> = self.tasks.keys().enumerate().map(|(i, &k)| (k, i as u32)).collect();
        let task = |k: TaskId| rank.get(&k).copied().unwrap_or(u32::MAX);
        let rel = |t: Millis| t as i64 - self.clock as i64;
        let h = &mut Sink(Sha256::new());
        for o in &self.orders {
            (o.status, &o.picked, &o.queued).hash(h);
        }
        (&self.pending_orders, self.arrived).hash(h);
        for t in &self.totes {
            (t.place, t.bound, t.task.map(task)).hash(h);
        }
        for r in &self.robots {
            (r.location, &r.load, r.next_stop, r.busy_until.saturating_sub(self.clock)).hash(h);
            r.plan.iter().map(|&k| task(k)).for_each(|k| k.hash(h));
            if let Some(trip) = &r.trip {
                trip.len().hash(h);
                for s in trip {
                    (task(s.task.id), s.task.kind, s.task.tote, s.task.station, s.task.pickup, s.task.drop).hash(h);
                    (s.lift, s.location, rel(s.time)).hash(h);
                }
            }
            u8::MAX.hash(h);
        }
        for st in &self.stations {
            (&st.active, &st.buffer, &st.bound, &st.queue, st.picking.map(|(j, t)| (j, rel(t)))).hash(h);
        }
        for t in self.tasks.values() {
            (t.kind, t.tote, t.station, t.pickup, t.drop).hash(h);
        }
        self.pool.iter().map(|&k| task(k)).for_each(|k| k.hash(h));
        u8::MAX.hash(h);
        let mut events: Vec<&Event> = self.events.iter().collect();
        events.sort();
        for e in events {
            (rel(e.time), e.rank, e.entity, e.sub, e.kind).hash(h);
        }
        u8::MAX.hash(h);
        for &(stage, subject) in &self.deferred {
            let subject = if stage == Stage::RobotSchedule { task(TaskId(subject)) } else { subject };
            (stage, subject).hash(h);
        }
        (self.z_retrievals, self.z_returns, self.progress).hash(h);
        h.0.clone().finalize().into()
    }

    /// True when the current decision point re-offers subjects after a
    /// round in which everything was deferred and nothing else happened.
    /// Such a state repeats one already visited on the same trajectory.
    pub fn stalled(&self) -> bool {
        self.stalls > 0
    }

    pub fn is_deferred(&self, stage: Stage, subject: u32) -> bool {
        self.deferred.contains(&(stage, subject))
    }

    pub fn travel_ms(&self, a: Location, b: Location) -> Millis {
        to_ms(self.inst.travel(a, b))
    }

    /// Travel from the nearest robot at rest to `to`, if any robot is at rest.
    pub fn nearest_rest_robot_ms(&self, to: Location) -> Option<Millis> {
        self.robots
            .iter()
            .filter(|r| r.trip.is_none())
            .map(|r| self.travel_ms(r.location, to))
            .min()
    }

    // ----- stepping ----------------------------------------------------

    /// Advances the event queue until a decision is required or the episode ends.
    pub fn next_decision(&mut self) -> Result<Step, SimError> {
        loop {
            if let Some(m) = &self.terminal {
                return Ok(Step::Terminal(m.clone()));
            }
            if let Some(dp) = &self.current {
                return Ok(Step::Decision(dp.clone()));
            }
            if let Some(dp) = self.generate_decision() {
                self.current = Some(dp.clone());
                return Ok(Step::Decision(dp));
            }
            self.dispatch_robots();
            if let Some(t) = self.events.peek_time() {
                self.clock = t;
                while let Some(ev) = self.events.pop_at(t) {
                    self.process(ev.kind);
                }
                self.deferred.clear();
                self.progress = false;
                self.stalls = 0;
                continue;
            }
            if self.all_done() {
                let m = MetricsReport::new(self.z_retrievals, self.z_returns, to_s(self.clock), 0.0, self.decisions);
                self.terminal = Some(m.clone());
                return Ok(Step::Terminal(m));
            }
            if !self.deferred.is_empty() {
                if self.progress {
                    self.stalls = 0;
                } else {
                    self.stalls += 1;
                    if self.stalls > MAX_STALLS {
                        return Err(SimError::Livelock { clock: to_s(self.clock) });
                    }
                }
                self.deferred.clear();
                self.progress = false;
                continue;
            }
            return Err(self.diagnose_deadlock());
        }
    }

    /// Applies `action` to the pending decision point.
    pub fn apply_action(&mut self, action: Action) -> Result<(), SimError> {
        let dp = self.current.as_ref().ok_or(SimError::NoPendingDecision)?;
        if !dp.is_feasible(action) {
            return Err(SimError::InfeasibleAction { stage: dp.stage, action });
        }
        let dp = self.current.take().expect("checked above");
        self.decisions[dp.stage.index()] += 1;
        match (dp.subject, action) {
            (subject, Action::Defer) => {
                self.deferred.insert((dp.stage, subject.raw()));
            }
            (Subject::Order(o), Action::Station(s)) => self.assign_order(o, s),
            (Subject::Station(s), Action::Tote(t)) => self.match_tote(s, t),
            (Subject::Task(k), Action::Robot(r)) => self.schedule_task(k, r),
            (subject, action) => unreachable!("mask admitted {action:?} for {subject:?}"),
        }
        if !action.is_defer() {
            self.progress = true;
        }
        Ok(())
    }

    /// Applies the candidate at `index` of the pending decision point.
    pub fn apply_index(&mut self, index: usize) -> Result<Action, SimError> {
        let dp = self.current.as_ref().ok_or(SimError::NoPendingDecision)?;
        let action = *dp
            .candidates
            .get(index)
            .ok_or(SimError::IndexOutOfRange { index, len: dp.len() })?;
        self.apply_action(action)?;
        Ok(action)
    }

    fn assign_order(&mut self, o: OrderId, s: StationId) {
        self.orders[o.index()].status = OrderStatus::Assigned(s);
        self.pending_orders.retain(|&p| p != o);
        self.stations[s.index()].active.push(o);
        // Reuse totes already serving this station, reclaiming any whose return is still unassigned.
        let skus: Vec<SkuId> = self.order_open_skus(o).collect();
        for sku in skus {
            let Some(&t) = self.stations[s.index()]
                .bound
                .iter()
                .find(|t| self.inst.totes[t.index()].sku == sku)
            else {
                continue;
            };
            if self.totes[t.index()].place == TotePlace::AtWorkstation(s) {
                if let Some(k) = self.totes[t.index()].task {
                    if self.tasks[&k].kind == TaskKind::Return {
                        self.pool.retain(|&p| p != k);
                        self.tasks.remove(&k);
                        self.totes[t.index()].task = None;
                    }
                }
                self.queue_picks(s, t);
            }
        }
        self.start_pick(s);
    }

    fn match_tote(&mut self, s: StationId, t: ToteId) {
        let tote = &self.inst.totes[t.index()];
        let task = Task {
            id: TaskId(self.next_task),
            kind: TaskKind::Retrieval,
            tote: t,
            station: s,
            pickup: tote.home,
            drop: self.inst.workstations[s.index()].position,
        };
        self.next_task += 1;
        self.tasks.insert(task.id, task);
        self.pool.push(task.id);
        let ts = &mut self.totes[t.index()];
        ts.bound = Some(s);
        ts.task = Some(task.id);
        self.stations[s.index()].bound.push(t);
    }

    fn schedule_task(&mut self, k: TaskId, r: RobotId) {
        self.pool.retain(|&p| p != k);
        self.robots[r.index()].plan.push(k);
        let task = self.tasks[&k];
        if task.kind == TaskKind::Return {
            self.totes[task.tote.index()].bound = None;
            self.stations[task.station.index()].bound.retain(|&t| t != task.tote);
        }
    }

    fn new_return(&mut self, s: StationId, t: ToteId) {
        let task = Task {
            id: TaskId(self.next_task),
            kind: TaskKind::Return,
            tote: t,
            station: s,
            pickup: self.inst.workstations[s.index()].position,
            drop: self.inst.totes[t.index()].home,
        };
        self.next_task += 1;
        self.tasks.insert(task.id, task);
        self.pool.push(task.id);
        self.totes[t.index()].task = Some(task.id);
    }

    fn queue_picks(&mut self, s: StationId, t: ToteId) {
        let sku = self.inst.totes[t.index()].sku;
        let active = self.stations[s.index()].active.clone();
        for o in active {
            let lines = &self.inst.orders[o.index()].lines;
            for (i, line) in lines.iter().enumerate() {
                let st = &mut self.orders[o.index()];
                if line.sku == sku && !st.picked[i] && !st.queued[i] {
                    st.queued[i] = true;
                    self.stations[s.index()].queue.push_back(PickJob { order: o, line: i, tote: t });
                }
            }
        }
    }

    fn start_pick(&mut self, s: StationId) {
        let st = &mut self.stations[s.index()];
        if st.picking.is_some() {
            return;
        }
        if let Some(job) = st.queue.pop_front() {
            let done = self.clock + self.index.pick_ms;
            st.picking = Some((job, done));
            self.events.push(done, Rank::Pick, s.0, 0, EventKind::PickDone(s));
        }
    }

    fn check_returns(&mut self, s: StationId) {
        let buffer = self.stations[s.index()].buffer.clone();
        for t in buffer {
            let ts = &self.totes[t.index()];
            if ts.bound != Some(s) || ts.task.is_some() {
                continue;
            }
            let sku = self.inst.totes[t.index()].sku;
            if self.station_demand(s, sku) == 0 {
                self.new_return(s, t);
            }
        }
    }

    fn dispatch_robots(&mut self) {
        let load = self.index.load_ms;
        for r in 0..self.robots.len() {
            if self.robots[r].trip.is_some() || self.robots[r].plan.is_empty() {
                continue;
            }
            let plan = std::mem::take(&mut self.robots[r].plan);
            let tasks: Vec<Task> = plan.iter().map(|k| self.tasks[k]).collect();
            let mut stops = Vec::with_capacity(tasks.len() * 2);
            let mut at = self.robots[r].location;
            let mut time = self.clock;
            for (lift, task) in tasks.iter().map(|t| (true, t)).chain(tasks.iter().map(|t| (false, t))) {
                let location = if lift { task.pickup } else { task.drop };
                time += self.travel_ms(at, location) + load;
                at = location;
                stops.push(Stop { task: *task, lift, location, time });
            }
            let robot = RobotId(r as u32);
            for (i, stop) in stops.iter().enumerate() {
                let rank = if !stop.lift && stop.task.kind == TaskKind::Return {
                    Rank::Store
                } else {
                    Rank::Handling
                };
                self.events.push(
                    stop.time,
                    rank,
                    stop.task.tote.0,
                    if stop.lift { 0 } else { 1 },
                    EventKind::Stop { robot, index: i },
                );
            }
            self.events.push(time, Rank::RobotFree, robot.0, 0, EventKind::RobotFree(robot));
            let rs = &mut self.robots[r];
            rs.trip = Some(stops);
            rs.next_stop = 0;
            rs.busy_until = time;
        }
    }

    fn process(&mut self, kind: EventKind) {
        match kind {
            EventKind::Arrival(o) => {
                self.orders[o.index()].status = OrderStatus::Pending;
                self.arrived += 1;
                let rank = self.index.arrival_rank[o.index()];
                let pos = self
                    .pending_orders
                    .partition_point(|p| self.index.arrival_rank[p.index()] < rank);
                self.pending_orders.insert(pos, o);
            }
            EventKind::Stop { robot, index } => self.process_stop(robot, index),
            EventKind::PickDone(s) => {
                let (job, _) = self.stations[s.index()].picking.take().expect("pick in progress");
                let st = &mut self.orders[job.order.index()];
                st.picked[job.line] = true;
                if st.picked.iter().all(|&p| p) {
                    st.status = OrderStatus::Complete;
                    self.stations[s.index()].active.retain(|&o| o != job.order);
                }
                self.start_pick(s);
                self.check_returns(s);
            }
            EventKind::RobotFree(r) => {
                let rs = &mut self.robots[r.index()];
                rs.trip = None;
                rs.next_stop = 0;
            }
        }
    }

    fn process_stop(&mut self, r: RobotId, index: usize) {
        let stop = self.robots[r.index()].trip.as_ref().expect("robot on a trip")[index];
        let rs = &mut self.robots[r.index()];
        rs.location = stop.location;
        rs.next_stop = index + 1;
        let t = stop.task.tote;
        let s = stop.task.station;
        match (stop.task.kind, stop.lift) {
            (TaskKind::Retrieval, true) => {
                self.totes[t.index()].place = TotePlace::OnRobot(r);
                self.robots[r.index()].load.push(t);
                self.z_retrievals += 1;
            }
            (TaskKind::Return, true) => {
                self.stations[s.index()].buffer.retain(|&b| b != t);
                self.totes[t.index()].place = TotePlace::OnRobot(r);
                self.robots[r.index()].load.push(t);
            }
            (TaskKind::Retrieval, false) => {
                self.robots[r.index()].load.retain(|&l| l != t);
                self.totes[t.index()].place = TotePlace::AtWorkstation(s);
                self.totes[t.index()].task = None;
                self.tasks.remove(&stop.task.id);
                self.stations[s.index()].buffer.push(t);
                self.queue_picks(s, t);
                self.start_pick(s);
                self.check_returns(s);
            }
            (TaskKind::Return, false) => {
                self.robots[r.index()].load.retain(|&l| l != t);
                self.totes[t.index()].place = TotePlace::InStorage(self.inst.totes[t.index()].home);
                self.totes[t.index()].task = None;
                self.tasks.remove(&stop.task.id);
                self.z_returns += 1;
            }
        }
    }

    fn all_done(&self) -> bool {
        self.orders.iter().all(|o| o.status == OrderStatus::Complete)
            && self.totes.iter().all(|t| matches!(t.place, TotePlace::InStorage(_)))
            && self.tasks.is_empty()
            && self.events.is_empty()
    }

    fn diagnose_deadlock(&self) -> SimError {
        let clock = to_s(self.clock);
        if !self.pending_orders.is_empty() {
            return SimError::Deadlock {
                clock,
                stage: Stage::OrderAssign,
                detail: format!("{} orders pending with no free put-wall slot", self.pending_orders.len()),
            };
        }
        if !self.pool.is_empty() {
            return SimError::Deadlock {
                clock,
                stage: Stage::RobotSchedule,
                detail: format!("{} tasks pending with no assignable robot", self.pool.len()),
            };
        }
        for (i, _) in self.stations.iter().enumerate() {
            let s = StationId(i as u32);
            if let Some(sku) = self.uncovered_skus(s).into_iter().next() {
                return SimError::Deadlock {
                    clock,
                    stage: Stage::ToteMatch,
                    detail: format!("station {s} needs sku {sku} but no tote of it is in storage"),
                };
            }
        }
        SimError::Deadlock { clock, stage: Stage::ToteMatch, detail: "orders incomplete with no work queued".into() }
    }

    // ----- decision generation ----------------------------------------

    fn generate_decision(&self) -> Option<DecisionPoint> {
        let any_slot = (0..self.stations.len()).any(|s| self.station_slack(StationId(s as u32)) > 0);
        if any_slot {
            if let Some(&o) = self
                .pending_orders
                .iter()
                .find(|o| !self.is_deferred(Stage::OrderAssign, o.0))
            {
                return Some(self.order_assign_dp(o));
            }
        }
        for s in 0..self.stations.len() {
            let s = StationId(s as u32);
            if self.is_deferred(Stage::ToteMatch, s.0) {
                continue;
            }
            let uncovered = self.uncovered_skus(s);
            if uncovered.is_empty() {
                continue;
            }
            let totes: Vec<ToteId> = uncovered
                .iter()
                .flat_map(|sku| self.index.sku_totes[sku.index()].iter().copied())
                .filter(|&t| self.tote_available(t))
                .collect();
            if !totes.is_empty() {
                return Some(self.tote_match_dp(s, totes));
            }
        }
        let any_robot = (0..self.robots.len()).any(|r| self.robot_assignable(RobotId(r as u32)));
        if any_robot {
            if let Some(&k) = self.pool.iter().find(|k| !self.is_deferred(Stage::RobotSchedule, k.0)) {
                return Some(self.robot_dp(k));
            }
        }
        None
    }

    fn finish_dp(
        &self,
        stage: Stage,
        subject: Subject,
        mut rows: Vec<(Vec<i64>, bool, Vec<i64>, Action)>,
        width: usize,
    ) -> DecisionPoint {
        rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        let mut candidates = Vec::with_capacity(rows.len() + 1);
        let mut mask = Vec::with_capacity(rows.len() + 1);
        let mut features = Vec::with_capacity(rows.len() + 1);
        for (f, m, _, a) in rows {
            features.push(f);
            mask.push(m);
            candidates.push(a);
        }
        candidates.push(Action::Defer);
        mask.push(true);
        features.push(vec![0; width]);
        DecisionPoint { stage, subject, candidates, mask, features, clock: to_s(self.clock) }
    }

    /// Raw features of station `s` for order `o`:
    /// `[lines, priority, arrival_rank, slack, served_lines, overlap]`.
    pub(crate) fn order_features(&self, o: OrderId, s: StationId) -> Vec<i64> {
        let order = &self.inst.orders[o.index()];
        let skus: Vec<SkuId> = self.order_open_skus(o).collect();
        let served = skus.iter().filter(|&&k| self.station_serves_sku(s, k)).count();
        let overlap: usize = self.stations[s.index()]
            .active
            .iter()
            .map(|&a| {
                let other = &self.inst.orders[a.index()];
                skus.iter().filter(|k| other.lines.iter().any(|l| l.sku == **k)).count()
            })
            .sum();
        vec![
            skus.len() as i64,
            order.priority as i64,
            self.index.arrival_rank[o.index()] as i64,
            self.station_slack(s) as i64,
            served as i64,
            overlap as i64,
        ]
    }

    fn order_assign_dp(&self, o: OrderId) -> DecisionPoint {
        let rows = (0..self.stations.len())
            .map(|s| {
                let s = StationId(s as u32);
                (self.order_features(o, s), self.station_slack(s) > 0, vec![s.0 as i64], Action::Station(s))
            })
            .collect();
        self.finish_dp(Stage::OrderAssign, Subject::Order(o), rows, 6)
    }

    /// Raw features of tote `t` for station `s`:
    /// `[quantity, f_batch, travel_to_station_ms, nearest_rest_robot_ms]`.
    pub(crate) fn tote_features(&self, s: StationId, t: ToteId) -> Vec<i64> {
        let tote = &self.inst.totes[t.index()];
        let ws = &self.inst.workstations[s.index()];
        vec![
            tote.quantity as i64,
            self.station_demand(s, tote.sku) as i64,
            self.travel_ms(tote.home, ws.position) as i64,
            self.nearest_rest_robot_ms(tote.home).map_or(-1, |m| m as i64),
        ]
    }

    fn tote_match_dp(&self, s: StationId, totes: Vec<ToteId>) -> DecisionPoint {
        let rows = totes
            .into_iter()
            .map(|t| (self.tote_features(s, t), true, vec![t.0 as i64], Action::Tote(t)))
            .collect();
        self.finish_dp(Stage::ToteMatch, Subject::Station(s), rows, 4)
    }

    /// Raw features of robot `r` for task `k`:
    /// `[availability_ms, travel_to_pickup_ms, capacity_slack, planned_tasks]`.
    pub(crate) fn robot_features(&self, k: &Task, r: RobotId) -> Vec<i64> {
        let rs = &self.robots[r.index()];
        vec![
            rs.busy_until.saturating_sub(self.clock) as i64,
            self.travel_ms(rs.location, k.pickup) as i64,
            self.robot_slack(r) as i64,
            rs.plan.len() as i64,
        ]
    }

    fn robot_dp(&self, k: TaskId) -> DecisionPoint {
        let task = self.tasks[&k];
        let rows = (0..self.robots.len())
            .map(|r| {
                let r = RobotId(r as u32);
                (
                    self.robot_features(&task, r),
                    self.robot_assignable(r),
                    self.robot_descriptor(r, 1),
                    Action::Robot(r),
                )
            })
            .collect();
        self.finish_dp(Stage::RobotSchedule, Subject::Task(k), rows, 4)
    }

    // ----- canonical encodings -----------------------------------------

    fn quantize(ms: Millis, bucket: Millis) -> i64 {
        (ms / bucket.max(1)) as i64
    }

    fn place_signature(&self, loc: Location, bucket: Millis, out: &mut Vec<i64>) {
        if let Some(s) = self.index.station_at.get(&loc) {
            out.extend([0, s.0 as i64]);
        } else if let Some(t) = self.index.home_of.get(&loc) {
            out.extend([1, t.0 as i64]);
        } else {
            out.push(2);
            for w in &self.inst.workstations {
                out.push(Self::quantize(self.travel_ms(loc, w.position), bucket));
            }
            for t in &self.inst.totes {
                out.push(Self::quantize(self.travel_ms(loc, t.home), bucket));
            }
        }
    }

    fn task_content(task: &Task, out: &mut Vec<i64>) {
        out.extend([
            match task.kind {
                TaskKind::Retrieval => 0,
                TaskKind::Return => 1,
            },
            task.tote.0 as i64,
            task.station.0 as i64,
        ]);
    }

    /// Identity-free description of a robot: its id never appears.
    pub(crate) fn robot_descriptor(&self, r: RobotId, bucket: Millis) -> Vec<i64> {
        let rs = &self.robots[r.index()];
        let mut out = vec![self.inst.robots[r.index()].capacity as i64];
        self.place_signature(rs.location, bucket, &mut out);
        out.push(rs.busy_until.saturating_sub(self.clock) as i64);
        let mut load: Vec<i64> = rs.load.iter().map(|t| t.0 as i64).collect();
        load.sort_unstable();
        out.push(load.len() as i64);
        out.extend(load);
        out.push(rs.plan.len() as i64);
        for k in &rs.plan {
            Self::task_content(&self.tasks[k], &mut out);
        }
        match &rs.trip {
            None => out.push(-1),
            Some(stops) => {
                out.push((stops.len() - rs.next_stop) as i64);
                for stop in &stops[rs.next_stop..] {
                    Self::task_content(&stop.task, &mut out);
                    out.push(stop.lift as i64);
                    out.push(stop.time.saturating_sub(self.clock) as i64);
                }
            }
        }
        out
    }

    /// Isometry- and robot-relabeling-invariant digest of the static instance.
    pub(crate) fn static_fingerprint(&self, bucket: Millis) -> [u8; 32] {
        if bucket <= 1 {
            if let Some(f) = self.index.fingerprint.get() {
                return *f;
            }
        }
        let f = self.compute_fingerprint(bucket);
        if bucket <= 1 {
            let _ = self.index.fingerprint.set(f);
        }
        f
    }

    fn compute_fingerprint(&self, bucket: Millis) -> [u8; 32] {
        let inst = &self.inst;
        let mut h = Sha256::new();
        let mut put = |x: i64| h.update(x.to_le_bytes());
        put(match inst.kind {
            crate::domain::SystemKind::MultiTote2D => 0,
            crate::domain::SystemKind::RackClimb3D => 1,
        });
        put(inst.skus as i64);
        put(self.index.pick_ms as i64);
        put(self.index.load_ms as i64);
        for o in &inst.orders {
            put(o.lines.len() as i64);
            for l in &o.lines {
                put(l.sku.0 as i64);
                put(l.quantity as i64);
            }
            put(o.priority as i64);
            put(to_ms(o.arrival_time) as i64);
        }
        for w in &inst.workstations {
            put(w.slots as i64);
        }
        for t in &inst.totes {
            put(t.sku.0 as i64);
            put(t.quantity as i64);
        }
        let points: Vec<Location> = inst
            .workstations
            .iter()
            .map(|w| w.position)
            .chain(inst.totes.iter().map(|t| t.home))
            .collect();
        for &a in &points {
            for &b in &points {
                put(Self::quantize(self.travel_ms(a, b), bucket));
            }
        }
        let mut depots: Vec<Vec<i64>> = inst
            .robots
            .iter()
            .map(|r| {
                let mut row = vec![r.capacity as i64];
                row.extend(points.iter().map(|&p| Self::quantize(self.travel_ms(r.position, p), bucket)));
                row
            })
            .collect();
        depots.sort();
        for row in depots {
            for x in row {
                put(x);
            }
        }
        h.finalize().into()
    }

    /// Exact, clock-relative encoding of everything that can influence the
    /// rest of the episode, with robot identities and absolute coordinates erased.
    pub(crate) fn context_signature(&self, bucket: Millis) -> Vec<i64> {
        let mut out = Vec::with_capacity(64 + self.orders.len() * 4);
        let fp = self.static_fingerprint(bucket);
        for chunk in fp.chunks(8) {
            out.push(i64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
        for st in &self.orders {
            let (code, arg) = match st.status {
                OrderStatus::NotArrived => (0, -1),
                OrderStatus::Pending => (1, -1),
                OrderStatus::Assigned(s) => (2, s.0 as i64),
                OrderStatus::Complete => (3, -1),
            };
            out.extend([code, arg]);
            let bits = st
                .picked
                .iter()
                .zip(&st.queued)
                .enumerate()
                .fold(0i64, |acc, (i, (p, q))| acc | ((*p as i64) << (2 * i)) | ((*q as i64) << (2 * i + 1)));
            out.push(bits);
        }
        for ev in self.events.iter() {
            if let EventKind::Arrival(o) = ev.kind {
                out.extend([-2, o.0 as i64, ev.time.saturating_sub(self.clock) as i64]);
            }
        }
        for (i, ts) in self.totes.iter().enumerate() {
            let default = matches!(ts.place, TotePlace::InStorage(_)) && ts.bound.is_none() && ts.task.is_none();
            if default {
                continue;
            }
            let (code, arg) = match ts.place {
                TotePlace::InStorage(_) => (0, -1),
                TotePlace::OnRobot(_) => (1, -1),
                TotePlace::AtWorkstation(s) => (2, s.0 as i64),
            };
            out.extend([-3, i as i64, code, arg, ts.bound.map_or(-1, |s| s.0 as i64), ts.task.is_some() as i64]);
        }
        for (i, st) in self.stations.iter().enumerate() {
            out.extend([-4, i as i64, st.active.len() as i64]);
            out.extend(st.active.iter().map(|o| o.0 as i64));
            out.push(st.buffer.len() as i64);
            out.extend(st.buffer.iter().map(|t| t.0 as i64));
            out.push(st.bound.len() as i64);
            out.extend(st.bound.iter().map(|t| t.0 as i64));
            out.push(st.queue.len() as i64);
            for j in &st.queue {
                out.extend([j.order.0 as i64, j.line as i64, j.tote.0 as i64]);
            }
            match &st.picking {
                None => out.push(-1),
                Some((j, end)) => out.extend([
                    j.order.0 as i64,
                    j.line as i64,
                    j.tote.0 as i64,
                    end.saturating_sub(self.clock) as i64,
                ]),
            }
        }
        out.push(-5);
        out.push(self.pool.len() as i64);
        for k in &self.pool {
            Self::task_content(&self.tasks[k], &mut out);
        }
        let mut robots: Vec<Vec<i64>> =
            (0..self.robots.len()).map(|r| self.robot_descriptor(RobotId(r as u32), bucket)).collect();
        robots.sort();
        out.push(-6);
        for d in robots {
            out.push(d.len() as i64);
            out.extend(d);
        }
        out.push(-7);
        for &(stage, subject) in &self.deferred {
            out.push(stage.index() as i64);
            match stage {
                Stage::RobotSchedule => match self.tasks.get(&TaskId(subject)) {
                    Some(t) => Self::task_content(t, &mut out),
                    None => out.push(-1),
                },
                _ => out.push(subject as i64),
            }
        }
        out
    }

    /// Verifies tote conservation and capacity invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut holders = vec![0u32; self.totes.len()];
        for (r, rs) in self.robots.iter().enumerate() {
            let cap = self.inst.robots[r].capacity as usize;
            if rs.load.len() > cap {
                return Err(format!("robot {r} carries {} > capacity {cap}", rs.load.len()));
            }
            for t in &rs.load {
                holders[t.index()] += 1;
                if self.totes[t.index()].place != TotePlace::OnRobot(RobotId(r as u32)) {
                    return Err(format!("tote {t} on robot {r} has place {:?}", self.totes[t.index()].place));
                }
            }
        }
        for (s, st) in self.stations.iter().enumerate() {
            let slots = self.inst.workstations[s].slots as usize;
            if st.active.len() > slots {
                return Err(format!("station {s} holds {} orders > {slots} slots", st.active.len()));
            }
            for t in &st.buffer {
                holders[t.index()] += 1;
                if self.totes[t.index()].place != TotePlace::AtWorkstation(StationId(s as u32)) {
                    return Err(format!("tote {t} buffered at {s} has place {:?}", self.totes[t.index()].place));
                }
            }
        }
        for (i, ts) in self.totes.iter().enumerate() {
            if let TotePlace::InStorage(loc) = ts.place {
                holders[i] += 1;
                if loc != self.inst.totes[i].home {
                    return Err(format!("tote {i} stored away from home"));
                }
            }
        }
        if let Some(i) = holders.iter().position(|&h| h != 1) {
            return Err(format!("tote {i} has {} holders", holders[i]));
        }
        Ok(())
    }
}

/// Reward of a transition: the negative change in total tote movements.
pub fn global_reward(prev: &WarehouseState, next: &WarehouseState) -> f64 {
    prev.z_final() as f64 - next.z_final() as f64
}
