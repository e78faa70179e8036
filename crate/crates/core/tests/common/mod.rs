#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toteflow_core::gen::{generate, InstanceConfig};
use toteflow_core::oracle::micro_instance;
use toteflow_core::sim::{global_reward, ActionRecord, OrderStatus, Policy, RandomPolicy, Step};
use toteflow_core::sim::WarehouseState;
use toteflow_core::{SystemKind, WarehouseInstance};

/// Maximum of `Σ max(w[i][π(i)], 0)` over all permutations π.
pub fn brute_force_assignment(w: &[Vec<f64>]) -> f64 {
    fn go(w: &[Vec<f64>], row: usize, used: &mut [bool]) -> f64 {
        if row == w.len() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(w[row][c].max(0.0) + go(w, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(w, 0, &mut vec![false; w.len()])
}

/// Small instance for property runs: a micro instance, or a generated one
/// with a few orders, optional dynamic arrivals and either system kind.
pub fn property_instance(seed: u64) -> WarehouseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    if rng.gen_bool(0.3) {
        return micro_instance(seed);
    }
    let skus = rng.gen_range(2..=8);
    let mut cfg = InstanceConfig::new(
        "prop",
        skus,
        rng.gen_range(0..=6),
        rng.gen_range(1..=3),
        rng.gen_range(1..=2),
        rng.gen_range(skus..=skus * 3),
    )
    .with_seed(seed)
    .with_kind(if rng.gen_bool(0.5) { SystemKind::MultiTote2D } else { SystemKind::RackClimb3D });
    cfg.slots_per_station = rng.gen_range(1..=3);
    if rng.gen_bool(0.5) {
        cfg.arrival_horizon = rng.gen_range(0.0..120.0);
    }
    generate(&cfg).expect("valid property config")
}

fn all_complete(state: &WarehouseState) -> bool {
    state.instance().orders.iter().all(|o| state.order_status(o.id) == OrderStatus::Complete)
}

pub struct Trace {
    pub actions: Vec<ActionRecord>,
    pub z: (u64, u64),
    pub makespan: f64,
}

/// Runs one episode under `policy`, checking every simulator property along
/// the way. Returns the trace and the violations found.
pub fn checked_episode(inst: &WarehouseInstance, policy: &mut dyn Policy) -> (Trace, Vec<String>) {
    let mut v = Vec::new();
    let mut state = WarehouseState::reset(inst.clone()).expect("reset");
    let mut actions = Vec::new();
    let mut rewards = 0.0;
    let mut prev = state.clone();
    let mut last = (0u64, 0u64, 0.0f64);
    loop {
        let step = match state.next_decision() {
            Ok(s) => s,
            Err(e) => {
                v.push(format!("engine error: {e}"));
                break;
            }
        };
        if let Err(e) = state.check_invariants() {
            v.push(format!("conservation: {e}"));
        }
        let now = (state.z_retrievals(), state.z_returns(), state.clock());
        if now.0 < last.0 || now.1 < last.1 || now.2 < last.2 {
            v.push(format!("counters went backwards: {last:?} -> {now:?}"));
        }
        if state.z_returns() > state.z_retrievals() {
            v.push("more returns than retrievals".into());
        }
        last = now;
        rewards += global_reward(&prev, &state);
        let done = all_complete(&state) && state.z_returns() == state.z_retrievals();
        match step {
            Step::Terminal(m) => {
                if !done {
                    v.push("terminated with open orders or totes out".into());
                }
                if m.z_final != m.z_retrievals + m.z_returns || m.z_final != state.z_final() {
                    v.push("metrics disagree with state".into());
                }
                if rewards != -(m.z_final as f64) {
                    v.push(format!("reward sum {rewards} != -{}", m.z_final));
                }
                return (Trace { actions, z: (m.z_retrievals, m.z_returns), makespan: m.makespan }, v);
            }
            Step::Decision(dp) => {
                if done {
                    v.push("decision offered after everything finished".into());
                }
                if dp.mask.len() != dp.candidates.len() || !dp.mask[dp.defer_index()] {
                    v.push("malformed decision point".into());
                }
                let action = match policy.decide(&dp, &state) {
                    Ok(a) => a,
                    Err(e) => {
                        v.push(format!("policy: {e}"));
                        break;
                    }
                };
                if !dp.is_feasible(action) {
                    v.push(format!("policy chose masked {action:?}"));
                }
                prev = state.clone();
                if let Err(e) = state.apply_action(action) {
                    v.push(format!("apply: {e}"));
                    break;
                }
                rewards += global_reward(&prev, &state);
                prev = state.clone();
                actions.push(ActionRecord { stage: dp.stage, subject: dp.subject.raw(), action, clock: dp.clock });
            }
        }
    }
    (Trace { actions, z: (state.z_retrievals(), state.z_returns()), makespan: state.clock() }, v)
}

pub fn random_policy(seed: u64) -> RandomPolicy {
    let p = [0.0, 0.1, 0.3][(seed % 3) as usize];
    RandomPolicy::new(seed).with_defer_prob(p)
}

/// Runs a random-policy episode twice and checks every property, including
/// that both runs agree exactly.
pub fn episode_violations(seed: u64) -> Vec<String> {
    let inst = property_instance(seed);
    let (a, mut v) = checked_episode(&inst, &mut random_policy(seed));
    let (b, _) = checked_episode(&inst, &mut random_policy(seed));
    if a.actions != b.actions || a.z != b.z || a.makespan != b.makespan {
        v.push("determinism: reruns differ".into());
    }
    v
}

/// Hand-built static instance. Orders list SKU ids, totes are
/// `(sku, aisle, column)`, robots `(capacity, aisle, column)` and stations
/// `(aisle, column, slots)`; everything sits on level 0.
pub fn build(
    kind: SystemKind,
    columns: u32,
    orders: &[&[u32]],
    totes: &[(u32, u32, u32)],
    robots: &[(u32, u32, u32)],
    stations: &[(u32, u32, u32)],
) -> WarehouseInstance {
    use toteflow_core::*;
    let aisles = totes.iter().map(|t| t.1).chain(robots.iter().map(|r| r.1)).chain(stations.iter().map(|s| s.0)).max().unwrap_or(0) + 1;
    let skus = totes.iter().map(|t| t.0 + 1).max().unwrap_or(0);
    WarehouseInstance {
        version: INSTANCE_VERSION.into(),
        name: "built".into(),
        kind,
        skus,
        orders: orders
            .iter()
            .enumerate()
            .map(|(i, ks)| Order {
                id: OrderId(i as u32),
                lines: ks.iter().map(|&k| OrderLine { sku: SkuId(k), quantity: 1 }).collect(),
                priority: 0,
                arrival_time: 0.0,
            })
            .collect(),
        totes: totes
            .iter()
            .enumerate()
            .map(|(i, &(k, a, c))| {
                let home = Location::new(a, c, 0);
                Tote { id: ToteId(i as u32), sku: SkuId(k), quantity: 10, home, place: TotePlace::InStorage(home) }
            })
            .collect(),
        robots: robots
            .iter()
            .enumerate()
            .map(|(i, &(capacity, a, c))| Robot {
                id: RobotId(i as u32),
                capacity,
                position: Location::new(a, c, 0),
                load: Vec::new(),
                busy_until: 0.0,
            })
            .collect(),
        workstations: stations
            .iter()
            .enumerate()
            .map(|(i, &(a, c, slots))| Workstation {
                id: StationId(i as u32),
                position: Location::new(a, c, 0),
                slots,
                active_orders: Vec::new(),
                tote_buffer: Vec::new(),
            })
            .collect(),
        layout: Layout { aisles, columns, levels: kind.default_levels() },
        speed_params: SpeedParams::default(),
    }
}

/// Drives `state` to its next decision, failing on terminal or error.
pub fn next_dp(state: &mut WarehouseState) -> toteflow_core::sim::DecisionPoint {
    match state.next_decision().expect("engine") {
        Step::Decision(dp) => dp,
        Step::Terminal(m) => panic!("unexpected terminal {m:?}"),
    }
}

/// Starts an episode server on an ephemeral local port.
pub fn spawn_server() -> std::net::SocketAddr {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind");
    let addr = listener.local_addr().expect("addr");
    std::thread::spawn(move || toteflow_core::server::serve_listener(listener));
    addr
}

/// Plays C-SGH in process, then replays its choices as a scripted client of
/// the server at `addr` and compares the two action streams byte for byte.
pub fn wire_round_trip(addr: std::net::SocketAddr, inst: &WarehouseInstance, seed: u64) -> Result<usize, String> {
    use toteflow_core::server::{EnvClient, ResetRequest, ServerMessage};
    let local = toteflow_core::sim::run_episode(inst.clone(), &mut toteflow_core::heuristics::CsghPolicy::new(), seed)
        .map_err(|e| e.to_string())?;
    let mut client = EnvClient::connect(addr).map_err(|e| e.to_string())?;
    let (reply, mut msg) = client.reset(ResetRequest::inline(inst.clone(), seed)).map_err(|e| e.to_string())?;
    if reply.seed != seed || reply.instance_name != inst.name {
        return Err("reset reply does not echo the request".into());
    }
    let mut remote = Vec::new();
    loop {
        match msg {
            ServerMessage::Observe(obs) => {
                let dp = &obs.decision;
                let want = local.actions.get(remote.len()).ok_or("server offered extra decisions")?;
                let index = dp.index_of(want.action).ok_or("expected action is not a candidate")?;
                remote.push(ActionRecord { stage: dp.stage, subject: dp.subject.raw(), action: dp.candidates[index], clock: dp.clock });
                msg = client.act(index).map_err(|e| e.to_string())?;
            }
            ServerMessage::Terminal { metrics, .. } => {
                let a = serde_json::to_vec(&remote).expect("serialize");
                let b = serde_json::to_vec(&local.actions).expect("serialize");
                if a != b {
                    return Err("action streams differ".into());
                }
                let m = &local.metrics;
                if (metrics.z_final, metrics.makespan, metrics.decisions_per_stage) != (m.z_final, m.makespan, m.decisions_per_stage) {
                    return Err("terminal metrics differ".into());
                }
                return Ok(remote.len());
            }
            other => return Err(format!("unexpected {other:?}")),
        }
    }
}

/// Walks `a` and `b` with the same random canonical indices, checking key
/// equality and one-step bisimulation at every decision point. Returns the
/// number of pairs checked.
pub fn walk_pair(a: &WarehouseInstance, b: &WarehouseInstance, seed: u64) -> Result<usize, String> {
    use toteflow_core::bq::{abstract_state, check_bisimulation, KeyOptions};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sa = WarehouseState::reset(a.clone()).map_err(|e| e.to_string())?;
    let mut sb = WarehouseState::reset(b.clone()).map_err(|e| e.to_string())?;
    let mut pairs = 0;
    loop {
        match (sa.next_decision().map_err(|e| e.to_string())?, sb.next_decision().map_err(|e| e.to_string())?) {
            (Step::Terminal(ma), Step::Terminal(mb)) => {
                if (ma.z_final, ma.makespan) != (mb.z_final, mb.makespan) {
                    return Err(format!("seed {seed}: terminal metrics differ"));
                }
                return Ok(pairs);
            }
            (Step::Decision(da), Step::Decision(db)) => {
                if abstract_state(&sa, &da) != abstract_state(&sb, &db) {
                    return Err(format!("seed {seed} step {pairs}: keys differ"));
                }
                if let Some(cex) = check_bisimulation(&sa, &sb, 0, KeyOptions::default()).map_err(|e| e.to_string())? {
                    return Err(format!("seed {seed} step {pairs}: {cex:?}"));
                }
                pairs += 1;
                let feasible: Vec<usize> = (0..da.len()).filter(|&i| da.mask[i]).collect();
                let pick = if rng.gen_bool(0.15) { da.defer_index() } else { feasible[rng.gen_range(0..feasible.len())] };
                sa.apply_index(pick).map_err(|e| e.to_string())?;
                sb.apply_index(pick).map_err(|e| e.to_string())?;
            }
            _ => return Err(format!("seed {seed}: one side terminated early")),
        }
    }
}

/// Same-key pairs from the aisle mirror and a robot relabeling of one
/// property instance.
pub fn symmetric_pairs(seed: u64) -> Result<usize, String> {
    use toteflow_core::bq::{mirror_aisles, permute_robots};
    let inst = property_instance(seed);
    let rev: Vec<usize> = (0..inst.robots.len()).rev().collect();
    Ok(walk_pair(&inst, &mirror_aisles(&inst), seed)? + walk_pair(&inst, &permute_robots(&inst, &rev), seed)?)
}

/// Two micro-1 variants whose travel times differ but fall into the same
/// two-second bucket of a deliberately coarse key.
pub fn mis_keyed_pair() -> (WarehouseState, WarehouseState) {
    use toteflow_core::sim::Action;
    use toteflow_core::{RobotId, StationId, ToteId};
    let a = toteflow_core::oracle::micro_1();
    let mut b = a.clone();
    b.speed_params.horizontal_mps = 1.0;
    let mut sa = WarehouseState::reset(a).expect("reset");
    let mut sb = WarehouseState::reset(b).expect("reset");
    for action in [Action::Station(StationId(0)), Action::Defer, Action::Tote(ToteId(0)), Action::Tote(ToteId(1)), Action::Robot(RobotId(0))] {
        for s in [&mut sa, &mut sb] {
            s.next_decision().expect("decision");
            s.apply_action(action).expect("feasible");
        }
    }
    (sa, sb)
}
