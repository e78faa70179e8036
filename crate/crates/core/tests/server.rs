mod common;

use common::{property_instance, spawn_server, wire_round_trip};
use std::io::BufReader;
use std::net::TcpListener;
use toteflow_core::gen::{generate, preset};
use toteflow_core::oracle::{micro_1, solve_exact, DEFAULT_NODE_BUDGET};
use toteflow_core::server::{
    agent_episode, ClientError, ClientMessage, EnvClient, ExternPolicy, ResetRequest, ServerMessage, PROTOCOL_VERSION,
    ORDER_COLUMNS, ROBOT_COLUMNS, TOTE_COLUMNS,
};
use toteflow_core::sim::{run_episode, Stage};
use toteflow_core::SystemKind;

fn error_code(msg: ServerMessage) -> String {
    match msg {
        ServerMessage::Error { code, .. } => code,
        other => panic!("expected an error, got {other:?}"),
    }
}

fn observe(msg: ServerMessage) -> toteflow_core::server::Observation {
    match msg {
        ServerMessage::Observe(obs) => obs,
        other => panic!("expected an observation, got {other:?}"),
    }
}

#[test]
fn wire_stream_matches_in_process_run() {
    let addr = spawn_server();
    for seed in 0..6 {
        let inst = if seed % 2 == 0 { property_instance(seed) } else { generate(&preset("S-1").unwrap().with_seed(seed)).unwrap() };
        wire_round_trip(addr, &inst, seed).unwrap();
    }
}

#[test]
fn preset_reset_generates_the_same_instance() {
    let addr = spawn_server();
    let mut client = EnvClient::connect(addr).unwrap();
    let mut req = ResetRequest::preset("S-2", 3);
    req.system = Some(SystemKind::RackClimb3D);
    let (reply, first) = client.reset(req).unwrap();
    assert_eq!(reply.protocol, PROTOCOL_VERSION);
    assert_eq!(reply.instance_name, "S-2");
    let obs = observe(first);
    assert_eq!(obs.decision.stage, Stage::OrderAssign);
    assert_eq!(obs.features.len(), obs.decision.candidates.len());
    assert_eq!(obs.features[0].len(), ORDER_COLUMNS.len());
    assert!(obs.features.last().unwrap().iter().all(|&x| x == 0.0));
    assert_eq!(obs.key_hash, obs.key.hash_hex());
    assert_eq!((TOTE_COLUMNS.len(), ROBOT_COLUMNS.len()), (4, 4));
}

#[test]
fn error_codes() {
    let addr = spawn_server();
    let mut c = EnvClient::connect(addr).unwrap();
    c.send_raw("{not json").unwrap();
    assert_eq!(error_code(c.recv().unwrap()), "malformed");
    assert!(matches!(c.reset(ResetRequest::preset("S-99", 0)), Err(ClientError::Server { code, .. }) if code == "unknown_preset"));
    let mut bad = micro_1();
    bad.robots.clear();
    assert!(matches!(c.reset(ResetRequest::inline(bad, 0)), Err(ClientError::Server { code, .. }) if code == "invalid_instance"));

    let (reply, first) = c.reset(ResetRequest::inline(micro_1(), 0)).unwrap();
    let obs = observe(first);
    assert_eq!(error_code(c.act(99).unwrap()), "infeasible_action");
    c.send(&ClientMessage::Act { session: Some("nope".into()), step: None, index: 0 }).unwrap();
    assert_eq!(error_code(c.recv().unwrap()), "unknown_session");
    c.send(&ClientMessage::Act { session: Some(reply.session.clone()), step: Some(obs.step + 1), index: 0 }).unwrap();
    assert_eq!(error_code(c.recv().unwrap()), "stale_observe");
    // The session survived all of the above.
    let next = c.act(0).unwrap();
    assert!(matches!(next, ServerMessage::Observe(o) if o.step == 1));
    c.send(&ClientMessage::Reset(ResetRequest::inline(micro_1(), 0))).unwrap();
    assert_eq!(error_code(c.recv().unwrap()), "protocol_order");
    assert!(matches!(c.recv(), Err(ClientError::Closed)));

    let mut c = EnvClient::connect(addr).unwrap();
    assert_eq!(error_code(c.act(0).unwrap()), "protocol_order");
}

#[test]
fn oracle_trajectory_replays_over_the_wire() {
    let addr = spawn_server();
    let r = solve_exact(&micro_1(), DEFAULT_NODE_BUDGET).unwrap();
    let mut c = EnvClient::connect(addr).unwrap();
    let (_, mut msg) = c.reset(ResetRequest::inline(micro_1(), 0)).unwrap();
    for rec in &r.trajectory {
        let obs = observe(msg);
        msg = c.act(obs.decision.index_of(rec.action).unwrap()).unwrap();
    }
    match msg {
        ServerMessage::Terminal { metrics, .. } => assert_eq!(metrics.z_final, 4),
        other => panic!("{other:?}"),
    }
    // A fresh episode may follow on the same connection.
    assert!(c.reset(ResetRequest::inline(micro_1(), 1)).is_ok());
}

#[test]
fn extern_policy_delegates_to_an_agent() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let agent = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut input = BufReader::new(stream.try_clone().unwrap());
        let mut output = stream;
        let mut seen = 0;
        let metrics = agent_episode(&mut input, &mut output, |obs| {
            seen += 1;
            obs.mask.iter().position(|&m| m).unwrap()
        })
        .unwrap();
        (metrics, seen)
    });
    let ep = run_episode(micro_1(), &mut ExternPolicy::new(addr.to_string()), 0).unwrap();
    let (metrics, seen) = agent.join().unwrap();
    assert_eq!(seen, ep.actions.len());
    assert_eq!(metrics.z_final, ep.metrics.z_final);
    assert_eq!(ep.metrics.z_returns, ep.metrics.z_retrievals);
}

#[test]
fn unreachable_agent_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let err = run_episode(micro_1(), &mut ExternPolicy::new(port.to_string()), 0).unwrap_err();
    assert!(err.to_string().contains("transport"), "{err}");
}

#[test]
fn s1_reset_offers_a_feasible_candidate() {
    let addr = spawn_server();
    let mut c = EnvClient::connect(addr).unwrap();
    let (_, first) = c.reset(ResetRequest::preset("S-1", 0)).unwrap();
    let obs = observe(first);
    let defer = obs.decision.defer_index();
    assert!(obs.mask.iter().enumerate().any(|(i, &m)| m && i != defer));
    assert_eq!(obs.mask.len(), obs.features.len());
}

#[test]
fn mirrored_robots_get_equal_rows() {
    use toteflow_core::server::{observe_features, FeatureStats};
    use toteflow_core::sim::{Step, WarehouseState};
    // Robots one aisle either side of the only tote.
    let inst = common::build(SystemKind::MultiTote2D, 4, &[&[0]], &[(0, 1, 2)], &[(2, 0, 2), (2, 2, 2)], &[(1, 0, 1)]);
    let stats = FeatureStats::for_instance(&inst);
    let mut state = WarehouseState::reset(inst).unwrap();
    loop {
        let Step::Decision(dp) = state.next_decision().unwrap() else { panic!("terminal") };
        if dp.stage == Stage::RobotSchedule {
            let m = observe_features(&dp, &stats);
            assert_eq!(m.rows.len(), 3);
            assert_eq!(m.rows[0], m.rows[1]);
            assert_eq!(m.mask, vec![true, true, true]);
            return;
        }
        let (_, a) = dp.feasible().next().unwrap();
        state.apply_action(a).unwrap();
    }
}
