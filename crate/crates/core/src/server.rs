//! Stepwise episode server over TCP, one JSON message per line.
//!
//! A session is `Reset → (Observe → Act)* → Terminal`. The server answers a
//! reset with a [`ResetReply`] followed by the first [`Observation`] (or a
//! terminal message for an instance with nothing to do). Every act carries the
//! index of one candidate of the latest observation.
//!
//! The same messages drive [`ExternPolicy`], which plays the engine side and
//! asks a remote agent for each decision.

use crate::bq::{abstract_state, AbstractKey};
use crate::domain::{MetricsReport, SystemKind, WarehouseInstance};
use crate::gen::{generate, preset};
use crate::heuristics::CsghPolicy;
use crate::sim::{run_state, Action, DecisionPoint, Policy, PolicyError, Stage, Step, WarehouseState};
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use thiserror::Error;

pub const PROTOCOL_VERSION: &str = "toteflow_proto_v1";

/// Column names of the raw feature rows, per stage.
pub const ORDER_COLUMNS: [&str; 6] = ["lines", "priority", "arrival_rank", "station_slack", "served_lines", "overlap"];
pub const TOTE_COLUMNS: [&str; 4] = ["quantity", "f_batch", "travel_to_station_ms", "nearest_rest_robot_ms"];
pub const ROBOT_COLUMNS: [&str; 4] = ["availability_ms", "travel_to_pickup_ms", "capacity_slack", "planned_tasks"];

static SESSIONS: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    /// Preset label, generated with `seed` and `system`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemKind>,
    /// Inline instance; takes precedence over `preset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<WarehouseInstance>,
    #[serde(default)]
    pub seed: u64,
}

impl ResetRequest {
    pub fn preset(name: &str, seed: u64) -> Self {
        Self { session: None, preset: Some(name.to_string()), system: None, instance: None, seed }
    }

    pub fn inline(instance: WarehouseInstance, seed: u64) -> Self {
        Self { session: None, preset: None, system: None, instance: Some(instance), seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientMessage {
    Reset(ResetRequest),
    Act {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
        /// Step of the observation being answered; checked when present.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<u64>,
        index: usize,
    },
}

/// Per-stage column statistics used to standardize raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Categorical columns are passed through as integer codes.
    pub categorical: Vec<bool>,
}

impl ColumnStats {
    fn from_rows(rows: &[Vec<i64>], width: usize, categorical: Vec<bool>) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        let mut std = vec![1.0; width];
        if !rows.is_empty() {
            for c in 0..width {
                let m = rows.iter().map(|r| r[c] as f64).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r[c] as f64 - m).powi(2)).sum::<f64>() / n;
                mean[c] = m;
                std[c] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
            }
        }
        for c in 0..width {
            if categorical[c] {
                mean[c] = 0.0;
                std[c] = 1.0;
            }
        }
        Self { mean, std, categorical }
    }

    fn apply(&self, row: &[i64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(c, &v)| if self.categorical[c] { v as f64 } else { (v as f64 - self.mean[c]) / self.std[c] })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub order_assign: ColumnStats,
    pub tote_match: ColumnStats,
    pub robot_schedule: ColumnStats,
}

impl FeatureStats {
    /// Statistics of the candidate rows met along a reference C-SGH rollout
    /// of `inst`. Deterministic per instance.
    pub fn for_instance(inst: &WarehouseInstance) -> Self {
        struct Recorder {
            inner: CsghPolicy,
            rows: [Vec<Vec<i64>>; 3],
        }
        impl Policy for Recorder {
            fn name(&self) -> &str {
                "recorder"
            }
            fn decide(&mut self, dp: &DecisionPoint, state: &WarehouseState) -> Result<Action, PolicyError> {
                for (i, _) in dp.feasible() {
                    self.rows[dp.stage.index()].push(dp.features[i].clone());
                }
                self.inner.decide(dp, state)
            }
        }
        let mut rec = Recorder { inner: CsghPolicy::new(), rows: Default::default() };
        if let Ok(state) = WarehouseState::reset(inst.clone()) {
            let _ = run_state(state, &mut rec);
        }
        let [o, t, r] = rec.rows;
        let mut order_categorical = vec![false; ORDER_COLUMNS.len()];
        order_categorical[1] = true;
        Self {
            order_assign: ColumnStats::from_rows(&o, ORDER_COLUMNS.len(), order_categorical),
            tote_match: ColumnStats::from_rows(&t, TOTE_COLUMNS.len(), vec![false; TOTE_COLUMNS.len()]),
            robot_schedule: ColumnStats::from_rows(&r, ROBOT_COLUMNS.len(), vec![false; ROBOT_COLUMNS.len()]),
        }
    }

    pub fn stage(&self, stage: Stage) -> &ColumnStats {
        match stage {
            Stage::OrderAssign => &self.order_assign,
            Stage::ToteMatch => &self.tote_match,
            Stage::RobotSchedule => &self.robot_schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

/// Standardized candidate rows of `dp`. The defer row stays all zeros.
pub fn observe_features(dp: &DecisionPoint, stats: &FeatureStats) -> FeatureMatrix {
    let cols = stats.stage(dp.stage);
    let rows = dp
        .candidates
        .iter()
        .zip(&dp.features)
        .map(|(a, row)| if a.is_defer() { vec![0.0; row.len()] } else { cols.apply(row) })
        .collect();
    FeatureMatrix { rows, mask: dp.mask.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetReply {
    pub session: String,
    pub protocol: String,
    pub instance_name: String,
    pub seed: u64,
    pub stats: FeatureStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub session: String,
    /// Number of decisions already taken in this episode.
    pub step: u64,
    pub decision: DecisionPoint,
    pub key: AbstractKey,
    pub key_hash: String,
    /// Standardized rows; `decision.features` holds the raw integers.
    pub features: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl Observation {
    pub fn build(session: &str, step: u64, dp: &DecisionPoint, state: &WarehouseState, stats: &FeatureStats) -> Self {
        let key = abstract_state(state, dp);
        let m = observe_features(dp, stats);
        Self {
            session: session.to_string(),
            step,
            decision: dp.clone(),
            key_hash: key.hash_hex(),
            key,
            features: m.rows,
            mask: m.mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Reset(ResetReply),
    Observe(Observation),
    Terminal {
        session: String,
        metrics: MetricsReport,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
        code: String,
        text: String,
    },
}

fn send<T: Serialize>(out: &mut impl Write, msg: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(msg).map_err(io::Error::other)?;
    line.push(b'\n');
    out.write_all(&line)?;
    out.flush()
}

struct Live {
    state: WarehouseState,
    stats: FeatureStats,
    step: u64,
    observed: bool,
}

enum Flow {
    Continue,
    Close,
}

struct Session<W> {
    id: String,
    out: W,
    live: Option<Live>,
}

impl<W: Write> Session<W> {
    fn error(&mut self, code: &str, text: impl Into<String>) -> io::Result<()> {
        let msg = ServerMessage::Error { session: Some(self.id.clone()), code: code.to_string(), text: text.into() };
        send(&mut self.out, &msg)
    }

    fn resolve(req: &ResetRequest) -> Result<WarehouseInstance, (&'static str, String)> {
        if let Some(inst) = &req.instance {
            return Ok(inst.clone());
        }
        let name = req.preset.as_deref().ok_or(("malformed", "reset needs a preset or an inline instance".to_string()))?;
        let mut cfg = preset(name).map_err(|e| ("unknown_preset", e.to_string()))?.with_seed(req.seed);
        if let Some(kind) = req.system {
            cfg = cfg.with_kind(kind);
        }
        generate(&cfg).map_err(|e| ("invalid_instance", e.to_string()))
    }

    fn advance(&mut self) -> io::Result<Flow> {
        let live = self.live.as_mut().expect("advance needs a live episode");
        match live.state.next_decision() {
            Ok(Step::Decision(dp)) => {
                let obs = Observation::build(&self.id, live.step, &dp, &live.state, &live.stats);
                live.observed = true;
                send(&mut self.out, &ServerMessage::Observe(obs))?;
                Ok(Flow::Continue)
            }
            Ok(Step::Terminal(metrics)) => {
                self.live = None;
                send(&mut self.out, &ServerMessage::Terminal { session: self.id.clone(), metrics })?;
                Ok(Flow::Continue)
            }
            Err(e) => {
                self.live = None;
                self.error("engine", e.to_string())?;
                Ok(Flow::Close)
            }
        }
    }

    fn handle(&mut self, line: &str) -> io::Result<Flow> {
        let msg: ClientMessage = match serde_json::from_str(line) {
            Ok(m) => m,
            Err(e) => {
                self.error("malformed", e.to_string())?;
                return Ok(Flow::Continue);
            }
        };
        match msg {
            ClientMessage::Reset(_) if self.live.is_some() => {
                self.error("protocol_order", "reset while an episode is in flight")?;
                Ok(Flow::Close)
            }
            ClientMessage::Reset(req) => {
                let inst = match Self::resolve(&req) {
                    Ok(i) => i,
                    Err((code, text)) => {
                        self.error(code, text)?;
                        return Ok(Flow::Continue);
                    }
                };
                let state = match WarehouseState::reset(inst) {
                    Ok(s) => s,
                    Err(e) => {
                        self.error("invalid_instance", e.to_string())?;
                        return Ok(Flow::Continue);
                    }
                };
                let stats = FeatureStats::for_instance(state.instance());
                let reply = ResetReply {
                    session: self.id.clone(),
                    protocol: PROTOCOL_VERSION.to_string(),
                    instance_name: state.instance().name.clone(),
                    seed: req.seed,
                    stats: stats.clone(),
                };
                send(&mut self.out, &ServerMessage::Reset(reply))?;
                self.live = Some(Live { state, stats, step: 0, observed: false });
                self.advance()
            }
            ClientMessage::Act { .. } if !self.live.as_ref().is_some_and(|l| l.observed) => {
                self.error("protocol_order", "act without a pending observation")?;
                Ok(Flow::Close)
            }
            ClientMessage::Act { session, step, index } => {
                if session.as_ref().is_some_and(|s| *s != self.id) {
                    self.error("unknown_session", format!("this connection is session {}", self.id))?;
                    return Ok(Flow::Continue);
                }
                let live = self.live.as_mut().expect("checked above");
                if step.is_some_and(|s| s != live.step) {
                    let text = format!("act answers step {} but the latest observation is step {}", step.unwrap_or(0), live.step);
                    self.error("stale_observe", text)?;
                    return Ok(Flow::Continue);
                }
                let dp = live.state.pending_decision().expect("observed decision is pending");
                if index >= dp.len() || !dp.mask[index] {
                    let text = format!("index {index} is not a feasible candidate of {}", dp.len());
                    self.error("infeasible_action", text)?;
                    return Ok(Flow::Continue);
                }
                live.state.apply_index(index).expect("feasible index applies");
                live.step += 1;
                live.observed = false;
                self.advance()
            }
        }
    }
}

/// Runs one session over an arbitrary line transport until the client
/// disconnects or violates the protocol order.
pub fn run_session(input: impl BufRead, output: impl Write, id: &str) -> io::Result<()> {
    let mut session = Session { id: id.to_string(), out: output, live: None };
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Flow::Close = session.handle(&line)? {
            break;
        }
    }
    Ok(())
}

fn next_session_id() -> String {
    format!("s{}", SESSIONS.fetch_add(1, Ordering::Relaxed))
}

/// Accepts connections forever, one thread and one engine per connection.
pub fn serve_listener(listener: TcpListener) -> io::Result<()> {
    for conn in listener.incoming() {
        let stream = conn?;
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = run_session(reader, stream, &next_session_id());
        });
    }
    Ok(())
}

pub fn serve(addr: impl ToSocketAddrs) -> io::Result<()> {
    serve_listener(TcpListener::bind(addr)?)
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("connection closed")]
    Closed,
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("server error {code}: {text}")]
    Server { code: String, text: String },
}

/// Blocking line client for the episode server.
pub struct EnvClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl EnvClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let writer = TcpStream::connect(addr)?;
        writer.set_nodelay(true)?;
        Ok(Self { reader: BufReader::new(writer.try_clone()?), writer })
    }

    pub fn send(&mut self, msg: &ClientMessage) -> Result<(), ClientError> {
        Ok(send(&mut self.writer, msg)?)
    }

    /// Sends a raw line, for exercising error paths.
    pub fn send_raw(&mut self, line: &str) -> Result<(), ClientError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        Ok(self.writer.flush()?)
    }

    pub fn recv(&mut self) -> Result<ServerMessage, ClientError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(ClientError::Closed);
        }
        Ok(serde_json::from_str(&line)?)
    }

    /// Resets an episode, returning the reply and the first observation or terminal message.
    pub fn reset(&mut self, req: ResetRequest) -> Result<(ResetReply, ServerMessage), ClientError> {
        self.send(&ClientMessage::Reset(req))?;
        match self.recv()? {
            ServerMessage::Reset(reply) => Ok((reply, self.recv()?)),
            ServerMessage::Error { code, text, .. } => Err(ClientError::Server { code, text }),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    pub fn act(&mut self, index: usize) -> Result<ServerMessage, ClientError> {
        self.send(&ClientMessage::Act { session: None, step: None, index })?;
        self.recv()
    }
}

/// Policy whose decisions come from a remote agent.
///
/// The agent listens on `endpoint`; for each episode it receives a reset
/// reply, then one observation per decision, answering each with an act, and
/// finally a terminal message.
pub struct ExternPolicy {
    endpoint: String,
    name: String,
    conn: Option<(BufReader<TcpStream>, TcpStream)>,
    seed: u64,
    session: Option<(String, FeatureStats)>,
    step: u64,
}

impl ExternPolicy {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let endpoint = endpoint.into();
        Self { name: format!("extern:{endpoint}"), endpoint, conn: None, seed: 0, session: None, step: 0 }
    }

    fn transport(e: impl std::fmt::Display) -> PolicyError {
        PolicyError::Transport(e.to_string())
    }

    fn connection(&mut self) -> Result<&mut (BufReader<TcpStream>, TcpStream), PolicyError> {
        if self.conn.is_none() {
            let stream = TcpStream::connect(&self.endpoint).map_err(Self::transport)?;
            stream.set_nodelay(true).map_err(Self::transport)?;
            let reader = BufReader::new(stream.try_clone().map_err(Self::transport)?);
            self.conn = Some((reader, stream));
        }
        Ok(self.conn.as_mut().expect("connected above"))
    }

    fn push(&mut self, msg: &ServerMessage) -> Result<(), PolicyError> {
        let (_, w) = self.connection()?;
        send(w, msg).map_err(Self::transport)
    }
}

impl Policy for ExternPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&mut self, seed: u64) {
        self.seed = seed;
        self.session = None;
        self.step = 0;
    }

    fn decide(&mut self, dp: &DecisionPoint, state: &WarehouseState) -> Result<Action, PolicyError> {
        if self.session.is_none() {
            let stats = FeatureStats::for_instance(state.instance());
            let id = next_session_id();
            let reply = ResetReply {
                session: id.clone(),
                protocol: PROTOCOL_VERSION.to_string(),
                instance_name: state.instance().name.clone(),
                seed: self.seed,
                stats: stats.clone(),
            };
            self.push(&ServerMessage::Reset(reply))?;
            self.session = Some((id, stats));
        }
        let (id, stats) = self.session.as_ref().expect("session opened above");
        let obs = Observation::build(id, self.step, dp, state, stats);
        self.push(&ServerMessage::Observe(obs))?;
        let (r, _) = self.connection()?;
        let mut line = String::new();
        if r.read_line(&mut line).map_err(Self::transport)? == 0 {
            return Err(PolicyError::Transport("agent closed the connection".into()));
        }
        let index = match serde_json::from_str(&line).map_err(Self::transport)? {
            ClientMessage::Act { index, .. } => index,
            other => return Err(PolicyError::Transport(format!("expected act, got {other:?}"))),
        };
        let action = *dp.candidates.get(index).ok_or(PolicyError::BadIndex { index, len: dp.len() })?;
        self.step += 1;
        Ok(action)
    }

    fn finish(&mut self, metrics: &MetricsReport) -> Result<(), PolicyError> {
        if let Some((id, _)) = self.session.take() {
            self.push(&ServerMessage::Terminal { session: id, metrics: metrics.clone() })?;
        }
        Ok(())
    }
}

/// Agent side of [`ExternPolicy`]: answers observations with `choose` until
/// the episode's terminal message, which is returned.
pub fn agent_episode(
    input: &mut impl BufRead,
    output: &mut impl Write,
    mut choose: impl FnMut(&Observation) -> usize,
) -> Result<MetricsReport, ClientError> {
    loop {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(ClientError::Closed);
        }
        match serde_json::from_str(&line)? {
            ServerMessage::Reset(_) => {}
            ServerMessage::Observe(obs) => {
                let index = choose(&obs);
                send(output, &ClientMessage::Act { session: Some(obs.session.clone()), step: Some(obs.step), index })?;
            }
            ServerMessage::Terminal { metrics, .. } => return Ok(metrics),
            ServerMessage::Error { code, text, .. } => return Err(ClientError::Server { code, text }),
        }
    }
}
