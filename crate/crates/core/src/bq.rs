//! Bisimulation-quotient abstraction.
//!
//! An [`AbstractKey`] erases robot identities and absolute coordinates:
//! robots are described by what they carry, where they stand relative to
//! stations and tote homes, and when they become free. With the default
//! exact quantization, two states sharing a key have identical futures
//! under every canonical action index.

use crate::domain::{Location, WarehouseInstance};
use crate::sim::{Action, DecisionPoint, Millis, SimError, Stage, Step, WarehouseState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use thiserror::Error;

pub const DATASET_VERSION: &str = "toteflow_bq_v1";
pub const TRAJECTORY_VERSION: &str = "toteflow_traj_v1";

/// Quantization applied when building keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyOptions {
    /// Travel-cost bucket width. 1 ms is exact; anything wider is an
    /// approximate key that may merge states with different futures.
    pub travel_bucket_ms: Millis,
}

impl Default for KeyOptions {
    fn default() -> Self {
        Self { travel_bucket_ms: 1 }
    }
}

impl KeyOptions {
    pub fn lossy(bucket_ms: Millis) -> Self {
        Self { travel_bucket_ms: bucket_ms.max(1) }
    }

    pub fn is_exact(&self) -> bool {
        self.travel_bucket_ms <= 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AbstractKey {
    pub stage: Stage,
    /// Candidate feature rows in canonical order with the mask bit appended; defer last.
    pub candidates: Vec<Vec<i64>>,
    /// Sorted open-line counts of orders not yet complete.
    pub order_residual: Vec<u32>,
    pub station_slack: Vec<u32>,
    /// Identity-free remainder of the state.
    pub context: Vec<i64>,
}

impl AbstractKey {
    /// Flat integer encoding with length prefixes.
    pub fn features(&self) -> Vec<i64> {
        let mut out = vec![self.stage.index() as i64, self.candidates.len() as i64];
        for row in &self.candidates {
            out.push(row.len() as i64);
            out.extend(row);
        }
        out.push(self.order_residual.len() as i64);
        out.extend(self.order_residual.iter().map(|&x| x as i64));
        out.push(self.station_slack.len() as i64);
        out.extend(self.station_slack.iter().map(|&x| x as i64));
        out.push(self.context.len() as i64);
        out.extend(&self.context);
        out
    }

    pub fn digest(&self) -> [u8; 16] {
        let mut h = Sha256::new();
        for x in self.features() {
            h.update(x.to_le_bytes());
        }
        let full: [u8; 32] = h.finalize().into();
        full[..16].try_into().expect("16 bytes")
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.digest())
    }
}

/// Travel columns of each stage's raw feature rows.
fn travel_columns(stage: Stage) -> &'static [usize] {
    match stage {
        Stage::OrderAssign => &[],
        Stage::ToteMatch => &[2, 3],
        Stage::RobotSchedule => &[1],
    }
}

/// Exact abstract key of the pending decision `dp` in `state`.
pub fn abstract_state(state: &WarehouseState, dp: &DecisionPoint) -> AbstractKey {
    abstract_state_with(state, dp, KeyOptions::default())
}

pub fn abstract_state_with(state: &WarehouseState, dp: &DecisionPoint, opts: KeyOptions) -> AbstractKey {
    let bucket = opts.travel_bucket_ms.max(1) as i64;
    let cols = travel_columns(dp.stage);
    let candidates = dp
        .features
        .iter()
        .zip(&dp.mask)
        .map(|(row, &m)| {
            let mut r: Vec<i64> = row
                .iter()
                .enumerate()
                .map(|(j, &x)| if cols.contains(&j) && x >= 0 { x / bucket } else { x })
                .collect();
            r.push(m as i64);
            r
        })
        .collect();
    let inst = state.instance();
    let mut order_residual: Vec<u32> = inst
        .orders
        .iter()
        .filter(|o| state.order_status(o.id) != crate::sim::OrderStatus::Complete)
        .map(|o| state.order_open_skus(o.id).count() as u32)
        .collect();
    order_residual.sort_unstable();
    let station_slack = inst.workstations.iter().map(|w| state.station_slack(w.id)).collect();
    AbstractKey {
        stage: dp.stage,
        candidates,
        order_residual,
        station_slack,
        context: state.context_signature(opts.travel_bucket_ms),
    }
}

#[derive(Debug, Error)]
pub enum BisimError {
    #[error("states do not share an abstract key")]
    KeyMismatch,
    #[error("state has no pending decision")]
    NotAtDecision,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Where a one-step successor lands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Successor {
    Decision(String),
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub action_index: usize,
    pub reward_a: f64,
    pub reward_b: f64,
    pub successor_a: Successor,
    pub successor_b: Successor,
}

fn pending_key(state: &mut WarehouseState, opts: KeyOptions) -> Result<AbstractKey, BisimError> {
    match state.next_decision()? {
        Step::Decision(dp) => Ok(abstract_state_with(state, &dp, opts)),
        Step::Terminal(_) => Err(BisimError::NotAtDecision),
    }
}

fn successor(state: &WarehouseState, index: usize, opts: KeyOptions) -> Result<(f64, Successor), SimError> {
    let mut next = state.clone();
    next.apply_index(index)?;
    let succ = match next.next_decision()? {
        Step::Decision(dp) => Successor::Decision(abstract_state_with(&next, &dp, opts).hash_hex()),
        Step::Terminal(_) => Successor::Terminal,
    };
    Ok((state.z_final() as f64 - next.z_final() as f64, succ))
}

/// Applies every feasible canonical action in both states and compares
/// the step reward and the successor key. `samples` caps the number of
/// actions tried (0 means all).
pub fn check_bisimulation(
    a: &WarehouseState,
    b: &WarehouseState,
    samples: usize,
    opts: KeyOptions,
) -> Result<Option<Counterexample>, BisimError> {
    let (mut a, mut b) = (a.clone(), b.clone());
    let ka = pending_key(&mut a, opts)?;
    let kb = pending_key(&mut b, opts)?;
    if ka != kb {
        return Err(BisimError::KeyMismatch);
    }
    let dp = a.pending_decision().expect("pending").clone();
    let limit = if samples == 0 { usize::MAX } else { samples };
    for (index, _) in dp.mask.iter().enumerate().filter(|(_, &m)| m).take(limit) {
        let (reward_a, successor_a) = successor(&a, index, opts)?;
        let (reward_b, successor_b) = successor(&b, index, opts)?;
        if reward_a != reward_b || successor_a != successor_b {
            return Ok(Some(Counterexample { action_index: index, reward_a, reward_b, successor_a, successor_b }));
        }
    }
    Ok(None)
}

/// Mirrors every location across the aisle axis, keeping entity ids.
pub fn mirror_aisles(inst: &WarehouseInstance) -> WarehouseInstance {
    let mut out = inst.clone();
    let aisles = inst.layout.aisles;
    let flip = |l: Location| Location::new(aisles - 1 - l.aisle, l.column, l.level);
    for t in &mut out.totes {
        t.home = flip(t.home);
        if let crate::domain::TotePlace::InStorage(loc) = t.place {
            t.place = crate::domain::TotePlace::InStorage(flip(loc));
        }
    }
    for r in &mut out.robots {
        r.position = flip(r.position);
    }
    for w in &mut out.workstations {
        w.position = flip(w.position);
    }
    out
}

/// Reorders the robot list by `perm` (new robot i is old robot `perm[i]`) and renumbers ids.
pub fn permute_robots(inst: &WarehouseInstance, perm: &[usize]) -> WarehouseInstance {
    assert_eq!(perm.len(), inst.robots.len(), "permutation covers every robot");
    let mut out = inst.clone();
    out.robots = perm
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut r = inst.robots[p].clone();
            r.id = crate::domain::RobotId(i as u32);
            r
        })
        .collect();
    out
}

// ----- trajectory and dataset files ---------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub abstract_state_key: AbstractKey,
    pub stage: Stage,
    pub action: Action,
    /// Candidates in canonical order.
    pub candidates: Vec<Action>,
    pub instance_name: String,
    pub step_index: usize,
    /// First step of the suffix this record belongs to.
    pub subsequence_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub key_hash: String,
    pub key_features: Vec<i64>,
    pub stage: Stage,
    pub action_index: usize,
    pub multiplicity: u64,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: unsupported version {found:?}")]
    Version { line: usize, found: String },
    #[error("line {line}: action {action:?} is not among the recorded candidates")]
    CorruptTrajectory { line: usize, action: Action },
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
}

/// Reads a trajectory file and merges repeated (key, action) pairs.
pub fn build_dataset(reader: impl BufRead) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut out: Vec<DatasetRecord> = Vec::new();
    let mut seen: HashMap<(String, usize), usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|source| DatasetError::Json { line: i + 1, source })?;
        if let Some(v) = value.get("version") {
            let found = v.as_str().unwrap_or_default().to_string();
            if found != TRAJECTORY_VERSION {
                return Err(DatasetError::Version { line: i + 1, found });
            }
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_value(value).map_err(|source| DatasetError::Json { line: i + 1, source })?;
        let action_index = rec
            .candidates
            .iter()
            .position(|&c| c == rec.action)
            .filter(|&j| j < rec.abstract_state_key.candidates.len())
            .ok_or(DatasetError::CorruptTrajectory { line: i + 1, action: rec.action })?;
        let key_hash = rec.abstract_state_key.hash_hex();
        match seen.get(&(key_hash.clone(), action_index)) {
            Some(&j) => out[j].multiplicity += 1,
            None => {
                seen.insert((key_hash.clone(), action_index), out.len());
                out.push(DatasetRecord {
                    key_hash,
                    key_features: rec.abstract_state_key.features(),
                    stage: rec.stage,
                    action_index,
                    multiplicity: 1,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_dataset(records: &[DatasetRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string(&Header { version: DATASET_VERSION.into() })?)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_dataset(reader: impl BufRead) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            let h: Header = serde_json::from_str(&line).map_err(|source| DatasetError::Json { line: 1, source })?;
            if h.version != DATASET_VERSION {
                return Err(DatasetError::Version { line: 1, found: h.version });
            }
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatasetError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub(crate) fn write_trajectory_header(mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string(&Header { version: TRAJECTORY_VERSION.into() })?)
}
