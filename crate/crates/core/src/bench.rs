//! Policy × instance experiment matrices with CSV and JSON emission.

use crate::domain::{MetricsReport, SystemKind, WarehouseInstance};
use crate::gen::{generate, preset};
use crate::heuristics::HeuristicKind;
use crate::oracle::{average_gap, micro_1, replay, solve_exact, DEFAULT_NODE_BUDGET};
use crate::server::ExternPolicy;
use crate::sim::{run_episode, Policy, RandomPolicy, Stage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

pub const TOOL_VERSION: &str = concat!("toteflow ", env!("CARGO_PKG_VERSION"));

/// Policy label of the exact solver.
pub const ORACLE: &str = "oracle";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench spec needs at least one instance")]
    NoInstances,
    #[error("bench spec needs at least one policy")]
    NoPolicies,
    #[error("instance entry {0} has no seeds")]
    NoSeeds(usize),
    #[error("instance entry {0} needs exactly one of `preset` and `file`")]
    InstanceSource(usize),
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
    #[error("repetitions must be at least 1")]
    Repetitions,
    #[error("instance {name}: {reason}")]
    Instance { name: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRef {
    /// Preset label, or `micro-1` for the hand-built fixture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Instance file; seeds then only label replicates and seed policies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemKind>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyRef {
    /// `csgh`, `r3`, `g3`, `random` or `oracle`.
    Builtin(String),
    Extern {
        #[serde(rename = "extern")]
        endpoint: String,
    },
}

impl PolicyRef {
    pub fn label(&self) -> String {
        match self {
            PolicyRef::Builtin(name) => name.clone(),
            PolicyRef::Extern { endpoint } => format!("extern:{endpoint}"),
        }
    }

    fn check(&self) -> Result<(), BenchError> {
        match self {
            PolicyRef::Builtin(n) if n == ORACLE || n == "random" || HeuristicKind::from_name(n).is_some() => Ok(()),
            PolicyRef::Builtin(n) => Err(BenchError::UnknownPolicy(n.clone())),
            PolicyRef::Extern { .. } => Ok(()),
        }
    }
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub instances: Vec<InstanceRef>,
    pub policies: Vec<PolicyRef>,
    #[serde(default = "one")]
    pub repetitions: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Policy label the gap column is measured against; `oracle` by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_budget: Option<u64>,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.instances.is_empty() {
            return Err(BenchError::NoInstances);
        }
        if self.policies.is_empty() {
            return Err(BenchError::NoPolicies);
        }
        if self.repetitions == 0 {
            return Err(BenchError::Repetitions);
        }
        for (i, r) in self.instances.iter().enumerate() {
            if r.seeds.is_empty() {
                return Err(BenchError::NoSeeds(i));
            }
            if r.preset.is_some() == r.file.is_some() {
                return Err(BenchError::InstanceSource(i));
            }
        }
        self.policies.iter().try_for_each(PolicyRef::check)
    }

    /// First 16 hex digits of the SHA-256 of the spec's JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }

    fn baseline(&self) -> String {
        self.baseline.clone().unwrap_or_else(|| ORACLE.to_string())
    }
}

/// Decision latency percentiles in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Latency {
    pub p50_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub instance: String,
    pub system: SystemKind,
    pub seed: u64,
    pub repetition: u32,
    pub policy: String,
    pub ok: bool,
    pub z_retrievals: Option<u64>,
    pub z_returns: Option<u64>,
    pub z_final: Option<u64>,
    /// Simulation seconds.
    pub makespan_s: Option<f64>,
    /// Relative gap to the baseline policy on the same run, in percent.
    pub gap_pct: Option<f64>,
    pub proved_optimal: Option<bool>,
    /// Wall-clock seconds of decision-making plus simulation.
    pub runtime_s: Option<f64>,
    /// Per stage, in order-assign, tote-match, robot-schedule order.
    pub latency: Option<[Latency; 3]>,
    pub error: Option<String>,
}

impl BenchRow {
    /// The row without its wall-clock fields, which is a pure function of
    /// (instance, seed, policy).
    pub fn deterministic(&self) -> BenchRow {
        BenchRow { runtime_s: None, latency: None, ..self.clone() }
    }

    fn failed(mut self, reason: String) -> Self {
        self.ok = false;
        self.error = Some(reason);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub instance: String,
    pub system: SystemKind,
    pub policy: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_z_final: Option<f64>,
    pub std_z_final: Option<f64>,
    pub mean_makespan_s: Option<f64>,
    pub mean_runtime_s: Option<f64>,
    /// Average relative gap to the baseline over runs where both succeeded.
    pub average_gap_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMeta {
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub baseline: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResults {
    pub meta: BenchMeta,
    pub rows: Vec<BenchRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Resolves an instance reference for one seed.
pub fn load_instance(r: &InstanceRef, seed: u64) -> Result<WarehouseInstance, BenchError> {
    let fail = |name: &str, reason: String| BenchError::Instance { name: name.to_string(), reason };
    match (&r.preset, &r.file) {
        (Some(name), None) if name == "micro-1" => Ok(micro_1()),
        (Some(name), None) => {
            let mut cfg = preset(name).map_err(|e| fail(name, e.to_string()))?.with_seed(seed);
            if let Some(kind) = r.system {
                cfg = cfg.with_kind(kind);
            }
            generate(&cfg).map_err(|e| fail(name, e.to_string()))
        }
        (None, Some(path)) => {
            let name = path.display().to_string();
            let text = std::fs::read_to_string(path).map_err(|e| fail(&name, e.to_string()))?;
            WarehouseInstance::from_json(&text).map_err(|e| fail(&name, e.to_string()))
        }
        _ => Err(fail("?", "needs exactly one of preset and file".into())),
    }
}

/// Nearest-rank percentile of `values`; 0 when empty.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn fill(mut row: BenchRow, m: &MetricsReport) -> BenchRow {
    row.ok = true;
    row.z_retrievals = Some(m.z_retrievals);
    row.z_returns = Some(m.z_returns);
    row.z_final = Some(m.z_final);
    row.makespan_s = Some(m.makespan);
    row
}

fn run_one(inst: &WarehouseInstance, policy: &PolicyRef, seed: u64, budget: u64, row: BenchRow) -> BenchRow {
    if let PolicyRef::Builtin(name) = policy {
        if name == ORACLE {
            let started = Instant::now();
            let result = solve_exact(inst, budget).and_then(|r| replay(inst, &r.trajectory).map(|s| (r, s)));
            return match result {
                Ok((r, mut state)) => {
                    let m = match state.next_decision() {
                        Ok(crate::sim::Step::Terminal(m)) => m,
                        _ => return row.failed("oracle trajectory did not terminate".into()),
                    };
                    let mut row = fill(row, &m);
                    row.proved_optimal = Some(r.proved_optimal);
                    row.runtime_s = Some(started.elapsed().as_secs_f64());
                    row
                }
                Err(e) => row.failed(e.to_string()),
            };
        }
    }
    let mut p: Box<dyn Policy> = match policy {
        PolicyRef::Builtin(n) if n == "random" => Box::new(RandomPolicy::new(seed)),
        PolicyRef::Builtin(n) => HeuristicKind::from_name(n).expect("validated").build(None),
        PolicyRef::Extern { endpoint } => Box::new(ExternPolicy::new(endpoint.clone())),
    };
    match run_episode(inst.clone(), &mut p, seed) {
        Ok(ep) => {
            let mut per_stage: [Vec<f64>; 3] = Default::default();
            for (rec, &dt) in ep.actions.iter().zip(&ep.decision_latency) {
                per_stage[rec.stage.index()].push(dt * 1000.0);
            }
            let mut row = fill(row, &ep.metrics);
            row.runtime_s = Some(ep.metrics.runtime);
            row.latency = Some(Stage::ALL.map(|s| Latency {
                p50_ms: percentile(&per_stage[s.index()], 50.0),
                p99_ms: percentile(&per_stage[s.index()], 99.0),
            }));
            row
        }
        Err(e) => row.failed(e.to_string()),
    }
}

/// Runs every (instance, seed, repetition, policy) cell, in parallel, in a
/// deterministic row order. Failures are recorded in their rows.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchResults, BenchError> {
    spec.validate()?;
    let budget = spec.node_budget.unwrap_or(DEFAULT_NODE_BUDGET);
    let mut cells = Vec::new();
    for r in &spec.instances {
        for &seed in &r.seeds {
            let inst = load_instance(r, seed)?;
            let system = inst.kind;
            let label = r.preset.clone().unwrap_or_else(|| inst.name.clone());
            for repetition in 0..spec.repetitions {
                for p in &spec.policies {
                    cells.push((inst.clone(), label.clone(), system, seed, repetition, p.clone()));
                }
            }
        }
    }
    let mut rows: Vec<BenchRow> = cells
        .into_par_iter()
        .map(|(inst, instance, system, seed, repetition, policy)| {
            let row = BenchRow {
                instance,
                system,
                seed,
                repetition,
                policy: policy.label(),
                ok: false,
                z_retrievals: None,
                z_returns: None,
                z_final: None,
                makespan_s: None,
                gap_pct: None,
                proved_optimal: None,
                runtime_s: None,
                latency: None,
                error: None,
            };
            run_one(&inst, &policy, seed, budget, row)
        })
        .collect();
    let baseline = spec.baseline();
    let base: BTreeMap<(String, u64, u32), u64> = rows
        .iter()
        .filter(|r| r.policy == baseline && r.ok)
        .map(|r| ((r.instance.clone(), r.seed, r.repetition), r.z_final.expect("ok row has z")))
        .collect();
    for row in &mut rows {
        if let (Some(z), Some(&b)) = (row.z_final, base.get(&(row.instance.clone(), row.seed, row.repetition))) {
            row.gap_pct = average_gap(&[z as f64], &[b as f64]).ok();
        }
    }
    let aggregates = aggregate(&rows, &base);
    let mut seeds: Vec<u64> = spec.instances.iter().flat_map(|r| r.seeds.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let meta = BenchMeta { tool_version: TOOL_VERSION.to_string(), config_hash: spec.config_hash(), seeds, baseline };
    Ok(BenchResults { meta, rows, aggregates })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn aggregate(rows: &[BenchRow], base: &BTreeMap<(String, u64, u32), u64>) -> Vec<Aggregate> {
    let mut groups: Vec<((String, SystemKind, String), Vec<&BenchRow>)> = Vec::new();
    for r in rows {
        let key = (r.instance.clone(), r.system, r.policy.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((instance, system, policy), g)| {
            let ok: Vec<&BenchRow> = g.iter().copied().filter(|r| r.ok).collect();
            let z: Vec<f64> = ok.iter().filter_map(|r| r.z_final).map(|z| z as f64).collect();
            let std = mean(&z).map(|m| (z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / z.len() as f64).sqrt());
            let (p, b): (Vec<f64>, Vec<f64>) = ok
                .iter()
                .filter_map(|r| {
                    let b = base.get(&(r.instance.clone(), r.seed, r.repetition))?;
                    Some((r.z_final? as f64, *b as f64))
                })
                .unzip();
            Aggregate {
                instance,
                system,
                policy,
                runs: g.len(),
                failed: g.len() - ok.len(),
                mean_z_final: mean(&z),
                std_z_final: std,
                mean_makespan_s: mean(&ok.iter().filter_map(|r| r.makespan_s).collect::<Vec<_>>()),
                mean_runtime_s: mean(&ok.iter().filter_map(|r| r.runtime_s).collect::<Vec<_>>()),
                average_gap_pct: average_gap(&p, &b).ok(),
            }
        })
        .collect()
}

const COLUMNS: [&str; 14] = [
    "tool_version",
    "config_hash",
    "instance",
    "system",
    "seed",
    "repetition",
    "policy",
    "status",
    "z_retrievals",
    "z_returns",
    "z_final",
    "makespan_s",
    "gap_pct",
    "proved_optimal",
];

const TIMING_COLUMNS: [&str; 7] =
    ["runtime_s", "oa_p50_ms", "oa_p99_ms", "tm_p50_ms", "tm_p99_ms", "rs_p50_ms", "rs_p99_ms"];

fn f3(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with one header line and one line per row. Wall-clock columns are
/// included only when `timing` is set.
pub fn emit_csv(results: &BenchResults, mut out: impl Write, timing: bool) -> io::Result<()> {
    let mut header: Vec<&str> = COLUMNS.to_vec();
    if timing {
        header.extend(TIMING_COLUMNS);
    }
    header.push("error");
    writeln!(out, "{}", header.join(","))?;
    for r in &results.rows {
        let mut f = vec![
            results.meta.tool_version.clone(),
            results.meta.config_hash.clone(),
            r.instance.clone(),
            format!("{:?}", r.system),
            r.seed.to_string(),
            r.repetition.to_string(),
            r.policy.clone(),
            if r.ok { "ok" } else { "failed" }.to_string(),
            r.z_retrievals.map(|v| v.to_string()).unwrap_or_default(),
            r.z_returns.map(|v| v.to_string()).unwrap_or_default(),
            r.z_final.map(|v| v.to_string()).unwrap_or_default(),
            f3(r.makespan_s),
            f3(r.gap_pct),
            r.proved_optimal.map(|v| v.to_string()).unwrap_or_default(),
        ];
        if timing {
            f.push(f3(r.runtime_s));
            for s in 0..3 {
                f.push(f3(r.latency.map(|l| l[s].p50_ms)));
                f.push(f3(r.latency.map(|l| l[s].p99_ms)));
            }
        }
        f.push(r.error.clone().unwrap_or_default());
        let line: Vec<String> = f.iter().map(|s| csv_field(s)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

fn round3(v: Option<f64>) -> Option<f64> {
    v.map(|x| (x * 1000.0).round() / 1000.0)
}

/// Pretty JSON of meta, rows and aggregates with floats rounded to 3 decimals.
pub fn emit_json(results: &BenchResults, mut out: impl Write, timing: bool) -> io::Result<()> {
    let mut r = results.clone();
    for row in &mut r.rows {
        if !timing {
            *row = row.deterministic();
        }
        row.makespan_s = round3(row.makespan_s);
        row.gap_pct = round3(row.gap_pct);
        row.runtime_s = round3(row.runtime_s);
        if let Some(l) = &mut row.latency {
            for s in l.iter_mut() {
                s.p50_ms = round3(Some(s.p50_ms)).unwrap_or_default();
                s.p99_ms = round3(Some(s.p99_ms)).unwrap_or_default();
            }
        }
    }
    for a in &mut r.aggregates {
        a.mean_z_final = round3(a.mean_z_final);
        a.std_z_final = round3(a.std_z_final);
        a.mean_makespan_s = round3(a.mean_makespan_s);
        a.mean_runtime_s = if timing { round3(a.mean_runtime_s) } else { None };
        a.average_gap_pct = round3(a.average_gap_pct);
    }
    serde_json::to_writer_pretty(&mut out, &r).map_err(io::Error::other)?;
    writeln!(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(policies: &[&str]) -> BenchSpec {
        BenchSpec {
            instances: vec![InstanceRef { preset: Some("micro-1".into()), file: None, system: None, seeds: vec![0] }],
            policies: policies.iter().map(|p| PolicyRef::Builtin(p.to_string())).collect(),
            repetitions: 1,
            output: None,
            baseline: None,
            node_budget: None,
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn empty_results_give_header_only() {
        let mut r = run_bench(&spec(&["csgh"])).unwrap();
        r.rows.clear();
        let mut out = Vec::new();
        emit_csv(&r, &mut out, true).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1);
    }

    #[test]
    fn one_row_gives_two_lines() {
        let r = run_bench(&spec(&["csgh"])).unwrap();
        assert_eq!(r.rows.len(), 1);
        let mut out = Vec::new();
        emit_csv(&r, &mut out, true).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 2);
    }

    #[test]
    fn validation_rejects_empty_and_unknown() {
        let mut s = spec(&["csgh"]);
        s.policies.clear();
        assert!(matches!(s.validate(), Err(BenchError::NoPolicies)));
        let s = spec(&["nope"]);
        assert!(matches!(s.validate(), Err(BenchError::UnknownPolicy(_))));
        let mut s = spec(&["csgh"]);
        s.instances.clear();
        assert!(matches!(s.validate(), Err(BenchError::NoInstances)));
    }

    #[test]
    fn spec_parses_builtin_and_extern_policies() {
        let s: BenchSpec = serde_json::from_str(
            r#"{"instances":[{"preset":"S-1","seeds":[0,1]}],"policies":["csgh",{"extern":"127.0.0.1:9"}]}"#,
        )
        .unwrap();
        assert_eq!(s.repetitions, 1);
        assert_eq!(s.policies[1], PolicyRef::Extern { endpoint: "127.0.0.1:9".into() });
    }
}
