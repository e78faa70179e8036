//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use common::{brute_force_assignment, episode_violations, mis_keyed_pair, spawn_server, symmetric_pairs, wire_round_trip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;
use toteflow_core::bq::{check_bisimulation, KeyOptions};
use toteflow_core::gen::{generate, preset};
use toteflow_core::heuristics::{assignment_weight, hungarian_max_weight, CsghPolicy, HeuristicKind};
use toteflow_core::oracle::{average_gap, enumerate_exhaustive, micro_instance, solve_exact, DEFAULT_NODE_BUDGET};
use toteflow_core::sim::{run_episode, RandomPolicy};
use toteflow_core::{SystemKind, WarehouseInstance};

const KINDS: [SystemKind; 2] = [SystemKind::MultiTote2D, SystemKind::RackClimb3D];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn instance(name: &str, seed: u64, kind: SystemKind) -> WarehouseInstance {
    generate(&preset(name).unwrap().with_seed(seed).with_kind(kind)).unwrap()
}

fn oracle_exactness() -> Outcome {
    let started = Instant::now();
    let mut equal = 0;
    let mut notes = Vec::new();
    for seed in 0..100 {
        let inst = micro_instance(seed);
        let reference = enumerate_exhaustive(&inst, 200_000_000);
        let oracle = solve_exact(&inst, DEFAULT_NODE_BUDGET);
        match (oracle, reference) {
            (Ok(r), Ok(z)) if r.proved_optimal && r.z_star == z => equal += 1,
            (o, z) => notes.push(format!("seed {seed}: {:?} vs {:?}", o.map(|r| r.z_star), z.map_err(|e| e.to_string()))),
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let mut detail = format!("{equal}/100 equal, {secs:.1} s (limit 60 s)");
    if let Some(n) = notes.first() {
        detail += &format!("; first mismatch {n}");
    }
    outcome(equal == 100 && secs < 60.0, detail)
}

fn oracle_floor() -> Outcome {
    let started = Instant::now();
    let cells: Vec<(&str, u64, SystemKind)> = ["S-1", "S-2", "S-3"]
        .into_iter()
        .flat_map(|p| (0..5).flat_map(move |s| KINDS.map(|k| (p, s, k))))
        .collect();
    let failures: Vec<String> = cells
        .par_iter()
        .filter_map(|&(p, seed, kind)| {
            let inst = instance(p, seed, kind);
            let r = match solve_exact(&inst, DEFAULT_NODE_BUDGET) {
                Ok(r) => r,
                Err(e) => return Some(format!("{p}/{seed}/{kind:?}: {e}")),
            };
            if !r.proved_optimal {
                return Some(format!("{p}/{seed}/{kind:?}: not proved"));
            }
            let mut zs: Vec<(String, u64)> = HeuristicKind::ALL
                .iter()
                .map(|k| (k.name().to_string(), run_episode(inst.clone(), &mut k.build(None), seed).unwrap().metrics.z_final))
                .collect();
            zs.push(("random".into(), run_episode(inst.clone(), &mut RandomPolicy::new(seed), seed).unwrap().metrics.z_final));
            zs.iter()
                .find(|(_, z)| *z < r.z_star)
                .map(|(n, z)| format!("{p}/{seed}/{kind:?}: {n} {z} < oracle {}", r.z_star))
        })
        .collect();
    let secs = started.elapsed().as_secs_f64();
    let mut detail = format!("{} of {} cells floor every policy, {secs:.1} s (limit 600 s)", cells.len() - failures.len(), cells.len());
    if let Some(f) = failures.first() {
        detail += &format!("; {f}");
    }
    outcome(failures.is_empty() && secs < 600.0, detail)
}

fn gap_formula() -> Outcome {
    let g = average_gap(&[103.0], &[100.0]).unwrap();
    outcome(g == 3.0, format!("average_gap([103],[100]) = {g:.4}"))
}

fn heuristic_ordering() -> Outcome {
    let started = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in KINDS {
        let z: Vec<[u64; 3]> = (0..30u64)
            .into_par_iter()
            .map(|seed| {
                let inst = instance("L-1", seed, kind);
                HeuristicKind::ALL.map(|k| run_episode(inst.clone(), &mut k.build(None), seed).unwrap().metrics.z_final)
            })
            .collect();
        let mean = |i: usize| z.iter().map(|r| r[i] as f64).sum::<f64>() / z.len() as f64;
        let (csgh, r3, g3) = (mean(0), mean(1), mean(2));
        pass &= csgh < g3 && g3 < r3 && csgh <= 0.95 * r3;
        parts.push(format!("{kind:?} C-SGH {csgh:.1} G3 {g3:.1} R3 {r3:.1} ratio {:.3}", csgh / r3));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(pass && secs < 900.0, format!("{}; {secs:.1} s (limit 900 s, ratio limit 0.95)", parts.join("; ")))
}

fn simulator_properties() -> Outcome {
    let bad: Vec<(u64, Vec<String>)> =
        (0..1000u64).into_par_iter().map(|s| (s, episode_violations(s))).filter(|(_, v)| !v.is_empty()).collect();
    let mut detail = format!("1000 episodes, {} with violations", bad.len());
    if let Some((s, v)) = bad.first() {
        detail += &format!("; seed {s}: {}", v[0]);
    }
    outcome(bad.is_empty(), detail)
}

fn bisimulation() -> Outcome {
    let mut pairs = 0;
    let mut seed = 0;
    let mut error = None;
    while pairs < 500 && error.is_none() {
        match symmetric_pairs(seed) {
            Ok(n) => pairs += n,
            Err(e) => error = Some(e),
        }
        seed += 1;
    }
    let (a, b) = mis_keyed_pair();
    let negative = matches!(check_bisimulation(&a, &b, 0, KeyOptions::lossy(2_000)), Ok(Some(_)));
    let mut detail = format!("{pairs} symmetric pairs sound, negative fixture counterexample: {negative}");
    if let Some(e) = &error {
        detail += &format!("; {e}");
    }
    outcome(error.is_none() && pairs >= 500 && negative, detail)
}

fn hungarian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = 0;
    for _ in 0..500 {
        let n = rng.gen_range(1..=7);
        let w: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(0..100) as f64).collect()).collect();
        let km = assignment_weight(&w, &hungarian_max_weight(&w).unwrap());
        ok += (km == brute_force_assignment(&w)) as usize;
    }
    outcome(ok == 500, format!("{ok}/500 matrices match the permutation maximum"))
}

fn wire() -> Outcome {
    let addr = spawn_server();
    let mut ok = 0;
    let mut first_err = None;
    for seed in 0..20u64 {
        let inst = instance("S-1", seed, KINDS[(seed % 2) as usize]);
        match wire_round_trip(addr, &inst, seed) {
            Ok(_) => ok += 1,
            Err(e) => {
                first_err.get_or_insert(format!("seed {seed}: {e}"));
            }
        }
    }
    outcome(ok == 20, format!("{ok}/20 runs byte-identical{}", first_err.map(|e| format!("; {e}")).unwrap_or_default()))
}

fn throughput() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in KINDS {
        let inst = instance("L-1", 0, kind);
        let started = Instant::now();
        let ep = run_episode(inst, &mut CsghPolicy::new(), 0).unwrap();
        let secs = started.elapsed().as_secs_f64();
        let p99 = toteflow_core::bench::percentile(&ep.decision_latency, 99.0) * 1000.0;
        pass &= secs < 60.0 && p99 < 10.0;
        parts.push(format!("{kind:?} {secs:.2} s, p99 {p99:.3} ms over {} decisions", ep.actions.len()));
    }
    outcome(pass, format!("{} (limits 60 s, 10 ms)", parts.join("; ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle exactness", oracle_exactness),
        ("oracle floor", oracle_floor),
        ("gap formula", gap_formula),
        ("heuristic ordering", heuristic_ordering),
        ("simulator properties", simulator_properties),
        ("bisimulation soundness", bisimulation),
        ("hungarian equivalence", hungarian),
        ("wire round-trip", wire),
        ("throughput", throughput),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += !o.pass as usize;
        println!("{} {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
