use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use toteflow_core::bench::{emit_csv, emit_json, run_bench, BenchSpec};
use toteflow_core::bq::{build_dataset, write_dataset};
use toteflow_core::gen::{generate, preset};
use toteflow_core::heuristics::{BatchCount, CsghParams, HeuristicKind};
use toteflow_core::oracle::{export_trajectories, replay, solve_exact, DEFAULT_NODE_BUDGET};
use toteflow_core::server::{serve, ExternPolicy};
use toteflow_core::sim::{run_episode, Policy, RandomPolicy, Step};
use toteflow_core::{SystemKind, WarehouseInstance};

#[derive(Parser)]
#[command(name = "toteflow", version, about = "Tote-handling fulfillment simulator and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an instance file from a preset.
    Gen {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        system: Option<System>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a static instance exactly.
    Solve {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write every suffix of the optimal trajectory as training records.
        #[arg(long)]
        export_traj: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_NODE_BUDGET)]
        node_budget: u64,
    },
    /// Run one episode and print its metrics.
    Run(RunArgs),
    /// Serve episodes over TCP.
    Serve {
        #[arg(long, env = "TOTEFLOW_LISTEN", default_value = "127.0.0.1:7878")]
        listen: String,
    },
    /// Run a policy × instance matrix.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        /// Defaults to the spec's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Inferred from the output extension when absent.
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Leave out wall-clock columns so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
    },
    /// Deduplicate a trajectory file into a training dataset.
    Dataset {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    #[value(name = "2d")]
    MultiTote2D,
    #[value(name = "3d")]
    RackClimb3D,
}

impl From<System> for SystemKind {
    fn from(s: System) -> Self {
        match s {
            System::MultiTote2D => SystemKind::MultiTote2D,
            System::RackClimb3D => SystemKind::RackClimb3D,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PolicyName {
    Csgh,
    R3,
    G3,
    Random,
    Oracle,
    Extern,
}

#[derive(Args)]
struct RunArgs {
    /// Instance file; alternatively use --preset.
    #[arg(long = "in", conflicts_with = "preset")]
    input: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    system: Option<System>,
    #[arg(long, value_enum, default_value = "csgh")]
    policy: PolicyName,
    /// Agent endpoint for --policy extern.
    #[arg(long, env = "TOTEFLOW_AGENT")]
    agent: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    /// Count batched orders instead of lines in the tote score.
    #[arg(long)]
    batch_orders: bool,
    /// Newline-delimited decision log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write metrics here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_instance(path: &Path) -> Result<WarehouseInstance> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(WarehouseInstance::from_json(&text)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn instance_for(args: &RunArgs) -> Result<WarehouseInstance> {
    match (&args.input, &args.preset) {
        (Some(path), _) => read_instance(path),
        (None, Some(name)) => {
            let mut cfg = preset(name)?.with_seed(args.seed);
            if let Some(s) = args.system {
                cfg = cfg.with_kind(s.into());
            }
            Ok(generate(&cfg)?)
        }
        (None, None) => bail!("pass --in <file> or --preset <name>"),
    }
}

fn csgh_params(args: &RunArgs, inst: &WarehouseInstance) -> Result<Option<CsghParams>> {
    if args.alpha.is_none() && args.beta.is_none() && args.window.is_none() && !args.batch_orders {
        return Ok(None);
    }
    let mut p = CsghParams::defaults_for(inst);
    p.alpha = args.alpha.unwrap_or(p.alpha);
    p.beta = args.beta.unwrap_or(p.beta);
    p.window = args.window.unwrap_or(p.window);
    if args.batch_orders {
        p.batch_count = BatchCount::Orders;
    }
    p.validate()?;
    Ok(Some(p))
}

fn run(args: RunArgs) -> Result<()> {
    let inst = instance_for(&args)?;
    let metrics = if args.policy == PolicyName::Oracle {
        let r = solve_exact(&inst, DEFAULT_NODE_BUDGET)?;
        let mut state = replay(&inst, &r.trajectory)?;
        match state.next_decision()? {
            Step::Terminal(m) => m,
            Step::Decision(_) => bail!("oracle trajectory did not terminate"),
        }
    } else {
        let mut policy: Box<dyn Policy> = match args.policy {
            PolicyName::Csgh => HeuristicKind::Csgh.build(csgh_params(&args, &inst)?),
            PolicyName::R3 => HeuristicKind::R3.build(None),
            PolicyName::G3 => HeuristicKind::G3.build(None),
            PolicyName::Random => Box::new(RandomPolicy::new(args.seed)),
            PolicyName::Extern => {
                let agent = args.agent.clone().context("--policy extern needs --agent <addr>")?;
                Box::new(ExternPolicy::new(agent))
            }
            PolicyName::Oracle => unreachable!("handled above"),
        };
        let ep = run_episode(inst, &mut policy, args.seed)?;
        if let Some(path) = &args.log {
            let mut out = create(path)?;
            for rec in &ep.log {
                serde_json::to_writer(&mut out, rec)?;
                writeln!(out)?;
            }
            out.flush()?;
        }
        ep.metrics
    };
    let json = serde_json::to_string_pretty(&metrics)?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { preset: name, seed, system, out } => {
            let mut cfg = preset(&name)?.with_seed(seed);
            if let Some(s) = system {
                cfg = cfg.with_kind(s.into());
            }
            std::fs::write(&out, generate(&cfg)?.to_json() + "\n")?;
        }
        Command::Solve { input, out, export_traj, node_budget } => {
            let inst = read_instance(&input)?;
            let r = solve_exact(&inst, node_budget)?;
            std::fs::write(&out, serde_json::to_string_pretty(&r)? + "\n")?;
            if let Some(path) = export_traj {
                let mut w = create(&path)?;
                export_trajectories(&[(&inst, &r)], &mut w)?;
                w.flush()?;
            }
            eprintln!("z* = {} (proved optimal: {}, nodes: {})", r.z_star, r.proved_optimal, r.nodes_expanded);
        }
        Command::Run(args) => run(args)?,
        Command::Serve { listen } => {
            eprintln!("listening on {listen}");
            serve(&listen).with_context(|| format!("serving on {listen}"))?;
        }
        Command::Bench { spec, out, format, no_timing } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: BenchSpec = serde_json::from_str(&text)?;
            let out = out.or_else(|| spec.output.clone()).context("pass --out or set `output` in the spec")?;
            let format = format.unwrap_or(match out.extension().and_then(|e| e.to_str()) {
                Some("json") => Format::Json,
                _ => Format::Csv,
            });
            let results = run_bench(&spec)?;
            let mut w = create(&out)?;
            match format {
                Format::Csv => emit_csv(&results, &mut w, !no_timing)?,
                Format::Json => emit_json(&results, &mut w, !no_timing)?,
            }
            w.flush()?;
            let failed = results.rows.iter().filter(|r| !r.ok).count();
            eprintln!("{} rows ({failed} failed) written to {}", results.rows.len(), out.display());
        }
        Command::Dataset { traj, out } => {
            let file = File::open(&traj).with_context(|| format!("opening {}", traj.display()))?;
            let records = build_dataset(BufReader::new(file))?;
            let mut w = create(&out)?;
            write_dataset(&records, &mut w)?;
            w.flush()?;
            eprintln!("{} records written to {}", records.len(), out.display());
        }
    }
    Ok(())
}
