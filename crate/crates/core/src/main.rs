use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vnpu_core::allocator::{allocate_vnpu, optimal_ratio, split_table};
use vnpu_core::engine::{check_log, read_jsonl, Policy};
use vnpu_core::harness::{self, HarnessError, Scenario, SweepDimension};
use vnpu_core::neuisa::{lower_graph, DEFAULT_REDUCTION_OVERHEAD};
use vnpu_core::workload::{load_trace, ComputeProfile};

/// vNPU sizing, uTop lowering and multi-tenant NPU scheduling simulation.
#[derive(Parser)]
#[command(name = "vnpu", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Also write events.jsonl for `run`.
    #[arg(long, global = true)]
    emit_event_log: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Size and place the vNPUs of a scenario, or score splits of one profile.
    Allocate {
        scenario: Option<PathBuf>,
        #[arg(long, requires_all = ["v", "budget"], conflicts_with = "scenario")]
        m: Option<f64>,
        #[arg(long)]
        v: Option<f64>,
        #[arg(long)]
        budget: Option<u32>,
    },
    /// Lower a scenario's workloads, or one trace file, to uTop listings.
    Lower {
        scenario: Option<PathBuf>,
        #[arg(long, conflicts_with = "scenario")]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_x: usize,
        #[arg(long, default_value_t = 4)]
        n_y: usize,
    },
    /// Run the full pipeline and write report.json.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        policy: Option<Policy>,
    },
    /// Run several policies on the same scenario and write comparison.csv.
    Compare {
        scenario: PathBuf,
        /// Comma separated; the first one is the normalization baseline.
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<Policy>>,
    },
    /// Repeat a comparison over EU counts (`4+4`) or HBM bandwidths (GB/s).
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        dimension: SweepDimension,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<Policy>>,
    },
    /// Check a scenario, a trace file or an event log.
    Validate {
        scenario: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["scenario", "events"])]
        trace: Option<PathBuf>,
        #[arg(long, conflicts_with = "scenario")]
        events: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        num_ves: u32,
        #[arg(long, default_value_t = 256)]
        preemption_cycles: u64,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            msg: e.to_string(),
        }
    }
}

fn input(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        msg: msg.to_string(),
    }
}

type Res = Result<(), Failure>;

fn load(path: &Path, c: &Common) -> Result<Scenario, Failure> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = c.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn allocate_cmd(c: &Common, scenario: Option<PathBuf>, m: Option<f64>, v: Option<f64>, budget: Option<u32>) -> Res {
    if let (Some(m), Some(v), Some(n)) = (m, v, budget) {
        let p = ComputeProfile::new(m, v);
        match optimal_ratio(p) {
            Ok(k) => println!("optimal n_m/n_v = {k:.4}"),
            Err(e) => println!("optimal ratio: {e}"),
        }
        let rows = split_table(p, n).map_err(input)?;
        let best = allocate_vnpu(p, n).map_err(input)?;
        println!("n_m n_v utilization time");
        for r in rows {
            let mark = if (r.n_m, r.n_v) == best { " *" } else { "" };
            println!("{:>3} {:>3} {:>11.6} {:.6}{mark}", r.n_m, r.n_v, r.utilization, r.time);
        }
        return Ok(());
    }
    let path = scenario.ok_or_else(|| input("give a scenario file or --m/--v/--budget"))?;
    let s = load(&path, c)?;
    let graphs = harness::load_workloads(&s)?;
    let plans = harness::allocate(&s, &graphs)?;
    for p in &plans {
        println!(
            "{}: {} m={:.3} v={:.3} -> {} ME + {} VE, {} SRAM / {} HBM segments on pNPU {}",
            p.id, p.workload, p.m, p.v, p.n_m, p.n_v, p.sram_segments, p.hbm_segments, p.pnpu
        );
    }
    let out = harness::write_allocation(&c.out_dir, &plans)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn lower_cmd(c: &Common, scenario: Option<PathBuf>, trace: Option<PathBuf>, n_x: usize, n_y: usize) -> Res {
    if let Some(t) = trace {
        let g = load_trace(&t).map_err(|e| input(format!("{}: {e}", t.display())))?;
        let table = lower_graph(&g, n_x, n_y, DEFAULT_REDUCTION_OVERHEAD).map_err(input)?;
        print!("{}", table.listing());
        return Ok(());
    }
    let path = scenario.ok_or_else(|| input("give a scenario file or --trace"))?;
    let prep = harness::prepare(&load(&path, c)?)?;
    for p in harness::write_lowered(&c.out_dir, &prep)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run_cmd(c: &Common, path: &Path, policy: Option<Policy>) -> Res {
    let s = load(path, c)?;
    let policy = policy.unwrap_or(s.policy);
    let prep = harness::prepare(&s)?;
    let out = harness::run_prepared(&prep, policy, c.emit_event_log)?;
    harness::write_run(&c.out_dir, &prep, &out)?;
    let m = &out.report.metrics;
    println!("policy {policy}, seed {}, makespan {} cycles{}", s.seed, m.makespan,
        if m.truncated { " (truncated)" } else { "" });
    for v in &m.vnpus {
        println!(
            "  {} ({}): {:.3} req/Mcycle, avg {:.0}, p95 {}, p99 {} cycles",
            v.id, v.label, v.throughput, v.avg_latency_cycles, v.p95_latency_cycles, v.p99_latency_cycles
        );
    }
    for core in &m.cores {
        println!(
            "  core {}: ME {:.3}, VE {:.3}, HBM {:.3} utilization",
            core.core, core.me_utilization, core.ve_utilization, core.hbm_utilization
        );
    }
    println!("wrote {}", c.out_dir.join("report.json").display());
    Ok(())
}

fn compare_cmd(c: &Common, path: &Path, policies: Option<Vec<Policy>>) -> Res {
    let s = load(path, c)?;
    let policies = policies.unwrap_or_else(|| s.policies.clone());
    let prep = harness::prepare(&s)?;
    let cmp = harness::compare(&prep, &policies)?;
    harness::write_comparison(&c.out_dir, &cmp)?;
    for r in cmp.rows.iter().filter(|r| r.metric == "aggregate_throughput") {
        println!("{:>10}: throughput {:.3} ({:.3}x)", r.policy.name(), r.value, r.normalized);
    }
    println!("wrote {}", c.out_dir.join("comparison.csv").display());
    Ok(())
}

fn sweep_cmd(c: &Common, path: &Path, dim: SweepDimension, values: &[String], policies: Option<Vec<Policy>>) -> Res {
    let s = load(path, c)?;
    let policies = policies.unwrap_or_else(|| s.policies.clone());
    let rows = harness::sweep(&s, dim, values, &policies)?;
    for r in &rows {
        println!("{:>8} {:>10}: {:.3} ({:.3}x)", r.value, r.policy.name(), r.aggregate_throughput, r.normalized_throughput);
    }
    let out = harness::write_sweep(&c.out_dir, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn validate_cmd(c: &Common, scenario: Option<PathBuf>, trace: Option<PathBuf>, events: Option<PathBuf>, num_ves: u32, p: u64) -> Res {
    if let Some(t) = trace {
        let g = load_trace(&t).map_err(|e| input(format!("{}: {e}", t.display())))?;
        println!("{}: {} operators, {} edges, footprint {} bytes", t.display(), g.len(), g.edge_count(), g.hbm_footprint_bytes());
        return Ok(());
    }
    if let Some(e) = events {
        let text = std::fs::read_to_string(&e).map_err(|err| input(format!("{}: {err}", e.display())))?;
        let log = read_jsonl(&text).map_err(|err| input(format!("{}: {err}", e.display())))?;
        let check = check_log(&log, num_ves, p);
        println!(
            "{} events, {} uTops finished ({} after preemption), {} reclaims",
            log.len(), check.utops_finished, check.preempted_utops_finished, check.reclaims
        );
        for v in check.violations.iter().take(20) {
            println!("violation: {v}");
        }
        return if check.ok() {
            Ok(())
        } else {
            Err(input(format!("{} violations", check.violations.len())))
        };
    }
    let path = scenario.ok_or_else(|| input("give a scenario file, --trace or --events"))?;
    let prep = harness::prepare(&load(&path, c)?)?;
    println!(
        "{}: ok ({} vNPUs on {} pNPU(s), sha256 {})",
        path.display(), prep.plans.len(), prep.scenario.pnpus, prep.scenario.hash
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let c = &cli.common;
    let res = match cli.cmd {
        Cmd::Allocate { scenario, m, v, budget } => allocate_cmd(c, scenario, m, v, budget),
        Cmd::Lower { scenario, trace, n_x, n_y } => lower_cmd(c, scenario, trace, n_x, n_y),
        Cmd::Run { scenario, policy } => run_cmd(c, &scenario, policy),
        Cmd::Compare { scenario, policies } => compare_cmd(c, &scenario, policies),
        Cmd::Sweep { scenario, dimension, values, policies } => sweep_cmd(c, &scenario, dimension, &values, policies),
        Cmd::Validate { scenario, trace, events, num_ves, preemption_cycles } => {
            validate_cmd(c, scenario, trace, events, num_ves, preemption_cycles)
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
