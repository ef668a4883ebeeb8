//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vnpu_core::allocator::{
    allocate_vnpu, estimated_time, eu_utilization, optimal_ratio, VNpuSpec,
};
use vnpu_core::engine::{
    check_log, run, run_single, write_jsonl, CoreSetup, EngineConfig, EventKind, Policy,
    SimEvent, SimResult, Tenant,
};
use vnpu_core::harness::{self, Scenario};
use vnpu_core::hwmodel::HardwareConfig;
use vnpu_core::metrics::{scenario_metrics, ScenarioMetrics};
use vnpu_core::neuisa::{
    build_execution_table, lower_graph, ExecutionTable, MicroTop, MicroTopGroup, UtopKind,
    UtopRole, DEFAULT_REDUCTION_OVERHEAD,
};
use vnpu_core::workload::{synthesize_workload, Archetype, ComputeProfile};

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---- allocator ----

/// Exact rational p/q with small integers; enough for the 1/20 grid.
#[derive(Clone, Copy)]
struct Frac(i128, i128);

impl Frac {
    fn add(self, o: Frac) -> Frac {
        Frac(self.0 * o.1 + o.0 * self.1, self.1 * o.1).norm()
    }
    fn div_int(self, n: i128) -> Frac {
        Frac(self.0, self.1 * n).norm()
    }
    fn norm(self) -> Frac {
        let g = gcd(self.0.abs(), self.1.abs()).max(1);
        Frac(self.0 / g, self.1 / g)
    }
    fn cmp(self, o: Frac) -> std::cmp::Ordering {
        (self.0 * o.1).cmp(&(o.0 * self.1))
    }
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Utilization of a split in exact arithmetic, m = a/20 and v = b/20.
fn exact_utilization(a: i128, b: i128, n_m: i128, n_v: i128) -> Frac {
    let t = Frac(20 - b, 20)
        .div_int(n_m)
        .add(Frac(20 - a, 20).div_int(n_v))
        .add(Frac(a + b - 20, 20).div_int(n_m.min(n_v)));
    // (m + v) / ((n_m + n_v) T)
    Frac((a + b) * t.1, 20 * (n_m + n_v) * t.0).norm()
}

fn ratio_utilization(m: f64, v: f64, k: f64) -> f64 {
    if k == 0.0 {
        // limit k -> 0
        return if m == 0.0 { v } else { 0.0 };
    }
    // n_m = k n_v with k <= 1, so min(n_m, n_v) = n_m
    let t_times_nv = (1.0 - v) / k + (1.0 - m) + (m + v - 1.0) / k;
    (m + v) / ((1.0 + k) * t_times_nv)
}

fn allocator_exactness() -> Verdict {
    let start = Instant::now();
    let mut cases = 0;
    for a in 0..=20i128 {
        for b in (20 - a)..=20 {
            let p = ComputeProfile::new(a as f64 / 20.0, b as f64 / 20.0);
            for n in 2..=16u32 {
                let (bm, bv) = allocate_vnpu(p, n).map_err(|e| e.to_string())?;
                let got = exact_utilization(a, b, bm as i128, bv as i128);
                let best = (1..n as i128)
                    .map(|nm| exact_utilization(a, b, nm, n as i128 - nm))
                    .max_by(|x, y| x.cmp(*y))
                    .unwrap();
                ensure(
                    got.cmp(best).is_eq(),
                    format!("m={} v={} N={n}: {bm}/{bv} is not optimal", p.m, p.v),
                )?;
                cases += 1;
            }
            if 2 * a >= 20 {
                continue;
            }
            let (m, v) = (p.m, p.v);
            let k = optimal_ratio(p).map_err(|e| e.to_string())?;
            let (arg, top) = (0..=1000)
                .map(|i| (i as f64 / 1000.0, ratio_utilization(m, v, i as f64 / 1000.0)))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap();
            ensure(
                (k - arg).abs() <= 1e-3 && ratio_utilization(m, v, k) >= top - 1e-9,
                format!("m={m} v={v}: analytic k {k} vs grid argmax {arg}"),
            )?;
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(1), format!("took {took:?}"))?;
    Ok(format!("{cases} grid cases, {took:?}"))
}

fn fixtures() -> Verdict {
    let p = ComputeProfile::new(0.6, 0.8);
    let t = estimated_time(p, 2, 2).map_err(|e| e.to_string())?;
    let u = eu_utilization(p, 2, 2).map_err(|e| e.to_string())?;
    ensure((t - 0.5).abs() <= 1e-12 && (u - 0.7).abs() <= 1e-12, format!("T={t} U={u}"))?;
    Ok(format!("T={t} U={u}"))
}

// ---- hand-built programs ----

fn me(id: u32, me_cycles: u64, ve_full: u64) -> MicroTop {
    MicroTop {
        id,
        kind: UtopKind::Me,
        owner_op: 0,
        me_cycles,
        ve_cycles_full: ve_full,
        hbm_bytes: 0,
        next_group: None,
        role: UtopRole::Compute,
    }
}

fn ve(id: u32, ve_full: u64) -> MicroTop {
    MicroTop {
        kind: UtopKind::Ve,
        me_cycles: 0,
        ..me(id, 0, ve_full)
    }
}

fn program(groups: Vec<Vec<MicroTop>>) -> Arc<ExecutionTable> {
    let rows = groups
        .into_iter()
        .enumerate()
        .map(|(i, us)| MicroTopGroup::from_utops(i, us).unwrap())
        .collect();
    Arc::new(build_execution_table(rows, 4, 4, vec!["op".into()]).unwrap())
}

fn tenant(id: &str, n_m: u32, n_v: u32, program: Arc<ExecutionTable>) -> Tenant {
    Tenant {
        spec: VNpuSpec::new(id, n_m, n_v),
        program,
        label: id.into(),
    }
}

fn run_tenants(tenants: Vec<Tenant>, policy: Policy, requests: u32, events: bool) -> SimResult {
    let c = EngineConfig {
        policy,
        requests,
        record_events: events,
        ..EngineConfig::default()
    };
    let core = CoreSetup {
        hw: HardwareConfig::default(),
        tenants,
    };
    run(&[core], &c, 0).expect("simulation")
}

fn log(r: &SimResult) -> &[SimEvent] {
    r.events.as_deref().unwrap_or(&[])
}

fn harvest_and_grants() -> Verdict {
    // (a): vNPU-1 has three ME uTops ready, vNPU-2 only one
    let a = || {
        vec![
            tenant("vnpu-1", 2, 2, program(vec![vec![me(0, 1000, 0), me(1, 1000, 0), me(2, 1000, 0)]])),
            tenant("vnpu-2", 2, 2, program(vec![vec![me(0, 1000, 0)]])),
        ]
    };
    let launches = |r: &SimResult, vnpu: usize| -> Vec<(usize, bool)> {
        log(r)
            .iter()
            .filter(|e| e.time == 0)
            .filter_map(|e| match e.kind {
                EventKind::Launch { vnpu: v, me: Some(m), harvested, .. } if v == vnpu => {
                    Some((m, harvested))
                }
                _ => None,
            })
            .collect()
    };
    let neu = run_tenants(a(), Policy::Neu, 1, true);
    let static_ = run_tenants(a(), Policy::NoHarvest, 1, true);
    let l = launches(&neu, 0);
    ensure(
        l == vec![(0, false), (1, false), (3, true)],
        format!("(a) neu launches {l:?}"),
    )?;
    let l = launches(&static_, 0);
    ensure(l == vec![(0, false), (1, false)], format!("(a) no_harvest launches {l:?}"))?;

    // (b): drain demand decides who gets the VEs
    let b = vec![
        tenant("vnpu-1", 2, 2, program(vec![vec![me(0, 500, 125), me(1, 500, 125), me(2, 3000, 750)]])),
        tenant("vnpu-2", 2, 2, program(vec![vec![me(0, 1000, 500), ve(1, 4000)]])),
    ];
    let r = run_tenants(b, Policy::Neu, 1, true);
    let grants = |vnpu: usize| -> Vec<(u64, f64, f64)> {
        log(&r)
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::VeGrant { vnpu: v, to_me, to_ve } if v == vnpu => Some((e.time, to_me, to_ve)),
                _ => None,
            })
            .collect()
    };
    let short_done = log(&r)
        .iter()
        .find_map(|e| match e.kind {
            EventKind::UtopFinish { vnpu: 0, utop: 0, .. } => Some(e.time),
            _ => None,
        })
        .ok_or("short uTop never finished")?;
    let (g1, g2) = (grants(0), grants(1));
    let want1 = [(0, 2.0, 0.0), (short_done, 1.0, 0.0)];
    let want2 = [(0, 2.0, 0.0), (short_done, 2.0, 1.0)];
    ensure(
        g1.len() >= 2 && g2.len() >= 2 && g1[..2] == want1 && g2[..2] == want2,
        format!("(b) grants {g1:?} / {g2:?}"),
    )?;
    Ok(format!("(a) 3 vs 2 MEs, (b) regrant at t={short_done}"))
}

// ---- synthesized pairs ----

const SCALE: usize = 40;
const REQUESTS: u32 = 20;

fn synth(arch: Archetype, scale: usize, seed: u64) -> Arc<ExecutionTable> {
    let g = synthesize_workload(arch, scale, seed);
    Arc::new(lower_graph(&g, 4, 4, DEFAULT_REDUCTION_OVERHEAD).unwrap())
}

struct Pair {
    a: Arc<ExecutionTable>,
    b: Arc<ExecutionTable>,
}

impl Pair {
    fn new(a: Archetype, b: Archetype, scale: usize, seed: u64) -> Pair {
        Pair {
            a: synth(a, scale, seed * 2 + 1),
            b: synth(b, scale, seed * 2 + 2),
        }
    }

    fn run(&self, policy: Policy, requests: u32, events: bool) -> SimResult {
        let tenants = vec![
            tenant("a", 2, 2, self.a.clone()),
            tenant("b", 2, 2, self.b.clone()),
        ];
        run_tenants(tenants, policy, requests, events)
    }
}

fn metrics(r: &SimResult) -> ScenarioMetrics {
    scenario_metrics(r)
}

const CONTENDED: [(Archetype, Archetype); 3] = [
    (Archetype::MeHeavy, Archetype::MeHeavy),
    (Archetype::MeHeavy, Archetype::Balanced),
    (Archetype::Balanced, Archetype::Balanced),
];

fn preemption_accounting() -> Verdict {
    let mut reclaims = 0;
    let mut resumed = 0;
    let mut checked = 0;
    for (x, y) in CONTENDED.into_iter().chain([(Archetype::MeHeavy, Archetype::VeHeavy)]) {
        for seed in 0..3 {
            let pair = Pair::new(x, y, 24, seed);
            for policy in [Policy::Neu, Policy::Prema, Policy::V10] {
                let r = pair.run(policy, 6, true);
                let c = check_log(log(&r), 4, 256);
                if let Some(v) = c.violations.first() {
                    return Err(format!("{x:?}+{y:?} seed {seed} {policy}: {v}"));
                }
                reclaims += c.reclaims;
                resumed += c.preempted_utops_finished;
                checked += 1;
            }
        }
    }
    ensure(reclaims > 0 && resumed > 0, "no reclamation happened")?;
    Ok(format!("{checked} logs, {reclaims} drains of 256 cycles, {resumed} resumed uTops"))
}

fn isolation() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1501_a7e5);
    let kinds = [Archetype::MeHeavy, Archetype::Balanced];
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for i in 0..50 {
        let x = kinds[rng.random_range(0..2)];
        let y = kinds[rng.random_range(0..2)];
        let scale = rng.random_range(16..=32);
        let seed = rng.random::<u32>() as u64;
        let pair = Pair::new(x, y, scale, seed);
        // the second tenant is the victim whose idle MEs get harvested
        let neu = metrics(&pair.run(Policy::Neu, REQUESTS, false));
        let base = metrics(&pair.run(Policy::NoHarvest, REQUESTS, false));
        let ratio = neu.vnpus[1].p95_latency_cycles as f64 / base.vnpus[1].p95_latency_cycles as f64;
        worst = worst.max(ratio);
        if ratio > 1.15 {
            failures.push(format!("#{i} {x:?}+{y:?} scale {scale}: {ratio:.3}"));
        }
    }
    let took = start.elapsed();
    ensure(failures.is_empty(), failures.join(", "))?;
    ensure(took < Duration::from_secs(60), format!("took {took:?}"))?;
    Ok(format!("50 scenarios, worst victim p95 ratio {worst:.3}, {took:?}"))
}

struct PairRuns {
    name: String,
    neu: ScenarioMetrics,
    harvested: bool,
    prema: ScenarioMetrics,
    v10: ScenarioMetrics,
    no_harvest: ScenarioMetrics,
}

fn pair_runs(x: Archetype, y: Archetype, seed: u64) -> PairRuns {
    let pair = Pair::new(x, y, SCALE, seed);
    let neu = pair.run(Policy::Neu, REQUESTS, true);
    let harvested = log(&neu)
        .iter()
        .any(|e| matches!(e.kind, EventKind::Launch { harvested: true, .. }));
    PairRuns {
        name: format!("{x:?}+{y:?} seed {seed}"),
        neu: metrics(&neu),
        harvested,
        prema: metrics(&pair.run(Policy::Prema, REQUESTS, false)),
        v10: metrics(&pair.run(Policy::V10, REQUESTS, false)),
        no_harvest: metrics(&pair.run(Policy::NoHarvest, REQUESTS, false)),
    }
}

fn directional(complementary: &[PairRuns], contended: &[PairRuns]) -> Verdict {
    let mut low = f64::INFINITY;
    for p in complementary {
        let s = p.neu.aggregate_throughput / p.prema.aggregate_throughput;
        low = low.min(s);
        ensure(s >= 1.2, format!("{}: neu/prema {s:.3}", p.name))?;
    }
    let mut low_v10 = f64::INFINITY;
    for p in contended {
        let s = p.neu.aggregate_throughput / p.v10.aggregate_throughput;
        low_v10 = low_v10.min(s);
        ensure(s >= 1.0, format!("{}: neu/v10 {s:.3}", p.name))?;
    }
    Ok(format!("min neu/prema {low:.3}, min neu/v10 under contention {low_v10:.3}"))
}

fn utilization(runs: &[&PairRuns]) -> Verdict {
    let mut gains = Vec::new();
    for p in runs {
        let (n, b) = (p.neu.cores[0].me_utilization, p.no_harvest.cores[0].me_utilization);
        let ok = if p.harvested { n > b } else { n >= b };
        ensure(ok, format!("{}: neu {n:.4} vs no_harvest {b:.4}", p.name))?;
        gains.push(n / b);
    }
    let min = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!("{} pairs, min ME utilization ratio {min:.3}", runs.len()))
}

fn solo_equivalence() -> Verdict {
    let hw = HardwareConfig::default();
    let mut n = 0;
    for (i, arch) in Archetype::ALL.into_iter().enumerate() {
        for seed in 0..2u64 {
            let prog = synth(arch, 24, 40 + 2 * seed + i as u64);
            let spans: Vec<u64> = Policy::ALL
                .iter()
                .map(|&p| run_single(&hw, prog.clone(), 4, p).map(|r| r.makespan()))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            ensure(spans.windows(2).all(|w| w[0] == w[1]), format!("{arch:?}: {spans:?}"))?;
            n += 1;
        }
    }
    Ok(format!("{n} programs x 4 policies"))
}

const DETERMINISM: &str = r#"
seed = 42
requests = 8

[[workload]]
name = "conv"
archetype = "me_heavy"
scale = 24

[[workload]]
name = "llm"
archetype = "memory_bound"
scale = 24

[[workload]]
name = "bert"
archetype = "balanced"
scale = 24

[[vnpu]]
id = "a"
workload = "conv"
budget = 3

[[vnpu]]
id = "b"
workload = "llm"
budget = 3

[[vnpu]]
id = "c"
workload = "bert"
n_m = 1
n_v = 1

[hardware]
pnpus = 2
"#;

fn determinism() -> Verdict {
    let s = Scenario::parse(DETERMINISM, ".").map_err(|e| e.to_string())?;
    let once = |policy: Policy| -> Result<(String, Vec<u8>), String> {
        let prep = harness::prepare(&s).map_err(|e| e.to_string())?;
        let out = harness::run_prepared(&prep, policy, true).map_err(|e| e.to_string())?;
        let report = serde_json::to_string_pretty(&out.report).map_err(|e| e.to_string())?;
        let mut events = Vec::new();
        write_jsonl(log(&out.result), &mut events).map_err(|e| e.to_string())?;
        Ok((report, events))
    };
    let mut bytes = 0;
    for policy in Policy::ALL {
        let (r1, e1) = once(policy)?;
        let (r2, e2) = once(policy)?;
        ensure(r1 == r2, format!("{policy}: reports differ"))?;
        ensure(e1 == e2, format!("{policy}: event logs differ"))?;
        ensure(!e1.is_empty(), format!("{policy}: empty event log"))?;
        bytes += r1.len() + e1.len();
    }
    Ok(format!("4 policies, {bytes} bytes compared"))
}

fn memory_bound_collocation() -> Verdict {
    let mut parts = Vec::new();
    for seed in 0..3 {
        let pair = Pair::new(Archetype::MemoryBound, Archetype::MeHeavy, SCALE, seed);
        let neu = metrics(&pair.run(Policy::Neu, REQUESTS, false));
        let v10 = metrics(&pair.run(Policy::V10, REQUESTS, false));
        let gain = neu.vnpus[1].throughput / v10.vnpus[1].throughput;
        let mb = |m: &ScenarioMetrics| m.vnpus[0].kth_completion.unwrap_or(u64::MAX) as f64;
        let slow = mb(&neu) / mb(&v10);
        ensure(
            gain >= 1.2 && slow <= 1.05,
            format!("seed {seed}: compute tenant {gain:.3}x, memory-bound makespan {slow:.3}x"),
        )?;
        parts.push(format!("{gain:.2}x/{slow:.2}"));
    }
    Ok(format!("compute gain / memory-bound makespan vs v10: {}", parts.join(", ")))
}

fn main() {
    let mut results: Vec<(&str, Verdict)> = vec![
        ("allocator exactness", allocator_exactness()),
        ("utilization fixtures", fixtures()),
        ("harvest and VE grant semantics", harvest_and_grants()),
        ("preemption accounting", preemption_accounting()),
        ("isolation of the harvested tenant", isolation()),
    ];

    let complementary: Vec<PairRuns> = (0..3)
        .map(|s| pair_runs(Archetype::MeHeavy, Archetype::VeHeavy, s))
        .collect();
    let contended: Vec<PairRuns> = CONTENDED
        .iter()
        .flat_map(|&(x, y)| (0..3).map(move |s| (x, y, s)))
        .map(|(x, y, s)| pair_runs(x, y, s))
        .collect();
    results.push(("directional throughput", directional(&complementary, &contended)));
    let all: Vec<&PairRuns> = complementary.iter().chain(&contended).collect();
    results.push(("ME utilization", utilization(&all)));
    results.push(("solo equivalence", solo_equivalence()));
    results.push(("determinism", determinism()));
    results.push(("memory-bound collocation", memory_bound_collocation()));

    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        match v {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
}
