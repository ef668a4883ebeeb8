//! Scenario files and the allocate -> map -> lower -> simulate -> report
//! pipeline behind the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::allocator::{allocate_memory, allocate_vnpu, Isolation, VNpuSpec};
use crate::engine::{self, Arrivals, CoreSetup, EngineConfig, Policy, SimResult, Tenant};
use crate::hwmodel::{validate_hardware, HardwareConfig};
use crate::mapper::{map_vnpu, MapOptions, PNpuState, SegmentTable};
use crate::metrics::{self, harvest_breakdown, HarvestBreakdown, ScenarioMetrics};
use crate::neuisa::{lower_graph, ExecutionTable, DEFAULT_REDUCTION_OVERHEAD};
use crate::workload::{load_trace, profile_mv, synthesize_workload, Archetype, OperatorGraph};

pub const DEFAULT_REQUESTS: u32 = 100;
pub const DEFAULT_SCALE: usize = 40;
pub const DEFAULT_SERIES_BUCKET: u64 = 1000;
/// Baseline first, so normalized columns read "relative to prema".
pub const DEFAULT_COMPARE: [Policy; 4] = [Policy::Prema, Policy::V10, Policy::NoHarvest, Policy::Neu];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parse,
    Workload,
    Allocate,
    Map,
    Lower,
    Simulate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Parse => "parse",
            Stage::Workload => "workload",
            Stage::Allocate => "allocate",
            Stage::Map => "map",
            Stage::Lower => "lower",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage: {msg}")]
pub struct HarnessError {
    pub stage: Stage,
    pub msg: String,
    /// Failure of the tool rather than of the scenario.
    pub internal: bool,
}

impl HarnessError {
    fn new(stage: Stage, msg: impl fmt::Display) -> Self {
        Self {
            stage,
            msg: msg.to_string(),
            internal: false,
        }
    }

    fn internal(stage: Stage, msg: impl fmt::Display) -> Self {
        Self {
            internal: true,
            ..Self::new(stage, msg)
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.internal {
            2
        } else {
            1
        }
    }
}

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadBlock {
    pub name: String,
    #[serde(default)]
    pub archetype: Option<Archetype>,
    #[serde(default)]
    pub scale: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Trace file, relative to the scenario file.
    #[serde(default)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VnpuBlock {
    pub id: String,
    pub workload: String,
    /// Total EUs; the ME/VE split comes from the workload profile.
    #[serde(default)]
    pub budget: Option<u32>,
    #[serde(default)]
    pub n_m: Option<u32>,
    #[serde(default)]
    pub n_v: Option<u32>,
    #[serde(default = "one")]
    pub priority: f64,
    #[serde(default)]
    pub isolation: Isolation,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineBlock {
    pub arrivals: Option<Arrivals>,
    pub preemption_cycles: Option<u64>,
    pub quantum_cycles: Option<u64>,
    pub slice_cycles: Option<u64>,
    pub max_group_executions: Option<u64>,
    pub max_cycles: Option<u64>,
    pub series_bucket: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    policy: Option<String>,
    #[serde(default)]
    policies: Option<Vec<String>>,
    #[serde(default)]
    requests: Option<u32>,
    #[serde(default)]
    hardware: Option<toml::Table>,
    #[serde(default)]
    engine: EngineBlock,
    #[serde(default)]
    workload: Vec<WorkloadBlock>,
    #[serde(default)]
    vnpu: Vec<VnpuBlock>,
}

/// A parsed and cross-checked scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub policy: Policy,
    pub policies: Vec<Policy>,
    pub requests: u32,
    pub pnpus: usize,
    pub hw: HardwareConfig,
    pub engine: EngineBlock,
    pub workloads: Vec<WorkloadBlock>,
    pub vnpus: Vec<VnpuBlock>,
    /// sha256 of the scenario text.
    pub hash: String,
    pub base_dir: PathBuf,
}

fn parse_policy(s: &str) -> Result<Policy> {
    s.parse().map_err(|e| HarnessError::new(Stage::Parse, e))
}

impl Scenario {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw: ScenarioFile =
            toml::from_str(text).map_err(|e| HarnessError::new(Stage::Parse, e))?;
        let policy = parse_policy(raw.policy.as_deref().unwrap_or("neu"))?;
        let policies = match &raw.policies {
            Some(list) => list.iter().map(|p| parse_policy(p)).collect::<Result<Vec<_>>>()?,
            None => DEFAULT_COMPARE.to_vec(),
        };
        if policies.is_empty() {
            return Err(HarnessError::new(Stage::Parse, "empty policies list"));
        }
        let mut hw_table = raw.hardware.unwrap_or_default();
        let pnpus = match hw_table.remove("pnpus") {
            None => 1,
            Some(toml::Value::Integer(n)) if n >= 1 => n as usize,
            Some(v) => {
                return Err(HarnessError::new(
                    Stage::Parse,
                    format!("hardware.pnpus must be a positive integer, got {v}"),
                ))
            }
        };
        let hw: HardwareConfig = toml::Value::Table(hw_table)
            .try_into()
            .map_err(|e| HarnessError::new(Stage::Parse, format!("hardware: {e}")))?;
        let hw = validate_hardware(hw).map_err(|e| HarnessError::new(Stage::Parse, e))?;
        let requests = raw.requests.unwrap_or(DEFAULT_REQUESTS);
        if requests == 0 {
            return Err(HarnessError::new(Stage::Parse, "requests must be >= 1"));
        }
        let s = Scenario {
            seed: raw.seed,
            policy,
            policies,
            requests,
            pnpus,
            hw,
            engine: raw.engine,
            workloads: raw.workload,
            vnpus: raw.vnpu,
            hash: hex::encode(Sha256::digest(text.as_bytes())),
            base_dir: base_dir.into(),
        };
        s.check()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::new(Stage::Parse, format!("{}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, dir)
    }

    fn check(&self) -> Result<()> {
        let err = |m: String| Err(HarnessError::new(Stage::Parse, m));
        if self.workloads.is_empty() {
            return err("at least one [[workload]] is required".into());
        }
        if self.vnpus.is_empty() {
            return err("at least one [[vnpu]] is required".into());
        }
        let mut names = BTreeMap::new();
        for w in &self.workloads {
            if names.insert(w.name.as_str(), ()).is_some() {
                return err(format!("duplicate workload {:?}", w.name));
            }
            if w.archetype.is_some() == w.trace.is_some() {
                return err(format!(
                    "workload {:?} needs exactly one of archetype or trace",
                    w.name
                ));
            }
            if w.scale == Some(0) {
                return err(format!("workload {:?}: scale must be >= 1", w.name));
            }
        }
        let mut ids = BTreeMap::new();
        for v in &self.vnpus {
            if ids.insert(v.id.as_str(), ()).is_some() {
                return err(format!("duplicate vnpu {:?}", v.id));
            }
            if !names.contains_key(v.workload.as_str()) {
                return err(format!("vnpu {:?} references unknown workload {:?}", v.id, v.workload));
            }
            match (v.budget, v.n_m, v.n_v) {
                (Some(_), None, None) | (None, Some(_), Some(_)) => {}
                _ => {
                    return err(format!(
                        "vnpu {:?} needs either budget or both n_m and n_v",
                        v.id
                    ))
                }
            }
            if !(v.priority > 0.0 && v.priority.is_finite()) {
                return err(format!("vnpu {:?}: priority must be > 0", v.id));
            }
        }
        Ok(())
    }

    /// Engine settings for one run of this scenario.
    pub fn engine_config(&self, policy: Policy, record_events: bool, series: bool) -> EngineConfig {
        let d = EngineConfig::default();
        let e = &self.engine;
        EngineConfig {
            policy,
            requests: self.requests,
            arrivals: e.arrivals.unwrap_or(d.arrivals),
            preemption_cycles: e.preemption_cycles.unwrap_or(d.preemption_cycles),
            quantum_cycles: e.quantum_cycles.unwrap_or(d.quantum_cycles),
            slice_cycles: e.slice_cycles.unwrap_or(d.slice_cycles),
            max_group_executions: e.max_group_executions.unwrap_or(d.max_group_executions),
            max_cycles: e.max_cycles,
            record_events,
            series_bucket: series.then(|| e.series_bucket.unwrap_or(DEFAULT_SERIES_BUCKET)),
        }
    }

    pub fn workload_pair(&self) -> String {
        self.vnpus
            .iter()
            .map(|v| v.workload.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Seed of the `i`-th synthesized workload when none is given.
fn workload_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn load_workloads(s: &Scenario) -> Result<BTreeMap<String, OperatorGraph>> {
    let mut out = BTreeMap::new();
    for (i, w) in s.workloads.iter().enumerate() {
        let g = match (&w.archetype, &w.trace) {
            (Some(a), None) => synthesize_workload(
                *a,
                w.scale.unwrap_or(DEFAULT_SCALE),
                w.seed.unwrap_or_else(|| workload_seed(s.seed, i)),
            ),
            (None, Some(p)) => load_trace(s.base_dir.join(p))
                .map_err(|e| HarnessError::new(Stage::Workload, format!("{}: {e}", w.name)))?,
            _ => unreachable!("checked at parse time"),
        };
        out.insert(w.name.clone(), g);
    }
    Ok(out)
}

/// Allocation and placement of one vNPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnpuPlan {
    pub id: String,
    pub workload: String,
    pub m: f64,
    pub v: f64,
    pub n_m: u32,
    pub n_v: u32,
    pub sram_segments: u64,
    pub hbm_segments: u64,
    pub priority: f64,
    pub isolation: Isolation,
    pub pnpu: usize,
    pub table: SegmentTable,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub plans: Vec<VnpuPlan>,
    /// Lowered program of each vNPU, in plan order.
    pub programs: Vec<Arc<ExecutionTable>>,
}

/// Sizes every vNPU and places it on the fleet.
pub fn allocate(s: &Scenario, graphs: &BTreeMap<String, OperatorGraph>) -> Result<Vec<VnpuPlan>> {
    let per_pnpu = s.vnpus.len().div_ceil(s.pnpus) as u32;
    let mut fleet: Vec<PNpuState> = (0..s.pnpus).map(|i| PNpuState::new(i, s.hw.clone())).collect();
    let mut plans = Vec::new();
    for b in &s.vnpus {
        let g = &graphs[&b.workload];
        let p = profile_mv(g, &s.hw);
        let ae = |e: crate::allocator::AllocError| {
            HarnessError::new(Stage::Allocate, format!("vnpu {:?}: {e}", b.id))
        };
        let (n_m, n_v) = match (b.budget, b.n_m, b.n_v) {
            (Some(n), _, _) => allocate_vnpu(p, n).map_err(ae)?,
            (None, Some(m), Some(v)) => (m, v),
            _ => unreachable!("checked at parse time"),
        };
        let (sram, hbm) = allocate_memory(g, n_m, &s.hw, per_pnpu).map_err(ae)?;
        let spec = VNpuSpec {
            sram_segments: sram,
            hbm_segments: hbm,
            priority: b.priority,
            isolation: b.isolation,
            ..VNpuSpec::new(b.id.clone(), n_m, n_v)
        };
        let placed = map_vnpu(&spec, &mut fleet, MapOptions::default())
            .map_err(|e| HarnessError::new(Stage::Map, e))?;
        plans.push(VnpuPlan {
            id: b.id.clone(),
            workload: b.workload.clone(),
            m: p.m,
            v: p.v,
            n_m,
            n_v,
            sram_segments: placed.table.sram_segment_count,
            hbm_segments: hbm,
            priority: b.priority,
            isolation: b.isolation,
            pnpu: placed.pnpu,
            table: placed.table,
        });
    }
    Ok(plans)
}

pub fn lower_all(
    s: &Scenario,
    graphs: &BTreeMap<String, OperatorGraph>,
    plans: &[VnpuPlan],
) -> Result<Vec<Arc<ExecutionTable>>> {
    plans
        .iter()
        .map(|p| {
            lower_graph(
                &graphs[&p.workload],
                s.hw.num_mes as usize,
                s.hw.num_ves as usize,
                DEFAULT_REDUCTION_OVERHEAD,
            )
            .map(Arc::new)
            .map_err(|e| HarnessError::new(Stage::Lower, format!("vnpu {:?}: {e}", p.id)))
        })
        .collect()
}

pub fn prepare(s: &Scenario) -> Result<Prepared> {
    let graphs = load_workloads(s)?;
    let plans = allocate(s, &graphs)?;
    let programs = lower_all(s, &graphs, &plans)?;
    Ok(Prepared {
        scenario: s.clone(),
        plans,
        programs,
    })
}

impl Prepared {
    /// Occupied pNPUs in id order, tenants in placement order.
    pub fn cores(&self) -> Vec<CoreSetup> {
        let mut cores = Vec::new();
        for pnpu in 0..self.scenario.pnpus {
            let tenants: Vec<Tenant> = self
                .plans
                .iter()
                .zip(&self.programs)
                .filter(|(p, _)| p.pnpu == pnpu)
                .map(|(p, prog)| Tenant {
                    spec: VNpuSpec {
                        sram_segments: p.sram_segments,
                        hbm_segments: p.hbm_segments,
                        priority: p.priority,
                        isolation: p.isolation,
                        ..VNpuSpec::new(p.id.clone(), p.n_m, p.n_v)
                    },
                    program: prog.clone(),
                    label: p.workload.clone(),
                })
                .collect();
            if !tenants.is_empty() {
                cores.push(CoreSetup {
                    hw: self.scenario.hw.clone(),
                    tenants,
                });
            }
        }
        cores
    }

    pub fn simulate(&self, policy: Policy, record_events: bool, series: bool) -> Result<SimResult> {
        let cfg = self.scenario.engine_config(policy, record_events, series);
        engine::run(&self.cores(), &cfg, self.scenario.seed).map_err(|e| match e {
            engine::EngineError::Stalled { .. } => HarnessError::internal(Stage::Simulate, e),
            _ => HarnessError::new(Stage::Simulate, e),
        })
    }

    /// Whether a no_harvest companion run is possible.
    fn harvest_comparable(&self) -> bool {
        self.plans
            .iter()
            .all(|p| p.isolation == Isolation::HardwareIsolated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario_sha256: String,
    pub seed: u64,
    pub policy: Policy,
    pub requests: u32,
    pub pnpus: usize,
    pub hardware: HardwareConfig,
    pub vnpus: Vec<VnpuPlan>,
    pub metrics: ScenarioMetrics,
    /// Present for neu runs of hardware-isolated vNPUs.
    pub harvest: Option<Vec<HarvestBreakdown>>,
}

pub struct RunOutput {
    pub report: Report,
    pub result: SimResult,
}

pub fn run_prepared(prep: &Prepared, policy: Policy, record_events: bool) -> Result<RunOutput> {
    let result = prep.simulate(policy, record_events, true)?;
    let harvest = if policy == Policy::Neu && prep.harvest_comparable() {
        let base = prep.simulate(Policy::NoHarvest, false, false)?;
        Some(
            harvest_breakdown(&result, Some(&base))
                .map_err(|e| HarnessError::internal(Stage::Report, e))?,
        )
    } else {
        None
    };
    let s = &prep.scenario;
    let report = Report {
        scenario_sha256: s.hash.clone(),
        seed: s.seed,
        policy,
        requests: s.requests,
        pnpus: s.pnpus,
        hardware: s.hw.clone(),
        vnpus: prep.plans.clone(),
        metrics: metrics::scenario_metrics(&result),
        harvest,
    };
    Ok(RunOutput { report, result })
}

fn io_err(path: &Path, e: impl fmt::Display) -> HarnessError {
    HarnessError::internal(Stage::Report, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s =
        serde_json::to_string_pretty(v).map_err(|e| HarnessError::internal(Stage::Report, e))?;
    s.push('\n');
    Ok(s)
}

pub fn write_allocation(out_dir: &Path, plans: &[VnpuPlan]) -> Result<PathBuf> {
    let path = out_dir.join("allocation.json");
    write_file(&path, to_json(&plans)?)?;
    Ok(path)
}

/// One listing per vNPU under `lowered/`.
pub fn write_lowered(out_dir: &Path, prep: &Prepared) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (p, prog) in prep.plans.iter().zip(&prep.programs) {
        let path = out_dir.join("lowered").join(format!("{}.txt", p.id));
        write_file(&path, prog.listing())?;
        out.push(path);
    }
    Ok(out)
}

fn write_series(path: &Path, m: &ScenarioMetrics, ids: &[String]) -> Result<()> {
    let Some(series) = &m.series else {
        return Ok(());
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| io_err(path, e);
    w.write_record(["bucket_start", "vnpu", "assigned_mes", "assigned_ves"])
        .map_err(csv_err)?;
    for (v, (me, ve)) in series.me.iter().zip(&series.ve).enumerate() {
        for (b, (a, c)) in me.iter().zip(ve).enumerate() {
            w.write_record([
                (b as u64 * series.bucket_cycles).to_string(),
                ids[v].clone(),
                format!("{a:.4}"),
                format!("{c:.4}"),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| io_err(path, e))?;
    write_file(path, bytes)
}

/// Writes `report.json`, `series.csv`, `allocation.json`, the lowered
/// listings and optionally `events.jsonl`. The series lives in its own
/// file rather than in the report.
pub fn write_run(out_dir: &Path, prep: &Prepared, out: &RunOutput) -> Result<()> {
    let mut report = out.report.clone();
    let ids: Vec<String> = out.result.vnpus.iter().map(|v| v.id.clone()).collect();
    write_series(&out_dir.join("series.csv"), &report.metrics, &ids)?;
    report.metrics.series = None;
    write_file(&out_dir.join("report.json"), to_json(&report)?)?;
    write_allocation(out_dir, &prep.plans)?;
    write_lowered(out_dir, prep)?;
    if let Some(ev) = &out.result.events {
        let path = out_dir.join("events.jsonl");
        let mut buf: Vec<u8> = Vec::new();
        engine::write_jsonl(ev, &mut buf).map_err(|e| io_err(&path, e))?;
        write_file(&path, buf)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub workload_pair: String,
    pub policy: Policy,
    pub metric: String,
    pub value: f64,
    /// Value over the first-listed policy's value.
    pub normalized: f64,
}

fn metric_rows(m: &ScenarioMetrics) -> Vec<(String, f64)> {
    let mut rows = vec![
        ("aggregate_throughput".to_string(), m.aggregate_throughput),
        ("makespan".to_string(), m.makespan as f64),
    ];
    let busy = |f: fn(&metrics::CoreMetrics) -> f64| -> f64 {
        let total: f64 = m.cores.iter().map(|c| c.duration as f64).sum();
        if total == 0.0 {
            0.0
        } else {
            m.cores.iter().map(|c| f(c) * c.duration as f64).sum::<f64>() / total
        }
    };
    rows.push(("me_utilization".into(), busy(|c| c.me_utilization)));
    rows.push(("ve_utilization".into(), busy(|c| c.ve_utilization)));
    for v in &m.vnpus {
        rows.push((format!("throughput.{}", v.id), v.throughput));
        rows.push((format!("avg_latency.{}", v.id), v.avg_latency_cycles));
        rows.push((format!("p95_latency.{}", v.id), v.p95_latency_cycles as f64));
        rows.push((format!("p99_latency.{}", v.id), v.p99_latency_cycles as f64));
    }
    rows
}

fn ratio(value: f64, base: f64) -> f64 {
    if value == base {
        1.0
    } else {
        value / base
    }
}

pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<Report>,
}

/// Runs each policy on the same prepared scenario, in parallel.
pub fn compare(prep: &Prepared, policies: &[Policy]) -> Result<Comparison> {
    if policies.is_empty() {
        return Err(HarnessError::new(Stage::Parse, "no policies to compare"));
    }
    let outs: Vec<Result<RunOutput>> = thread::scope(|sc| {
        let handles: Vec<_> = policies
            .iter()
            .map(|&p| sc.spawn(move || run_prepared(prep, p, false)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let reports: Vec<Report> = outs
        .into_iter()
        .map(|r| r.map(|o| o.report))
        .collect::<Result<_>>()?;
    let pair = prep.scenario.workload_pair();
    let base: BTreeMap<String, f64> = metric_rows(&reports[0].metrics).into_iter().collect();
    let mut rows = Vec::new();
    for r in &reports {
        for (metric, value) in metric_rows(&r.metrics) {
            rows.push(ComparisonRow {
                workload_pair: pair.clone(),
                policy: r.policy,
                normalized: ratio(value, base[&metric]),
                metric,
                value,
            });
        }
    }
    Ok(Comparison { rows, reports })
}

pub fn write_comparison(out_dir: &Path, c: &Comparison) -> Result<()> {
    let path = out_dir.join("comparison.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &c.rows {
        w.serialize(row).map_err(|e| io_err(&path, e))?;
    }
    write_file(&path, w.into_inner().map_err(|e| io_err(&path, e))?)?;
    for r in &c.reports {
        let mut r = r.clone();
        r.metrics.series = None;
        write_file(&out_dir.join(format!("report-{}.json", r.policy)), to_json(&r)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDimension {
    EuCounts,
    HbmBw,
}

impl std::str::FromStr for SweepDimension {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "eu_counts" => Ok(Self::EuCounts),
            "hbm_bw" => Ok(Self::HbmBw),
            _ => Err(format!("unknown sweep dimension {s:?} (expected eu_counts or hbm_bw)")),
        }
    }
}

fn scale_count(n: u32, from: u32, to: u32, min: u32) -> u32 {
    (((n as f64) * to as f64 / from as f64).round() as u32).max(min)
}

/// Copy of `s` with one swept value applied. EU counts are written
/// `<mes>+<ves>`; bandwidth is in GB/s. vNPU sizes scale with the core.
pub fn apply_sweep(s: &Scenario, dim: SweepDimension, value: &str) -> Result<Scenario> {
    let bad = || HarnessError::new(Stage::Parse, format!("bad {dim:?} value {value:?}"));
    let mut out = s.clone();
    match dim {
        SweepDimension::EuCounts => {
            let (a, b) = value.split_once('+').ok_or_else(bad)?;
            let mes: u32 = a.trim().parse().map_err(|_| bad())?;
            let ves: u32 = b.trim().parse().map_err(|_| bad())?;
            let (m0, v0) = (s.hw.num_mes, s.hw.num_ves);
            out.hw.num_mes = mes;
            out.hw.num_ves = ves;
            for v in out.vnpus.iter_mut() {
                if let Some(n) = v.budget {
                    v.budget = Some(scale_count(n, m0 + v0, mes + ves, 2));
                }
                if let (Some(m), Some(n)) = (v.n_m, v.n_v) {
                    v.n_m = Some(scale_count(m, m0, mes, 1));
                    v.n_v = Some(scale_count(n, v0, ves, 1));
                }
            }
        }
        SweepDimension::HbmBw => {
            let gbps: f64 = value.trim().parse().map_err(|_| bad())?;
            if gbps.is_nan() || gbps <= 0.0 {
                return Err(bad());
            }
            out.hw.hbm_bw_bytes_per_s = (gbps * 1e9).round() as u64;
        }
    }
    out.hw = validate_hardware(out.hw).map_err(|e| HarnessError::new(Stage::Parse, e))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub policy: Policy,
    pub aggregate_throughput: f64,
    /// Throughput over the first policy's at the same value.
    pub normalized_throughput: f64,
    pub me_utilization: f64,
    pub ve_utilization: f64,
    pub makespan: u64,
}

/// One comparison per swept value; values run in parallel.
pub fn sweep(
    s: &Scenario,
    dim: SweepDimension,
    values: &[String],
    policies: &[Policy],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(HarnessError::new(Stage::Parse, "empty sweep value list"));
    }
    let scenarios: Vec<Scenario> = values
        .iter()
        .map(|v| apply_sweep(s, dim, v))
        .collect::<Result<_>>()?;
    let comps: Vec<Result<Comparison>> = thread::scope(|sc| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|sv| sc.spawn(move || compare(&prepare(sv)?, policies)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep thread panicked"))
            .collect()
    });
    let mut rows = Vec::new();
    for (value, c) in values.iter().zip(comps) {
        let c = c?;
        let base = c.reports[0].metrics.aggregate_throughput;
        for r in &c.reports {
            let m = &r.metrics;
            let util = |class| {
                let busy: f64 = m
                    .cores
                    .iter()
                    .map(|c| {
                        c.duration as f64
                            * if class {
                                c.me_utilization
                            } else {
                                c.ve_utilization
                            }
                    })
                    .sum();
                let total: f64 = m.cores.iter().map(|c| c.duration as f64).sum();
                if total == 0.0 {
                    0.0
                } else {
                    busy / total
                }
            };
            rows.push(SweepRow {
                value: value.clone(),
                policy: r.policy,
                aggregate_throughput: m.aggregate_throughput,
                normalized_throughput: ratio(m.aggregate_throughput, base),
                me_utilization: util(true),
                ve_utilization: util(false),
                makespan: m.makespan,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep(out_dir: &Path, rows: &[SweepRow]) -> Result<PathBuf> {
    let path = out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| io_err(&path, e))?;
    }
    write_file(&path, w.into_inner().map_err(|e| io_err(&path, e))?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAIR: &str = r#"
seed = 3
requests = 4

[[workload]]
name = "conv"
archetype = "me_heavy"
scale = 12

[[workload]]
name = "embed"
archetype = "ve_heavy"
scale = 12

[[vnpu]]
id = "a"
workload = "conv"
n_m = 2
n_v = 2

[[vnpu]]
id = "b"
workload = "embed"
n_m = 2
n_v = 2
"#;

    fn pair() -> Scenario {
        Scenario::parse(PAIR, ".").unwrap()
    }

    #[test]
    fn parse_defaults() {
        let s = pair();
        assert_eq!(s.policy, Policy::Neu);
        assert_eq!(s.policies, DEFAULT_COMPARE.to_vec());
        assert_eq!(s.pnpus, 1);
        assert_eq!(s.hw, HardwareConfig::default());
        assert_eq!(s.workload_pair(), "conv+embed");
        assert_eq!(s.hash.len(), 64);
    }

    #[test]
    fn unknown_policy_fails_at_parse() {
        let text = format!("policy = \"fifo\"\n{PAIR}");
        let e = Scenario::parse(&text, ".").unwrap_err();
        assert_eq!(e.stage, Stage::Parse);
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn dangling_workload_reference() {
        let text = PAIR.replace("workload = \"embed\"", "workload = \"nope\"");
        let e = Scenario::parse(&text, ".").unwrap_err();
        assert!(e.msg.contains("unknown workload"), "{}", e.msg);
    }

    #[test]
    fn budget_or_counts() {
        let text = PAIR.replacen("n_m = 2\nn_v = 2", "n_m = 2", 1);
        assert!(Scenario::parse(&text, ".").is_err());
        let text = PAIR.replacen("n_m = 2\nn_v = 2", "budget = 4", 1);
        let s = Scenario::parse(&text, ".").unwrap();
        let prep = prepare(&s).unwrap();
        // a convolution-heavy profile gets more MEs than VEs
        assert_eq!(prep.plans[0].n_m + prep.plans[0].n_v, 4);
        assert!(prep.plans[0].n_m >= prep.plans[0].n_v);
    }

    #[test]
    fn hardware_block_with_pnpus() {
        let text = format!("{PAIR}\n[hardware]\npnpus = 2\nnum_mes = 8\nnum_ves = 8\n");
        let s = Scenario::parse(&text, ".").unwrap();
        assert_eq!((s.pnpus, s.hw.num_mes), (2, 8));
        let bad = format!("{PAIR}\n[hardware]\nnum_mes = 0\n");
        assert!(Scenario::parse(&bad, ".").is_err());
    }

    #[test]
    fn oversized_vnpu_fails_at_map() {
        let text = PAIR.replacen("n_m = 2", "n_m = 3", 1);
        let s = Scenario::parse(&text, ".").unwrap();
        let e = prepare(&s).unwrap_err();
        assert_eq!(e.stage, Stage::Map);
    }

    #[test]
    fn run_is_deterministic() {
        let prep = prepare(&pair()).unwrap();
        let a = run_prepared(&prep, Policy::Neu, true).unwrap();
        let b = run_prepared(&prep, Policy::Neu, true).unwrap();
        assert_eq!(to_json(&a.report).unwrap(), to_json(&b.report).unwrap());
        assert_eq!(a.result.events, b.result.events);
        assert!(a.report.harvest.is_some());
    }

    #[test]
    fn comparison_normalizes_to_first() {
        let prep = prepare(&pair()).unwrap();
        let c = compare(&prep, &[Policy::Prema, Policy::Neu]).unwrap();
        assert!(c
            .rows
            .iter()
            .filter(|r| r.policy == Policy::Prema)
            .all(|r| r.normalized == 1.0));
        let tput = c
            .rows
            .iter()
            .find(|r| r.policy == Policy::Neu && r.metric == "aggregate_throughput")
            .unwrap();
        assert!(tput.normalized > 1.0);
    }

    #[test]
    fn sweep_shapes() {
        let s = pair();
        let e = sweep(&s, SweepDimension::HbmBw, &[], &[Policy::Neu]).unwrap_err();
        assert_eq!(e.stage, Stage::Parse);
        let vals: Vec<String> = ["2+2", "4+4", "8+8"].iter().map(|v| v.to_string()).collect();
        let rows = sweep(&s, SweepDimension::EuCounts, &vals, &[Policy::Neu]).unwrap();
        assert_eq!(rows.len(), 3);
        let small = apply_sweep(&s, SweepDimension::EuCounts, "2+2").unwrap();
        assert_eq!((small.vnpus[0].n_m, small.vnpus[0].n_v), (Some(1), Some(1)));
        let bw = apply_sweep(&s, SweepDimension::HbmBw, "900").unwrap();
        assert_eq!(bw.hw.hbm_bw_bytes_per_s, 900_000_000_000);
        assert!(apply_sweep(&s, SweepDimension::EuCounts, "4x4").is_err());
    }
}
