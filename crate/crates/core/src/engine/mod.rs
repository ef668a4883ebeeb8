//! Event-driven simulation of vNPUs sharing physical NPU cores.

mod check;
mod events;
mod fair;
mod policy;
mod sim;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{Isolation, VNpuSpec};
use crate::hwmodel::HardwareConfig;
use crate::neuisa::{lower_graph, ExecutionTable, DEFAULT_REDUCTION_OVERHEAD};
use crate::workload::OperatorGraph;

pub use check::{check_log, LogCheck};
pub use events::{read_jsonl, write_jsonl, EventKind, SimEvent};
pub use fair::{hbm_arbitrate, max_min_fill, schedule_ve_ops, VeDemand, VeGrant};

/// Cycles an ME is unavailable after a running uTop is evicted
/// (partial-sum pop plus weight pop).
pub const PREEMPTION_CYCLES: u64 = 256;
pub const DEFAULT_QUANTUM: u64 = 100_000;
pub const DEFAULT_SLICE: u64 = 100_000;
pub const DEFAULT_MAX_GROUP_EXECUTIONS: u64 = 1_000_000;
/// Fixed-point resolution of uTop progress: one work unit is
/// `1 / WORK_SCALE` of an ME cycle (or VE-cycle for VE uTops).
pub const WORK_SCALE: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Spatial partitioning with ME/VE harvesting, or priority-balanced
    /// temporal sharing when any resident is software-isolated.
    Neu,
    NoHarvest,
    /// Whole ME array granted per operator, VE-only operators concurrent.
    V10,
    /// Whole core granted per time quantum, round robin.
    Prema,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Neu, Policy::NoHarvest, Policy::V10, Policy::Prema];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Neu => "neu",
            Policy::NoHarvest => "no_harvest",
            Policy::V10 => "v10",
            Policy::Prema => "prema",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown policy {0:?} (expected neu, no_harvest, v10 or prema)")]
pub struct UnknownPolicy(pub String);

impl FromStr for Policy {
    type Err = UnknownPolicy;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neu" => Ok(Policy::Neu),
            "no_harvest" | "noharvest" => Ok(Policy::NoHarvest),
            "v10" => Ok(Policy::V10),
            "prema" => Ok(Policy::Prema),
            _ => Err(UnknownPolicy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Arrivals {
    /// Next request issued the moment the previous one finishes.
    #[default]
    ClosedLoop,
    /// Exponential inter-arrival times with the given mean.
    Poisson { mean_interarrival_cycles: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub policy: Policy,
    /// Requests every vNPU must complete before the run ends.
    pub requests: u32,
    pub arrivals: Arrivals,
    pub preemption_cycles: u64,
    /// PREMA quantum, scaled by each vNPU's priority.
    pub quantum_cycles: u64,
    /// Active-cycle lead that triggers preemption under temporal sharing.
    pub slice_cycles: u64,
    pub max_group_executions: u64,
    pub max_cycles: Option<u64>,
    pub record_events: bool,
    /// Bucket width of the ME/VE assignment series; `None` skips it.
    pub series_bucket: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Neu,
            requests: 100,
            arrivals: Arrivals::ClosedLoop,
            preemption_cycles: PREEMPTION_CYCLES,
            quantum_cycles: DEFAULT_QUANTUM,
            slice_cycles: DEFAULT_SLICE,
            max_group_executions: DEFAULT_MAX_GROUP_EXECUTIONS,
            max_cycles: None,
            record_events: false,
            series_bucket: None,
        }
    }
}

/// A vNPU resident on a core together with its lowered program.
#[derive(Debug, Clone)]
pub struct Tenant {
    pub spec: VNpuSpec,
    pub program: Arc<ExecutionTable>,
    /// Free-form label carried into reports (e.g. the workload name).
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct CoreSetup {
    pub hw: HardwareConfig,
    pub tenants: Vec<Tenant>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("core {core}: no tenants")]
    NoTenants { core: usize },
    #[error("core {core}: spatial mode needs sum n_m <= {mes} and sum n_v <= {ves}")]
    Oversubscribed { core: usize, mes: u32, ves: u32 },
    #[error("no_harvest requires hardware-isolated vNPUs (vNPU {0:?} is software-isolated)")]
    SoftwareIsolated(String),
    #[error("vNPU {vnpu:?}: program built for n_x = {n_x} but core has {mes} MEs")]
    ProgramTooWide { vnpu: String, n_x: usize, mes: u32 },
    #[error("vNPU {vnpu:?} request {request}: more than {limit} group executions")]
    Guard { vnpu: String, request: u32, limit: u64 },
    #[error("vNPU {vnpu:?}: {source}")]
    Directive {
        vnpu: String,
        source: crate::neuisa::DirectiveConflict,
    },
    #[error("core {core}: simulation stalled at cycle {time}")]
    Stalled { core: usize, time: u64 },
    #[error("vNPU priority must be > 0 (vNPU {0:?})")]
    BadPriority(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub index: u32,
    pub arrival: u64,
    pub start: u64,
    pub finish: u64,
}

impl RequestRecord {
    pub fn latency(&self) -> u64 {
        self.finish - self.arrival
    }
}

/// Lifetime of one operator within one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSpan {
    pub request: u32,
    pub op: usize,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeInterval {
    pub me: usize,
    pub vnpu: usize,
    pub utop: u32,
    pub start: u64,
    pub end: u64,
    pub harvested: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnpuResult {
    pub id: String,
    pub label: String,
    pub core: usize,
    pub n_m: u32,
    pub n_v: u32,
    pub priority: f64,
    /// Completed requests in completion order.
    pub requests: Vec<RequestRecord>,
    /// Operator spans of the first `requests` target requests.
    pub op_spans: Vec<OpSpan>,
    pub active_cycles: u64,
    /// Cycles holding a harvested ME or more VEs than reserved.
    pub gain_cycles: u64,
    /// Cycles with a waiting ME uTop while an own ME was held or drained
    /// by another vNPU.
    pub blocked_cycles: u64,
    pub hbm_bound_cycles: u64,
    pub harvested_me_cycles: u64,
    pub harvested_ve_cycles: f64,
    /// Times one of this vNPU's uTops was evicted.
    pub preempted: u64,
    pub kth_completion: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreResult {
    pub core: usize,
    pub num_mes: u32,
    pub num_ves: u32,
    pub duration: u64,
    pub me_busy: Vec<u64>,
    pub ve_busy: f64,
    pub hbm_bytes: f64,
    /// Bytes per cycle.
    pub hbm_peak_rate: f64,
    pub hbm_bw_bytes_per_cycle: f64,
    pub preemptions: u64,
    pub harvest_launches: u64,
    pub me_intervals: Vec<MeInterval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub bucket: u64,
    /// `[vnpu][bucket]` ME-cycles assigned.
    pub me: Vec<Vec<f64>>,
    /// `[vnpu][bucket]` VE-cycles granted.
    pub ve: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: Policy,
    pub seed: u64,
    pub requests_target: u32,
    pub truncated: bool,
    pub cores: Vec<CoreResult>,
    pub vnpus: Vec<VnpuResult>,
    pub series: Option<Series>,
    pub events: Option<Vec<SimEvent>>,
}

impl SimResult {
    /// Longest core duration.
    pub fn makespan(&self) -> u64 {
        self.cores.iter().map(|c| c.duration).max().unwrap_or(0)
    }
}

/// Runs every core independently and merges the results. Tenant indices in
/// the output follow the order of `cores` then `tenants`.
pub fn run(cores: &[CoreSetup], cfg: &EngineConfig, seed: u64) -> Result<SimResult, EngineError> {
    let mut out = SimResult {
        policy: cfg.policy,
        seed,
        requests_target: cfg.requests,
        truncated: false,
        cores: Vec::new(),
        vnpus: Vec::new(),
        series: None,
        events: cfg.record_events.then(Vec::new),
    };
    let mut base = 0;
    for (ci, core) in cores.iter().enumerate() {
        let r = sim::run_core(ci, base, core, cfg, seed)?;
        base += core.tenants.len();
        out.truncated |= r.truncated;
        out.cores.push(r.core);
        out.vnpus.extend(r.vnpus);
        if let (Some(all), Some(ev)) = (out.events.as_mut(), r.events) {
            all.extend(ev);
        }
        if let Some(s) = r.series {
            match out.series.as_mut() {
                None => out.series = Some(s),
                Some(acc) => {
                    acc.me.extend(s.me);
                    acc.ve.extend(s.ve);
                }
            }
        }
    }
    if let Some(ev) = out.events.as_mut() {
        // stable: per-core order is kept for equal times
        ev.sort_by_key(|e| (e.time, e.core));
    }
    Ok(out)
}

/// Busy totals from profiling a graph alone on one ME and one VE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoloProfile {
    pub makespan: u64,
    pub me_busy: f64,
    pub ve_busy: f64,
    pub hbm_bound: u64,
}

/// Runs one request of `g` on a 1-ME/1-VE variant of `hw`. The program is
/// lowered for a single ME but keeps `hw.num_ves` as its VE reference width.
pub fn solo_profile(g: &OperatorGraph, hw: &HardwareConfig) -> SoloProfile {
    let table = lower_graph(g, 1, hw.num_ves as usize, DEFAULT_REDUCTION_OVERHEAD)
        .expect("validated graphs always lower");
    let small = HardwareConfig {
        num_mes: 1,
        num_ves: 1,
        ..hw.clone()
    };
    let r = run_single(&small, Arc::new(table), 1, Policy::Neu)
        .expect("solo run of a validated graph cannot fail");
    let c = &r.cores[0];
    SoloProfile {
        makespan: c.duration,
        me_busy: c.me_busy.iter().sum::<u64>() as f64,
        ve_busy: c.ve_busy,
        hbm_bound: r.vnpus[0].hbm_bound_cycles,
    }
}

/// One vNPU owning the whole core.
pub fn run_single(
    hw: &HardwareConfig,
    program: Arc<ExecutionTable>,
    requests: u32,
    policy: Policy,
) -> Result<SimResult, EngineError> {
    let spec = VNpuSpec {
        isolation: Isolation::HardwareIsolated,
        ..VNpuSpec::new("solo", hw.num_mes, hw.num_ves)
    };
    let core = CoreSetup {
        hw: hw.clone(),
        tenants: vec![Tenant {
            spec,
            program,
            label: "solo".into(),
        }],
    };
    let cfg = EngineConfig {
        policy,
        requests,
        ..EngineConfig::default()
    };
    run(&[core], &cfg, 0)
}
