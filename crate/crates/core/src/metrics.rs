//! Throughput, latency percentiles, EU utilization and harvesting breakdowns
//! computed from simulation results.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{CoreResult, Policy, SimResult, VnpuResult};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("percentile of an empty set")]
    Empty,
    #[error("percentile fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("harvest breakdown needs a no_harvest companion run")]
    CompanionMissing,
    #[error("companion run does not match: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EuClass {
    Me,
    Ve,
}

/// Nearest-rank percentile: the value at rank `ceil(p * n)` of the sorted
/// input, ranks starting at 1.
pub fn percentile(values: &[u64], p: f64) -> Result<u64, MetricsError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(MetricsError::BadFraction(p));
    }
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    // 0.95 * 100 must land on rank 95, not 96
    let rank = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

pub fn core_utilization(core: &CoreResult, class: EuClass) -> f64 {
    let (busy, count) = match class {
        EuClass::Me => (core.me_busy.iter().sum::<u64>() as f64, core.num_mes),
        EuClass::Ve => (core.ve_busy, core.num_ves),
    };
    if core.duration == 0 || count == 0 {
        return 0.0;
    }
    (busy / (core.duration as f64 * count as f64)).clamp(0.0, 1.0)
}

/// Busy EU-cycles over available EU-cycles, summed across all cores.
pub fn utilization(result: &SimResult, class: EuClass) -> f64 {
    let mut busy = 0.0;
    let mut avail = 0.0;
    for c in &result.cores {
        let count = match class {
            EuClass::Me => c.num_mes,
            EuClass::Ve => c.num_ves,
        };
        busy += core_utilization(c, class) * c.duration as f64 * count as f64;
        avail += c.duration as f64 * count as f64;
    }
    if avail == 0.0 {
        0.0
    } else {
        busy / avail
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnpuMetrics {
    pub id: String,
    pub label: String,
    pub core: usize,
    pub n_m: u32,
    pub n_v: u32,
    pub priority: f64,
    pub completed: usize,
    /// Requests per million cycles over the first K requests.
    pub throughput: f64,
    pub avg_latency_cycles: f64,
    pub p95_latency_cycles: u64,
    pub p99_latency_cycles: u64,
    pub kth_completion: Option<u64>,
    pub harvest_blocked_fraction: f64,
    pub harvest_gain_fraction: f64,
    pub preempted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreMetrics {
    pub core: usize,
    pub duration: u64,
    pub me_utilization: f64,
    pub ve_utilization: f64,
    pub avg_hbm_bytes_per_cycle: f64,
    pub peak_hbm_bytes_per_cycle: f64,
    /// Average HBM traffic over the available bandwidth.
    pub hbm_utilization: f64,
    pub preemptions: u64,
    pub harvest_launches: u64,
}

/// Average number of MEs and VEs assigned to each vNPU per time bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSeries {
    pub bucket_cycles: u64,
    pub me: Vec<Vec<f64>>,
    pub ve: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub policy: Policy,
    pub seed: u64,
    pub requests_target: u32,
    pub truncated: bool,
    pub makespan: u64,
    pub aggregate_throughput: f64,
    pub vnpus: Vec<VnpuMetrics>,
    pub cores: Vec<CoreMetrics>,
    pub series: Option<AssignmentSeries>,
}

fn fraction(part: f64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        (part / whole as f64).clamp(0.0, 1.0)
    }
}

/// Latencies of the first `k` completed requests.
pub fn latencies(v: &VnpuResult, k: u32) -> Vec<u64> {
    v.requests.iter().take(k as usize).map(|r| r.latency()).collect()
}

/// Requests per million cycles: K over the completion time of the K-th
/// request.
pub fn throughput(v: &VnpuResult, k: u32) -> f64 {
    match v.kth_completion {
        Some(t) if t > 0 => 1e6 * k as f64 / t as f64,
        _ => 0.0,
    }
}

fn vnpu_metrics(v: &VnpuResult, k: u32, duration: u64) -> VnpuMetrics {
    let lat = latencies(v, k);
    let avg = if lat.is_empty() {
        0.0
    } else {
        lat.iter().sum::<u64>() as f64 / lat.len() as f64
    };
    VnpuMetrics {
        id: v.id.clone(),
        label: v.label.clone(),
        core: v.core,
        n_m: v.n_m,
        n_v: v.n_v,
        priority: v.priority,
        completed: lat.len(),
        throughput: throughput(v, k),
        avg_latency_cycles: avg,
        p95_latency_cycles: percentile(&lat, 0.95).unwrap_or(0),
        p99_latency_cycles: percentile(&lat, 0.99).unwrap_or(0),
        kth_completion: v.kth_completion,
        harvest_blocked_fraction: fraction(v.blocked_cycles as f64, duration),
        harvest_gain_fraction: fraction(v.gain_cycles as f64, duration),
        preempted: v.preempted,
    }
}

fn core_metrics(c: &CoreResult) -> CoreMetrics {
    let avg = if c.duration == 0 {
        0.0
    } else {
        c.hbm_bytes / c.duration as f64
    };
    CoreMetrics {
        core: c.core,
        duration: c.duration,
        me_utilization: core_utilization(c, EuClass::Me),
        ve_utilization: core_utilization(c, EuClass::Ve),
        avg_hbm_bytes_per_cycle: avg,
        peak_hbm_bytes_per_cycle: c.hbm_peak_rate,
        hbm_utilization: if c.hbm_bw_bytes_per_cycle > 0.0 {
            (avg / c.hbm_bw_bytes_per_cycle).clamp(0.0, 1.0)
        } else {
            0.0
        },
        preemptions: c.preemptions,
        harvest_launches: c.harvest_launches,
    }
}

pub fn scenario_metrics(result: &SimResult) -> ScenarioMetrics {
    let k = result.requests_target;
    let duration_of = |core: usize| {
        result
            .cores
            .iter()
            .find(|c| c.core == core)
            .map_or(0, |c| c.duration)
    };
    let vnpus: Vec<VnpuMetrics> = result
        .vnpus
        .iter()
        .map(|v| vnpu_metrics(v, k, duration_of(v.core)))
        .collect();
    let series = result.series.as_ref().map(|s| {
        let w = s.bucket as f64;
        let avg = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| r.iter().map(|x| x / w).collect())
                .collect()
        };
        AssignmentSeries {
            bucket_cycles: s.bucket,
            me: avg(&s.me),
            ve: avg(&s.ve),
        }
    });
    ScenarioMetrics {
        policy: result.policy,
        seed: result.seed,
        requests_target: k,
        truncated: result.truncated,
        makespan: result.makespan(),
        aggregate_throughput: vnpus.iter().map(|v| v.throughput).sum(),
        vnpus,
        cores: result.cores.iter().map(core_metrics).collect(),
        series,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestBreakdown {
    pub id: String,
    pub gain_fraction: f64,
    pub blocked_fraction: f64,
    /// K-th completion without harvesting over K-th completion with it.
    pub speedup: f64,
}

/// Per-vNPU gain and blocked fractions of a harvesting run, with the
/// end-to-end speedup over its no_harvest companion.
pub fn harvest_breakdown(
    neu: &SimResult,
    companion: Option<&SimResult>,
) -> Result<Vec<HarvestBreakdown>, MetricsError> {
    let base = companion.ok_or(MetricsError::CompanionMissing)?;
    if base.policy != Policy::NoHarvest {
        return Err(MetricsError::CompanionMissing);
    }
    if base.vnpus.len() != neu.vnpus.len() {
        return Err(MetricsError::Mismatch(format!(
            "{} vs {} vNPUs",
            neu.vnpus.len(),
            base.vnpus.len()
        )));
    }
    let m = scenario_metrics(neu);
    neu.vnpus
        .iter()
        .zip(&base.vnpus)
        .zip(&m.vnpus)
        .map(|((a, b), am)| {
            if a.id != b.id {
                return Err(MetricsError::Mismatch(format!("{} vs {}", a.id, b.id)));
            }
            let speedup = match (a.kth_completion, b.kth_completion) {
                (Some(x), Some(y)) if x > 0 => y as f64 / x as f64,
                _ => 0.0,
            };
            Ok(HarvestBreakdown {
                id: a.id.clone(),
                gain_fraction: am.harvest_gain_fraction,
                blocked_fraction: am.harvest_blocked_fraction,
                speedup,
            })
        })
        .collect()
}

/// Per-operator speedups of `other` over `base` for one vNPU, pairing spans
/// by (request index, operator index). Sorted ascending, ready for a CDF.
pub fn operator_speedups(base: &VnpuResult, other: &VnpuResult) -> Vec<f64> {
    let spans: HashMap<(u32, usize), u64> = base
        .op_spans
        .iter()
        .map(|s| ((s.request, s.op), s.end - s.start))
        .collect();
    let mut out: Vec<f64> = other
        .op_spans
        .iter()
        .filter_map(|s| {
            let b = *spans.get(&(s.request, s.op))?;
            let o = s.end - s.start;
            (o > 0 && b > 0).then(|| b as f64 / o as f64)
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_single, RequestRecord};
    use crate::hwmodel::HardwareConfig;
    use crate::neuisa::lower_graph;
    use crate::workload::{synthesize_workload, Archetype};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn percentile_fixtures() {
        assert_eq!(percentile(&[10], 0.95).unwrap(), 10);
        let hundred: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&hundred, 0.95).unwrap(), 95);
        assert_eq!(percentile(&hundred, 0.99).unwrap(), 99);
        assert_eq!(percentile(&[5, 5, 5, 100], 0.5).unwrap(), 5);
        assert_eq!(percentile(&[], 0.5), Err(MetricsError::Empty));
        assert!(matches!(percentile(&[1], 0.0), Err(MetricsError::BadFraction(_))));
    }

    fn core(num_mes: u32, duration: u64, me_busy: Vec<u64>) -> CoreResult {
        CoreResult {
            core: 0,
            num_mes,
            num_ves: 4,
            duration,
            me_busy,
            ve_busy: 0.0,
            hbm_bytes: 0.0,
            hbm_peak_rate: 0.0,
            hbm_bw_bytes_per_cycle: 1.0,
            preemptions: 0,
            harvest_launches: 0,
            me_intervals: vec![],
        }
    }

    #[test]
    fn utilization_fixtures() {
        assert_eq!(core_utilization(&core(4, 100, vec![100; 4]), EuClass::Me), 1.0);
        assert_eq!(core_utilization(&core(4, 100, vec![50, 50, 0, 0]), EuClass::Me), 0.25);
        assert_eq!(core_utilization(&core(4, 0, vec![0; 4]), EuClass::Me), 0.0);
    }

    fn vnpu(records: Vec<RequestRecord>, blocked: u64, gain: u64) -> VnpuResult {
        VnpuResult {
            id: "v".into(),
            label: String::new(),
            core: 0,
            n_m: 2,
            n_v: 2,
            priority: 1.0,
            kth_completion: records.last().map(|r| r.finish),
            requests: records,
            op_spans: vec![],
            active_cycles: 0,
            gain_cycles: gain,
            blocked_cycles: blocked,
            hbm_bound_cycles: 0,
            harvested_me_cycles: 0,
            harvested_ve_cycles: 0.0,
            preempted: 0,
        }
    }

    #[test]
    fn blocked_fraction_of_one_reclaim() {
        let v = vnpu(vec![], 256, 0);
        let m = vnpu_metrics(&v, 1, 256_000);
        assert!((m.harvest_blocked_fraction - 0.001).abs() < 1e-15);
        assert_eq!(m.harvest_gain_fraction, 0.0);
    }

    #[test]
    fn breakdown_needs_companion() {
        let hw = HardwareConfig::default();
        let g = synthesize_workload(Archetype::Balanced, 8, 3);
        let prog = Arc::new(lower_graph(&g, 4, 4, 0.15).unwrap());
        let neu = run_single(&hw, prog.clone(), 2, Policy::Neu).unwrap();
        assert_eq!(harvest_breakdown(&neu, None), Err(MetricsError::CompanionMissing));
        let v10 = run_single(&hw, prog.clone(), 2, Policy::V10).unwrap();
        assert_eq!(harvest_breakdown(&neu, Some(&v10)), Err(MetricsError::CompanionMissing));
        let nh = run_single(&hw, prog, 2, Policy::NoHarvest).unwrap();
        let b = harvest_breakdown(&neu, Some(&nh)).unwrap();
        // alone on the core there is nothing to harvest
        assert_eq!(b[0].gain_fraction, 0.0);
        assert_eq!(b[0].blocked_fraction, 0.0);
        assert_eq!(b[0].speedup, 1.0);
    }

    #[test]
    fn identical_runs_pair_to_unit_speedup() {
        let hw = HardwareConfig::default();
        let g = synthesize_workload(Archetype::MeHeavy, 10, 4);
        let prog = Arc::new(lower_graph(&g, 4, 4, 0.15).unwrap());
        let a = run_single(&hw, prog.clone(), 3, Policy::Neu).unwrap();
        let b = run_single(&hw, prog, 3, Policy::Prema).unwrap();
        let s = operator_speedups(&a.vnpus[0], &b.vnpus[0]);
        assert_eq!(s.len(), 30);
        assert!(s.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn metrics_are_pure() {
        let hw = HardwareConfig::default();
        let g = synthesize_workload(Archetype::VeHeavy, 12, 9);
        let prog = Arc::new(lower_graph(&g, 4, 4, 0.15).unwrap());
        let r = run_single(&hw, prog, 4, Policy::Neu).unwrap();
        assert_eq!(scenario_metrics(&r), scenario_metrics(&r));
    }

    proptest! {
        // closed loop with one outstanding request: throughput = 1 / mean latency
        #[test]
        fn littles_law(lat in prop::collection::vec(1u64..100_000, 1..40)) {
            let mut t = 0;
            let recs: Vec<RequestRecord> = lat
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    let r = RequestRecord { index: i as u32, arrival: t, start: t, finish: t + l };
                    t += l;
                    r
                })
                .collect();
            let k = recs.len() as u32;
            let v = vnpu(recs, 0, 0);
            let m = vnpu_metrics(&v, k, t);
            let sum: u64 = lat.iter().sum();
            prop_assert_eq!(m.avg_latency_cycles, sum as f64 / k as f64);
            prop_assert_eq!(m.throughput, 1e6 * k as f64 / sum as f64);
            prop_assert!((m.throughput * m.avg_latency_cycles / 1e6 - 1.0).abs() < 1e-12);
        }

        #[test]
        fn percentiles_ordered(v in prop::collection::vec(0u64..1000, 1..200)) {
            let p95 = percentile(&v, 0.95).unwrap();
            let p99 = percentile(&v, 0.99).unwrap();
            prop_assert!(p95 <= p99);
            prop_assert!(v.contains(&p95));
            let below = v.iter().filter(|&&x| x <= p95).count() as f64;
            prop_assert!(below >= 0.95 * v.len() as f64 - 1e-9);
        }
    }
}
