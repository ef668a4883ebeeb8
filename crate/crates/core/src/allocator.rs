//! vNPU sizing: estimated time, EU utilization, ME:VE ratio, memory grants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hwmodel::HardwareConfig;
use crate::workload::{hbm_footprint, ComputeProfile, OperatorGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocError {
    #[error("m + v = {0} < 1: at least one of ME/VE must be active at any time")]
    Domain(f64),
    #[error("profile component out of [0, 1]: m = {m}, v = {v}")]
    OutOfRange { m: f64, v: f64 },
    #[error("EU counts must be >= 1 (n_m = {n_m}, n_v = {n_v})")]
    ZeroEus { n_m: u32, n_v: u32 },
    #[error("EU budget {0} < 2")]
    Budget(u32),
    #[error("footprint {need} bytes exceeds HBM capacity {have}")]
    Capacity { need: u64, have: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Isolation {
    #[default]
    HardwareIsolated,
    SoftwareIsolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VNpuSpec {
    pub id: String,
    pub n_m: u32,
    pub n_v: u32,
    pub sram_segments: u64,
    pub hbm_segments: u64,
    pub priority: f64,
    pub isolation: Isolation,
}

impl VNpuSpec {
    pub fn new(id: impl Into<String>, n_m: u32, n_v: u32) -> Self {
        Self {
            id: id.into(),
            n_m,
            n_v,
            sram_segments: 1,
            hbm_segments: 1,
            priority: 1.0,
            isolation: Isolation::HardwareIsolated,
        }
    }

    pub fn eus(&self) -> u32 {
        self.n_m + self.n_v
    }
}

// Profiles produced by rounding can miss m + v = 1 by an ulp or two.
const MV_SLACK: f64 = 1e-9;

fn check(p: ComputeProfile) -> Result<(), AllocError> {
    if !(0.0..=1.0).contains(&p.m) || !(0.0..=1.0).contains(&p.v) {
        return Err(AllocError::OutOfRange { m: p.m, v: p.v });
    }
    if p.m + p.v < 1.0 - MV_SLACK {
        return Err(AllocError::Domain(p.m + p.v));
    }
    Ok(())
}

/// Normalized execution time on `n_m` MEs and `n_v` VEs relative to the
/// 1-ME/1-VE solo run.
pub fn estimated_time(p: ComputeProfile, n_m: u32, n_v: u32) -> Result<f64, AllocError> {
    check(p)?;
    if n_m == 0 || n_v == 0 {
        return Err(AllocError::ZeroEus { n_m, n_v });
    }
    let (m, v) = (p.m, p.v);
    let both = (m + v - 1.0).max(0.0);
    Ok((1.0 - v) / n_m as f64 + (1.0 - m) / n_v as f64 + both / n_m.min(n_v) as f64)
}

pub fn eu_utilization(p: ComputeProfile, n_m: u32, n_v: u32) -> Result<f64, AllocError> {
    estimated_time(p, n_m, n_v)?;
    // (n_m + n_v) * T with the EU counts folded into ratios first, so that
    // co-scaled splits give bit-identical results
    let total = (n_m + n_v) as f64;
    let both = (p.m + p.v - 1.0).max(0.0);
    let scaled = (1.0 - p.v) * (total / n_m as f64)
        + (1.0 - p.m) * (total / n_v as f64)
        + both * (total / n_m.min(n_v) as f64);
    Ok((p.m + p.v) / scaled)
}

/// Utilization as a function of the continuous ratio `k = n_m / n_v <= 1`.
pub fn utilization_at_ratio(p: ComputeProfile, k: f64) -> f64 {
    let (m, v) = (p.m, p.v);
    (m + v) * k / ((1.0 - m) * k * k + k + m)
}

/// Best continuous ME:VE ratio `n_m / n_v`. Only the case where both
/// fractions are below one half has no defined ratio.
pub fn optimal_ratio(p: ComputeProfile) -> Result<f64, AllocError> {
    if !(0.0..=1.0).contains(&p.m) || !(0.0..=1.0).contains(&p.v) {
        return Err(AllocError::OutOfRange { m: p.m, v: p.v });
    }
    if p.m < 0.5 && p.v < 0.5 {
        return Err(AllocError::Domain(p.m + p.v));
    }
    if p.m < 0.5 {
        Ok((p.m / (1.0 - p.m)).sqrt())
    } else if p.v < 0.5 {
        Ok(((1.0 - p.v) / p.v).sqrt())
    } else {
        Ok(1.0)
    }
}

/// One row of the split table printed by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitScore {
    pub n_m: u32,
    pub n_v: u32,
    pub utilization: f64,
    pub time: f64,
}

pub fn split_table(p: ComputeProfile, budget: u32) -> Result<Vec<SplitScore>, AllocError> {
    if budget < 2 {
        return Err(AllocError::Budget(budget));
    }
    (1..budget)
        .map(|n_m| {
            let n_v = budget - n_m;
            Ok(SplitScore {
                n_m,
                n_v,
                utilization: eu_utilization(p, n_m, n_v)?,
                time: estimated_time(p, n_m, n_v)?,
            })
        })
        .collect()
}

/// Integer split of `budget` EUs maximizing utilization. Ties go to the
/// ratio closest to [`optimal_ratio`], then to fewer MEs.
pub fn allocate_vnpu(p: ComputeProfile, budget: u32) -> Result<(u32, u32), AllocError> {
    let table = split_table(p, budget)?;
    let k = optimal_ratio(p)?;
    let mut best = table[0];
    for s in &table[1..] {
        let better = if s.utilization != best.utilization {
            s.utilization > best.utilization
        } else {
            let ds = (s.n_m as f64 / s.n_v as f64 - k).abs();
            let db = (best.n_m as f64 / best.n_v as f64 - k).abs();
            ds < db
        };
        if better {
            best = *s;
        }
    }
    Ok((best.n_m, best.n_v))
}

/// SRAM segments proportional to the ME share, HBM segments covering the
/// graph footprint.
pub fn allocate_memory(
    g: &OperatorGraph,
    n_m: u32,
    hw: &HardwareConfig,
    total_vnpus_hint: u32,
) -> Result<(u64, u64), AllocError> {
    let need = hbm_footprint(g);
    let have = hw.hbm_bytes.0;
    if need > have {
        return Err(AllocError::Capacity { need, have });
    }
    let layout = crate::hwmodel::segment_layout(hw);
    let hbm = need.div_ceil(layout.hbm_segment_bytes);
    // round half up of total * n_m / num_mes
    let total = layout.sram_segments;
    let mut sram = (2 * total * n_m as u64 + hw.num_mes as u64) / (2 * hw.num_mes as u64);
    if total_vnpus_hint > 1 {
        sram = sram.min(total / total_vnpus_hint as u64);
    }
    Ok((sram.clamp(1, total), hbm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Operator;
    use proptest::prelude::*;

    fn p(m: f64, v: f64) -> ComputeProfile {
        ComputeProfile::new(m, v)
    }

    #[test]
    fn time_fixtures() {
        assert_eq!(estimated_time(p(1.0, 1.0), 1, 1).unwrap(), 1.0);
        assert!((estimated_time(p(0.6, 0.8), 2, 2).unwrap() - 0.5).abs() <= 1e-12);
        assert!((estimated_time(p(0.5, 0.5), 1, 4).unwrap() - 0.625).abs() <= 1e-12);
    }

    #[test]
    fn utilization_fixtures() {
        assert_eq!(eu_utilization(p(1.0, 1.0), 1, 1).unwrap(), 1.0);
        assert!((eu_utilization(p(0.6, 0.8), 2, 2).unwrap() - 0.7).abs() <= 1e-12);
    }

    #[test]
    fn ratio_fixtures() {
        assert!((optimal_ratio(p(0.2, 0.9)).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(optimal_ratio(p(0.9, 0.8)).unwrap(), 1.0);
        assert!((optimal_ratio(p(0.6, 0.3)).unwrap() - 1.527_525_231_651_947).abs() < 1e-12);
    }

    #[test]
    fn domain_error_below_one() {
        assert!(matches!(optimal_ratio(p(0.3, 0.4)), Err(AllocError::Domain(_))));
        assert!(matches!(estimated_time(p(0.3, 0.4), 1, 1), Err(AllocError::Domain(_))));
    }

    #[test]
    fn split_fixtures() {
        assert_eq!(allocate_vnpu(p(0.2, 0.9), 6).unwrap(), (2, 4));
        assert_eq!(allocate_vnpu(p(0.9, 0.8), 6).unwrap(), (3, 3));
        assert_eq!(allocate_vnpu(p(0.4, 0.7), 2).unwrap(), (1, 1));
        assert_eq!(allocate_vnpu(p(0.4, 0.7), 1), Err(AllocError::Budget(1)));
    }

    fn graph(footprint: u64) -> OperatorGraph {
        OperatorGraph::new(
            vec![Operator {
                id: "a".into(),
                deps: vec![],
                me_cycles: 1,
                ve_cycles: 1,
                hbm_bytes: 0,
                max_me_parallelism: 1,
                reduction_split: false,
            }],
            footprint,
        )
        .unwrap()
    }

    #[test]
    fn memory_fixtures() {
        let hw = HardwareConfig::default();
        assert_eq!(allocate_memory(&graph(1_270_000_000), 2, &hw, 1).unwrap().1, 2);
        assert_eq!(allocate_memory(&graph(1), 4, &hw, 1).unwrap().0, 64);
        assert_eq!(allocate_memory(&graph(1), 2, &hw, 2).unwrap(), (32, 1));
        assert!(matches!(
            allocate_memory(&graph(100_000_000_000), 2, &hw, 1),
            Err(AllocError::Capacity { .. })
        ));
    }

    fn valid_profile() -> impl Strategy<Value = ComputeProfile> {
        (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(m, t)| {
            // v spans [1 - m, 1]
            p(m, 1.0 - m + t * m)
        })
    }

    proptest! {
        #[test]
        fn split_attains_exhaustive_max(pr in valid_profile(), n in 2u32..=32) {
            let (nm, nv) = allocate_vnpu(pr, n).unwrap();
            prop_assert_eq!(nm + nv, n);
            let got = eu_utilization(pr, nm, nv).unwrap();
            for a in 1..n {
                prop_assert!(eu_utilization(pr, a, n - a).unwrap() <= got);
            }
            // determinism of the tie-break
            prop_assert_eq!(allocate_vnpu(pr, n).unwrap(), (nm, nv));
        }

        #[test]
        fn diagonal_utilization_is_constant(pr in valid_profile(), n in 1u32..64) {
            prop_assert_eq!(
                eu_utilization(pr, n, n).unwrap(),
                eu_utilization(pr, 1, 1).unwrap()
            );
        }

        #[test]
        fn time_is_monotone(pr in valid_profile(), a in 1u32..20, b in 1u32..20) {
            let t = estimated_time(pr, a, b).unwrap();
            prop_assert!(estimated_time(pr, a + 1, b).unwrap() <= t + 1e-15);
            prop_assert!(estimated_time(pr, a, b + 1).unwrap() <= t + 1e-15);
        }

        #[test]
        fn coscaled_matches_ratio_form(pr in valid_profile(), a in 1u32..8, extra in 0u32..8) {
            let (nm, nv) = (a, a + extra);
            let k = nm as f64 / nv as f64;
            let u = eu_utilization(pr, nm, nv).unwrap();
            prop_assert!((u - utilization_at_ratio(pr, k)).abs() < 1e-12);
        }
    }
}
