//! Max-min fair division used for both HBM bandwidth and vector engines.

use serde::{Deserialize, Serialize};

/// Water-fills `capacity` across `demands`. Demands may be `f64::INFINITY`.
/// Every claimant gets `min(demand, level)` for the highest level that
/// fits, so unused shares of small claimants flow to the rest.
pub fn max_min_fill(demands: &[f64], capacity: f64) -> Vec<f64> {
    let mut grants = vec![0.0; demands.len()];
    if capacity <= 0.0 {
        return grants;
    }
    let mut order: Vec<usize> = (0..demands.len()).filter(|&i| demands[i] > 0.0).collect();
    // Stable sort keeps ties in index order.
    order.sort_by(|&a, &b| demands[a].total_cmp(&demands[b]));
    let mut left = capacity;
    let mut remaining = order.len();
    for &i in &order {
        let share = left / remaining as f64;
        let g = demands[i].min(share);
        grants[i] = g;
        left -= g;
        remaining -= 1;
    }
    grants
}

/// Splits peak bandwidth among per-tenant demands (rates in bytes per unit
/// time; `f64::INFINITY` for an unbounded demander).
pub fn hbm_arbitrate(demands: &[f64], bw: f64) -> Vec<f64> {
    max_min_fill(demands, bw)
}

/// Per-vNPU vector-engine demand at one scheduling point, in VE units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VeDemand {
    /// Drain demand of running ME uTops.
    pub me_demand: f64,
    /// Demand of the running VE uTop (all VEs it could use).
    pub ve_demand: f64,
    /// VEs served before any redistribution (the vNPU's dedicated VEs, or
    /// the whole core for the current owner under temporal policies).
    pub reserved: f64,
    /// Upper bound on what the vNPU may receive in total.
    pub cap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VeGrant {
    pub to_me: f64,
    pub to_ve: f64,
}

impl VeGrant {
    pub fn total(&self) -> f64 {
        self.to_me + self.to_ve
    }
}

/// Decides how many VEs each vNPU receives and, inside each vNPU, serves
/// ME-uTop drains before the VE uTop so occupied MEs free up first.
///
/// Reserved VEs are granted first. With `harvest` set, capacity left unused
/// by under-demanding vNPUs is water-filled across the remaining demand.
pub fn schedule_ve_ops(demands: &[VeDemand], capacity: f64, harvest: bool) -> Vec<VeGrant> {
    let want: Vec<f64> = demands
        .iter()
        .map(|d| (d.me_demand + d.ve_demand).min(d.cap))
        .collect();
    let mut totals: Vec<f64> = demands
        .iter()
        .zip(&want)
        .map(|(d, &w)| w.min(d.reserved))
        .collect();
    let used: f64 = totals.iter().sum();
    if harvest && capacity - used > 1e-12 {
        let unmet: Vec<f64> = want
            .iter()
            .zip(&totals)
            .map(|(w, g)| (w - g).max(0.0))
            .collect();
        let extra = max_min_fill(&unmet, capacity - used);
        for (t, e) in totals.iter_mut().zip(extra) {
            *t += e;
        }
    }
    demands
        .iter()
        .zip(totals)
        .map(|(d, g)| {
            let to_me = g.min(d.me_demand);
            VeGrant {
                to_me,
                to_ve: (g - to_me).min(d.ve_demand).max(0.0),
            }
        })
        .collect()
}
