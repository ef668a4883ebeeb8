//! Seeded generator of archetype workloads.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{profile_mv, Operator, OperatorGraph};
use crate::hwmodel::{HardwareConfig, MIB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Convolution-dominated: ME busy almost all the time.
    MeHeavy,
    /// Embedding/vector dominated: VE busy almost all the time.
    VeHeavy,
    /// Transformer-like mix of matmuls and vector work.
    Balanced,
    /// Decoder-like: every operator waits on HBM traffic.
    MemoryBound,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::MeHeavy,
        Archetype::VeHeavy,
        Archetype::Balanced,
        Archetype::MemoryBound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::MeHeavy => "me_heavy",
            Archetype::VeHeavy => "ve_heavy",
            Archetype::Balanced => "balanced",
            Archetype::MemoryBound => "memory_bound",
        }
    }

    /// Repeating operator pattern: `true` for a matmul-like operator,
    /// `false` for a vector-only one.
    fn pattern(self) -> &'static [bool] {
        match self {
            Archetype::MeHeavy => &[true, true, true, true, true, true, false],
            Archetype::VeHeavy => &[true, false, true, false, false],
            Archetype::Balanced => &[true, true, true, false, false],
            Archetype::MemoryBound => &[true, true, false],
        }
    }

    /// Whether a profiled graph meets this archetype's target.
    pub fn accepts(self, g: &OperatorGraph, hw: &HardwareConfig) -> bool {
        match self {
            Archetype::MemoryBound => hbm_bound_fraction(g, hw) >= 2.0 / 3.0,
            _ => {
                let p = profile_mv(g, hw);
                match self {
                    Archetype::MeHeavy => p.m >= 0.8 && p.v <= 0.5,
                    Archetype::VeHeavy => p.m <= 0.4 && p.v >= 0.8,
                    Archetype::Balanced => (0.55..=0.75).contains(&p.m) && (0.55..=0.75).contains(&p.v),
                    Archetype::MemoryBound => unreachable!(),
                }
            }
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown archetype {s:?} (expected me_heavy, ve_heavy, balanced or memory_bound)"))
    }
}

/// Fraction of a one-request solo run on the full core `hw` during which
/// some running uTop is throttled by HBM bandwidth.
pub fn hbm_bound_fraction(g: &OperatorGraph, hw: &HardwareConfig) -> f64 {
    use crate::neuisa::{lower_graph, DEFAULT_REDUCTION_OVERHEAD};
    let table = lower_graph(g, hw.num_mes as usize, hw.num_ves as usize, DEFAULT_REDUCTION_OVERHEAD)
        .expect("validated graphs always lower");
    let r = crate::engine::run_single(hw, std::sync::Arc::new(table), 1, crate::engine::Policy::Neu)
        .expect("solo run");
    r.vnpus[0].hbm_bound_cycles as f64 / r.makespan() as f64
}

/// Per-operator memory bookkeeping kept alongside a generated graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub weights: Vec<u64>,
    /// Output activation bytes of each operator.
    pub activations: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedWorkload {
    pub graph: OperatorGraph,
    pub plan: MemoryPlan,
    /// Derived seed of the accepted attempt.
    pub attempt_seed: u64,
    pub meets_target: bool,
}

/// Weights plus the peak of simultaneously live activations when operators
/// run in topological order. An output is live from its producer until its
/// last consumer has run.
pub fn footprint_by_liveness(ops: &[Operator], order: &[usize], plan: &MemoryPlan) -> u64 {
    let n = ops.len();
    let mut pos = vec![0usize; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let index: std::collections::HashMap<&str, usize> =
        ops.iter().enumerate().map(|(i, o)| (o.id.as_str(), i)).collect();
    let mut last_use: Vec<usize> = (0..n).map(|i| pos[i]).collect();
    for (i, op) in ops.iter().enumerate() {
        for d in &op.deps {
            let j = index[d.as_str()];
            last_use[j] = last_use[j].max(pos[i]);
        }
    }
    let mut delta = vec![0i128; n + 1];
    for i in 0..n {
        delta[pos[i]] += plan.activations[i] as i128;
        delta[last_use[i] + 1] -= plan.activations[i] as i128;
    }
    let mut live = 0i128;
    let mut peak = 0i128;
    for d in &delta[..n] {
        live += d;
        peak = peak.max(live);
    }
    plan.weights.iter().sum::<u64>() + peak as u64
}

const ATTEMPTS: u64 = 24;
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Deterministic archetype graph with `scale` operators. Retries derived
/// seeds until the archetype target holds on the default hardware and
/// returns the first graph that meets it (or the last attempt).
pub fn synthesize_workload(archetype: Archetype, scale: usize, seed: u64) -> OperatorGraph {
    synthesize_with_memory(archetype, scale, seed).graph
}

pub fn synthesize_with_memory(archetype: Archetype, scale: usize, seed: u64) -> SynthesizedWorkload {
    let hw = HardwareConfig::default();
    let mut last = None;
    for attempt in 0..ATTEMPTS {
        let s = seed.wrapping_add(attempt.wrapping_mul(GOLDEN));
        let (graph, plan) = generate(archetype, scale.max(1), s, &hw);
        let ok = archetype.accepts(&graph, &hw);
        let w = SynthesizedWorkload {
            graph,
            plan,
            attempt_seed: s,
            meets_target: ok,
        };
        if ok {
            return w;
        }
        last = Some(w);
    }
    last.expect("at least one attempt")
}

fn pick_parallelism(rng: &mut ChaCha8Rng, table: &[(u32, f64)]) -> u32 {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for &(p, w) in table {
        acc += w;
        if x < acc {
            return p;
        }
    }
    table[table.len() - 1].0
}

fn generate(a: Archetype, scale: usize, seed: u64, hw: &HardwareConfig) -> (OperatorGraph, MemoryPlan) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bpc = hw.hbm_bytes_per_cycle();
    let mes = hw.num_mes as f64;
    let pattern = a.pattern();
    let mut ops = Vec::with_capacity(scale);
    let mut plan = MemoryPlan {
        weights: Vec::with_capacity(scale),
        activations: Vec::with_capacity(scale),
    };
    for i in 0..scale {
        let is_me = pattern[i % pattern.len()];
        let mut deps = Vec::new();
        if i >= 1 {
            deps.push(ops_id(&ops, i - 1));
        }
        if i >= 2 && rng.random_bool(0.2) {
            let back = if i >= 3 && rng.random_bool(0.5) { 3 } else { 2 };
            deps.push(ops_id(&ops, i - back));
        }
        let op = if is_me {
            let (me_lo, me_hi, ratio_lo, ratio_hi, par_table): (u64, u64, f64, f64, &[(u32, f64)]) = match a {
                Archetype::MeHeavy => (20_000, 80_000, 0.03, 0.08, &[(4, 0.7), (2, 0.2), (1, 0.1)]),
                Archetype::VeHeavy => (10_000, 40_000, 0.12, 0.2, &[(4, 0.4), (2, 0.3), (1, 0.3)]),
                Archetype::Balanced => (20_000, 60_000, 0.09, 0.14, &[(4, 0.7), (2, 0.2), (1, 0.1)]),
                Archetype::MemoryBound => (8_000, 24_000, 0.05, 0.1, &[(1, 0.7), (2, 0.3)]),
            };
            let me = rng.random_range(me_lo..=me_hi);
            let ve = ((me as f64 * rng.random_range(ratio_lo..ratio_hi)).round() as u64).max(1);
            let par = pick_parallelism(&mut rng, par_table);
            let red = a == Archetype::MeHeavy && par > 1 && rng.random_bool(0.1);
            let full_time = me as f64 / (par as f64).min(mes);
            let traffic = match a {
                Archetype::MemoryBound => rng.random_range(2.5..4.0),
                _ => rng.random_range(0.05..0.2),
            };
            Operator {
                id: format!("mm{i}"),
                deps,
                me_cycles: me,
                ve_cycles: ve,
                hbm_bytes: (full_time * bpc * traffic).round() as u64,
                max_me_parallelism: par,
                reduction_split: red,
            }
        } else {
            let (lo, hi) = match a {
                Archetype::MeHeavy => (2_000, 8_000),
                Archetype::VeHeavy => (5_000, 20_000),
                Archetype::Balanced => (4_000, 10_000),
                Archetype::MemoryBound => (2_000, 6_000),
            };
            let ve: u64 = rng.random_range(lo..=hi);
            let traffic = match a {
                Archetype::MemoryBound => rng.random_range(2.5..4.0),
                Archetype::VeHeavy => rng.random_range(0.3..1.2),
                _ => rng.random_range(0.05..0.3),
            };
            Operator {
                id: format!("vec{i}"),
                deps,
                me_cycles: 0,
                ve_cycles: ve,
                hbm_bytes: (ve as f64 * bpc * traffic).round() as u64,
                max_me_parallelism: 0,
                reduction_split: false,
            }
        };
        let weights = if is_me {
            op.me_cycles * rng.random_range(32..96)
        } else {
            0
        };
        plan.weights.push(weights);
        plan.activations.push(rng.random_range(MIB / 4..=4 * MIB));
        ops.push(op);
    }
    // ids are positional and deps point backwards, so declaration order is
    // already topological
    let order: Vec<usize> = (0..ops.len()).collect();
    let footprint = footprint_by_liveness(&ops, &order, &plan);
    let g = OperatorGraph::new(ops, footprint).expect("generator emits valid graphs");
    (g, plan)
}

fn ops_id(ops: &[Operator], i: usize) -> String {
    ops[i].id.clone()
}
