//! DNN inference workloads as operator DAGs.

mod synth;
mod trace;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hwmodel::HardwareConfig;

pub use synth::{hbm_bound_fraction, 
    footprint_by_liveness, synthesize_with_memory, synthesize_workload, Archetype,
    MemoryPlan, SynthesizedWorkload,
};
pub use trace::{load_trace, parse_trace, save_trace, write_trace, TraceError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("graph has no operators")]
    Empty,
    #[error("duplicate operator id {0:?}")]
    DuplicateId(String),
    #[error("operator {op:?} depends on undefined id {dep:?}")]
    MissingDep { op: String, dep: String },
    #[error("dependency cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("operator {op:?} has negative {field}")]
    Negative { op: String, field: &'static str },
    #[error("operator {0:?} has neither ME nor VE work")]
    NoWork(String),
    #[error("operator {0:?} has ME work but max_me_parallelism = 0")]
    NoParallelism(String),
    #[error("hbm_footprint_bytes must be > 0")]
    ZeroFootprint,
}

/// One tensor operator and its resource demands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operator {
    pub id: String,
    pub deps: Vec<String>,
    /// Busy cycles if the whole operator ran on a single ME.
    pub me_cycles: u64,
    /// Busy cycles if run on all VEs of the reference core.
    pub ve_cycles: u64,
    pub hbm_bytes: u64,
    /// Upper bound on ME uTops the tiling allows; 0 only for VE-only ops.
    pub max_me_parallelism: u32,
    /// ME split runs along the reduction dimension, which forces a separate
    /// VE summation step.
    pub reduction_split: bool,
}

impl Operator {
    pub fn is_ve_only(&self) -> bool {
        self.me_cycles == 0
    }
}

/// A validated operator DAG. One inference request is one full pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OperatorGraph {
    operators: Vec<Operator>,
    hbm_footprint_bytes: u64,
    #[serde(skip)]
    order: Vec<usize>,
}

impl OperatorGraph {
    pub fn new(operators: Vec<Operator>, hbm_footprint_bytes: u64) -> Result<Self, ValidationError> {
        if operators.is_empty() {
            return Err(ValidationError::Empty);
        }
        if hbm_footprint_bytes == 0 {
            return Err(ValidationError::ZeroFootprint);
        }
        let mut index = HashMap::with_capacity(operators.len());
        for (i, op) in operators.iter().enumerate() {
            if index.insert(op.id.as_str(), i).is_some() {
                return Err(ValidationError::DuplicateId(op.id.clone()));
            }
        }
        for op in &operators {
            if op.me_cycles == 0 && op.ve_cycles == 0 {
                return Err(ValidationError::NoWork(op.id.clone()));
            }
            if op.me_cycles > 0 && op.max_me_parallelism == 0 {
                return Err(ValidationError::NoParallelism(op.id.clone()));
            }
            for d in &op.deps {
                if !index.contains_key(d.as_str()) {
                    return Err(ValidationError::MissingDep {
                        op: op.id.clone(),
                        dep: d.clone(),
                    });
                }
            }
        }
        let order = topo_order(&operators, &index)?;
        Ok(Self {
            operators,
            hbm_footprint_bytes,
            order,
        })
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    /// Deterministic topological order (Kahn, smallest declaration index first).
    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    pub fn edge_count(&self) -> usize {
        self.operators.iter().map(|o| o.deps.len()).sum()
    }

    pub fn hbm_footprint_bytes(&self) -> u64 {
        self.hbm_footprint_bytes
    }
}

impl<'de> Deserialize<'de> for OperatorGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            operators: Vec<Operator>,
            hbm_footprint_bytes: u64,
        }
        let raw = Raw::deserialize(d)?;
        OperatorGraph::new(raw.operators, raw.hbm_footprint_bytes).map_err(serde::de::Error::custom)
    }
}

fn topo_order(ops: &[Operator], index: &HashMap<&str, usize>) -> Result<Vec<usize>, ValidationError> {
    let n = ops.len();
    let mut indeg = vec![0usize; n];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, op) in ops.iter().enumerate() {
        let uniq: BTreeSet<usize> = op.deps.iter().map(|d| index[d.as_str()]).collect();
        indeg[i] = uniq.len();
        for d in uniq {
            users[d].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &u in &users[i] {
            indeg[u] -= 1;
            if indeg[u] == 0 {
                ready.insert(u);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n)
            .filter(|&i| indeg[i] > 0)
            .map(|i| ops[i].id.clone())
            .collect();
        return Err(ValidationError::Cycle(stuck));
    }
    Ok(order)
}

/// Fractions of solo 1-ME/1-VE runtime during which the ME (`m`) and the
/// VE (`v`) are active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    pub m: f64,
    pub v: f64,
}

impl ComputeProfile {
    pub const fn new(m: f64, v: f64) -> Self {
        Self { m, v }
    }
}

pub fn hbm_footprint(g: &OperatorGraph) -> u64 {
    g.hbm_footprint_bytes()
}

/// Profiles `(m, v)` by simulating the graph alone on a 1-ME/1-VE variant
/// of `hw`. VE work keeps the reference width of `hw`, so VE-only operators
/// run `hw.num_ves` times longer than on the full core.
pub fn profile_mv(g: &OperatorGraph, hw: &HardwareConfig) -> ComputeProfile {
    let solo = crate::engine::solo_profile(g, hw);
    ComputeProfile {
        m: solo.me_busy / solo.makespan as f64,
        v: solo.ve_busy / solo.makespan as f64,
    }
}

/// Per-operator id → declaration index, ordered for stable output.
pub fn id_index(g: &OperatorGraph) -> BTreeMap<&str, usize> {
    g.operators()
        .iter()
        .enumerate()
        .map(|(i, o)| (o.id.as_str(), i))
        .collect()
}
