//! uTop program model: lowering, execution tables, group sequencing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::{Operator, OperatorGraph};

/// Extra VE work of the trailing summation group, as a fraction of the
/// operator's VE cycles.
pub const DEFAULT_REDUCTION_OVERHEAD: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoweringError {
    #[error("operator {0:?} has ME work but max_me_parallelism = 0")]
    NoParallelism(String),
    #[error("target core needs n_x >= 1 and n_y >= 1")]
    EmptyCore,
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("program has no groups")]
    Empty,
    #[error("group {group} is empty")]
    EmptyGroup { group: usize },
    #[error("group {group} has {count} ME uTops, more than n_x = {n_x}")]
    TooManyMe { group: usize, count: usize, n_x: usize },
    #[error("group {group} has more than one VE uTop")]
    TwoVe { group: usize },
    #[error("group {group}: uTop {id} has kind/cycle mismatch")]
    BadUtop { group: usize, id: u32 },
    #[error("group {group}: directive targets missing group {target}")]
    BadTarget { group: usize, target: usize },
    #[error("group {group}: uTop {id} placed in the wrong slot")]
    WrongSlot { group: usize, id: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("conflicting nextGroup targets {0:?}")]
pub struct DirectiveConflict(pub Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtopKind {
    Me,
    Ve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UtopRole {
    #[default]
    Compute,
    /// Trailing partial-sum reduction after a reduction-dimension split.
    Summation,
}

/// nextGroup issued when the uTop finishes. With `repeat: Some(r)` it is
/// only issued during the first `r` visits of the group, which makes
/// bounded loops expressible as data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directive {
    pub target: usize,
    pub repeat: Option<u32>,
}

impl Directive {
    pub fn fires_on_visit(&self, visit: u32) -> bool {
        self.repeat.is_none_or(|r| visit <= r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroTop {
    pub id: u32,
    pub kind: UtopKind,
    /// Index of the operator in its graph.
    pub owner_op: usize,
    pub me_cycles: u64,
    /// VE cycles when all n_y VEs serve this uTop.
    pub ve_cycles_full: u64,
    pub hbm_bytes: u64,
    pub next_group: Option<Directive>,
    pub role: UtopRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroTopGroup {
    pub index: usize,
    pub me_utops: Vec<MicroTop>,
    pub ve_utop: Option<MicroTop>,
}

impl MicroTopGroup {
    /// Sorts loose uTops into ME slots and the single VE slot.
    pub fn from_utops(index: usize, utops: Vec<MicroTop>) -> Result<Self, TableError> {
        let mut g = MicroTopGroup {
            index,
            me_utops: Vec::new(),
            ve_utop: None,
        };
        for u in utops {
            match u.kind {
                UtopKind::Me => g.me_utops.push(u),
                UtopKind::Ve if g.ve_utop.is_some() => return Err(TableError::TwoVe { group: index }),
                UtopKind::Ve => g.ve_utop = Some(u),
            }
        }
        Ok(g)
    }

    pub fn utops(&self) -> impl Iterator<Item = &MicroTop> {
        self.me_utops.iter().chain(self.ve_utop.iter())
    }

    pub fn len(&self) -> usize {
        self.me_utops.len() + usize::from(self.ve_utop.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTable {
    pub rows: Vec<MicroTopGroup>,
    pub n_x: usize,
    pub n_y: usize,
    /// Operator ids by `owner_op` index, for listings and reports.
    pub op_ids: Vec<String>,
}

/// Splits `total` into `parts` near-equal integers, larger shares first.
fn split_even(total: u64, parts: u64) -> impl Iterator<Item = u64> {
    let q = total / parts;
    let r = total % parts;
    (0..parts).map(move |i| q + u64::from(i < r))
}

/// Lowers one operator for a core with `n_x` MEs and `n_y` VEs. Returned
/// groups have local indices starting at 0 and uTop ids starting at
/// `first_id`.
pub fn lower_operator(
    op: &Operator,
    owner_op: usize,
    n_x: usize,
    n_y: usize,
    reduction_overhead: f64,
    first_id: u32,
) -> Result<Vec<MicroTopGroup>, LoweringError> {
    if n_x == 0 || n_y == 0 {
        return Err(LoweringError::EmptyCore);
    }
    let mut next_id = first_id;
    let mut fresh = || {
        let id = next_id;
        next_id += 1;
        id
    };
    if op.me_cycles == 0 {
        let u = MicroTop {
            id: fresh(),
            kind: UtopKind::Ve,
            owner_op,
            me_cycles: 0,
            ve_cycles_full: op.ve_cycles,
            hbm_bytes: op.hbm_bytes,
            next_group: None,
            role: UtopRole::Compute,
        };
        return Ok(vec![MicroTopGroup {
            index: 0,
            me_utops: vec![],
            ve_utop: Some(u),
        }]);
    }
    if op.max_me_parallelism == 0 {
        return Err(LoweringError::NoParallelism(op.id.clone()));
    }
    let p = (op.max_me_parallelism as u64).min(n_x as u64).min(op.me_cycles);
    let me = split_even(op.me_cycles, p);
    let ve = split_even(op.ve_cycles, p);
    let hbm = split_even(op.hbm_bytes, p);
    let me_utops = me
        .zip(ve)
        .zip(hbm)
        .map(|((m, v), h)| MicroTop {
            id: fresh(),
            kind: UtopKind::Me,
            owner_op,
            me_cycles: m,
            ve_cycles_full: v,
            hbm_bytes: h,
            next_group: None,
            role: UtopRole::Compute,
        })
        .collect();
    let mut groups = vec![MicroTopGroup {
        index: 0,
        me_utops,
        ve_utop: None,
    }];
    if op.reduction_split && p > 1 {
        let cost = ((op.ve_cycles as f64 * reduction_overhead).ceil() as u64).max(1);
        groups.push(MicroTopGroup {
            index: 1,
            me_utops: vec![],
            ve_utop: Some(MicroTop {
                id: fresh(),
                kind: UtopKind::Ve,
                owner_op,
                me_cycles: 0,
                ve_cycles_full: cost,
                hbm_bytes: 0,
                next_group: None,
                role: UtopRole::Summation,
            }),
        });
    }
    Ok(groups)
}

/// Checks group shape and directive targets, renumbers rows in order.
pub fn build_execution_table(
    mut groups: Vec<MicroTopGroup>,
    n_x: usize,
    n_y: usize,
    op_ids: Vec<String>,
) -> Result<ExecutionTable, TableError> {
    if groups.is_empty() {
        return Err(TableError::Empty);
    }
    let n = groups.len();
    for (i, g) in groups.iter_mut().enumerate() {
        g.index = i;
        if g.is_empty() {
            return Err(TableError::EmptyGroup { group: i });
        }
        if g.me_utops.len() > n_x {
            return Err(TableError::TooManyMe {
                group: i,
                count: g.me_utops.len(),
                n_x,
            });
        }
        for u in &g.me_utops {
            if u.kind != UtopKind::Me {
                return Err(TableError::WrongSlot { group: i, id: u.id });
            }
        }
        if let Some(u) = &g.ve_utop {
            if u.kind != UtopKind::Ve {
                return Err(TableError::WrongSlot { group: i, id: u.id });
            }
        }
        for u in g.utops() {
            let ok = match u.kind {
                UtopKind::Me => u.me_cycles > 0,
                UtopKind::Ve => u.me_cycles == 0 && u.ve_cycles_full > 0,
            };
            if !ok {
                return Err(TableError::BadUtop { group: i, id: u.id });
            }
            if let Some(d) = u.next_group {
                if d.target >= n {
                    return Err(TableError::BadTarget {
                        group: i,
                        target: d.target,
                    });
                }
            }
        }
    }
    Ok(ExecutionTable {
        rows: groups,
        n_x,
        n_y,
        op_ids,
    })
}

/// Lowers a whole graph in topological order, one operator after another.
pub fn lower_graph(
    g: &OperatorGraph,
    n_x: usize,
    n_y: usize,
    reduction_overhead: f64,
) -> Result<ExecutionTable, LoweringError> {
    let mut groups = Vec::new();
    let mut next_id = 0u32;
    for &i in g.topo_order() {
        let op = &g.operators()[i];
        let gs = lower_operator(op, i, n_x, n_y, reduction_overhead, next_id)?;
        next_id += gs.iter().map(|x| x.len() as u32).sum::<u32>();
        groups.extend(gs);
    }
    let op_ids = g.operators().iter().map(|o| o.id.clone()).collect();
    Ok(build_execution_table(groups, n_x, n_y, op_ids)?)
}

/// Group that follows `current` given the directives issued during this
/// visit. `Ok(None)` means the program has finished.
pub fn next_group(
    current: usize,
    directives: &[usize],
    num_groups: usize,
) -> Result<Option<usize>, DirectiveConflict> {
    match directives.split_first() {
        None => Ok((current + 1 < num_groups).then_some(current + 1)),
        Some((&first, rest)) => {
            if rest.iter().all(|&t| t == first) {
                Ok(Some(first))
            } else {
                let mut all = directives.to_vec();
                all.sort_unstable();
                all.dedup();
                Err(DirectiveConflict(all))
            }
        }
    }
}

impl ExecutionTable {
    /// `(group, slot)` of uTop `id` where the VE slot is column `n_x`.
    pub fn query_indices(&self, id: u32) -> Option<(usize, usize)> {
        for row in &self.rows {
            if let Some(c) = row.me_utops.iter().position(|u| u.id == id) {
                return Some((row.index, c));
            }
            if row.ve_utop.as_ref().is_some_and(|u| u.id == id) {
                return Some((row.index, self.n_x));
            }
        }
        None
    }

    pub fn utop_count(&self) -> usize {
        self.rows.iter().map(MicroTopGroup::len).sum()
    }

    pub fn total_me_cycles(&self) -> u64 {
        self.rows.iter().flat_map(|r| r.utops()).map(|u| u.me_cycles).sum()
    }

    /// Text listing, one row per group and `n_x + 1` cells per row.
    pub fn listing(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# n_x={} n_y={} groups={}", self.n_x, self.n_y, self.rows.len());
        for row in &self.rows {
            let _ = write!(s, "g{}", row.index);
            for c in 0..self.n_x {
                match row.me_utops.get(c) {
                    Some(u) => {
                        let _ = write!(s, " | {}", self.cell(u));
                    }
                    None => s.push_str(" | -"),
                }
            }
            match &row.ve_utop {
                Some(u) => {
                    let _ = write!(s, " | {}", self.cell(u));
                }
                None => s.push_str(" | -"),
            }
            s.push('\n');
        }
        s
    }

    fn cell(&self, u: &MicroTop) -> String {
        let name = self.op_ids.get(u.owner_op).map_or("?", String::as_str);
        let mut c = match u.kind {
            UtopKind::Me => format!("M{}:{} me={} ve={}", u.id, name, u.me_cycles, u.ve_cycles_full),
            UtopKind::Ve => format!("V{}:{} ve={}", u.id, name, u.ve_cycles_full),
        };
        if u.role == UtopRole::Summation {
            c.push_str(" sum");
        }
        if u.hbm_bytes > 0 {
            let _ = write!(c, " hbm={}", u.hbm_bytes);
        }
        if let Some(d) = u.next_group {
            let _ = write!(c, " ->g{}", d.target);
            if let Some(r) = d.repeat {
                let _ = write!(c, "x{r}");
            }
        }
        c
    }
}
