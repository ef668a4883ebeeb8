//! Placement of vNPUs onto physical cores and segment-based memory isolation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{Isolation, VNpuSpec};
use crate::hwmodel::{segment_layout, HardwareConfig, SegmentLayout};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("fleet is empty")]
    EmptyFleet,
    #[error("no pNPU can hold vNPU {id:?}: {reason}")]
    Placement { id: String, reason: String },
    #[error("vNPU {0:?} is not resident")]
    NotFound(String),
    #[error("vNPU {0:?} is already resident")]
    Duplicate(String),
    #[error("vNPU {0:?} needs at least one ME and one VE")]
    ZeroEus(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentFault {
    pub offset: u64,
}

impl std::fmt::Display for SegmentFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "segment fault at offset {}", self.offset)
    }
}

impl std::error::Error for SegmentFault {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTable {
    pub vnpu_id: String,
    pub sram_base_segment: u64,
    pub sram_segment_count: u64,
    pub hbm_base_segment: u64,
    pub hbm_segment_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resident {
    pub spec: VNpuSpec,
    pub table: SegmentTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PNpuState {
    pub id: usize,
    pub hw: HardwareConfig,
    pub layout: SegmentLayout,
    pub resident: Vec<Resident>,
    pub committed_mes: u32,
    pub committed_ves: u32,
    pub committed_sram_segments: u64,
    pub committed_hbm_segments: u64,
}

impl PNpuState {
    pub fn new(id: usize, hw: HardwareConfig) -> Self {
        Self {
            id,
            layout: segment_layout(&hw),
            hw,
            resident: Vec::new(),
            committed_mes: 0,
            committed_ves: 0,
            committed_sram_segments: 0,
            committed_hbm_segments: 0,
        }
    }

    fn total_eus(&self) -> f64 {
        (self.hw.num_mes + self.hw.num_ves) as f64
    }

    fn eu_frac(&self, extra: u32) -> f64 {
        (self.committed_mes + self.committed_ves + extra) as f64 / self.total_eus()
    }

    fn hbm_frac(&self, extra: u64) -> f64 {
        (self.committed_hbm_segments + extra) as f64 / self.layout.hbm_segments as f64
    }

    fn free_run(&self, sram: bool, count: u64) -> Option<u64> {
        let cap = if sram {
            self.layout.sram_segments
        } else {
            self.layout.hbm_segments
        };
        let mut used: Vec<(u64, u64)> = self
            .resident
            .iter()
            .map(|r| {
                if sram {
                    (r.table.sram_base_segment, r.table.sram_segment_count)
                } else {
                    (r.table.hbm_base_segment, r.table.hbm_segment_count)
                }
            })
            .collect();
        used.sort_unstable();
        lowest_fit(&used, cap, count)
    }

    fn largest_free_sram_run(&self) -> u64 {
        let mut used: Vec<(u64, u64)> = self
            .resident
            .iter()
            .map(|r| (r.table.sram_base_segment, r.table.sram_segment_count))
            .collect();
        used.sort_unstable();
        let mut best = 0;
        let mut cursor = 0;
        for (b, c) in used {
            best = best.max(b.saturating_sub(cursor));
            cursor = cursor.max(b + c);
        }
        best.max(self.layout.sram_segments.saturating_sub(cursor))
    }

    fn holds(&self, id: &str) -> bool {
        self.resident.iter().any(|r| r.spec.id == id)
    }
}

/// Lowest base where `count` segments fit between sorted `(base, len)` runs.
fn lowest_fit(used: &[(u64, u64)], cap: u64, count: u64) -> Option<u64> {
    let mut cursor = 0;
    for &(b, c) in used {
        if b >= cursor + count {
            return Some(cursor);
        }
        cursor = cursor.max(b + c);
    }
    (cursor + count <= cap).then_some(cursor)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MapOptions {
    /// Ceiling on committed/physical EU ratio for software-isolated vNPUs;
    /// `None` leaves oversubscription unbounded.
    pub eu_oversubscription_cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub pnpu: usize,
    pub table: SegmentTable,
}

fn commit(p: &mut PNpuState, v: &VNpuSpec, table: SegmentTable) -> Placement {
    p.committed_mes += v.n_m;
    p.committed_ves += v.n_v;
    p.committed_sram_segments += table.sram_segment_count;
    p.committed_hbm_segments += table.hbm_segment_count;
    p.resident.push(Resident {
        spec: v.clone(),
        table: table.clone(),
    });
    Placement { pnpu: p.id, table }
}

/// Places `v` on the fleet and records it there.
///
/// Hardware-isolated vNPUs need free MEs, VEs and contiguous segment runs;
/// among candidates the one whose EU and HBM fill levels end up closest is
/// chosen. Software-isolated vNPUs go to the least-committed pNPU and may
/// oversubscribe EUs but not HBM.
pub fn map_vnpu(
    v: &VNpuSpec,
    fleet: &mut [PNpuState],
    opts: MapOptions,
) -> Result<Placement, MapError> {
    if fleet.is_empty() {
        return Err(MapError::EmptyFleet);
    }
    if v.n_m == 0 || v.n_v == 0 {
        return Err(MapError::ZeroEus(v.id.clone()));
    }
    if fleet.iter().any(|p| p.holds(&v.id)) {
        return Err(MapError::Duplicate(v.id.clone()));
    }
    let fail = |reason: &str| MapError::Placement {
        id: v.id.clone(),
        reason: reason.to_string(),
    };
    match v.isolation {
        Isolation::HardwareIsolated => {
            let mut best: Option<(f64, usize, u64, u64)> = None;
            for (i, p) in fleet.iter().enumerate() {
                if p.committed_mes + v.n_m > p.hw.num_mes || p.committed_ves + v.n_v > p.hw.num_ves {
                    continue;
                }
                let Some(sb) = p.free_run(true, v.sram_segments) else {
                    continue;
                };
                let Some(hb) = p.free_run(false, v.hbm_segments) else {
                    continue;
                };
                let score = (p.eu_frac(v.eus()) - p.hbm_frac(v.hbm_segments)).abs();
                if best.is_none_or(|(s, ..)| score < s) {
                    best = Some((score, i, sb, hb));
                }
            }
            let (_, i, sb, hb) = best.ok_or_else(|| fail("EU or memory capacity exhausted"))?;
            let table = SegmentTable {
                vnpu_id: v.id.clone(),
                sram_base_segment: sb,
                sram_segment_count: v.sram_segments,
                hbm_base_segment: hb,
                hbm_segment_count: v.hbm_segments,
            };
            Ok(commit(&mut fleet[i], v, table))
        }
        Isolation::SoftwareIsolated => {
            let mut best: Option<(f64, usize, u64, u64, u64)> = None;
            for (i, p) in fleet.iter().enumerate() {
                if let Some(cap) = opts.eu_oversubscription_cap {
                    if p.eu_frac(v.eus()) > cap + 1e-12 {
                        continue;
                    }
                }
                let Some(hb) = p.free_run(false, v.hbm_segments) else {
                    continue;
                };
                let sram = v.sram_segments.min(p.largest_free_sram_run());
                if sram == 0 {
                    continue;
                }
                let Some(sb) = p.free_run(true, sram) else {
                    continue;
                };
                let load = (p.eu_frac(0) + p.hbm_frac(0)) / 2.0;
                if best.is_none_or(|(s, ..)| load < s) {
                    best = Some((load, i, sb, sram, hb));
                }
            }
            let (_, i, sb, sram, hb) = best.ok_or_else(|| fail("HBM capacity exhausted"))?;
            let table = SegmentTable {
                vnpu_id: v.id.clone(),
                sram_base_segment: sb,
                sram_segment_count: sram,
                hbm_base_segment: hb,
                hbm_segment_count: v.hbm_segments,
            };
            Ok(commit(&mut fleet[i], v, table))
        }
    }
}

/// Removes vNPU `id` and releases its EUs and segments.
pub fn unmap_vnpu(id: &str, fleet: &mut [PNpuState]) -> Result<Resident, MapError> {
    for p in fleet.iter_mut() {
        if let Some(pos) = p.resident.iter().position(|r| r.spec.id == id) {
            let r = p.resident.remove(pos);
            p.committed_mes -= r.spec.n_m;
            p.committed_ves -= r.spec.n_v;
            p.committed_sram_segments -= r.table.sram_segment_count;
            p.committed_hbm_segments -= r.table.hbm_segment_count;
            return Ok(r);
        }
    }
    Err(MapError::NotFound(id.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Sram,
    Hbm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalLocation {
    pub segment: u64,
    pub offset: u64,
}

/// Base + offset translation of a vNPU-relative address.
pub fn translate(
    space: Space,
    offset: u64,
    table: &SegmentTable,
    layout: &SegmentLayout,
) -> Result<PhysicalLocation, SegmentFault> {
    let (base, count, seg) = match space {
        Space::Sram => (
            table.sram_base_segment,
            table.sram_segment_count,
            layout.sram_segment_bytes,
        ),
        Space::Hbm => (
            table.hbm_base_segment,
            table.hbm_segment_count,
            layout.hbm_segment_bytes,
        ),
    };
    if offset >= count.saturating_mul(seg) {
        return Err(SegmentFault { offset });
    }
    Ok(PhysicalLocation {
        segment: base + offset / seg,
        offset: offset % seg,
    })
}
