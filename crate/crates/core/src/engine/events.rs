use std::io::{self, Write};

use serde::{Deserialize, Serialize};

/// One entry of the simulation log. `vnpu` fields are scenario-wide tenant
/// indices; `me` is the ME index within `core`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: u64,
    pub core: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    RequestArrival {
        vnpu: usize,
        request: u32,
    },
    RequestFinish {
        vnpu: usize,
        request: u32,
        latency: u64,
    },
    GroupEnter {
        vnpu: usize,
        request: u32,
        group: usize,
        visit: u32,
    },
    UtopReady {
        vnpu: usize,
        utop: u32,
        group: usize,
        slot: usize,
    },
    Launch {
        vnpu: usize,
        utop: u32,
        me: Option<usize>,
        harvested: bool,
    },
    /// `done_units` and `remaining_units` are in work units of the uTop;
    /// `remaining_me_cycles` is the ME time still owed at full speed.
    Preempt {
        vnpu: usize,
        utop: u32,
        me: Option<usize>,
        for_vnpu: Option<usize>,
        done_units: u64,
        remaining_units: u64,
        remaining_me_cycles: u64,
    },
    UtopFinish {
        vnpu: usize,
        utop: u32,
        me: Option<usize>,
        /// Work units executed in the final segment.
        units: u64,
        total_units: u64,
    },
    PreemptionDone {
        me: usize,
        for_vnpu: Option<usize>,
        /// Whether the beneficiary still had a waiting ME uTop.
        for_waiting: bool,
    },
    VeGrant {
        vnpu: usize,
        to_me: f64,
        to_ve: f64,
    },
    QuantumSwitch {
        from: usize,
        to: usize,
    },
}

impl SimEvent {
    pub fn vnpu(&self) -> Option<usize> {
        use EventKind::*;
        match self.kind {
            RequestArrival { vnpu, .. }
            | RequestFinish { vnpu, .. }
            | GroupEnter { vnpu, .. }
            | UtopReady { vnpu, .. }
            | Launch { vnpu, .. }
            | Preempt { vnpu, .. }
            | UtopFinish { vnpu, .. }
            | VeGrant { vnpu, .. } => Some(vnpu),
            PreemptionDone { .. } | QuantumSwitch { .. } => None,
        }
    }
}

/// Writes events as JSON lines.
pub fn write_jsonl<W: Write>(events: &[SimEvent], mut w: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl(text: &str) -> Result<Vec<SimEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
