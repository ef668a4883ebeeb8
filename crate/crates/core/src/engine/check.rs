//! Replays an event log and reports violated invariants.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::{EventKind, SimEvent};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LogCheck {
    pub violations: Vec<String>,
    /// Preemptions whose drain was observed to completion.
    pub reclaims: usize,
    pub utops_finished: usize,
    pub preempted_utops_finished: usize,
}

impl LogCheck {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Default)]
struct Progress {
    done: u64,
    preempted: bool,
}

/// Checks that
/// - no ME hosts two uTops at once,
/// - a preempted ME stays idle for exactly `preemption_cycles`,
/// - a preempted uTop finishes exactly the work it still owed,
/// - granted VEs never exceed `num_ves` on a core,
/// - a vNPU enters a group only after every uTop of the previous one ended.
pub fn check_log(events: &[SimEvent], num_ves: u32, preemption_cycles: u64) -> LogCheck {
    let mut out = LogCheck::default();
    let mut occupant: HashMap<(usize, usize), (usize, u32)> = HashMap::new();
    // ME -> time its drain started
    let mut draining: HashMap<(usize, usize), u64> = HashMap::new();
    let mut progress: HashMap<(usize, u32), Progress> = HashMap::new();
    let mut outstanding: HashMap<usize, BTreeSet<u32>> = HashMap::new();
    let mut grants: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut violations = Vec::new();
    let mut bad = |m: String| violations.push(m);

    let mut i = 0;
    while i < events.len() {
        let t = events[i].time;
        let mut j = i;
        while j < events.len() && events[j].time == t {
            let e = &events[j];
            let c = e.core;
            match e.kind {
                EventKind::Launch { vnpu, utop, me: Some(s), .. } => {
                    if let Some(prev) = occupant.get(&(c, s)) {
                        bad(format!("t={t} core {c} ME {s}: launch of {vnpu}/{utop} over {prev:?}"));
                    }
                    if let Some(&since) = draining.get(&(c, s)) {
                        bad(format!("t={t} core {c} ME {s}: launch during drain from {since}"));
                    }
                    occupant.insert((c, s), (vnpu, utop));
                }
                EventKind::Preempt { vnpu, utop, me, done_units, .. } => {
                    let p = progress.entry((vnpu, utop)).or_default();
                    if done_units < p.done {
                        bad(format!("t={t} uTop {vnpu}/{utop}: progress went backwards"));
                    }
                    p.done = done_units;
                    p.preempted = true;
                    if let Some(s) = me {
                        occupant.remove(&(c, s));
                        if preemption_cycles > 0 {
                            draining.insert((c, s), t);
                        }
                    }
                }
                EventKind::PreemptionDone { me, .. } => {
                    if let Some(since) = draining.remove(&(c, me)) {
                        if t - since != preemption_cycles {
                            bad(format!(
                                "core {c} ME {me}: drain took {} cycles, expected {preemption_cycles}",
                                t - since
                            ));
                        }
                        out.reclaims += 1;
                    }
                }
                EventKind::UtopFinish { vnpu, utop, me, units, total_units } => {
                    let p = progress.remove(&(vnpu, utop)).unwrap_or_default();
                    if p.done + units != total_units {
                        bad(format!(
                            "t={t} uTop {vnpu}/{utop}: executed {} of {total_units} units",
                            p.done + units
                        ));
                    }
                    out.utops_finished += 1;
                    if p.preempted {
                        out.preempted_utops_finished += 1;
                    }
                    if let Some(s) = me {
                        if occupant.remove(&(c, s)) != Some((vnpu, utop)) {
                            bad(format!("t={t} core {c} ME {s}: {vnpu}/{utop} finished elsewhere"));
                        }
                    }
                    outstanding.entry(vnpu).or_default().remove(&utop);
                }
                EventKind::UtopReady { vnpu, utop, .. } => {
                    outstanding.entry(vnpu).or_default().insert(utop);
                }
                EventKind::GroupEnter { vnpu, group, .. } => {
                    if outstanding.get(&vnpu).is_some_and(|s| !s.is_empty()) {
                        bad(format!("t={t} vNPU {vnpu}: entered group {group} with uTops pending"));
                    }
                }
                EventKind::VeGrant { vnpu, to_me, to_ve } => {
                    grants.insert((c, vnpu), to_me + to_ve);
                }
                _ => {}
            }
            j += 1;
        }
        let mut per_core: BTreeMap<usize, f64> = BTreeMap::new();
        for (&(c, _), &g) in &grants {
            *per_core.entry(c).or_default() += g;
        }
        for (c, g) in per_core {
            if g > num_ves as f64 + 1e-9 {
                bad(format!("t={t} core {c}: {g} VEs granted of {num_ves}"));
            }
        }
        i = j;
    }
    out.violations = violations;
    out
}
