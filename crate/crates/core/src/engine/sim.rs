use std::collections::VecDeque;
use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::fair::{hbm_arbitrate, max_min_fill, schedule_ve_ops, VeDemand};
use super::{
    Arrivals, CoreResult, CoreSetup, EngineConfig, EngineError, EventKind, MeInterval, OpSpan,
    Policy, RequestRecord, Series, SimEvent, VnpuResult, WORK_SCALE,
};
use crate::allocator::Isolation;
use crate::hwmodel::HardwareConfig;
use crate::neuisa::{next_group, ExecutionTable, UtopKind};

const SCALE: f64 = WORK_SCALE as f64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(super) enum Mode {
    Spatial { harvest: bool },
    Temporal,
    V10,
    Prema,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(super) enum Slot {
    /// `reserved` marks a slot whose drain just ended for that vNPU; it is
    /// honored for one scheduling pass.
    Idle { reserved: Option<usize> },
    Busy { vnpu: usize, task: usize },
    Draining { until: u64, for_vnpu: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(super) enum TaskState {
    Waiting,
    Running {
        me: Option<usize>,
        harvested: bool,
        since: u64,
    },
    Done,
}

#[derive(Debug, Clone)]
pub(super) struct Task {
    pub slot_col: usize,
    pub utop: u32,
    pub kind: UtopKind,
    pub op: usize,
    pub me_cycles: u64,
    /// Drain or vector work in VE-cycles.
    pub ve_work: f64,
    pub bytes: f64,
    /// ME cycles for ME uTops, VE-cycles for VE uTops.
    pub nominal: u64,
    pub total: u64,
    pub rem: u64,
    /// Units executed since the last launch.
    pub seg: u64,
    pub partial: bool,
    pub directive: Option<crate::neuisa::Directive>,
    pub state: TaskState,
    pub ve_grant: f64,
    pub hbm_rate: f64,
    pub rate: f64,
    pub hbm_bound: bool,
    pub finish: Option<u64>,
}

impl Task {
    pub fn is_running(&self) -> bool {
        matches!(self.state, TaskState::Running { .. })
    }

    pub fn is_waiting_me(&self) -> bool {
        self.kind == UtopKind::Me && self.state == TaskState::Waiting
    }

    /// VE units needed to drain ME output at full ME speed.
    fn drain_demand(&self, n_y: f64) -> f64 {
        if self.kind != UtopKind::Me || self.ve_work == 0.0 {
            0.0
        } else {
            (self.ve_work / self.me_cycles as f64).min(n_y)
        }
    }
}

struct Current {
    index: u32,
    arrival: u64,
    start: u64,
}

pub(super) struct Vn {
    pub gid: usize,
    pub id: String,
    pub label: String,
    pub n_m: u32,
    pub n_v: u32,
    pub priority: f64,
    pub program: Arc<ExecutionTable>,
    pub own: Range<usize>,
    group: usize,
    visits: Vec<u32>,
    group_execs: u64,
    pub tasks: Vec<Task>,
    current: Option<Current>,
    pending: VecDeque<(u32, u64)>,
    issued: u32,
    next_arrival: Option<u64>,
    rng: Option<(ChaCha8Rng, Exp<f64>)>,
    op_marks: Vec<Option<(u64, u64)>>,
    pub done: Vec<RequestRecord>,
    op_spans: Vec<OpSpan>,
    pub active: u64,
    /// Cycles spent holding the whole ME array (v10).
    pub array_hold: u64,
    gain: u64,
    blocked: u64,
    hbm_bound: u64,
    harvested_me: u64,
    harvested_ve: f64,
    pub preempted: u64,
    last_grant: (f64, f64),
    pub ve_reserved: f64,
    pub ve_cap: f64,
}

impl Vn {
    pub fn norm_active(&self) -> f64 {
        self.active as f64 / self.priority
    }

    pub fn has_work(&self) -> bool {
        self.current.is_some() || !self.pending.is_empty()
    }

    pub fn waiting_me(&self) -> usize {
        self.tasks.iter().filter(|t| t.is_waiting_me()).count()
    }

    pub fn running_me(&self) -> usize {
        self.tasks
            .iter()
            .filter(|t| t.kind == UtopKind::Me && t.is_running())
            .count()
    }

    /// Next ME uTop to launch: resumed work first, then slot order.
    pub fn next_waiting_me(&self) -> Option<usize> {
        self.tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_waiting_me())
            .min_by_key(|(_, t)| (!t.partial, t.slot_col))
            .map(|(i, _)| i)
    }

    pub fn waiting_ve(&self) -> Option<usize> {
        self.tasks
            .iter()
            .position(|t| t.kind == UtopKind::Ve && t.state == TaskState::Waiting)
    }
}

pub(super) struct Sim<'a> {
    pub core: usize,
    pub cfg: &'a EngineConfig,
    pub hw: &'a HardwareConfig,
    pub mode: Mode,
    pub t: u64,
    pub slots: Vec<Slot>,
    pub vns: Vec<Vn>,
    pub rr: usize,
    pub holder: Option<usize>,
    pub owner: usize,
    pub quantum_end: Option<u64>,
    events: Option<Vec<SimEvent>>,
    me_busy: Vec<u64>,
    ve_busy: f64,
    hbm_bytes: f64,
    hbm_peak: f64,
    hbm_bpc: f64,
    pub preemptions: u64,
    pub harvest_launches: u64,
    me_intervals: Vec<MeInterval>,
    series: Option<Series>,
}

pub(super) struct CoreRun {
    pub core: CoreResult,
    pub vnpus: Vec<VnpuResult>,
    pub events: Option<Vec<SimEvent>>,
    pub series: Option<Series>,
    pub truncated: bool,
}

pub(super) fn run_core(
    core: usize,
    base: usize,
    setup: &CoreSetup,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<CoreRun, EngineError> {
    let mut sim = Sim::new(core, base, setup, cfg, seed)?;
    let truncated = sim.run()?;
    Ok(sim.finish(truncated))
}

impl<'a> Sim<'a> {
    fn new(
        core: usize,
        base: usize,
        setup: &'a CoreSetup,
        cfg: &'a EngineConfig,
        seed: u64,
    ) -> Result<Self, EngineError> {
        let hw = &setup.hw;
        if setup.tenants.is_empty() {
            return Err(EngineError::NoTenants { core });
        }
        for t in &setup.tenants {
            if t.spec.priority.is_nan() || t.spec.priority <= 0.0 {
                return Err(EngineError::BadPriority(t.spec.id.clone()));
            }
            if t.program.n_x > hw.num_mes as usize {
                return Err(EngineError::ProgramTooWide {
                    vnpu: t.spec.id.clone(),
                    n_x: t.program.n_x,
                    mes: hw.num_mes,
                });
            }
        }
        let soft = setup
            .tenants
            .iter()
            .find(|t| t.spec.isolation == Isolation::SoftwareIsolated);
        let mode = match cfg.policy {
            Policy::Neu if soft.is_some() => Mode::Temporal,
            Policy::Neu => Mode::Spatial { harvest: true },
            Policy::NoHarvest => {
                if let Some(t) = soft {
                    return Err(EngineError::SoftwareIsolated(t.spec.id.clone()));
                }
                Mode::Spatial { harvest: false }
            }
            Policy::V10 => Mode::V10,
            Policy::Prema => Mode::Prema,
        };
        if let Mode::Spatial { .. } = mode {
            let mes: u32 = setup.tenants.iter().map(|t| t.spec.n_m).sum();
            let ves: u32 = setup.tenants.iter().map(|t| t.spec.n_v).sum();
            if mes > hw.num_mes || ves > hw.num_ves {
                return Err(EngineError::Oversubscribed {
                    core,
                    mes: hw.num_mes,
                    ves: hw.num_ves,
                });
            }
        }
        let mut next_me = 0usize;
        let vns = setup
            .tenants
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let own = next_me..next_me + t.spec.n_m as usize;
                if matches!(mode, Mode::Spatial { .. }) {
                    next_me = own.end;
                }
                let gid = base + i;
                let rng = match cfg.arrivals {
                    Arrivals::ClosedLoop => None,
                    Arrivals::Poisson {
                        mean_interarrival_cycles,
                    } => {
                        let mix = (gid as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                        let exp = Exp::new(1.0 / mean_interarrival_cycles.max(1e-9))
                            .expect("positive rate");
                        Some((ChaCha8Rng::seed_from_u64(seed ^ mix), exp))
                    }
                };
                Vn {
                    gid,
                    id: t.spec.id.clone(),
                    label: t.label.clone(),
                    n_m: t.spec.n_m,
                    n_v: t.spec.n_v,
                    priority: t.spec.priority,
                    program: t.program.clone(),
                    own,
                    group: 0,
                    visits: vec![0; t.program.rows.len()],
                    group_execs: 0,
                    tasks: Vec::new(),
                    current: None,
                    pending: VecDeque::new(),
                    issued: 0,
                    next_arrival: None,
                    rng,
                    op_marks: vec![None; t.program.op_ids.len()],
                    done: Vec::new(),
                    op_spans: Vec::new(),
                    active: 0,
                    array_hold: 0,
                    gain: 0,
                    blocked: 0,
                    hbm_bound: 0,
                    harvested_me: 0,
                    harvested_ve: 0.0,
                    preempted: 0,
                    last_grant: (0.0, 0.0),
                    ve_reserved: 0.0,
                    ve_cap: 0.0,
                }
            })
            .collect::<Vec<_>>();
        let series = cfg.series_bucket.filter(|&b| b > 0).map(|bucket| Series {
            bucket,
            me: vec![Vec::new(); vns.len()],
            ve: vec![Vec::new(); vns.len()],
        });
        Ok(Self {
            core,
            cfg,
            hw,
            mode,
            t: 0,
            slots: vec![Slot::Idle { reserved: None }; hw.num_mes as usize],
            vns,
            rr: 0,
            holder: None,
            owner: 0,
            quantum_end: None,
            events: cfg.record_events.then(Vec::new),
            me_busy: vec![0; hw.num_mes as usize],
            ve_busy: 0.0,
            hbm_bytes: 0.0,
            hbm_peak: 0.0,
            hbm_bpc: hw.hbm_bytes_per_cycle(),
            preemptions: 0,
            harvest_launches: 0,
            me_intervals: Vec::new(),
            series,
        })
    }

    pub fn log(&mut self, kind: EventKind) {
        if let Some(ev) = self.events.as_mut() {
            ev.push(SimEvent {
                time: self.t,
                core: self.core,
                kind,
            });
        }
    }

    fn run(&mut self) -> Result<bool, EngineError> {
        for i in 0..self.vns.len() {
            match self.cfg.arrivals {
                Arrivals::ClosedLoop => self.arrive(i),
                Arrivals::Poisson { .. } => self.draw_arrival(i, 0),
            }
        }
        loop {
            self.process_point()?;
            if self.finished() {
                return Ok(false);
            }
            self.schedule();
            self.assign_rates();
            let Some(next) = self.next_time() else {
                return Err(EngineError::Stalled {
                    core: self.core,
                    time: self.t,
                });
            };
            if let Some(limit) = self.cfg.max_cycles {
                if next > limit {
                    self.accumulate(limit.max(self.t));
                    self.t = limit.max(self.t);
                    return Ok(true);
                }
            }
            self.accumulate(next);
            self.t = next;
        }
    }

    fn finished(&self) -> bool {
        let k = self.cfg.requests as usize;
        self.vns.iter().all(|v| v.done.len() >= k)
    }

    fn draw_arrival(&mut self, i: usize, from: u64) {
        let vn = &mut self.vns[i];
        if let Some((rng, exp)) = vn.rng.as_mut() {
            let gap = exp.sample(rng).round().max(1.0) as u64;
            vn.next_arrival = Some(from + gap);
        }
    }

    /// Queues the next request of vNPU `i` at the current time.
    fn arrive(&mut self, i: usize) {
        let idx = self.vns[i].issued;
        self.vns[i].issued += 1;
        self.vns[i].pending.push_back((idx, self.t));
        let gid = self.vns[i].gid;
        self.log(EventKind::RequestArrival {
            vnpu: gid,
            request: idx,
        });
    }

    fn process_point(&mut self) -> Result<(), EngineError> {
        let t = self.t;
        for i in 0..self.vns.len() {
            for k in 0..self.vns[i].tasks.len() {
                let task = &self.vns[i].tasks[k];
                if task.is_running() && task.finish == Some(t) {
                    self.complete(i, k);
                }
            }
        }
        for s in 0..self.slots.len() {
            if let Slot::Draining { until, for_vnpu } = self.slots[s] {
                if until == t {
                    self.slots[s] = Slot::Idle { reserved: for_vnpu };
                    let for_waiting = for_vnpu.is_some_and(|v| self.vns[v].waiting_me() > 0);
                    let for_gid = for_vnpu.map(|v| self.vns[v].gid);
                    self.log(EventKind::PreemptionDone {
                        me: s,
                        for_vnpu: for_gid,
                        for_waiting,
                    });
                }
            }
        }
        for i in 0..self.vns.len() {
            while self.vns[i].next_arrival == Some(t) {
                self.arrive(i);
                self.draw_arrival(i, t);
            }
        }
        for i in 0..self.vns.len() {
            self.advance_program(i)?;
        }
        if self.mode == Mode::Prema {
            self.prema_tick();
        }
        Ok(())
    }

    fn complete(&mut self, i: usize, k: usize) {
        let t = self.t;
        let gid = self.vns[i].gid;
        let task = &mut self.vns[i].tasks[k];
        let TaskState::Running { me, harvested, since } = task.state else {
            return;
        };
        let units = task.seg + task.rem;
        task.rem = 0;
        task.seg = 0;
        task.state = TaskState::Done;
        task.finish = None;
        let (utop, total) = (task.utop, task.total);
        if let Some(s) = me {
            self.slots[s] = Slot::Idle { reserved: None };
            self.me_intervals.push(MeInterval {
                me: s,
                vnpu: gid,
                utop,
                start: since,
                end: t,
                harvested,
            });
        }
        self.log(EventKind::UtopFinish {
            vnpu: gid,
            utop,
            me,
            units,
            total_units: total,
        });
    }

    fn advance_program(&mut self, i: usize) -> Result<(), EngineError> {
        loop {
            if self.vns[i].current.is_none() {
                let Some((index, arrival)) = self.vns[i].pending.pop_front() else {
                    return Ok(());
                };
                let vn = &mut self.vns[i];
                vn.current = Some(Current {
                    index,
                    arrival,
                    start: self.t,
                });
                vn.visits.iter_mut().for_each(|v| *v = 0);
                vn.group_execs = 0;
                vn.op_marks.iter_mut().for_each(|m| *m = None);
                self.enter_group(i, 0)?;
                continue;
            }
            let vn = &self.vns[i];
            if vn.tasks.iter().any(|t| t.state != TaskState::Done) {
                return Ok(());
            }
            let visit = vn.visits[vn.group];
            let targets: Vec<usize> = vn
                .tasks
                .iter()
                .filter_map(|t| t.directive.filter(|d| d.fires_on_visit(visit)).map(|d| d.target))
                .collect();
            let next = next_group(vn.group, &targets, vn.program.rows.len()).map_err(|source| {
                EngineError::Directive {
                    vnpu: vn.id.clone(),
                    source,
                }
            })?;
            let t = self.t;
            let vn = &mut self.vns[i];
            for task in &vn.tasks {
                if let Some((_, end)) = vn.op_marks[task.op].as_mut() {
                    *end = t;
                }
            }
            vn.tasks.clear();
            match next {
                Some(g) => self.enter_group(i, g)?,
                None => self.finish_request(i),
            }
        }
    }

    fn enter_group(&mut self, i: usize, g: usize) -> Result<(), EngineError> {
        let t = self.t;
        let limit = self.cfg.max_group_executions;
        let vn = &mut self.vns[i];
        vn.group = g;
        vn.visits[g] += 1;
        vn.group_execs += 1;
        let request = vn.current.as_ref().map_or(0, |c| c.index);
        if vn.group_execs > limit {
            return Err(EngineError::Guard {
                vnpu: vn.id.clone(),
                request,
                limit,
            });
        }
        let program = vn.program.clone();
        let row = &program.rows[g];
        let n_y = program.n_y as u64;
        let n_x = program.n_x;
        vn.tasks = row
            .me_utops
            .iter()
            .enumerate()
            .chain(row.ve_utop.iter().map(|u| (n_x, u)))
            .map(|(col, u)| {
                let nominal = match u.kind {
                    UtopKind::Me => u.me_cycles,
                    UtopKind::Ve => u.ve_cycles_full * n_y,
                };
                let total = nominal * WORK_SCALE;
                Task {
                    slot_col: col,
                    utop: u.id,
                    kind: u.kind,
                    op: u.owner_op,
                    me_cycles: u.me_cycles,
                    ve_work: (u.ve_cycles_full * n_y) as f64,
                    bytes: u.hbm_bytes as f64,
                    nominal,
                    total,
                    rem: total,
                    seg: 0,
                    partial: false,
                    directive: u.next_group,
                    state: TaskState::Waiting,
                    ve_grant: 0.0,
                    hbm_rate: 0.0,
                    rate: 0.0,
                    hbm_bound: false,
                    finish: None,
                }
            })
            .collect();
        for task in &vn.tasks {
            if let Some(m) = vn.op_marks.get_mut(task.op) {
                if m.is_none() {
                    *m = Some((t, t));
                }
            }
        }
        let gid = vn.gid;
        let visit = vn.visits[g];
        let ready: Vec<(u32, usize)> = vn.tasks.iter().map(|t| (t.utop, t.slot_col)).collect();
        self.log(EventKind::GroupEnter {
            vnpu: gid,
            request,
            group: g,
            visit,
        });
        for (utop, slot) in ready {
            self.log(EventKind::UtopReady {
                vnpu: gid,
                utop,
                group: g,
                slot,
            });
        }
        Ok(())
    }

    fn finish_request(&mut self, i: usize) {
        let t = self.t;
        let k = self.cfg.requests;
        let vn = &mut self.vns[i];
        let cur = vn.current.take().expect("request in flight");
        let rec = RequestRecord {
            index: cur.index,
            arrival: cur.arrival,
            start: cur.start,
            finish: t,
        };
        vn.done.push(rec);
        if cur.index < k {
            for (op, m) in vn.op_marks.iter().enumerate() {
                if let Some((start, end)) = *m {
                    vn.op_spans.push(OpSpan {
                        request: cur.index,
                        op,
                        start,
                        end,
                    });
                }
            }
        }
        let gid = vn.gid;
        self.log(EventKind::RequestFinish {
            vnpu: gid,
            request: cur.index,
            latency: rec.latency(),
        });
        if self.cfg.arrivals == Arrivals::ClosedLoop {
            self.arrive(i);
        }
    }

    pub fn launch(&mut self, i: usize, k: usize, me: Option<usize>, harvested: bool) {
        let t = self.t;
        let gid = self.vns[i].gid;
        let task = &mut self.vns[i].tasks[k];
        debug_assert_eq!(task.state, TaskState::Waiting);
        task.state = TaskState::Running {
            me,
            harvested,
            since: t,
        };
        task.seg = 0;
        let utop = task.utop;
        if let Some(s) = me {
            debug_assert!(matches!(self.slots[s], Slot::Idle { .. }));
            self.slots[s] = Slot::Busy { vnpu: i, task: k };
        }
        if harvested {
            self.harvest_launches += 1;
        }
        self.log(EventKind::Launch {
            vnpu: gid,
            utop,
            me,
            harvested,
        });
    }

    /// Evicts the uTop on ME `s`; the ME drains for `preemption_cycles`.
    /// Returns false when there is nothing to evict.
    pub fn preempt_me(&mut self, s: usize, for_vnpu: Option<usize>) -> bool {
        let Slot::Busy { vnpu, task } = self.slots[s] else {
            return false;
        };
        if self.vns[vnpu].tasks[task].rem == 0 {
            return false;
        }
        self.evict(vnpu, task, for_vnpu);
        let p = self.cfg.preemption_cycles;
        self.slots[s] = if p == 0 {
            Slot::Idle { reserved: for_vnpu }
        } else {
            Slot::Draining {
                until: self.t + p,
                for_vnpu,
            }
        };
        true
    }

    /// Returns a running uTop to its owner's waiting set with its progress.
    pub fn evict(&mut self, i: usize, k: usize, for_vnpu: Option<usize>) {
        let t = self.t;
        let gid = self.vns[i].gid;
        let for_gid = for_vnpu.map(|v| self.vns[v].gid);
        let task = &mut self.vns[i].tasks[k];
        let TaskState::Running { me, harvested, since } = task.state else {
            return;
        };
        task.state = TaskState::Waiting;
        task.partial = true;
        task.finish = None;
        task.rate = 0.0;
        task.ve_grant = 0.0;
        task.hbm_rate = 0.0;
        task.seg = 0;
        let utop = task.utop;
        let done_units = task.total - task.rem;
        let remaining_units = task.rem;
        let remaining_me_cycles = if task.kind == UtopKind::Me {
            remaining_units.div_ceil(WORK_SCALE)
        } else {
            0
        };
        if let Some(s) = me {
            self.me_intervals.push(MeInterval {
                me: s,
                vnpu: gid,
                utop,
                start: since,
                end: t,
                harvested,
            });
            self.preemptions += 1;
            self.vns[i].preempted += 1;
        }
        self.log(EventKind::Preempt {
            vnpu: gid,
            utop,
            me,
            for_vnpu: for_gid,
            done_units,
            remaining_units,
            remaining_me_cycles,
        });
    }

    fn assign_rates(&mut self) {
        let n_ves = self.hw.num_ves as f64;
        let harvest = match self.mode {
            Mode::Spatial { harvest } => harvest,
            Mode::Temporal | Mode::V10 => true,
            Mode::Prema => false,
        };
        let demands: Vec<VeDemand> = self
            .vns
            .iter()
            .map(|vn| {
                let n_y = vn.program.n_y as f64;
                let me_demand = vn
                    .tasks
                    .iter()
                    .filter(|t| t.is_running())
                    .map(|t| t.drain_demand(n_y))
                    .sum();
                let ve_demand = if vn
                    .tasks
                    .iter()
                    .any(|t| t.kind == UtopKind::Ve && t.is_running())
                {
                    n_ves
                } else {
                    0.0
                };
                VeDemand {
                    me_demand,
                    ve_demand,
                    reserved: vn.ve_reserved,
                    cap: vn.ve_cap,
                }
            })
            .collect();
        let grants = schedule_ve_ops(&demands, n_ves, harvest);
        let mut log = Vec::new();
        for (i, g) in grants.iter().enumerate() {
            let vn = &mut self.vns[i];
            let n_y = vn.program.n_y as f64;
            let running: Vec<usize> = (0..vn.tasks.len())
                .filter(|&k| vn.tasks[k].kind == UtopKind::Me && vn.tasks[k].is_running())
                .collect();
            let want: Vec<f64> = running.iter().map(|&k| vn.tasks[k].drain_demand(n_y)).collect();
            let split = max_min_fill(&want, g.to_me);
            for (&k, s) in running.iter().zip(split) {
                vn.tasks[k].ve_grant = s;
            }
            for task in vn.tasks.iter_mut() {
                if task.kind == UtopKind::Ve {
                    task.ve_grant = if task.is_running() { g.to_ve } else { 0.0 };
                }
            }
            let active = !running.is_empty()
                || vn.tasks.iter().any(|t| t.kind == UtopKind::Ve && t.is_running());
            // an idle vNPU holds nothing, whatever the arbiter computed
            let pair = if active { (g.to_me, g.to_ve) } else { (0.0, 0.0) };
            if vn.last_grant != pair {
                vn.last_grant = pair;
                log.push(EventKind::VeGrant {
                    vnpu: vn.gid,
                    to_me: pair.0,
                    to_ve: pair.1,
                });
            }
        }
        for k in log {
            self.log(k);
        }

        // compute-limited speeds, then HBM
        let mut hbm_demand = vec![0.0; self.vns.len()];
        let mut speeds: Vec<Vec<f64>> = Vec::with_capacity(self.vns.len());
        for (i, vn) in self.vns.iter().enumerate() {
            let mut sp = Vec::with_capacity(vn.tasks.len());
            for task in &vn.tasks {
                let s = if !task.is_running() {
                    0.0
                } else {
                    match task.kind {
                        UtopKind::Me if task.ve_work == 0.0 => 1.0,
                        UtopKind::Me => (task.me_cycles as f64 * task.ve_grant / task.ve_work).min(1.0),
                        UtopKind::Ve => task.ve_grant,
                    }
                };
                if task.bytes > 0.0 && s > 0.0 {
                    hbm_demand[i] += task.bytes * s / task.nominal as f64;
                }
                sp.push(s);
            }
            speeds.push(sp);
        }
        let vn_bw = hbm_arbitrate(&hbm_demand, self.hbm_bpc);
        let t = self.t;
        for (i, vn) in self.vns.iter_mut().enumerate() {
            let want: Vec<f64> = vn
                .tasks
                .iter()
                .zip(&speeds[i])
                .map(|(task, &s)| {
                    if task.bytes > 0.0 && s > 0.0 {
                        task.bytes * s / task.nominal as f64
                    } else {
                        0.0
                    }
                })
                .collect();
            let bw = max_min_fill(&want, vn_bw[i]);
            for (k, task) in vn.tasks.iter_mut().enumerate() {
                if !task.is_running() {
                    continue;
                }
                let sc = speeds[i][k];
                let mut speed = sc;
                task.hbm_bound = false;
                task.hbm_rate = 0.0;
                if task.bytes > 0.0 && sc > 0.0 {
                    let sb = bw[k] * task.nominal as f64 / task.bytes;
                    if sb < sc {
                        speed = sb;
                        task.hbm_bound = true;
                    }
                    task.hbm_rate = task.bytes * speed / task.nominal as f64;
                }
                task.rate = SCALE * speed;
                task.finish = if task.rate > 0.0 {
                    let c = (task.rem as f64 / task.rate).ceil().max(1.0);
                    Some(t + c as u64)
                } else {
                    None
                };
            }
        }
    }

    fn next_time(&self) -> Option<u64> {
        let mut next: Option<u64> = None;
        let mut take = |x: u64| next = Some(next.map_or(x, |n: u64| n.min(x)));
        for vn in &self.vns {
            for task in &vn.tasks {
                if let (true, Some(f)) = (task.is_running(), task.finish) {
                    take(f);
                }
            }
            if let Some(a) = vn.next_arrival {
                take(a);
            }
        }
        for s in &self.slots {
            if let Slot::Draining { until, .. } = *s {
                take(until);
            }
        }
        if let Some(q) = self.quantum_end {
            take(q);
        }
        next
    }

    fn accumulate(&mut self, next: u64) {
        let dt = next - self.t;
        if dt == 0 {
            return;
        }
        let d = dt as f64;
        let spatial = matches!(self.mode, Mode::Spatial { .. });
        let holder = self.holder;
        let mut total_hbm = 0.0;
        for s in 0..self.slots.len() {
            if let Slot::Busy { .. } = self.slots[s] {
                self.me_busy[s] += dt;
            }
        }
        for i in 0..self.vns.len() {
            let blocked = spatial && self.vns[i].waiting_me() > 0 && {
                let own = self.vns[i].own.clone();
                own.into_iter().any(|s| match self.slots[s] {
                    Slot::Busy { vnpu, .. } => vnpu != i,
                    Slot::Draining { for_vnpu, .. } => for_vnpu == Some(i),
                    Slot::Idle { .. } => false,
                })
            };
            let vn = &mut self.vns[i];
            let mut active = false;
            let mut hbm_bound = false;
            let mut harvested_mes = 0u64;
            let mut ve = 0.0;
            let mut mes = 0u64;
            for task in vn.tasks.iter_mut() {
                let TaskState::Running { me, harvested, .. } = task.state else {
                    continue;
                };
                if me.is_some() {
                    mes += 1;
                }
                if harvested {
                    harvested_mes += 1;
                }
                ve += task.ve_grant;
                total_hbm += task.hbm_rate;
                if task.rate > 0.0 {
                    active = true;
                }
                hbm_bound |= task.hbm_bound;
                let used = if task.finish == Some(next) {
                    task.rem
                } else {
                    ((d * task.rate).floor() as u64).min(task.rem.saturating_sub(1))
                };
                task.rem -= used;
                task.seg += used;
            }
            if active {
                vn.active += dt;
            }
            if holder == Some(i) && mes > 0 {
                vn.array_hold += dt;
            }
            if hbm_bound {
                vn.hbm_bound += dt;
            }
            if blocked {
                vn.blocked += dt;
            }
            let extra_ve = if spatial { (ve - vn.n_v as f64).max(0.0) } else { 0.0 };
            if spatial && (harvested_mes > 0 || extra_ve > 1e-9) {
                vn.gain += dt;
            }
            vn.harvested_me += harvested_mes * dt;
            vn.harvested_ve += extra_ve * d;
            self.ve_busy += ve * d;
            if let Some(series) = self.series.as_mut() {
                add_to_buckets(&mut series.me[i], series.bucket, self.t, next, mes as f64);
                add_to_buckets(&mut series.ve[i], series.bucket, self.t, next, ve);
            }
        }
        self.hbm_bytes += total_hbm * d;
        self.hbm_peak = self.hbm_peak.max(total_hbm);
    }

    fn finish(mut self, truncated: bool) -> CoreRun {
        let t = self.t;
        for i in 0..self.vns.len() {
            let gid = self.vns[i].gid;
            for task in &self.vns[i].tasks {
                if let TaskState::Running {
                    me: Some(s),
                    harvested,
                    since,
                } = task.state
                {
                    self.me_intervals.push(MeInterval {
                        me: s,
                        vnpu: gid,
                        utop: task.utop,
                        start: since,
                        end: t,
                        harvested,
                    });
                }
            }
        }
        self.me_intervals.sort_by_key(|iv| (iv.start, iv.me, iv.end));
        let k = self.cfg.requests as usize;
        let vnpus = self
            .vns
            .iter_mut()
            .map(|vn| VnpuResult {
                id: vn.id.clone(),
                label: vn.label.clone(),
                core: self.core,
                n_m: vn.n_m,
                n_v: vn.n_v,
                priority: vn.priority,
                requests: std::mem::take(&mut vn.done),
                op_spans: std::mem::take(&mut vn.op_spans),
                active_cycles: vn.active,
                gain_cycles: vn.gain,
                blocked_cycles: vn.blocked,
                hbm_bound_cycles: vn.hbm_bound,
                harvested_me_cycles: vn.harvested_me,
                harvested_ve_cycles: vn.harvested_ve,
                preempted: vn.preempted,
                kth_completion: None,
            })
            .map(|mut r| {
                r.kth_completion = (k > 0 && r.requests.len() >= k).then(|| r.requests[k - 1].finish);
                r
            })
            .collect();
        CoreRun {
            core: CoreResult {
                core: self.core,
                num_mes: self.hw.num_mes,
                num_ves: self.hw.num_ves,
                duration: t,
                me_busy: self.me_busy,
                ve_busy: self.ve_busy,
                hbm_bytes: self.hbm_bytes,
                hbm_peak_rate: self.hbm_peak,
                hbm_bw_bytes_per_cycle: self.hbm_bpc,
                preemptions: self.preemptions,
                harvest_launches: self.harvest_launches,
                me_intervals: self.me_intervals,
            },
            vnpus,
            events: self.events,
            series: self.series,
            truncated,
        }
    }
}

fn add_to_buckets(buckets: &mut Vec<f64>, width: u64, from: u64, to: u64, level: f64) {
    if level == 0.0 || to <= from {
        return;
    }
    let last = ((to - 1) / width) as usize;
    if buckets.len() <= last {
        buckets.resize(last + 1, 0.0);
    }
    let mut a = from;
    while a < to {
        let b = ((a / width) + 1) * width;
        let end = b.min(to);
        buckets[(a / width) as usize] += level * (end - a) as f64;
        a = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_split_at_boundaries() {
        let mut b = Vec::new();
        add_to_buckets(&mut b, 1000, 900, 2100, 2.0);
        assert_eq!(b, vec![200.0, 2000.0, 200.0]);
    }
}
