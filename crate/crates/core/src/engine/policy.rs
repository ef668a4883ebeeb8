//! Launch/preempt decisions for each policy.

use super::sim::{Mode, Sim, Slot};
use super::EventKind;
use crate::neuisa::UtopKind;

impl Sim<'_> {
    pub(super) fn schedule(&mut self) {
        match self.mode {
            Mode::Spatial { harvest } => self.schedule_spatial(harvest),
            Mode::Temporal => self.schedule_temporal(),
            Mode::V10 => self.schedule_v10(),
            Mode::Prema => self.schedule_prema(),
        }
        for s in self.slots.iter_mut() {
            if let Slot::Idle { reserved: Some(_) } = s {
                *s = Slot::Idle { reserved: None };
            }
        }
        self.set_ve_shares();
    }

    fn set_ve_shares(&mut self) {
        let all = self.hw.num_ves as f64;
        let mode = self.mode;
        let holder = self.holder;
        let owner = self.owner;
        for (i, vn) in self.vns.iter_mut().enumerate() {
            let (reserved, cap) = match mode {
                Mode::Spatial { harvest: true } => (vn.n_v as f64, all),
                Mode::Spatial { harvest: false } => (vn.n_v as f64, vn.n_v as f64),
                Mode::Temporal => (0.0, all),
                Mode::V10 if holder == Some(i) => (all, all),
                Mode::V10 => (0.0, all),
                Mode::Prema if owner == i => (all, all),
                Mode::Prema => (0.0, 0.0),
            };
            vn.ve_reserved = reserved;
            vn.ve_cap = cap;
        }
    }

    fn launch_all_ve(&mut self) {
        for i in 0..self.vns.len() {
            if let Some(k) = self.vns[i].waiting_ve() {
                self.launch(i, k, None, false);
            }
        }
    }

    /// Idle MEs usable by `i`: slots reserved for it first, then the rest in
    /// index order, skipping slots reserved for someone else.
    fn usable_idle(&self, i: usize, among: impl Iterator<Item = usize> + Clone) -> Vec<usize> {
        let mut out: Vec<usize> = among
            .clone()
            .filter(|&s| self.slots[s] == Slot::Idle { reserved: Some(i) })
            .collect();
        out.extend(among.filter(|&s| self.slots[s] == Slot::Idle { reserved: None }));
        out
    }

    fn fill(&mut self, i: usize, slots: Vec<usize>, harvested: bool, cap: Option<usize>) {
        for s in slots {
            if cap.is_some_and(|c| self.vns[i].running_me() >= c) {
                break;
            }
            let Some(k) = self.vns[i].next_waiting_me() else {
                break;
            };
            self.launch(i, k, Some(s), harvested);
        }
    }

    fn pending_for(&self, i: usize) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Draining { for_vnpu: Some(v), .. } if *v == i))
            .count()
    }

    /// Own MEs first; a vNPU with more waiting uTops than it can place
    /// reclaims harvested own MEs; leftovers harvest idle MEs round robin.
    fn schedule_spatial(&mut self, harvest: bool) {
        self.launch_all_ve();
        let n = self.vns.len();
        for i in 0..n {
            let own = self.vns[i].own.clone();
            let idle = self.usable_idle(i, own.clone());
            self.fill(i, idle, false, None);
            let waiting = self.vns[i].waiting_me();
            let mut need = waiting.saturating_sub(self.pending_for(i));
            let mut freed = false;
            for s in own.clone().rev() {
                if need == 0 {
                    break;
                }
                if let Slot::Busy { vnpu, .. } = self.slots[s] {
                    if vnpu != i && self.preempt_me(s, Some(i)) {
                        need -= 1;
                        freed |= self.slots[s] == Slot::Idle { reserved: Some(i) };
                    }
                }
            }
            // a free preemption hands the ME over at once
            if freed {
                let idle = self.usable_idle(i, own);
                self.fill(i, idle, false, None);
            }
        }
        if !harvest {
            return;
        }
        for s in self.slots.iter_mut() {
            if let Slot::Idle { reserved: Some(_) } = s {
                *s = Slot::Idle { reserved: None };
            }
        }
        let mut last = None;
        loop {
            let mut progressed = false;
            for step in 0..n {
                let i = (self.rr + step) % n;
                if self.vns[i].waiting_me() == 0 {
                    continue;
                }
                let Some(s) = (0..self.slots.len())
                    .find(|&s| self.slots[s] == Slot::Idle { reserved: None })
                else {
                    break;
                };
                let k = self.vns[i].next_waiting_me().expect("waiting uTop");
                let foreign = !self.vns[i].own.contains(&s);
                self.launch(i, k, Some(s), foreign);
                last = Some(i);
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
        if let Some(i) = last {
            self.rr = (i + 1) % n;
        }
    }

    fn fairness_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.vns.len()).collect();
        order.sort_by(|&a, &b| {
            self.vns[a]
                .norm_active()
                .total_cmp(&self.vns[b].norm_active())
                .then(self.vns[a].gid.cmp(&self.vns[b].gid))
        });
        order
    }

    /// Priority-weighted balancing of active cycles. Each vNPU is first
    /// served up to its ME count, a vNPU lagging by more than a slice may
    /// evict the leader, and idle MEs are then shared work-conservingly.
    fn schedule_temporal(&mut self) {
        self.launch_all_ve();
        let all = 0..self.slots.len();
        let order = self.fairness_order();
        for &i in &order {
            let idle = self.usable_idle(i, all.clone());
            let cap = self.vns[i].n_m as usize;
            self.fill(i, idle, false, Some(cap));
        }
        let slice = self.cfg.slice_cycles as f64;
        for &i in &order {
            let held = self.vns[i].running_me() + self.pending_for(i);
            let mut deficit = (self.vns[i].n_m as usize)
                .saturating_sub(held)
                .min(self.vns[i].waiting_me().saturating_sub(self.pending_for(i)));
            while deficit > 0 {
                let mine = self.vns[i].norm_active();
                let victim = (0..self.slots.len())
                    .rev()
                    .filter_map(|s| match self.slots[s] {
                        Slot::Busy { vnpu, .. }
                            if vnpu != i && self.vns[vnpu].norm_active() > mine + slice =>
                        {
                            Some((s, vnpu))
                        }
                        _ => None,
                    })
                    .max_by(|a, b| {
                        self.vns[a.1]
                            .norm_active()
                            .total_cmp(&self.vns[b.1].norm_active())
                            .then(a.0.cmp(&b.0))
                    });
                let Some((s, _)) = victim else { break };
                if !self.preempt_me(s, Some(i)) {
                    break;
                }
                deficit -= 1;
            }
        }
        for s in self.slots.iter_mut() {
            if let Slot::Idle { reserved: Some(_) } = s {
                *s = Slot::Idle { reserved: None };
            }
        }
        for &i in &order {
            let idle = self.usable_idle(i, all.clone());
            self.fill(i, idle, false, None);
        }
    }

    /// One operator at a time owns the whole ME array; VE-only work runs
    /// alongside. The array changes hands only when the holder has no ME
    /// uTop running, going to the vNPU with the least priority-weighted
    /// array hold time. Taking it from a vNPU that still has ME work waiting
    /// costs one drain of the array.
    fn schedule_v10(&mut self) {
        self.launch_all_ve();
        if self.holder.is_some_and(|h| self.vns[h].running_me() > 0) {
            let h = self.holder.unwrap();
            let idle = self.usable_idle(h, 0..self.slots.len());
            self.fill(h, idle, false, None);
            return;
        }
        let prev = self.holder.take();
        let next = (0..self.vns.len())
            .filter(|&i| self.vns[i].waiting_me() > 0)
            .min_by(|&a, &b| {
                let ha = self.vns[a].array_hold as f64 / self.vns[a].priority;
                let hb = self.vns[b].array_hold as f64 / self.vns[b].priority;
                ha.total_cmp(&hb).then(self.vns[a].gid.cmp(&self.vns[b].gid))
            });
        let Some(n) = next else { return };
        self.holder = Some(n);
        let p = self.cfg.preemption_cycles;
        let preempting = prev.is_some_and(|h| h != n && self.vns[h].waiting_me() > 0);
        if preempting && p > 0 {
            self.preemptions += 1;
            for s in self.slots.iter_mut() {
                if let Slot::Idle { .. } = s {
                    *s = Slot::Draining {
                        until: self.t + p,
                        for_vnpu: Some(n),
                    };
                }
            }
            return;
        }
        let idle = self.usable_idle(n, 0..self.slots.len());
        self.fill(n, idle, false, None);
    }

    fn quantum(&self, i: usize) -> u64 {
        ((self.cfg.quantum_cycles as f64 * self.vns[i].priority).round() as u64).max(1)
    }

    /// Handles quantum expiry and idle owners before scheduling.
    pub(super) fn prema_tick(&mut self) {
        let n = self.vns.len();
        if n < 2 {
            return;
        }
        let expired = self.quantum_end == Some(self.t);
        let idle_owner = !self.vns[self.owner].has_work();
        if self.quantum_end.is_none() {
            self.quantum_end = Some(self.t + self.quantum(self.owner));
        }
        if !(expired || idle_owner) {
            return;
        }
        let from = self.owner;
        let to = (1..=n)
            .map(|d| (from + d) % n)
            .find(|&j| self.vns[j].has_work());
        let Some(to) = to else {
            self.quantum_end = Some(self.t + self.quantum(from));
            return;
        };
        if to != from {
            for s in 0..self.slots.len() {
                if matches!(self.slots[s], Slot::Busy { vnpu, .. } if vnpu == from) {
                    self.preempt_me(s, Some(to));
                }
            }
            for k in 0..self.vns[from].tasks.len() {
                let t = &self.vns[from].tasks[k];
                if t.kind == UtopKind::Ve && t.is_running() {
                    self.evict(from, k, Some(to));
                }
            }
            self.owner = to;
            let (fg, tg) = (self.vns[from].gid, self.vns[to].gid);
            self.log(EventKind::QuantumSwitch { from: fg, to: tg });
        }
        self.quantum_end = Some(self.t + self.quantum(to));
    }

    /// The quantum owner uses the whole core; everyone else waits.
    fn schedule_prema(&mut self) {
        let o = self.owner;
        if let Some(k) = self.vns[o].waiting_ve() {
            self.launch(o, k, None, false);
        }
        let idle = self.usable_idle(o, 0..self.slots.len());
        self.fill(o, idle, false, None);
    }
}
