//! Discrete-event execution of one batch on the platform.

use super::{
    build_static_queue, decide, BusySegment, EventKind, Placement, ScheduleEvent, SchedulingPolicy,
    Switching, TaskDescriptor,
};
use crate::platform::{switch_cost_time, Platform, PlatformError, PowerMode};
use crate::time::{SimTime, Work};
use std::collections::VecDeque;

#[derive(Debug)]
pub(super) enum SimError {
    Platform(PlatformError),
    TaskFailed {
        index: usize,
        events: Vec<ScheduleEvent>,
        at: SimTime,
    },
}

impl From<PlatformError> for SimError {
    fn from(e: PlatformError) -> Self {
        SimError::Platform(e)
    }
}

#[derive(Debug)]
pub(super) struct Done {
    pub events: Vec<ScheduleEvent>,
    pub segments: Vec<BusySegment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ThreadKind {
    /// The whole task on one core.
    Whole,
    /// One proportional chunk of a split task.
    Chunk,
}

#[derive(Clone, Debug)]
struct Running {
    task: usize,
    kind: ThreadKind,
    /// Effective work left as of `busy_from`.
    remaining: Work,
    busy_from: SimTime,
    end: SimTime,
    active: bool,
    resumed_from: Option<usize>,
}

#[derive(Clone, Debug, Default)]
struct Progress {
    threads: usize,
    threads_left: usize,
    announced: bool,
}

enum Mode {
    Dynamic {
        pending: VecDeque<usize>,
    },
    Static {
        fifos: Vec<VecDeque<(usize, ThreadKind, Work)>>,
    },
}

pub(super) struct Simulation<'a> {
    platform: &'a mut Platform,
    ready_at: &'a mut [SimTime],
    policy: SchedulingPolicy,
    tasks: &'a [TaskDescriptor],
    t0: SimTime,
    slots: Vec<Option<Running>>,
    progress: Vec<Progress>,
    mode: Mode,
    events: Vec<ScheduleEvent>,
    segments: Vec<BusySegment>,
    failures: Vec<Option<String>>,
}

fn mb(w: Work) -> String {
    format!("{:.6}", w.as_mb())
}

impl<'a> Simulation<'a> {
    pub(super) fn new(
        platform: &'a mut Platform,
        ready_at: &'a mut [SimTime],
        policy: SchedulingPolicy,
        tasks: &'a [TaskDescriptor],
    ) -> Self {
        let n = platform.n_cores();
        let t0 = platform.clock();
        Simulation {
            platform,
            ready_at,
            policy,
            tasks,
            t0,
            slots: vec![None; n],
            progress: vec![Progress::default(); tasks.len()],
            mode: Mode::Dynamic {
                pending: VecDeque::new(),
            },
            events: Vec::new(),
            segments: Vec::new(),
            failures: vec![None; tasks.len()],
        }
    }

    pub(super) fn run<R, E: std::fmt::Display>(
        mut self,
        outcomes: &[Result<R, E>],
    ) -> Result<Done, SimError> {
        self.failures = outcomes
            .iter()
            .map(|r| r.as_ref().err().map(|e| e.to_string()))
            .collect();
        if self.tasks.is_empty() {
            return Ok(self.into_done());
        }
        let t0 = self.t0;
        for task in self.tasks {
            let detail = format!(
                "threading={} work_mb={} cost_factor={} state_mb={}",
                serde_json::to_value(task.threading)
                    .expect("serializes")
                    .as_str()
                    .unwrap_or("?"),
                mb(task.work()),
                task.cost_factor,
                mb(task.state()),
            );
            self.emit(t0, EventKind::Submit, task.task_id.clone(), None, detail);
        }
        let mut placed = Vec::new();
        for (i, task) in self.tasks.iter().enumerate() {
            if task.effective_work() == Work::ZERO {
                self.complete(i, t0, None, "instant")?;
            } else {
                placed.push(i);
            }
        }
        if !self.policy.gate_idle_cores {
            for c in 0..self.slots.len() {
                if self.platform.state(c).mode == PowerMode::Off {
                    self.power_on(c, t0, String::new())?;
                }
            }
        }
        self.mode = match self.policy.switching {
            Switching::Dynamic => Mode::Dynamic {
                pending: placed.into_iter().collect(),
            },
            Switching::Static => self.static_fifos(),
        };
        self.dispatch(t0)?;
        self.gate(t0)?;

        while let Some(t) = self.next_instant() {
            for c in 0..self.slots.len() {
                if matches!(&self.slots[c], Some(r) if !r.active && r.busy_from == t) {
                    self.activate(c, t)?;
                }
            }
            let mut freed = Vec::new();
            for c in 0..self.slots.len() {
                if matches!(&self.slots[c], Some(r) if r.active && r.end == t) {
                    self.finish(c, t)?;
                    freed.push(c);
                }
            }
            self.dispatch(t)?;
            if let Mode::Dynamic { pending } = &self.mode {
                if pending.is_empty() {
                    self.try_switches(t, &freed)?;
                }
            }
            self.gate(t)?;
        }

        let makespan = self
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::End | EventKind::Combine))
            .map(|e| e.time)
            .max()
            .unwrap_or(t0);
        self.platform.advance_clock(makespan);
        Ok(self.into_done())
    }

    fn into_done(self) -> Done {
        Done {
            events: self.events,
            segments: self.segments,
        }
    }

    fn emit(
        &mut self,
        time: SimTime,
        kind: EventKind,
        task_id: String,
        core: Option<usize>,
        detail: String,
    ) {
        self.events.push(ScheduleEvent {
            time,
            kind,
            task_id,
            core,
            detail,
        });
    }

    fn static_fifos(&mut self) -> Mode {
        let plan = build_static_queue(self.tasks, self.platform.config(), self.policy.objective);
        let mut fifos = vec![VecDeque::new(); self.slots.len()];
        for a in plan {
            let task = &self.tasks[a.task_index];
            match a.placement {
                Placement::Instant => {}
                Placement::Single(c) => {
                    fifos[c].push_back((a.task_index, ThreadKind::Whole, task.effective_work()))
                }
                Placement::Split(chunks) => {
                    self.progress[a.task_index].threads = chunks.len();
                    self.progress[a.task_index].threads_left = chunks.len();
                    for (c, w) in chunks {
                        fifos[c].push_back((
                            a.task_index,
                            ThreadKind::Chunk,
                            w.scaled(task.cost_factor),
                        ));
                    }
                }
            }
        }
        Mode::Static { fifos }
    }

    fn next_instant(&self) -> Option<SimTime> {
        self.slots
            .iter()
            .flatten()
            .map(|r| if r.active { r.end } else { r.busy_from })
            .min()
    }

    fn free_cores(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&c| self.slots[c].is_none())
            .collect()
    }

    fn dispatch(&mut self, t: SimTime) -> Result<(), SimError> {
        match &mut self.mode {
            Mode::Dynamic { .. } => loop {
                let free = self.free_cores();
                let Mode::Dynamic { pending } = &mut self.mode else {
                    unreachable!()
                };
                if free.is_empty() || pending.is_empty() {
                    return Ok(());
                }
                let i = pending.pop_front().expect("non-empty");
                let task = &self.tasks[i];
                let specs: Vec<_> = free.iter().map(|&c| &self.platform.cores()[c]).collect();
                match decide(task, &specs, self.policy.objective, t - self.t0) {
                    Placement::Instant => unreachable!("instant tasks never queue"),
                    Placement::Single(c) => {
                        self.start_thread(c, i, ThreadKind::Whole, task.effective_work(), t)?;
                    }
                    Placement::Split(chunks) => {
                        self.progress[i].threads = chunks.len();
                        self.progress[i].threads_left = chunks.len();
                        self.announce_split(i, t);
                        for (c, w) in chunks {
                            self.start_thread(
                                c,
                                i,
                                ThreadKind::Chunk,
                                w.scaled(task.cost_factor),
                                t,
                            )?;
                        }
                    }
                }
            },
            Mode::Static { .. } => {
                for c in self.free_cores() {
                    let Mode::Static { fifos } = &mut self.mode else {
                        unreachable!()
                    };
                    if let Some((i, kind, work)) = fifos[c].pop_front() {
                        if kind == ThreadKind::Chunk {
                            self.announce_split(i, t);
                        }
                        self.start_thread(c, i, kind, work, t)?;
                    }
                }
                Ok(())
            }
        }
    }

    fn announce_split(&mut self, i: usize, t: SimTime) {
        if !self.progress[i].announced {
            self.progress[i].announced = true;
            let detail = format!("threads={}", self.progress[i].threads);
            self.emit(
                t,
                EventKind::Start,
                self.tasks[i].task_id.clone(),
                None,
                detail,
            );
        }
    }

    fn power_on(&mut self, c: usize, t: SimTime, task_id: String) -> Result<(), SimError> {
        let latency = self.platform.cores()[c].switch_on();
        self.platform.set_mode(c, PowerMode::Idle, None, t)?;
        self.ready_at[c] = t + latency;
        self.emit(
            t,
            EventKind::PowerOn,
            task_id,
            Some(c),
            format!("latency_s={}", latency.as_secs_f64()),
        );
        Ok(())
    }

    fn start_thread(
        &mut self,
        c: usize,
        task: usize,
        kind: ThreadKind,
        work: Work,
        t: SimTime,
    ) -> Result<(), SimError> {
        if self.platform.state(c).mode == PowerMode::Off {
            self.power_on(c, t, self.tasks[task].task_id.clone())?;
        }
        let busy_from = t.max(self.ready_at[c]);
        let end = busy_from + work.duration_at(self.platform.cores()[c].capacity);
        self.slots[c] = Some(Running {
            task,
            kind,
            remaining: work,
            busy_from,
            end,
            active: false,
            resumed_from: None,
        });
        if busy_from == t {
            self.activate(c, t)?;
        }
        Ok(())
    }

    fn activate(&mut self, c: usize, t: SimTime) -> Result<(), SimError> {
        let r = self.slots[c].as_mut().expect("activating an occupied core");
        r.active = true;
        let (task, kind, remaining, resumed_from) = (r.task, r.kind, r.remaining, r.resumed_from);
        let task_id = self.tasks[task].task_id.clone();
        self.platform
            .set_mode(c, PowerMode::Busy, Some(&task_id), t)?;
        let (kind, detail) = match (kind, resumed_from) {
            (ThreadKind::Chunk, _) => {
                (EventKind::ThreadStart, format!("work_mb={}", mb(remaining)))
            }
            (ThreadKind::Whole, None) => (EventKind::Start, format!("work_mb={}", mb(remaining))),
            (ThreadKind::Whole, Some(from)) => (
                EventKind::Start,
                format!("resume from={from} work_mb={}", mb(remaining)),
            ),
        };
        self.emit(t, kind, task_id, Some(c), detail);
        Ok(())
    }

    fn finish(&mut self, c: usize, t: SimTime) -> Result<(), SimError> {
        let r = self.slots[c].take().expect("finishing an occupied core");
        let task_id = self.tasks[r.task].task_id.clone();
        self.platform.set_mode(c, PowerMode::Idle, None, t)?;
        self.segments.push(BusySegment {
            task_id: task_id.clone(),
            core: c,
            start: r.busy_from,
            end: t,
            work: r.remaining,
            switched_away: false,
        });
        match r.kind {
            ThreadKind::Whole => self.complete(r.task, t, Some(c), ""),
            ThreadKind::Chunk => {
                self.emit(
                    t,
                    EventKind::ThreadEnd,
                    task_id.clone(),
                    Some(c),
                    String::new(),
                );
                let p = &mut self.progress[r.task];
                p.threads_left -= 1;
                if p.threads_left == 0 {
                    let detail = format!("threads={}", p.threads);
                    self.emit(t, EventKind::Combine, task_id, None, detail);
                    self.complete(r.task, t, None, "")
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Emits the task's `end`; a failed body stops the batch here.
    fn complete(
        &mut self,
        i: usize,
        t: SimTime,
        core: Option<usize>,
        note: &str,
    ) -> Result<(), SimError> {
        let task_id = self.tasks[i].task_id.clone();
        match self.failures[i].clone() {
            None => {
                self.emit(t, EventKind::End, task_id, core, note.to_string());
                Ok(())
            }
            Some(msg) => {
                self.emit(t, EventKind::End, task_id, core, format!("failed: {msg}"));
                self.platform.advance_clock(t);
                Err(SimError::TaskFailed {
                    index: i,
                    events: std::mem::take(&mut self.events),
                    at: t,
                })
            }
        }
    }

    fn gate(&mut self, t: SimTime) -> Result<(), SimError> {
        if !self.policy.gate_idle_cores {
            return Ok(());
        }
        for c in self.free_cores() {
            let no_more_work = match &self.mode {
                Mode::Dynamic { pending } => pending.is_empty(),
                Mode::Static { fifos } => fifos[c].is_empty(),
            };
            if no_more_work && self.platform.state(c).mode != PowerMode::Off {
                self.platform.set_mode(c, PowerMode::Off, None, t)?;
                self.emit(
                    t,
                    EventKind::PowerOff,
                    String::new(),
                    Some(c),
                    String::new(),
                );
            }
        }
        Ok(())
    }

    /// Dynamic switching: a core freed at `t` pulls over the running
    /// single-threaded task on a slower core that gains the most, provided
    /// the time saved exceeds the transfer cost.
    fn try_switches(&mut self, t: SimTime, freed: &[usize]) -> Result<(), SimError> {
        let mut targets: Vec<usize> = freed
            .iter()
            .copied()
            .filter(|&c| self.slots[c].is_none())
            .collect();
        let cap = |s: &Self, c: usize| s.platform.cores()[c].capacity;
        targets.sort_by(|&a, &b| cap(self, b).total_cmp(&cap(self, a)).then(a.cmp(&b)));
        for to in targets {
            let to_cap = cap(self, to);
            let mut best: Option<(SimTime, usize)> = None;
            for from in 0..self.slots.len() {
                let Some(r) = &self.slots[from] else { continue };
                let from_cap = cap(self, from);
                if r.kind != ThreadKind::Whole
                    || !r.active
                    || r.busy_from >= t
                    || from_cap >= to_cap
                {
                    continue;
                }
                let done = r.remaining.done_within(t - r.busy_from, from_cap);
                let rem = r.remaining.saturating_sub(done);
                if rem == Work::ZERO {
                    continue;
                }
                let latency = if self.platform.state(to).mode == PowerMode::Off {
                    self.platform.cores()[to].switch_on()
                } else {
                    SimTime::ZERO
                };
                let cost =
                    switch_cost_time(self.tasks[r.task].state(), self.platform.config()) + latency;
                let new_total = cost + rem.duration_at(to_cap);
                let old_left = r.end - t;
                if old_left > new_total {
                    let gain = old_left - new_total;
                    if best.is_none_or(|(g, _)| gain > g) {
                        best = Some((gain, from));
                    }
                }
            }
            if let Some((_, from)) = best {
                let task = self.slots[from].as_ref().expect("chosen above").task;
                self.switch_core(task, from, to, t)?;
            }
        }
        Ok(())
    }

    /// Migrates running task `task` from `from` to `to` at `t` through the
    /// cache. Switching to the same core does nothing.
    pub(super) fn switch_core(
        &mut self,
        task: usize,
        from: usize,
        to: usize,
        t: SimTime,
    ) -> Result<(), SwitchError> {
        if from == to {
            return Ok(());
        }
        if self.slots[to].is_some() {
            return Err(SwitchError::CoreBusy(to));
        }
        match &self.slots[from] {
            Some(r)
                if r.task == task
                    && r.active
                    && r.kind == ThreadKind::Whole
                    && r.busy_from <= t => {}
            _ => return Err(SwitchError::NotRunning(self.tasks[task].task_id.clone())),
        }
        let r = self.slots[from].take().expect("checked above");
        let task_id = self.tasks[task].task_id.clone();
        let from_cap = self.platform.cores()[from].capacity;
        let to_cap = self.platform.cores()[to].capacity;
        let done = r.remaining.done_within(t - r.busy_from, from_cap);
        let rem = r.remaining.saturating_sub(done);
        self.segments.push(BusySegment {
            task_id: task_id.clone(),
            core: from,
            start: r.busy_from,
            end: t,
            work: done,
            switched_away: true,
        });
        self.platform.set_mode(from, PowerMode::Idle, None, t)?;
        let cost = switch_cost_time(self.tasks[task].state(), self.platform.config());
        self.emit(
            t,
            EventKind::Switch,
            task_id.clone(),
            Some(from),
            format!(
                "to={to} remaining_mb={} cost_s={}",
                mb(rem),
                cost.as_secs_f64()
            ),
        );
        if self.policy.gate_idle_cores {
            self.platform.set_mode(from, PowerMode::Off, None, t)?;
            self.emit(
                t,
                EventKind::PowerOff,
                String::new(),
                Some(from),
                String::new(),
            );
        }
        if self.platform.state(to).mode == PowerMode::Off {
            self.power_on(to, t, task_id)?;
        }
        let busy_from = t.max(self.ready_at[to]) + cost;
        self.slots[to] = Some(Running {
            task,
            kind: ThreadKind::Whole,
            remaining: rem,
            busy_from,
            end: busy_from + rem.duration_at(to_cap),
            active: false,
            resumed_from: Some(from),
        });
        if busy_from == t {
            self.activate(to, t)?;
        }
        Ok(())
    }
}

#[derive(Debug, PartialEq)]
pub(super) enum SwitchError {
    CoreBusy(usize),
    NotRunning(String),
    Platform(PlatformError),
}

impl From<PlatformError> for SwitchError {
    fn from(e: PlatformError) -> Self {
        SwitchError::Platform(e)
    }
}

impl From<SimError> for SwitchError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Platform(p) => SwitchError::Platform(p),
            SimError::TaskFailed { .. } => unreachable!("activation never completes a task"),
        }
    }
}

impl From<SwitchError> for SimError {
    fn from(e: SwitchError) -> Self {
        match e {
            SwitchError::Platform(p) => SimError::Platform(p),
            other => unreachable!("switch candidates are pre-checked: {other:?}"),
        }
    }
}
