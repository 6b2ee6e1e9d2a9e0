//! The MB Scheduler: places map/reduce tasks on a heterogeneous platform.
//!
//! A batch of tasks is submitted at once. Each task is classified as single-
//! or multi-threaded, its processing requirement is estimated from its data
//! size and per-phase cost factor, and it is placed either on the single
//! most suitable core or split across every free core in proportion to core
//! capacity. Unused cores are powered off when gating is enabled. Running
//! single-threaded tasks may migrate to a faster core through the switch
//! cache (dynamic switching), or the whole placement can be fixed up front
//! as a queue (static switching).
//!
//! Task bodies are pure: they are run eagerly (possibly in parallel) and
//! their results are released at the simulated completion instant, so the
//! simulation alone decides every ordering-visible result.

mod replay;
mod sim;

pub use replay::replay_ledger;

use crate::platform::{
    make_platform, CoreSpec, EnergyLedger, Platform, PlatformConfig, PlatformError, PowerMode,
};
use crate::time::{SimTime, Work};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Multi-threaded tasks run single-threaded unless they carry at least this
/// much data per free core.
pub const SPLIT_THRESHOLD_MB_PER_CORE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threading {
    Single,
    Multi,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Fastest,
    Energy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switching {
    Static,
    #[default]
    Dynamic,
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fastest" => Ok(Objective::Fastest),
            "energy" => Ok(Objective::Energy),
            other => Err(format!(
                "unknown objective {other:?} (expected fastest|energy)"
            )),
        }
    }
}

impl FromStr for Switching {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "static" => Ok(Switching::Static),
            "dynamic" => Ok(Switching::Dynamic),
            other => Err(format!(
                "unknown switching mode {other:?} (expected static|dynamic)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchedulingPolicy {
    pub objective: Objective,
    pub gate_idle_cores: bool,
    pub switching: Switching,
}

impl Default for SchedulingPolicy {
    fn default() -> Self {
        SchedulingPolicy {
            objective: Objective::Fastest,
            gate_idle_cores: true,
            switching: Switching::Dynamic,
        }
    }
}

impl SchedulingPolicy {
    /// Every objective x switching combination with the given gating.
    pub fn all_combinations(gate_idle_cores: bool) -> [SchedulingPolicy; 4] {
        let mk = |objective, switching| SchedulingPolicy {
            objective,
            gate_idle_cores,
            switching,
        };
        [
            mk(Objective::Fastest, Switching::Static),
            mk(Objective::Fastest, Switching::Dynamic),
            mk(Objective::Energy, Switching::Static),
            mk(Objective::Energy, Switching::Dynamic),
        ]
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid task {task_id:?}: {reason}")]
pub struct InvalidTask {
    pub task_id: String,
    pub reason: &'static str,
}

/// A schedulable unit of work.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDescriptor {
    pub task_id: String,
    /// MB of input data.
    pub work_mb: f64,
    /// Per-phase algorithm weight applied to `work_mb`.
    pub cost_factor: f64,
    pub threading: Threading,
    /// MB moved through the cache when the task changes core.
    pub state_mb: f64,
    /// Seconds from submission.
    pub deadline: Option<f64>,
}

impl TaskDescriptor {
    pub fn new(task_id: impl Into<String>, work_mb: f64, threading: Threading) -> Self {
        TaskDescriptor {
            task_id: task_id.into(),
            work_mb,
            cost_factor: 1.0,
            threading,
            state_mb: 0.0,
            deadline: None,
        }
    }

    pub fn with_cost_factor(mut self, cost_factor: f64) -> Self {
        self.cost_factor = cost_factor;
        self
    }

    pub fn with_state_mb(mut self, state_mb: f64) -> Self {
        self.state_mb = state_mb;
        self
    }

    pub fn with_deadline(mut self, seconds: f64) -> Self {
        self.deadline = Some(seconds);
        self
    }

    pub fn validate(&self) -> Result<(), InvalidTask> {
        let fail = |reason| {
            Err(InvalidTask {
                task_id: self.task_id.clone(),
                reason,
            })
        };
        if self.task_id.is_empty() {
            return fail("task id is empty");
        }
        if !(self.work_mb >= 0.0 && self.work_mb.is_finite()) {
            return fail("work_mb must be >= 0");
        }
        if !(self.cost_factor > 0.0 && self.cost_factor.is_finite()) {
            return fail("cost_factor must be > 0");
        }
        if !(self.state_mb >= 0.0 && self.state_mb.is_finite()) {
            return fail("state_mb must be >= 0");
        }
        if let Some(d) = self.deadline {
            if d.is_nan() || d <= 0.0 {
                return fail("deadline must be > 0");
            }
        }
        Ok(())
    }

    pub(crate) fn work(&self) -> Work {
        Work::from_mb(self.work_mb)
    }

    pub(crate) fn effective_work(&self) -> Work {
        self.work().scaled(self.cost_factor)
    }

    pub(crate) fn state(&self) -> Work {
        Work::from_mb(self.state_mb)
    }
}

/// Threading mode the scheduler will actually use given `free_cores`.
///
/// The declaration is authoritative, except that multi-threaded tasks too
/// small to give every free core a full megabyte run single-threaded.
pub fn classify(task: &TaskDescriptor, free_cores: usize) -> Threading {
    match task.threading {
        Threading::Single => Threading::Single,
        Threading::Multi => {
            if free_cores == 0 || task.work_mb < SPLIT_THRESHOLD_MB_PER_CORE * free_cores as f64 {
                Threading::Single
            } else {
                Threading::Multi
            }
        }
    }
}

/// Effective work in MB: data size weighted by the algorithm's cost factor.
pub fn estimate_requirement(task: &TaskDescriptor) -> f64 {
    task.work_mb * task.cost_factor
}

/// Picks the most suitable core among `candidates` (the cores that are not
/// busy). Returns `None` only when there are no candidates.
///
/// `fastest` takes the highest capacity; `energy` the lowest busy energy
/// `active_power x work / capacity`. A deadline restricts the choice to
/// cores that finish in time, falling back to the fastest core when none
/// can. Ties go to the lower core id.
pub fn select_core(
    task: &TaskDescriptor,
    candidates: &[&CoreSpec],
    objective: Objective,
    remaining_deadline: Option<SimTime>,
) -> Option<usize> {
    let work = task.effective_work();
    let fastest = |cores: &[&CoreSpec]| -> Option<usize> {
        let mut best: Option<&CoreSpec> = None;
        for &c in cores {
            if best.is_none_or(|b| {
                c.capacity > b.capacity || (c.capacity == b.capacity && c.core_id < b.core_id)
            }) {
                best = Some(c);
            }
        }
        best.map(|c| c.core_id)
    };
    let mut sorted: Vec<&CoreSpec> = candidates.to_vec();
    sorted.sort_by_key(|c| c.core_id);
    let feasible: Vec<&CoreSpec> = match remaining_deadline {
        None => sorted.clone(),
        Some(budget) => {
            let ok: Vec<&CoreSpec> = sorted
                .iter()
                .copied()
                .filter(|c| work.duration_at(c.capacity) <= budget)
                .collect();
            if ok.is_empty() {
                return fastest(&sorted);
            }
            ok
        }
    };
    match objective {
        Objective::Fastest => fastest(&feasible),
        Objective::Energy => {
            let mut best: Option<(u128, usize)> = None;
            for c in feasible {
                // mW x us, exact on the integer grid.
                let energy = c.power_mw(PowerMode::Busy) as u128
                    * work.duration_at(c.capacity).as_micros() as u128;
                if best.is_none_or(|(e, _)| energy < e) {
                    best = Some((energy, c.core_id));
                }
            }
            best.map(|(_, id)| id)
        }
    }
}

/// Splits `work` across cores in proportion to `capacities` so every thread
/// finishes together. Floors each share, then hands the leftover grid units
/// out by largest remainder (ties to the earlier core). The result sums to
/// `work` exactly.
pub(crate) fn split_work(work: Work, capacities: &[f64]) -> Vec<Work> {
    if capacities.len() <= 1 {
        return capacities.iter().map(|_| work).collect();
    }
    let total_cap: f64 = capacities.iter().sum();
    let units = work.units();
    let mut shares: Vec<(u64, f64)> = capacities
        .iter()
        .map(|&c| {
            let exact = units as f64 * c / total_cap;
            let floor = exact.floor() as u64;
            (floor, exact - floor as f64)
        })
        .collect();
    let assigned: u64 = shares.iter().map(|s| s.0).sum();
    let mut leftover = units.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| shares[b].1.total_cmp(&shares[a].1).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        shares[i].0 += 1;
        leftover -= 1;
    }
    // Float flooring can overshoot by a unit on huge inputs; trim from the end.
    let mut excess = shares
        .iter()
        .map(|s| s.0)
        .sum::<u64>()
        .saturating_sub(units);
    for share in shares.iter_mut().rev() {
        let cut = excess.min(share.0);
        share.0 -= cut;
        excess -= cut;
    }
    shares
        .into_iter()
        .map(|(u, _)| Work::from_units(u))
        .collect()
}

/// Per-core chunks (in MB) of a multi-threaded task over `cores`.
pub fn split_threads(task: &TaskDescriptor, cores: &[CoreSpec]) -> Vec<(usize, f64)> {
    let caps: Vec<f64> = cores.iter().map(|c| c.capacity).collect();
    split_work(task.work(), &caps)
        .into_iter()
        .zip(cores)
        .map(|(w, c)| (c.core_id, w.as_mb()))
        .collect()
}

/// Where a task runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Zero effective work: completes at submission without a core.
    Instant,
    Single(usize),
    /// (core, raw work chunk) per thread, ascending core id.
    Split(Vec<(usize, Work)>),
}

impl Placement {
    pub fn cores(&self) -> Vec<usize> {
        match self {
            Placement::Instant => Vec::new(),
            Placement::Single(c) => vec![*c],
            Placement::Split(chunks) => chunks.iter().map(|(c, _)| *c).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub task_index: usize,
    pub task_id: String,
    pub placement: Placement,
}

/// Shared placement rule used by dynamic dispatch and static planning.
pub(crate) fn decide(
    task: &TaskDescriptor,
    free: &[&CoreSpec],
    objective: Objective,
    waited: SimTime,
) -> Placement {
    if task.effective_work() == Work::ZERO {
        return Placement::Instant;
    }
    let mut free: Vec<&CoreSpec> = free.to_vec();
    free.sort_by_key(|c| c.core_id);
    if classify(task, free.len()) == Threading::Multi {
        let caps: Vec<f64> = free.iter().map(|c| c.capacity).collect();
        let chunks = split_work(task.work(), &caps);
        if chunks
            .iter()
            .all(|w| w.scaled(task.cost_factor) > Work::ZERO)
        {
            return Placement::Split(free.iter().map(|c| c.core_id).zip(chunks).collect());
        }
    }
    let remaining = task
        .deadline
        .map(|d| SimTime::from_secs_f64(d).saturating_sub(waited));
    let core = select_core(task, &free, objective, remaining).expect("free cores are non-empty");
    Placement::Single(core)
}

/// Fixes every placement before execution by simulating dispatch forward on
/// the platform's own duration model (power-on latencies ignored). Entries
/// come out in dispatch order; execution then follows them verbatim.
pub fn build_static_queue(
    tasks: &[TaskDescriptor],
    config: &PlatformConfig,
    objective: Objective,
) -> Vec<Assignment> {
    let cores = config.sorted_cores();
    let mut free_at = vec![SimTime::ZERO; cores.len()];
    let mut queue = Vec::with_capacity(tasks.len());
    let mut pending: std::collections::VecDeque<usize> = (0..tasks.len()).collect();
    let mut now = SimTime::ZERO;
    while let Some(&next) = pending.front() {
        let task = &tasks[next];
        if task.effective_work() == Work::ZERO {
            pending.pop_front();
            queue.push(Assignment {
                task_index: next,
                task_id: task.task_id.clone(),
                placement: Placement::Instant,
            });
            continue;
        }
        let free: Vec<&CoreSpec> = cores.iter().filter(|c| free_at[c.core_id] <= now).collect();
        if free.is_empty() {
            now = *free_at
                .iter()
                .filter(|&&t| t > now)
                .min()
                .expect("some core frees later");
            continue;
        }
        pending.pop_front();
        let placement = decide(task, &free, objective, now);
        match &placement {
            Placement::Instant => {}
            Placement::Single(c) => {
                free_at[*c] = now + task.effective_work().duration_at(cores[*c].capacity);
            }
            Placement::Split(chunks) => {
                for (c, w) in chunks {
                    free_at[*c] = now + w.scaled(task.cost_factor).duration_at(cores[*c].capacity);
                }
            }
        }
        queue.push(Assignment {
            task_index: next,
            task_id: task.task_id.clone(),
            placement,
        });
    }
    queue
}

/// Event kinds in tie-break precedence order for events at the same instant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Submit,
    ThreadEnd,
    Combine,
    End,
    Switch,
    PowerOff,
    PowerOn,
    Start,
    ThreadStart,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("kind serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEvent {
    pub time: SimTime,
    pub kind: EventKind,
    #[serde(rename = "task")]
    pub task_id: String,
    pub core: Option<usize>,
    pub detail: String,
}

impl ScheduleEvent {
    /// Total-order sort key: (time, kind precedence, task, core).
    pub fn sort_key(&self) -> (SimTime, EventKind, &str, Option<usize>) {
        (self.time, self.kind, &self.task_id, self.core)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScheduleTrace {
    pub events: Vec<ScheduleEvent>,
    pub makespan: SimTime,
}

impl ScheduleTrace {
    pub fn from_events(mut events: Vec<ScheduleEvent>) -> Self {
        events.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let makespan = events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::End | EventKind::Combine))
            .map(|e| e.time)
            .max()
            .unwrap_or(SimTime::ZERO);
        ScheduleTrace { events, makespan }
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses trace lines; errors carry the 1-based line number.
    pub fn from_jsonl(text: &str) -> Result<Self, (usize, String)> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ScheduleEvent =
                serde_json::from_str(line).map_err(|err| (i + 1, err.to_string()))?;
            events.push(e);
        }
        Ok(ScheduleTrace::from_events(events))
    }

    /// Checks that events are strictly increasing under [`ScheduleEvent::sort_key`].
    pub fn check_total_order(&self) -> Result<(), String> {
        for w in self.events.windows(2) {
            if w[0].sort_key() >= w[1].sort_key() {
                return Err(format!(
                    "events out of order or tied: {:?} then {:?}",
                    w[0], w[1]
                ));
            }
        }
        Ok(())
    }

    pub fn events_of<'a>(
        &'a self,
        task_id: &'a str,
    ) -> impl Iterator<Item = &'a ScheduleEvent> + 'a {
        self.events.iter().filter(move |e| e.task_id == task_id)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

/// One contiguous stretch of a core executing a task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BusySegment {
    pub task_id: String,
    pub core: usize,
    pub start: SimTime,
    pub end: SimTime,
    /// Effective work retired in this segment.
    pub work: Work,
    /// True when the segment was cut short by a core switch.
    pub switched_away: bool,
}

/// A task descriptor together with its pure body.
pub struct Task<R, E> {
    pub descriptor: TaskDescriptor,
    pub body: Box<dyn FnOnce() -> Result<R, E> + Send>,
}

impl<R, E> Task<R, E> {
    pub fn new(
        descriptor: TaskDescriptor,
        body: impl FnOnce() -> Result<R, E> + Send + 'static,
    ) -> Self {
        Task {
            descriptor,
            body: Box::new(body),
        }
    }
}

/// Trace and ledger at the moment a batch stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialRun {
    pub trace: ScheduleTrace,
    pub ledger: EnergyLedger,
}

#[derive(Debug, Error)]
pub enum ScheduleError<E> {
    #[error("task {task_id} failed: {source}")]
    TaskFailed {
        task_id: String,
        source: E,
        partial: Box<PartialRun>,
    },
    #[error(transparent)]
    InvalidTask(#[from] InvalidTask),
    #[error("core {0} is busy")]
    CoreBusy(usize),
    #[error("task {0} is not running")]
    NotRunning(String),
    #[error(transparent)]
    Platform(#[from] PlatformError),
}

/// Outcome of one scheduled batch.
#[derive(Debug)]
pub struct Scheduled<R> {
    /// Task results in submission order.
    pub results: Vec<R>,
    pub trace: ScheduleTrace,
    pub segments: Vec<BusySegment>,
    /// Whole-platform ledger up to the end of this batch.
    pub ledger: EnergyLedger,
}

/// A scheduler session owning the platform and the accumulated trace.
/// Consecutive batches run back to back on the same logical clock.
#[derive(Clone, Debug)]
pub struct MbScheduler {
    platform: Platform,
    policy: SchedulingPolicy,
    events: Vec<ScheduleEvent>,
    segments: Vec<BusySegment>,
    ready_at: Vec<SimTime>,
}

impl MbScheduler {
    /// Starts with every core powered off at t = 0.
    pub fn new(config: PlatformConfig, policy: SchedulingPolicy) -> Result<Self, PlatformError> {
        let platform = make_platform(config, PowerMode::Off)?;
        Ok(Self::with_platform(platform, policy))
    }

    pub fn with_platform(platform: Platform, policy: SchedulingPolicy) -> Self {
        let ready_at = vec![SimTime::ZERO; platform.n_cores()];
        MbScheduler {
            platform,
            policy,
            events: Vec::new(),
            segments: Vec::new(),
            ready_at,
        }
    }

    pub fn policy(&self) -> SchedulingPolicy {
        self.policy
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn now(&self) -> SimTime {
        self.platform.clock()
    }

    /// Everything scheduled so far.
    pub fn trace(&self) -> ScheduleTrace {
        ScheduleTrace::from_events(self.events.clone())
    }

    pub fn segments(&self) -> &[BusySegment] {
        &self.segments
    }

    pub fn ledger(&self) -> EnergyLedger {
        self.platform.ledger()
    }

    /// Runs a batch of tasks submitted together at the current clock and
    /// advances the clock to the batch makespan.
    pub fn schedule<R, E>(
        &mut self,
        tasks: Vec<Task<R, E>>,
    ) -> Result<Scheduled<R>, ScheduleError<E>>
    where
        R: Send,
        E: Send + fmt::Display,
    {
        let mut seen = std::collections::HashSet::new();
        for t in &tasks {
            t.descriptor.validate()?;
            if !seen.insert(t.descriptor.task_id.as_str()) {
                return Err(ScheduleError::InvalidTask(InvalidTask {
                    task_id: t.descriptor.task_id.clone(),
                    reason: "duplicate task id in batch",
                }));
            }
        }
        let (descriptors, bodies): (Vec<_>, Vec<_>) =
            tasks.into_iter().map(|t| (t.descriptor, t.body)).unzip();
        let outcomes: Vec<Result<R, E>> = bodies.into_par_iter().map(|body| body()).collect();

        let run = sim::Simulation::new(
            &mut self.platform,
            &mut self.ready_at,
            self.policy,
            &descriptors,
        )
        .run(&outcomes);
        match run {
            Ok(done) => {
                self.events.extend(done.events.iter().cloned());
                self.segments.extend(done.segments.iter().cloned());
                let results = outcomes
                    .into_iter()
                    .map(|r| r.unwrap_or_else(|_| unreachable!("failed tasks abort the batch")))
                    .collect();
                Ok(Scheduled {
                    results,
                    trace: ScheduleTrace::from_events(done.events),
                    segments: done.segments,
                    ledger: self.platform.ledger(),
                })
            }
            Err(sim::SimError::Platform(e)) => Err(ScheduleError::Platform(e)),
            Err(sim::SimError::TaskFailed { index, events, at }) => {
                self.events.extend(events);
                let ledger = self.platform.ledger_at(at)?;
                let source = outcomes
                    .into_iter()
                    .nth(index)
                    .and_then(Result::err)
                    .expect("failure index points at an error");
                Err(ScheduleError::TaskFailed {
                    task_id: descriptors[index].task_id.clone(),
                    source,
                    partial: Box::new(PartialRun {
                        trace: self.trace(),
                        ledger,
                    }),
                })
            }
        }
    }
}

/// One-shot convenience: a fresh platform, one batch.
pub fn schedule<R, E>(
    tasks: Vec<Task<R, E>>,
    config: PlatformConfig,
    policy: SchedulingPolicy,
) -> Result<Scheduled<R>, ScheduleError<E>>
where
    R: Send,
    E: Send + fmt::Display,
{
    let mut scheduler = MbScheduler::new(config, policy)?;
    scheduler.schedule(tasks)
}

/// Tasks without bodies, for simulations that only need the timeline.
pub fn timing_only(descriptors: Vec<TaskDescriptor>) -> Vec<Task<(), std::convert::Infallible>> {
    descriptors
        .into_iter()
        .map(|d| Task::new(d, || Ok(())))
        .collect()
}
