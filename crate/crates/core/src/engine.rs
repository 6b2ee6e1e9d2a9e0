//! A miniature MapReduce engine.
//!
//! A job tracker partitions the input into contiguous splits, submits one
//! map task per split to the MB Scheduler, shuffles the intermediate pairs
//! into sorted key groups, then packs the groups into reduce tasks. Keys and
//! values are opaque text at this layer.

use crate::basket::{Transaction, TransactionDataset};
use crate::platform::{EnergyLedger, PlatformConfig, PlatformError};
use crate::scheduler::{
    InvalidTask, MbScheduler, PartialRun, ScheduleError, ScheduleEvent, ScheduleTrace,
    SchedulingPolicy, Task, TaskDescriptor, Threading,
};
use std::any::{Any, TypeId};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// Default size of one input byte in simulated megabytes.
pub const DEFAULT_MB_PER_BYTE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
}

impl KeyValue {
    pub fn new(key: impl Into<String>, value: impl Into<String>) -> Self {
        KeyValue {
            key: key.into(),
            value: value.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputSplit {
    pub split_index: usize,
    pub records: Vec<Transaction>,
    /// Serialized size: each record's basket line plus its newline.
    pub byte_size: usize,
}

impl InputSplit {
    pub fn new(split_index: usize, records: Vec<Transaction>) -> Self {
        let byte_size = records.iter().map(|r| r.to_line().len() + 1).sum();
        InputSplit {
            split_index,
            records,
            byte_size,
        }
    }
}

/// A typed interpretation of a broadcast table, built once per table.
pub trait BroadcastView: Sized + Send + Sync + 'static {
    fn build(table: &BTreeMap<String, String>) -> Result<Self, String>;
}

type ViewCache = Mutex<HashMap<TypeId, Arc<dyn Any + Send + Sync>>>;

/// Read-only side table shared by every task of a job.
#[derive(Clone, Default)]
pub struct Broadcast {
    table: Arc<BTreeMap<String, String>>,
    views: Arc<ViewCache>,
}

impl Broadcast {
    pub fn new(table: BTreeMap<String, String>) -> Self {
        Broadcast {
            table: Arc::new(table),
            views: Arc::default(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.table.get(key).map(String::as_str)
    }

    pub fn table(&self) -> &BTreeMap<String, String> {
        &self.table
    }

    /// Parses the table as `V`, memoized across tasks.
    pub fn view<V: BroadcastView>(&self) -> Result<Arc<V>, String> {
        let mut cache = self.views.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(v) = cache.get(&TypeId::of::<V>()) {
            return Ok(Arc::clone(v).downcast::<V>().expect("keyed by type id"));
        }
        let v = Arc::new(V::build(&self.table)?);
        cache.insert(TypeId::of::<V>(), v.clone());
        Ok(v)
    }
}

impl fmt::Debug for Broadcast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Broadcast")
            .field("entries", &self.table.len())
            .finish()
    }
}

pub type MapFn =
    Arc<dyn Fn(&Transaction, &Broadcast) -> Result<Vec<KeyValue>, String> + Send + Sync>;
pub type ReduceFn =
    Arc<dyn Fn(&str, &[String], &Broadcast) -> Result<Vec<KeyValue>, String> + Send + Sync>;

#[derive(Clone)]
pub struct JobSpec {
    pub job_name: String,
    pub n_partitions: usize,
    pub map_fn: MapFn,
    pub reduce_fn: ReduceFn,
    pub broadcast: Broadcast,
    pub map_cost: f64,
    pub reduce_cost: f64,
    /// Converts serialized bytes into simulated MB of work.
    pub mb_per_byte: f64,
}

impl JobSpec {
    pub fn new(
        job_name: impl Into<String>,
        n_partitions: usize,
        map_fn: impl Fn(&Transaction, &Broadcast) -> Result<Vec<KeyValue>, String>
            + Send
            + Sync
            + 'static,
        reduce_fn: impl Fn(&str, &[String], &Broadcast) -> Result<Vec<KeyValue>, String>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        JobSpec {
            job_name: job_name.into(),
            n_partitions,
            map_fn: Arc::new(map_fn),
            reduce_fn: Arc::new(reduce_fn),
            broadcast: Broadcast::default(),
            map_cost: 1.0,
            reduce_cost: 1.0,
            mb_per_byte: DEFAULT_MB_PER_BYTE,
        }
    }

    pub fn with_broadcast(mut self, broadcast: Broadcast) -> Self {
        self.broadcast = broadcast;
        self
    }

    pub fn with_costs(mut self, map_cost: f64, reduce_cost: f64) -> Self {
        self.map_cost = map_cost;
        self.reduce_cost = reduce_cost;
        self
    }

    pub fn with_mb_per_byte(mut self, mb_per_byte: f64) -> Self {
        self.mb_per_byte = mb_per_byte;
        self
    }

    fn validate(&self) -> Result<(), EngineError> {
        if self.n_partitions == 0 {
            return Err(EngineError::Config(
                "n_partitions must be at least 1".into(),
            ));
        }
        if !(self.mb_per_byte > 0.0 && self.mb_per_byte.is_finite()) {
            return Err(EngineError::Config("mb_per_byte must be positive".into()));
        }
        Ok(())
    }

    pub fn map_task_id(&self, split: usize) -> String {
        format!("{}/map/{split}", self.job_name)
    }

    pub fn reduce_task_id(&self, index: usize) -> String {
        format!("{}/reduce/{index}", self.job_name)
    }
}

impl fmt::Debug for JobSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JobSpec")
            .field("job_name", &self.job_name)
            .field("n_partitions", &self.n_partitions)
            .field("broadcast", &self.broadcast)
            .field("map_cost", &self.map_cost)
            .field("reduce_cost", &self.reduce_cost)
            .field("mb_per_byte", &self.mb_per_byte)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobResult {
    /// Sorted by key, then value.
    pub outputs: Vec<KeyValue>,
    /// Events of this job's map and reduce batches.
    pub trace: ScheduleTrace,
    /// Platform ledger up to the end of the job.
    pub ledger: EnergyLedger,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("job {job}: map failed on split {split}, record {record}: {message}")]
    MapFailed {
        job: String,
        split: usize,
        record: usize,
        message: String,
        partial: Box<PartialRun>,
    },
    #[error("job {job}: reduce failed on key {key:?}: {message}")]
    ReduceFailed {
        job: String,
        key: String,
        message: String,
        partial: Box<PartialRun>,
    },
    #[error(transparent)]
    InvalidTask(#[from] InvalidTask),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error("scheduler error: {0}")]
    Scheduler(String),
}

impl EngineError {
    /// Trace and ledger up to the failure, when a task body failed.
    pub fn partial(&self) -> Option<&PartialRun> {
        match self {
            EngineError::MapFailed { partial, .. } | EngineError::ReduceFailed { partial, .. } => {
                Some(partial)
            }
            _ => None,
        }
    }
}

/// Record counts for `n` contiguous, balanced parts of `total` records.
pub fn balanced_counts(total: usize, n: usize) -> Vec<usize> {
    let (base, extra) = (total / n, total % n);
    (0..n).map(|i| base + usize::from(i < extra)).collect()
}

pub fn partition_input(
    dataset: &TransactionDataset,
    n: usize,
) -> Result<Vec<InputSplit>, EngineError> {
    if n == 0 {
        return Err(EngineError::Config(
            "partition count must be at least 1".into(),
        ));
    }
    let records = dataset.transactions();
    let mut start = 0;
    Ok(balanced_counts(records.len(), n)
        .into_iter()
        .enumerate()
        .map(|(i, count)| {
            let split = InputSplit::new(i, records[start..start + count].to_vec());
            start += count;
            split
        })
        .collect())
}

#[derive(Debug)]
struct MapFailure {
    split: usize,
    record: usize,
    message: String,
}

impl fmt::Display for MapFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}: {}", self.record, self.message)
    }
}

#[derive(Debug)]
struct ReduceFailure {
    key: String,
    message: String,
}

impl fmt::Display for ReduceFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "key {:?}: {}", self.key, self.message)
    }
}

fn check_keys(pairs: &[KeyValue]) -> Result<(), String> {
    if pairs.iter().any(|kv| kv.key.is_empty()) {
        Err("emitted an empty key".into())
    } else {
        Ok(())
    }
}

fn other_schedule_error<E>(e: ScheduleError<E>) -> EngineError {
    match e {
        ScheduleError::InvalidTask(e) => EngineError::InvalidTask(e),
        ScheduleError::Platform(e) => EngineError::Platform(e),
        ScheduleError::TaskFailed { task_id, .. } => {
            EngineError::Scheduler(format!("task {task_id} failed"))
        }
        ScheduleError::CoreBusy(c) => EngineError::Scheduler(format!("core {c} is busy")),
        ScheduleError::NotRunning(t) => EngineError::Scheduler(format!("task {t} is not running")),
    }
}

/// Runs one multi-threaded map task per split. Returns the per-split
/// outputs in split order, plus the batch trace.
pub fn run_map_phase(
    job: &JobSpec,
    splits: &[InputSplit],
    scheduler: &mut MbScheduler,
) -> Result<(Vec<Vec<KeyValue>>, ScheduleTrace), EngineError> {
    job.validate()?;
    let tasks: Vec<Task<Vec<KeyValue>, MapFailure>> = splits
        .iter()
        .map(|split| {
            let descriptor = TaskDescriptor::new(
                job.map_task_id(split.split_index),
                split.byte_size as f64 * job.mb_per_byte,
                Threading::Multi,
            )
            .with_cost_factor(job.map_cost)
            .with_state_mb(split.byte_size as f64 * job.mb_per_byte);
            let map_fn = Arc::clone(&job.map_fn);
            let broadcast = job.broadcast.clone();
            let split = split.clone();
            Task::new(descriptor, move || {
                let mut out = Vec::new();
                for record in &split.records {
                    let fail = |message| MapFailure {
                        split: split.split_index,
                        record: record.id,
                        message,
                    };
                    let pairs = map_fn(record, &broadcast).map_err(fail)?;
                    check_keys(&pairs).map_err(fail)?;
                    out.extend(pairs);
                }
                Ok(out)
            })
        })
        .collect();
    match scheduler.schedule(tasks) {
        Ok(done) => Ok((done.results, done.trace)),
        Err(ScheduleError::TaskFailed {
            source, partial, ..
        }) => Err(EngineError::MapFailed {
            job: job.job_name.clone(),
            split: source.split,
            record: source.record,
            message: source.message,
            partial,
        }),
        Err(e) => Err(other_schedule_error(e)),
    }
}

/// Groups pairs by key. Groups come out in ascending key order; values keep
/// (split index, emission order).
pub fn shuffle(map_outputs: &[Vec<KeyValue>]) -> Vec<(String, Vec<String>)> {
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for kv in map_outputs.iter().flatten() {
        groups.entry(&kv.key).or_default().push(kv.value.clone());
    }
    groups
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn group_bytes(groups: &[(String, Vec<String>)]) -> usize {
    groups
        .iter()
        .map(|(k, vs)| k.len() + 1 + vs.iter().map(|v| v.len() + 1).sum::<usize>())
        .sum()
}

/// Packs key groups into contiguous reduce tasks and runs them
/// single-threaded. Outputs are sorted by key, then value.
pub fn run_reduce_phase(
    job: &JobSpec,
    groups: &[(String, Vec<String>)],
    scheduler: &mut MbScheduler,
) -> Result<(Vec<KeyValue>, ScheduleTrace), EngineError> {
    job.validate()?;
    let n_tasks = job.n_partitions.min(groups.len());
    let mut start = 0;
    let mut tasks: Vec<Task<Vec<KeyValue>, ReduceFailure>> = Vec::with_capacity(n_tasks);
    for (i, count) in balanced_counts(groups.len(), n_tasks.max(1))
        .into_iter()
        .enumerate()
        .take(n_tasks)
    {
        let chunk = groups[start..start + count].to_vec();
        start += count;
        let mb = group_bytes(&chunk) as f64 * job.mb_per_byte;
        let descriptor = TaskDescriptor::new(job.reduce_task_id(i), mb, Threading::Single)
            .with_cost_factor(job.reduce_cost)
            .with_state_mb(mb);
        let reduce_fn = Arc::clone(&job.reduce_fn);
        let broadcast = job.broadcast.clone();
        tasks.push(Task::new(descriptor, move || {
            let mut out = Vec::new();
            for (key, values) in &chunk {
                let fail = |message| ReduceFailure {
                    key: key.clone(),
                    message,
                };
                let pairs = reduce_fn(key, values, &broadcast).map_err(fail)?;
                check_keys(&pairs).map_err(fail)?;
                out.extend(pairs);
            }
            Ok(out)
        }));
    }
    match scheduler.schedule(tasks) {
        Ok(done) => {
            let mut outputs: Vec<KeyValue> = done.results.into_iter().flatten().collect();
            outputs.sort();
            Ok((outputs, done.trace))
        }
        Err(ScheduleError::TaskFailed {
            source, partial, ..
        }) => Err(EngineError::ReduceFailed {
            job: job.job_name.clone(),
            key: source.key,
            message: source.message,
            partial,
        }),
        Err(e) => Err(other_schedule_error(e)),
    }
}

/// Runs a whole job as two batches on an existing scheduler session. The
/// reduce batch is submitted only once every map task has finished.
pub fn run_job_with(
    job: &JobSpec,
    dataset: &TransactionDataset,
    scheduler: &mut MbScheduler,
) -> Result<JobResult, EngineError> {
    job.validate()?;
    let splits = partition_input(dataset, job.n_partitions)?;
    let (map_outputs, map_trace) = run_map_phase(job, &splits, scheduler)?;
    let groups = shuffle(&map_outputs);
    let (outputs, reduce_trace) = run_reduce_phase(job, &groups, scheduler)?;
    let events: Vec<ScheduleEvent> = map_trace
        .events
        .into_iter()
        .chain(reduce_trace.events)
        .collect();
    Ok(JobResult {
        outputs,
        trace: ScheduleTrace::from_events(events),
        ledger: scheduler.ledger(),
    })
}

/// Runs a job on a fresh platform.
pub fn run_job(
    job: &JobSpec,
    dataset: &TransactionDataset,
    config: &PlatformConfig,
    policy: SchedulingPolicy,
) -> Result<JobResult, EngineError> {
    let mut scheduler = MbScheduler::new(config.clone(), policy)?;
    run_job_with(job, dataset, &mut scheduler)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basket::parse_str;

    fn word_count(n: usize) -> JobSpec {
        JobSpec::new(
            "wc",
            n,
            |t, _| {
                Ok(t.items()
                    .iter()
                    .map(|i| KeyValue::new(i.as_str(), "1"))
                    .collect())
            },
            |k, vs, _| {
                let total: u64 = vs
                    .iter()
                    .map(|v| v.parse::<u64>().map_err(|e| e.to_string()))
                    .sum::<Result<_, _>>()?;
                Ok(vec![KeyValue::new(k, total.to_string())])
            },
        )
    }

    fn ten_records() -> TransactionDataset {
        parse_str(&(0..10).map(|i| format!("i{i}\n")).collect::<String>()).unwrap()
    }

    #[test]
    fn partitions_are_balanced_and_contiguous() {
        let ds = ten_records();
        let splits = partition_input(&ds, 4).unwrap();
        let counts: Vec<usize> = splits.iter().map(|s| s.records.len()).collect();
        assert_eq!(counts, vec![3, 3, 2, 2]);
        let rejoined: Vec<Transaction> = splits.into_iter().flat_map(|s| s.records).collect();
        assert_eq!(rejoined, ds.transactions());

        let two = parse_str("a\nb\n").unwrap();
        let counts: Vec<usize> = partition_input(&two, 4)
            .unwrap()
            .iter()
            .map(|s| s.records.len())
            .collect();
        assert_eq!(counts, vec![1, 1, 0, 0]);
        assert_eq!(partition_input(&ds, 1).unwrap()[0].records.len(), 10);
        assert!(matches!(
            partition_input(&ds, 0),
            Err(EngineError::Config(_))
        ));
    }

    #[test]
    fn byte_size_counts_lines_and_newlines() {
        let ds = parse_str("a,b\nccc\n").unwrap();
        assert_eq!(partition_input(&ds, 1).unwrap()[0].byte_size, 4 + 4);
    }

    #[test]
    fn shuffle_orders_groups_by_key_and_values_by_split() {
        let kv = KeyValue::new;
        assert_eq!(
            shuffle(&[vec![kv("b", "1"), kv("a", "1")], vec![kv("b", "1")]]),
            vec![
                ("a".into(), vec!["1".into()]),
                ("b".into(), vec!["1".into(), "1".into()])
            ]
        );
        assert!(shuffle(&[]).is_empty());
        assert_eq!(
            shuffle(&[vec![kv("a", "2")], vec![kv("a", "1")]]),
            vec![("a".to_string(), vec!["2".to_string(), "1".to_string()])]
        );
    }

    #[test]
    fn word_count_end_to_end() {
        let ds = parse_str("a,b\na\n").unwrap();
        let result = run_job(
            &word_count(4),
            &ds,
            &PlatformConfig::default(),
            SchedulingPolicy::default(),
        )
        .unwrap();
        assert_eq!(
            result.outputs,
            vec![KeyValue::new("a", "2"), KeyValue::new("b", "1")]
        );
    }

    #[test]
    fn reduce_tasks_cover_contiguous_key_ranges() {
        let ds = parse_str("a,b,c,d,e\n").unwrap();
        let result = run_job(
            &word_count(2),
            &ds,
            &PlatformConfig::default(),
            SchedulingPolicy::default(),
        )
        .unwrap();
        let reduce_starts = result
            .trace
            .events
            .iter()
            .filter(|e| {
                e.kind == crate::scheduler::EventKind::Submit && e.task_id.starts_with("wc/reduce/")
            })
            .count();
        assert_eq!(reduce_starts, 2);
        assert_eq!(balanced_counts(5, 2), vec![3, 2]);
    }

    #[test]
    fn map_failure_names_job_split_and_record() {
        let ds = ten_records();
        let job = JobSpec::new(
            "boom",
            4,
            |t, _| {
                if t.id == 7 {
                    Err("bad record".into())
                } else {
                    Ok(vec![])
                }
            },
            |_, _, _| Ok(vec![]),
        );
        let err = run_job(
            &job,
            &ds,
            &PlatformConfig::default(),
            SchedulingPolicy::default(),
        )
        .unwrap_err();
        match &err {
            EngineError::MapFailed {
                job, split, record, ..
            } => {
                assert_eq!((job.as_str(), *split, *record), ("boom", 2, 7));
            }
            other => panic!("unexpected {other:?}"),
        }
        let partial = err.partial().unwrap();
        assert!(partial
            .trace
            .events
            .iter()
            .any(|e| e.detail.contains("bad record")));
        partial.ledger.check_tiling().unwrap();
    }

    #[test]
    fn reduce_failure_names_key() {
        let ds = parse_str("a,b\n").unwrap();
        let job = JobSpec::new(
            "r",
            1,
            |t, _| {
                Ok(t.items()
                    .iter()
                    .map(|i| KeyValue::new(i.as_str(), "1"))
                    .collect())
            },
            |k, _, _| {
                if k == "b" {
                    Err("nope".into())
                } else {
                    Ok(vec![])
                }
            },
        );
        let err = run_job(
            &job,
            &ds,
            &PlatformConfig::default(),
            SchedulingPolicy::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, EngineError::ReduceFailed { ref key, .. } if key == "b"),
            "{err:?}"
        );
    }

    #[test]
    fn empty_keys_are_rejected() {
        let ds = parse_str("a\n").unwrap();
        let job = JobSpec::new(
            "e",
            1,
            |_, _| Ok(vec![KeyValue::new("", "1")]),
            |_, _, _| Ok(vec![]),
        );
        let err = run_job(
            &job,
            &ds,
            &PlatformConfig::default(),
            SchedulingPolicy::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty key"));
    }

    struct Upper(Vec<String>);
    impl BroadcastView for Upper {
        fn build(table: &BTreeMap<String, String>) -> Result<Self, String> {
            Ok(Upper(table.values().map(|v| v.to_uppercase()).collect()))
        }
    }

    #[test]
    fn broadcast_views_are_built_once() {
        let b = Broadcast::new(BTreeMap::from([("k".to_string(), "v".to_string())]));
        let first = b.view::<Upper>().unwrap();
        let again = b.clone().view::<Upper>().unwrap();
        assert!(Arc::ptr_eq(&first, &again));
        assert_eq!(first.0, vec!["V".to_string()]);
        assert_eq!(b.get("k"), Some("v"));
    }
}
