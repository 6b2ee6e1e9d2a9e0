//! Apriori as three MapReduce jobs: item frequency, levelwise candidate
//! counting, and rule generation. A sequential exhaustive miner serves as
//! the reference.

use crate::basket::{
    absolute_support_threshold, count_support, AssociationRule, BasketError, Item, Itemset,
    MiningParams, TransactionDataset,
};
use crate::engine::{
    run_job_with, Broadcast, BroadcastView, EngineError, JobSpec, KeyValue, DEFAULT_MB_PER_BYTE,
};
use crate::platform::{EnergyLedger, PlatformConfig, PlatformError};
use crate::scheduler::{MbScheduler, ScheduleTrace, SchedulingPolicy};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

/// Largest item universe the reference miner will enumerate.
pub const REFERENCE_UNIVERSE_LIMIT: usize = 20;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Basket(#[from] BasketError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("reference miner refuses a universe of {size} items (limit {limit})")]
    UniverseTooLarge { size: usize, limit: usize },
    #[error("{0}")]
    Precondition(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequentLevel {
    pub k: usize,
    pub entries: BTreeMap<Itemset, u64>,
}

impl FrequentLevel {
    pub fn new(k: usize) -> Self {
        FrequentLevel {
            k,
            entries: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningResult {
    /// Levels k = 1..K; the first empty level is not stored.
    pub levels: Vec<FrequentLevel>,
    /// Sorted by (antecedent, consequent).
    pub rules: Vec<AssociationRule>,
    pub params: MiningParams,
    pub n_transactions: usize,
}

/// A mining result together with the scheduling record of every job.
#[derive(Clone, Debug, PartialEq)]
pub struct MiningRun {
    pub result: MiningResult,
    /// Job names in execution order.
    pub jobs: Vec<String>,
    pub trace: ScheduleTrace,
    pub ledger: EnergyLedger,
}

/// Per-phase work multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostFactors {
    pub frequency_map: f64,
    /// Candidate map cost is `candidate_map_base + candidate_map_step * (k - 1)`.
    pub candidate_map_base: f64,
    pub candidate_map_step: f64,
    pub rule_map: f64,
    pub reduce: f64,
}

impl Default for CostFactors {
    fn default() -> Self {
        CostFactors {
            frequency_map: 1.0,
            candidate_map_base: 1.0,
            candidate_map_step: 0.25,
            rule_map: 1.5,
            reduce: 0.5,
        }
    }
}

impl CostFactors {
    pub fn candidate_map(&self, k: usize) -> f64 {
        self.candidate_map_base + self.candidate_map_step * (k as f64 - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub platform: PlatformConfig,
    pub policy: SchedulingPolicy,
    /// Defaults to the platform's core count.
    pub n_partitions: Option<usize>,
    pub mb_per_byte: f64,
    pub costs: CostFactors,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            platform: PlatformConfig::default(),
            policy: SchedulingPolicy::default(),
            n_partitions: None,
            mb_per_byte: DEFAULT_MB_PER_BYTE,
            costs: CostFactors::default(),
        }
    }
}

impl PipelineConfig {
    pub fn partitions(&self) -> usize {
        self.n_partitions.unwrap_or(self.platform.cores.len())
    }
}

/// Whether `union / antecedent` meets `min_confidence`. Shared by both
/// miners so they agree bit for bit.
pub fn meets_confidence(union_count: u64, antecedent_count: u64, min_confidence: f64) -> bool {
    union_count as f64 / antecedent_count as f64 >= min_confidence
}

fn parse_count(text: &str) -> Result<u64, String> {
    text.parse::<u64>()
        .map_err(|e| format!("bad count {text:?}: {e}"))
}

fn sum_counts(key: &str, values: &[String], _: &Broadcast) -> Result<Vec<KeyValue>, String> {
    let mut total = 0u64;
    for v in values {
        total += parse_count(v)?;
    }
    Ok(vec![KeyValue::new(key, total.to_string())])
}

fn base_job(name: String, cfg: &PipelineConfig, map_cost: f64, job: JobSpec) -> JobSpec {
    JobSpec {
        job_name: name,
        n_partitions: cfg.partitions(),
        ..job
    }
    .with_costs(map_cost, cfg.costs.reduce)
    .with_mb_per_byte(cfg.mb_per_byte)
}

fn level_from_outputs(
    k: usize,
    outputs: &[KeyValue],
    threshold: u64,
) -> Result<(BTreeMap<Itemset, u64>, FrequentLevel), PipelineError> {
    let mut raw = BTreeMap::new();
    for kv in outputs {
        let set = Itemset::decode(&kv.key)?;
        raw.insert(
            set,
            parse_count(&kv.value).map_err(PipelineError::Invariant)?,
        );
    }
    let mut level = FrequentLevel::new(k);
    level.entries = raw
        .iter()
        .filter(|(_, &c)| c >= threshold)
        .map(|(s, &c)| (s.clone(), c))
        .collect();
    Ok((raw, level))
}

/// Job 1: `<item, count>` for every item, then the threshold filter.
/// Returns the raw counts and the pruned level 1.
pub fn job_frequency(
    dataset: &TransactionDataset,
    params: &MiningParams,
    scheduler: &mut MbScheduler,
    cfg: &PipelineConfig,
) -> Result<(BTreeMap<Itemset, u64>, FrequentLevel), PipelineError> {
    let job = base_job(
        "frequency".into(),
        cfg,
        cfg.costs.frequency_map,
        JobSpec::new(
            "",
            1,
            |t, _| {
                Ok(t.items()
                    .iter()
                    .map(|i| KeyValue::new(i.as_str(), "1"))
                    .collect())
            },
            sum_counts,
        ),
    );
    let result = run_job_with(&job, dataset, scheduler)?;
    level_from_outputs(
        1,
        &result.outputs,
        absolute_support_threshold(params.min_support, dataset.len()),
    )
}

/// Classic prefix join of level k-1 with itself, then subset pruning.
/// Output is sorted and duplicate-free.
pub fn generate_candidates(prev: &FrequentLevel) -> Vec<Itemset> {
    let sets: Vec<&Itemset> = prev.entries.keys().collect();
    let mut out = Vec::new();
    for (i, a) in sets.iter().enumerate() {
        let prefix = &a.items()[..a.len() - 1];
        for b in &sets[i + 1..] {
            if &b.items()[..b.len() - 1] != prefix {
                break;
            }
            let mut items = a.items().to_vec();
            items.push(b.items()[b.len() - 1].clone());
            let candidate = Itemset::new(items).expect("non-empty");
            if candidate
                .drop_one_subsets()
                .iter()
                .all(|s| prev.entries.contains_key(s))
            {
                out.push(candidate);
            }
        }
    }
    out.sort();
    out
}

const CANDIDATE_PREFIX: &str = "candidate:";
const ITEM_PREFIX: &str = "item:";

struct CandidateTable {
    candidates: Vec<Itemset>,
    frequent_items: HashSet<Item>,
}

impl BroadcastView for CandidateTable {
    fn build(table: &BTreeMap<String, String>) -> Result<Self, String> {
        let mut candidates = Vec::new();
        let mut frequent_items = HashSet::new();
        for key in table.keys() {
            if let Some(enc) = key.strip_prefix(CANDIDATE_PREFIX) {
                candidates.push(Itemset::decode(enc).map_err(|e| e.to_string())?);
            } else if let Some(name) = key.strip_prefix(ITEM_PREFIX) {
                frequent_items.insert(Item::new(name).map_err(|e| e.to_string())?);
            }
        }
        Ok(CandidateTable {
            candidates,
            frequent_items,
        })
    }
}

/// Job 2 at level `k`: broadcast the candidates, drop infrequent items from
/// each transaction map-side, count contained candidates, keep those at or
/// above the threshold.
pub fn job_candidates(
    k: usize,
    prev: &FrequentLevel,
    level1: &FrequentLevel,
    dataset: &TransactionDataset,
    params: &MiningParams,
    scheduler: &mut MbScheduler,
    cfg: &PipelineConfig,
) -> Result<FrequentLevel, PipelineError> {
    if prev.is_empty() {
        return Err(PipelineError::Precondition(
            "candidate job needs a non-empty previous level",
        ));
    }
    let candidates = generate_candidates(prev);
    if candidates.is_empty() {
        return Ok(FrequentLevel::new(k));
    }
    let mut table = BTreeMap::new();
    for c in &candidates {
        table.insert(format!("{CANDIDATE_PREFIX}{}", c.encode()), String::new());
    }
    for set in level1.entries.keys() {
        table.insert(format!("{ITEM_PREFIX}{}", set.encode()), String::new());
    }
    let job = base_job(
        format!("candidates-k{k}"),
        cfg,
        cfg.costs.candidate_map(k),
        JobSpec::new(
            "",
            1,
            |t, b| {
                let view = b.view::<CandidateTable>()?;
                let pruned: Vec<Item> = t
                    .items()
                    .iter()
                    .filter(|i| view.frequent_items.contains(*i))
                    .cloned()
                    .collect();
                Ok(view
                    .candidates
                    .iter()
                    .filter(|c| c.is_contained_in(&pruned))
                    .map(|c| KeyValue::new(c.encode(), "1"))
                    .collect())
            },
            sum_counts,
        )
        .with_broadcast(Broadcast::new(table)),
    );
    let result = run_job_with(&job, dataset, scheduler)?;
    let (_, level) = level_from_outputs(
        k,
        &result.outputs,
        absolute_support_threshold(params.min_support, dataset.len()),
    )?;
    Ok(level)
}

struct SupportTable(BTreeMap<Itemset, u64>);

impl BroadcastView for SupportTable {
    fn build(table: &BTreeMap<String, String>) -> Result<Self, String> {
        table
            .iter()
            .map(|(k, v)| {
                Ok((
                    Itemset::decode(k).map_err(|e| e.to_string())?,
                    parse_count(v)?,
                ))
            })
            .collect::<Result<_, String>>()
            .map(SupportTable)
    }
}

const MISSING_SUBSET: &str = "missing from the support table";

/// Job 3: every frequent itemset Z with |Z| >= 2 yields `X -> Z \ X` for
/// each non-empty proper subset X, kept when its confidence (from the
/// broadcast support table) meets the minimum. Reduce deduplicates.
pub fn job_rules(
    levels: &[FrequentLevel],
    params: &MiningParams,
    n_transactions: usize,
    scheduler: &mut MbScheduler,
    cfg: &PipelineConfig,
) -> Result<Vec<AssociationRule>, PipelineError> {
    let itemsets: Vec<(&Itemset, u64)> = levels
        .iter()
        .flat_map(|l| l.entries.iter().map(|(s, &c)| (s, c)))
        .collect();
    if itemsets.is_empty() {
        return Ok(Vec::new());
    }
    let table = itemsets
        .iter()
        .map(|(s, c)| (s.encode(), c.to_string()))
        .collect();
    let input = TransactionDataset::from_item_lists(
        itemsets.iter().map(|(s, _)| s.items().to_vec()).collect(),
    )?;
    let min_confidence = params.min_confidence;
    let job = base_job(
        "rules".into(),
        cfg,
        cfg.costs.rule_map,
        JobSpec::new(
            "",
            1,
            move |t, b| {
                if t.items().len() < 2 {
                    return Ok(Vec::new());
                }
                let supports = b.view::<SupportTable>()?;
                let z = Itemset::new(t.items().to_vec()).map_err(|e| e.to_string())?;
                let lookup = |s: &Itemset| {
                    supports
                        .0
                        .get(s)
                        .copied()
                        .ok_or_else(|| format!("{s} {MISSING_SUBSET}"))
                };
                let z_count = lookup(&z)?;
                let mut out = Vec::new();
                for x in z.proper_subsets() {
                    let x_count = lookup(&x)?;
                    if meets_confidence(z_count, x_count, min_confidence) {
                        let y = z.difference(&x).expect("proper subset");
                        out.push(KeyValue::new(
                            format!("{}\n{}", x.encode(), y.encode()),
                            format!("{z_count}/{x_count}"),
                        ));
                    }
                }
                Ok(out)
            },
            |key, values, _| {
                let mut distinct: Vec<&String> = values.iter().collect();
                distinct.sort();
                distinct.dedup();
                match distinct.as_slice() {
                    [one] => Ok(vec![KeyValue::new(key, one.as_str())]),
                    _ => Err(format!("conflicting counts {distinct:?}")),
                }
            },
        )
        .with_broadcast(Broadcast::new(table)),
    );
    let result = match run_job_with(&job, &input, scheduler) {
        Err(EngineError::MapFailed { message, .. }) if message.contains(MISSING_SUBSET) => {
            return Err(PipelineError::Invariant(format!(
                "downward closure violated: {message}"
            )));
        }
        other => other?,
    };
    let mut rules = Vec::with_capacity(result.outputs.len());
    for kv in &result.outputs {
        let bad = || PipelineError::Invariant(format!("malformed rule record {kv:?}"));
        let (ante, cons) = kv.key.split_once('\n').ok_or_else(bad)?;
        let (union, ante_count) = kv.value.split_once('/').ok_or_else(bad)?;
        rules.push(AssociationRule::from_counts(
            Itemset::decode(ante)?,
            Itemset::decode(cons)?,
            parse_count(union).map_err(PipelineError::Invariant)?,
            parse_count(ante_count).map_err(PipelineError::Invariant)?,
            n_transactions,
        ));
    }
    sort_rules(&mut rules);
    Ok(rules)
}

fn sort_rules(rules: &mut [AssociationRule]) {
    rules.sort_by(|a, b| (&a.antecedent, &a.consequent).cmp(&(&b.antecedent, &b.consequent)));
}

/// Full levelwise mining on the simulated platform.
pub fn mine(
    dataset: &TransactionDataset,
    params: &MiningParams,
    cfg: &PipelineConfig,
) -> Result<MiningRun, PipelineError> {
    let mut scheduler = MbScheduler::new(cfg.platform.clone(), cfg.policy)?;
    let mut jobs = vec!["frequency".to_string()];
    let (_, level1) = job_frequency(dataset, params, &mut scheduler, cfg)?;
    let mut levels = Vec::new();
    if !level1.is_empty() {
        levels.push(level1.clone());
        for k in 2.. {
            let prev = levels.last().expect("non-empty");
            if generate_candidates(prev).is_empty() {
                break;
            }
            jobs.push(format!("candidates-k{k}"));
            let level = job_candidates(k, prev, &level1, dataset, params, &mut scheduler, cfg)?;
            if level.is_empty() {
                break;
            }
            levels.push(level);
        }
    }
    check_downward_closure(&levels).map_err(PipelineError::Invariant)?;
    let rules = if levels.is_empty() {
        Vec::new()
    } else {
        jobs.push("rules".to_string());
        job_rules(&levels, params, dataset.len(), &mut scheduler, cfg)?
    };
    Ok(MiningRun {
        result: MiningResult {
            levels,
            rules,
            params: *params,
            n_transactions: dataset.len(),
        },
        jobs,
        trace: scheduler.trace(),
        ledger: scheduler.ledger(),
    })
}

/// Every size k-1 subset of each level-k entry is in level k-1, and levels
/// are numbered 1, 2, ...
pub fn check_downward_closure(levels: &[FrequentLevel]) -> Result<(), String> {
    for (i, level) in levels.iter().enumerate() {
        if level.k != i + 1 {
            return Err(format!("level {} stored at position {i}", level.k));
        }
        for set in level.entries.keys() {
            if set.len() != level.k {
                return Err(format!("{set} has the wrong size for level {}", level.k));
            }
            if let Some(missing) = set
                .drop_one_subsets()
                .into_iter()
                .find(|s| !levels[i - 1].entries.contains_key(s))
            {
                return Err(format!("{set} is frequent but its subset {missing} is not"));
            }
        }
    }
    Ok(())
}

/// Sequential exhaustive miner: counts every subset of the universe up to
/// the longest transaction, keeps the frequent ones, and splits each into
/// every possible rule.
pub fn mine_reference(
    dataset: &TransactionDataset,
    params: &MiningParams,
) -> Result<MiningResult, PipelineError> {
    let universe = dataset.universe();
    if universe.len() > REFERENCE_UNIVERSE_LIMIT {
        return Err(PipelineError::UniverseTooLarge {
            size: universe.len(),
            limit: REFERENCE_UNIVERSE_LIMIT,
        });
    }
    let threshold = absolute_support_threshold(params.min_support, dataset.len());
    let max_len = dataset.max_transaction_len();
    let set_of = |mask: u32| {
        let items = (0..universe.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| universe[i].clone())
            .collect();
        Itemset::new(items).expect("non-empty")
    };
    // Support of every subset of the universe up to the longest transaction.
    let mut counts: HashMap<u32, u64> = HashMap::new();
    let mut by_size: BTreeMap<usize, BTreeMap<Itemset, u64>> = BTreeMap::new();
    for mask in 1u32..(1 << universe.len()) {
        let size = mask.count_ones() as usize;
        if size > max_len {
            continue;
        }
        let set = set_of(mask);
        let count = count_support(dataset, &set);
        counts.insert(mask, count);
        if count >= threshold {
            by_size.entry(size).or_default().insert(set, count);
        }
    }
    let mut levels = Vec::new();
    for k in 1.. {
        match by_size.remove(&k) {
            Some(entries) => levels.push(FrequentLevel { k, entries }),
            None => break,
        }
    }
    // Every split of every frequent set of two or more items.
    let mut rules = Vec::new();
    for (&z, &z_count) in &counts {
        if z.count_ones() < 2 || z_count < threshold {
            continue;
        }
        let mut x = (z - 1) & z;
        while x != 0 {
            let x_count = counts[&x];
            if meets_confidence(z_count, x_count, params.min_confidence) {
                rules.push(AssociationRule::from_counts(
                    set_of(x),
                    set_of(z & !x),
                    z_count,
                    x_count,
                    dataset.len(),
                ));
            }
            x = (x - 1) & z;
        }
    }
    sort_rules(&mut rules);
    Ok(MiningResult {
        levels,
        rules,
        params: *params,
        n_transactions: dataset.len(),
    })
}

#[derive(Serialize)]
struct RuleRecord<'a> {
    antecedent: &'a Itemset,
    consequent: &'a Itemset,
    support: f64,
    confidence: f64,
    count: u64,
}

/// One JSON object per rule, in canonical order.
pub fn rules_to_jsonl(rules: &[AssociationRule]) -> String {
    let mut out = String::new();
    for r in rules {
        let record = RuleRecord {
            antecedent: &r.antecedent,
            consequent: &r.consequent,
            support: r.support,
            confidence: r.confidence,
            count: r.union_count,
        };
        out.push_str(&serde_json::to_string(&record).expect("rules serialize"));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct LevelEntry<'a> {
    items: &'a Itemset,
    count: u64,
}

/// `{"1": [{"items": [...], "count": n}, ...], "2": ...}`
pub fn levels_to_json(levels: &[FrequentLevel]) -> String {
    let map: BTreeMap<usize, Vec<LevelEntry>> = levels
        .iter()
        .map(|l| {
            (
                l.k,
                l.entries
                    .iter()
                    .map(|(items, &count)| LevelEntry { items, count })
                    .collect(),
            )
        })
        .collect();
    serde_json::to_string_pretty(&map).expect("levels serialize")
}
