#![allow(dead_code)]

use basketforge::basket::{
    count_support, parse_str, Item, Itemset, MiningParams, TransactionDataset,
};
use basketforge::pipeline::{check_downward_closure, MiningResult};
use basketforge::platform::{EnergyScope, PlatformConfig, PowerMode};
use basketforge::scheduler::{
    replay_ledger, EventKind, Objective, Scheduled, SchedulingPolicy, Switching, TaskDescriptor,
    Threading,
};
use basketforge::time::{SimTime, Work};
use proptest::prelude::*;
use std::collections::BTreeMap;

pub fn d4() -> TransactionDataset {
    parse_str("beer,diaper\nbeer,diaper,milk\ndiaper,milk\nbeer,milk\n").unwrap()
}

pub fn set(names: &[&str]) -> Itemset {
    Itemset::from_names(names).unwrap()
}

pub fn policy_strategy() -> impl Strategy<Value = SchedulingPolicy> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(energy, gate, stat)| {
        SchedulingPolicy {
            objective: if energy {
                Objective::Energy
            } else {
                Objective::Fastest
            },
            gate_idle_cores: gate,
            switching: if stat {
                Switching::Static
            } else {
                Switching::Dynamic
            },
        }
    })
}

/// Up to eight tasks mixing zero, tiny, and multi-megabyte work.
pub fn task_set_strategy() -> impl Strategy<Value = Vec<TaskDescriptor>> {
    let task = (
        prop_oneof![Just(0.0), 0.0f64..2.0, 0.0f64..120.0],
        any::<bool>(),
        prop::sample::select(vec![0.5, 1.0, 1.5, 2.0]),
        0.0f64..20.0,
        prop::option::weighted(0.2, 0.05f64..2.0),
    );
    prop::collection::vec(task, 0..8).prop_map(|specs| {
        specs
            .into_iter()
            .enumerate()
            .map(|(i, (work, multi, cost, state, deadline))| {
                let threading = if multi {
                    Threading::Multi
                } else {
                    Threading::Single
                };
                let mut t = TaskDescriptor::new(format!("t{i}"), work, threading)
                    .with_cost_factor(cost)
                    .with_state_mb(state);
                t.deadline = deadline;
                t
            })
            .collect()
    })
}

/// Checks every structural invariant of one scheduled batch that started
/// from an all-off platform at t = 0.
pub fn check_schedule(
    tasks: &[TaskDescriptor],
    run: &Scheduled<()>,
    config: &PlatformConfig,
) -> Result<(), String> {
    let trace = &run.trace;
    trace.check_total_order()?;
    run.ledger.check_tiling()?;
    let replayed = replay_ledger(trace, config, PowerMode::Off, run.ledger.horizon)
        .map_err(|e| e.to_string())?;
    if replayed != run.ledger {
        return Err("replayed ledger differs".into());
    }

    // At most one busy thread per core.
    let n_cores = config.cores.len();
    for core in 0..n_cores {
        let mut segs: Vec<_> = run.segments.iter().filter(|s| s.core == core).collect();
        segs.sort_by_key(|s| s.start);
        for w in segs.windows(2) {
            if w[0].end > w[1].start {
                return Err(format!(
                    "core {core} runs {} and {} at once",
                    w[0].task_id, w[1].task_id
                ));
            }
        }
        let busy: u64 = segs.iter().map(|s| (s.end - s.start).as_micros()).sum();
        if busy != run.ledger.time_in_mode(core, PowerMode::Busy).as_micros() {
            return Err(format!(
                "core {core}: busy segments disagree with the ledger"
            ));
        }
    }

    for t in tasks {
        let submits = trace
            .events_of(&t.task_id)
            .filter(|e| e.kind == EventKind::Submit)
            .count();
        let ends = trace
            .events_of(&t.task_id)
            .filter(|e| e.kind == EventKind::End)
            .count();
        if submits != 1 || ends != 1 {
            return Err(format!("{}: {submits} submits, {ends} ends", t.task_id));
        }
        let mut segs: Vec<_> = run
            .segments
            .iter()
            .filter(|s| s.task_id == t.task_id)
            .collect();
        segs.sort_by_key(|s| s.start);
        let split = trace
            .events_of(&t.task_id)
            .any(|e| e.kind == EventKind::ThreadStart);
        if !split {
            // A single-threaded task occupies at most one core at a time.
            for w in segs.windows(2) {
                if w[0].end > w[1].start {
                    return Err(format!("{} occupies two cores at once", t.task_id));
                }
            }
        }
        let done: u64 = segs.iter().map(|s| s.work.units()).sum();
        let expected = Work::from_mb(t.work_mb).scaled(t.cost_factor).units();
        let slack = if split { segs.len() as u64 } else { 0 };
        if done.abs_diff(expected) > slack {
            return Err(format!(
                "{}: processed {done} units, expected {expected}",
                t.task_id
            ));
        }
        if t.cost_factor == 1.0 && done != expected {
            return Err(format!("{}: chunks do not add up to the task", t.task_id));
        }
    }
    if tasks.is_empty()
        && (!trace.events.is_empty() || run.ledger.total_energy_nj(EnergyScope::All) != 0)
    {
        return Err("an empty batch left a trace or spent energy".into());
    }
    Ok(())
}

pub fn dataset_strategy(max_tx: usize, max_items: u8) -> impl Strategy<Value = TransactionDataset> {
    (1..=max_items, 0.1f64..0.8).prop_flat_map(move |(n_items, density)| {
        let row = prop::collection::vec(prop::bool::weighted(density), n_items as usize).prop_map(
            move |bits| {
                let mut items: Vec<Item> = bits
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(i, _)| Item::new(format!("i{i:02}")).unwrap())
                    .collect();
                if items.is_empty() {
                    items.push(Item::new("i00").unwrap());
                }
                items
            },
        );
        prop::collection::vec(row, 1..=max_tx)
            .prop_map(|rows| TransactionDataset::from_item_lists(rows).unwrap())
    })
}

pub fn params_strategy() -> impl Strategy<Value = MiningParams> {
    (0.05f64..=1.0, 0.05f64..=1.0).prop_map(|(s, c)| MiningParams::new(s, c).unwrap())
}

/// Every rule meets both thresholds when recomputed from the raw data.
pub fn check_rule_soundness(ds: &TransactionDataset, result: &MiningResult) -> Result<(), String> {
    let n = ds.len() as f64;
    for r in &result.rules {
        let mut union_items = r.antecedent.items().to_vec();
        union_items.extend(r.consequent.items().iter().cloned());
        let union = Itemset::new(union_items).unwrap();
        let u = count_support(ds, &union);
        let a = count_support(ds, &r.antecedent);
        if u != r.union_count
            || (u as f64 / n) != r.support
            || (u as f64 / a as f64) != r.confidence
        {
            return Err(format!("rule {r} disagrees with the raw counts"));
        }
        if (u as f64) < (result.params.min_support * n - 1e-9)
            || r.confidence < result.params.min_confidence
        {
            return Err(format!("rule {r} is below a threshold"));
        }
    }
    Ok(())
}

/// The rule set is exactly the brute-force set of qualifying rules.
pub fn check_rule_completeness(
    ds: &TransactionDataset,
    result: &MiningResult,
) -> Result<(), String> {
    let universe = ds.universe();
    let n = ds.len();
    let threshold = basketforge::basket::absolute_support_threshold(result.params.min_support, n);
    let mut expected = BTreeMap::new();
    for mask in 1u32..(1 << universe.len()) {
        if mask.count_ones() < 2 {
            continue;
        }
        let z = Itemset::new(
            (0..universe.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| universe[i].clone())
                .collect(),
        )
        .unwrap();
        let zc = count_support(ds, &z);
        if zc < threshold || zc == 0 {
            continue;
        }
        for x in z.proper_subsets() {
            let xc = count_support(ds, &x);
            if zc as f64 / xc as f64 >= result.params.min_confidence {
                expected.insert((x.clone(), z.difference(&x).unwrap()), zc);
            }
        }
    }
    let got: BTreeMap<_, _> = result
        .rules
        .iter()
        .map(|r| ((r.antecedent.clone(), r.consequent.clone()), r.union_count))
        .collect();
    if got.len() != result.rules.len() {
        return Err("duplicate rules".into());
    }
    if got != expected {
        return Err(format!(
            "{} rules emitted, {} qualify",
            got.len(),
            expected.len()
        ));
    }
    Ok(())
}

pub fn check_levels(ds: &TransactionDataset, result: &MiningResult) -> Result<(), String> {
    check_downward_closure(&result.levels)?;
    let threshold =
        basketforge::basket::absolute_support_threshold(result.params.min_support, ds.len());
    for level in &result.levels {
        for (set, &count) in &level.entries {
            if count < threshold || count != count_support(ds, set) {
                return Err(format!(
                    "{set}: count {count} is wrong or below threshold {threshold}"
                ));
            }
        }
    }
    Ok(())
}

pub fn secs(s: f64) -> SimTime {
    SimTime::from_secs_f64(s)
}
