//! Apriori market basket analysis run as MapReduce jobs on a simulated
//! heterogeneous multi-core processor.
//!
//! - [`basket`]: transactions, itemsets, rules, basket-file parsing.
//! - [`platform`]: cores, power states, and the energy ledger.
//! - [`scheduler`]: the MB Scheduler that places tasks on cores.
//! - [`engine`]: a small MapReduce engine on top of the scheduler.
//! - [`pipeline`]: the three Apriori jobs and a reference miner.
//! - [`cli`]: the `basketforge` command.

pub mod basket;
pub mod cli;
pub mod engine;
pub mod pipeline;
pub mod platform;
pub mod scheduler;
pub mod time;

pub use basket::{AssociationRule, Item, Itemset, MiningParams, Transaction, TransactionDataset};
pub use pipeline::{mine, mine_reference, MiningResult, MiningRun, PipelineConfig};
pub use platform::{EnergyLedger, PlatformConfig};
pub use scheduler::{MbScheduler, ScheduleTrace, SchedulingPolicy};
