//! Discrete-event model of a heterogeneous multi-core processor.
//!
//! Each core has a throughput (MB per simulated second) and three power
//! levels. The [`Platform`] keeps every core's power mode and appends one
//! ledger interval per mode change, so energy is integrated exactly on the
//! microsecond grid (power is held in milliwatts, energy in nanojoules).

use crate::time::{SimTime, Work};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlatformError {
    #[error("invalid platform config: {0}")]
    Config(String),
    #[error("core {core}: time regression, mode set at {t} but core changed at {since}")]
    TimeRegression {
        core: usize,
        since: SimTime,
        t: SimTime,
    },
    #[error("no core with id {0}")]
    UnknownCore(usize),
    #[error("core {0}: busy mode requires a task")]
    BusyWithoutTask(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreSpec {
    pub core_id: usize,
    /// MB per simulated second.
    pub capacity: f64,
    /// Watts.
    pub active_power: f64,
    pub idle_power: f64,
    pub off_power: f64,
    /// Seconds.
    pub switch_on_latency: f64,
}

impl CoreSpec {
    pub fn power_mw(&self, mode: PowerMode) -> u64 {
        let watts = match mode {
            PowerMode::Off => self.off_power,
            PowerMode::Idle => self.idle_power,
            PowerMode::Busy => self.active_power,
        };
        (watts * 1000.0).round() as u64
    }

    pub fn switch_on(&self) -> SimTime {
        SimTime::from_secs_f64(self.switch_on_latency)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformConfig {
    pub cores: Vec<CoreSpec>,
    /// MB per second moved through the switch cache.
    pub cache_bandwidth: f64,
    /// Seconds added to every core switch.
    pub switch_fixed_cost: f64,
}

const DEFAULT_CAPACITIES: [f64; 4] = [80.0, 120.0, 200.0, 400.0];
const DEFAULT_ACTIVE_POWER: [f64; 4] = [1.5, 2.5, 5.0, 12.0];

impl Default for PlatformConfig {
    /// Four cores at 80/120/200/400 MB/s with a convex power curve; idle
    /// draw is a tenth of active draw.
    fn default() -> Self {
        let cores = DEFAULT_CAPACITIES
            .iter()
            .zip(DEFAULT_ACTIVE_POWER)
            .enumerate()
            .map(|(core_id, (&capacity, active_power))| CoreSpec {
                core_id,
                capacity,
                active_power,
                idle_power: active_power / 10.0,
                off_power: 0.0,
                switch_on_latency: 0.005,
            })
            .collect();
        PlatformConfig {
            cores,
            cache_bandwidth: 1000.0,
            switch_fixed_cost: 0.001,
        }
    }
}

impl PlatformConfig {
    pub fn validate(&self) -> Result<(), PlatformError> {
        let err = |m: String| Err(PlatformError::Config(m));
        if self.cores.is_empty() {
            return err("at least one core is required".into());
        }
        let mut seen = vec![false; self.cores.len()];
        for core in &self.cores {
            let id = core.core_id;
            if id >= self.cores.len() {
                return err(format!(
                    "core ids must be 0..{}, found {id}",
                    self.cores.len()
                ));
            }
            if seen[id] {
                return err(format!("duplicate core id {id}"));
            }
            seen[id] = true;
            if !(core.capacity > 0.0 && core.capacity.is_finite()) {
                return err(format!("core {id}: capacity must be positive"));
            }
            if !(core.idle_power >= 0.0 && core.active_power > core.idle_power) {
                return err(format!("core {id}: need active_power > idle_power >= 0"));
            }
            if core.off_power != 0.0 {
                return err(format!("core {id}: off_power must be 0"));
            }
            if !(core.switch_on_latency >= 0.0 && core.switch_on_latency.is_finite()) {
                return err(format!("core {id}: switch_on_latency must be >= 0"));
            }
        }
        if !(self.cache_bandwidth > 0.0 && self.cache_bandwidth.is_finite()) {
            return err("cache_bandwidth must be positive".into());
        }
        if !(self.switch_fixed_cost >= 0.0 && self.switch_fixed_cost.is_finite()) {
            return err("switch_fixed_cost must be >= 0".into());
        }
        Ok(())
    }

    /// Cores ordered by id.
    pub fn sorted_cores(&self) -> Vec<CoreSpec> {
        let mut cores = self.cores.clone();
        cores.sort_by_key(|c| c.core_id);
        cores
    }

    pub fn from_json(text: &str) -> Result<Self, PlatformError> {
        let config: PlatformConfig =
            serde_json::from_str(text).map_err(|e| PlatformError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PlatformError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PlatformError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("platform config serializes")
    }
}

/// Seconds to process `work_mb` on `core`.
pub fn execution_duration(work_mb: f64, core: &CoreSpec) -> f64 {
    work_mb / core.capacity
}

/// Seconds to move `state_mb` of task state through the cache on a core
/// switch: one transfer at cache bandwidth plus the fixed cost.
pub fn switch_cost(state_mb: f64, config: &PlatformConfig) -> f64 {
    config.switch_fixed_cost + state_mb / config.cache_bandwidth
}

/// [`switch_cost`] on the simulator's integer grid.
pub fn switch_cost_time(state: Work, config: &PlatformConfig) -> SimTime {
    SimTime::from_secs_f64(config.switch_fixed_cost) + state.duration_at(config.cache_bandwidth)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerMode {
    Off,
    Idle,
    Busy,
}

impl fmt::Display for PowerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PowerMode::Off => "off",
            PowerMode::Idle => "idle",
            PowerMode::Busy => "busy",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoreState {
    pub mode: PowerMode,
    pub since: SimTime,
    pub current_task: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnergyInterval {
    pub core_id: usize,
    pub mode: PowerMode,
    pub t_start: SimTime,
    pub t_end: SimTime,
    pub power_mw: u64,
}

impl EnergyInterval {
    pub fn duration(&self) -> SimTime {
        self.t_end - self.t_start
    }

    /// mW x us = nJ, exactly.
    pub fn energy_nj(&self) -> u64 {
        self.power_mw * self.duration().as_micros()
    }

    pub fn watts(&self) -> f64 {
        self.power_mw as f64 / 1000.0
    }

    pub fn joules(&self) -> f64 {
        self.energy_nj() as f64 / 1e9
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnergyScope {
    Core(usize),
    All,
}

/// Closed record of every core's power modes over `[0, horizon]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EnergyLedger {
    pub n_cores: usize,
    pub horizon: SimTime,
    pub intervals: Vec<EnergyInterval>,
}

impl EnergyLedger {
    pub fn total_energy_nj(&self, scope: EnergyScope) -> u64 {
        self.intervals
            .iter()
            .filter(|iv| match scope {
                EnergyScope::Core(c) => iv.core_id == c,
                EnergyScope::All => true,
            })
            .map(EnergyInterval::energy_nj)
            .sum()
    }

    /// Joules in scope.
    pub fn total_energy(&self, scope: EnergyScope) -> f64 {
        self.total_energy_nj(scope) as f64 / 1e9
    }

    pub fn core_intervals(&self, core: usize) -> impl Iterator<Item = &EnergyInterval> {
        self.intervals.iter().filter(move |iv| iv.core_id == core)
    }

    /// Time core `core` spent in `mode`.
    pub fn time_in_mode(&self, core: usize, mode: PowerMode) -> SimTime {
        SimTime::from_micros(
            self.core_intervals(core)
                .filter(|iv| iv.mode == mode)
                .map(|iv| iv.duration().as_micros())
                .sum(),
        )
    }

    /// Checks that each core's intervals tile `[0, horizon]` with no gap,
    /// overlap, or inverted interval.
    pub fn check_tiling(&self) -> Result<(), String> {
        for core in 0..self.n_cores {
            let mut cursor = SimTime::ZERO;
            for iv in self.core_intervals(core) {
                if iv.t_start != cursor {
                    return Err(format!(
                        "core {core}: interval starts at {} but previous ended at {cursor}",
                        iv.t_start
                    ));
                }
                if iv.t_end < iv.t_start {
                    return Err(format!("core {core}: inverted interval at {}", iv.t_start));
                }
                cursor = iv.t_end;
            }
            if cursor != self.horizon {
                return Err(format!(
                    "core {core}: coverage ends at {cursor}, horizon is {}",
                    self.horizon
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = wire::LedgerDoc::from(self);
        serde_json::to_string_pretty(&doc).expect("ledger serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let doc: wire::LedgerDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Ok(doc.into())
    }
}

mod wire {
    use super::*;

    #[derive(Serialize, Deserialize)]
    pub struct IntervalDoc {
        pub mode: PowerMode,
        pub t_start: SimTime,
        pub t_end: SimTime,
        pub watts: f64,
        pub joules: f64,
    }

    #[derive(Serialize, Deserialize)]
    pub struct CoreDoc {
        pub core_id: usize,
        pub total_joules: f64,
        pub intervals: Vec<IntervalDoc>,
    }

    #[derive(Serialize, Deserialize)]
    pub struct LedgerDoc {
        pub horizon: SimTime,
        pub total_joules: f64,
        pub cores: Vec<CoreDoc>,
    }

    impl From<&EnergyLedger> for LedgerDoc {
        fn from(ledger: &EnergyLedger) -> Self {
            let cores = (0..ledger.n_cores)
                .map(|core_id| CoreDoc {
                    core_id,
                    total_joules: ledger.total_energy(EnergyScope::Core(core_id)),
                    intervals: ledger
                        .core_intervals(core_id)
                        .map(|iv| IntervalDoc {
                            mode: iv.mode,
                            t_start: iv.t_start,
                            t_end: iv.t_end,
                            watts: iv.watts(),
                            joules: iv.joules(),
                        })
                        .collect(),
                })
                .collect();
            LedgerDoc {
                horizon: ledger.horizon,
                total_joules: ledger.total_energy(EnergyScope::All),
                cores,
            }
        }
    }

    impl From<LedgerDoc> for EnergyLedger {
        fn from(doc: LedgerDoc) -> Self {
            let n_cores = doc.cores.iter().map(|c| c.core_id + 1).max().unwrap_or(0);
            let mut cores = doc.cores;
            cores.sort_by_key(|c| c.core_id);
            let intervals = cores
                .into_iter()
                .flat_map(|c| {
                    let core_id = c.core_id;
                    c.intervals.into_iter().map(move |iv| EnergyInterval {
                        core_id,
                        mode: iv.mode,
                        t_start: iv.t_start,
                        t_end: iv.t_end,
                        power_mw: (iv.watts * 1000.0).round() as u64,
                    })
                })
                .collect();
            EnergyLedger {
                n_cores,
                horizon: doc.horizon,
                intervals,
            }
        }
    }
}

/// Live platform: per-core power state plus the closed part of the ledger.
#[derive(Clone, Debug)]
pub struct Platform {
    cores: Vec<CoreSpec>,
    config: PlatformConfig,
    states: Vec<CoreState>,
    closed: Vec<EnergyInterval>,
    clock: SimTime,
}

/// Creates a platform with every core in `initial_mode` at t = 0.
pub fn make_platform(
    config: PlatformConfig,
    initial_mode: PowerMode,
) -> Result<Platform, PlatformError> {
    config.validate()?;
    if initial_mode == PowerMode::Busy {
        return Err(PlatformError::Config(
            "initial mode must be off or idle".into(),
        ));
    }
    let cores = config.sorted_cores();
    let states = cores
        .iter()
        .map(|_| CoreState {
            mode: initial_mode,
            since: SimTime::ZERO,
            current_task: None,
        })
        .collect();
    Ok(Platform {
        cores,
        config,
        states,
        closed: Vec::new(),
        clock: SimTime::ZERO,
    })
}

impl Platform {
    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn cores(&self) -> &[CoreSpec] {
        &self.cores
    }

    pub fn core(&self, id: usize) -> Result<&CoreSpec, PlatformError> {
        self.cores.get(id).ok_or(PlatformError::UnknownCore(id))
    }

    pub fn n_cores(&self) -> usize {
        self.cores.len()
    }

    pub fn state(&self, id: usize) -> &CoreState {
        &self.states[id]
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn advance_clock(&mut self, t: SimTime) {
        self.clock = self.clock.max(t);
    }

    /// Moves core `id` into `mode` at `t`, closing its open ledger interval.
    /// Zero-length intervals are not recorded.
    pub fn set_mode(
        &mut self,
        id: usize,
        mode: PowerMode,
        task: Option<&str>,
        t: SimTime,
    ) -> Result<(), PlatformError> {
        let core = self.cores.get(id).ok_or(PlatformError::UnknownCore(id))?;
        if mode == PowerMode::Busy && task.is_none() {
            return Err(PlatformError::BusyWithoutTask(id));
        }
        let state = &mut self.states[id];
        if t < state.since {
            return Err(PlatformError::TimeRegression {
                core: id,
                since: state.since,
                t,
            });
        }
        let task = if mode == PowerMode::Busy {
            task.map(str::to_string)
        } else {
            None
        };
        if state.mode == mode && state.current_task == task {
            return Ok(());
        }
        if t > state.since {
            self.closed.push(EnergyInterval {
                core_id: id,
                mode: state.mode,
                t_start: state.since,
                t_end: t,
                power_mw: core.power_mw(state.mode),
            });
        }
        *state = CoreState {
            mode,
            since: t,
            current_task: task,
        };
        self.clock = self.clock.max(t);
        Ok(())
    }

    /// Snapshot of the ledger with every open interval closed at `horizon`.
    pub fn ledger_at(&self, horizon: SimTime) -> Result<EnergyLedger, PlatformError> {
        let mut intervals = self.closed.clone();
        for (id, state) in self.states.iter().enumerate() {
            if horizon < state.since {
                return Err(PlatformError::TimeRegression {
                    core: id,
                    since: state.since,
                    t: horizon,
                });
            }
            if horizon > state.since {
                intervals.push(EnergyInterval {
                    core_id: id,
                    mode: state.mode,
                    t_start: state.since,
                    t_end: horizon,
                    power_mw: self.cores[id].power_mw(state.mode),
                });
            }
        }
        // Stable by core, then time.
        intervals.sort_by_key(|iv| (iv.core_id, iv.t_start));
        Ok(EnergyLedger {
            n_cores: self.cores.len(),
            horizon,
            intervals,
        })
    }

    /// Ledger closed at the platform clock.
    pub fn ledger(&self) -> EnergyLedger {
        self.ledger_at(self.clock)
            .expect("clock is never behind a core's last change")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn secs(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    #[test]
    fn default_platform_has_four_heterogeneous_cores() {
        let p = make_platform(PlatformConfig::default(), PowerMode::Off).unwrap();
        let caps: Vec<f64> = p.cores().iter().map(|c| c.capacity).collect();
        assert_eq!(caps, [80.0, 120.0, 200.0, 400.0]);
        assert_eq!(p.cores()[0].power_mw(PowerMode::Idle), 150);
        assert!(p.ledger().intervals.is_empty());
    }

    #[test]
    fn single_core_platform_is_valid() {
        let mut config = PlatformConfig::default();
        config.cores.truncate(1);
        assert!(make_platform(config, PowerMode::Idle).is_ok());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut zero = PlatformConfig::default();
        zero.cores[1].capacity = 0.0;
        assert!(make_platform(zero, PowerMode::Off).is_err());

        let mut dup = PlatformConfig::default();
        dup.cores[1].core_id = 0;
        let e = make_platform(dup, PowerMode::Off).unwrap_err();
        assert!(e.to_string().contains("duplicate core id 0"), "{e}");

        let mut power = PlatformConfig::default();
        power.cores[0].idle_power = 5.0;
        assert!(power.validate().is_err());

        let mut off = PlatformConfig::default();
        off.cores[0].off_power = 0.1;
        assert!(off.validate().is_err());

        let mut bw = PlatformConfig::default();
        bw.cache_bandwidth = 0.0;
        assert!(bw.validate().is_err());
    }

    #[test]
    fn duration_formula() {
        let p = PlatformConfig::default();
        assert_eq!(execution_duration(200.0, &p.cores[3]), 0.5);
        assert_eq!(execution_duration(0.0, &p.cores[1]), 0.0);
        assert_eq!(execution_duration(100.0, &p.cores[0]), 1.25);
    }

    #[test]
    fn switch_cost_formula() {
        let mut config = PlatformConfig::default();
        assert!((switch_cost(50.0, &config) - 0.051).abs() < 1e-12);
        assert_eq!(switch_cost_time(Work::from_mb(50.0), &config), secs(0.051));
        assert_eq!(switch_cost_time(Work::ZERO, &config), secs(0.001));
        config.switch_fixed_cost = 0.0;
        assert_eq!(switch_cost(1000.0, &config), 1.0);
        assert_eq!(switch_cost_time(Work::from_mb(1000.0), &config), secs(1.0));
    }

    #[test]
    fn set_mode_closes_interval_with_old_power() {
        let mut config = PlatformConfig::default();
        config.cores[0].idle_power = 0.5;
        let mut p = make_platform(config, PowerMode::Idle).unwrap();
        p.set_mode(0, PowerMode::Busy, Some("t"), secs(1.0))
            .unwrap();
        let ledger = p.ledger();
        let iv = ledger.core_intervals(0).next().unwrap();
        assert_eq!(
            (iv.mode, iv.t_start, iv.t_end),
            (PowerMode::Idle, SimTime::ZERO, secs(1.0))
        );
        assert_eq!(iv.watts(), 0.5);
        assert_eq!(iv.energy_nj(), 500_000_000);
        assert_eq!(p.state(0).current_task.as_deref(), Some("t"));
    }

    #[test]
    fn off_intervals_cost_nothing() {
        let mut p = make_platform(PlatformConfig::default(), PowerMode::Off).unwrap();
        p.advance_clock(secs(37.5));
        let ledger = p.ledger();
        assert_eq!(ledger.intervals.len(), 4);
        assert_eq!(ledger.total_energy_nj(EnergyScope::All), 0);
        ledger.check_tiling().unwrap();
    }

    #[test]
    fn time_regression_is_rejected() {
        let mut p = make_platform(PlatformConfig::default(), PowerMode::Idle).unwrap();
        p.set_mode(2, PowerMode::Busy, Some("t"), secs(2.0))
            .unwrap();
        let e = p.set_mode(2, PowerMode::Idle, None, secs(1.0)).unwrap_err();
        assert!(matches!(e, PlatformError::TimeRegression { core: 2, .. }));
        assert_eq!(
            p.set_mode(0, PowerMode::Busy, None, secs(3.0)).unwrap_err(),
            PlatformError::BusyWithoutTask(0)
        );
    }

    #[test]
    fn total_energy_scopes() {
        let empty = EnergyLedger::default();
        assert_eq!(empty.total_energy(EnergyScope::All), 0.0);

        let mut p = make_platform(PlatformConfig::default(), PowerMode::Off).unwrap();
        p.set_mode(3, PowerMode::Busy, Some("t"), SimTime::ZERO)
            .unwrap();
        p.set_mode(3, PowerMode::Off, None, secs(0.5)).unwrap();
        p.set_mode(1, PowerMode::Idle, None, secs(0.1)).unwrap();
        let ledger = p.ledger();
        assert_eq!(ledger.total_energy(EnergyScope::Core(3)), 6.0);
        let per_core: u64 = (0..4)
            .map(|c| ledger.total_energy_nj(EnergyScope::Core(c)))
            .sum();
        assert_eq!(per_core, ledger.total_energy_nj(EnergyScope::All));
        ledger.check_tiling().unwrap();
    }

    #[test]
    fn ledger_json_round_trips() {
        let mut p = make_platform(PlatformConfig::default(), PowerMode::Off).unwrap();
        p.set_mode(0, PowerMode::Idle, None, secs(0.25)).unwrap();
        p.set_mode(0, PowerMode::Busy, Some("x"), secs(0.255))
            .unwrap();
        p.set_mode(0, PowerMode::Off, None, secs(1.255)).unwrap();
        let ledger = p.ledger();
        assert_eq!(EnergyLedger::from_json(&ledger.to_json()).unwrap(), ledger);
    }

    #[test]
    fn config_json_round_trips_and_rejects_unknown_fields() {
        let config = PlatformConfig::default();
        assert_eq!(
            PlatformConfig::from_json(&config.to_json()).unwrap(),
            config
        );
        let bad = r#"{"cores": [], "cache_bandwidth": 1, "switch_fixed_cost": 0, "extra": 1}"#;
        assert!(PlatformConfig::from_json(bad).is_err());
    }

    #[test]
    fn shipped_default_file_matches_builtin_default() {
        let text = include_str!("../platform.default.json");
        assert_eq!(
            PlatformConfig::from_json(text).unwrap(),
            PlatformConfig::default()
        );
    }
}
