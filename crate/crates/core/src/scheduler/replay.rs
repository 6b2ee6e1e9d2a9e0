use super::{EventKind, ScheduleTrace};
use crate::platform::{make_platform, EnergyLedger, PlatformConfig, PlatformError, PowerMode};
use crate::time::SimTime;

/// Rebuilds an energy ledger from a trace alone.
///
/// Every core starts in `initial_mode` at t = 0 and follows the power and
/// busy transitions recorded in the trace up to `horizon`.
pub fn replay_ledger(
    trace: &ScheduleTrace,
    config: &PlatformConfig,
    initial_mode: PowerMode,
    horizon: SimTime,
) -> Result<EnergyLedger, PlatformError> {
    let mut platform = make_platform(config.clone(), initial_mode)?;
    let mut events: Vec<_> = trace.events.iter().collect();
    events.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    for e in events {
        let Some(core) = e.core else { continue };
        if e.time > horizon {
            break;
        }
        match e.kind {
            EventKind::PowerOn => platform.set_mode(core, PowerMode::Idle, None, e.time)?,
            EventKind::PowerOff => platform.set_mode(core, PowerMode::Off, None, e.time)?,
            EventKind::Start | EventKind::ThreadStart => {
                platform.set_mode(core, PowerMode::Busy, Some(&e.task_id), e.time)?
            }
            EventKind::End | EventKind::ThreadEnd | EventKind::Switch => {
                platform.set_mode(core, PowerMode::Idle, None, e.time)?
            }
            EventKind::Submit | EventKind::Combine => {}
        }
    }
    platform.ledger_at(horizon)
}
