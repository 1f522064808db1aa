use std::sync::Arc;

use roamfl_core::protocol::{Attach, TransferKind};

use crate::registry::Registry;
use crate::transport::MoveEvent;

/// What a device does with its server-side state when it changes edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Departure {
    pub transfer: TransferKind,
    pub attach: Attach,
    /// Epochs redone at the destination before training continues.
    pub replay_rounds: u32,
    pub reset_optimizer: bool,
}

pub trait MobilityStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    /// `transfer` is the configured checkpoint path for strategies that move state.
    fn departure(&self, event: &MoveEvent, transfer: TransferKind) -> Departure;
    /// Training rounds a device performs over `rounds` with moves after the given rounds.
    fn device_rounds(&self, rounds: u32, moves_after: &[u32]) -> u64;
}

/// Server-side state travels with the device; training resumes where it stopped.
pub struct FedFly;

impl MobilityStrategy for FedFly {
    fn name(&self) -> &'static str {
        "fedfly"
    }

    fn departure(&self, _event: &MoveEvent, transfer: TransferKind) -> Departure {
        let transfer = if transfer == TransferKind::Discard {
            TransferKind::Direct
        } else {
            transfer
        };
        Departure {
            transfer,
            attach: Attach::Resume,
            replay_rounds: 0,
            reset_optimizer: false,
        }
    }

    fn device_rounds(&self, rounds: u32, _moves_after: &[u32]) -> u64 {
        u64::from(rounds)
    }
}

/// State is dropped; the device redoes the rounds it had trained before the move.
pub struct Restart;

impl MobilityStrategy for Restart {
    fn name(&self) -> &'static str {
        "restart"
    }

    fn departure(&self, event: &MoveEvent, _transfer: TransferKind) -> Departure {
        Departure {
            transfer: TransferKind::Discard,
            attach: Attach::Fresh,
            replay_rounds: event.after_round,
            reset_optimizer: true,
        }
    }

    fn device_rounds(&self, rounds: u32, moves_after: &[u32]) -> u64 {
        u64::from(rounds) + moves_after.iter().map(|&r| u64::from(r)).sum::<u64>()
    }
}

pub fn strategies() -> Registry<dyn MobilityStrategy> {
    let mut r: Registry<dyn MobilityStrategy> = Registry::new("mode");
    r.register("fedfly", Arc::new(FedFly));
    r.register("restart", Arc::new(Restart));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn device_round_counts() {
        let r = strategies();
        assert_eq!(r.get("fedfly").unwrap().device_rounds(100, &[50]), 100);
        assert_eq!(r.get("restart").unwrap().device_rounds(100, &[50]), 150);
        assert_eq!(r.get("restart").unwrap().device_rounds(100, &[50, 90]), 240);
        assert!(r.get("teleport").is_err());
    }

    #[test]
    fn departures() {
        let ev = MoveEvent {
            device: "d1".into(),
            after_round: 7,
            source: "e1".into(),
            dest: "e2".into(),
        };
        let f = FedFly.departure(&ev, TransferKind::Relay);
        assert_eq!(
            (f.transfer, f.attach, f.replay_rounds),
            (TransferKind::Relay, Attach::Resume, 0)
        );
        let r = Restart.departure(&ev, TransferKind::Direct);
        assert_eq!(
            (r.transfer, r.attach, r.replay_rounds, r.reset_optimizer),
            (TransferKind::Discard, Attach::Fresh, 7, true)
        );
    }
}
