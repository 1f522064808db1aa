use std::collections::{BTreeMap, BTreeSet};

/// Device `device` leaves `source` for `dest` once round `after_round` is aggregated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MoveEvent {
    pub device: String,
    pub after_round: u32,
    pub source: String,
    pub dest: String,
}

/// Validated list of moves for one run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MobilitySchedule {
    moves: BTreeMap<String, Vec<MoveEvent>>,
}

impl MobilitySchedule {
    /// `placement` maps each device to the edge it starts on.
    pub fn new(
        events: Vec<MoveEvent>,
        rounds: u32,
        placement: &BTreeMap<String, String>,
        edges: &BTreeSet<String>,
    ) -> Result<Self, String> {
        let mut moves: BTreeMap<String, Vec<MoveEvent>> = BTreeMap::new();
        for ev in events {
            let at = format!("move of {} after round {}", ev.device, ev.after_round);
            if !placement.contains_key(&ev.device) {
                return Err(format!("{at}: unknown device"));
            }
            for e in [&ev.source, &ev.dest] {
                if !edges.contains(e) {
                    return Err(format!("{at}: unknown edge '{e}'"));
                }
            }
            if ev.after_round == 0 || ev.after_round >= rounds {
                return Err(format!("{at}: round must be in 1..{rounds}"));
            }
            if ev.source == ev.dest {
                return Err(format!(
                    "{at}: source and destination are both '{}'",
                    ev.source
                ));
            }
            moves.entry(ev.device.clone()).or_default().push(ev);
        }
        for (device, list) in &mut moves {
            list.sort_by_key(|m| m.after_round);
            let mut at_edge = &placement[device];
            let mut last = None;
            for m in list.iter() {
                if last == Some(m.after_round) {
                    return Err(format!("{device}: two moves after round {}", m.after_round));
                }
                if &m.source != at_edge {
                    return Err(format!(
                        "move of {device} after round {}: device is on '{at_edge}', not '{}'",
                        m.after_round, m.source
                    ));
                }
                at_edge = &m.dest;
                last = Some(m.after_round);
            }
        }
        Ok(Self { moves })
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }

    pub fn len(&self) -> usize {
        self.moves.values().map(Vec::len).sum()
    }

    /// Moves of one device in round order.
    pub fn for_device(&self, device: &str) -> &[MoveEvent] {
        self.moves.get(device).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn events(&self) -> impl Iterator<Item = &MoveEvent> {
        self.moves.values().flatten()
    }

    pub fn move_after(&self, device: &str, round: u32) -> Option<&MoveEvent> {
        self.for_device(device)
            .iter()
            .find(|m| m.after_round == round)
    }

    /// Edge that serves `device` while it trains round `round` (1-based).
    pub fn edge_for_round<'a>(&'a self, device: &str, start: &'a str, round: u32) -> &'a str {
        self.for_device(device)
            .iter()
            .take_while(|m| m.after_round < round)
            .last()
            .map_or(start, |m| &m.dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(d: &str, r: u32, s: &str, t: &str) -> MoveEvent {
        MoveEvent {
            device: d.into(),
            after_round: r,
            source: s.into(),
            dest: t.into(),
        }
    }

    fn setup() -> (BTreeMap<String, String>, BTreeSet<String>) {
        let placement = [("d1", "e1"), ("d2", "e2")]
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .into();
        let edges = ["e1", "e2", "e3"].map(String::from).into();
        (placement, edges)
    }

    #[test]
    fn chains_sort_and_locate() {
        let (p, e) = setup();
        let s = MobilitySchedule::new(
            vec![mv("d1", 8, "e2", "e3"), mv("d1", 3, "e1", "e2")],
            10,
            &p,
            &e,
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.for_device("d1")[0].after_round, 3);
        assert_eq!(s.edge_for_round("d1", "e1", 3), "e1");
        assert_eq!(s.edge_for_round("d1", "e1", 4), "e2");
        assert_eq!(s.edge_for_round("d1", "e1", 9), "e3");
        assert_eq!(s.edge_for_round("d2", "e2", 9), "e2");
        assert!(s.move_after("d1", 8).is_some());
        assert!(s.move_after("d1", 7).is_none());
    }

    #[test]
    fn rejects_bad_moves() {
        let (p, e) = setup();
        let bad = [
            vec![mv("d9", 3, "e1", "e2")],
            vec![mv("d1", 3, "e1", "e7")],
            vec![mv("d1", 10, "e1", "e2")],
            vec![mv("d1", 0, "e1", "e2")],
            vec![mv("d1", 3, "e1", "e1")],
            vec![mv("d1", 3, "e2", "e1")],
            vec![mv("d1", 3, "e1", "e2"), mv("d1", 3, "e2", "e3")],
            vec![mv("d1", 3, "e1", "e2"), mv("d1", 5, "e1", "e3")],
        ];
        for events in bad {
            assert!(
                MobilitySchedule::new(events.clone(), 10, &p, &e).is_err(),
                "{events:?}"
            );
        }
    }
}
