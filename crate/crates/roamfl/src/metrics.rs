//! Per-round metrics rows and the per-run summary, with their CSV forms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    pub device_id: String,
    pub edge_id: String,
    pub device_train_time_s: f64,
    pub edge_train_time_s: f64,
    pub comm_bytes_up: u64,
    pub comm_bytes_down: u64,
    pub loss: f32,
    /// Empty unless the device moved just before this round.
    pub migration_overhead_s: Option<f64>,
    pub epochs: u32,
    pub cumulative_device_rounds: u64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub backend: String,
    pub rounds: u32,
    pub final_test_accuracy: f64,
    pub total_device_rounds: u64,
    pub moves: u32,
    pub moved_rounds: u64,
    pub mover_device_rounds: u64,
    pub fedfly_device_rounds: u64,
    pub restart_device_rounds: u64,
    pub reduction_vs_restart: f64,
    pub mover_device_time_s: f64,
    pub migration_overhead_max_s: f64,
    pub migration_overhead_mean_s: f64,
    pub overhead_entries: u32,
}

/// Moves of one device, as rounds after which it moved.
pub type MovePlan = BTreeMap<String, Vec<u32>>;

impl Summary {
    pub fn from_rows(
        mode: &str,
        backend: &str,
        rounds: u32,
        rows: &[MetricsRow],
        moves: &MovePlan,
    ) -> Self {
        let mut last_cumulative: BTreeMap<&str, u64> = BTreeMap::new();
        for r in rows {
            let c = last_cumulative.entry(&r.device_id).or_default();
            *c = (*c).max(r.cumulative_device_rounds);
        }
        let movers: Vec<&String> = moves
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(d, _)| d)
            .collect();
        let moved_rounds: u64 = moves.values().flatten().map(|&r| u64::from(r)).sum();
        let fedfly = u64::from(rounds) * movers.len() as u64;
        let restart = fedfly + moved_rounds;
        let overheads: Vec<f64> = rows.iter().filter_map(|r| r.migration_overhead_s).collect();
        Self {
            mode: mode.into(),
            backend: backend.into(),
            rounds,
            final_test_accuracy: rows.last().map_or(0.0, |r| r.test_accuracy),
            total_device_rounds: last_cumulative.values().sum(),
            moves: moves.values().map(Vec::len).sum::<usize>() as u32,
            moved_rounds,
            mover_device_rounds: movers
                .iter()
                .map(|d| last_cumulative.get(d.as_str()).copied().unwrap_or(0))
                .sum(),
            fedfly_device_rounds: fedfly,
            restart_device_rounds: restart,
            reduction_vs_restart: if restart == 0 {
                0.0
            } else {
                1.0 - fedfly as f64 / restart as f64
            },
            mover_device_time_s: rows
                .iter()
                .filter(|r| movers.contains(&&r.device_id))
                .map(|r| r.device_train_time_s)
                .sum(),
            migration_overhead_max_s: overheads.iter().copied().fold(0.0, f64::max),
            migration_overhead_mean_s: if overheads.is_empty() {
                0.0
            } else {
                overheads.iter().sum::<f64>() / overheads.len() as f64
            },
            overhead_entries: overheads.len() as u32,
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, records: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}
