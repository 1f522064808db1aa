use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use roamfl_core::nn::{init_params, Batch, LayerParams, ParamSet, Tensor};
use roamfl_core::protocol::{LocalUpdate, Message, RoleKind};

use super::{CentralReport, Event, Outbox, Role, RoleError, RoleReport, TrainSpec};
use crate::metrics::MetricsRow;

/// Sample-weighted average of full-model parameter sets.
///
/// Sums in f64 in the given order, then rounds once to f32, so the result
/// depends only on the inputs and their order.
pub fn fedavg_aggregate(updates: &[(&ParamSet, u32)]) -> Result<ParamSet, String> {
    let (first, _) = updates.first().ok_or("no updates to aggregate")?;
    let total: u64 = updates.iter().map(|(_, n)| u64::from(*n)).sum();
    if total == 0 {
        return Err("updates carry no samples".into());
    }
    if let Some((p, _)) = updates.iter().find(|(p, _)| !p.same_layout(first)) {
        return Err(format!(
            "parameter layouts differ ({} vs {} layers)",
            p.len(),
            first.len()
        ));
    }
    let weights: Vec<f64> = updates
        .iter()
        .map(|(_, n)| f64::from(*n) / total as f64)
        .collect();
    let average = |pick: &dyn Fn(&LayerParams) -> &Tensor, key: usize| -> Tensor {
        let shape = pick(first.get(key).expect("same layout")).shape().to_vec();
        let mut acc = vec![0f64; pick(first.get(key).expect("same layout")).len()];
        for ((p, _), w) in updates.iter().zip(&weights) {
            for (a, v) in acc
                .iter_mut()
                .zip(pick(p.get(key).expect("same layout")).data())
            {
                *a += w * f64::from(*v);
            }
        }
        Tensor::new(shape, acc.into_iter().map(|v| v as f32).collect()).expect("shape kept")
    };
    let mut out = ParamSet::new();
    for key in first.keys() {
        let weight = average(&|l| &l.weight, key);
        let bias = average(&|l| &l.bias, key);
        out.insert(key, LayerParams { weight, bias });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CentralConfig {
    pub id: String,
    pub train: TrainSpec,
    pub edges: BTreeSet<String>,
    pub devices: BTreeSet<String>,
    pub init_seed: u64,
    pub barrier_timeout: Option<Duration>,
}

struct Pending {
    edge: String,
    update: LocalUpdate,
}

pub struct Central {
    cfg: CentralConfig,
    test: Vec<Batch>,
    registered: BTreeSet<String>,
    params: ParamSet,
    /// Aggregations done so far.
    round: u32,
    pending: BTreeMap<String, Pending>,
    deadline: Option<Instant>,
    finished: bool,
    report: CentralReport,
}

impl Central {
    pub fn new(cfg: CentralConfig, test: Vec<Batch>) -> Self {
        let params = init_params(&cfg.train.model, cfg.init_seed);
        Self {
            cfg,
            test,
            registered: BTreeSet::new(),
            params,
            round: 0,
            pending: BTreeMap::new(),
            deadline: None,
            finished: false,
            report: CentralReport::default(),
        }
    }

    fn err(&self, detail: impl Into<String>) -> RoleError {
        RoleError::protocol(&self.cfg.id, detail)
    }

    fn broadcast(&mut self, out: &mut Outbox) {
        for e in &self.cfg.edges {
            out.send(
                e,
                Message::GlobalParams {
                    round: self.round,
                    params: self.params.clone(),
                },
            );
        }
        self.deadline = self.cfg.barrier_timeout.map(|t| Instant::now() + t);
    }

    fn on_update(
        &mut self,
        from: String,
        update: LocalUpdate,
        out: &mut Outbox,
    ) -> Result<(), RoleError> {
        if !self.cfg.edges.contains(&from) {
            return Err(self.err(format!("update from non-edge peer {from}")));
        }
        if update.replay {
            return Err(self.err(format!(
                "replay update for {} reached the aggregator",
                update.device_id
            )));
        }
        if !self.cfg.devices.contains(&update.device_id) {
            return Err(self.err(format!("update from unknown device {}", update.device_id)));
        }
        if update.round != self.round + 1 {
            return Err(self.err(format!(
                "{} sent round {} while round {} is open",
                update.device_id,
                update.round,
                self.round + 1
            )));
        }
        if self.pending.contains_key(&update.device_id) {
            return Err(self.err(format!(
                "duplicate update from {} for round {}",
                update.device_id, update.round
            )));
        }
        update
            .params
            .validate(self.cfg.train.model.stack())
            .map_err(|e| self.err(e.to_string()))?;
        self.pending
            .insert(update.device_id.clone(), Pending { edge: from, update });
        if self.pending.len() == self.cfg.devices.len() {
            self.aggregate(out)?;
        }
        Ok(())
    }

    fn aggregate(&mut self, out: &mut Outbox) -> Result<(), RoleError> {
        let pending = std::mem::take(&mut self.pending);
        let inputs: Vec<(&ParamSet, u32)> = pending
            .values()
            .map(|p| (&p.update.params, p.update.sample_count))
            .collect();
        self.params = fedavg_aggregate(&inputs).map_err(|e| self.err(e))?;
        self.round += 1;
        let accuracy = self
            .cfg
            .train
            .model
            .accuracy(&self.params, &self.test)
            .map_err(|e| RoleError::runtime(&self.cfg.id, e.to_string()))?;
        self.report.accuracy.push(accuracy);
        for p in pending.into_values() {
            let s = p.update.stats;
            self.report.rows.push(MetricsRow {
                round: self.round,
                device_id: p.update.device_id,
                edge_id: p.edge,
                device_train_time_s: s.device_time_s,
                edge_train_time_s: s.edge_time_s,
                comm_bytes_up: s.bytes_up,
                comm_bytes_down: s.bytes_down,
                loss: s.loss,
                migration_overhead_s: s.migration_overhead_s,
                epochs: s.epochs,
                cumulative_device_rounds: s.cumulative_device_rounds,
                test_accuracy: accuracy,
            });
        }
        log::info!(
            "round {}/{}: test accuracy {:.4}",
            self.round,
            self.cfg.train.rounds,
            accuracy
        );
        for e in &self.cfg.edges {
            out.send(
                e,
                Message::RoundComplete {
                    round: self.round,
                    test_accuracy: accuracy,
                },
            );
        }
        if self.round == self.cfg.train.rounds {
            self.report.final_params = Some(self.params.clone());
            for e in &self.cfg.edges {
                out.send(e, Message::Shutdown);
            }
            self.deadline = None;
            self.finished = true;
            out.finish();
        } else {
            self.broadcast(out);
        }
        Ok(())
    }
}

impl Role for Central {
    fn id(&self) -> &str {
        &self.cfg.id
    }

    fn kind(&self) -> RoleKind {
        RoleKind::Central
    }

    fn handle(&mut self, event: Event, out: &mut Outbox) -> Result<(), RoleError> {
        match event {
            Event::Start => Ok(()),
            Event::Message {
                from,
                msg: Message::Register(r),
            } => {
                if r.role != RoleKind::Edge || !self.cfg.edges.contains(&r.id) {
                    return Err(self.err(format!(
                        "unexpected registration from {} ({:?})",
                        r.id, r.role
                    )));
                }
                if !self.registered.insert(r.id) {
                    return Err(self.err(format!("{from} registered twice")));
                }
                if self.registered.len() == self.cfg.edges.len() {
                    self.broadcast(out);
                }
                Ok(())
            }
            Event::Message {
                from,
                msg: Message::LocalUpdate(u),
            } => self.on_update(from, u, out),
            Event::Message { from, msg } => {
                Err(self.err(format!("unexpected {} from {from}", msg.tag())))
            }
            Event::Disconnected { peer } if !self.finished => {
                Err(self.err(format!("edge {peer} disconnected")))
            }
            Event::Disconnected { .. } => Ok(()),
            Event::ConnectFailed { peer, error } => {
                Err(RoleError::runtime(&self.cfg.id, format!("{peer}: {error}")))
            }
            Event::Timeout => match self.deadline {
                Some(d) if Instant::now() >= d => {
                    let missing: Vec<&String> = self
                        .cfg
                        .devices
                        .iter()
                        .filter(|d| !self.pending.contains_key(*d))
                        .collect();
                    Err(RoleError::Timeout {
                        role: self.cfg.id.clone(),
                        detail: format!(
                            "round {} barrier still waiting for {missing:?}",
                            self.round + 1
                        ),
                    })
                }
                _ => Ok(()),
            },
        }
    }

    fn poll_timeout(&self) -> Option<Instant> {
        self.deadline
    }

    fn report(&self) -> RoleReport {
        RoleReport::Central(self.report.clone())
    }
}
