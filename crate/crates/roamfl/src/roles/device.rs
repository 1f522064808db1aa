use std::sync::Arc;
use std::time::{Duration, Instant};

use roamfl_core::nn::{Batch, OptimizerState, ParamSet};
use roamfl_core::protocol::{
    Attach, Checkpoint, Codec, LocalUpdate, Message, NotifyMove, Register, ResumeAck, RoleKind,
    RoundStats, TransferKind, FORMAT_VERSION,
};
use roamfl_core::split::{
    device_backward, device_forward, split_stacks, ModelPart, Retained, SmashedGrad,
};

use super::{
    Context, Departure, DeviceReport, Event, MobilityStrategy, Outbox, Redial, Role, RoleError,
    RoleReport, TrainSpec,
};
use crate::transport::MoveEvent;

#[derive(Clone)]
pub struct DeviceConfig {
    pub id: String,
    /// Edge the device starts on.
    pub edge: String,
    pub train: TrainSpec,
    /// Extra time spent per batch, standing in for a slower processor.
    pub compute_delay: Duration,
    pub moves: Vec<MoveEvent>,
    pub strategy: Arc<dyn MobilityStrategy>,
    pub transfer: TransferKind,
    pub codec: Codec,
}

enum Phase {
    Connecting,
    /// Waiting for the next global model.
    Idle,
    Training {
        replay: bool,
        batch: usize,
        retained: Retained,
        losses: Vec<f32>,
    },
    Migrating(Migration),
    Done,
}

struct Migration {
    source: String,
    dest: String,
    departure: Departure,
    started: Instant,
    /// Relay: the checkpoint the device carries, kept until the new edge accepts it.
    carried: Option<Box<Checkpoint>>,
}

#[derive(Default)]
struct RoundAcc {
    device_time_s: f64,
    bytes_up: u64,
    bytes_down: u64,
    epochs: u32,
    overhead_s: Option<f64>,
}

pub struct Device {
    cfg: DeviceConfig,
    batches: Vec<Batch>,
    shard_size: u32,
    edge: String,
    part: ModelPart,
    opt: Option<OptimizerState>,
    completed: u32,
    replay_left: u32,
    reset_on_params: bool,
    last_move: Option<u32>,
    /// Set on a restart-style move; overhead ends at the first model from the new edge.
    restart_started: Option<Instant>,
    phase: Phase,
    redial: Redial,
    acc: RoundAcc,
    cumulative: u64,
    report: DeviceReport,
}

impl Device {
    pub fn new(cfg: DeviceConfig, batches: Vec<Batch>) -> Result<Self, RoleError> {
        if batches.is_empty() {
            return Err(RoleError::runtime(&cfg.id, "empty shard"));
        }
        let shard_size = batches.iter().map(Batch::len).sum::<usize>() as u32;
        let (stack, _) = split_stacks(&cfg.train.model, cfg.train.split).ctx(&cfg.id)?;
        Ok(Self {
            edge: cfg.edge.clone(),
            cfg,
            batches,
            shard_size,
            part: ModelPart {
                stack,
                params: ParamSet::new(),
            },
            opt: None,
            completed: 0,
            replay_left: 0,
            reset_on_params: false,
            last_move: None,
            restart_started: None,
            phase: Phase::Connecting,
            redial: Redial::default(),
            acc: RoundAcc::default(),
            cumulative: 0,
            report: DeviceReport::default(),
        })
    }

    fn err(&self, detail: impl Into<String>) -> RoleError {
        RoleError::protocol(&self.cfg.id, detail)
    }

    fn send(&mut self, out: &mut Outbox, peer: &str, msg: Message) -> Result<(), RoleError> {
        self.acc.bytes_up += self.frame_len(&msg)?;
        out.send(peer, msg);
        Ok(())
    }

    fn register(&self, attach: Attach, replay_rounds: u32) -> Message {
        Message::Register(Register {
            version: FORMAT_VERSION,
            role: RoleKind::Device,
            id: self.cfg.id.clone(),
            attach,
            completed_rounds: self.completed,
            replay_rounds,
            shard_size: self.shard_size,
        })
    }

    fn connect(
        &mut self,
        out: &mut Outbox,
        peer: &str,
        attach: Attach,
        replay_rounds: u32,
    ) -> Result<(), RoleError> {
        let hello = self.register(attach, replay_rounds);
        self.acc.bytes_up += self.frame_len(&hello)?;
        out.connect(peer, hello);
        Ok(())
    }

    fn frame_len(&self, msg: &Message) -> Result<u64, RoleError> {
        self.cfg
            .codec
            .frame_len(msg)
            .map(|n| n as u64)
            .map_err(|e| RoleError::runtime(&self.cfg.id, e.to_string()))
    }

    fn send_batch(
        &mut self,
        out: &mut Outbox,
        replay: bool,
        batch: usize,
        losses: Vec<f32>,
    ) -> Result<(), RoleError> {
        let start = Instant::now();
        let (smashed, retained) =
            device_forward(&self.part, &self.batches[batch], batch as u64).ctx(&self.cfg.id)?;
        if !self.cfg.compute_delay.is_zero() {
            std::thread::sleep(self.cfg.compute_delay);
        }
        self.acc.device_time_s += start.elapsed().as_secs_f64();
        let edge = self.edge.clone();
        self.send(out, &edge, Message::SmashedData(smashed))?;
        self.phase = Phase::Training {
            replay,
            batch,
            retained,
            losses,
        };
        Ok(())
    }

    fn on_params(
        &mut self,
        round: u32,
        params: ParamSet,
        out: &mut Outbox,
    ) -> Result<(), RoleError> {
        if !matches!(self.phase, Phase::Idle) {
            return Err(self.err(format!("global model for round {round} arrived mid-round")));
        }
        if round != self.completed {
            return Err(self.err(format!(
                "got the model of round {round} after completing {}",
                self.completed
            )));
        }
        if round >= self.cfg.train.rounds {
            return Err(self.err(format!(
                "got the model of round {round} of {}",
                self.cfg.train.rounds
            )));
        }
        params
            .validate(&self.part.stack)
            .map_err(|e| self.err(e.to_string()))?;
        let t = &self.cfg.train;
        match &mut self.opt {
            None => {
                self.opt = Some(
                    OptimizerState::new(t.learning_rate, t.momentum, &params)
                        .map_err(|e| RoleError::runtime(&self.cfg.id, e.to_string()))?,
                )
            }
            Some(opt) if self.reset_on_params => opt.reset(),
            Some(_) => {}
        }
        self.reset_on_params = false;
        self.part.params = params;
        if let Some(started) = self.restart_started.take() {
            let overhead = started.elapsed().as_secs_f64();
            self.acc.overhead_s = Some(overhead);
            self.report.overheads_s.push(overhead);
        }
        if self.replay_left > 0 {
            return self.send_batch(out, true, 0, Vec::new());
        }
        if self.last_move != Some(round) {
            if let Some(ev) = self
                .cfg
                .moves
                .iter()
                .find(|m| m.after_round == round)
                .cloned()
            {
                return self.depart(ev, out);
            }
        }
        self.send_batch(out, false, 0, Vec::new())
    }

    fn on_grad(&mut self, grad: SmashedGrad, out: &mut Outbox) -> Result<(), RoleError> {
        let Phase::Training {
            replay,
            batch,
            retained,
            mut losses,
        } = std::mem::replace(&mut self.phase, Phase::Idle)
        else {
            return Err(self.err(format!(
                "smashed gradient for batch {} while not training",
                grad.batch_id
            )));
        };
        let start = Instant::now();
        let opt = self.opt.as_mut().expect("optimizer exists once training");
        device_backward(&mut self.part, Some(&retained), &grad, opt).ctx(&self.cfg.id)?;
        self.acc.device_time_s += start.elapsed().as_secs_f64();
        losses.push(grad.loss);
        if batch + 1 < self.batches.len() {
            return self.send_batch(out, replay, batch + 1, losses);
        }
        self.acc.epochs += 1;
        self.cumulative += 1;
        let edge = self.edge.clone();
        if replay {
            self.replay_left -= 1;
            self.reset_on_params = true;
            let update = self.update(true, 0.0);
            return self.send(out, &edge, Message::LocalUpdate(update));
        }
        self.completed += 1;
        let loss = losses.iter().map(|&l| f64::from(l)).sum::<f64>() / losses.len() as f64;
        let mut update = self.update(false, loss as f32);
        // The update frame has a fixed length for a given model, so it can count itself.
        self.acc.bytes_up += self.frame_len(&Message::LocalUpdate(update.clone()))?;
        update.stats.bytes_up = self.acc.bytes_up;
        out.send(&edge, Message::LocalUpdate(update));
        self.report.device_rounds = self.cumulative;
        self.report.edges.push(edge);
        self.acc = RoundAcc::default();
        Ok(())
    }

    fn update(&self, replay: bool, loss: f32) -> LocalUpdate {
        LocalUpdate {
            device_id: self.cfg.id.clone(),
            round: self.completed,
            sample_count: self.shard_size,
            replay,
            params: self.part.params.clone(),
            stats: RoundStats {
                device_time_s: self.acc.device_time_s,
                edge_time_s: 0.0,
                bytes_up: self.acc.bytes_up,
                bytes_down: self.acc.bytes_down,
                loss,
                migration_overhead_s: self.acc.overhead_s,
                epochs: self.acc.epochs,
                cumulative_device_rounds: self.cumulative,
            },
        }
    }

    fn depart(&mut self, ev: MoveEvent, out: &mut Outbox) -> Result<(), RoleError> {
        if ev.source != self.edge {
            return Err(RoleError::runtime(
                &self.cfg.id,
                format!(
                    "scheduled to leave {} but attached to {}",
                    ev.source, self.edge
                ),
            ));
        }
        let departure = self.cfg.strategy.departure(&ev, self.cfg.transfer);
        self.last_move = Some(ev.after_round);
        self.report.moves += 1;
        let started = Instant::now();
        log::debug!(
            "{}: leaving {} for {} after round {}",
            self.cfg.id,
            ev.source,
            ev.dest,
            ev.after_round
        );
        let notify = Message::NotifyMove(NotifyMove {
            device_id: self.cfg.id.clone(),
            after_round: ev.after_round,
            source: ev.source.clone(),
            dest: ev.dest.clone(),
            transfer: departure.transfer,
        });
        self.send(out, &ev.source, notify)?;
        if departure.transfer == TransferKind::Discard {
            if departure.reset_optimizer {
                if let Some(opt) = &mut self.opt {
                    opt.reset();
                }
            }
            out.disconnect(&ev.source);
            self.edge = ev.dest.clone();
            self.replay_left = departure.replay_rounds;
            self.restart_started = Some(started);
            self.phase = Phase::Idle;
            return self.connect(out, &ev.dest, departure.attach, departure.replay_rounds);
        }
        self.phase = Phase::Migrating(Migration {
            source: ev.source,
            dest: ev.dest,
            departure,
            started,
            carried: None,
        });
        Ok(())
    }

    fn record_overhead(&mut self, started: Instant) {
        let overhead = started.elapsed().as_secs_f64();
        self.acc.overhead_s = Some(overhead);
        self.report.overheads_s.push(overhead);
    }

    fn on_ack(&mut self, from: &str, ack: ResumeAck, out: &mut Outbox) -> Result<(), RoleError> {
        let Phase::Migrating(m) = std::mem::replace(&mut self.phase, Phase::Idle) else {
            return Err(self.err(format!("resume ack from {from} while not moving")));
        };
        if from != self.edge {
            return Err(self.err(format!("resume ack from {from}, expected {}", self.edge)));
        }
        if ack.round != self.completed {
            return Err(self.err(format!(
                "resumed at round {} after completing {}",
                ack.round, self.completed
            )));
        }
        match (m.departure.transfer, ack.ok) {
            (TransferKind::Direct, true) => {
                self.record_overhead(m.started);
                out.disconnect(&m.source);
                self.edge = m.dest.clone();
                self.connect(out, &m.dest, Attach::Resume, 0)?;
            }
            (TransferKind::Direct, false) => {
                log::warn!(
                    "{}: move to {} failed ({}); staying on {}",
                    self.cfg.id,
                    m.dest,
                    ack.detail,
                    m.source
                );
            }
            (TransferKind::Relay, true) if from == m.dest => self.record_overhead(m.started),
            (TransferKind::Relay, true) => {
                log::warn!(
                    "{}: move to {} failed; resumed on {}",
                    self.cfg.id,
                    m.dest,
                    m.source
                );
            }
            (TransferKind::Relay, false) => {
                return Err(RoleError::runtime(
                    &self.cfg.id,
                    format!("{from} refused the carried checkpoint: {}", ack.detail),
                ))
            }
            (TransferKind::Discard, _) => {
                return Err(self.err("resume ack after a discarding move"))
            }
        }
        self.send_batch(out, false, 0, Vec::new())
    }

    fn on_carried(
        &mut self,
        from: &str,
        ckpt: Box<Checkpoint>,
        out: &mut Outbox,
    ) -> Result<(), RoleError> {
        let Phase::Migrating(m) = &mut self.phase else {
            return Err(self.err(format!("checkpoint from {from} while not moving")));
        };
        if from != m.source || m.departure.transfer != TransferKind::Relay || m.carried.is_some() {
            return Err(RoleError::protocol(
                &self.cfg.id,
                format!("unexpected checkpoint from {from}"),
            ));
        }
        if ckpt.device_id != self.cfg.id {
            return Err(RoleError::protocol(
                &self.cfg.id,
                format!("handed the checkpoint of {}", ckpt.device_id),
            ));
        }
        let (source, dest) = (m.source.clone(), m.dest.clone());
        m.carried = Some(ckpt.clone());
        self.acc.bytes_down += self.frame_len(&Message::CheckpointTransfer(ckpt.clone()))?;
        out.disconnect(&source);
        self.edge = dest.clone();
        self.connect(out, &dest, Attach::Resume, 0)?;
        self.send(out, &dest, Message::CheckpointTransfer(ckpt))
    }

    fn on_connect_failed(
        &mut self,
        peer: &str,
        error: String,
        out: &mut Outbox,
    ) -> Result<(), RoleError> {
        let fallback = match &mut self.phase {
            Phase::Migrating(m) if m.dest == peer && m.carried.is_some() => {
                // Hand the state back to the edge it came from.
                m.carried.take().map(|c| (m.source.clone(), c))
            }
            _ => None,
        };
        let Some((source, ckpt)) = fallback else {
            if matches!(self.phase, Phase::Idle)
                && peer == self.edge
                && self.opt.is_none()
                && self.redial.schedule()
            {
                log::debug!("{}: {peer} not up yet ({error})", self.cfg.id);
                return Ok(());
            }
            return Err(RoleError::runtime(
                &self.cfg.id,
                format!("cannot reach {peer}: {error}"),
            ));
        };
        log::warn!(
            "{}: cannot reach {peer} ({error}); returning to {source}",
            self.cfg.id
        );
        self.edge = source.clone();
        self.connect(out, &source, Attach::Resume, 0)?;
        self.send(out, &source, Message::CheckpointTransfer(ckpt))
    }
}

impl Role for Device {
    fn id(&self) -> &str {
        &self.cfg.id
    }

    fn kind(&self) -> RoleKind {
        RoleKind::Device
    }

    fn handle(&mut self, event: Event, out: &mut Outbox) -> Result<(), RoleError> {
        match event {
            Event::Start => {
                let edge = self.edge.clone();
                self.phase = Phase::Idle;
                self.connect(out, &edge, Attach::Fresh, 0)
            }
            Event::Message { from, msg } => {
                if matches!(self.phase, Phase::Done) {
                    return Ok(());
                }
                self.redial.stop();
                if !matches!(msg, Message::CheckpointTransfer(_)) {
                    self.acc.bytes_down += self.frame_len(&msg)?;
                }
                match msg {
                    Message::GlobalParams { round, params } if from == self.edge => {
                        self.on_params(round, params, out)
                    }
                    Message::SmashedGrad(g) if from == self.edge => self.on_grad(g, out),
                    Message::ResumeAck(a) => self.on_ack(&from, a, out),
                    Message::CheckpointTransfer(c) => self.on_carried(&from, c, out),
                    Message::Shutdown => {
                        if !matches!(self.phase, Phase::Idle) {
                            return Err(self.err("shut down in the middle of a round"));
                        }
                        self.phase = Phase::Done;
                        out.finish();
                        Ok(())
                    }
                    other => Err(self.err(format!("unexpected {} from {from}", other.tag()))),
                }
            }
            Event::Disconnected { peer } => {
                if peer == self.edge && !matches!(self.phase, Phase::Done) {
                    return Err(RoleError::runtime(
                        &self.cfg.id,
                        format!("edge {peer} went away"),
                    ));
                }
                Ok(())
            }
            Event::ConnectFailed { peer, error } => self.on_connect_failed(&peer, error, out),
            Event::Timeout => {
                if self.redial.due() {
                    // The first hello was already counted.
                    let edge = self.edge.clone();
                    out.connect(&edge, self.register(Attach::Fresh, 0));
                }
                Ok(())
            }
        }
    }

    fn poll_timeout(&self) -> Option<Instant> {
        self.redial.deadline()
    }

    fn report(&self) -> RoleReport {
        RoleReport::Device(self.report.clone())
    }
}
