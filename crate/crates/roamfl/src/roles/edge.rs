use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use roamfl_core::nn::{OptimizerState, ParamSet};
use roamfl_core::protocol::{
    Attach, Checkpoint, LocalUpdate, Message, NotifyMove, Register, ResumeAck, RoleKind,
    TransferKind, FORMAT_VERSION,
};
use roamfl_core::session::ServerSession;
use roamfl_core::split::{assemble_full_params, split_params, SmashedData};

use super::{
    hello, Context, EdgeReport, Event, Outbox, Redial, Role, RoleError, RoleReport, TrainSpec,
};

#[derive(Debug, Clone)]
pub struct EdgeConfig {
    pub id: String,
    pub central: String,
    pub train: TrainSpec,
    /// Where outgoing checkpoints are also written as `<device>_r<round>.ffck`.
    pub checkpoint_dir: Option<PathBuf>,
}

struct Global {
    round: u32,
    device: ParamSet,
    server: ParamSet,
}

pub struct Edge {
    cfg: EdgeConfig,
    global: Option<Global>,
    /// Sessions of connected devices.
    sessions: BTreeMap<String, ServerSession>,
    /// Restored from a checkpoint; waiting for the device to attach.
    detached: BTreeMap<String, ServerSession>,
    /// Devices that attached before their checkpoint arrived.
    awaiting: BTreeSet<String>,
    /// Fresh registrations waiting for the global model they asked for.
    pending: BTreeMap<String, Register>,
    /// Checkpoints sent to another edge and not yet acknowledged.
    migrating_out: BTreeMap<String, (String, ServerSession)>,
    devices: BTreeSet<String>,
    edges: BTreeSet<String>,
    edge_time: BTreeMap<String, f64>,
    shutting_down: bool,
    redial: Redial,
    report: EdgeReport,
}

impl Edge {
    pub fn new(cfg: EdgeConfig) -> Self {
        Self {
            cfg,
            global: None,
            sessions: BTreeMap::new(),
            detached: BTreeMap::new(),
            awaiting: BTreeSet::new(),
            pending: BTreeMap::new(),
            migrating_out: BTreeMap::new(),
            devices: BTreeSet::new(),
            edges: BTreeSet::new(),
            edge_time: BTreeMap::new(),
            shutting_down: false,
            redial: Redial::default(),
            report: EdgeReport::default(),
        }
    }

    fn id(&self) -> &str {
        &self.cfg.id
    }

    fn err(&self, detail: impl Into<String>) -> RoleError {
        RoleError::protocol(&self.cfg.id, detail)
    }

    fn session(&mut self, device: &str) -> Result<&mut ServerSession, RoleError> {
        let id = self.cfg.id.clone();
        self.sessions
            .get_mut(device)
            .ok_or_else(|| RoleError::protocol(&id, format!("no session for {device}")))
    }

    fn global(&self) -> Result<&Global, RoleError> {
        self.global
            .as_ref()
            .ok_or_else(|| self.err("no global model yet"))
    }

    fn on_register(&mut self, from: &str, r: Register, out: &mut Outbox) -> Result<(), RoleError> {
        if r.version != FORMAT_VERSION {
            return Err(self.err(format!(
                "{from} speaks format {} (expected {FORMAT_VERSION})",
                r.version
            )));
        }
        match r.role {
            RoleKind::Edge => {
                self.edges.insert(r.id);
                Ok(())
            }
            RoleKind::Central => Err(self.err("central server connected to an edge")),
            RoleKind::Device => {
                if self.sessions.contains_key(&r.id) {
                    return Err(self.err(format!(
                        "{} registered while it has an active session",
                        r.id
                    )));
                }
                self.devices.insert(r.id.clone());
                match r.attach {
                    Attach::Fresh => {
                        if r.shard_size == 0 {
                            return Err(self.err(format!("{} has an empty shard", r.id)));
                        }
                        self.pending.insert(r.id.clone(), r);
                        self.activate_pending(out)
                    }
                    Attach::Resume => {
                        match self.detached.remove(&r.id) {
                            Some(s) => {
                                self.sessions.insert(r.id, s);
                            }
                            None => {
                                self.awaiting.insert(r.id);
                            }
                        }
                        Ok(())
                    }
                }
            }
        }
    }

    /// Starts sessions for fresh registrations that the current global model serves.
    fn activate_pending(&mut self, out: &mut Outbox) -> Result<(), RoleError> {
        let Some(g) = &self.global else { return Ok(()) };
        let ready: Vec<String> = self
            .pending
            .iter()
            .filter(|(_, r)| r.completed_rounds <= g.round)
            .map(|(d, _)| d.clone())
            .collect();
        for device in ready {
            let r = self.pending.remove(&device).expect("listed above");
            if r.completed_rounds < g.round {
                return Err(self.err(format!(
                    "{device} wants the model of round {} but round {} is current",
                    r.completed_rounds, g.round
                )));
            }
            let t = &self.cfg.train;
            let opt = OptimizerState::new(t.learning_rate, t.momentum, &g.server)
                .map_err(|e| RoleError::runtime(&self.cfg.id, e.to_string()))?;
            let bpe = (r.shard_size as usize).div_ceil(t.batch_size) as u32;
            let session = ServerSession::new(
                &device,
                &t.model,
                t.split,
                g.server.clone(),
                g.round,
                opt,
                bpe,
                g.round,
            )
            .ctx(&self.cfg.id)?;
            self.sessions.insert(device.clone(), session);
            out.send(
                &device,
                Message::GlobalParams {
                    round: g.round,
                    params: g.device.clone(),
                },
            );
        }
        Ok(())
    }

    fn on_global(
        &mut self,
        round: u32,
        params: ParamSet,
        out: &mut Outbox,
    ) -> Result<(), RoleError> {
        let t = &self.cfg.train;
        let (device, server) = split_params(&t.model, t.split, &params).ctx(&self.cfg.id)?;
        self.global = Some(Global {
            round,
            device,
            server,
        });
        let g = self.global.as_ref().expect("just set");
        for (d, s) in &mut self.sessions {
            if s.round() == round && s.params_round() < round {
                s.load_global(round, g.server.clone()).ctx(&self.cfg.id)?;
                out.send(
                    d,
                    Message::GlobalParams {
                        round,
                        params: g.device.clone(),
                    },
                );
            }
        }
        self.activate_pending(out)
    }

    fn on_smashed(
        &mut self,
        from: &str,
        smashed: SmashedData,
        out: &mut Outbox,
    ) -> Result<(), RoleError> {
        let id = self.cfg.id.clone();
        let start = Instant::now();
        let grad = self.session(from)?.train_batch(smashed).ctx(&id)?;
        *self.edge_time.entry(from.to_string()).or_default() += start.elapsed().as_secs_f64();
        out.send(from, Message::SmashedGrad(grad));
        Ok(())
    }

    fn on_update(
        &mut self,
        from: &str,
        mut u: LocalUpdate,
        out: &mut Outbox,
    ) -> Result<(), RoleError> {
        let id = self.cfg.id.clone();
        if u.device_id != from {
            return Err(self.err(format!("{from} sent an update for {}", u.device_id)));
        }
        if u.replay {
            let (round, server, device) = {
                let g = self.global()?;
                (g.round, g.server.clone(), g.device.clone())
            };
            let s = self.session(from)?;
            if s.round() != round {
                return Err(RoleError::protocol(
                    &id,
                    format!(
                        "{from} replayed at round {} but global is {round}",
                        s.round()
                    ),
                ));
            }
            s.end_replay_epoch().ctx(&id)?;
            s.load_global(round, server).ctx(&id)?;
            s.reset_optimizer();
            out.send(
                from,
                Message::GlobalParams {
                    round,
                    params: device,
                },
            );
            return Ok(());
        }
        let model = self.cfg.train.model.clone();
        let s = self.session(from)?;
        if u.round != s.round() + 1 {
            return Err(RoleError::protocol(
                &id,
                format!(
                    "{from} finished round {} but is on round {}",
                    u.round,
                    s.round() + 1
                ),
            ));
        }
        s.end_round().ctx(&id)?;
        u.params = assemble_full_params(&model, &u.params, s.server_params()).ctx(&id)?;
        u.stats.edge_time_s = self.edge_time.remove(from).unwrap_or(0.0);
        if !self.report.devices_served.iter().any(|d| d == from) {
            self.report.devices_served.push(from.to_string());
        }
        let central = self.cfg.central.clone();
        out.send(&central, Message::LocalUpdate(u));
        Ok(())
    }

    fn take_for_move(&mut self, n: &NotifyMove) -> Result<ServerSession, RoleError> {
        if n.source != self.cfg.id {
            return Err(self.err(format!(
                "{} announced a move from {}",
                n.device_id, n.source
            )));
        }
        let s = self
            .sessions
            .remove(&n.device_id)
            .ok_or_else(|| self.err(format!("{} moved without a session", n.device_id)))?;
        if !s.at_epoch_boundary() || s.epoch_in_round() != 0 {
            return Err(self.err(format!("{} moved in the middle of a round", n.device_id)));
        }
        self.edge_time.remove(&n.device_id);
        Ok(s)
    }

    fn checkpoint(&mut self, s: &ServerSession) -> Result<Checkpoint, RoleError> {
        let ckpt = s.checkpoint().ctx(&self.cfg.id)?;
        if let Some(dir) = &self.cfg.checkpoint_dir {
            let path = dir.join(format!("{}_r{}.ffck", ckpt.device_id, ckpt.round));
            ckpt.write_file(&path).map_err(|e| {
                RoleError::runtime(&self.cfg.id, format!("{}: {e}", path.display()))
            })?;
        }
        self.report.checkpoints_sent += 1;
        Ok(ckpt)
    }

    fn on_move(&mut self, from: &str, n: NotifyMove, out: &mut Outbox) -> Result<(), RoleError> {
        if n.device_id != from {
            return Err(self.err(format!("{from} announced a move for {}", n.device_id)));
        }
        let s = self.take_for_move(&n)?;
        log::debug!(
            "{}: {} leaves for {} ({:?})",
            self.cfg.id,
            n.device_id,
            n.dest,
            n.transfer
        );
        match n.transfer {
            TransferKind::Discard => {}
            TransferKind::Relay => {
                let ckpt = self.checkpoint(&s)?;
                out.send(from, Message::CheckpointTransfer(Box::new(ckpt)));
            }
            TransferKind::Direct => {
                let ckpt = self.checkpoint(&s)?;
                if !self.edges.contains(&n.dest) {
                    out.connect(&n.dest, hello(RoleKind::Edge, &self.cfg.id));
                    self.edges.insert(n.dest.clone());
                }
                out.send(&n.dest, Message::CheckpointTransfer(Box::new(ckpt)));
                self.migrating_out.insert(n.device_id, (n.dest, s));
            }
        }
        Ok(())
    }

    fn on_checkpoint(
        &mut self,
        from: &str,
        ckpt: Checkpoint,
        out: &mut Outbox,
    ) -> Result<(), RoleError> {
        let device = ckpt.device_id.clone();
        let from_device = self.devices.contains(from) && !self.edges.contains(from);
        if from_device && device != from {
            return Err(self.err(format!("{from} carried the checkpoint of {device}")));
        }
        let t = &self.cfg.train;
        // A checkpoint this edge cannot run is a deployment error, not something to route around.
        let session = ServerSession::restore(&t.model, t.split, ckpt).ctx(&self.cfg.id)?;
        let round = session.round();
        let ack = |ok: bool, detail: &str| {
            Message::ResumeAck(ResumeAck {
                device_id: device.clone(),
                ok,
                round,
                detail: detail.into(),
            })
        };
        if self.sessions.contains_key(&device) || self.detached.contains_key(&device) {
            out.send(from, ack(false, "device already has a session here"));
            return Ok(());
        }
        self.report.checkpoints_restored += 1;
        if from_device || self.awaiting.remove(&device) {
            self.sessions.insert(device.clone(), session);
        } else {
            self.detached.insert(device.clone(), session);
        }
        out.send(from, ack(true, ""));
        Ok(())
    }

    /// Puts a session back after the destination refused or could not be reached.
    fn reinstate(&mut self, device: &str, detail: &str, out: &mut Outbox) {
        if let Some((_, s)) = self.migrating_out.remove(device) {
            let round = s.round();
            self.sessions.insert(device.to_string(), s);
            out.send(
                device,
                Message::ResumeAck(ResumeAck {
                    device_id: device.into(),
                    ok: false,
                    round,
                    detail: detail.into(),
                }),
            );
        }
    }

    fn on_ack(&mut self, from: &str, ack: ResumeAck, out: &mut Outbox) -> Result<(), RoleError> {
        match self.migrating_out.get(&ack.device_id) {
            Some((dest, _)) if dest == from => {}
            _ => {
                return Err(self.err(format!(
                    "unexpected resume ack for {} from {from}",
                    ack.device_id
                )))
            }
        }
        if ack.ok {
            self.migrating_out.remove(&ack.device_id);
            let device = ack.device_id.clone();
            out.send(&device, Message::ResumeAck(ack));
        } else {
            log::warn!(
                "{}: {from} refused {}: {}",
                self.cfg.id,
                ack.device_id,
                ack.detail
            );
            let device = ack.device_id.clone();
            self.reinstate(&device, &ack.detail, out);
        }
        Ok(())
    }

    fn fail_moves_to(&mut self, peer: &str, detail: &str, out: &mut Outbox) {
        let stuck: Vec<String> = self
            .migrating_out
            .iter()
            .filter(|(_, (dest, _))| dest == peer)
            .map(|(d, _)| d.clone())
            .collect();
        for d in stuck {
            log::warn!("{}: cannot hand {d} to {peer}: {detail}", self.cfg.id);
            self.reinstate(&d, detail, out);
        }
    }
}

impl Role for Edge {
    fn id(&self) -> &str {
        &self.cfg.id
    }

    fn kind(&self) -> RoleKind {
        RoleKind::Edge
    }

    fn handle(&mut self, event: Event, out: &mut Outbox) -> Result<(), RoleError> {
        match event {
            Event::Start => {
                let central = self.cfg.central.clone();
                out.connect(&central, hello(RoleKind::Edge, &self.cfg.id));
                Ok(())
            }
            Event::Message { from, msg } => {
                if from == self.cfg.central {
                    self.redial.stop();
                    return match msg {
                        Message::GlobalParams { round, params } => {
                            self.on_global(round, params, out)
                        }
                        Message::RoundComplete {
                            round,
                            test_accuracy,
                        } => {
                            log::debug!(
                                "{}: round {round} done, accuracy {test_accuracy:.4}",
                                self.id()
                            );
                            Ok(())
                        }
                        Message::Shutdown => {
                            self.shutting_down = true;
                            for d in &self.devices {
                                out.send(d, Message::Shutdown);
                            }
                            out.finish();
                            Ok(())
                        }
                        other => Err(self.err(format!("unexpected {} from central", other.tag()))),
                    };
                }
                match msg {
                    Message::Register(r) => self.on_register(&from, r, out),
                    Message::SmashedData(s) => self.on_smashed(&from, s, out),
                    Message::LocalUpdate(u) => self.on_update(&from, u, out),
                    Message::NotifyMove(n) => self.on_move(&from, n, out),
                    Message::CheckpointTransfer(c) => self.on_checkpoint(&from, *c, out),
                    Message::ResumeAck(a) => self.on_ack(&from, a, out),
                    other => Err(self.err(format!("unexpected {} from {from}", other.tag()))),
                }
            }
            Event::Disconnected { peer } => {
                if peer == self.cfg.central {
                    return if self.shutting_down {
                        Ok(())
                    } else {
                        Err(self.err("central server went away"))
                    };
                }
                if self.devices.remove(&peer) {
                    self.pending.remove(&peer);
                    self.awaiting.remove(&peer);
                    if self.sessions.contains_key(&peer) && !self.shutting_down {
                        return Err(self.err(format!("{peer} disconnected with an active session")));
                    }
                }
                if self.edges.remove(&peer) {
                    self.fail_moves_to(&peer, "connection lost", out);
                }
                Ok(())
            }
            Event::ConnectFailed { peer, error } => {
                if peer == self.cfg.central {
                    if self.global.is_none() && self.redial.schedule() {
                        log::debug!("{}: central not up yet ({error})", self.id());
                        return Ok(());
                    }
                    return Err(RoleError::runtime(
                        &self.cfg.id,
                        format!("cannot reach central: {error}"),
                    ));
                }
                self.edges.remove(&peer);
                self.fail_moves_to(&peer, &error, out);
                Ok(())
            }
            Event::Timeout => {
                if self.redial.due() {
                    out.connect(&self.cfg.central, hello(RoleKind::Edge, &self.cfg.id));
                }
                Ok(())
            }
        }
    }

    fn poll_timeout(&self) -> Option<Instant> {
        self.redial.deadline()
    }

    fn report(&self) -> RoleReport {
        RoleReport::Edge(self.report.clone())
    }
}
