//! Per-device training state held by an edge server.

use crate::nn::ModelSpec;
use crate::nn::{OptimizerState, ParamSet};
use crate::protocol::Checkpoint;
use crate::split::{
    server_forward_backward, split_stacks, ModelPart, SmashedData, SmashedGrad, SplitError,
    SplitSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Split(#[from] SplitError),
}

/// Server half of one device's split model plus its counters.
///
/// Batches within an epoch are numbered from 0; the device must send them in
/// order. When the last batch of an epoch is processed the batch counter wraps
/// and `epoch_in_round` advances. A round is closed with [`end_round`].
///
/// [`end_round`]: ServerSession::end_round
#[derive(Clone, Debug)]
pub struct ServerSession {
    device_id: String,
    model: ModelSpec,
    split: SplitSpec,
    part: ModelPart,
    optimizer: OptimizerState,
    round: u32,
    epoch_in_round: u32,
    batch_index: u32,
    batches_per_epoch: u32,
    params_round: u32,
    last_grads: ParamSet,
    last_loss: f32,
    in_flight: Option<SmashedData>,
}

impl ServerSession {
    /// Starts a session from the server half of a global model of round `params_round`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        device_id: impl Into<String>,
        model: &ModelSpec,
        split: SplitSpec,
        server_params: ParamSet,
        params_round: u32,
        optimizer: OptimizerState,
        batches_per_epoch: u32,
        completed_rounds: u32,
    ) -> Result<Self, SessionError> {
        if batches_per_epoch == 0 {
            return Err(SessionError::Usage(
                "a session needs at least one batch per epoch".into(),
            ));
        }
        let (_, stack) = split_stacks(model, split)?;
        server_params.validate(&stack).map_err(SplitError::from)?;
        if !server_params.same_layout(optimizer.velocity()) {
            return Err(SessionError::Usage(
                "optimizer velocity does not match server params".into(),
            ));
        }
        let last_grads = server_params.zeros_like();
        Ok(Self {
            device_id: device_id.into(),
            model: model.clone(),
            split,
            part: ModelPart {
                stack,
                params: server_params,
            },
            optimizer,
            round: completed_rounds,
            epoch_in_round: 0,
            batch_index: 0,
            batches_per_epoch,
            params_round,
            last_grads,
            last_loss: 0.0,
            in_flight: None,
        })
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn split(&self) -> SplitSpec {
        self.split
    }

    /// Completed rounds.
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn epoch_in_round(&self) -> u32 {
        self.epoch_in_round
    }

    pub fn batch_index(&self) -> u32 {
        self.batch_index
    }

    pub fn batches_per_epoch(&self) -> u32 {
        self.batches_per_epoch
    }

    pub fn params_round(&self) -> u32 {
        self.params_round
    }

    pub fn server_params(&self) -> &ParamSet {
        &self.part.params
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn last_loss(&self) -> f32 {
        self.last_loss
    }

    pub fn last_grads(&self) -> &ParamSet {
        &self.last_grads
    }

    /// True between batches.
    pub fn is_quiescent(&self) -> bool {
        self.in_flight.is_none()
    }

    /// True when the current round's epochs are done and no epoch is partly trained.
    pub fn at_epoch_boundary(&self) -> bool {
        self.in_flight.is_none() && self.batch_index == 0
    }

    /// Queues the next batch. Rejects out-of-order batch ids.
    pub fn accept(&mut self, smashed: SmashedData) -> Result<(), SessionError> {
        if self.in_flight.is_some() {
            return Err(SessionError::Protocol(format!(
                "{}: batch already in flight",
                self.device_id
            )));
        }
        if smashed.batch_id != u64::from(self.batch_index) {
            return Err(SessionError::Protocol(format!(
                "{}: unknown or duplicate batch {} (expected {})",
                self.device_id, smashed.batch_id, self.batch_index
            )));
        }
        self.in_flight = Some(smashed);
        Ok(())
    }

    /// Runs the server half on the queued batch and advances the counters.
    pub fn step(&mut self) -> Result<SmashedGrad, SessionError> {
        let smashed = self.in_flight.take().ok_or_else(|| {
            SessionError::Usage(format!("{}: no batch in flight", self.device_id))
        })?;
        let out = match server_forward_backward(&mut self.part, &smashed, &mut self.optimizer) {
            Ok(out) => out,
            Err(e) => {
                self.in_flight = Some(smashed);
                return Err(e.into());
            }
        };
        self.last_grads = out.grads;
        self.last_loss = out.smashed_grad.loss;
        self.batch_index += 1;
        if self.batch_index == self.batches_per_epoch {
            self.batch_index = 0;
            self.epoch_in_round += 1;
        }
        Ok(out.smashed_grad)
    }

    pub fn train_batch(&mut self, smashed: SmashedData) -> Result<SmashedGrad, SessionError> {
        self.accept(smashed)?;
        self.step()
    }

    fn require_epoch_done(&self, what: &str) -> Result<(), SessionError> {
        if !self.at_epoch_boundary() || self.epoch_in_round == 0 {
            return Err(SessionError::Protocol(format!(
                "{}: {what} before a full epoch (epoch {}, batch {})",
                self.device_id, self.epoch_in_round, self.batch_index
            )));
        }
        Ok(())
    }

    /// Closes the current round after at least one full epoch.
    pub fn end_round(&mut self) -> Result<(), SessionError> {
        self.require_epoch_done("round ended")?;
        self.round += 1;
        self.epoch_in_round = 0;
        Ok(())
    }

    /// Closes a replayed epoch without advancing the round.
    pub fn end_replay_epoch(&mut self) -> Result<(), SessionError> {
        self.require_epoch_done("replay ended")?;
        self.epoch_in_round = 0;
        Ok(())
    }

    /// Replaces the server half with the global model of `round`.
    pub fn load_global(&mut self, round: u32, server_params: ParamSet) -> Result<(), SessionError> {
        if !self.is_quiescent() {
            return Err(SessionError::Usage(format!(
                "{}: global update during a batch",
                self.device_id
            )));
        }
        server_params
            .validate(&self.part.stack)
            .map_err(SplitError::from)?;
        self.part.params = server_params;
        self.params_round = round;
        Ok(())
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer.reset();
    }

    /// Captures the session; only allowed between batches.
    pub fn checkpoint(&self) -> Result<Checkpoint, SessionError> {
        if !self.is_quiescent() {
            return Err(SessionError::Usage(format!(
                "{}: cannot checkpoint with a batch in flight",
                self.device_id
            )));
        }
        Ok(Checkpoint {
            device_id: self.device_id.clone(),
            model: self.model.clone(),
            split: self.split,
            round: self.round,
            epoch_in_round: self.epoch_in_round,
            batch_index: self.batch_index,
            batches_per_epoch: self.batches_per_epoch,
            params_round: self.params_round,
            server_params: self.part.params.clone(),
            server_grads: self.last_grads.clone(),
            loss: self.last_loss,
            optimizer: self.optimizer.clone(),
        })
    }

    /// Rebuilds a session on a server configured with `model` and `split`.
    pub fn restore(
        model: &ModelSpec,
        split: SplitSpec,
        ckpt: Checkpoint,
    ) -> Result<Self, SessionError> {
        if ckpt.split != split {
            return Err(SessionError::Incompatible(format!(
                "checkpoint split {} but this server runs {split}",
                ckpt.split
            )));
        }
        if &ckpt.model != model {
            return Err(SessionError::Incompatible(
                "checkpoint model differs from this server's model".into(),
            ));
        }
        ckpt.validate().map_err(SessionError::Incompatible)?;
        let (_, stack) = split_stacks(model, split)?;
        Ok(Self {
            device_id: ckpt.device_id,
            model: ckpt.model,
            split,
            part: ModelPart {
                stack,
                params: ckpt.server_params,
            },
            optimizer: ckpt.optimizer,
            round: ckpt.round,
            epoch_in_round: ckpt.epoch_in_round,
            batch_index: ckpt.batch_index,
            batches_per_epoch: ckpt.batches_per_epoch,
            params_round: ckpt.params_round,
            last_grads: ckpt.server_grads,
            last_loss: ckpt.loss,
            in_flight: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Batch, MiniVggWidths, Tensor};
    use crate::split::{device_forward, split};

    fn setup() -> (ModelSpec, ModelPart, ServerSession) {
        let model = ModelSpec::mini_vgg(
            [3, 8, 8],
            4,
            MiniVggWidths {
                conv: [4, 4, 4],
                hidden: 8,
            },
        )
        .unwrap();
        let params = init_params(&model, 3);
        let (dev, srv) = split(&model, &params, SplitSpec::SP2).unwrap();
        let opt = OptimizerState::new(0.01, 0.9, &srv.params).unwrap();
        let session =
            ServerSession::new("d1", &model, SplitSpec::SP2, srv.params, 0, opt, 2, 0).unwrap();
        (model, dev, session)
    }

    fn smashed(dev: &ModelPart, id: u64) -> SmashedData {
        let inputs = Tensor::from_fn(&[2, 3, 8, 8], |i| {
            ((i * 37 + id as usize * 11) % 23) as f32 / 23.0
        });
        device_forward(dev, &Batch::new(inputs, vec![1, 3]).unwrap(), id)
            .unwrap()
            .0
    }

    #[test]
    fn counters_wrap_at_epoch_end() {
        let (_, dev, mut s) = setup();
        s.train_batch(smashed(&dev, 0)).unwrap();
        assert_eq!((s.epoch_in_round(), s.batch_index()), (0, 1));
        assert!(s.end_round().is_err());
        s.train_batch(smashed(&dev, 1)).unwrap();
        assert_eq!((s.epoch_in_round(), s.batch_index()), (1, 0));
        s.end_round().unwrap();
        assert_eq!((s.round(), s.epoch_in_round()), (1, 0));
    }

    #[test]
    fn out_of_order_batch_is_rejected() {
        let (_, dev, mut s) = setup();
        assert!(matches!(
            s.accept(smashed(&dev, 1)),
            Err(SessionError::Protocol(_))
        ));
        s.train_batch(smashed(&dev, 0)).unwrap();
        assert!(matches!(
            s.accept(smashed(&dev, 0)),
            Err(SessionError::Protocol(_))
        ));
    }

    #[test]
    fn checkpoint_mid_batch_is_a_usage_error() {
        let (_, dev, mut s) = setup();
        s.accept(smashed(&dev, 0)).unwrap();
        assert!(matches!(s.checkpoint(), Err(SessionError::Usage(_))));
        s.step().unwrap();
        assert!(s.checkpoint().is_ok());
    }

    #[test]
    fn restore_resumes_bitwise() {
        let (model, dev, mut s) = setup();
        s.train_batch(smashed(&dev, 0)).unwrap();
        let ckpt = s.checkpoint().unwrap();
        assert_eq!(ckpt.round, s.round());
        assert_eq!(ckpt.loss, s.last_loss());
        let mut r = ServerSession::restore(&model, SplitSpec::SP2, ckpt.clone()).unwrap();
        assert_eq!(r.checkpoint().unwrap(), ckpt);
        let a = s.train_batch(smashed(&dev, 1)).unwrap();
        let b = r.train_batch(smashed(&dev, 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.checkpoint().unwrap(), r.checkpoint().unwrap());
    }

    #[test]
    fn restore_rejects_mismatched_configuration() {
        let (model, _, s) = setup();
        let ckpt = s.checkpoint().unwrap();
        assert!(matches!(
            ServerSession::restore(&model, SplitSpec::SP1, ckpt.clone()),
            Err(SessionError::Incompatible(_))
        ));
        let other = ModelSpec::mini_vgg(
            [3, 8, 8],
            4,
            MiniVggWidths {
                conv: [4, 4, 4],
                hidden: 9,
            },
        )
        .unwrap();
        assert!(matches!(
            ServerSession::restore(&other, SplitSpec::SP2, ckpt),
            Err(SessionError::Incompatible(_))
        ));
    }
}
