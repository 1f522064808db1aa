use std::fs;
use std::io::Write;
use std::path::Path;

use crate::nn::{ModelSpec, OptimizerState, ParamSet};
use crate::split::{split_stacks, SplitSpec};

use super::wire::{Reader, Sink, Writer};
use super::{Codec, DecodeError, EncodeError, Message};

/// Server-side training state of one device, enough to continue the session
/// on another edge server with bitwise-identical results.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub device_id: String,
    pub model: ModelSpec,
    pub split: SplitSpec,
    /// Completed rounds.
    pub round: u32,
    pub epoch_in_round: u32,
    pub batch_index: u32,
    pub batches_per_epoch: u32,
    /// Round of the global model the server half was last loaded from.
    pub params_round: u32,
    pub server_params: ParamSet,
    /// Gradients from the most recent server-side step (zero before the first).
    pub server_grads: ParamSet,
    pub loss: f32,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    /// Structural consistency: shapes mirror the server half of `model`, and
    /// counters are in range.
    pub fn validate(&self) -> Result<(), String> {
        if self.batches_per_epoch == 0 {
            return Err("batches_per_epoch is zero".into());
        }
        if self.batch_index >= self.batches_per_epoch {
            return Err(format!(
                "batch_index {} not below batches_per_epoch {}",
                self.batch_index, self.batches_per_epoch
            ));
        }
        let (_, server_stack) = split_stacks(&self.model, self.split).map_err(|e| e.to_string())?;
        self.server_params
            .validate(&server_stack)
            .map_err(|e| format!("server params: {e}"))?;
        if !self.server_params.same_layout(&self.server_grads) {
            return Err("server gradients do not mirror server params".into());
        }
        if !self.server_params.same_layout(self.optimizer.velocity()) {
            return Err("optimizer velocity does not mirror server params".into());
        }
        Ok(())
    }

    pub(super) fn write<S: Sink>(&self, w: &mut Writer<'_, S>) -> Result<(), EncodeError> {
        w.str(&self.device_id)?;
        w.model(&self.model)?;
        w.u8(self.split.point());
        w.u32(self.round);
        w.u32(self.epoch_in_round);
        w.u32(self.batch_index);
        w.u32(self.batches_per_epoch);
        w.u32(self.params_round);
        w.f32(self.loss);
        w.f32(self.optimizer.learning_rate());
        w.f32(self.optimizer.momentum());
        w.params(&self.server_params)?;
        w.params(&self.server_grads)?;
        w.params(self.optimizer.velocity())?;
        Ok(())
    }

    pub(super) fn read(r: &mut Reader<'_>) -> Result<Checkpoint, DecodeError> {
        let device_id = r.str()?;
        let model = r.model()?;
        let split = SplitSpec::new(r.u8()?);
        let round = r.u32()?;
        let epoch_in_round = r.u32()?;
        let batch_index = r.u32()?;
        let batches_per_epoch = r.u32()?;
        let params_round = r.u32()?;
        let loss = r.f32()?;
        let lr = r.f32()?;
        let momentum = r.f32()?;
        let server_params = r.params()?;
        let server_grads = r.params()?;
        let velocity = r.params()?;
        let optimizer = OptimizerState::with_velocity(lr, momentum, velocity)
            .map_err(|e| DecodeError::Protocol(format!("checkpoint optimizer: {e}")))?;
        let ckpt = Checkpoint {
            device_id,
            model,
            split,
            round,
            epoch_in_round,
            batch_index,
            batches_per_epoch,
            params_round,
            server_params,
            server_grads,
            loss,
            optimizer,
        };
        ckpt.validate()
            .map_err(|e| DecodeError::Protocol(format!("invalid checkpoint: {e}")))?;
        Ok(ckpt)
    }

    /// Writes the checkpoint as a single `CheckpointTransfer` frame (`.ffck`).
    pub fn write_file(&self, path: &Path) -> std::io::Result<()> {
        let bytes = Codec::default()
            .encode(&Message::CheckpointTransfer(Box::new(self.clone())))
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
        let mut file = fs::File::create(path)?;
        file.write_all(&bytes)?;
        file.sync_all()
    }

    pub fn read_file(path: &Path) -> std::io::Result<Checkpoint> {
        let bytes = fs::read(path)?;
        match Codec::default().decode_exact(&bytes) {
            Ok(Message::CheckpointTransfer(c)) => Ok(*c),
            Ok(other) => Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("expected CheckpointTransfer, found {}", other.tag()),
            )),
            Err(e) => Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
        }
    }
}
