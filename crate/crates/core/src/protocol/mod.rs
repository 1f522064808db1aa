//! Messages exchanged between devices, edge servers and the central server,
//! and their length-prefixed binary encoding.
//!
//! A frame is `len: u32 LE | tag: u8 | payload`, where `len` counts the tag
//! byte plus the payload. `docs/protocol.md` lays out every body.

mod checkpoint;
pub mod sample;
mod wire;

use std::fmt;

use crate::nn::ParamSet;
use crate::split::{SmashedData, SmashedGrad};

pub use checkpoint::Checkpoint;
use wire::{ByteCount, Reader, Sink, Writer};

/// Version byte carried in every `Register`.
pub const FORMAT_VERSION: u8 = 1;
/// Default upper bound on `len`.
pub const DEFAULT_MAX_PAYLOAD: usize = 256 * 1024 * 1024;
/// Length prefix plus tag.
pub const HEADER_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    /// The buffer holds only part of a frame; at least `needed` total bytes are required.
    #[error("incomplete frame: {needed} bytes needed")]
    Incomplete { needed: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("payload of {len} bytes exceeds limit of {max}")]
    TooLarge { len: usize, max: usize },
    #[error("unencodable value: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tag {
    Register = 1,
    GlobalParams = 2,
    SmashedData = 3,
    SmashedGrad = 4,
    LocalUpdate = 5,
    RoundComplete = 6,
    NotifyMove = 7,
    CheckpointTransfer = 8,
    ResumeAck = 9,
    Shutdown = 10,
}

impl Tag {
    pub fn from_u8(v: u8) -> Option<Tag> {
        use Tag::*;
        Some(match v {
            1 => Register,
            2 => GlobalParams,
            3 => SmashedData,
            4 => SmashedGrad,
            5 => LocalUpdate,
            6 => RoundComplete,
            7 => NotifyMove,
            8 => CheckpointTransfer,
            9 => ResumeAck,
            10 => Shutdown,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Register => "Register",
            Tag::GlobalParams => "GlobalParams",
            Tag::SmashedData => "SmashedData",
            Tag::SmashedGrad => "SmashedGrad",
            Tag::LocalUpdate => "LocalUpdate",
            Tag::RoundComplete => "RoundComplete",
            Tag::NotifyMove => "NotifyMove",
            Tag::CheckpointTransfer => "CheckpointTransfer",
            Tag::ResumeAck => "ResumeAck",
            Tag::Shutdown => "Shutdown",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RoleKind {
    Device = 1,
    Edge = 2,
    Central = 3,
}

/// How a registering device relates to server-side state on the receiver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Attach {
    /// Build a new session from the current global model.
    Fresh = 0,
    /// Continue a session restored from a checkpoint.
    Resume = 1,
}

/// Path taken by the server-side state when a device changes edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum TransferKind {
    /// Source edge sends the checkpoint straight to the destination.
    Direct = 0,
    /// Source hands the checkpoint to the device, which carries it over.
    Relay = 1,
    /// No state moves; the session is discarded.
    Discard = 2,
}

/// First frame on every connection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Register {
    pub version: u8,
    pub role: RoleKind,
    pub id: String,
    pub attach: Attach,
    /// Rounds the device has completed, i.e. the round it is about to train.
    pub completed_rounds: u32,
    /// Extra epochs to redo after a restart-style move.
    pub replay_rounds: u32,
    pub shard_size: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundStats {
    pub device_time_s: f64,
    pub edge_time_s: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub loss: f32,
    /// Set on the first round trained after a move.
    pub migration_overhead_s: Option<f64>,
    pub epochs: u32,
    pub cumulative_device_rounds: u64,
}

/// Full-model parameters of one device after a round (device half plus the
/// server half filled in by the edge).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub device_id: String,
    pub round: u32,
    pub sample_count: u32,
    /// Replay epochs are not aggregated.
    pub replay: bool,
    pub params: ParamSet,
    pub stats: RoundStats,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NotifyMove {
    pub device_id: String,
    /// Last round completed at the source.
    pub after_round: u32,
    pub source: String,
    pub dest: String,
    pub transfer: TransferKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResumeAck {
    pub device_id: String,
    pub ok: bool,
    pub round: u32,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Register(Register),
    GlobalParams { round: u32, params: ParamSet },
    SmashedData(SmashedData),
    SmashedGrad(SmashedGrad),
    LocalUpdate(LocalUpdate),
    RoundComplete { round: u32, test_accuracy: f64 },
    NotifyMove(NotifyMove),
    CheckpointTransfer(Box<Checkpoint>),
    ResumeAck(ResumeAck),
    Shutdown,
}

impl Message {
    pub fn tag(&self) -> Tag {
        match self {
            Message::Register(_) => Tag::Register,
            Message::GlobalParams { .. } => Tag::GlobalParams,
            Message::SmashedData(_) => Tag::SmashedData,
            Message::SmashedGrad(_) => Tag::SmashedGrad,
            Message::LocalUpdate(_) => Tag::LocalUpdate,
            Message::RoundComplete { .. } => Tag::RoundComplete,
            Message::NotifyMove(_) => Tag::NotifyMove,
            Message::CheckpointTransfer(_) => Tag::CheckpointTransfer,
            Message::ResumeAck(_) => Tag::ResumeAck,
            Message::Shutdown => Tag::Shutdown,
        }
    }

    /// Round number carried by the message, if any; used for traces.
    pub fn round_hint(&self) -> Option<u32> {
        match self {
            Message::Register(r) => Some(r.completed_rounds),
            Message::GlobalParams { round, .. } | Message::RoundComplete { round, .. } => {
                Some(*round)
            }
            Message::LocalUpdate(u) => Some(u.round),
            Message::NotifyMove(m) => Some(m.after_round),
            Message::CheckpointTransfer(c) => Some(c.round),
            Message::ResumeAck(a) => Some(a.round),
            _ => None,
        }
    }

    fn write_payload<S: Sink>(&self, w: &mut Writer<'_, S>) -> Result<(), EncodeError> {
        match self {
            Message::Register(r) => {
                w.u8(r.version);
                w.u8(r.role as u8);
                w.str(&r.id)?;
                w.u8(r.attach as u8);
                w.u32(r.completed_rounds);
                w.u32(r.replay_rounds);
                w.u32(r.shard_size);
            }
            Message::GlobalParams { round, params } => {
                w.u32(*round);
                w.params(params)?;
            }
            Message::SmashedData(s) => {
                w.u64(s.batch_id);
                w.labels(&s.labels)?;
                w.tensor(&s.activation)?;
            }
            Message::SmashedGrad(g) => {
                w.u64(g.batch_id);
                w.f32(g.loss);
                w.tensor(&g.grad)?;
            }
            Message::LocalUpdate(u) => {
                w.str(&u.device_id)?;
                w.u32(u.round);
                w.u32(u.sample_count);
                w.bool(u.replay);
                let s = &u.stats;
                w.f64(s.device_time_s);
                w.f64(s.edge_time_s);
                w.u64(s.bytes_up);
                w.u64(s.bytes_down);
                w.f32(s.loss);
                w.bool(s.migration_overhead_s.is_some());
                w.f64(s.migration_overhead_s.unwrap_or(0.0));
                w.u32(s.epochs);
                w.u64(s.cumulative_device_rounds);
                w.params(&u.params)?;
            }
            Message::RoundComplete {
                round,
                test_accuracy,
            } => {
                w.u32(*round);
                w.f64(*test_accuracy);
            }
            Message::NotifyMove(m) => {
                w.str(&m.device_id)?;
                w.u32(m.after_round);
                w.str(&m.source)?;
                w.str(&m.dest)?;
                w.u8(m.transfer as u8);
            }
            Message::CheckpointTransfer(c) => c.write(w)?,
            Message::ResumeAck(a) => {
                w.str(&a.device_id)?;
                w.bool(a.ok);
                w.u32(a.round);
                w.str(&a.detail)?;
            }
            Message::Shutdown => {}
        }
        Ok(())
    }

    fn read_payload(tag: Tag, r: &mut Reader<'_>) -> Result<Message, DecodeError> {
        let bad = |what: &str, v: u8| DecodeError::Protocol(format!("invalid {what} byte {v}"));
        Ok(match tag {
            Tag::Register => {
                let version = r.u8()?;
                let role = match r.u8()? {
                    1 => RoleKind::Device,
                    2 => RoleKind::Edge,
                    3 => RoleKind::Central,
                    v => return Err(bad("role", v)),
                };
                let id = r.str()?;
                let attach = match r.u8()? {
                    0 => Attach::Fresh,
                    1 => Attach::Resume,
                    v => return Err(bad("attach", v)),
                };
                Message::Register(Register {
                    version,
                    role,
                    id,
                    attach,
                    completed_rounds: r.u32()?,
                    replay_rounds: r.u32()?,
                    shard_size: r.u32()?,
                })
            }
            Tag::GlobalParams => Message::GlobalParams {
                round: r.u32()?,
                params: r.params()?,
            },
            Tag::SmashedData => {
                let batch_id = r.u64()?;
                let labels = r.labels()?;
                let activation = r.tensor()?;
                if activation.batch() != labels.len() {
                    return Err(DecodeError::Protocol(format!(
                        "{} labels for activation batch {}",
                        labels.len(),
                        activation.batch()
                    )));
                }
                Message::SmashedData(SmashedData {
                    batch_id,
                    activation,
                    labels,
                })
            }
            Tag::SmashedGrad => Message::SmashedGrad(SmashedGrad {
                batch_id: r.u64()?,
                loss: r.f32()?,
                grad: r.tensor()?,
            }),
            Tag::LocalUpdate => {
                let device_id = r.str()?;
                let round = r.u32()?;
                let sample_count = r.u32()?;
                let replay = r.bool()?;
                let device_time_s = r.f64()?;
                let edge_time_s = r.f64()?;
                let bytes_up = r.u64()?;
                let bytes_down = r.u64()?;
                let loss = r.f32()?;
                let has_overhead = r.bool()?;
                let overhead = r.f64()?;
                if !has_overhead && overhead.to_bits() != 0 {
                    return Err(DecodeError::Protocol(
                        "overhead value present but flagged absent".into(),
                    ));
                }
                let stats = RoundStats {
                    device_time_s,
                    edge_time_s,
                    bytes_up,
                    bytes_down,
                    loss,
                    migration_overhead_s: has_overhead.then_some(overhead),
                    epochs: r.u32()?,
                    cumulative_device_rounds: r.u64()?,
                };
                let params = r.params()?;
                Message::LocalUpdate(LocalUpdate {
                    device_id,
                    round,
                    sample_count,
                    replay,
                    params,
                    stats,
                })
            }
            Tag::RoundComplete => Message::RoundComplete {
                round: r.u32()?,
                test_accuracy: r.f64()?,
            },
            Tag::NotifyMove => Message::NotifyMove(NotifyMove {
                device_id: r.str()?,
                after_round: r.u32()?,
                source: r.str()?,
                dest: r.str()?,
                transfer: match r.u8()? {
                    0 => TransferKind::Direct,
                    1 => TransferKind::Relay,
                    2 => TransferKind::Discard,
                    v => return Err(bad("transfer", v)),
                },
            }),
            Tag::CheckpointTransfer => Message::CheckpointTransfer(Box::new(Checkpoint::read(r)?)),
            Tag::ResumeAck => Message::ResumeAck(ResumeAck {
                device_id: r.str()?,
                ok: r.bool()?,
                round: r.u32()?,
                detail: r.str()?,
            }),
            Tag::Shutdown => Message::Shutdown,
        })
    }

    /// Payload byte count (excluding the 5-byte header), computed without encoding.
    pub fn payload_len(&self) -> Result<usize, EncodeError> {
        let mut count = ByteCount::default();
        self.write_payload(&mut Writer::new(&mut count))?;
        Ok(count.0)
    }
}

/// Frame encoder/decoder with a bound on frame length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Codec {
    max_payload: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self {
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

impl Codec {
    /// `max_payload` bounds the length field (tag plus payload).
    pub fn new(max_payload: usize) -> Self {
        Self {
            max_payload: max_payload.clamp(1, u32::MAX as usize),
        }
    }

    pub fn max_payload(&self) -> usize {
        self.max_payload
    }

    /// Total frame length (header included) of `msg`.
    pub fn frame_len(&self, msg: &Message) -> Result<usize, EncodeError> {
        Ok(HEADER_LEN + msg.payload_len()?)
    }

    pub fn encode(&self, msg: &Message) -> Result<Vec<u8>, EncodeError> {
        let payload = msg.payload_len()?;
        let len = payload + 1;
        if len > self.max_payload {
            return Err(EncodeError::TooLarge {
                len,
                max: self.max_payload,
            });
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload);
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.push(msg.tag() as u8);
        msg.write_payload(&mut Writer::new(&mut out))?;
        debug_assert_eq!(out.len(), HEADER_LEN + payload);
        Ok(out)
    }

    /// Inspects the header and returns the total frame length once known.
    /// Errors if the declared length is zero or above the limit.
    pub fn peek_len(&self, buf: &[u8]) -> Result<Option<usize>, DecodeError> {
        let Some(head) = buf.get(..4) else {
            return Ok(None);
        };
        let len = u32::from_le_bytes(head.try_into().expect("4 bytes")) as usize;
        if len == 0 {
            return Err(DecodeError::Protocol("frame length 0 has no tag".into()));
        }
        if len > self.max_payload {
            return Err(DecodeError::Protocol(format!(
                "frame length {len} exceeds limit of {}",
                self.max_payload
            )));
        }
        Ok(Some(4 + len))
    }

    /// Decodes the frame at the start of `buf`; returns the message and the
    /// bytes consumed. Never reads beyond the declared frame.
    pub fn decode(&self, buf: &[u8]) -> Result<(Message, usize), DecodeError> {
        let total = match self.peek_len(buf)? {
            None => return Err(DecodeError::Incomplete { needed: 4 }),
            Some(total) if buf.len() < total => {
                return Err(DecodeError::Incomplete { needed: total })
            }
            Some(total) => total,
        };
        let raw_tag = buf[4];
        let tag = Tag::from_u8(raw_tag)
            .ok_or_else(|| DecodeError::Protocol(format!("unknown tag {raw_tag:#04x}")))?;
        let mut reader = Reader::new(&buf[HEADER_LEN..total]);
        let msg = Message::read_payload(tag, &mut reader)?;
        reader.finish()?;
        Ok((msg, total))
    }

    /// Decodes a buffer that must hold exactly one frame.
    pub fn decode_exact(&self, buf: &[u8]) -> Result<Message, DecodeError> {
        let (msg, used) = self.decode(buf)?;
        if used != buf.len() {
            return Err(DecodeError::Protocol(format!(
                "{} bytes after frame",
                buf.len() - used
            )));
        }
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerParams, Tensor};

    fn params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            3,
            LayerParams {
                weight: Tensor::from_fn(&[2, 3], |i| i as f32),
                bias: Tensor::zeros(&[2]),
            },
        );
        p.insert(
            0,
            LayerParams {
                weight: Tensor::from_fn(&[1, 1], |_| -1.5),
                bias: Tensor::zeros(&[1]),
            },
        );
        p
    }

    #[test]
    fn shutdown_is_five_bytes() {
        let bytes = Codec::default().encode(&Message::Shutdown).unwrap();
        assert_eq!(bytes, [0x01, 0x00, 0x00, 0x00, 0x0A]);
    }

    #[test]
    fn round_complete_layout() {
        let bytes = Codec::default()
            .encode(&Message::RoundComplete {
                round: 7,
                test_accuracy: 0.5,
            })
            .unwrap();
        let mut expected = vec![13, 0, 0, 0, 6, 7, 0, 0, 0];
        expected.extend_from_slice(&0.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn global_params_layout() {
        let mut p = ParamSet::new();
        p.insert(
            9,
            LayerParams {
                weight: Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap(),
                bias: Tensor::zeros(&[1]),
            },
        );
        let bytes = Codec::default()
            .encode(&Message::GlobalParams {
                round: 2,
                params: p,
            })
            .unwrap();
        #[rustfmt::skip]
        let mut expected: Vec<u8> = vec![
            0, 0, 0, 0, 2,       // len patched below, tag
            2, 0, 0, 0,          // round
            1, 0,                // entry count
            9, 0,                // key
            2, 1, 0, 0, 0, 2, 0, 0, 0, // weight rank and dims
        ];
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        expected.extend_from_slice(&[1, 1, 0, 0, 0]);
        expected.extend_from_slice(&0.0f32.to_le_bytes());
        let len = (expected.len() - 4) as u32;
        expected[..4].copy_from_slice(&len.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn keys_are_written_in_ascending_order() {
        let bytes = Codec::default()
            .encode(&Message::GlobalParams {
                round: 0,
                params: params(),
            })
            .unwrap();
        assert_eq!(&bytes[9..13], &[2, 0, 0, 0]);
        assert_eq!(&bytes[11..13], &[0, 0]);
    }

    #[test]
    fn truncated_input_needs_more_bytes() {
        let codec = Codec::default();
        assert_eq!(
            codec.decode(&[1, 0, 0]),
            Err(DecodeError::Incomplete { needed: 4 })
        );
        let bytes = codec
            .encode(&Message::GlobalParams {
                round: 1,
                params: params(),
            })
            .unwrap();
        for cut in 4..bytes.len() {
            assert_eq!(
                codec.decode(&bytes[..cut]),
                Err(DecodeError::Incomplete {
                    needed: bytes.len()
                })
            );
        }
    }

    #[test]
    fn unknown_tag_and_oversize_are_protocol_errors() {
        let codec = Codec::new(64);
        assert!(matches!(
            codec.decode(&[1, 0, 0, 0, 0xFF]),
            Err(DecodeError::Protocol(_))
        ));
        assert!(matches!(
            codec.decode(&[0, 0, 0, 0]),
            Err(DecodeError::Protocol(_))
        ));
        assert!(matches!(
            codec.decode(&[65, 0, 0, 0]),
            Err(DecodeError::Protocol(_))
        ));
        let big = Message::GlobalParams {
            round: 0,
            params: params(),
        };
        assert!(matches!(
            codec.encode(&big),
            Err(EncodeError::TooLarge { .. })
        ));
    }

    #[test]
    fn trailing_payload_bytes_are_rejected() {
        assert!(matches!(
            Codec::default().decode(&[2, 0, 0, 0, 10, 0]),
            Err(DecodeError::Protocol(_))
        ));
    }

    #[test]
    fn decode_consumes_only_the_first_frame() {
        let codec = Codec::default();
        let mut bytes = codec.encode(&Message::Shutdown).unwrap();
        bytes.extend(
            codec
                .encode(&Message::RoundComplete {
                    round: 1,
                    test_accuracy: 0.25,
                })
                .unwrap(),
        );
        let (first, used) = codec.decode(&bytes).unwrap();
        assert_eq!((first, used), (Message::Shutdown, 5));
        let (second, _) = codec.decode(&bytes[used..]).unwrap();
        assert_eq!(
            second,
            Message::RoundComplete {
                round: 1,
                test_accuracy: 0.25
            }
        );
    }

    #[test]
    fn lying_tensor_header_does_not_allocate() {
        // SmashedGrad whose tensor claims 2^32-1 x 2^32-1 elements.
        let mut body = vec![4u8];
        body.extend_from_slice(&0u64.to_le_bytes());
        body.extend_from_slice(&0f32.to_le_bytes());
        body.extend_from_slice(&[2, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF]);
        let mut frame = (body.len() as u32).to_le_bytes().to_vec();
        frame.extend(body);
        assert!(matches!(
            Codec::default().decode(&frame),
            Err(DecodeError::Protocol(_))
        ));
    }

    #[test]
    fn register_round_trip() {
        let msg = Message::Register(Register {
            version: FORMAT_VERSION,
            role: RoleKind::Device,
            id: "d1".into(),
            attach: Attach::Resume,
            completed_rounds: 50,
            replay_rounds: 0,
            shard_size: 500,
        });
        let codec = Codec::default();
        let bytes = codec.encode(&msg).unwrap();
        assert_eq!(bytes.len(), codec.frame_len(&msg).unwrap());
        assert_eq!(codec.decode_exact(&bytes).unwrap(), msg);
    }
}
