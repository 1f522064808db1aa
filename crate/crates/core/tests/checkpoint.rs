//! A session restored from a checkpoint continues exactly like the original.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roamfl_core::nn::{init_params, Batch, MiniVggWidths, ModelSpec, OptimizerState, Tensor};
use roamfl_core::protocol::{Checkpoint, Codec, Message};
use roamfl_core::session::{ServerSession, SessionError};
use roamfl_core::split::{
    device_backward, device_forward, split, ModelPart, SmashedGrad, SplitSpec,
};

const BATCHES_PER_EPOCH: u32 = 3;

fn model() -> ModelSpec {
    ModelSpec::mini_vgg(
        [3, 8, 8],
        10,
        MiniVggWidths {
            conv: [6, 8, 8],
            hidden: 16,
        },
    )
    .unwrap()
}

fn data(n: usize) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..n)
        .map(|_| {
            let inputs = Tensor::from_fn(&[4, 3, 8, 8], |_| rng.random_range(0.0..1.0));
            Batch::new(inputs, (0..4).map(|_| rng.random_range(0..10)).collect()).unwrap()
        })
        .collect()
}

struct Pair {
    device: ModelPart,
    device_opt: OptimizerState,
    session: ServerSession,
}

impl Pair {
    fn new(model: &ModelSpec, sp: SplitSpec) -> Self {
        let params = init_params(model, 9);
        let (device, server) = split(model, &params, sp).unwrap();
        let device_opt = OptimizerState::new(0.01, 0.9, &device.params).unwrap();
        let server_opt = OptimizerState::new(0.01, 0.9, &server.params).unwrap();
        let session = ServerSession::new(
            "d1",
            model,
            sp,
            server.params,
            0,
            server_opt,
            BATCHES_PER_EPOCH,
            0,
        )
        .unwrap();
        Self {
            device,
            device_opt,
            session,
        }
    }

    fn run(&mut self, batches: &[Batch]) -> Vec<SmashedGrad> {
        batches
            .iter()
            .map(|b| {
                let id = u64::from(self.session.batch_index());
                let (smashed, retained) = device_forward(&self.device, b, id).unwrap();
                let grad = self.session.train_batch(smashed).unwrap();
                device_backward(
                    &mut self.device,
                    Some(&retained),
                    &grad,
                    &mut self.device_opt,
                )
                .unwrap();
                if self.session.at_epoch_boundary() {
                    self.session.end_round().unwrap();
                }
                grad
            })
            .collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn restored_session_is_bitwise_identical(sp in 1u8..=3, pause in 0usize..7) {
        let model = model();
        let sp = SplitSpec::new(sp);
        let batches = data(7);

        let mut reference = Pair::new(&model, sp);
        let expected = reference.run(&batches);

        let mut moved = Pair::new(&model, sp);
        let mut got = moved.run(&batches[..pause]);
        let ckpt = moved.session.checkpoint().unwrap();
        prop_assert_eq!(ckpt.round, moved.session.round());
        // Through the wire format, as it travels between edges.
        let codec = Codec::default();
        let bytes = codec.encode(&Message::CheckpointTransfer(Box::new(ckpt.clone()))).unwrap();
        let Message::CheckpointTransfer(received) = codec.decode_exact(&bytes).unwrap() else { panic!() };
        prop_assert_eq!(&*received, &ckpt);
        moved.session = ServerSession::restore(&model, sp, *received).unwrap();
        prop_assert_eq!(moved.session.checkpoint().unwrap(), ckpt);
        got.extend(moved.run(&batches[pause..]));

        prop_assert_eq!(got, expected);
        prop_assert_eq!(moved.session.checkpoint().unwrap(), reference.session.checkpoint().unwrap());
        prop_assert_eq!(moved.device.params, reference.device.params);
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let model = model();
    let mut pair = Pair::new(&model, SplitSpec::SP2);
    pair.run(&data(2));
    let ckpt = pair.session.checkpoint().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d1.ffck");
    ckpt.write_file(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes[4], 8, "file is one CheckpointTransfer frame");
    assert_eq!(Checkpoint::read_file(&path).unwrap(), ckpt);
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(Checkpoint::read_file(&path).is_err());
}

#[test]
fn restored_loss_matches_source() {
    let model = model();
    let mut pair = Pair::new(&model, SplitSpec::SP1);
    let grads = pair.run(&data(2));
    let ckpt = pair.session.checkpoint().unwrap();
    assert_eq!(ckpt.loss, grads[1].loss);
    let restored = ServerSession::restore(&model, SplitSpec::SP1, ckpt).unwrap();
    assert_eq!(restored.last_loss(), grads[1].loss);
}

#[test]
fn mismatched_split_is_incompatible() {
    let model = model();
    let pair = Pair::new(&model, SplitSpec::SP3);
    let ckpt = pair.session.checkpoint().unwrap();
    let err = ServerSession::restore(&model, SplitSpec::SP2, ckpt).unwrap_err();
    assert!(matches!(err, SessionError::Incompatible(_)), "{err}");
}
