//! Random well-formed messages, for round-trip and fuzz testing.

use rand::Rng;

use crate::nn::{
    init_params, LayerParams, MiniVggWidths, ModelSpec, OptimizerState, ParamSet, Tensor,
};
use crate::split::{split_stacks, SmashedData, SmashedGrad, SplitSpec};

use super::{
    Attach, Checkpoint, LocalUpdate, Message, NotifyMove, Register, ResumeAck, RoleKind,
    RoundStats, TransferKind,
};

/// Any bit pattern, NaNs included; tensors compare bitwise.
fn any_f32<R: Rng>(rng: &mut R) -> f32 {
    if rng.random_bool(0.1) {
        f32::from_bits(rng.random())
    } else {
        rng.random_range(-4.0..4.0)
    }
}

fn finite_f64<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(-1e6..1e6)
}

fn string<R: Rng>(rng: &mut R) -> String {
    const ALPHABET: &[char] = &['d', 'e', '1', '2', '_', '-', 'é', '☃', ' '];
    let len = rng.random_range(0..12);
    (0..len)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())])
        .collect()
}

pub fn tensor<R: Rng>(rng: &mut R) -> Tensor {
    let rank = rng.random_range(1..=4);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=4)).collect();
    Tensor::from_fn(&shape, |_| any_f32(rng))
}

pub fn param_set<R: Rng>(rng: &mut R) -> ParamSet {
    let n = rng.random_range(0..5);
    let mut key = 0usize;
    (0..n)
        .map(|_| {
            key += rng.random_range(1..400);
            (
                key,
                LayerParams {
                    weight: tensor(rng),
                    bias: tensor(rng),
                },
            )
        })
        .collect()
}

fn filled_like<R: Rng>(p: &ParamSet, rng: &mut R) -> ParamSet {
    let mut out = p.zeros_like();
    for (_, lp) in out.iter_mut() {
        lp.weight
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = any_f32(rng));
        lp.bias
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = any_f32(rng));
    }
    out
}

/// A consistent checkpoint for a small randomly sized MiniVGG.
pub fn checkpoint<R: Rng>(rng: &mut R) -> Checkpoint {
    let widths = MiniVggWidths {
        conv: [
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..5),
        ],
        hidden: rng.random_range(1..9),
    };
    let side = rng.random_range(4..9);
    let classes = rng.random_range(2..6);
    let model = ModelSpec::mini_vgg([rng.random_range(1..4), side, side], classes, widths)
        .expect("valid model");
    let split = SplitSpec::new(rng.random_range(1..=3));
    let (_, server_stack) = split_stacks(&model, split).expect("valid split");
    let full = init_params(&model, rng.random());
    let server_params = filled_like(&full.subset(&server_stack.param_indices()), rng);
    let server_grads = filled_like(&server_params, rng);
    let velocity = filled_like(&server_params, rng);
    let batches_per_epoch = rng.random_range(1..20);
    Checkpoint {
        device_id: string(rng),
        model,
        split,
        round: rng.random_range(0..200),
        epoch_in_round: rng.random_range(0..3),
        batch_index: rng.random_range(0..batches_per_epoch),
        batches_per_epoch,
        params_round: rng.random_range(0..200),
        server_params,
        server_grads,
        loss: rng.random_range(0.0..5.0),
        optimizer: OptimizerState::with_velocity(
            rng.random_range(0.001..1.0),
            rng.random_range(0.0..0.99),
            velocity,
        )
        .expect("valid hyperparameters"),
    }
}

/// A random message of a random kind.
pub fn message<R: Rng>(rng: &mut R) -> Message {
    match rng.random_range(0..10) {
        0 => Message::Register(Register {
            version: rng.random(),
            role: [RoleKind::Device, RoleKind::Edge, RoleKind::Central][rng.random_range(0..3)],
            id: string(rng),
            attach: if rng.random() {
                Attach::Fresh
            } else {
                Attach::Resume
            },
            completed_rounds: rng.random(),
            replay_rounds: rng.random(),
            shard_size: rng.random(),
        }),
        1 => Message::GlobalParams {
            round: rng.random(),
            params: param_set(rng),
        },
        2 => {
            let activation = tensor(rng);
            let labels = (0..activation.batch())
                .map(|_| rng.random_range(0..1000))
                .collect();
            Message::SmashedData(SmashedData {
                batch_id: rng.random(),
                activation,
                labels,
            })
        }
        3 => Message::SmashedGrad(SmashedGrad {
            batch_id: rng.random(),
            loss: rng.random_range(0.0..10.0),
            grad: tensor(rng),
        }),
        4 => Message::LocalUpdate(LocalUpdate {
            device_id: string(rng),
            round: rng.random(),
            sample_count: rng.random(),
            replay: rng.random(),
            params: param_set(rng),
            stats: RoundStats {
                device_time_s: finite_f64(rng),
                edge_time_s: finite_f64(rng),
                bytes_up: rng.random(),
                bytes_down: rng.random(),
                loss: rng.random_range(0.0..10.0),
                migration_overhead_s: rng.random_bool(0.3).then(|| finite_f64(rng)),
                epochs: rng.random(),
                cumulative_device_rounds: rng.random(),
            },
        }),
        5 => Message::RoundComplete {
            round: rng.random(),
            test_accuracy: rng.random(),
        },
        6 => Message::NotifyMove(NotifyMove {
            device_id: string(rng),
            after_round: rng.random(),
            source: string(rng),
            dest: string(rng),
            transfer: [
                TransferKind::Direct,
                TransferKind::Relay,
                TransferKind::Discard,
            ][rng.random_range(0..3)],
        }),
        7 => Message::CheckpointTransfer(Box::new(checkpoint(rng))),
        8 => Message::ResumeAck(ResumeAck {
            device_id: string(rng),
            ok: rng.random(),
            round: rng.random(),
            detail: string(rng),
        }),
        _ => Message::Shutdown,
    }
}
