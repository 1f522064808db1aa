//! Training through the split exchange must match monolithic training bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roamfl_core::nn::{
    backward, forward, init_params, loss_and_grad, Batch, MiniVggWidths, ModelSpec, OptimizerState,
    Tensor,
};
use roamfl_core::split::{
    assemble_full_params, device_backward, device_forward, server_forward_backward, split,
    split_stacks, SplitSpec,
};

fn model() -> ModelSpec {
    ModelSpec::mini_vgg([3, 16, 16], 10, MiniVggWidths::default()).unwrap()
}

fn batches(n: usize, size: usize, seed: u64) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let inputs = Tensor::from_fn(&[size, 3, 16, 16], |_| rng.random_range(0.0..1.0));
            let labels = (0..size).map(|_| rng.random_range(0..10)).collect();
            Batch::new(inputs, labels).unwrap()
        })
        .collect()
}

#[test]
fn split_training_matches_monolithic_bitwise() {
    let model = model();
    let data = batches(4, 8, 1);
    for sp in [SplitSpec::SP1, SplitSpec::SP2, SplitSpec::SP3] {
        let mut mono = init_params(&model, 7);
        let mut mono_opt = OptimizerState::new(0.01, 0.9, &mono).unwrap();
        let (mut dev, mut srv) = split(&model, &mono, sp).unwrap();
        let mut dev_opt = OptimizerState::new(0.01, 0.9, &dev.params).unwrap();
        let mut srv_opt = OptimizerState::new(0.01, 0.9, &srv.params).unwrap();
        for (i, batch) in data.iter().enumerate() {
            let mono_loss = model
                .train_step(&mut mono, &mut mono_opt, batch)
                .unwrap()
                .loss;
            let (smashed, retained) = device_forward(&dev, batch, i as u64).unwrap();
            let step = server_forward_backward(&mut srv, &smashed, &mut srv_opt).unwrap();
            device_backward(&mut dev, Some(&retained), &step.smashed_grad, &mut dev_opt).unwrap();
            assert_eq!(
                step.smashed_grad.loss.to_bits(),
                mono_loss.to_bits(),
                "{sp} batch {i}"
            );
            let joined = assemble_full_params(&model, &dev.params, &srv.params).unwrap();
            assert_eq!(joined, mono, "{sp} after batch {i}");
        }
    }
}

#[test]
fn smashed_data_equals_monolithic_activation_at_the_cut() {
    let model = model();
    let params = init_params(&model, 3);
    let batch = &batches(1, 4, 2)[0];
    let pass = forward(model.stack(), &params, &batch.inputs).unwrap();
    for sp in [SplitSpec::SP1, SplitSpec::SP2, SplitSpec::SP3] {
        let cut = sp.cut_index(&model).unwrap();
        let (dev, _) = split(&model, &params, sp).unwrap();
        let (smashed, _) = device_forward(&dev, batch, 0).unwrap();
        assert_eq!(smashed.activation, pass.activations[cut - 1], "{sp}");
        assert_eq!(smashed.labels, batch.labels);
    }
}

#[test]
fn smashed_grad_equals_server_input_gradient() {
    let model = model();
    let params = init_params(&model, 4);
    let batch = &batches(1, 4, 3)[0];
    for sp in [SplitSpec::SP1, SplitSpec::SP2, SplitSpec::SP3] {
        let (dev, mut srv) = split(&model, &params, sp).unwrap();
        let (smashed, _) = device_forward(&dev, batch, 0).unwrap();
        // Oracle: monolithic forward/backward, then read the gradient flowing into the cut.
        let (_, server_stack) = split_stacks(&model, sp).unwrap();
        let pass = forward(&server_stack, &params, &smashed.activation).unwrap();
        let (_, dlogits) = loss_and_grad(pass.output(), &batch.labels).unwrap();
        let expected = backward(&server_stack, &params, &pass, &dlogits, true)
            .unwrap()
            .input
            .unwrap();
        let mut opt = OptimizerState::new(0.01, 0.9, &srv.params).unwrap();
        let step = server_forward_backward(&mut srv, &smashed, &mut opt).unwrap();
        assert_eq!(step.smashed_grad.grad, expected, "{sp}");
        assert_eq!(step.smashed_grad.grad.shape(), smashed.activation.shape());
    }
}

#[test]
fn boundary_shapes_are_stable_across_batches() {
    let model = model();
    let params = init_params(&model, 5);
    let (dev, _) = split(&model, &params, SplitSpec::SP2).unwrap();
    let shapes: Vec<Vec<usize>> = batches(3, 5, 9)
        .iter()
        .enumerate()
        .map(|(i, b)| {
            device_forward(&dev, b, i as u64)
                .unwrap()
                .0
                .activation
                .shape()
                .to_vec()
        })
        .collect();
    assert!(shapes.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(shapes[0], vec![5, 32, 4, 4]);
}

#[test]
fn identical_devices_produce_identical_smashed_data() {
    let model = model();
    let params = init_params(&model, 6);
    let batch = &batches(1, 3, 4)[0];
    let (a, _) = split(&model, &params, SplitSpec::SP1).unwrap();
    let (b, _) = split(&model, &params, SplitSpec::SP1).unwrap();
    assert_eq!(
        device_forward(&a, batch, 0).unwrap().0,
        device_forward(&b, batch, 0).unwrap().0
    );
}
