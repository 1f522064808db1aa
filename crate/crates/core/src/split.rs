//! Partitioning a model between a device and an edge server, and the
//! smashed-data / smashed-gradient exchange between the two halves.

use std::fmt;

use crate::nn::{
    backward, forward, loss_and_grad, Batch, ForwardPass, LayerSpec, LayerStack, ModelSpec,
    NnError, OptimizerState, ParamSet, Tensor,
};

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// How many leading convolution blocks run on the device.
///
/// A block is a convolution plus the activation/pooling layers that follow
/// it, so a cut never separates a convolution from its ReLU or pool. Point 0
/// (everything on the server) is only meant for identity tests; run
/// configurations reject it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SplitSpec(u8);

impl SplitSpec {
    pub const SP1: SplitSpec = SplitSpec(1);
    pub const SP2: SplitSpec = SplitSpec(2);
    pub const SP3: SplitSpec = SplitSpec(3);

    pub const fn new(point: u8) -> Self {
        Self(point)
    }

    pub fn point(self) -> u8 {
        self.0
    }

    /// Index of the first server-side layer.
    pub fn cut_index(self, model: &ModelSpec) -> Result<usize, SplitError> {
        let convs = model.conv_count();
        if usize::from(self.0) > convs {
            return Err(SplitError::Config(format!(
                "split point {} exceeds the model's {convs} convolution layers",
                self.0
            )));
        }
        if self.0 == 0 {
            return Ok(0);
        }
        let layers = model.layers();
        let mut seen = 0;
        let mut i = 0;
        while i < layers.len() {
            if matches!(layers[i], LayerSpec::Conv2d { .. }) {
                seen += 1;
                if seen == usize::from(self.0) {
                    i += 1;
                    while i < layers.len()
                        && matches!(layers[i], LayerSpec::Relu | LayerSpec::MaxPool2d)
                    {
                        i += 1;
                    }
                    return Ok(i);
                }
            }
            i += 1;
        }
        unreachable!("conv count checked above")
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SP{}", self.0)
    }
}

/// One side of a split model together with the parameters it owns.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPart {
    pub stack: LayerStack,
    pub params: ParamSet,
}

/// Split-layer activations for one batch, with the labels the server needs
/// to compute the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SmashedData {
    pub batch_id: u64,
    pub activation: Tensor,
    pub labels: Vec<usize>,
}

/// Gradient of the loss w.r.t. the split-layer activations.
#[derive(Clone, Debug, PartialEq)]
pub struct SmashedGrad {
    pub batch_id: u64,
    pub loss: f32,
    pub grad: Tensor,
}

/// Device-side forward state kept until the matching [`SmashedGrad`] arrives.
#[derive(Clone, Debug, PartialEq)]
pub struct Retained {
    pub batch_id: u64,
    pub pass: ForwardPass,
}

pub struct ServerStep {
    pub smashed_grad: SmashedGrad,
    pub grads: ParamSet,
}

pub fn split(
    model: &ModelSpec,
    params: &ParamSet,
    spec: SplitSpec,
) -> Result<(ModelPart, ModelPart), SplitError> {
    params.validate(model.stack())?;
    let (device_stack, server_stack) = split_stacks(model, spec)?;
    let device_params = params.subset(&device_stack.param_indices());
    let server_params = params.subset(&server_stack.param_indices());
    Ok((
        ModelPart {
            stack: device_stack,
            params: device_params,
        },
        ModelPart {
            stack: server_stack,
            params: server_params,
        },
    ))
}

/// Layer stacks of the device and server halves.
pub fn split_stacks(
    model: &ModelSpec,
    spec: SplitSpec,
) -> Result<(LayerStack, LayerStack), SplitError> {
    let cut = spec.cut_index(model)?;
    Ok(model.stack().split_at(cut)?)
}

/// Splits a full parameter set into (device, server) halves by key.
pub fn split_params(
    model: &ModelSpec,
    spec: SplitSpec,
    params: &ParamSet,
) -> Result<(ParamSet, ParamSet), SplitError> {
    let (d, s) = split(model, params, spec)?;
    Ok((d.params, s.params))
}

pub fn device_forward(
    part: &ModelPart,
    batch: &Batch,
    batch_id: u64,
) -> Result<(SmashedData, Retained), SplitError> {
    let pass = forward(&part.stack, &part.params, &batch.inputs)?;
    let smashed = SmashedData {
        batch_id,
        activation: pass.output().clone(),
        labels: batch.labels.clone(),
    };
    Ok((smashed, Retained { batch_id, pass }))
}

/// Server half of a training step: forward from the smashed data, loss,
/// backward down to the split layer, then one optimizer step. The reported
/// loss is the one computed before the step.
pub fn server_forward_backward(
    part: &mut ModelPart,
    smashed: &SmashedData,
    opt: &mut OptimizerState,
) -> Result<ServerStep, SplitError> {
    let pass = forward(&part.stack, &part.params, &smashed.activation)?;
    let (loss, dlogits) = loss_and_grad(pass.output(), &smashed.labels)?;
    let g = backward(&part.stack, &part.params, &pass, &dlogits, true)?;
    opt.step(&mut part.params, &g.params)?;
    let grad = g.input.expect("input gradient requested");
    Ok(ServerStep {
        smashed_grad: SmashedGrad {
            batch_id: smashed.batch_id,
            loss,
            grad,
        },
        grads: g.params,
    })
}

pub fn device_backward(
    part: &mut ModelPart,
    retained: Option<&Retained>,
    sgrad: &SmashedGrad,
    opt: &mut OptimizerState,
) -> Result<ParamSet, SplitError> {
    let retained =
        retained.ok_or_else(|| SplitError::Usage("no retained activations for backward".into()))?;
    if retained.batch_id != sgrad.batch_id {
        return Err(SplitError::Protocol(format!(
            "smashed gradient for batch {} but batch {} is in flight",
            sgrad.batch_id, retained.batch_id
        )));
    }
    let grads = backward(
        &part.stack,
        &part.params,
        &retained.pass,
        &sgrad.grad,
        false,
    )?
    .params;
    opt.step(&mut part.params, &grads)?;
    Ok(grads)
}

/// Merges the two halves back into a full-model parameter set.
pub fn assemble_full_params(
    model: &ModelSpec,
    device: &ParamSet,
    server: &ParamSet,
) -> Result<ParamSet, SplitError> {
    let mut full = device.clone();
    for (k, p) in server.iter() {
        if full.insert(k, p.clone()).is_some() {
            return Err(SplitError::Protocol(format!(
                "layer {k} present on both sides"
            )));
        }
    }
    full.validate(model.stack())
        .map_err(|e| SplitError::Protocol(e.to_string()))?;
    Ok(full)
}
