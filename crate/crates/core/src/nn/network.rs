use super::kernels::{self, ConvDims};
use super::layer::{LayerSpec, LayerStack};
use super::params::{LayerParams, ParamSet};
use super::{NnError, Tensor};

/// Everything a backward pass needs from the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass {
    pub input: Tensor,
    /// `activations[i]` is the output of local layer `i`.
    pub activations: Vec<Tensor>,
}

impl ForwardPass {
    /// Output of the last layer (the input itself for an empty stack).
    pub fn output(&self) -> &Tensor {
        self.activations.last().unwrap_or(&self.input)
    }

    pub fn into_output(mut self) -> Tensor {
        self.activations.pop().unwrap_or(self.input)
    }
}

pub struct Gradients {
    pub params: ParamSet,
    pub input: Option<Tensor>,
}

fn layer_params<'a>(
    params: &'a ParamSet,
    idx: usize,
    layer: &LayerSpec,
) -> Result<&'a LayerParams, NnError> {
    let p = params
        .get(idx)
        .ok_or_else(|| NnError::Usage(format!("missing parameters for layer {idx}")))?;
    let (ws, bs) = layer.param_shapes().expect("parameterized layer");
    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
        return Err(NnError::Shape {
            layer: idx,
            expected: ws,
            actual: p.weight.shape().to_vec(),
        });
    }
    Ok(p)
}

fn check_input(stack: &LayerStack, input: &Tensor) -> Result<(), NnError> {
    if input.shape().len() < 2 || input.sample_shape() != stack.input_shape() {
        let mut expected = vec![input.batch()];
        expected.extend_from_slice(stack.input_shape());
        return Err(NnError::Shape {
            layer: stack.first_index(),
            expected,
            actual: input.shape().to_vec(),
        });
    }
    Ok(())
}

fn batched(batch: usize, sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(sample.len() + 1);
    s.push(batch);
    s.extend_from_slice(sample);
    s
}

/// Runs `input` (shape `[B, ..input_shape]`) through every layer of `stack`.
pub fn forward(
    stack: &LayerStack,
    params: &ParamSet,
    input: &Tensor,
) -> Result<ForwardPass, NnError> {
    check_input(stack, input)?;
    let batch = input.batch();
    let mut activations: Vec<Tensor> = Vec::with_capacity(stack.len());
    let mut in_shape = stack.input_shape().to_vec();
    for (i, layer) in stack.layers().iter().enumerate() {
        let idx = stack.first_index() + i;
        let x = activations.last().unwrap_or(input);
        let out_shape = stack.layer_shapes()[i].clone();
        let mut out = Tensor::zeros(&batched(batch, &out_shape));
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => {
                let p = layer_params(params, idx, layer)?;
                let d = ConvDims {
                    batch,
                    in_channels,
                    out_channels,
                    height: in_shape[1],
                    width: in_shape[2],
                };
                kernels::conv2d_forward(
                    d,
                    x.data(),
                    p.weight.data(),
                    p.bias.data(),
                    out.data_mut(),
                );
            }
            LayerSpec::Relu => kernels::relu_forward(x.data(), out.data_mut()),
            LayerSpec::MaxPool2d => {
                let planes = batch * in_shape[0];
                kernels::maxpool_forward(
                    planes,
                    in_shape[1],
                    in_shape[2],
                    x.data(),
                    out.data_mut(),
                );
            }
            LayerSpec::Flatten => out.data_mut().copy_from_slice(x.data()),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let p = layer_params(params, idx, layer)?;
                kernels::dense_forward(
                    batch,
                    in_features,
                    out_features,
                    x.data(),
                    p.weight.data(),
                    p.bias.data(),
                    out.data_mut(),
                );
            }
        }
        activations.push(out);
        in_shape = out_shape;
    }
    Ok(ForwardPass {
        input: input.clone(),
        activations,
    })
}

/// Back-propagates `dout` (gradient w.r.t. the stack output) through `stack`.
///
/// Parameter gradients are always produced; the gradient w.r.t. the stack
/// input only when `want_input_grad` is set.
pub fn backward(
    stack: &LayerStack,
    params: &ParamSet,
    pass: &ForwardPass,
    dout: &Tensor,
    want_input_grad: bool,
) -> Result<Gradients, NnError> {
    if pass.activations.len() != stack.len() {
        return Err(NnError::Usage(format!(
            "forward pass holds {} activations for a {}-layer stack",
            pass.activations.len(),
            stack.len()
        )));
    }
    check_input(stack, &pass.input)?;
    let batch = pass.input.batch();
    for (i, act) in pass.activations.iter().enumerate() {
        if act.shape() != batched(batch, &stack.layer_shapes()[i]).as_slice() {
            return Err(NnError::Usage(format!(
                "stale activation for layer {}",
                stack.first_index() + i
            )));
        }
    }
    if dout.shape() != pass.output().shape() {
        return Err(NnError::Shape {
            layer: stack.first_index() + stack.len().saturating_sub(1),
            expected: pass.output().shape().to_vec(),
            actual: dout.shape().to_vec(),
        });
    }

    let mut grads = ParamSet::zeros_for(stack);
    let mut g = dout.clone();
    for i in (0..stack.len()).rev() {
        let idx = stack.first_index() + i;
        let layer = &stack.layers()[i];
        let x = if i == 0 {
            &pass.input
        } else {
            &pass.activations[i - 1]
        };
        let need_dx = i > 0 || want_input_grad;
        let in_shape = if i == 0 {
            stack.input_shape()
        } else {
            stack.layer_shapes()[i - 1].as_slice()
        };
        let mut dx = if need_dx {
            Some(Tensor::zeros(x.shape()))
        } else {
            None
        };
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => {
                let p = layer_params(params, idx, layer)?;
                let d = ConvDims {
                    batch,
                    in_channels,
                    out_channels,
                    height: in_shape[1],
                    width: in_shape[2],
                };
                let gp = grads.get_mut(idx).expect("zeros_for covers stack");
                kernels::conv2d_backward(
                    d,
                    x.data(),
                    p.weight.data(),
                    g.data(),
                    gp.weight.data_mut(),
                    gp.bias.data_mut(),
                    dx.as_mut().map(|t| t.data_mut()),
                );
            }
            LayerSpec::Relu => {
                if let Some(dx) = dx.as_mut() {
                    kernels::relu_backward(x.data(), g.data(), dx.data_mut());
                }
            }
            LayerSpec::MaxPool2d => {
                if let Some(dx) = dx.as_mut() {
                    let planes = batch * in_shape[0];
                    kernels::maxpool_backward(
                        planes,
                        in_shape[1],
                        in_shape[2],
                        x.data(),
                        g.data(),
                        dx.data_mut(),
                    );
                }
            }
            LayerSpec::Flatten => {
                if let Some(dx) = dx.as_mut() {
                    dx.data_mut().copy_from_slice(g.data());
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let p = layer_params(params, idx, layer)?;
                let gp = grads.get_mut(idx).expect("zeros_for covers stack");
                kernels::dense_backward(
                    batch,
                    in_features,
                    out_features,
                    x.data(),
                    p.weight.data(),
                    g.data(),
                    gp.weight.data_mut(),
                    gp.bias.data_mut(),
                    dx.as_mut().map(|t| t.data_mut()),
                );
            }
        }
        match dx {
            Some(dx) => g = dx,
            None => break,
        }
    }
    let input = if want_input_grad { Some(g) } else { None };
    Ok(Gradients {
        params: grads,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelSpec};

    #[test]
    fn dense_weight_gradient_is_outer_product() {
        // y = W x + b, one sample: dW = dy xᵀ, db = dy, dx = Wᵀ dy.
        let stack = LayerStack::new(
            vec![2],
            vec![LayerSpec::Dense {
                in_features: 2,
                out_features: 2,
            }],
            0,
        )
        .unwrap();
        let mut params = ParamSet::new();
        params.insert(
            0,
            LayerParams {
                weight: Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                bias: Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
            },
        );
        let x = Tensor::new(vec![1, 2], vec![5.0, 7.0]).unwrap();
        let pass = forward(&stack, &params, &x).unwrap();
        assert_eq!(pass.output().data(), &[19.5, 42.5]);
        let dy = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let g = backward(&stack, &params, &pass, &dy, true).unwrap();
        assert_eq!(
            g.params.get(0).unwrap().weight.data(),
            &[5.0, 7.0, -10.0, -14.0]
        );
        assert_eq!(g.params.get(0).unwrap().bias.data(), &[1.0, -2.0]);
        assert_eq!(g.input.unwrap().data(), &[1.0 - 6.0, 2.0 - 8.0]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let m = ModelSpec::mini_vgg([3, 8, 8], 4, Default::default()).unwrap();
        let params = init_params(&m, 5);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 13) as f32 / 13.0);
        let pass = forward(m.stack(), &params, &x).unwrap();
        let g = backward(m.stack(), &params, &pass, &Tensor::zeros(&[2, 4]), true).unwrap();
        assert!(g.params.is_all_zero());
        assert!(g.input.unwrap().is_all_zero());
    }

    #[test]
    fn wrong_input_shape_names_layer() {
        let m = ModelSpec::mini_vgg([3, 8, 8], 4, Default::default()).unwrap();
        let params = init_params(&m, 5);
        let err = forward(m.stack(), &params, &Tensor::zeros(&[1, 1, 8, 8])).unwrap_err();
        assert!(matches!(err, NnError::Shape { layer: 0, .. }), "{err}");
    }

    #[test]
    fn stale_pass_is_rejected() {
        let m = ModelSpec::mini_vgg([3, 8, 8], 4, Default::default()).unwrap();
        let params = init_params(&m, 5);
        let mut pass = forward(m.stack(), &params, &Tensor::zeros(&[1, 3, 8, 8])).unwrap();
        pass.activations.pop();
        assert!(matches!(
            backward(m.stack(), &params, &pass, &Tensor::zeros(&[1, 4]), false),
            Err(NnError::Usage(_))
        ));
    }

    #[test]
    fn empty_stack_is_identity() {
        let stack = LayerStack::new(vec![3, 4, 4], vec![], 0).unwrap();
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| i as f32);
        let pass = forward(&stack, &ParamSet::new(), &x).unwrap();
        assert_eq!(pass.output(), &x);
        let g = backward(&stack, &ParamSet::new(), &pass, &x, true).unwrap();
        assert_eq!(g.input.unwrap(), x);
    }
}
