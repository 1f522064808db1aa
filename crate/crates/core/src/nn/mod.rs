//! Minimal deterministic CNN engine: layers, forward/backward, softmax
//! cross-entropy and momentum SGD over `f32` tensors.

mod kernels;
mod layer;
mod loss;
mod network;
mod optim;
mod params;
mod tensor;

pub use kernels::dot;
pub use layer::{LayerSpec, LayerStack, MiniVggWidths, ModelSpec, KERNEL};
pub use loss::{argmax_rows, loss_and_grad};
pub use network::{backward, forward, ForwardPass, Gradients};
pub use optim::{sgd_step, OptimizerState};
pub use params::{init_params, LayerParams, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {actual:?}")]
    Shape {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("usage error: {0}")]
    Usage(String),
}

/// Inputs `[B, C, H, W]` with one class index per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self, NnError> {
        if inputs.batch() != labels.len() {
            return Err(NnError::Usage(format!(
                "{} labels for {} inputs",
                labels.len(),
                inputs.batch()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Result of one monolithic training step.
pub struct StepOutcome {
    pub loss: f32,
    pub grads: ParamSet,
}

impl ModelSpec {
    pub fn forward(&self, params: &ParamSet, batch: &Batch) -> Result<ForwardPass, NnError> {
        forward(self.stack(), params, &batch.inputs)
    }

    /// Forward, loss, backward and one optimizer step on the whole model.
    pub fn train_step(
        &self,
        params: &mut ParamSet,
        opt: &mut OptimizerState,
        batch: &Batch,
    ) -> Result<StepOutcome, NnError> {
        let pass = self.forward(params, batch)?;
        let (loss, dlogits) = loss_and_grad(pass.output(), &batch.labels)?;
        let grads = backward(self.stack(), params, &pass, &dlogits, false)?.params;
        opt.step(params, &grads)?;
        Ok(StepOutcome { loss, grads })
    }

    /// Fraction of correctly classified samples, evaluated in chunks.
    pub fn accuracy<'a>(
        &self,
        params: &ParamSet,
        batches: impl IntoIterator<Item = &'a Batch>,
    ) -> Result<f64, NnError> {
        let (mut correct, mut total) = (0usize, 0usize);
        for batch in batches {
            let pass = self.forward(params, batch)?;
            correct += argmax_rows(pass.output())
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            total += batch.len();
        }
        Ok(if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        })
    }
}
