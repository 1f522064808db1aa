use super::{NnError, ParamSet};

/// Classical momentum SGD: `v ← μ·v + g; w ← w − η·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    learning_rate: f32,
    momentum: f32,
    velocity: ParamSet,
}

impl OptimizerState {
    /// Zero velocity shaped like `params`.
    pub fn new(learning_rate: f32, momentum: f32, params: &ParamSet) -> Result<Self, NnError> {
        Self::with_velocity(learning_rate, momentum, params.zeros_like())
    }

    pub fn with_velocity(
        learning_rate: f32,
        momentum: f32,
        velocity: ParamSet,
    ) -> Result<Self, NnError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(NnError::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(NnError::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity,
        })
    }

    pub fn learning_rate(&self) -> f32 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn velocity(&self) -> &ParamSet {
        &self.velocity
    }

    pub fn reset(&mut self) {
        self.velocity = self.velocity.zeros_like();
    }

    /// Applies one update to every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), NnError> {
        if !params.same_layout(grads) || !params.same_layout(&self.velocity) {
            return Err(NnError::Usage(
                "parameter, gradient and velocity layouts differ".into(),
            ));
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for (((_, p), (_, g)), (_, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.velocity.iter_mut())
        {
            update(
                p.weight.data_mut(),
                g.weight.data(),
                v.weight.data_mut(),
                lr,
                mu,
            );
            update(p.bias.data_mut(), g.bias.data(), v.bias.data_mut(), lr, mu);
        }
        Ok(())
    }
}

fn update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, mu: f32) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g;
        *w -= lr * *v;
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    opt: &mut OptimizerState,
) -> Result<(), NnError> {
    opt.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerParams, Tensor};

    fn scalar(v: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            0,
            LayerParams {
                weight: Tensor::new(vec![1], vec![v]).unwrap(),
                bias: Tensor::zeros(&[1]),
            },
        );
        p
    }

    fn w(p: &ParamSet) -> f32 {
        p.get(0).unwrap().weight.data()[0]
    }

    #[test]
    fn one_step() {
        let mut p = scalar(1.0);
        let mut opt = OptimizerState::new(0.1, 0.9, &p).unwrap();
        opt.step(&mut p, &scalar(0.5)).unwrap();
        assert_eq!(w(opt.velocity()), 0.5);
        assert!((w(&p) - 0.95).abs() < 1e-7);
    }

    #[test]
    fn two_steps_accumulate_momentum() {
        let mut p = scalar(0.0);
        let mut opt = OptimizerState::new(0.1, 0.9, &p).unwrap();
        opt.step(&mut p, &scalar(1.0)).unwrap();
        opt.step(&mut p, &scalar(1.0)).unwrap();
        assert!((w(opt.velocity()) - 1.9).abs() < 1e-6);
        assert!((w(&p) + 0.29).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = scalar(0.7);
        let mut opt = OptimizerState::new(0.01, 0.9, &p).unwrap();
        opt.step(&mut p, &scalar(0.0)).unwrap();
        assert_eq!(p, scalar(0.7));
    }

    #[test]
    fn rejects_bad_hyperparameters_and_layouts() {
        let p = scalar(0.0);
        assert!(OptimizerState::new(0.0, 0.9, &p).is_err());
        assert!(OptimizerState::new(0.1, 1.0, &p).is_err());
        let mut opt = OptimizerState::new(0.1, 0.0, &p).unwrap();
        let mut q = scalar(0.0);
        assert!(opt.step(&mut q, &ParamSet::new()).is_err());
    }
}
