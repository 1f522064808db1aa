use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::{LayerStack, ModelSpec};
use super::{NnError, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// Parameters of the parameterized layers, keyed by full-model layer index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamSet {
    layers: BTreeMap<usize, LayerParams>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-zero parameters matching `stack`.
    pub fn zeros_for(stack: &LayerStack) -> Self {
        let mut set = Self::new();
        for idx in stack.param_indices() {
            let (ws, bs) = stack
                .layer(idx)
                .and_then(|l| l.param_shapes())
                .expect("parameterized layer");
            set.insert(
                idx,
                LayerParams {
                    weight: Tensor::zeros(&ws),
                    bias: Tensor::zeros(&bs),
                },
            );
        }
        set
    }

    pub fn insert(&mut self, index: usize, params: LayerParams) -> Option<LayerParams> {
        self.layers.insert(index, params)
    }

    pub fn get(&self, index: usize) -> Option<&LayerParams> {
        self.layers.get(&index)
    }

    pub fn get_mut(&mut self, index: usize) -> Option<&mut LayerParams> {
        self.layers.get_mut(&index)
    }

    pub fn remove(&mut self, index: usize) -> Option<LayerParams> {
        self.layers.remove(&index)
    }

    pub fn keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LayerParams)> {
        self.layers.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut LayerParams)> {
        self.layers.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|(k, v)| (*k, v.zeros_like()))
                .collect(),
        }
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.layers
            .values()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers
            .values()
            .all(|p| p.weight.is_all_zero() && p.bias.is_all_zero())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .values()
            .all(|p| p.weight.is_finite() && p.bias.is_finite())
    }

    /// Moves out the entries whose keys are in `keys`.
    pub fn take(&mut self, keys: &[usize]) -> ParamSet {
        let mut out = ParamSet::new();
        for &k in keys {
            if let Some(p) = self.layers.remove(&k) {
                out.insert(k, p);
            }
        }
        out
    }

    /// Copies of the entries whose keys are in `keys`.
    pub fn subset(&self, keys: &[usize]) -> ParamSet {
        let mut out = ParamSet::new();
        for &k in keys {
            if let Some(p) = self.layers.get(&k) {
                out.insert(k, p.clone());
            }
        }
        out
    }

    /// Checks that keys and tensor shapes match `stack` exactly.
    pub fn validate(&self, stack: &LayerStack) -> Result<(), NnError> {
        let expected = stack.param_indices();
        let actual: Vec<usize> = self.keys().collect();
        if expected != actual {
            return Err(NnError::Config(format!(
                "parameter keys {actual:?} do not match layers {expected:?}"
            )));
        }
        for idx in expected {
            let (ws, bs) = stack
                .layer(idx)
                .and_then(|l| l.param_shapes())
                .expect("parameterized layer");
            let p = &self.layers[&idx];
            if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                return Err(NnError::Shape {
                    layer: idx,
                    expected: ws,
                    actual: p.weight.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Same keys and tensor shapes as `other`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.weight.shape() == b.weight.shape()
                        && a.bias.shape() == b.bias.shape()
                })
    }
}

impl FromIterator<(usize, LayerParams)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (usize, LayerParams)>>(iter: I) -> Self {
        Self {
            layers: iter.into_iter().collect(),
        }
    }
}

/// Glorot-uniform weights, zero biases; layers are filled in index order from
/// one ChaCha8 stream seeded with `seed`.
pub fn init_params(model: &ModelSpec, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack = model.stack();
    let mut set = ParamSet::new();
    for idx in stack.param_indices() {
        let layer = stack.layer(idx).expect("index from stack");
        let (ws, bs) = layer.param_shapes().expect("parameterized layer");
        let (fan_in, fan_out) = layer.fans().expect("parameterized layer");
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let weight = Tensor::from_fn(&ws, |_| rng.random_range(-bound..bound));
        set.insert(
            idx,
            LayerParams {
                weight,
                bias: Tensor::zeros(&bs),
            },
        );
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MiniVggWidths;

    fn model() -> ModelSpec {
        ModelSpec::mini_vgg([3, 16, 16], 10, MiniVggWidths::default()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_params(&model(), 7), init_params(&model(), 7));
    }

    #[test]
    fn different_seeds_differ() {
        assert_ne!(init_params(&model(), 7), init_params(&model(), 8));
    }

    #[test]
    fn biases_start_at_zero_and_weights_are_bounded() {
        let m = model();
        let p = init_params(&m, 3);
        p.validate(m.stack()).unwrap();
        for (idx, lp) in p.iter() {
            assert!(lp.bias.is_all_zero());
            let (fi, fo) = m.stack().layer(idx).unwrap().fans().unwrap();
            let bound = (6.0 / (fi + fo) as f64).sqrt() as f32;
            assert!(lp.weight.data().iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn validate_catches_wrong_keys() {
        let m = model();
        let mut p = init_params(&m, 1);
        p.remove(6);
        assert!(p.validate(m.stack()).is_err());
    }
}
